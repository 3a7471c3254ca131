import * as fs from 'fs';
import * as path from 'path';

import * as tf from '@tensorflow/tfjs';

import { LevelGrid, encodeFeatureMap, encodeGlobalIndex } from './formats';
import { LAYER_GEOMETRY, buildNetwork } from './network';
import { readPng } from './png';

export interface ExportJob {
  /** image files to process, each producing one "<basename>.dfmp" */
  imagePaths: string[];
  /** layer played by the coarse (larger-stride) feature role */
  coarseLayer: string;
  /** layer played by the fine feature role */
  fineLayer: string;
  outDir: string;
  /** L2-normalize every spatial cell's descriptor (default true) */
  normalize: boolean;
  seed?: number;
}

export interface ExportResult {
  featureFiles: string[];
  indexFile: string;
}

function imageId(p: string): string {
  return path.basename(p).replace(/\.[^.]+$/, '');
}

function cellNormalize(data: Float32Array, cells: number, dim: number): void {
  for (let c = 0; c < cells; c++) {
    let sq = 0;
    for (let d = 0; d < dim; d++) {
      const v = data[c * dim + d];
      sq += v * v;
    }
    const norm = Math.sqrt(sq);
    if (norm > 0) {
      for (let d = 0; d < dim; d++) {
        data[c * dim + d] /= norm;
      }
    }
  }
}

function vectorNormalize(v: Float32Array): Float32Array {
  let sq = 0;
  for (const x of v) {
    sq += x * x;
  }
  const norm = Math.sqrt(sq);
  if (norm > 0) {
    for (let i = 0; i < v.length; i++) {
      v[i] /= norm;
    }
  }
  return v;
}

async function layerGrid(activation: tf.Tensor4D, layerName: string,
                         normalize: boolean): Promise<LevelGrid> {
  const geom = LAYER_GEOMETRY[layerName];
  const [, rows, cols, dim] = activation.shape;
  const data = new Float32Array(await activation.data());
  if (normalize) {
    cellNormalize(data, rows * cols, dim);
  }
  return { stride: geom.stride, patch: geom.patch, rows, cols, dim, data };
}

export async function exportFeatureMaps(job: ExportJob): Promise<ExportResult> {
  const layers = [job.coarseLayer, job.fineLayer];
  if (job.coarseLayer === job.fineLayer) {
    throw new Error('coarse and fine roles need two distinct layers');
  }
  for (const name of layers) {
    if (!(name in LAYER_GEOMETRY)) {
      throw new Error(`unknown layer ${name}`);
    }
  }
  if (LAYER_GEOMETRY[job.coarseLayer].stride <= LAYER_GEOMETRY[job.fineLayer].stride) {
    throw new Error('the coarse layer must have the larger stride');
  }
  if (job.imagePaths.length === 0) {
    throw new Error('no images to export');
  }
  fs.mkdirSync(job.outDir, { recursive: true });

  const net = buildNetwork(job.seed ?? 42);
  const featureFiles: string[] = [];
  const ids: string[] = [];
  const globals: Float32Array[] = [];
  try {
    for (const imagePath of job.imagePaths) {
      const image = readPng(imagePath);
      const pixels = tf.tensor4d(
        Float32Array.from(image.rgb, (v) => v / 255),
        [1, image.height, image.width, 3]);
      const [coarseT, fineT] = net.run(pixels, [job.coarseLayer, job.fineLayer]);
      const coarse = await layerGrid(coarseT, job.coarseLayer, job.normalize);
      const fine = await layerGrid(fineT, job.fineLayer, job.normalize);

      // global descriptor: mean-pooled coarse activations, unit-normalized
      const pooled = tf.tidy(() => coarseT.mean([1, 2]).squeeze());
      const globalVec = vectorNormalize(new Float32Array(await pooled.data()));
      pooled.dispose();
      coarseT.dispose();
      fineT.dispose();
      pixels.dispose();

      const outPath = path.join(job.outDir, `${imageId(imagePath)}.dfmp`);
      fs.writeFileSync(outPath, encodeFeatureMap([coarse, fine]));
      featureFiles.push(outPath);
      ids.push(imageId(imagePath));
      globals.push(globalVec);
    }
  } finally {
    net.dispose();
  }

  const indexFile = path.join(job.outDir, 'global_descriptors.vidx');
  fs.writeFileSync(indexFile, encodeGlobalIndex(ids, globals));
  return { featureFiles, indexFile };
}
