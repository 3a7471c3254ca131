/**
 * Binary writers for the localization engine's feature-map ("DFMP") and
 * global-descriptor index ("VIDX") formats. All integers little-endian.
 *
 * DFMP: magic, u8 level count, then per level u32 stride/patch/rows/cols/dim
 * followed by float32 data in row-major (row, col, channel) order.
 * VIDX: magic, u32 count, u32 dim, length-prefixed UTF-8 ids, float32 matrix.
 */

export interface LevelGrid {
  stride: number;
  patch: number;
  rows: number;
  cols: number;
  dim: number;
  /** rows * cols * dim floats, row-major */
  data: Float32Array;
}

const FLOAT_MAGIC = 'DFMP';
const INDEX_MAGIC = 'VIDX';

function floatsToBuffer(data: Float32Array): Buffer {
  const buf = Buffer.alloc(data.length * 4);
  for (let i = 0; i < data.length; i++) {
    buf.writeFloatLE(data[i], i * 4);
  }
  return buf;
}

export function encodeFeatureMap(levels: LevelGrid[]): Buffer {
  if (levels.length === 0) {
    throw new Error('a feature map needs at least one level');
  }
  const parts: Buffer[] = [];
  parts.push(Buffer.from(FLOAT_MAGIC, 'ascii'));
  parts.push(Buffer.from([levels.length]));
  for (const level of levels) {
    const expected = level.rows * level.cols * level.dim;
    if (level.data.length !== expected) {
      throw new Error(
        `level data length ${level.data.length} does not match ` +
        `${level.rows}x${level.cols}x${level.dim}`);
    }
    const header = Buffer.alloc(20);
    header.writeUInt32LE(level.stride, 0);
    header.writeUInt32LE(level.patch, 4);
    header.writeUInt32LE(level.rows, 8);
    header.writeUInt32LE(level.cols, 12);
    header.writeUInt32LE(level.dim, 16);
    parts.push(header);
    parts.push(floatsToBuffer(level.data));
  }
  return Buffer.concat(parts);
}

export function encodeGlobalIndex(ids: string[], vectors: Float32Array[]): Buffer {
  if (ids.length !== vectors.length) {
    throw new Error('id/vector count mismatch');
  }
  if (ids.length === 0) {
    throw new Error('an index needs at least one descriptor');
  }
  const dim = vectors[0].length;
  for (const v of vectors) {
    if (v.length !== dim) {
      throw new Error('descriptor dimensions differ');
    }
  }
  const parts: Buffer[] = [];
  parts.push(Buffer.from(INDEX_MAGIC, 'ascii'));
  const counts = Buffer.alloc(8);
  counts.writeUInt32LE(ids.length, 0);
  counts.writeUInt32LE(dim, 4);
  parts.push(counts);
  for (const id of ids) {
    const raw = Buffer.from(id, 'utf-8');
    const len = Buffer.alloc(4);
    len.writeUInt32LE(raw.length, 0);
    parts.push(len, raw);
  }
  for (const v of vectors) {
    parts.push(floatsToBuffer(v));
  }
  return Buffer.concat(parts);
}
