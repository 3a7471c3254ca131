/**
 * A small fixed-weight convolutional stack standing in for a pretrained
 * backbone. Weights are seeded, so exports are byte-reproducible. Layer
 * names "conv3" (stride 4) and "conv5" (stride 16) are the intended fine
 * and coarse feature roles; valid padding keeps the sliding-window grid
 * arithmetic exact.
 */

import * as tf from '@tensorflow/tfjs';

export interface LayerGeometry {
  /** effective stride in input pixels */
  stride: number;
  /** receptive field (patch size) in input pixels */
  patch: number;
  channels: number;
}

export const LAYER_GEOMETRY: Record<string, LayerGeometry> = {
  conv1: { stride: 2, patch: 3, channels: 16 },
  conv3: { stride: 4, patch: 7, channels: 32 },
  conv4: { stride: 8, patch: 15, channels: 48 },
  conv5: { stride: 16, patch: 31, channels: 64 },
};

export function availableLayers(): string[] {
  return Object.keys(LAYER_GEOMETRY);
}

export interface FeatureNetwork {
  /** activations for the requested layers, in request order */
  run(image: tf.Tensor4D, layers: string[]): tf.Tensor4D[];
  dispose(): void;
}

export function buildNetwork(seed = 42): FeatureNetwork {
  const input = tf.input({ shape: [null, null, 3] as unknown as number[] });
  let x = input;
  const outputs: Record<string, tf.SymbolicTensor> = {};
  const specs: Array<[string, number, boolean]> = [
    ['conv1', 16, true],
    ['conv3', 32, true],
    ['conv4', 48, true],
    ['conv5', 64, false],
  ];
  specs.forEach(([name, filters, relu], i) => {
    const layer = tf.layers.conv2d({
      name,
      filters,
      kernelSize: 3,
      strides: 2,
      padding: 'valid',
      activation: relu ? 'relu' : undefined,
      kernelInitializer: tf.initializers.glorotUniform({ seed: seed + i }),
      biasInitializer: 'zeros',
    });
    x = layer.apply(x) as tf.SymbolicTensor;
    outputs[name] = x;
  });

  const model = tf.model({ inputs: input, outputs: Object.values(outputs) });
  const order = Object.keys(outputs);

  return {
    run(image: tf.Tensor4D, layers: string[]): tf.Tensor4D[] {
      for (const name of layers) {
        if (!(name in LAYER_GEOMETRY)) {
          throw new Error(`unknown layer ${name}; available: ${order.join(', ')}`);
        }
      }
      const all = model.predict(image) as tf.Tensor[];
      const byName = new Map(order.map((name, i) => [name, all[i] as tf.Tensor4D]));
      const wanted = layers.map((name) => byName.get(name)!);
      for (const [name, t] of byName) {
        if (!layers.includes(name)) {
          t.dispose();
        }
      }
      return wanted;
    },
    dispose() {
      model.dispose();
    },
  };
}
