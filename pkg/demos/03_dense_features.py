"""Dense descriptor grids: extraction, RootSIFT, binarization, Hamming matching."""

import numpy as np

from denseloc.features import (
    binarize,
    descriptor_distance,
    extract_dense,
    fit_binarizer,
    hamming_distance,
)
from denseloc.synthetic import DatabaseGridSpec, QuerySpec, generate_synthetic_scene

database, _, _ = generate_synthetic_scene(
    3, db_spec=DatabaseGridSpec(nx=2, ny=1, yaw_count=2, image_size=(256, 192)),
    query_spec=QuerySpec(count=1, image_size=(256, 192)))

pyr = extract_dense(database[0].rgb)
print(f"coarse grid: {pyr.coarse.rows}x{pyr.coarse.cols} cells, "
      f"stride {pyr.coarse.stride}, patch {pyr.coarse.patch}")
print(f"fine grid:   {pyr.fine.rows}x{pyr.fine.cols} cells, "
      f"stride {pyr.fine.stride}, patch {pyr.fine.patch}")

norms = np.linalg.norm(pyr.fine.flat(), axis=1)
print(f"descriptors: dim {pyr.fine.dim}, unit-norm {np.sum(np.abs(norms-1)<1e-6)}, "
      f"empty {np.sum(norms == 0)}")

# Binarization: per-dimension median thresholds, strict > rule.
sample = np.concatenate([extract_dense(e.rgb).fine.flat() for e in database])
sample = sample[np.any(sample != 0, axis=1)]
thresholds = fit_binarizer(sample, min_sample=1000)
packed = binarize(pyr.fine, thresholds)
float_bytes = pyr.fine.descriptors.nbytes
print(f"storage: {float_bytes} bytes float32 -> {packed.bits.nbytes} bytes packed "
      f"(factor {float_bytes // packed.bits.nbytes})")

# Hamming distances approximate the float ranking.
a = pyr.fine.flat()[500]
b = pyr.fine.flat()[501]
ba = packed.flat()[500]
bb = packed.flat()[501]
print(f"float L2 {descriptor_distance(a, b, 'float'):.3f}  "
      f"hamming {int(hamming_distance(ba, bb))} bits")
