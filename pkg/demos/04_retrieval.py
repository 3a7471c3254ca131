"""Global descriptors by VLAD aggregation and candidate retrieval."""

import numpy as np

from denseloc.features import extract_dense
from denseloc.retrieval import aggregate, build_index, retrieve_topn, train_vocabulary
from denseloc.synthetic import DatabaseGridSpec, QuerySpec, generate_synthetic_scene

database, queries, _ = generate_synthetic_scene(
    5, db_spec=DatabaseGridSpec(nx=2, ny=2, yaw_count=4, image_size=(256, 192)),
    query_spec=QuerySpec(count=3, image_size=(256, 192)))

pyramids = [extract_dense(e.rgb) for e in database]

# k-means vocabulary over the database's fine descriptors
sample = np.concatenate([p.fine.flat() for p in pyramids])
sample = sample[np.any(sample != 0, axis=1)]
vocab = train_vocabulary(sample[:8000], k=32, seed=0)
print(f"vocabulary: {vocab.k} centroids, dim {vocab.dim}")

globals_ = np.stack([aggregate(p, vocab) for p in pyramids])
print(f"global descriptors: dim {globals_.shape[1]} "
      f"(= k x dim = {vocab.k} x {vocab.dim})")

index = build_index([e.id for e in database], globals_.astype(np.float32), vocab)

q = queries[0]
qdesc = aggregate(extract_dense(q.rgb), vocab)
for db_id, dist in retrieve_topn(index, qdesc, n=5):
    entry = next(e for e in database if e.id == db_id)
    gap = np.linalg.norm(entry.pose.center - q.gt_pose.center)
    print(f"  {db_id}: descriptor distance {dist:.4f}, camera {gap:.2f} m away")
