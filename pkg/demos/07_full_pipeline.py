"""The whole engine end to end on a synthetic room, plus the ablations.

Runs retrieval -> dense matching -> P3P-LO-RANSAC -> DensePV once, then
re-derives what inlier-count selection (no verification) and plain
retrieval would have answered, from the same records.
"""

import numpy as np

from denseloc.config import PipelineConfig
from denseloc.evaluation import localized_rate, median_errors
from denseloc.geometry import pose_error
from denseloc.pipeline import run_pipeline, select_from_record
from denseloc.synthetic import DatabaseGridSpec, QuerySpec, generate_synthetic_scene

database, queries, _ = generate_synthetic_scene(
    2, db_spec=DatabaseGridSpec(nx=2, ny=2, yaw_count=4, image_size=(256, 192)),
    query_spec=QuerySpec(count=6, image_size=(256, 192)))
print(f"{len(database)} database views, {len(queries)} queries")

cfg = PipelineConfig(seed=0, top_n=8, keep=4, h_max_iter=200,
                     render_radius=4.0, vocab_train_size=6000)
records = run_pipeline(database, queries, cfg)

gt = {q.id: q.gt_pose for q in queries}
for mode in ("full", "no_densepv", "retrieval_only"):
    errors = []
    for r in records:
        pose = select_from_record(r, mode)
        if pose is not None:
            errors.append(pose_error(pose, gt[r.query_id]))
    if not errors:
        continue
    med = median_errors(errors)
    rate = localized_rate(errors, thresholds=(0.5,), angle_gate=10.0).rates[0]
    print(f"{mode:>15}: rate@0.5m {rate:5.1f}%   median {med[0]:.3f} m / {med[1]:.2f} deg")
