"""Command-line surface: index, localize, evaluate, render, synth.

Exit codes: 0 on success, 2 when some queries failed to localize, 1 on
fatal errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, apply_overrides, load_config_file
from .evaluation import errors_from_records, localized_rate, median_errors
from .features import save_pyramid, save_thresholds
from .geometry import Intrinsics, pose_from_numbers
from .pipeline import (
    prepare_database,
    read_records,
    run_pipeline,
    write_records,
)
from .retrieval import save_index, save_vocabulary
from .scene import load_database, load_queries, save_image, write_database, write_queries
from .synthetic import DatabaseGridSpec, QuerySpec, generate_synthetic_scene
from .verification import (
    densepv_score,
    entries_within_radius,
    error_heatmap,
    fill_holes,
    synthesize_view,
)


def _config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, cfg)
    overrides = {}
    if getattr(args, "top_n", None) is not None:
        overrides["top_n"] = args.top_n
    if getattr(args, "keep", None) is not None:
        overrides["keep"] = args.keep
    if getattr(args, "binary", None) is not None:
        overrides["binary"] = args.binary
    if getattr(args, "no_densepv", False):
        overrides["use_densepv"] = "false"
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "features_dir", None):
        overrides["features_dir"] = args.features_dir
    return apply_overrides(cfg, overrides)


def _cmd_synth(args) -> int:
    out = Path(args.out)
    extent = tuple(float(x) for x in args.extent.split("x"))
    w, h = (int(x) for x in args.image_size.split("x"))
    db_spec = DatabaseGridSpec(nx=args.db_nx, ny=args.db_ny, yaw_count=args.db_yaws,
                               image_size=(w, h))
    q_spec = QuerySpec(count=args.queries, image_size=(w, h))
    database, queries, _ = generate_synthetic_scene(
        args.seed, extent=extent, db_spec=db_spec, query_spec=q_spec,
        confusers=args.confusers)
    manifest = write_database(out / "database", database)
    qmanifest = write_queries(out / "queries", queries)
    print(f"wrote {len(database)} database entries -> {manifest}")
    print(f"wrote {len(queries)} queries -> {qmanifest}")
    return 0


def _cmd_index(args) -> int:
    cfg = _config_from_args(args)
    entries = load_database(args.database)
    prepared = prepare_database(entries, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_vocabulary(out / "vocabulary.vvoc", prepared.vocab)
    save_index(out / "index.vidx", prepared.index)
    features = out / "features"
    features.mkdir(exist_ok=True)
    for entry, pyramid in zip(prepared.entries, prepared.pyramids):
        save_pyramid(features / f"{entry.id}.dfmp", pyramid)
    if prepared.thresholds is not None:
        save_thresholds(out / "thresholds.dfth", prepared.thresholds)
    print(f"indexed {len(entries)} entries -> {out}")
    return 0


def _cmd_localize(args) -> int:
    cfg = _config_from_args(args)
    entries = load_database(args.database)
    queries = load_queries(args.queries)
    records = run_pipeline(entries, queries, cfg)
    write_records(args.out, records)
    failures = sum(1 for r in records if r.pose is None)
    print(f"localized {len(records) - failures}/{len(records)} queries -> {args.out}")
    return 2 if failures else 0


def _cmd_evaluate(args) -> int:
    records = read_records(args.records)
    errors = errors_from_records(records)
    if not errors:
        print("no records carry ground truth; nothing to evaluate", file=sys.stderr)
        return 1
    curve = localized_rate(errors, angle_gate=args.angle_gate)
    med = median_errors(errors)
    print(curve.format_table())
    print(f"median: {med[0]:.4f} m, {med[1]:.4f} deg over {len(errors)} queries")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("threshold_m,rate_percent\n")
            for t, r in curve.as_rows():
                fh.write(f"{t},{r}\n")
        print(f"curve -> {args.out}")
    return 0


def _cmd_render(args) -> int:
    entries = load_database(args.database)
    pose = pose_from_numbers([float(x) for x in args.pose.split()])
    if args.query:
        from .scene import load_image

        query_rgb = load_image(args.query)
        h, w = query_rgb.shape[:2]
    else:
        query_rgb = None
        w, h = (int(x) for x in args.size.split("x"))
    f = args.focal if args.focal else entries[0].K.f
    K = Intrinsics(f=f, cx=w / 2.0, cy=h / 2.0, width=w, height=h)

    in_range = entries_within_radius(entries, pose.center, args.radius)
    if not in_range:
        print("no database entries within radius of the pose", file=sys.stderr)
        return 1
    view = synthesize_view(in_range, pose, K)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    filled = np.rint(np.clip(fill_holes(view), 0, 255)).astype(np.uint8)
    save_image(out / "synthesized.png", filled)
    print(f"synthesized view -> {out / 'synthesized.png'}")
    if query_rgb is not None:
        heat = error_heatmap(query_rgb, view)
        save_image(out / "error_heatmap.png",
                   np.stack([heat, np.zeros_like(heat), 255 - heat], axis=-1))
        score = densepv_score(query_rgb, view)
        save_image(out / "query.png", query_rgb)
        print(f"error heatmap -> {out / 'error_heatmap.png'} "
              f"(similarity {score.similarity:.4f}, coverage {score.valid_fraction:.2f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="denseloc",
        description="Indoor visual localization: retrieval, dense matching, "
                    "robust pose estimation, and verification by view synthesis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RGBD scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", default="6x6x3", help="room size in meters, WxDxH")
    p.add_argument("--db-nx", type=int, default=3)
    p.add_argument("--db-ny", type=int, default=3)
    p.add_argument("--db-yaws", type=int, default=4)
    p.add_argument("--queries", type=int, default=25)
    p.add_argument("--image-size", default="384x288")
    p.add_argument("--confusers", action="store_true",
                   help="duplicate wall textures to create ambiguity")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("index", help="build vocabulary, retrieval index, feature maps")
    p.add_argument("--database", required=True, help="database manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--binary", choices=["on", "off"])
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("localize", help="run the full pipeline on a query set")
    p.add_argument("--database", required=True)
    p.add_argument("--queries", required=True, help="query manifest json")
    p.add_argument("--out", required=True, help="records file (one JSON per line)")
    p.add_argument("--config")
    p.add_argument("--top-n", type=int, dest="top_n")
    p.add_argument("--keep", type=int)
    p.add_argument("--binary", choices=["on", "off"])
    p.add_argument("--no-densepv", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--features-dir", dest="features_dir")
    p.set_defaults(func=_cmd_localize)

    p = sub.add_parser("evaluate", help="rate table and medians from records")
    p.add_argument("--records", required=True)
    p.add_argument("--out", help="CSV output for the rate curve")
    p.add_argument("--angle-gate", type=float, default=10.0)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("render", help="synthesize a view from a pose")
    p.add_argument("--database", required=True)
    p.add_argument("--pose", required=True, help="12 numbers: rotation row-major, then translation")
    p.add_argument("--out", required=True)
    p.add_argument("--query", help="query image for the error heatmap")
    p.add_argument("--size", default="384x288", help="render size when no query given")
    p.add_argument("--focal", type=float)
    p.add_argument("--radius", type=float, default=10.0)
    p.set_defaults(func=_cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
