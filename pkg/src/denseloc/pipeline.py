"""End-to-end localization pipeline.

Per query: retrieve top-N candidates by global descriptor, re-rank them by
dense-matching inlier counts, estimate a pose per kept candidate with
P3P-LO-RANSAC, score each hypothesis by view synthesis, and select the
best. Every stage records diagnostics; per-query failures never abort the
batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import PipelineConfig
from .features import (
    binarize,
    extract_dense,
    fit_binarizer,
    load_pyramid,
)
from .geometry import Intrinsics, Pose, PoseError, backproject, pose_error, pose_from_numbers, pose_to_numbers
from .matching import mutual_nn, refine_fine, rerank, verify_homographies
from .pose_solver import Correspondence2D3D, p3p_lo_ransac
from .retrieval import aggregate, build_index, retrieve_topn, train_vocabulary
from .scene import QueryImage
from .verification import (
    VerificationScore,
    densepv_score,
    entries_within_radius,
    select_best,
    synthesize_view,
)


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class CandidateReport:
    """Diagnostics for one retrieval candidate of one query."""

    db_id: str
    retrieval_rank: int
    retrieval_distance: float
    match_score: int
    densepe_inliers: int
    pose: list | None  # 12 numbers, None when RANSAC failed
    densepv_similarity: float | None
    densepv_valid_fraction: float | None
    densepv_usable: bool

    def to_json(self) -> dict:
        return {
            "db_id": self.db_id,
            "retrieval_rank": self.retrieval_rank,
            "retrieval_distance": self.retrieval_distance,
            "match_score": self.match_score,
            "densepe_inliers": self.densepe_inliers,
            "pose": self.pose,
            "densepv_similarity": self.densepv_similarity,
            "densepv_valid_fraction": self.densepv_valid_fraction,
            "densepv_usable": self.densepv_usable,
        }

    @staticmethod
    def from_json(d: dict) -> "CandidateReport":
        return CandidateReport(**d)


@dataclass(frozen=True)
class LocalizationRecord:
    """Outcome and per-stage diagnostics for one query."""

    query_id: str
    pose: Pose | None
    selected_db_id: str | None
    retrieval_rank_used: int | None
    densepe_inliers: int | None
    densepv_similarity: float | None
    candidates: tuple = field(default=())
    retrieval_top1_pose: list | None = None
    error: PoseError | None = None
    has_ground_truth: bool = False
    failure: str | None = None

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "pose": pose_to_numbers(self.pose) if self.pose is not None else None,
            "selected_db_id": self.selected_db_id,
            "retrieval_rank_used": self.retrieval_rank_used,
            "densepe_inliers": self.densepe_inliers,
            "densepv_similarity": self.densepv_similarity,
            "candidates": [c.to_json() for c in self.candidates],
            "retrieval_top1_pose": self.retrieval_top1_pose,
            "error_m": self.error.positional if self.error else None,
            "error_deg": self.error.angular if self.error else None,
            "has_ground_truth": self.has_ground_truth,
            "failure": self.failure,
        }

    @staticmethod
    def from_json(d: dict) -> "LocalizationRecord":
        err = None
        if d.get("error_m") is not None:
            err = PoseError(positional=d["error_m"], angular=d["error_deg"])
        return LocalizationRecord(
            query_id=d["query_id"],
            pose=pose_from_numbers(d["pose"]) if d.get("pose") else None,
            selected_db_id=d.get("selected_db_id"),
            retrieval_rank_used=d.get("retrieval_rank_used"),
            densepe_inliers=d.get("densepe_inliers"),
            densepv_similarity=d.get("densepv_similarity"),
            candidates=tuple(CandidateReport.from_json(c) for c in d.get("candidates", [])),
            retrieval_top1_pose=d.get("retrieval_top1_pose"),
            error=err,
            has_ground_truth=d.get("has_ground_truth", False),
            failure=d.get("failure"),
        )


def write_records(path, records) -> None:
    """Line-delimited JSON, one record per query, byte-deterministic."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_records(path) -> list[LocalizationRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(LocalizationRecord.from_json(json.loads(line)))
    return out


@dataclass
class PreparedDatabase:
    entries: list
    pyramids: list
    vocab: object
    index: object
    thresholds: np.ndarray | None = None
    match_grids: list = field(default_factory=list)  # (coarse, fine) per entry


def _load_or_extract(image, image_id: str, config: PipelineConfig):
    if config.features_dir:
        path = Path(config.features_dir) / f"{image_id}.dfmp"
        if not path.is_file():
            raise PipelineError(f"feature map {path} not found for {image_id!r}")
        return load_pyramid(path)
    return extract_dense(image, config.feature_config())


def prepare_database(entries, config: PipelineConfig) -> PreparedDatabase:
    """Extract (or load) features, train the vocabulary, build the index."""
    entries = list(entries)
    if not entries:
        raise PipelineError("empty database")
    pyramids = [_load_or_extract(e.rgb, e.id, config) for e in entries]

    rng = np.random.default_rng(config.seed)
    stacks = [p.fine.flat() for p in pyramids]
    sample = np.concatenate(stacks, axis=0)
    sample = sample[np.any(sample != 0, axis=1)]
    if sample.shape[0] > config.vocab_train_size:
        pick = rng.choice(sample.shape[0], size=config.vocab_train_size, replace=False)
        sample = sample[np.sort(pick)]
    vocab = train_vocabulary(sample, k=config.vocab_k, seed=config.seed)

    globals_ = np.stack([aggregate(p, vocab) for p in pyramids]).astype(np.float32)
    index = build_index([e.id for e in entries], globals_, vocab)

    thresholds = None
    match_grids = [(p.coarse, p.fine) for p in pyramids]
    if config.binary:
        thresholds = fit_binarizer(sample, min_sample=min(config.binarizer_min_sample,
                                                          sample.shape[0]))
        match_grids = [
            (binarize(p.coarse, thresholds), binarize(p.fine, thresholds))
            for p in pyramids
        ]
    return PreparedDatabase(entries=entries, pyramids=pyramids, vocab=vocab,
                            index=index, thresholds=thresholds,
                            match_grids=match_grids)


def _working_image(query: QueryImage, config: PipelineConfig):
    """Query image at working resolution with matching intrinsics."""
    h, w = query.rgb.shape[:2]
    long_side = max(w, h)
    if long_side <= config.max_working_size:
        return query.rgb, query.intrinsics
    factor = config.max_working_size / long_side
    nw, nh = int(round(w * factor)), int(round(h * factor))
    img = np.asarray(
        Image.fromarray(query.rgb).resize((nw, nh), Image.LANCZOS), dtype=np.uint8
    )
    K = Intrinsics(f=query.f * factor, cx=nw / 2.0, cy=nh / 2.0, width=nw, height=nh)
    return img, K


def _correspondences(verdict, entry, config) -> list[Correspondence2D3D]:
    corrs = []
    for m in verdict.inliers:
        x, y = m.db_pixel
        iu = int(round(x))
        iv = int(round(y))
        if not (0 <= iu < entry.K.width and 0 <= iv < entry.K.height):
            continue
        depth = float(entry.depth.values[iv, iu])
        if depth <= 0:
            continue
        point = backproject((x, y), depth, entry.pose, entry.K)
        corrs.append(Correspondence2D3D(pixel=m.q_pixel, point=point))
    return corrs


def localize_query(query: QueryImage, prepared: PreparedDatabase,
                   config: PipelineConfig, query_index: int = 0) -> LocalizationRecord:
    entries = prepared.entries
    by_id = {e.id: i for i, e in enumerate(entries)}
    qbase = (config.seed * 1000003 + query_index * 7919) & 0x7FFFFFFF

    image, K = _working_image(query, config)
    pyramid = _load_or_extract(image, query.id, config)
    qdesc = aggregate(pyramid, prepared.vocab)
    ranked = retrieve_topn(prepared.index, qdesc, n=config.top_n)
    if not ranked:
        return _failure_record(query, "retrieval returned no candidates")

    top1_entry = entries[by_id[ranked[0][0]]]
    top1_pose_numbers = pose_to_numbers(top1_entry.pose)

    if config.retrieval_only:
        pose = top1_entry.pose
        return _finish_record(
            query, pose, top1_entry.id, 0, None, None, (), top1_pose_numbers, None)

    if config.binary:
        if prepared.thresholds is None:
            raise PipelineError("binary matching requested but no thresholds prepared")
        q_coarse = binarize(pyramid.coarse, prepared.thresholds)
        q_fine = binarize(pyramid.fine, prepared.thresholds)
    else:
        q_coarse, q_fine = pyramid.coarse, pyramid.fine

    verdicts = []
    retrieval_distance = {db_id: dist for db_id, dist in ranked}
    for rank, (db_id, _) in enumerate(ranked):
        db_coarse, db_fine = prepared.match_grids[by_id[db_id]]
        coarse_matches = mutual_nn(q_coarse, db_coarse)
        fine_matches = refine_fine(coarse_matches, q_fine, db_fine)
        verdicts.append(verify_homographies(
            fine_matches, tau=config.tau_h, min_inliers=config.h_min_inliers,
            seed=qbase ^ rank, confidence=config.h_confidence,
            max_iter=config.h_max_iter, db_id=db_id))

    kept = rerank(verdicts, keep=config.keep)
    rank_of = {v.db_id: i for i, v in enumerate(verdicts)}

    tau_eff = config.effective_tau_p(max(K.width, K.height))
    hypotheses = []
    reports = []
    for verdict in kept:
        entry = entries[by_id[verdict.db_id]]
        rank = rank_of[verdict.db_id]
        corrs = _correspondences(verdict, entry, config)
        hyp = None
        if len(corrs) >= max(3, config.min_inliers):
            hyp = p3p_lo_ransac(
                corrs, K, tau=tau_eff, confidence=config.p3p_confidence,
                seed=qbase ^ rank, max_iter=config.p3p_max_iter,
                min_inliers=config.min_inliers, db_id=verdict.db_id)
        hypotheses.append(hyp)
        reports.append({
            "verdict": verdict, "rank": rank, "hyp": hyp, "entry": entry,
        })

    solved = [(i, r) for i, r in enumerate(reports) if r["hyp"] is not None]
    scores = {}
    if config.use_densepv:
        for i, r in solved:
            hyp = r["hyp"]
            in_range = entries_within_radius(entries, hyp.pose.center,
                                             config.render_radius)
            if not in_range:
                scores[i] = VerificationScore(-np.inf, 0.0, False)
                continue
            view = synthesize_view(in_range, hyp.pose, K,
                                   source_stride=config.render_source_stride,
                                   max_splat=config.splat_max)
            scores[i] = densepv_score(
                image, view, stride=config.densepv_stride,
                patch=config.densepv_patch,
                cell_valid_floor=config.cell_valid_floor,
                valid_fraction_floor=config.valid_fraction_floor)

    candidate_reports = tuple(
        CandidateReport(
            db_id=r["verdict"].db_id,
            retrieval_rank=r["rank"],
            retrieval_distance=float(retrieval_distance[r["verdict"].db_id]),
            match_score=r["verdict"].score,
            densepe_inliers=r["hyp"].inlier_count if r["hyp"] else 0,
            pose=pose_to_numbers(r["hyp"].pose) if r["hyp"] else None,
            densepv_similarity=(
                None if i not in scores or not scores[i].usable
                else float(scores[i].similarity)),
            densepv_valid_fraction=(
                None if i not in scores else float(scores[i].valid_fraction)),
            densepv_usable=bool(scores[i].usable) if i in scores else False,
        )
        for i, r in enumerate(reports)
    )

    if not solved:
        return _failure_record(query, "no candidate produced a pose hypothesis",
                               candidates=candidate_reports,
                               top1=top1_pose_numbers)

    hyp_list = [r["hyp"] for _, r in solved]
    if config.use_densepv:
        score_list = [scores[i] for i, _ in solved]
    else:
        score_list = [VerificationScore(-np.inf, 0.0, False) for _ in solved]
    selection = select_best(hyp_list, score_list)
    sel_i, sel_report = solved[selection.best_index]
    sel_hyp = sel_report["hyp"]
    sel_score = score_list[selection.best_index]

    return _finish_record(
        query, sel_hyp.pose, sel_hyp.db_id, sel_report["rank"],
        sel_hyp.inlier_count,
        float(sel_score.similarity) if sel_score.usable else None,
        candidate_reports, top1_pose_numbers, None)


def _finish_record(query, pose, db_id, rank, inliers, similarity,
                   candidates, top1, failure) -> LocalizationRecord:
    err = None
    if query.gt_pose is not None and pose is not None:
        err = pose_error(pose, query.gt_pose)
    return LocalizationRecord(
        query_id=query.id, pose=pose, selected_db_id=db_id,
        retrieval_rank_used=rank, densepe_inliers=inliers,
        densepv_similarity=similarity, candidates=tuple(candidates),
        retrieval_top1_pose=top1, error=err,
        has_ground_truth=query.gt_pose is not None, failure=failure)


def _failure_record(query, reason, candidates=(), top1=None) -> LocalizationRecord:
    return LocalizationRecord(
        query_id=query.id, pose=None, selected_db_id=None,
        retrieval_rank_used=None, densepe_inliers=None, densepv_similarity=None,
        candidates=tuple(candidates), retrieval_top1_pose=top1, error=None,
        has_ground_truth=query.gt_pose is not None, failure=reason)


def run_pipeline(database, queries, config: PipelineConfig = PipelineConfig()):
    """Localize every query; per-query failures become failure records."""
    prepared = prepare_database(database, config)
    records = []
    for qi, query in enumerate(queries):
        try:
            records.append(localize_query(query, prepared, config, query_index=qi))
        except Exception as e:  # noqa: BLE001 - per-query isolation is the contract
            records.append(_failure_record(query, f"{type(e).__name__}: {e}"))
    return records


def select_from_record(record: LocalizationRecord, mode: str) -> Pose | None:
    """Re-derive the pose a pipeline variant would have selected.

    Modes: "full" (DensePV similarity), "no_densepv" (DensePE inlier
    count), "retrieval_only" (pose of the top retrieved image). Lets
    ablations reuse one pipeline run instead of re-running per variant.
    """
    if mode == "retrieval_only":
        if record.retrieval_top1_pose is None:
            return None
        return pose_from_numbers(record.retrieval_top1_pose)
    cands = [(i, c) for i, c in enumerate(record.candidates) if c.pose is not None]
    if not cands:
        return None
    if mode == "no_densepv":
        _, best = min(cands, key=lambda ic: (-ic[1].densepe_inliers, ic[0]))
        return pose_from_numbers(best.pose)
    if mode == "full":
        usable = [(i, c) for i, c in cands if c.densepv_usable]
        if usable:
            _, best = min(usable, key=lambda ic: (-ic[1].densepv_similarity,
                                                  -ic[1].densepe_inliers, ic[0]))
        else:
            _, best = min(cands, key=lambda ic: (-ic[1].densepe_inliers, ic[0]))
        return pose_from_numbers(best.pose)
    raise ValueError(f"unknown selection mode {mode!r}")
