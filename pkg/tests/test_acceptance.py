"""Acceptance suite: every gate criterion at its stated tolerance.

Each criterion prints one PASS line when it holds; a failed assertion is
the FAIL signal. Criteria with runtime budgets assert them too.
"""

import math
import time

import numpy as np
import pytest

from denseloc.config import PipelineConfig
from denseloc.evaluation import localized_rate, median_errors, edge_reprojection_check
from denseloc.features import binarize, extract_grid, fit_binarizer
from denseloc.geometry import (
    Intrinsics,
    Pose,
    PoseError,
    backproject,
    pose_error,
    project,
    rotation_from_axis_angle,
)
from denseloc.matching import CellMatch, mutual_nn, refine_fine, verify_homographies
from denseloc.pipeline import run_pipeline, select_from_record
from denseloc.pose_solver import (
    Correspondence2D3D,
    _apply_step,
    p3p_lo_ransac,
    refine_pose,
    residuals_and_jacobian,
    solve_p3p,
)
from denseloc.synthetic import DatabaseGridSpec, QuerySpec, generate_synthetic_scene, look_pose
from denseloc.verification import densepv_score, entries_within_radius, synthesize_view

K_WORK = Intrinsics(f=1385.64, cx=800.0, cy=600.0, width=1600, height=1200)


def random_pose(rng):
    return Pose(rotation_from_axis_angle(rng.normal(size=3)), rng.normal(size=3) * 2)


def frustum_corrs(rng, pose, n, cam):
    z = rng.uniform(1.0, 8.0, size=n)
    u = rng.uniform(40, cam.width - 40, size=n)
    v = rng.uniform(40, cam.height - 40, size=n)
    xc = np.column_stack([(u - cam.cx) * z / cam.f, (v - cam.cy) * z / cam.f, z])
    Xw = (xc - pose.t) @ pose.R
    return [Correspondence2D3D(pixel=(u[i], v[i]), point=Xw[i]) for i in range(n)]


def planted_outliers(rng, pose, n, cam, min_err=20.0):
    """Gross mismatches: pixels guaranteed far from the true projections.

    Uniform pixels can coincide with the truth by chance, in which case
    they are consistent observations, not outliers; rejection keeps the
    contamination genuinely wrong.
    """
    out = []
    for c in frustum_corrs(rng, pose, n, cam):
        true_pix = np.asarray(c.pixel)
        while True:
            pix = np.array([rng.uniform(0, cam.width), rng.uniform(0, cam.height)])
            if np.linalg.norm(pix - true_pix) >= min_err:
                break
        out.append(Correspondence2D3D(pixel=(pix[0], pix[1]), point=c.point))
    return out


def frob_angle_deg(Ra, Rb):
    return math.degrees(np.linalg.norm(Ra @ Rb.T - np.eye(3)) / math.sqrt(2))


# ---------------------------------------------------------------------------
# Criterion 1: geometry oracle suite (< 10 s)
# ---------------------------------------------------------------------------

class TestGeometryOracles:
    def test_geometry_oracle_suite(self):
        start = time.time()
        rng = np.random.default_rng(1000)
        cam = Intrinsics(f=500.0, cx=320.0, cy=240.0, width=640, height=480)

        # project/backproject roundtrip within 1e-6 px
        pose = random_pose(rng)
        for _ in range(1000):
            z = rng.uniform(0.5, 10.0)
            pix = np.array([rng.uniform(0, 640), rng.uniform(0, 480)])
            X = backproject(pix, z, pose, cam)
            p2 = project(X, pose, cam)
            assert np.linalg.norm(p2 - pix) < 1e-6

        # P3P exact recovery on 1000 random noise-free triples
        for _ in range(1000):
            gt = random_pose(rng)
            sols = solve_p3p(frustum_corrs(rng, gt, 3, cam), cam)
            assert sols
            pos, ang = min(
                ((np.linalg.norm(s.center - gt.center), frob_angle_deg(s.R, gt.R))
                 for s in sols), key=lambda e: e[0] + e[1])
            assert pos <= 1e-6
            assert ang <= 1e-5

        # refinement Jacobian vs central finite differences, 1e-5 relative
        h = 1e-6
        for _ in range(25):
            gt = random_pose(rng)
            corrs = frustum_corrs(rng, gt, 12, cam)
            startp = Pose(rotation_from_axis_angle(rng.normal(size=3) * 0.02) @ gt.R,
                          gt.t + rng.normal(size=3) * 0.02)
            res, J = residuals_and_jacobian(startp, corrs, cam)
            J_fd = np.zeros_like(J)
            for k in range(6):
                step = np.zeros(6)
                step[k] = h
                rp, _ = residuals_and_jacobian(_apply_step(startp, step), corrs, cam)
                rm, _ = residuals_and_jacobian(_apply_step(startp, -step), corrs, cam)
                J_fd[:, k] = (rp - rm) / (2 * h)
            assert np.linalg.norm(J_fd - J) / np.linalg.norm(J) < 1e-5

        elapsed = time.time() - start
        assert elapsed < 10.0
        print(f"\nPASS geometry oracle suite ({elapsed:.1f} s)")


# ---------------------------------------------------------------------------
# Criterion 2: robust fitting suite (< 30 s)
# ---------------------------------------------------------------------------

class TestRobustFitting:
    def test_robust_fitting_suite(self):
        start = time.time()
        rng = np.random.default_rng(2000)

        # P3P-LO-RANSAC with 60% outliers, 50/50 seeds
        for seed in range(50):
            gt = random_pose(rng)
            inliers = [
                Correspondence2D3D(
                    pixel=(c.pixel[0] + rng.normal(0, 1.0),
                           c.pixel[1] + rng.normal(0, 1.0)),
                    point=c.point)
                for c in frustum_corrs(rng, gt, 80, K_WORK)
            ]
            outliers = planted_outliers(rng, gt, 120, K_WORK)
            hyp = p3p_lo_ransac(inliers + outliers, K_WORK, tau=10.0, seed=seed)
            assert hyp is not None
            err = pose_error(hyp.pose, gt)
            assert err.positional < 0.01, f"seed {seed}: {err.positional}"
            assert err.angular < 0.1, f"seed {seed}: {err.angular}"

        # two-homography verification recovers >= 90% of each planted plane
        H1 = np.array([[1.10, 0.05, 10.0], [-0.03, 0.95, 20.0], [1e-4, -5e-5, 1.0]])
        H2 = np.array([[0.85, -0.10, 120.0], [0.06, 1.15, -15.0], [-8e-5, 1e-4, 1.0]])

        def apply_h(H, pts):
            ph = np.column_stack([pts, np.ones(len(pts))]) @ H.T
            return ph[:, :2] / ph[:, 2:3]

        q1 = rng.uniform(0, 200, size=(40, 2))
        q2 = rng.uniform(0, 200, size=(40, 2))
        qo = rng.uniform(0, 200, size=(20, 2))
        do = rng.uniform(0, 200, size=(20, 2))
        matches = [
            CellMatch((float(q[0]), float(q[1])), (float(d[0]), float(d[1])),
                      "fine", 0.0, (0, i), (0, i), 4)
            for i, (q, d) in enumerate(zip(
                np.vstack([q1, q2, qo]),
                np.vstack([apply_h(H1, q1), apply_h(H2, q2), do])))
        ]
        order = rng.permutation(len(matches))
        verdict = verify_homographies([matches[i] for i in order],
                                      tau=2.0, min_inliers=12, seed=7)
        assert verdict.homography_count == 2
        got = set(map(id, verdict.inliers))
        assert len(got & set(map(id, matches[:40]))) >= 36
        assert len(got & set(map(id, matches[40:80]))) >= 36

        elapsed = time.time() - start
        assert elapsed < 30.0
        print(f"\nPASS robust fitting suite ({elapsed:.1f} s)")


# ---------------------------------------------------------------------------
# Criterion 3: matching oracle suite (bit-exact)
# ---------------------------------------------------------------------------

class TestMatchingOracles:
    def test_matching_oracle_suite(self):
        from test_matching import TestRefineFine, oracle_mutual_nn, match_pairs, random_unit_grid

        rng = np.random.default_rng(3000)
        for _ in range(100):
            q = random_unit_grid(rng, 8, 8, dim=8)
            d = random_unit_grid(rng, 8, 8, dim=8)
            assert match_pairs(mutual_nn(q, d), 8, 8) == oracle_mutual_nn(q, d)

        for _ in range(100):
            fq = random_unit_grid(rng, 12, 12, dim=8)
            fd = random_unit_grid(rng, 12, 12, dim=8)
            coarse = []
            for _ in range(int(rng.integers(1, 5))):
                coarse.append(CellMatch(
                    (0.0, 0.0), (0.0, 0.0), "coarse", 0.0,
                    (int(rng.integers(0, 3)), int(rng.integers(0, 3))),
                    (int(rng.integers(0, 3)), int(rng.integers(0, 3))), 16))
            got = {(m.q_cell, m.db_cell, round(m.distance, 12))
                   for m in refine_fine(coarse, fq, fd)}
            assert got == TestRefineFine._oracle(coarse, fq, fd)
        print("\nPASS matching oracle suite (200 random grid pairs, bit-exact)")


# ---------------------------------------------------------------------------
# Criterion 4: end-to-end synthetic experiment (< 5 min with ablations)
# ---------------------------------------------------------------------------

MAIN_DB = DatabaseGridSpec(nx=3, ny=3, yaw_count=8, image_size=(384, 288))
MAIN_Q = QuerySpec(count=25, image_size=(384, 288), pitch_range=(-6.0, 6.0),
                   height_range=(1.3, 1.7), margin=1.3)
MAIN_CFG = PipelineConfig(top_n=10, keep=5, h_max_iter=250, p3p_max_iter=2000,
                          render_source_stride=1, render_radius=3.0)

CONF_DB = DatabaseGridSpec(nx=3, ny=3, yaw_count=4, image_size=(224, 168))
CONF_Q = QuerySpec(count=25, image_size=(224, 168), pitch_range=(-6.0, 6.0),
                   height_range=(1.3, 1.7), margin=1.3)
CONF_CFG = PipelineConfig(top_n=8, keep=3, h_max_iter=150, p3p_max_iter=1500,
                          render_source_stride=2, render_radius=3.0,
                          vocab_train_size=6000)


class TestEndToEnd:
    def test_synthetic_scene_experiment(self):
        start = time.time()

        # main room: >= 36 views, >= 25 queries, >= 90% within 0.1 m / 2 deg
        db, queries, _ = generate_synthetic_scene(1, db_spec=MAIN_DB, query_spec=MAIN_Q)
        assert len(db) >= 36
        assert len(queries) >= 25
        records = run_pipeline(db, queries, MAIN_CFG)
        hits = 0
        for r, q in zip(records, queries):
            if r.pose is None:
                continue
            e = pose_error(r.pose, q.gt_pose)
            hits += (e.positional <= 0.1 and e.angular <= 2.0)
        rate = hits / len(queries)
        assert rate >= 0.9, f"localized {hits}/{len(queries)}"

        # confuser rooms: rate@0.5m ordering full >= no-DensePV >= retrieval-only
        # pooled over 5 seeds, each run once with ablations derived per record
        pooled = {"full": [], "no_densepv": [], "retrieval_only": []}
        for seed in range(5):
            cdb, cqueries, _ = generate_synthetic_scene(
                100 + seed, db_spec=CONF_DB, query_spec=CONF_Q, confusers=True)
            assert len(cdb) >= 36
            crecords = run_pipeline(cdb, cqueries, CONF_CFG)
            gt = {q.id: q.gt_pose for q in cqueries}
            for mode in pooled:
                for r in crecords:
                    pose = select_from_record(r, mode)
                    pooled[mode].append(
                        pose_error(pose, gt[r.query_id]) if pose is not None
                        else PoseError(positional=1e9, angular=180.0))
        rates = {
            mode: localized_rate(errs, thresholds=(0.5,), angle_gate=10.0).rates[0]
            for mode, errs in pooled.items()
        }
        assert rates["full"] >= rates["no_densepv"] >= rates["retrieval_only"], rates

        elapsed = time.time() - start
        assert elapsed < 300.0
        print(f"\nPASS end-to-end synthetic experiment: main rate "
              f"{100*rate:.0f}%, confuser rates full {rates['full']:.0f}% >= "
              f"no-densepv {rates['no_densepv']:.0f}% >= retrieval-only "
              f"{rates['retrieval_only']:.0f}% ({elapsed:.0f} s)")


# ---------------------------------------------------------------------------
# Criterion 5: DensePV discrimination and identity rendering
# ---------------------------------------------------------------------------

class TestDensePVDiscrimination:
    def test_discrimination_and_identity_rendering(self):
        db, queries, scene = generate_synthetic_scene(
            77,
            db_spec=DatabaseGridSpec(nx=3, ny=3, yaw_count=4, image_size=(192, 144)),
            query_spec=QuerySpec(count=20, image_size=(192, 144), margin=1.2))

        # identity rendering reproduces source colors within +-2/255
        for e in db[:5]:
            view = synthesize_view([e], e.pose, e.K)
            valid = e.depth.validity
            assert view.mask[valid].all()
            diff = view.rgb.astype(int) - e.rgb.astype(int)
            assert np.abs(diff[valid]).max() <= 2

        # ground-truth pose beats a 30-degree-perturbed pose in >= 95/100 trials
        rng = np.random.default_rng(4000)
        wins = trials = 0
        while trials < 100:
            q = queries[trials % len(queries)]
            kq = q.intrinsics
            axis = rng.normal(size=3)
            axis = axis / np.linalg.norm(axis)
            Roff = rotation_from_axis_angle(axis * math.radians(30.0)) @ q.gt_pose.R
            off = Pose(Roff, -Roff @ q.gt_pose.center)
            gt_view = synthesize_view(db, q.gt_pose, kq)
            off_view = synthesize_view(db, off, kq)
            gt_score = densepv_score(q.rgb, gt_view)
            off_score = densepv_score(q.rgb, off_view)
            wins += gt_score.similarity > off_score.similarity
            trials += 1
        assert wins >= 95, f"ground truth won only {wins}/100"
        print(f"\nPASS DensePV discrimination ({wins}/100 trials) and identity rendering")


# ---------------------------------------------------------------------------
# Criterion 6: binarization storage and end-to-end parity
# ---------------------------------------------------------------------------

class TestBinarization:
    def test_storage_factor_and_rate_parity(self):
        rng = np.random.default_rng(5000)
        img = rng.integers(0, 256, (128, 128, 3), dtype=np.uint8)
        grid = extract_grid(img, stride=8, patch=16)
        packed = binarize(grid, np.zeros(grid.dim))
        assert grid.descriptors.astype(np.float32).nbytes == 32 * packed.bits.nbytes

        # 50 queries so a single flipped query moves the rate by only 2 pp
        db, queries, _ = generate_synthetic_scene(
            55, db_spec=DatabaseGridSpec(nx=3, ny=3, yaw_count=4, image_size=(256, 192)),
            query_spec=QuerySpec(count=50, image_size=(256, 192),
                                 pitch_range=(-6.0, 6.0), height_range=(1.3, 1.7),
                                 margin=1.3))
        gt = {q.id: q.gt_pose for q in queries}

        def rate_at_half_meter(binary):
            cfg = PipelineConfig(binary=binary, top_n=10, keep=4, h_max_iter=250,
                                 p3p_max_iter=1500, render_source_stride=2,
                                 render_radius=3.0, vocab_train_size=8000)
            records = run_pipeline(db, queries, cfg)
            errs = [
                pose_error(r.pose, gt[r.query_id]) if r.pose is not None
                else PoseError(positional=1e9, angular=180.0)
                for r in records
            ]
            return localized_rate(errs, thresholds=(0.5,), angle_gate=10.0).rates[0]

        float_rate = rate_at_half_meter(binary=False)
        binary_rate = rate_at_half_meter(binary=True)
        assert abs(float_rate - binary_rate) <= 3.0, (float_rate, binary_rate)
        print(f"\nPASS binarization: storage factor 32, rate@0.5m float "
              f"{float_rate:.0f}% vs binary {binary_rate:.0f}%")


# ---------------------------------------------------------------------------
# Criterion 7: evaluation math
# ---------------------------------------------------------------------------

class TestEvaluationMath:
    def test_evaluation_fixtures(self):
        errors = [PoseError(0.1, 1.0), PoseError(0.6, 2.0), PoseError(0.3, 20.0)]
        curve = localized_rate(errors, thresholds=(0.5,), angle_gate=10.0)
        assert curve.rates[0] == pytest.approx(100.0 / 3.0)

        # the reported-rate layout reproduces from a constructed input
        fixture = ([PoseError(0.1, 1.0)] * 389 + [PoseError(0.4, 1.0)] * 176
                   + [PoseError(0.9, 1.0)] * 134 + [PoseError(5.0, 1.0)] * 301)
        table = localized_rate(fixture, thresholds=(0.25, 0.5, 1.0)).format_table()
        rows = [line.split() for line in table.splitlines()[1:]]
        assert rows == [["0.25", "38.9"], ["0.50", "56.5"], ["1.00", "69.9"]]

        assert median_errors([PoseError(1, 1), PoseError(3, 3), PoseError(2, 2)]) == (2.0, 2.0)
        assert median_errors([PoseError(1, 1), PoseError(2, 4)]) == (1.0, 1.0)

        # 20 px gross cutoff and 5 px acceptance from the reference-pose recipe
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        img[:, 32:] = 200
        near = np.array([[31.0, 20.0]] * 9)
        far = np.array([[5.0, 20.0]])
        res = edge_reprojection_check(img, np.vstack([near, far]),
                                      gross_cutoff=20.0, accept_px=5.0)
        assert res.points_dropped == 1
        assert res.accepted and res.median_px < 5.0
        off = edge_reprojection_check(img, np.array([[25.0, 20.0]] * 5),
                                      gross_cutoff=20.0, accept_px=5.0)
        assert not off.accepted
        print("\nPASS evaluation math fixtures")
