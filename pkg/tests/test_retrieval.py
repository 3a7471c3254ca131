import numpy as np
import pytest

from denseloc.features import FeatureGrid, FeaturePyramid
from denseloc.retrieval import (
    RetrievalError,
    Vocabulary,
    aggregate,
    aggregate_descriptors,
    build_index,
    load_index,
    load_vocabulary,
    retrieve_topn,
    save_index,
    save_vocabulary,
    train_vocabulary,
)


def exhaustive_two_means(X):
    """Globally optimal 2-means by enumerating every nonempty bipartition."""
    n = len(X)
    m = np.arange(1, 2 ** (n - 1), dtype=np.uint64)
    bits = ((m[:, None] >> np.arange(n - 1, dtype=np.uint64)) & 1).astype(np.float64)
    s1 = bits @ X[1:]
    n1 = bits.sum(axis=1)
    total = X.sum(axis=0)
    s0 = total - s1
    n0 = n - n1
    sq = np.sum(X * X)
    sse = sq - np.sum(s1 * s1, axis=1) / n1 - np.sum(s0 * s0, axis=1) / n0
    best = np.argmin(sse)
    return s0[best] / n0[best], s1[best] / n1[best]


def two_cloud_sample(rng, spread=0.1):
    a = rng.normal(0.0, spread, size=(10, 2))
    b = rng.normal(0.0, spread, size=(10, 2)) + np.array([10.0, 10.0])
    return np.vstack([a, b])


class TestVocabulary:
    def test_two_separated_clouds_match_exhaustive_oracle(self):
        rng = np.random.default_rng(0)
        X = two_cloud_sample(rng)
        c0, c1 = exhaustive_two_means(X)
        vocab = train_vocabulary(X, k=2, seed=1)
        got = sorted(vocab.centroids.tolist())
        want = sorted([c0.tolist(), c1.tolist()])
        assert np.allclose(got, want, atol=1e-3)

    def test_k1_is_sample_mean(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(0.1, 1.0, size=(40, 3))
        vocab = train_vocabulary(X, k=1, seed=0)
        assert np.allclose(vocab.centroids[0], X.mean(axis=0), atol=1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        X = rng.uniform(0.1, 1.0, size=(200, 8))
        v1 = train_vocabulary(X, k=4, seed=9)
        v2 = train_vocabulary(X, k=4, seed=9)
        assert np.array_equal(v1.centroids, v2.centroids)

    def test_sample_too_small(self):
        with pytest.raises(RetrievalError):
            train_vocabulary(np.ones((19, 2)), k=2, seed=0)

    def test_zero_descriptors_excluded(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(0.1, 1.0, size=(50, 2))
        X_padded = np.vstack([X, np.zeros((30, 2))])
        v1 = train_vocabulary(X, k=2, seed=4)
        v2 = train_vocabulary(X_padded, k=2, seed=4)
        assert np.array_equal(v1.centroids, v2.centroids)


def pyramid_from_fine(fine_descs):
    fine_descs = np.asarray(fine_descs, dtype=np.float32)
    rows, cols, dim = fine_descs.shape
    size = (24 + 4 * (cols - 1), 24 + 4 * (rows - 1))
    fine = FeatureGrid("fine", 4, 24, fine_descs, size)
    coarse = FeatureGrid("coarse", 16, 24, fine_descs[:1, :1], size)
    return FeaturePyramid(coarse=coarse, fine=fine)


class TestAggregate:
    def test_zero_residuals_give_zero_descriptor(self):
        # centroid values exact in float32 so residuals vanish identically
        c = np.array([[0.5, 0.25]])
        vocab = Vocabulary(centroids=c, seed=0)
        descs = np.tile(c[0], (3, 3, 1))
        out = aggregate(pyramid_from_fine(descs), vocab)
        assert np.all(out == 0)

    def test_single_descriptor_k1(self):
        vocab = Vocabulary(centroids=np.array([[1.0, 0.0]]), seed=0)
        d = np.array([0.0, 1.0])
        out = aggregate_descriptors(d[None, :], vocab)
        expect = (d - vocab.centroids[0])
        expect = expect / np.linalg.norm(expect)
        assert np.allclose(out, expect)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        descs = rng.uniform(0, 1, size=(50, 8))
        vocab = train_vocabulary(rng.uniform(0, 1, size=(100, 8)), k=4, seed=1)
        a = aggregate_descriptors(descs, vocab)
        b = aggregate_descriptors(descs[rng.permutation(50)], vocab)
        assert np.allclose(a, b, atol=1e-12)

    def test_all_zero_descriptors(self):
        vocab = Vocabulary(centroids=np.array([[1.0, 0.0]]), seed=0)
        out = aggregate_descriptors(np.zeros((10, 2)), vocab)
        assert np.all(out == 0)

    def test_dim_mismatch(self):
        vocab = Vocabulary(centroids=np.ones((2, 3)), seed=0)
        with pytest.raises(RetrievalError):
            aggregate_descriptors(np.ones((5, 4)), vocab)

    def test_unit_norm(self):
        rng = np.random.default_rng(5)
        descs = rng.uniform(0, 1, size=(60, 8))
        vocab = train_vocabulary(rng.uniform(0, 1, size=(100, 8)), k=4, seed=2)
        out = aggregate_descriptors(descs, vocab)
        assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-6)


class TestRetrieve:
    def test_exact_row_ranks_first(self):
        rng = np.random.default_rng(6)
        mat = rng.normal(size=(10, 16)).astype(np.float32)
        idx = build_index([f"im{i}" for i in range(10)], mat)
        got = retrieve_topn(idx, mat[3], n=3)
        assert got[0][0] == "im3"
        assert got[0][1] == pytest.approx(0.0, abs=1e-6)

    def test_n_larger_than_index(self):
        rng = np.random.default_rng(7)
        mat = rng.normal(size=(5, 4)).astype(np.float32)
        idx = build_index([f"im{i}" for i in range(5)], mat)
        assert len(retrieve_topn(idx, mat[0], n=100)) == 5

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(8)
        mat = rng.normal(size=(40, 12)).astype(np.float32)
        ids = [f"im{i:02d}" for i in range(40)]
        idx = build_index(ids, mat)
        for _ in range(50):
            q = rng.normal(size=12)
            got = [gid for gid, _ in retrieve_topn(idx, q, n=40)]
            dists = [float(np.linalg.norm(mat[i].astype(np.float64) - q)) for i in range(40)]
            want = [ids[i] for i in sorted(range(40), key=lambda i: (dists[i], ids[i]))]
            assert got == want

    def test_ties_broken_by_id(self):
        mat = np.zeros((3, 4), dtype=np.float32)
        idx = build_index(["c", "a", "b"], mat)
        got = [gid for gid, _ in retrieve_topn(idx, np.zeros(4), n=3)]
        assert got == ["a", "b", "c"]

    def test_empty_index_rejected(self):
        idx = build_index([], np.zeros((0, 4), dtype=np.float32))
        with pytest.raises(RetrievalError):
            retrieve_topn(idx, np.zeros(4), n=1)


class TestRetrievalFiles:
    def test_index_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        mat = rng.normal(size=(6, 8)).astype(np.float32)
        idx = build_index([f"img-{i}" for i in range(6)], mat)
        path = tmp_path / "db.vidx"
        save_index(path, idx)
        back = load_index(path)
        assert back.ids == idx.ids
        assert np.array_equal(back.descriptors, idx.descriptors)

    def test_vocabulary_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        vocab = train_vocabulary(rng.uniform(0.1, 1, size=(80, 4)), k=3, seed=7)
        path = tmp_path / "v.vvoc"
        save_vocabulary(path, vocab)
        back = load_vocabulary(path)
        assert back.k == 3 and back.seed == 7
        assert np.allclose(back.centroids, vocab.centroids, atol=1e-6)


class TestOnSyntheticScene:
    def test_best_overlap_entry_reaches_top10(self, property_scene, property_pyramids):
        # for >= 90% of queries the database image with the greatest
        # ground-truth view overlap must appear among the top-10 retrieved
        from denseloc.synthetic import view_overlap

        db, queries, scene = property_scene
        db_pyrs, q_pyrs = property_pyramids
        sample = np.concatenate([p.fine.flat() for p in db_pyrs])
        sample = sample[np.any(sample != 0, axis=1)]
        rng = np.random.default_rng(0)
        pick = rng.choice(sample.shape[0], size=8000, replace=False)
        vocab = train_vocabulary(sample[np.sort(pick)], k=32, seed=0)
        mat = np.stack([aggregate(p, vocab) for p in db_pyrs]).astype(np.float32)
        index = build_index([e.id for e in db], mat, vocab)

        hits = 0
        for q, qp in zip(queries, q_pyrs):
            overlaps = [view_overlap(scene, q.gt_pose, q.intrinsics, e) for e in db]
            best_entry = db[int(np.argmax(overlaps))].id
            top = [rid for rid, _ in retrieve_topn(index, aggregate(qp, vocab), n=10)]
            hits += best_entry in top
        assert hits / len(queries) >= 0.9
