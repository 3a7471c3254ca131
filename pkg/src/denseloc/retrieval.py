"""Global-descriptor retrieval: VLAD aggregation over dense grids, exact top-N scan.

A k-means vocabulary stands in for learned cluster centers; residuals are
intra-normalized per cluster before the global L2 normalization to suppress
bursty textures.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .features import FeaturePyramid

INDEX_MAGIC = b"VIDX"
VOCAB_MAGIC = b"VVOC"


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    centroids: np.ndarray  # (k, dim) float64
    seed: int

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise RetrievalError("centroids must be a (k, dim) array")
        object.__setattr__(self, "centroids", c)


def train_vocabulary(sample: np.ndarray, k: int, seed: int,
                     max_iter: int = 100, tol: float = 1e-6) -> Vocabulary:
    """Deterministic k-means with k-means++-style seeding.

    Zero descriptors are excluded before clustering. Requires at least
    10*k sample vectors. Runs Lloyd iterations until centroid movement
    falls below `tol` or `max_iter` is reached.
    """
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 2:
        raise RetrievalError("sample must be (n, dim)")
    sample = sample[np.any(sample != 0, axis=1)]
    n = sample.shape[0]
    if n < 10 * k:
        raise RetrievalError(f"need at least {10 * k} nonzero descriptors, got {n}")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(sample, k, rng)
    for _ in range(max_iter):
        assign = _assign(sample, centroids)
        new_centroids = centroids.copy()
        for j in range(k):
            members = sample[assign == j]
            if members.shape[0] > 0:
                new_centroids[j] = members.mean(axis=0)
            # empty cluster keeps its previous centroid (deterministic)
        movement = np.linalg.norm(new_centroids - centroids, axis=1).max()
        centroids = new_centroids
        if movement < tol:
            break
    return Vocabulary(centroids=centroids, seed=int(seed))


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = np.sum((X - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with chosen centroids
            centroids[j:] = X[rng.integers(n, size=k - j)]
            break
        probs = d2 / total
        centroids[j] = X[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((X - centroids[j]) ** 2, axis=1))
    return centroids


def _assign(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # squared distances via expansion; argmin breaks ties at the lowest index
    d2 = (
        np.sum(X * X, axis=1)[:, None]
        - 2.0 * X @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def aggregate(pyramid: FeaturePyramid, vocab: Vocabulary) -> np.ndarray:
    """VLAD over the fine-level non-zero descriptors; zero vector if none."""
    return aggregate_descriptors(pyramid.fine.flat(), vocab)


def aggregate_descriptors(descs: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    descs = np.asarray(descs, dtype=np.float64)
    if descs.shape[1] != vocab.dim:
        raise RetrievalError(
            f"descriptor dim {descs.shape[1]} does not match vocabulary dim {vocab.dim}"
        )
    descs = descs[np.any(descs != 0, axis=1)]
    k, dim = vocab.k, vocab.dim
    if descs.shape[0] == 0:
        return np.zeros(k * dim)
    assign = _assign(descs, vocab.centroids)
    vlad = np.zeros((k, dim))
    np.add.at(vlad, assign, descs)
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    vlad -= counts[:, None] * vocab.centroids
    # intra-normalization: per-cluster L2; numerically-zero clusters stay zero
    norms = np.linalg.norm(vlad, axis=1, keepdims=True)
    keep = norms > 1e-12
    vlad = np.where(keep, vlad / np.where(keep, norms, 1.0), 0.0)
    flat = vlad.reshape(-1)
    total = np.linalg.norm(flat)
    return flat / total if total > 1e-12 else np.zeros_like(flat)


@dataclass(frozen=True)
class RetrievalIndex:
    ids: tuple
    descriptors: np.ndarray  # (n, k*dim) float32
    vocab: Vocabulary | None = None

    def __post_init__(self):
        d = np.asarray(self.descriptors, dtype=np.float32)
        if d.shape[0] != len(self.ids):
            raise RetrievalError("index row count does not match id count")
        object.__setattr__(self, "descriptors", d)
        object.__setattr__(self, "ids", tuple(self.ids))


def build_index(ids, global_descriptors, vocab: Vocabulary | None = None) -> RetrievalIndex:
    mat = np.asarray(global_descriptors, dtype=np.float32)
    return RetrievalIndex(ids=tuple(ids), descriptors=mat, vocab=vocab)


def retrieve_topn(index: RetrievalIndex, query: np.ndarray, n: int = 100):
    """ids of the n nearest database descriptors by L2, with distances.

    Ties are broken by ascending id; returns min(n, index size) pairs.
    """
    if n < 1:
        raise RetrievalError("n must be >= 1")
    if len(index.ids) == 0:
        raise RetrievalError("retrieval index is empty")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    d = np.linalg.norm(index.descriptors.astype(np.float64) - q[None, :], axis=1)
    order = sorted(range(len(index.ids)), key=lambda i: (d[i], index.ids[i]))
    top = order[: min(n, len(order))]
    return [(index.ids[i], float(d[i])) for i in top]


# ---------------------------------------------------------------------------
# Index/vocabulary files. "VIDX": magic, u32 count, u32 dim, per image a
# length-prefixed UTF-8 id, then the float32 descriptor matrix row-major.
# "VVOC": magic, u32 k, u32 dim, u64 seed, float32 centroids.
# ---------------------------------------------------------------------------

def save_index(path, index: RetrievalIndex) -> None:
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<II", len(index.ids), index.descriptors.shape[1]))
        for s in index.ids:
            raw = s.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(index.descriptors, dtype="<f4").tobytes())


def load_index(path) -> RetrievalIndex:
    with open(path, "rb") as fh:
        if fh.read(4) != INDEX_MAGIC:
            raise RetrievalError(f"{path}: bad index magic")
        count, dim = struct.unpack("<II", fh.read(8))
        ids = []
        for _ in range(count):
            (ln,) = struct.unpack("<I", fh.read(4))
            ids.append(fh.read(ln).decode("utf-8"))
        raw = fh.read(count * dim * 4)
        if len(raw) != count * dim * 4 or fh.read(1):
            raise RetrievalError(f"{path}: index payload size mismatch")
    mat = np.frombuffer(raw, dtype="<f4").reshape(count, dim)
    return RetrievalIndex(ids=tuple(ids), descriptors=mat)


def save_vocabulary(path, vocab: Vocabulary) -> None:
    with open(path, "wb") as fh:
        fh.write(VOCAB_MAGIC)
        fh.write(struct.pack("<IIQ", vocab.k, vocab.dim, vocab.seed))
        fh.write(np.ascontiguousarray(vocab.centroids, dtype="<f4").tobytes())


def load_vocabulary(path) -> Vocabulary:
    with open(path, "rb") as fh:
        if fh.read(4) != VOCAB_MAGIC:
            raise RetrievalError(f"{path}: bad vocabulary magic")
        k, dim, seed = struct.unpack("<IIQ", fh.read(16))
        raw = fh.read(k * dim * 4)
        if len(raw) != k * dim * 4 or fh.read(1):
            raise RetrievalError(f"{path}: vocabulary payload size mismatch")
    return Vocabulary(
        centroids=np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(k, dim),
        seed=int(seed),
    )
