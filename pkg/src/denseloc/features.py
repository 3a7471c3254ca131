"""Dense descriptor grids: extraction, RootSIFT normalization, binarization, file io.

Descriptors are gradient-orientation histograms (4x4 spatial cells x 8
orientation bins = 128 dims) computed on a regular grid at two levels, a
coarse one (large stride/patch) and a fine one. Grids loaded from feature
files may carry any dimension divisible by 8.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC_FLOAT = b"DFMP"
MAGIC_BINARY = b"DFMB"
MAGIC_THRESHOLDS = b"DFTH"

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


class FeatureError(ValueError):
    pass


class FeatureFormatError(FeatureError):
    """Raised by the strict feature-file parser."""


@dataclass(frozen=True)
class FeatureConfig:
    coarse_stride: int = 16
    coarse_patch: int = 64
    fine_stride: int = 4
    fine_patch: int = 24

    def __post_init__(self):
        if self.coarse_stride % self.fine_stride != 0:
            raise FeatureError("coarse stride must be an integer multiple of fine stride")
        for patch in (self.coarse_patch, self.fine_patch):
            if patch % 4 != 0:
                raise FeatureError("patch size must be divisible by 4 (spatial bins)")


def grid_shape(width: int, height: int, stride: int, patch: int) -> tuple[int, int]:
    """(rows, cols) of the dense grid covering an image."""
    if height < patch or width < patch:
        raise FeatureError(
            f"image {width}x{height} smaller than one {patch}px patch"
        )
    return (height - patch) // stride + 1, (width - patch) // stride + 1


@dataclass(frozen=True)
class FeatureGrid:
    """Dense grid of unit-L2 descriptors (zero vector marks an empty patch)."""

    level: str  # "coarse" or "fine"
    stride: int
    patch: int
    descriptors: np.ndarray  # (rows, cols, dim) float32
    image_size: tuple[int, int]  # (width, height) of the source image

    @property
    def rows(self) -> int:
        return self.descriptors.shape[0]

    @property
    def cols(self) -> int:
        return self.descriptors.shape[1]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[2]

    def flat(self) -> np.ndarray:
        return self.descriptors.reshape(-1, self.dim)

    def nonzero_mask(self) -> np.ndarray:
        """(rows*cols,) bool, True where the descriptor is not the zero vector."""
        return np.any(self.flat() != 0, axis=1)

    def cell_centers(self) -> np.ndarray:
        """(rows*cols, 2) pixel coordinates (x, y) of grid-cell centers."""
        ys = np.arange(self.rows) * self.stride + self.patch / 2.0
        xs = np.arange(self.cols) * self.stride + self.patch / 2.0
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True)
class BinaryFeatureGrid:
    """Bit-packed version of a FeatureGrid, matched by Hamming distance."""

    level: str
    stride: int
    patch: int
    bits: np.ndarray  # (rows, cols, dim // 8) uint8
    dim: int
    image_size: tuple[int, int]
    thresholds: np.ndarray | None = field(default=None)

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    def flat(self) -> np.ndarray:
        return self.bits.reshape(-1, self.dim // 8)

    def nonzero_mask(self) -> np.ndarray:
        return np.any(self.flat() != 0, axis=1)

    def cell_centers(self) -> np.ndarray:
        ys = np.arange(self.rows) * self.stride + self.patch / 2.0
        xs = np.arange(self.cols) * self.stride + self.patch / 2.0
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True)
class FeaturePyramid:
    coarse: FeatureGrid
    fine: FeatureGrid

    def __post_init__(self):
        if self.coarse.image_size != self.fine.image_size:
            raise FeatureError("pyramid levels describe different source images")
        if self.coarse.stride % self.fine.stride != 0:
            raise FeatureError("coarse stride must be a multiple of fine stride")


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luma conversion to float64; accepts uint8 or float, HxW or HxWx3."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return img


def rootsift(v: np.ndarray) -> np.ndarray:
    """L1-normalize, elementwise sqrt, L2-normalize. Zero vectors stay zero.

    Works on a single histogram or on stacked histograms along the last axis.
    """
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise FeatureError("rootsift input must be nonnegative")
    s = v.sum(axis=-1, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    out = np.sqrt(v / safe)
    n = np.linalg.norm(out, axis=-1, keepdims=True)
    out /= np.where(n > 0, n, 1.0)
    return out


def _orientation_channels(gray: np.ndarray, bins: int = 8) -> np.ndarray:
    """Per-pixel gradient magnitude scattered into `bins` orientation channels.

    Magnitude is split linearly between the two adjacent orientation bins
    (standard SIFT-style soft assignment); hard binning leaves histograms
    so sparse that per-dimension median thresholds degenerate to zero.
    """
    dy, dx = np.gradient(gray)
    mag = np.hypot(dx, dy)
    ang = np.arctan2(dy, dx)  # [-pi, pi]
    pos = (ang + np.pi) / (2 * np.pi) * bins - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo_idx = lo.astype(np.int64) % bins
    hi_idx = (lo_idx + 1) % bins
    chans = np.zeros((bins,) + gray.shape)
    for k in range(bins):
        chans[k] = np.where(lo_idx == k, mag * (1.0 - frac), 0.0) \
            + np.where(hi_idx == k, mag * frac, 0.0)
    return chans


def _integral(chan: np.ndarray) -> np.ndarray:
    h, w = chan.shape
    s = np.zeros((h + 1, w + 1))
    np.cumsum(np.cumsum(chan, axis=0), axis=1, out=s[1:, 1:])
    return s


def extract_grid(image: np.ndarray, stride: int, patch: int, level: str = "fine",
                 contrast_floor: float = 0.01) -> FeatureGrid:
    """Dense gradient-orientation-histogram grid over one image.

    Each patch is split into 4x4 spatial cells with 8 orientation bins;
    the 128-bin histogram is RootSIFT-transformed. Patches whose total
    gradient mass falls below `contrast_floor` (uniform regions, numerical
    noise) give the zero vector.
    """
    gray = to_grayscale(image)
    h, w = gray.shape
    rows, cols = grid_shape(w, h, stride, patch)
    q = patch // 4

    chans = _orientation_channels(gray)
    ys = (np.arange(rows) * stride)[:, None] + (np.arange(4) * q)[None, :]  # (rows, 4)
    xs = (np.arange(cols) * stride)[:, None] + (np.arange(4) * q)[None, :]
    y0, y1 = ys.ravel(), (ys + q).ravel()
    x0, x1 = xs.ravel(), (xs + q).ravel()

    hist = np.empty((rows, cols, 4, 4, 8))
    for k in range(8):
        s = _integral(chans[k])
        # rectangle sums for every (cell row, spatial row) x (cell col, spatial col)
        block = s[y1[:, None], x1[None, :]] - s[y0[:, None], x1[None, :]] \
            - s[y1[:, None], x0[None, :]] + s[y0[:, None], x0[None, :]]
        hist[..., k] = (
            block.reshape(rows, 4, cols, 4).transpose(0, 2, 1, 3)
        )

    # integral-image cancellation can leave ~1e-13 negatives in empty bins
    np.maximum(hist, 0.0, out=hist)
    hist = hist.reshape(rows, cols, 128)
    hist[hist.sum(axis=-1) < contrast_floor] = 0.0
    desc = rootsift(hist).astype(np.float32)
    return FeatureGrid(level=level, stride=stride, patch=patch,
                       descriptors=desc, image_size=(w, h))


def extract_dense(image: np.ndarray, config: FeatureConfig = FeatureConfig()) -> FeaturePyramid:
    """Two-level dense descriptor pyramid (coarse + fine) for one image."""
    coarse = extract_grid(image, config.coarse_stride, config.coarse_patch, "coarse")
    fine = extract_grid(image, config.fine_stride, config.fine_patch, "fine")
    return FeaturePyramid(coarse=coarse, fine=fine)


def fit_binarizer(sample: np.ndarray, min_sample: int = 1000) -> np.ndarray:
    """Per-dimension median thresholds from a descriptor sample."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 2 or sample.shape[0] == 0:
        raise FeatureError("binarizer sample must be a nonempty (n, dim) array")
    if sample.shape[0] < min_sample:
        raise FeatureError(
            f"binarizer needs at least {min_sample} sample descriptors, got {sample.shape[0]}"
        )
    return np.median(sample, axis=0)


def binarize(grid: FeatureGrid, thresholds: np.ndarray) -> BinaryFeatureGrid:
    """Bit d is set iff descriptor[d] > thresholds[d] (strict)."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.shape != (grid.dim,):
        raise FeatureError(
            f"thresholds length {thresholds.shape} does not match dim {grid.dim}"
        )
    if grid.dim % 8 != 0:
        raise FeatureError("descriptor dim must be divisible by 8 to bit-pack")
    bits = np.packbits(grid.descriptors > thresholds, axis=-1)
    return BinaryFeatureGrid(
        level=grid.level, stride=grid.stride, patch=grid.patch,
        bits=bits, dim=grid.dim, image_size=grid.image_size,
        thresholds=thresholds,
    )


def hamming_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamming distance between bit-packed arrays; broadcasts over leading axes."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape[-1] != b.shape[-1]:
        raise FeatureError("bit-vector byte lengths differ")
    return _POPCOUNT[a ^ b].sum(axis=-1).astype(np.int64)


def descriptor_distance(a: np.ndarray, b: np.ndarray, mode: str = "float"):
    """Distance between two descriptors: L2 (float mode) or Hamming (binary mode)."""
    if mode == "float":
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise FeatureError("descriptor dims differ")
        return float(np.linalg.norm(a - b))
    if mode == "binary":
        return int(hamming_distance(np.atleast_1d(a), np.atleast_1d(b)))
    raise FeatureError(f"unknown distance mode {mode!r}")


# ---------------------------------------------------------------------------
# Feature-map files ("DFMP" float / "DFMB" binary), little-endian throughout.
# Layout: magic (4 bytes), u8 level-count, then per level u32 stride, patch,
# rows, cols, dim followed by the row-major payload (float32 or packed bits).
# Threshold files: "DFTH", u32 dim, dim float32s.
# ---------------------------------------------------------------------------

def save_feature_file(path, grids) -> None:
    grids = list(grids)
    if not grids:
        raise FeatureError("feature file needs at least one level")
    kinds = {type(g) for g in grids}
    if kinds == {FeatureGrid}:
        magic = MAGIC_FLOAT
    elif kinds == {BinaryFeatureGrid}:
        magic = MAGIC_BINARY
    else:
        raise FeatureError("cannot mix float and binary levels in one file")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<B", len(grids)))
        for g in grids:
            fh.write(struct.pack("<5I", g.stride, g.patch, g.rows, g.cols, g.dim))
            if magic == MAGIC_FLOAT:
                fh.write(np.ascontiguousarray(g.descriptors, dtype="<f4").tobytes())
            else:
                fh.write(np.ascontiguousarray(g.bits, dtype=np.uint8).tobytes())


def save_pyramid(path, pyramid: FeaturePyramid) -> None:
    save_feature_file(path, [pyramid.coarse, pyramid.fine])


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FeatureFormatError(f"truncated feature file while reading {what}")
    return buf


def load_feature_file(path):
    """Strictly parse a DFMP/DFMB file; returns the list of level grids.

    Levels come back sorted by descending stride (coarse first). The source
    image size is not stored in the file, so the minimal size consistent
    with the grid geometry is recorded.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic not in (MAGIC_FLOAT, MAGIC_BINARY):
            raise FeatureFormatError(f"bad magic {magic!r}")
        (count,) = struct.unpack("<B", _read_exact(fh, 1, "level count"))
        if count == 0:
            raise FeatureFormatError("feature file declares zero levels")
        grids = []
        for i in range(count):
            stride, patch, rows, cols, dim = struct.unpack(
                "<5I", _read_exact(fh, 20, f"level {i} header")
            )
            if stride == 0 or patch == 0 or rows == 0 or cols == 0 or dim == 0:
                raise FeatureFormatError(f"level {i} has a zero geometry field")
            size = (patch + (cols - 1) * stride, patch + (rows - 1) * stride)
            if magic == MAGIC_FLOAT:
                raw = _read_exact(fh, rows * cols * dim * 4, f"level {i} data")
                desc = np.frombuffer(raw, dtype="<f4").reshape(rows, cols, dim)
                grids.append(FeatureGrid("fine", stride, patch, desc, size))
            else:
                if dim % 8 != 0:
                    raise FeatureFormatError(f"binary level {i} dim not divisible by 8")
                raw = _read_exact(fh, rows * cols * (dim // 8), f"level {i} data")
                bits = np.frombuffer(raw, dtype=np.uint8).reshape(rows, cols, dim // 8)
                grids.append(BinaryFeatureGrid("fine", stride, patch, bits, dim, size))
        if fh.read(1):
            raise FeatureFormatError("trailing bytes after final level")
    grids.sort(key=lambda g: -g.stride)
    if len(grids) >= 2:
        grids[0] = _relabel(grids[0], "coarse")
    return grids


def load_pyramid(path) -> FeaturePyramid:
    grids = load_feature_file(path)
    if len(grids) != 2 or not isinstance(grids[0], FeatureGrid):
        raise FeatureFormatError("pyramid file must hold exactly two float levels")
    # harmonize recorded sizes: the true source covers both minimal extents
    w = max(g.image_size[0] for g in grids)
    h = max(g.image_size[1] for g in grids)
    coarse = FeatureGrid("coarse", grids[0].stride, grids[0].patch,
                         grids[0].descriptors, (w, h))
    fine = FeatureGrid("fine", grids[1].stride, grids[1].patch,
                       grids[1].descriptors, (w, h))
    return FeaturePyramid(coarse=coarse, fine=fine)


def _relabel(grid, level: str):
    if isinstance(grid, FeatureGrid):
        return FeatureGrid(level, grid.stride, grid.patch, grid.descriptors, grid.image_size)
    return BinaryFeatureGrid(level, grid.stride, grid.patch, grid.bits, grid.dim,
                             grid.image_size, grid.thresholds)


def save_thresholds(path, thresholds: np.ndarray) -> None:
    thresholds = np.asarray(thresholds, dtype="<f4").reshape(-1)
    with open(path, "wb") as fh:
        fh.write(MAGIC_THRESHOLDS)
        fh.write(struct.pack("<I", thresholds.size))
        fh.write(thresholds.tobytes())


def load_thresholds(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC_THRESHOLDS:
            raise FeatureFormatError(f"bad threshold magic {magic!r}")
        (dim,) = struct.unpack("<I", _read_exact(fh, 4, "dim"))
        raw = _read_exact(fh, dim * 4, "thresholds")
        if fh.read(1):
            raise FeatureFormatError("trailing bytes in threshold file")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)
