"""Reference memory-bank detector.

Training collects every patch descriptor of the normal samples into a
flat bank, optionally shrunk by greedy k-center coreset selection in a
randomly projected space. Scoring computes each test patch's Euclidean
distance to its nearest bank vector; the image score is the maximum
patch distance, softened by softmax importance re-weighting over the b
bank vectors nearest to the winning patch. Distances are always
accumulated in double precision; bank storage is float32.

Bank snapshot format "IADB": magic ``IADB``, version u16=1
little-endian, u32 dim, u64 count, count u32 task tags, then
count * dim IEEE-754 binary32 little-endian vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DetectorError, FormatError
from .features import PatchFeatureGrid

_MAGIC = b"IADB"
_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")

_SCORE_CHUNK = 256  # test patches per distance block, bounds peak memory


@dataclass
class MemoryBank:
    dim: int
    vectors: np.ndarray  # (count, dim) float32
    task_tags: np.ndarray  # (count,) uint32; 0 for single-task banks

    def __post_init__(self):
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        tags = np.ascontiguousarray(self.task_tags, dtype=np.uint32)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise DetectorError("dim-mismatch", f"bank vectors must be (n, {self.dim})")
        if tags.shape != (vectors.shape[0],):
            raise DetectorError("dim-mismatch", "one task tag per vector required")
        if not np.all(np.isfinite(vectors)):
            raise DetectorError("dim-mismatch", "bank vectors must be finite")
        self.vectors = vectors
        self.task_tags = tags

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def empty(cls, dim: int) -> "MemoryBank":
        return cls(dim, np.zeros((0, dim), np.float32), np.zeros(0, np.uint32))


def build_bank(grids: list[PatchFeatureGrid]) -> MemoryBank:
    """Union of every patch vector of every grid, in (grid, row-major) order."""
    if not grids:
        raise DetectorError("empty-input", "need at least one feature grid")
    dim = grids[0].dim
    for g in grids:
        if g.dim != dim:
            raise DetectorError("dim-mismatch", f"grid dim {g.dim} != bank dim {dim}")
    vectors = np.concatenate([g.vectors for g in grids], axis=0)
    return MemoryBank(dim, vectors, np.zeros(vectors.shape[0], np.uint32))


@dataclass
class Projector:
    in_dim: int
    out_dim: int
    matrix: np.ndarray | None  # None = exact identity pass-through
    seed: int = 0

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        arr = np.asarray(vectors, dtype=np.float64)
        if self.matrix is None:
            return arr
        return np.einsum("nd,od->no", arr, self.matrix)


def make_projector(in_dim: int, out_dim: int, seed: int) -> Projector:
    """Seeded Gaussian random projection; identity when dims are equal."""
    if not 1 <= out_dim <= in_dim:
        raise DetectorError("bad-dims", f"need 1 <= out_dim <= in_dim, got {out_dim}/{in_dim}")
    if out_dim == in_dim:
        return Projector(in_dim, out_dim, None, seed)
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((out_dim, in_dim)) / np.sqrt(out_dim)
    return Projector(in_dim, out_dim, matrix, seed)


@dataclass(frozen=True)
class CoresetParams:
    target_fraction: float | None = None
    l: int | None = None
    projection_dim: int | None = None
    seed: int = 0

    def resolve_l(self, bank_size: int) -> int:
        if (self.target_fraction is None) == (self.l is None):
            raise DetectorError(
                "l-out-of-range", "exactly one of target_fraction or l required"
            )
        if self.l is not None:
            l = self.l
        else:
            if not 0.0 < self.target_fraction <= 1.0:
                raise DetectorError(
                    "l-out-of-range", f"target_fraction {self.target_fraction} not in (0, 1]"
                )
            # round half up for cross-implementation agreement
            l = int(np.floor(self.target_fraction * bank_size + 0.5))
            l = max(1, l)
        if not 1 <= l <= bank_size:
            raise DetectorError("l-out-of-range", f"l={l} for bank of {bank_size}")
        return l


def coreset_select(bank: MemoryBank, params: CoresetParams) -> list[int]:
    """Greedy k-center selection in the projected space.

    The bank's first vector seeds the selection; each following pick is
    the vector farthest from the current selection, ties broken by the
    lowest index. Returns exactly l distinct indices in selection order.
    """
    if bank.count == 0:
        raise DetectorError("empty-bank", "cannot coreset an empty bank")
    l = params.resolve_l(bank.count)
    if params.projection_dim is not None and params.projection_dim != bank.dim:
        projector = make_projector(bank.dim, params.projection_dim, params.seed)
        points = projector.apply(bank.vectors)
    else:
        points = bank.vectors.astype(np.float64)
    selected = [0]
    min_d2 = ((points - points[0]) ** 2).sum(axis=1)
    min_d2[0] = -1.0
    for _ in range(l - 1):
        idx = int(np.argmax(min_d2))
        selected.append(idx)
        cand = ((points - points[idx]) ** 2).sum(axis=1)
        np.minimum(min_d2, cand, out=min_d2)
        min_d2[idx] = -1.0
    return selected


@dataclass
class ScoreResult:
    s_star: float  # raw max-min distance over patches
    neighbor_index: int  # bank index of the winning patch's nearest vector
    patch_index: int  # row-major position of the winning patch
    s: float  # re-weighted image score, 0 <= s <= s_star


def _nearest_distances(bank: MemoryBank, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per test vector: (Euclidean distance, index) of the nearest bank vector."""
    bank_v = bank.vectors.astype(np.float64)
    test_v = np.asarray(vectors, dtype=np.float64)
    nn_idx = np.empty(test_v.shape[0], dtype=np.int64)
    nn_d2 = np.empty(test_v.shape[0], dtype=np.float64)
    for start in range(0, test_v.shape[0], _SCORE_CHUNK):
        chunk = test_v[start : start + _SCORE_CHUNK]
        d2 = ((chunk[:, None, :] - bank_v[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
        nn_idx[start : start + chunk.shape[0]] = idx
        nn_d2[start : start + chunk.shape[0]] = d2[np.arange(chunk.shape[0]), idx]
    return np.sqrt(nn_d2), nn_idx


def score_patches(
    bank: MemoryBank, grid: PatchFeatureGrid
) -> tuple[np.ndarray, float, int, int]:
    """Nearest-bank distance per patch plus the maximum-score summary.

    Returns (distances in row-major patch order, s_star, patch_index,
    neighbor_index); argmax ties resolve to the lowest row-major patch,
    nearest-neighbor ties to the lowest bank index.
    """
    if bank.count == 0:
        raise DetectorError("empty-bank", "bank has no vectors")
    if grid.dim != bank.dim:
        raise DetectorError("dim-mismatch", f"grid dim {grid.dim} != bank dim {bank.dim}")
    distances, neighbors = _nearest_distances(bank, grid.vectors)
    patch_index = int(np.argmax(distances))
    return distances, float(distances[patch_index]), patch_index, int(neighbors[patch_index])


def reweight(
    bank: MemoryBank,
    test_vector: np.ndarray,
    s_star: float,
    neighbor_index: int,
    b: int,
) -> float:
    """Softmax importance re-weighting of the raw image score.

    With b = 1 the score passes through unchanged. Otherwise the b bank
    vectors nearest to the test vector (including its nearest neighbor)
    form the neighborhood; the score scales by one minus the softmax
    weight of the nearest neighbor, with max-subtraction for stability.
    """
    if not 1 <= b <= bank.count:
        raise DetectorError("b-out-of-range", f"b={b} for bank of {bank.count}")
    if b == 1:
        return s_star
    test = np.asarray(test_vector, dtype=np.float64).ravel()
    if test.size != bank.dim:
        raise DetectorError("dim-mismatch", f"test vector dim {test.size} != {bank.dim}")
    d = np.sqrt(((bank.vectors.astype(np.float64) - test) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(bank.count), d))  # distance, then index
    hood = d[order[:b]]
    d_star = d[neighbor_index]
    shift = hood.max()
    weight = np.exp(d_star - shift) / np.sum(np.exp(hood - shift))
    return float((1.0 - weight) * s_star)


def score_image(
    bank: MemoryBank, grid: PatchFeatureGrid, b: int
) -> tuple[ScoreResult, np.ndarray]:
    """Image-level score plus the grid-resolution anomaly map.

    The map keeps the raw per-patch nearest distances; only the scalar
    image score is re-weighted.
    """
    if not 1 <= b <= bank.count:
        raise DetectorError("b-out-of-range", f"b={b} for bank of {bank.count}")
    distances, s_star, patch_index, neighbor_index = score_patches(bank, grid)
    s = reweight(bank, grid.vectors[patch_index], s_star, neighbor_index, b)
    patch_map = distances.reshape(grid.grid_h, grid.grid_w)
    return ScoreResult(s_star, neighbor_index, patch_index, s), patch_map


def render_anomaly_map(
    patch_map: np.ndarray,
    image_h: int,
    image_w: int,
    patch_size: int,
    stride: int,
    smoothing_sigma: float = 4.0,
) -> np.ndarray:
    """Bilinear upsample of a patch-score grid to pixel resolution.

    Patch (r, c) is anchored at its window center
    (r*stride + (patch_size-1)/2, likewise for columns); pixels outside
    the span of centers clamp to the border value. A Gaussian blur with
    ``smoothing_sigma`` pixels follows (sigma = 0 disables it).
    """
    grid = np.asarray(patch_map, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise DetectorError("bad-dims", "patch map must be a nonempty 2-D grid")
    if image_h < patch_size or image_w < patch_size:
        raise DetectorError("bad-dims", "image smaller than one patch")
    gh, gw = grid.shape
    expected = ((image_h - patch_size) // stride + 1, (image_w - patch_size) // stride + 1)
    if (gh, gw) != expected:
        raise DetectorError(
            "bad-dims",
            f"patch map {gh}x{gw} inconsistent with image {image_h}x{image_w} "
            f"at patch {patch_size}/stride {stride} (expected {expected[0]}x{expected[1]})",
        )
    offset = (patch_size - 1) / 2.0

    def coords(n_pixels: int, n_cells: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        u = (np.arange(n_pixels, dtype=np.float64) - offset) / stride
        u = np.clip(u, 0.0, n_cells - 1.0)
        lo = np.floor(u).astype(np.int64)
        lo = np.minimum(lo, n_cells - 1)
        hi = np.minimum(lo + 1, n_cells - 1)
        return lo, hi, u - lo

    y0, y1, wy = coords(image_h, gh)
    x0, x1, wx = coords(image_w, gw)
    wy = wy[:, None]
    wx = wx[None, :]
    upsampled = (
        grid[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + grid[np.ix_(y0, x1)] * (1 - wy) * wx
        + grid[np.ix_(y1, x0)] * wy * (1 - wx)
        + grid[np.ix_(y1, x1)] * wy * wx
    )
    if smoothing_sigma > 0:
        upsampled = ndimage.gaussian_filter(upsampled, sigma=smoothing_sigma)
    return upsampled


def extend_bank_for_task(
    bank: MemoryBank,
    new_grids: list[PatchFeatureGrid],
    task_index: int,
    per_task_params: CoresetParams,
) -> MemoryBank:
    """Append the coreset of a new task's patches; existing vectors are kept.

    Queries on the result search the union of all tasks, so adding a
    task can only tighten nearest-neighbor distances for earlier tasks.
    """
    if bank.count > 0 and task_index <= int(bank.task_tags.max()):
        raise DetectorError(
            "task-order-violation",
            f"task {task_index} not greater than existing tags",
        )
    task_bank = build_bank(new_grids)
    picked = coreset_select(task_bank, per_task_params)
    new_tags = np.full(len(picked), task_index, dtype=np.uint32)
    if bank.count == 0:
        return MemoryBank(task_bank.dim, task_bank.vectors[picked], new_tags)
    if task_bank.dim != bank.dim:
        raise DetectorError("dim-mismatch", f"task dim {task_bank.dim} != {bank.dim}")
    vectors = np.concatenate([bank.vectors, task_bank.vectors[picked]], axis=0)
    tags = np.concatenate([bank.task_tags, new_tags])
    return MemoryBank(bank.dim, vectors, tags)


def write_bank_file(bank: MemoryBank, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, bank.dim, bank.count))
        fh.write(np.ascontiguousarray(bank.task_tags, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(bank.vectors, dtype="<f4").tobytes())


def read_bank_file(path: str) -> MemoryBank:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("truncated-file", f"{path}: header incomplete")
    magic, version, dim, count = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise FormatError("bad-magic", f"{path}: expected IADB, got {magic!r}")
    if version != _VERSION:
        raise FormatError("version-unsupported", f"{path}: version {version}")
    tags_bytes = count * 4
    vec_bytes = count * dim * 4
    payload = data[_HEADER.size :]
    if len(payload) != tags_bytes + vec_bytes:
        raise FormatError(
            "truncated-file",
            f"{path}: expected {tags_bytes + vec_bytes} payload bytes, got {len(payload)}",
        )
    tags = np.frombuffer(payload[:tags_bytes], dtype="<u4").copy()
    vectors = (
        np.frombuffer(payload[tags_bytes:], dtype="<f4").reshape(count, dim).copy()
    )
    return MemoryBank(dim, vectors, tags)
