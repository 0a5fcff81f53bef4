"""Patch feature extraction and the feature-grid file format.

The reference descriptor is the raw patch: a sliding window of
patch_size x patch_size pixels flattened row-major, giving a grid of
(grid_h x grid_w) vectors of dimension patch_size^2. Vectors are stored
as float32 so file round-trips are bit-exact.

File format "IADF": magic ``IADF`` (4 bytes), version u16=1
little-endian, u32 grid_h, u32 grid_w, u32 dim, then
grid_h * grid_w * dim IEEE-754 binary32 little-endian values, row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import ImageGrid
from .errors import ConfigError, DetectorError, FormatError

_MAGIC = b"IADF"
_VERSION = 1
_HEADER = struct.Struct("<4sHIII")


@dataclass(frozen=True)
class FeatureProviderConfig:
    patch_size: int
    stride: int
    descriptor: str = "raw-patch"

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError("invalid-spec", "patch_size must be >= 1")
        if not 1 <= self.stride <= self.patch_size:
            raise ConfigError("invalid-spec", "stride must be in [1, patch_size]")
        if self.descriptor != "raw-patch":
            raise ConfigError("invalid-spec", f"unknown descriptor {self.descriptor!r}")


@dataclass
class PatchFeatureGrid:
    grid_h: int
    grid_w: int
    dim: int
    vectors: np.ndarray  # (grid_h * grid_w, dim) float32, row-major patches

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1 or self.dim < 1:
            raise DetectorError("bad-dims", "grid dims and dim must be >= 1")
        arr = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if arr.shape != (self.grid_h * self.grid_w, self.dim):
            raise DetectorError(
                "bad-dims",
                f"vectors shape {arr.shape} != ({self.grid_h * self.grid_w}, {self.dim})",
            )
        if not np.all(np.isfinite(arr)):
            raise DetectorError("bad-dims", "feature vectors must be finite")
        self.vectors = arr


def extract_features(image: ImageGrid, cfg: FeatureProviderConfig) -> PatchFeatureGrid:
    """Slide the patch window over the image and flatten each window."""
    p, s = cfg.patch_size, cfg.stride
    if image.height < p or image.width < p:
        raise ConfigError(
            "patch-too-large",
            f"patch {p} exceeds image {image.height}x{image.width}",
        )
    windows = sliding_window_view(image.values, (p, p))[::s, ::s]
    grid_h, grid_w = windows.shape[0], windows.shape[1]
    vectors = windows.reshape(grid_h * grid_w, p * p).astype(np.float32)
    return PatchFeatureGrid(grid_h=grid_h, grid_w=grid_w, dim=p * p, vectors=vectors)


def write_feature_file(grid: PatchFeatureGrid, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, grid.grid_h, grid.grid_w, grid.dim))
        fh.write(np.ascontiguousarray(grid.vectors, dtype="<f4").tobytes())


def read_feature_file(path: str) -> PatchFeatureGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("truncated-file", f"{path}: header incomplete")
    magic, version, grid_h, grid_w, dim = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise FormatError("bad-magic", f"{path}: expected IADF, got {magic!r}")
    if version != _VERSION:
        raise FormatError("version-unsupported", f"{path}: version {version}")
    count = grid_h * grid_w * dim
    payload = data[_HEADER.size :]
    if len(payload) != count * 4:
        raise FormatError(
            "truncated-file",
            f"{path}: expected {count * 4} payload bytes, got {len(payload)}",
        )
    vectors = np.frombuffer(payload, dtype="<f4").reshape(grid_h * grid_w, dim)
    return PatchFeatureGrid(grid_h=grid_h, grid_w=grid_w, dim=dim, vectors=vectors.copy())
