"""Sparse Cartesian voxel tensors.

A tensor is a set of voxel indices kept in canonical order (lexicographically
sorted and unique) plus one feature row per voxel. Indices are also handled as
row-major linear keys ``(i * Y + j) * Z + k``, whose ordering coincides with the
lexicographic ordering of ``(i, j, k)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AgriRadarError, ConfigError
from .scene_sim import ClassLabel, SemanticPointCloud

log = logging.getLogger(__name__)


class GridError(AgriRadarError):
    """Raised on malformed tensors, mismatched grids or invalid voxel data."""
    pass


@dataclass
class GridSpec:
    """Voxel grid: ``dims`` cells spanning [lower, upper) meters per axis."""
    dims: tuple[int, int, int] = (150, 150, 100)
    lower: tuple[float, float, float] = (4.0, -20.0, -20.0)
    upper: tuple[float, float, float] = (40.0, 20.0, 10.0)

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError("grid.dims must be three positive counts")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ConfigError("grid extents must be increasing along every axis")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (tuple(int(d) for d in self.dims) == tuple(int(d) for d in other.dims)
                and tuple(map(float, self.lower)) == tuple(map(float, other.lower))
                and tuple(map(float, self.upper)) == tuple(map(float, other.upper)))

    @property
    def voxel_size(self) -> np.ndarray:
        return (np.asarray(self.upper, float) - np.asarray(self.lower, float)) / np.asarray(self.dims)

    @property
    def num_voxels(self) -> int:
        x, y, z = self.dims
        return int(x) * int(y) * int(z)

    def centers(self, indices: np.ndarray) -> np.ndarray:
        """World coordinates of voxel centers."""
        indices = np.asarray(indices).reshape(-1, 3)
        return np.asarray(self.lower, float) + (indices + 0.5) * self.voxel_size

    def point_to_voxel(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Voxel indices of points.

        Returns:
            Tuple of (indices (N, 3), valid mask (N,)). Rows of points outside
            the grid are flagged invalid; their indices are meaningless.

        Raises:
            GridError: If any coordinate is NaN.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if np.isnan(points).any():
            raise GridError("NaN coordinates cannot be voxelized")
        scaled = (points - np.asarray(self.lower, float)) / self.voxel_size
        idx = np.floor(scaled).astype(np.int64)
        valid = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)
        return idx, valid

    def ravel(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        _, y, z = self.dims
        return (indices[:, 0] * y + indices[:, 1]) * z + indices[:, 2]

    def unravel(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        return np.column_stack(np.unravel_index(keys, tuple(int(d) for d in self.dims))).astype(np.int64)


@dataclass(frozen=True, eq=False)
class SparseVoxelTensor:
    """Canonical sparse tensor: indices (M, 3) int64, features (M, C) float64."""
    spec: GridSpec
    indices: np.ndarray
    features: np.ndarray
    keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        if features.ndim != 2 or len(features) != len(indices):
            raise GridError(
                f"Feature rows ({features.shape}) do not match {len(indices)} indices"
            )
        if len(indices) and ((indices < 0).any() or (indices >= np.asarray(self.spec.dims)).any()):
            raise GridError("Voxel index outside grid dims")
        keys = self.spec.ravel(indices)
        if len(keys) > 1 and not np.all(keys[1:] > keys[:-1]):
            raise GridError("Voxel indices are not strictly increasing")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "keys", keys)

    @classmethod
    def empty(cls, spec: GridSpec, channels: int = 1) -> SparseVoxelTensor:
        return cls(spec, np.zeros((0, 3), dtype=np.int64), np.zeros((0, channels)))

    @classmethod
    def from_keys(cls, spec: GridSpec, keys: np.ndarray, features: np.ndarray) -> SparseVoxelTensor:
        """Build from strictly increasing linear keys."""
        return cls(spec, spec.unravel(keys), features)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseVoxelTensor):
            return NotImplemented
        return (self.spec == other.spec
                and np.array_equal(self.indices, other.indices)
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))

    def with_features(self, features: np.ndarray) -> SparseVoxelTensor:
        return SparseVoxelTensor(self.spec, self.indices, features)

    def take(self, mask: np.ndarray) -> SparseVoxelTensor:
        """Rows selected by a boolean mask, order preserved."""
        return SparseVoxelTensor(self.spec, self.indices[mask], self.features[mask])

    def dense(self, channel: int = 0, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.spec.dims, fill, dtype=np.float64)
        out[tuple(self.indices.T)] = self.features[:, channel]
        return out


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def voxelize(points: np.ndarray, values: np.ndarray, spec: GridSpec,
             reduce: str = "sum") -> SparseVoxelTensor:
    """
    Bin points into voxels.

    Points outside the grid are dropped. Co-located values are reduced by
    ``sum`` (in input order), ``max``, or ``majority`` (most frequent integer
    code, ties to the smallest code).

    Raises:
        GridError: On NaN coordinates, an unknown reduction, or non-integer
            values for ``majority``.
    """
    idx, valid = spec.point_to_voxel(points)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    if len(values) != len(idx):
        raise GridError(f"{len(idx)} points but {len(values)} value rows")
    keys = spec.ravel(idx[valid])
    vals = values[valid]
    uniq, inverse = np.unique(keys, return_inverse=True)
    inverse = inverse.reshape(-1)
    m, c = len(uniq), values.shape[1]

    if reduce == "sum":
        out = np.column_stack([np.bincount(inverse, weights=vals[:, j], minlength=m)
                               for j in range(c)]) if c else np.zeros((m, 0))
    elif reduce == "max":
        out = np.full((m, c), -np.inf)
        np.maximum.at(out, inverse, vals)
    elif reduce == "majority":
        if c != 1:
            raise GridError("Majority reduction needs exactly one feature column")
        codes = vals[:, 0]
        if not np.array_equal(codes, np.round(codes)) or (codes < 0).any():
            raise GridError("Majority reduction needs non-negative integer codes")
        codes = codes.astype(np.int64)
        width = int(codes.max()) + 1 if len(codes) else 1
        counts = np.zeros((m, width), dtype=np.int64)
        np.add.at(counts, (inverse, codes), 1)
        out = counts.argmax(axis=1).astype(np.float64).reshape(-1, 1)
    else:
        raise GridError(f"Unknown reduction: {reduce}")
    return SparseVoxelTensor.from_keys(spec, uniq, out)


def align_supports(a: SparseVoxelTensor, b: SparseVoxelTensor,
                   fill_b) -> tuple[SparseVoxelTensor, SparseVoxelTensor]:
    """
    Re-express ``b`` on the support of ``a``.

    Rows of ``b`` outside ``a`` are dropped; rows of ``a`` missing from ``b``
    receive ``fill_b``.

    Raises:
        GridError: If the tensors live on different grids.
    """
    if a.spec != b.spec:
        raise GridError("Cannot align tensors on different grids")
    fill = np.broadcast_to(np.asarray(fill_b, dtype=np.float64), (b.channels,))
    out = np.tile(fill, (len(a), 1))
    if len(b) and len(a):
        pos = np.searchsorted(b.keys, a.keys)
        clipped = np.minimum(pos, len(b) - 1)
        found = (pos < len(b)) & (b.keys[clipped] == a.keys)
        out[found] = b.features[clipped[found]]
    return a, SparseVoxelTensor(a.spec, a.indices, out)


def filter_rows(t: SparseVoxelTensor,
                predicate: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> SparseVoxelTensor:
    """Keep rows where ``predicate(indices, features)`` is true (vectorized)."""
    mask = np.asarray(predicate(t.indices, t.features), dtype=bool).reshape(-1)
    if len(mask) != len(t):
        raise GridError(f"Predicate returned {len(mask)} values for {len(t)} rows")
    return t.take(mask)


def to_point_cloud(t: SparseVoxelTensor) -> SemanticPointCloud:
    """
    Voxel centers with their class codes; free voxels are dropped.

    Raises:
        GridError: If the tensor does not hold one integer class column.
    """
    if t.channels != 1:
        raise GridError(f"Expected one class column, got {t.channels}")
    codes = t.features[:, 0]
    if not np.array_equal(codes, np.round(codes)):
        raise GridError("Class features must be integer codes")
    keep = codes != int(ClassLabel.FREE)
    return SemanticPointCloud(t.spec.centers(t.indices[keep]), codes[keep].astype(np.int64))
