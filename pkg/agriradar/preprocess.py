"""Multi-frame radar cube preprocessing.

Each frame's spherical cube is intensity filtered, its surviving bins are
converted to Cartesian points, aligned to the current (last) frame and
frustum filtered. The surviving points of all frames are scatter-added into
a sparse Cartesian cube (RCC), which is filtered once more and normalized by
its maximum. CFAR detections go through the same alignment to form the radar
point cloud (RPC) occupancy tensor.

Accumulation sums every voxel's contributions in input order (frame order,
then bin order), whatever the thread count, so outputs are bit-identical for
1..P threads and equal to the dense reference ``sequential_accumulate``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AgriRadarError, ConfigError
from .kernels import segment_sums, thread_limit
from .radar import Detections, SphericalCube, spherical_bins_to_points
from .scene_sim import FovConfig, PoseSE3
from .sparse_grid import GridError, GridSpec, SparseVoxelTensor, align_supports, voxelize

log = logging.getLogger(__name__)


class PreprocessError(AgriRadarError):
    """Raised when preprocessing inputs are inconsistent."""
    pass


@dataclass
class PreprocessConfig:
    """Frame count, per-frame and final top percentiles, grid and frustum."""
    frames: int = 5
    q_th: float = 1.0
    final_q_th: float = 1.0
    grid: GridSpec = field(default_factory=GridSpec)
    fov: FovConfig = field(default_factory=FovConfig)

    def validate(self) -> None:
        if self.frames < 1:
            raise ConfigError("preprocess.frames must be at least 1")
        for name in ("q_th", "final_q_th"):
            value = getattr(self, name)
            if not 0.0 < value <= 100.0:
                raise ConfigError(f"preprocess.{name} must lie in (0, 100], got {value}")
        self.grid.validate()
        self.fov.validate()


@dataclass(frozen=True, eq=False)
class StageOneInput:
    """RCC support with columns (normalized power, RPC occupancy)."""
    tensor: SparseVoxelTensor

    def __post_init__(self) -> None:
        t = self.tensor
        if t.channels != 2:
            raise PreprocessError(f"Stage-I input needs 2 columns, got {t.channels}")
        power, occ = t.features[:, 0], t.features[:, 1]
        if len(t) and (power.min() < 0.0 or power.max() > 1.0):
            raise PreprocessError("Stage-I power column must lie in [0, 1]")
        if not np.all((occ == 0.0) | (occ == 1.0)):
            raise PreprocessError("Stage-I occupancy column must be binary")

    @property
    def spec(self) -> GridSpec:
        return self.tensor.spec

    @property
    def indices(self) -> np.ndarray:
        return self.tensor.indices

    @property
    def power(self) -> np.ndarray:
        return self.tensor.features[:, 0]

    @property
    def occupancy(self) -> np.ndarray:
        return self.tensor.features[:, 1]

    def __len__(self) -> int:
        return len(self.tensor)


# ---------------------------------------------------------------------------
# Filtering and alignment
# ---------------------------------------------------------------------------

def keep_count(total: int, q_th: float) -> int:
    """Number of entries kept by a top-``q_th`` percent filter."""
    # rounding strips float noise such as 27627.480000000003 before the ceiling
    return min(total, int(math.ceil(round(total * q_th / 100.0, 9))))


def top_indices(values: np.ndarray, k: int) -> np.ndarray:
    """
    Positions of the ``k`` largest values, ascending.

    Ties at the cut-off go to the smallest positions.
    """
    values = np.asarray(values).reshape(-1)
    n = len(values)
    if k >= n:
        return np.arange(n)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    threshold = np.partition(values, n - k)[n - k]
    above = np.flatnonzero(values > threshold)
    ties = np.flatnonzero(values == threshold)[: k - len(above)]
    return np.sort(np.concatenate([above, ties]))


def intensity_filter(cube: SphericalCube, q_th: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Keep the top ``q_th`` percent of bins.

    Returns:
        Tuple of (bins (k, 3) in lexicographic order, intensities (k,)).
    """
    if not 0.0 < q_th <= 100.0:
        raise PreprocessError(f"q_th must lie in (0, 100], got {q_th}")
    flat = cube.power.reshape(-1)
    keep = top_indices(flat, keep_count(flat.size, q_th))
    bins = np.column_stack(np.unravel_index(keep, cube.power.shape)).astype(np.int64)
    return bins, flat[keep].astype(np.float64)


def transform_points(points: np.ndarray, source: PoseSE3, target: PoseSE3) -> np.ndarray:
    """Map points from the ``source`` sensor frame into the ``target`` sensor frame."""
    return target.to_sensor(source.to_world(points))


# ---------------------------------------------------------------------------
# Accumulation
# ---------------------------------------------------------------------------

def parallel_index_accumulate(indices: np.ndarray, intensities: np.ndarray,
                              spec: GridSpec, threads: int = 1) -> SparseVoxelTensor:
    """
    Per-voxel sum of intensities.

    Entries are stably sorted by voxel key, so each voxel owns one contiguous
    run in input order. A compiled kernel sums the runs on ``threads`` numba
    threads; every run is added left to right by a single thread and the
    sums come out in key order.

    Raises:
        PreprocessError: If an index lies outside the grid.
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    values = np.asarray(intensities, dtype=np.float64).reshape(-1)
    if len(indices) != len(values):
        raise PreprocessError(f"{len(indices)} indices but {len(values)} intensities")
    if len(indices) == 0:
        return SparseVoxelTensor.empty(spec)
    if (indices < 0).any() or (indices >= np.asarray(spec.dims)).any():
        raise PreprocessError("Voxel index outside grid dims")

    keys = spec.ravel(indices)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    sorted_values = np.ascontiguousarray(values[order])
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]]).astype(np.int64)
    ends = np.append(starts[1:], len(sorted_keys)).astype(np.int64)

    with thread_limit(threads):
        sums = segment_sums(sorted_values, starts, ends)
    return SparseVoxelTensor.from_keys(spec, sorted_keys[starts], sums)


def _frame_points(cube: SphericalCube, pose: PoseSE3, current: PoseSE3,
                  cfg: PreprocessConfig, is_current: bool) -> tuple[np.ndarray, np.ndarray]:
    """One frame's filtered, aligned, frustum-checked voxel indices and intensities."""
    bins, values = intensity_filter(cube, cfg.q_th)
    points = spherical_bins_to_points(bins, cube.config)
    if not is_current:
        points = transform_points(points, pose, current)
    in_fov = cfg.fov.contains(points)
    idx, valid = cfg.grid.point_to_voxel(points[in_fov])
    return idx[valid], values[in_fov][valid]


def _select_frames(cubes: Sequence[SphericalCube], poses: Sequence[PoseSE3],
                   cfg: PreprocessConfig) -> tuple[list, list]:
    if len(cubes) != len(poses):
        raise PreprocessError(f"Got {len(cubes)} cubes but {len(poses)} poses")
    if not cubes:
        raise PreprocessError("At least one frame is required")
    cfg.validate()
    if len(cubes) < cfg.frames:
        log.debug("Only %d of %d frames available", len(cubes), cfg.frames)
    return list(cubes[-cfg.frames:]), list(poses[-cfg.frames:])


def _final_filter(rcc: SparseVoxelTensor, cfg: PreprocessConfig, normalize: bool) -> SparseVoxelTensor:
    keep = top_indices(rcc.features[:, 0], keep_count(cfg.grid.num_voxels, cfg.final_q_th))
    mask = np.zeros(len(rcc), dtype=bool)
    mask[keep] = True
    rcc = rcc.take(mask)
    if normalize and len(rcc):
        peak = rcc.features[:, 0].max()
        if peak > 0:
            rcc = rcc.with_features(rcc.features / peak)
    return rcc


def accumulate_frames(cubes: Sequence[SphericalCube], poses: Sequence[PoseSE3],
                      cfg: PreprocessConfig, threads: int = 1,
                      normalize: bool = True) -> SparseVoxelTensor:
    """
    Build the radar Cartesian cube from the last ``cfg.frames`` frames.

    Args:
        cubes: Spherical cubes, oldest first; the last one is the current frame.
        poses: Sensor-to-world pose per cube.
        cfg: Preprocessing parameters.
        threads: Numba threads for the accumulation kernel.
        normalize: Divide power by the maximum surviving power.

    Returns:
        Single-column tensor of accumulated power.

    Raises:
        PreprocessError: If cube and pose counts differ or no frame is given.
    """
    cubes, poses = _select_frames(cubes, poses, cfg)
    current = poses[-1]
    last = len(cubes) - 1

    per_frame = [_frame_points(cube, pose, current, cfg, i == last)
                 for i, (cube, pose) in enumerate(zip(cubes, poses))]

    indices = np.concatenate([p[0] for p in per_frame])
    values = np.concatenate([p[1] for p in per_frame])
    rcc = parallel_index_accumulate(indices, values, cfg.grid, threads)
    rcc = _final_filter(rcc, cfg, normalize)
    log.debug("Accumulated %d frames into %d voxels", len(cubes), len(rcc))
    return rcc


def sequential_accumulate(cubes: Sequence[SphericalCube], poses: Sequence[PoseSE3],
                          cfg: PreprocessConfig, normalize: bool = True) -> SparseVoxelTensor:
    """Single-threaded dense-array reference for ``accumulate_frames``."""
    cubes, poses = _select_frames(cubes, poses, cfg)
    dense = np.zeros(cfg.grid.dims, dtype=np.float64)
    touched = np.zeros(cfg.grid.dims, dtype=bool)
    last = len(cubes) - 1
    for i, (cube, pose) in enumerate(zip(cubes, poses)):
        idx, values = _frame_points(cube, pose, poses[-1], cfg, i == last)
        np.add.at(dense, tuple(idx.T), values)
        touched[tuple(idx.T)] = True
    keys = np.flatnonzero(touched.reshape(-1))
    rcc = SparseVoxelTensor.from_keys(cfg.grid, keys, dense.reshape(-1)[keys])
    return _final_filter(rcc, cfg, normalize)


def build_rpc(detections: Sequence[Detections], poses: Sequence[PoseSE3],
              cfg: PreprocessConfig, radar_config) -> SparseVoxelTensor:
    """Aligned, frustum-filtered CFAR detections as a {0, 1} occupancy tensor."""
    if len(detections) != len(poses):
        raise PreprocessError(f"Got {len(detections)} detection sets but {len(poses)} poses")
    if not detections:
        return SparseVoxelTensor.empty(cfg.grid)
    detections, poses = list(detections[-cfg.frames:]), list(poses[-cfg.frames:])
    current = poses[-1]
    chunks = []
    for i, (det, pose) in enumerate(zip(detections, poses)):
        points = spherical_bins_to_points(det.bins, radar_config)
        if i != len(poses) - 1:
            points = transform_points(points, pose, current)
        chunks.append(points[cfg.fov.contains(points)])
    points = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    return voxelize(points, np.ones(len(points)), cfg.grid, reduce="max")


def assemble_stage1_input(rcc: SparseVoxelTensor, rpc: SparseVoxelTensor) -> StageOneInput:
    """
    Concatenate normalized RCC power and RPC occupancy on the RCC support.

    Raises:
        PreprocessError: If the tensors live on different grids.
    """
    try:
        _, aligned = align_supports(rcc, rpc, 0.0)
    except GridError as e:
        raise PreprocessError(f"Cannot assemble Stage-I input: {e}") from e
    power = rcc.features[:, 0].copy()
    if len(power) and power.max() > 0:
        power = power / power.max()
    occupancy = (aligned.features[:, 0] > 0).astype(np.float64)
    return StageOneInput(rcc.with_features(np.column_stack([power, occupancy])))
