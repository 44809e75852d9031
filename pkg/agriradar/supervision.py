"""Training targets built from ground-truth LiDAR clouds.

Stage I learns a blurred occupancy confidence and a dilated class grid over the
RCC support. Stage II learns one-hot class rows over the condition support,
with support voxels absent from the ground truth labeled free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AgriRadarError, ConfigError
from .scene_sim import NUM_CLASSES, ClassLabel, SemanticPointCloud
from .sparse_grid import GridSpec, SparseVoxelTensor, align_supports, voxelize

log = logging.getLogger(__name__)


class SupervisionError(AgriRadarError):
    """Raised when targets cannot be built or aligned."""
    pass


@dataclass
class KernelConfig:
    """Cubic kernel of odd side ``size`` voxels; Gaussian ``sigma`` in voxels."""
    size: int = 3
    sigma: float = 1.0

    def validate(self) -> None:
        if self.size < 1 or self.size % 2 == 0:
            raise SupervisionError(f"Kernel size must be a positive odd number, got {self.size}")
        if self.sigma <= 0:
            raise ConfigError("supervision.sigma must be positive")


@dataclass(frozen=True, eq=False)
class StageOneTarget:
    """Per-support-row targets: y_st (M, 1) in [0, 1] and one-hot y_se (M, S)."""
    spec: GridSpec
    indices: np.ndarray
    y_st: np.ndarray
    y_se: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.indices)
        if self.y_st.shape != (n, 1) or self.y_se.shape != (n, NUM_CLASSES):
            raise SupervisionError("Stage-I target shapes do not match the support")
        if n and (self.y_st.min() < 0.0 or self.y_st.max() > 1.0):
            raise SupervisionError("Structural target must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class StageTwoSample:
    """One-hot class rows ``x`` (L, S) over the condition support."""
    spec: GridSpec
    indices: np.ndarray
    x: np.ndarray
    coverage: float = 1.0

    def __len__(self) -> int:
        return len(self.indices)


def one_hot(codes: np.ndarray, classes: int = NUM_CLASSES) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    out = np.zeros((len(codes), classes))
    out[np.arange(len(codes)), codes] = 1.0
    return out


def voxelize_labels(cloud: SemanticPointCloud, spec: GridSpec) -> SparseVoxelTensor:
    """Majority class per voxel of a labeled cloud."""
    return voxelize(cloud.points, cloud.labels.astype(np.float64), spec, reduce="majority")


def gaussian_kernel(kernel: KernelConfig) -> np.ndarray:
    """Normalized ``size**3`` Gaussian weights."""
    kernel.validate()
    h = kernel.size // 2
    offsets = np.arange(-h, h + 1, dtype=np.float64)
    dx, dy, dz = np.meshgrid(offsets, offsets, offsets, indexing="ij")
    weights = np.exp(-(dx ** 2 + dy ** 2 + dz ** 2) / (2.0 * kernel.sigma ** 2))
    return weights / weights.sum()


def build_structural_target(lidar: SemanticPointCloud, spec: GridSpec,
                            kernel: KernelConfig) -> np.ndarray:
    """
    Blurred occupancy confidence on the dense grid.

    Occupancy is convolved with the normalized Gaussian kernel, divided by the
    kernel's center weight and clipped to [0, 1]. Occupied voxels are exactly 1.

    Raises:
        SupervisionError: If the kernel size is even.
    """
    weights = gaussian_kernel(kernel)
    occupied = np.zeros(spec.dims, dtype=bool)
    idx, valid = spec.point_to_voxel(lidar.points)
    occupied[tuple(idx[valid].T)] = True
    if not occupied.any():
        return np.zeros(spec.dims)
    center = weights[(kernel.size // 2,) * 3]
    blurred = ndimage.convolve(occupied.astype(np.float64), weights, mode="constant", cval=0.0)
    target = np.clip(blurred / center, 0.0, 1.0)
    target[occupied] = 1.0
    return target


def build_semantic_target(lidar: SemanticPointCloud, spec: GridSpec,
                          kernel: KernelConfig) -> np.ndarray:
    """
    Dilated class codes on the dense grid.

    Greyscale dilation with a ``size**3`` box keeps the largest code in each
    neighborhood; codes are ordered so that larger means rarer
    (wire > pole > tree > ground > free).

    Raises:
        SupervisionError: If the kernel size is even.
    """
    kernel.validate()
    codes = np.zeros(spec.dims, dtype=np.int8)
    labels = voxelize_labels(lidar, spec)
    codes[tuple(labels.indices.T)] = labels.features[:, 0].astype(np.int8)
    if kernel.size == 1 or not len(labels):
        return codes
    return ndimage.grey_dilation(codes, size=(kernel.size,) * 3, mode="constant", cval=0)


def assemble_stage1_target(structural: np.ndarray, semantic: np.ndarray,
                           support: SparseVoxelTensor) -> StageOneTarget:
    """
    Sample the dense targets at the support rows.

    Raises:
        SupervisionError: If the grids do not match the support's grid dims.
    """
    dims = tuple(support.spec.dims)
    if structural.shape != dims or semantic.shape != dims:
        raise SupervisionError(
            f"Target grids {structural.shape}/{semantic.shape} do not match grid dims {dims}"
        )
    where = tuple(support.indices.T)
    y_st = structural[where].astype(np.float64).reshape(-1, 1)
    y_se = one_hot(semantic[where])
    return StageOneTarget(support.spec, support.indices, y_st, y_se)


def expand_stage2_sample(gt_labels: SparseVoxelTensor, support: SparseVoxelTensor) -> StageTwoSample:
    """
    One-hot ground truth on the condition support.

    Support voxels missing from the ground truth become free. Ground-truth
    voxels outside the support are dropped and reported through
    ``coverage = |GT within support| / |GT|`` (1.0 for an empty GT).
    """
    if gt_labels.spec != support.spec:
        raise SupervisionError("Ground truth and support live on different grids")
    occupied = gt_labels.take(gt_labels.features[:, 0] != int(ClassLabel.FREE))
    _, aligned = align_supports(support, occupied, float(ClassLabel.FREE))
    codes = aligned.features[:, 0].astype(np.int64)
    covered = int(np.isin(occupied.keys, support.keys).sum())
    coverage = covered / len(occupied) if len(occupied) else 1.0
    if coverage < 1.0:
        log.debug("Stage-II sample covers %d of %d GT voxels", covered, len(occupied))
    return StageTwoSample(support.spec, support.indices, one_hot(codes), coverage)


def inverse_frequency_weights(counts: np.ndarray, clip: tuple[float, float] = (0.1, 10.0)) -> np.ndarray:
    """
    Class weights from class counts.

    Inverse frequency (absent classes get the upper clip), clipped, then
    renormalized to mean 1.
    """
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return np.ones_like(counts)
    freq = counts / total
    with np.errstate(divide="ignore"):
        raw = np.where(freq > 0, 1.0 / (len(counts) * freq), clip[1])
    weights = np.clip(raw, *clip)
    return weights / weights.mean()
