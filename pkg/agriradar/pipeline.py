"""Two-stage semantic reconstruction.

Stage I predicts a structural confidence and a class distribution for every
RCC support voxel. Voxels whose most likely class is free are dropped and the
rest form the condition matrix ``(confidence, class code)``. Stage II samples
one-hot class rows over the condition support with a diffusion or
consistency sampler; free rows are dropped again and the survivors become
the predicted point cloud.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence, Union

import numpy as np

from .diffusion import (
    ConsistencyModel,
    Denoiser,
    NoiseSchedule,
    consistency_sample,
    consistency_scalings,
    heun_sample,
    preconditioning,
)
from .errors import ConfigError
from .models import (
    PipelineError,
    ReferencePredictor,
    ResidualDenoiser,
    Stage1TrainConfig,
    Stage2ModelConfig,
    stage1_loss,
    train_stage1,
)
from .preprocess import StageOneInput
from .scene_sim import NUM_CLASSES, ClassLabel, SemanticPointCloud
from .sparse_grid import GridSpec, SparseVoxelTensor, to_point_cloud
from .supervision import StageOneTarget, StageTwoSample

log = logging.getLogger(__name__)

__all__ = [
    "ConditionMatrix",
    "PipelineConfig",
    "PipelineError",
    "StageOnePredictor",
    "apply_modality",
    "build_condition",
    "cheat_oracle_consistency",
    "cheat_oracle_denoiser",
    "raw_condition",
    "reference_stage1_predictor",
    "rpc_baseline_cloud",
    "stage1_loss",
    "stage2_generate",
    "trainable_stage2_denoiser",
]

MODALITIES = ("both", "rcc_only", "rpc_only")
SAMPLERS = ("heun", "consistency")


@dataclass
class PipelineConfig:
    """Inference switches, including the modality and no-Stage-I ablations."""
    input_modality: str = "both"
    bypass_stage1: bool = False
    sampler: str = "consistency"
    consistency_steps: int = 1

    def validate(self) -> None:
        if self.input_modality not in MODALITIES:
            raise ConfigError(f"pipeline.input_modality must be one of {MODALITIES}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"pipeline.sampler must be one of {SAMPLERS}")
        if self.consistency_steps < 1:
            raise ConfigError("pipeline.consistency_steps must be at least 1")


@dataclass(frozen=True, eq=False)
class ConditionMatrix:
    """
    Condition rows over a canonical support.

    ``kind == "mask"`` rows hold (structural confidence, non-free class code).
    ``kind == "raw"`` rows hold the Stage-I input itself (power, RPC bit).
    """
    spec: GridSpec
    indices: np.ndarray
    features: np.ndarray
    kind: str = "mask"

    def __post_init__(self) -> None:
        if self.features.shape != (len(self.indices), 2):
            raise PipelineError("Condition features must have shape (L, 2)")
        if self.kind == "mask" and (self.features[:, 1] == int(ClassLabel.FREE)).any():
            raise PipelineError("Condition rows cannot carry the free class")

    def __len__(self) -> int:
        return len(self.indices)


class StageOnePredictor(Protocol):
    def evaluate(self, sample: StageOneInput) -> tuple[np.ndarray, np.ndarray]: ...


# ---------------------------------------------------------------------------
# Stage I
# ---------------------------------------------------------------------------

def apply_modality(sample: StageOneInput, modality: str) -> StageOneInput:
    """Zero the RPC column (``rcc_only``) or the power column (``rpc_only``)."""
    if modality == "both":
        return sample
    if modality not in MODALITIES:
        raise ConfigError(f"Unknown input modality: {modality}")
    features = sample.tensor.features.copy()
    features[:, 1 if modality == "rcc_only" else 0] = 0.0
    return StageOneInput(sample.tensor.with_features(features))


def build_condition(y_st_hat: np.ndarray, y_se_hat: np.ndarray,
                    support: Union[SparseVoxelTensor, StageOneInput]) -> ConditionMatrix:
    """
    Keep rows whose arg-max class is not free.

    Arg-max ties resolve to the smallest class code.
    """
    tensor = support.tensor if isinstance(support, StageOneInput) else support
    y_st_hat = np.asarray(y_st_hat, dtype=np.float64).reshape(-1)
    y_se_hat = np.asarray(y_se_hat, dtype=np.float64)
    if len(y_st_hat) != len(tensor) or y_se_hat.shape != (len(tensor), NUM_CLASSES):
        raise PipelineError("Stage-I outputs are not aligned with the support")
    codes = y_se_hat.argmax(axis=1)
    keep = codes != int(ClassLabel.FREE)
    features = np.column_stack([y_st_hat[keep], codes[keep].astype(np.float64)])
    return ConditionMatrix(tensor.spec, tensor.indices[keep], features)


def raw_condition(sample: StageOneInput) -> ConditionMatrix:
    """The Stage-I input used directly as the condition over the full support."""
    return ConditionMatrix(sample.spec, sample.indices, sample.tensor.features.copy(), kind="raw")


def reference_stage1_predictor(
    pairs: Sequence[tuple[StageOneInput, StageOneTarget]],
    config: Stage1TrainConfig,
    seed: int = 0,
    **kwargs,
) -> ReferencePredictor:
    """Train the per-voxel reference predictor; extra keyword arguments go to ``train_stage1``."""
    model, _ = train_stage1(pairs, config, seed, **kwargs)
    return model


# ---------------------------------------------------------------------------
# Stage II
# ---------------------------------------------------------------------------

def trainable_stage2_denoiser(config: Stage2ModelConfig, sigma_data: float = 0.5,
                              seed: int = 0, conditioned: bool = True) -> ResidualDenoiser:
    """A fresh per-row network over ``NUM_CLASSES`` columns."""
    return ResidualDenoiser(NUM_CLASSES, 2 if conditioned else 0, config, sigma_data, seed)


class CheatOracleDenoiser(Denoiser):
    """Returns the ground-truth rows ``x`` from every noisy input."""

    def __init__(self, target: np.ndarray, sigma_data: float = 0.5):
        self.target = np.asarray(target, dtype=np.float64)
        self.sigma_data = sigma_data

    def evaluate(self, x_in, sigma, condition=None):
        c_skip, c_out, c_in, _ = preconditioning(sigma, self.sigma_data)
        x_sigma = x_in / c_in
        return (self.target - c_skip * x_sigma) / c_out


def cheat_oracle_denoiser(sample: StageTwoSample, sigma_data: float = 0.5) -> CheatOracleDenoiser:
    return CheatOracleDenoiser(sample.x, sigma_data)


class CheatOracleNetwork:
    """Raw network whose consistency function returns the ground-truth rows for sigma > sigma_min."""

    def __init__(self, target: np.ndarray, sigma_min: float, sigma_data: float = 0.5):
        self.target = np.asarray(target, dtype=np.float64)
        self.sigma_min = sigma_min
        self.sigma_data = sigma_data

    def evaluate(self, x_in, sigma, condition=None):
        c_skip, c_out, c_in = consistency_scalings(sigma, self.sigma_min, self.sigma_data)
        x = x_in / c_in
        safe = np.where(c_out > 0, c_out, 1.0)
        return np.where(c_out > 0, (self.target - c_skip * x) / safe, 0.0)


def cheat_oracle_consistency(sample: StageTwoSample, sigma_min: float,
                             sigma_data: float = 0.5) -> ConsistencyModel:
    return ConsistencyModel(CheatOracleNetwork(sample.x, sigma_min, sigma_data), sigma_min, sigma_data)


def stage2_generate(
    denoiser: Union[Denoiser, ConsistencyModel],
    condition: ConditionMatrix,
    schedule: NoiseSchedule,
    mode: str,
    rng: np.random.Generator,
    steps: int = 1,
) -> SemanticPointCloud:
    """
    Sample class rows over the condition support and convert them to points.

    Args:
        denoiser: A ``Denoiser`` for ``heun`` or a ``ConsistencyModel`` for
            ``consistency``.
        condition: Condition rows; an empty condition yields an empty cloud.
        schedule: Noise schedule.
        mode: ``heun`` or ``consistency``.
        rng: Source of the initial noise.
        steps: Consistency evaluations (1 is the one-step sampler).
    """
    if mode not in SAMPLERS:
        raise PipelineError(f"Unknown sampler: {mode}")
    if len(condition) == 0:
        return SemanticPointCloud.empty()
    shape = (len(condition), NUM_CLASSES)
    if mode == "heun":
        x = heun_sample(denoiser, condition.features, schedule, rng, shape)
    else:
        if not isinstance(denoiser, ConsistencyModel):
            raise PipelineError("Consistency sampling needs a consistency model")
        x = consistency_sample(denoiser, condition.features, schedule, rng, shape, steps)
    codes = x.argmax(axis=1).astype(np.float64)
    tensor = SparseVoxelTensor(condition.spec, condition.indices, codes.reshape(-1, 1))
    cloud = to_point_cloud(tensor)
    log.debug("Stage II kept %d of %d condition rows", len(cloud), len(condition))
    return cloud


def rpc_baseline_cloud(rpc: SparseVoxelTensor) -> SemanticPointCloud:
    """CFAR baseline: every RPC voxel center labeled ground."""
    occupied = rpc.take(rpc.features[:, 0] > 0)
    labels = np.full(len(occupied), int(ClassLabel.GROUND), dtype=np.int64)
    return SemanticPointCloud(rpc.spec.centers(occupied.indices), labels)
