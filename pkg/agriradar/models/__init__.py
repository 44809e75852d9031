"""Reference models that make the pipeline trainable without a large backbone."""

from .losses import PipelineError, stage1_loss
from .stage1 import ReferencePredictor, Stage1TrainConfig, train_stage1
from .stage2 import ResidualDenoiser, Stage2ModelConfig, Stage2TrainConfig, train_denoiser

__all__ = [
    "PipelineError",
    "ReferencePredictor",
    "ResidualDenoiser",
    "Stage1TrainConfig",
    "Stage2ModelConfig",
    "Stage2TrainConfig",
    "stage1_loss",
    "train_denoiser",
    "train_stage1",
]
