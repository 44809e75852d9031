"""Per-row trainable network for Stage II.

For one row the network sees the scaled state ``x_in``, the condition row and
a noise embedding ``e(c_noise) = [1, c, cos(2^k c), sin(2^k c)]``,
``c = ln(sigma) / 4``. The categorical condition column is one-hot encoded.
With ``z = [x_in, cond]`` the feature vector is ``phi = [e, vec(e z^T)]`` so
every input enters with a noise-dependent gain. The output is

    F = phi V + tanh(phi W1 + b1) W2 + b2

with a zero-initialized output layer (``F = 0`` at init). ``hidden = 0``
drops the tanh branch and leaves a linear model in ``phi``.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from tqdm import tqdm

from ..diffusion import (
    Denoiser,
    DiffusionError,
    DivergenceError,
    NoiseSchedule,
    loss_weight,
    preconditioning,
    sample_training_sigma,
)
from ..errors import ConfigError
from ..optim import Optimizer, OptimizerConfig

log = logging.getLogger(__name__)


@dataclass
class Stage2ModelConfig:
    """Network shape: hidden width, noise frequencies, categorical condition width."""
    hidden: int = 32
    frequencies: int = 4
    condition_classes: int = 5
    init_scale: float = 1.0

    def validate(self) -> None:
        if self.hidden < 0 or self.frequencies < 0 or self.condition_classes < 0:
            raise ConfigError("stage2 hidden, frequencies and condition_classes must be >= 0")
        if self.init_scale < 0:
            raise ConfigError("stage2.init_scale must be non-negative")


@dataclass
class Stage2TrainConfig:
    """Denoiser training budget; ``batch_size`` counts samples per step."""
    steps: int = 500
    batch_size: int = 8
    class_weighting: bool = True
    log_every: int = 10
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(learning_rate=1e-2))

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("stage2 steps, batch_size and log_every must be positive")
        self.optimizer.validate()


class ResidualDenoiser(Denoiser):
    """Trainable raw network ``F`` with analytic gradients."""

    kind = "stage2"

    def __init__(self, channels: int, condition_channels: int = 0,
                 config: Optional[Stage2ModelConfig] = None, sigma_data: float = 0.5,
                 seed: int = 0):
        config = config or Stage2ModelConfig()
        config.validate()
        if condition_channels not in (0, 2):
            raise DiffusionError("Condition rows must have 0 or 2 columns")
        self.channels = channels
        self.condition_channels = condition_channels
        self.config = config
        self.sigma_data = sigma_data

        cond_width = 1 + config.condition_classes if condition_channels else 0
        embed = 2 + 2 * config.frequencies
        n_phi = embed + embed * (channels + cond_width)
        rng = np.random.default_rng(seed)
        h = config.hidden
        self.params: dict[str, np.ndarray] = {
            "w1": rng.standard_normal((n_phi, h)) * (config.init_scale / math.sqrt(n_phi)),
            "b1": np.zeros(h),
            "w2": np.zeros((h, channels)),
            "v": np.zeros((n_phi, channels)),
            "b2": np.zeros(channels),
        }

    def hyperparameters(self) -> dict:
        return {
            "channels": self.channels,
            "condition_channels": self.condition_channels,
            "sigma_data": self.sigma_data,
            "hidden": self.config.hidden,
            "frequencies": self.config.frequencies,
            "condition_classes": self.config.condition_classes,
            "init_scale": self.config.init_scale,
        }

    def copy(self) -> ResidualDenoiser:
        return copy.deepcopy(self)

    # -- features -------------------------------------------------------------

    def _embedding(self, sigma, rows: int) -> np.ndarray:
        c = 0.25 * np.log(np.broadcast_to(np.asarray(sigma, dtype=np.float64), (rows, 1)))
        parts = [np.ones_like(c), c]
        for k in range(self.config.frequencies):
            parts.append(np.cos(2.0 ** k * c))
            parts.append(np.sin(2.0 ** k * c))
        return np.concatenate(parts, axis=1)

    def _inputs(self, x_in: np.ndarray, condition: Optional[np.ndarray]) -> np.ndarray:
        if x_in.ndim != 2 or x_in.shape[1] != self.channels:
            raise DiffusionError(f"Expected (L, {self.channels}) input, got {x_in.shape}")
        if not self.condition_channels:
            return x_in
        if condition is None or condition.shape != (len(x_in), 2):
            raise DiffusionError("This network needs a (L, 2) condition")
        codes = np.clip(np.rint(condition[:, 1]).astype(np.int64), 0, self.config.condition_classes - 1)
        onehot = np.zeros((len(x_in), self.config.condition_classes))
        onehot[np.arange(len(x_in)), codes] = 1.0
        return np.concatenate([x_in, condition[:, :1], onehot], axis=1)

    def features(self, x_in: np.ndarray, sigma, condition: Optional[np.ndarray]) -> np.ndarray:
        z = self._inputs(np.asarray(x_in, dtype=np.float64), condition)
        e = self._embedding(sigma, len(z))
        outer = (e[:, :, None] * z[:, None, :]).reshape(len(z), -1)
        return np.concatenate([e, outer], axis=1)

    # -- evaluation and gradients ----------------------------------------------

    def forward(self, x_in: np.ndarray, sigma, condition: Optional[np.ndarray] = None):
        p = self.params
        phi = self.features(x_in, sigma, condition)
        out = phi @ p["v"] + p["b2"]
        hidden = None
        if self.config.hidden:
            hidden = np.tanh(phi @ p["w1"] + p["b1"])
            out = out + hidden @ p["w2"]
        return out, (phi, hidden)

    def evaluate(self, x_in, sigma, condition=None):
        return self.forward(x_in, sigma, condition)[0]

    def backward(self, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        phi, hidden = cache
        p = self.params
        grads = {
            "v": phi.T @ grad_out,
            "b2": grad_out.sum(axis=0),
            "w1": np.zeros_like(p["w1"]),
            "b1": np.zeros_like(p["b1"]),
            "w2": np.zeros_like(p["w2"]),
        }
        if hidden is not None:
            grads["w2"] = hidden.T @ grad_out
            d_act = (grad_out @ p["w2"].T) * (1.0 - hidden ** 2)
            grads["w1"] = phi.T @ d_act
            grads["b1"] = d_act.sum(axis=0)
        return grads


def edm_loss_and_grad(model: ResidualDenoiser, x: np.ndarray, sigma, condition,
                      class_weights, noise: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Value of ``diffusion.edm_loss`` and its gradient with respect to the parameters."""
    weights = np.asarray(class_weights, dtype=np.float64)
    x_sigma = x + sigma * noise
    c_skip, c_out, c_in, _ = preconditioning(sigma, model.sigma_data)
    raw, cache = model.forward(c_in * x_sigma, sigma, condition)
    residual = c_skip * x_sigma + c_out * raw - x
    lam = loss_weight(sigma, model.sigma_data)
    loss = float(np.mean(lam * weights * residual ** 2))
    grad_raw = 2.0 * lam * weights * residual * c_out / residual.size
    return loss, model.backward(cache, grad_raw)


def train_denoiser(
    model: ResidualDenoiser,
    samples: Sequence[tuple[np.ndarray, Optional[np.ndarray]]],
    schedule: NoiseSchedule,
    config: Stage2TrainConfig,
    rng: np.random.Generator,
    class_weights: Optional[np.ndarray] = None,
    run_log=None,
    progress: bool = False,
) -> list[float]:
    """
    Train ``model`` in place on the weighted x-prediction loss.

    Each step draws ``config.batch_size`` samples with replacement. One noise
    level is drawn per sample and broadcast over its rows, or one per row when
    ``schedule.per_row_sigma`` is set.

    Returns:
        Loss per step.

    Raises:
        DivergenceError: If the loss becomes NaN or infinite.
    """
    config.validate()
    schedule.validate()
    samples = [(x, c) for x, c in samples if len(x)]
    if not samples:
        raise DiffusionError("No non-empty training samples")
    weights = np.ones(model.channels) if class_weights is None else np.asarray(class_weights, float)
    optimizer = Optimizer(config.optimizer)
    history: list[float] = []

    for step in tqdm(range(config.steps), desc="stage2", disable=not progress):
        picks = rng.integers(0, len(samples), size=config.batch_size)
        xs, conds, sigmas = [], [], []
        for i in picks:
            x, cond = samples[i]
            xs.append(x)
            conds.append(cond)
            if schedule.per_row_sigma:
                sigmas.append(sample_training_sigma(schedule, rng, size=(len(x), 1)))
            else:
                sigmas.append(np.full((len(x), 1), sample_training_sigma(schedule, rng)))
        x = np.concatenate(xs)
        cond = None if conds[0] is None else np.concatenate(conds)
        sigma = np.concatenate(sigmas)
        noise = rng.standard_normal(x.shape)

        loss, grads = edm_loss_and_grad(model, x, sigma, cond, weights, noise)
        if not math.isfinite(loss):
            raise DivergenceError(f"Denoiser loss diverged at step {step}")
        optimizer.step(model.params, grads)
        history.append(loss)
        if run_log is not None and step % config.log_every == 0:
            run_log.record(step=step, loss=loss)
    log.info("Stage-II training: loss %.4f -> %.4f over %d steps",
             history[0], history[-1], config.steps)
    return history
