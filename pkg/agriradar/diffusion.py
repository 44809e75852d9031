"""Continuous-time diffusion over (L, S) voxel feature matrices.

Noise levels are standard deviations ``sigma``. The denoiser is
preconditioned as ``D(x; sigma) = c_skip x + c_out F(c_in x; sigma, C)`` with

    c_skip = sd^2 / (sigma^2 + sd^2)      c_out = sigma sd / sqrt(sigma^2 + sd^2)
    c_in   = 1 / sqrt(sigma^2 + sd^2)     c_noise = ln(sigma) / 4

where ``sd`` is ``sigma_data``. Sampling integrates the probability-flow ODE
with Heun's method on a rho-spaced schedule. A sampler with ``n_steps`` levels
makes ``n_steps`` Euler evaluations plus ``n_steps - 1`` corrections (none on
the final step to sigma = 0), i.e. ``2 n - 1`` denoiser evaluations.

Consistency models reuse the network interface with the boundary-respecting
scalings ``c_skip = sd^2 / ((sigma - sigma_min)^2 + sd^2)`` and
``c_out = (sigma - sigma_min) sd / sqrt(sigma^2 + sd^2)``, so that
``f(x, sigma_min) = x`` exactly.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np
from tqdm import tqdm

from .errors import AgriRadarError, ConfigError
from .optim import Optimizer, OptimizerConfig

log = logging.getLogger(__name__)


class DiffusionError(AgriRadarError):
    """Raised on invalid noise levels, shapes or schedules."""
    pass


class DivergenceError(DiffusionError):
    """Raised when a training loss becomes NaN or infinite."""
    pass


@dataclass
class NoiseSchedule:
    """Noise range, data scale, step spacing and training noise distribution."""
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    rho: float = 7.0
    n_steps: int = 40
    p_mean: float = -1.2
    p_std: float = 1.2
    per_row_sigma: bool = False
    churn: float = 0.0
    s_noise: float = 1.0

    def validate(self) -> None:
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ConfigError("schedule needs 0 < sigma_min < sigma_max")
        if self.sigma_data <= 0 or self.rho <= 0:
            raise ConfigError("schedule.sigma_data and rho must be positive")
        if self.p_std < 0 or self.churn < 0 or self.s_noise < 0:
            raise ConfigError("schedule.p_std, churn and s_noise must be non-negative")


@dataclass
class DistillConfig:
    """Consistency distillation budget."""
    steps: int = 2000
    batch_size: int = 256
    ema_decay: float = 0.999
    log_every: int = 10
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(learning_rate=5e-3))

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("distill.steps, batch_size and log_every must be positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("distill.ema_decay must lie in [0, 1]")
        self.optimizer.validate()


# ---------------------------------------------------------------------------
# Noise and preconditioning
# ---------------------------------------------------------------------------

def sample_training_sigma(schedule: NoiseSchedule, rng: np.random.Generator, size=None):
    """Log-normal training noise level ``exp(p_mean + p_std z)``."""
    return np.exp(schedule.p_mean + schedule.p_std * rng.standard_normal(size))


def perturb(x: np.ndarray, sigma, rng: np.random.Generator) -> np.ndarray:
    """Return ``x + sigma * eps`` with standard normal ``eps``."""
    if np.any(np.asarray(sigma) < 0):
        raise DiffusionError("Noise level must be non-negative")
    return x + sigma * rng.standard_normal(np.shape(x))


def preconditioning(sigma, sigma_data: float):
    """
    Return ``(c_skip, c_out, c_in, c_noise)`` for scalar or array ``sigma``.

    Raises:
        DiffusionError: If any ``sigma`` is not positive.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise DiffusionError("Preconditioning needs sigma > 0")
    total = sigma ** 2 + sigma_data ** 2
    c_skip = sigma_data ** 2 / total
    c_out = sigma * sigma_data / np.sqrt(total)
    c_in = 1.0 / np.sqrt(total)
    c_noise = 0.25 * np.log(sigma)
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, sigma_data: float):
    """``(sigma^2 + sd^2) / (sigma sd)^2``, the inverse of ``c_out^2``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


def consistency_scalings(sigma, sigma_min: float, sigma_data: float):
    """Return ``(c_skip, c_out, c_in)`` of the boundary-respecting parameterization."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < sigma_min):
        raise DiffusionError("Consistency function is defined for sigma >= sigma_min")
    c_skip = sigma_data ** 2 / ((sigma - sigma_min) ** 2 + sigma_data ** 2)
    c_out = (sigma - sigma_min) * sigma_data / np.sqrt(sigma ** 2 + sigma_data ** 2)
    c_in = 1.0 / np.sqrt(sigma ** 2 + sigma_data ** 2)
    return c_skip, c_out, c_in


# ---------------------------------------------------------------------------
# Denoisers
# ---------------------------------------------------------------------------

class Denoiser(ABC):
    """Raw network ``F``; ``denoise`` adds the preconditioning around it."""

    sigma_data: float = 0.5

    @abstractmethod
    def evaluate(self, x_in: np.ndarray, sigma, condition: Optional[np.ndarray]) -> np.ndarray:
        """
        Evaluate ``F`` on the scaled input ``c_in * x_sigma``.

        Args:
            x_in: Scaled noisy state, shape (L, S).
            sigma: Scalar noise level or per-row levels of shape (L, 1).
            condition: Condition rows (L, C) or None.
        """


class TrainableNetwork(Protocol):
    """Denoiser that also exposes parameters and analytic gradients."""

    sigma_data: float
    params: dict[str, np.ndarray]

    def evaluate(self, x_in, sigma, condition): ...
    def forward(self, x_in, sigma, condition): ...
    def backward(self, cache, grad_out) -> dict[str, np.ndarray]: ...
    def copy(self): ...


def _check_shapes(x: np.ndarray, condition: Optional[np.ndarray]) -> None:
    if x.ndim != 2:
        raise DiffusionError(f"State must be a 2D (L, S) matrix, got shape {x.shape}")
    if condition is not None and len(condition) != len(x):
        raise DiffusionError(
            f"Condition has {len(condition)} rows but the state has {len(x)}"
        )


def denoise(denoiser: Denoiser, x_sigma: np.ndarray, sigma, condition=None) -> np.ndarray:
    """
    Preconditioned estimate of the clean sample.

    ``sigma == 0`` returns ``x_sigma`` unchanged.

    Raises:
        DiffusionError: On inconsistent shapes or negative noise levels.
    """
    x_sigma = np.asarray(x_sigma, dtype=np.float64)
    _check_shapes(x_sigma, condition)
    if np.all(np.asarray(sigma) == 0):
        return x_sigma.copy()
    c_skip, c_out, c_in, _ = preconditioning(sigma, denoiser.sigma_data)
    raw = np.asarray(denoiser.evaluate(c_in * x_sigma, sigma, condition))
    if raw.shape != x_sigma.shape:
        raise DiffusionError(f"Denoiser returned shape {raw.shape}, expected {x_sigma.shape}")
    return c_skip * x_sigma + c_out * raw


def edm_loss(denoiser: Denoiser, x: np.ndarray, sigma, condition, class_weights,
             noise: np.ndarray) -> float:
    """
    Weighted x-prediction loss ``mean(lambda(sigma) w_c (D(x + sigma eps) - x)^2)``.

    Args:
        noise: The standard normal ``eps`` used to perturb ``x``.

    Raises:
        DiffusionError: If any class weight is not positive.
    """
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (x.shape[1],) or np.any(weights <= 0):
        raise DiffusionError("Class weights must be positive, one per class column")
    x_hat = denoise(denoiser, x + sigma * noise, sigma, condition)
    lam = loss_weight(sigma, denoiser.sigma_data)
    return float(np.mean(lam * weights * (x_hat - x) ** 2))


class GaussianOracleDenoiser(Denoiser):
    """Exact posterior mean for data drawn from ``N(mu, s^2 I)``."""

    def __init__(self, mu: np.ndarray, s: float, sigma_data: float = 0.5):
        if s < 0:
            raise DiffusionError("Oracle standard deviation must be non-negative")
        self.mu = np.asarray(mu, dtype=np.float64)
        self.s = float(s)
        self.sigma_data = sigma_data

    def posterior_mean(self, x_sigma: np.ndarray, sigma) -> np.ndarray:
        s2 = self.s ** 2
        sigma2 = np.asarray(sigma, dtype=np.float64) ** 2
        return (s2 * x_sigma + sigma2 * self.mu) / (s2 + sigma2)

    def evaluate(self, x_in, sigma, condition=None):
        c_skip, c_out, c_in, _ = preconditioning(sigma, self.sigma_data)
        x_sigma = x_in / c_in
        return (self.posterior_mean(x_sigma, sigma) - c_skip * x_sigma) / c_out


def gaussian_oracle_denoiser(mu: np.ndarray, s: float, sigma_data: float = 0.5) -> GaussianOracleDenoiser:
    return GaussianOracleDenoiser(mu, s, sigma_data)


class EvaluationCounter(Denoiser):
    """Counts raw evaluations of the wrapped denoiser."""

    def __init__(self, inner):
        self.inner = inner
        self.count = 0

    @property
    def sigma_data(self) -> float:
        return self.inner.sigma_data

    def evaluate(self, x_in, sigma, condition=None):
        self.count += 1
        return self.inner.evaluate(x_in, sigma, condition)


# ---------------------------------------------------------------------------
# Heun sampler
# ---------------------------------------------------------------------------

def step_schedule(schedule: NoiseSchedule) -> np.ndarray:
    """
    Descending noise levels ``sigma_max .. sigma_min`` followed by 0.

    Raises:
        DiffusionError: If fewer than two steps are configured.
    """
    n = schedule.n_steps
    if n < 2:
        raise DiffusionError(f"Step schedule needs at least 2 steps, got {n}")
    inv_rho = 1.0 / schedule.rho
    i = np.arange(n, dtype=np.float64)
    levels = (schedule.sigma_max ** inv_rho
              + i / (n - 1) * (schedule.sigma_min ** inv_rho - schedule.sigma_max ** inv_rho)) ** schedule.rho
    levels[0], levels[-1] = schedule.sigma_max, schedule.sigma_min
    return np.append(levels, 0.0)


def heun_sample(denoiser: Denoiser, condition: Optional[np.ndarray], schedule: NoiseSchedule,
                rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """
    Integrate the probability-flow ODE from ``sigma_max`` to 0 with Heun steps.

    With ``schedule.churn > 0`` each step first raises the noise level by
    ``gamma = min(churn / n, sqrt(2) - 1)`` and injects matching fresh noise.
    """
    schedule.validate()
    levels = step_schedule(schedule)
    n = schedule.n_steps
    gamma = min(schedule.churn / n, math.sqrt(2.0) - 1.0) if schedule.churn > 0 else 0.0

    x_next = rng.standard_normal(shape) * levels[0]
    for i, (t_cur, t_next) in enumerate(zip(levels[:-1], levels[1:])):
        x_cur = x_next
        t_hat = t_cur * (1.0 + gamma)
        if gamma > 0:
            x_hat = x_cur + math.sqrt(t_hat ** 2 - t_cur ** 2) * schedule.s_noise * rng.standard_normal(shape)
        else:
            x_hat = x_cur

        d_cur = (x_hat - denoise(denoiser, x_hat, t_hat, condition)) / t_hat
        x_next = x_hat + (t_next - t_hat) * d_cur
        if i < n - 1:
            d_prime = (x_next - denoise(denoiser, x_next, t_next, condition)) / t_next
            x_next = x_hat + (t_next - t_hat) * (0.5 * d_cur + 0.5 * d_prime)
    return x_next


def heun_step(denoiser: Denoiser, x: np.ndarray, sigma_hi, sigma_lo, condition=None) -> np.ndarray:
    """Single deterministic Heun step from ``sigma_hi`` down to ``sigma_lo > 0``."""
    d_cur = (x - denoise(denoiser, x, sigma_hi, condition)) / sigma_hi
    x_euler = x + (sigma_lo - sigma_hi) * d_cur
    d_prime = (x_euler - denoise(denoiser, x_euler, sigma_lo, condition)) / sigma_lo
    return x + (sigma_lo - sigma_hi) * (0.5 * d_cur + 0.5 * d_prime)


# ---------------------------------------------------------------------------
# Consistency models
# ---------------------------------------------------------------------------

class ConsistencyModel:
    """Consistency function ``f(x, sigma)`` built on a raw network."""

    def __init__(self, network: TrainableNetwork, sigma_min: float,
                 sigma_data: Optional[float] = None):
        self.network = network
        self.sigma_min = float(sigma_min)
        self.sigma_data = float(network.sigma_data if sigma_data is None else sigma_data)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.network.params

    def __call__(self, x: np.ndarray, sigma, condition=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        _check_shapes(x, condition)
        c_skip, c_out, c_in = consistency_scalings(sigma, self.sigma_min, self.sigma_data)
        raw = np.asarray(self.network.evaluate(c_in * x, sigma, condition))
        if raw.shape != x.shape:
            raise DiffusionError(f"Network returned shape {raw.shape}, expected {x.shape}")
        return c_skip * x + c_out * raw

    def forward(self, x: np.ndarray, sigma, condition=None):
        c_skip, c_out, c_in = consistency_scalings(sigma, self.sigma_min, self.sigma_data)
        raw, cache = self.network.forward(c_in * x, sigma, condition)
        return c_skip * x + c_out * raw, (cache, c_out)

    def backward(self, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        net_cache, c_out = cache
        return self.network.backward(net_cache, grad_out * c_out)

    def copy(self) -> ConsistencyModel:
        return ConsistencyModel(self.network.copy(), self.sigma_min, self.sigma_data)

    def ema_update(self, source: ConsistencyModel, decay: float) -> None:
        """``theta <- decay * theta + (1 - decay) * theta_source``; decay 1 freezes."""
        if decay >= 1.0:
            return
        for name, p in self.params.items():
            p *= decay
            p += (1.0 - decay) * source.params[name]


DataStream = Callable[[np.random.Generator], tuple[np.ndarray, Optional[np.ndarray]]]


def consistency_distill(
    model: ConsistencyModel,
    teacher: Denoiser,
    data_stream: DataStream,
    schedule: NoiseSchedule,
    config: DistillConfig,
    rng: np.random.Generator,
    run_log=None,
    progress: bool = False,
) -> list[float]:
    """
    Distill ``teacher`` into the consistency ``model`` in place.

    Each step draws a batch ``(x, condition)`` from ``data_stream`` and a level
    index ``i`` per row, noises ``x`` to ``sigma_{i+1}``, takes one teacher
    Heun step down to ``sigma_i`` and regresses ``f(x_{i+1}, sigma_{i+1})``
    onto the EMA target ``f^-(x_i, sigma_i)`` with a mean squared error.

    Returns:
        Loss per step.

    Raises:
        DivergenceError: If the loss becomes NaN or infinite.
    """
    schedule.validate()
    config.validate()
    levels = step_schedule(schedule)[:-1][::-1]  # ascending sigma_min .. sigma_max
    target = model.copy()
    optimizer = Optimizer(config.optimizer)
    history: list[float] = []

    for step in tqdm(range(config.steps), desc="distill", disable=not progress):
        x, condition = data_stream(rng)
        rows = len(x)
        i = rng.integers(0, len(levels) - 1, size=rows)
        sigma_hi = levels[i + 1][:, None]
        sigma_lo = levels[i][:, None]
        x_hi = x + sigma_hi * rng.standard_normal(x.shape)
        x_lo = heun_step(teacher, x_hi, sigma_hi, sigma_lo, condition)
        y = target(x_lo, sigma_lo, condition)

        pred, cache = model.forward(x_hi, sigma_hi, condition)
        diff = pred - y
        loss = float(np.mean(diff ** 2))
        if not math.isfinite(loss):
            raise DivergenceError(f"Distillation loss diverged at step {step}")
        grads = model.backward(cache, 2.0 * diff / diff.size)
        optimizer.step(model.params, grads)
        target.ema_update(model, config.ema_decay)

        history.append(loss)
        if run_log is not None and step % config.log_every == 0:
            run_log.record(step=step, loss=loss)
    log.info("Distillation finished after %d steps, final loss %.6g", config.steps, history[-1])
    return history


def consistency_sample(f: ConsistencyModel, condition: Optional[np.ndarray], schedule: NoiseSchedule,
                       rng: np.random.Generator, shape: tuple[int, int], steps: int = 1) -> np.ndarray:
    """
    Generate with the consistency function.

    ``steps == 1`` is a single evaluation at ``sigma_max``. Larger values
    re-noise the estimate to ``steps - 1`` intermediate schedule levels and
    evaluate again at each.
    """
    if steps < 1:
        raise DiffusionError("Consistency sampling needs at least one step")
    schedule.validate()
    x = schedule.sigma_max * rng.standard_normal(shape)
    out = f(x, schedule.sigma_max, condition)
    if steps > 1:
        levels = step_schedule(schedule)[:-1]
        picks = np.rint(np.linspace(0, len(levels) - 1, steps + 1)[1:-1]).astype(int)
        for sigma in levels[picks]:
            noise = math.sqrt(max(sigma ** 2 - schedule.sigma_min ** 2, 0.0))
            out = f(out + noise * rng.standard_normal(shape), sigma, condition)
    return out
