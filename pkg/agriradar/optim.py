"""First-order optimizers over dictionaries of numpy parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class OptimizerConfig:
    """Optimizer choice and hyper-parameters."""
    name: str = "adam"
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # global norm; 0 disables

    def validate(self) -> None:
        if self.name not in ("adam", "sgd"):
            raise ConfigError(f"Unknown optimizer: {self.name}")
        if self.learning_rate <= 0:
            raise ConfigError("optimizer.learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("optimizer betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("optimizer.weight_decay and grad_clip must be non-negative")


class Optimizer:
    """
    Updates parameters in place.

    ``step`` takes the parameter and gradient dictionaries (same keys and
    shapes); iteration over keys follows the parameter dictionary order.
    """

    def __init__(self, config: OptimizerConfig):
        config.validate()
        self.config = config
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        self._t += 1
        scale = 1.0
        if cfg.grad_clip > 0:
            norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
        for name, p in params.items():
            g = grads[name] * scale
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            if cfg.name == "sgd":
                p -= cfg.learning_rate * g
                continue
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1 ** self._t)
            v_hat = v / (1.0 - cfg.beta2 ** self._t)
            p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
