"""Per-voxel reference predictor for Stage I.

Each support voxel is described by local features computed inside the sparse
support: its own RCC power and RPC bit, the power sum and RPC count of its
26-neighborhood, and the number of occupied neighbors. Features are
standardized with training statistics, then a logistic head predicts the
structural confidence and a softmax head the class distribution.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from tqdm import tqdm

from ..diffusion import DivergenceError
from ..errors import ConfigError
from ..optim import Optimizer, OptimizerConfig
from ..preprocess import StageOneInput
from ..scene_sim import NUM_CLASSES
from ..supervision import StageOneTarget, inverse_frequency_weights
from .losses import stage1_logit_grads, stage1_terms

log = logging.getLogger(__name__)

FEATURE_NAMES = ("power", "rpc", "neighbor_power", "neighbor_rpc", "neighbor_count")
_OFFSETS = np.array([o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)])


@dataclass
class Stage1TrainConfig:
    """Minibatch SGD (Adam) over shuffled rows; ``batch_size`` 0 trains full batch."""
    epochs: int = 200
    batch_size: int = 256
    class_weighting: bool = True
    log_every: int = 1
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(learning_rate=0.05))

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 0 or self.log_every < 1:
            raise ConfigError("stage1 epochs and log_every must be positive, batch_size >= 0")
        self.optimizer.validate()


def local_features(sample: StageOneInput) -> np.ndarray:
    """Raw (unstandardized) feature matrix of shape (M, 5)."""
    spec = sample.spec
    keys = sample.tensor.keys
    power, occ = sample.power, sample.occupancy
    n = len(keys)
    nb_power = np.zeros(n)
    nb_occ = np.zeros(n)
    nb_count = np.zeros(n)
    if n:
        dims = np.asarray(spec.dims)
        for offset in _OFFSETS:
            neighbor = sample.indices + offset
            inside = np.all((neighbor >= 0) & (neighbor < dims), axis=1)
            nkeys = spec.ravel(np.where(inside[:, None], neighbor, 0))
            pos = np.minimum(np.searchsorted(keys, nkeys), n - 1)
            hit = inside & (keys[pos] == nkeys)
            nb_power += np.where(hit, power[pos], 0.0)
            nb_occ += np.where(hit, occ[pos], 0.0)
            nb_count += hit
    return np.column_stack([power, occ, nb_power, nb_occ, nb_count])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class ReferencePredictor:
    """Logistic structural head and softmax semantic head over local features."""

    kind = "stage1"

    def __init__(self, mean: Optional[np.ndarray] = None, scale: Optional[np.ndarray] = None,
                 classes: int = NUM_CLASSES):
        f = len(FEATURE_NAMES)
        self.classes = classes
        self.mean = np.zeros(f) if mean is None else np.asarray(mean, dtype=np.float64)
        self.scale = np.ones(f) if scale is None else np.asarray(scale, dtype=np.float64)
        self.params: dict[str, np.ndarray] = {
            "w_st": np.zeros((f, 1)),
            "b_st": np.zeros(1),
            "w_se": np.zeros((f, classes)),
            "b_se": np.zeros(classes),
        }

    def hyperparameters(self) -> dict:
        return {"classes": self.classes, "mean": self.mean.tolist(), "scale": self.scale.tolist()}

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale

    def fit_standardization(self, features: np.ndarray) -> None:
        self.mean = features.mean(axis=0)
        std = features.std(axis=0)
        self.scale = np.where(std > 0, std, 1.0)

    def predict_standardized(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        p_st = _sigmoid(z @ p["w_st"] + p["b_st"])
        p_se = _softmax(z @ p["w_se"] + p["b_se"])
        return p_st, p_se

    def evaluate(self, sample: StageOneInput) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(y_st_hat (M, 1), y_se_hat (M, S))`` aligned to the input support."""
        return self.predict_standardized(self.standardize(local_features(sample)))


def _batches(n: int, size: int, rng: np.random.Generator):
    if size <= 0 or size >= n:
        yield np.arange(n)
        return
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def train_stage1(
    pairs: Sequence[tuple[StageOneInput, StageOneTarget]],
    config: Stage1TrainConfig,
    seed: int,
    class_weights: Optional[np.ndarray] = None,
    run_log=None,
    progress: bool = False,
) -> tuple[ReferencePredictor, list[float]]:
    """
    Fit a reference predictor on labeled Stage-I samples.

    Args:
        pairs: (input, target) pairs; rows of all pairs are pooled.
        config: Training schedule.
        seed: Seed for minibatch shuffling.
        class_weights: Semantic class weights; inverse class frequency of the
            targets when omitted and ``config.class_weighting`` is set, else 1.
        run_log: Optional ``RunLogger`` receiving one record per logged epoch.
        progress: Show a progress bar.

    Returns:
        Tuple of (trained predictor, loss per epoch measured before each update pass).

    Raises:
        DivergenceError: If the loss becomes NaN.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    features = np.concatenate([local_features(x) for x, _ in pairs]) if pairs else np.zeros((0, 5))
    y_st = np.concatenate([t.y_st for _, t in pairs]) if pairs else np.zeros((0, 1))
    y_se = np.concatenate([t.y_se for _, t in pairs]) if pairs else np.zeros((0, NUM_CLASSES))

    model = ReferencePredictor()
    if len(features):
        model.fit_standardization(features)
    z_all = model.standardize(features)
    if class_weights is None:
        class_weights = (inverse_frequency_weights(y_se.sum(axis=0))
                         if config.class_weighting else np.ones(NUM_CLASSES))
    class_weights = np.asarray(class_weights, dtype=np.float64)

    optimizer = Optimizer(config.optimizer)
    history: list[float] = []
    for epoch in tqdm(range(config.epochs), desc="stage1", disable=not progress):
        p_st, p_se = model.predict_standardized(z_all)
        bce, wce = stage1_terms(p_st, p_se, y_st, y_se, class_weights)
        loss = bce + wce
        if not math.isfinite(loss):
            raise DivergenceError(f"Stage-I loss diverged at epoch {epoch}")
        history.append(loss)
        if run_log is not None and epoch % config.log_every == 0:
            run_log.record(step=epoch, loss=loss, bce=bce, wce=wce)

        for rows in _batches(len(z_all), config.batch_size, rng):
            z = z_all[rows]
            b_st, b_se = model.predict_standardized(z)
            d_st, d_se = stage1_logit_grads(b_st, b_se, y_st[rows], y_se[rows], class_weights)
            grads = {
                "w_st": z.T @ d_st,
                "b_st": d_st.sum(axis=0),
                "w_se": z.T @ d_se,
                "b_se": d_se.sum(axis=0),
            }
            optimizer.step(model.params, grads)

    log.info("Stage-I training: loss %.4f -> %.4f over %d epochs",
             history[0], history[-1], config.epochs)
    return model, history
