"""Stage-I loss: binary cross-entropy on structure plus weighted cross-entropy on classes."""

from __future__ import annotations

import numpy as np

from ..errors import AgriRadarError

PROB_EPS = 1e-7


class PipelineError(AgriRadarError):
    """Raised when pipeline stages receive inconsistent inputs."""
    pass


def _check(y_st_hat, y_se_hat, y_st, y_se, class_weights) -> None:
    if y_st_hat.shape != y_st.shape or y_se_hat.shape != y_se.shape:
        raise PipelineError(
            f"Prediction shapes {y_st_hat.shape}/{y_se_hat.shape} do not match "
            f"targets {y_st.shape}/{y_se.shape}"
        )
    if np.shape(class_weights) != (y_se.shape[1],):
        raise PipelineError("Need one class weight per semantic column")


def stage1_terms(y_st_hat: np.ndarray, y_se_hat: np.ndarray, y_st: np.ndarray,
                 y_se: np.ndarray, class_weights) -> tuple[float, float]:
    """Return ``(bce, wce)``, each averaged over rows, probabilities clamped at 1e-7."""
    y_st_hat = np.asarray(y_st_hat, dtype=np.float64)
    y_se_hat = np.asarray(y_se_hat, dtype=np.float64)
    weights = np.asarray(class_weights, dtype=np.float64)
    _check(y_st_hat, y_se_hat, y_st, y_se, weights)
    if len(y_st) == 0:
        return 0.0, 0.0
    p = np.clip(y_st_hat, PROB_EPS, 1.0 - PROB_EPS)
    bce = -np.mean(y_st * np.log(p) + (1.0 - y_st) * np.log(1.0 - p))
    q = np.clip(y_se_hat, PROB_EPS, 1.0)
    wce = -np.mean(np.sum(weights * y_se * np.log(q), axis=1))
    return float(bce), float(wce)


def stage1_loss(y_st_hat: np.ndarray, y_se_hat: np.ndarray, target, class_weights) -> float:
    """
    Stage-I objective ``BCE(y_st_hat, y_st) + WCE(y_se_hat, y_se)``.

    Args:
        y_st_hat: Structural probabilities (M, 1).
        y_se_hat: Row-stochastic class probabilities (M, S).
        target: A ``StageOneTarget`` aligned to the same support.
        class_weights: Positive weight per class (S,).
    """
    bce, wce = stage1_terms(y_st_hat, y_se_hat, target.y_st, target.y_se, class_weights)
    return bce + wce


def stage1_logit_grads(p_st: np.ndarray, p_se: np.ndarray, y_st: np.ndarray,
                       y_se: np.ndarray, class_weights) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the unclamped Stage-I loss with respect to both heads' logits."""
    m = max(len(y_st), 1)
    weights = np.asarray(class_weights, dtype=np.float64)
    d_st = (p_st - y_st) / m
    wy = weights * y_se
    d_se = (p_se * wy.sum(axis=1, keepdims=True) - wy) / m
    return d_st, d_se
