"""Point-cloud evaluation metrics.

With predicted points ``P_R`` and ground-truth points ``P_L``:

* TP: predicted points whose nearest GT point lies within ``tau``
* FP: the remaining predicted points
* FN: GT points whose nearest predicted point lies farther than ``tau``
* CD = (D1 + D2) / 2 with D1 the summed predicted-to-GT nearest distances
  over TP + FP, and D2 the summed GT-to-predicted nearest distances over
  TP + FN (note the mixed denominator)
* precision, recall and IoU = TP / (TP + FP + FN)
* mIoU: mean of per-class IoU computed on class-restricted clouds; classes
  absent from both clouds are left out of the mean

Distances come from a KD-tree; ``brute_force_nearest`` is the O(n^2) reference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import AgriRadarError, ConfigError
from .scene_sim import OCCUPIED_CLASSES, ClassLabel, SemanticPointCloud

log = logging.getLogger(__name__)

DEFAULT_TAUS = (0.25, 0.5)


class MetricError(AgriRadarError):
    """Raised on invalid metric arguments."""
    pass


class UndefinedMetricError(MetricError):
    """Raised when a metric is undefined for the given clouds (e.g. empty inputs)."""
    pass


@dataclass(frozen=True)
class MatchCounts:
    tp: int
    fp: int
    fn: int
    tau: float


@dataclass(frozen=True)
class PrfIou:
    """Ratios; ``None`` marks a zero denominator."""
    precision: Optional[float]
    recall: Optional[float]
    iou: Optional[float]


@dataclass(frozen=True)
class MiouReport:
    per_class: dict[int, Optional[float]]
    mean: Optional[float]


@dataclass(frozen=True)
class MetricRecord:
    metric: str
    tau: float
    label: str
    value: Optional[float]


# ---------------------------------------------------------------------------
# Nearest neighbors
# ---------------------------------------------------------------------------

class NearestNeighborIndex:
    """Exact Euclidean nearest-neighbor distances into a fixed point set."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise MetricError("Cannot index non-finite points")
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray) -> np.ndarray:
        """Distance from every query to its nearest indexed point (inf when empty)."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if self._tree is None:
            return np.full(len(queries), np.inf)
        if not len(queries):
            return np.zeros(0)
        distances, _ = self._tree.query(queries, k=1)
        return np.asarray(distances, dtype=np.float64)


def build_nn_index(points: np.ndarray) -> NearestNeighborIndex:
    return NearestNeighborIndex(points)


def brute_force_nearest(queries: np.ndarray, points: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Reference nearest distances by exhaustive pairwise comparison."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(points):
        return np.full(len(queries), np.inf)
    out = np.empty(len(queries))
    for start in range(0, len(queries), chunk):
        q = queries[start:start + chunk]
        diff = q[:, None, :] - points[None, :, :]
        out[start:start + chunk] = np.sqrt(np.min(np.sum(diff * diff, axis=2), axis=1))
    return out


def nearest_distances(pred: np.ndarray, gt: np.ndarray, brute_force: bool = False):
    """Return (pred-to-GT, GT-to-pred) nearest distances."""
    if brute_force:
        return brute_force_nearest(pred, gt), brute_force_nearest(gt, pred)
    return build_nn_index(gt).query(pred), build_nn_index(pred).query(gt)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _points(cloud) -> np.ndarray:
    if isinstance(cloud, SemanticPointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def match_counts(pred, gt, tau: float, brute_force: bool = False) -> MatchCounts:
    """Threshold-matched TP/FP/FN; empty clouds are allowed."""
    if tau <= 0:
        raise MetricError(f"tau must be positive, got {tau}")
    p, g = _points(pred), _points(gt)
    d_pred, d_gt = nearest_distances(p, g, brute_force)
    tp = int(np.count_nonzero(d_pred <= tau))
    return MatchCounts(tp=tp, fp=len(p) - tp, fn=int(np.count_nonzero(d_gt > tau)), tau=tau)


def chamfer(pred, gt, tau: float, brute_force: bool = False) -> float:
    """
    Chamfer distance with threshold-dependent normalization.

    Raises:
        UndefinedMetricError: If either cloud is empty.
    """
    p, g = _points(pred), _points(gt)
    if not len(p) or not len(g):
        raise UndefinedMetricError("Chamfer distance is undefined for an empty cloud")
    d_pred, d_gt = nearest_distances(p, g, brute_force)
    tp = int(np.count_nonzero(d_pred <= tau))
    fn = int(np.count_nonzero(d_gt > tau))
    d1 = float(d_pred.sum()) / len(p)  # TP + FP
    d2 = float(d_gt.sum()) / (tp + fn)
    return 0.5 * (d1 + d2)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def prf_iou(counts: MatchCounts) -> PrfIou:
    return PrfIou(
        precision=_ratio(counts.tp, counts.tp + counts.fp),
        recall=_ratio(counts.tp, counts.tp + counts.fn),
        iou=_ratio(counts.tp, counts.tp + counts.fp + counts.fn),
    )


def miou(pred: SemanticPointCloud, gt: SemanticPointCloud, tau: float,
         classes: Iterable[int] = OCCUPIED_CLASSES, brute_force: bool = False) -> MiouReport:
    """Per-class IoU on class-restricted clouds and their mean."""
    per_class: dict[int, Optional[float]] = {}
    for label in classes:
        if int(label) == int(ClassLabel.FREE):
            raise MetricError("The free class is not evaluated")
        p, g = pred.with_label(label), gt.with_label(label)
        if not len(p) and not len(g):
            per_class[int(label)] = None
            continue
        per_class[int(label)] = prf_iou(match_counts(p, g, tau, brute_force)).iou
    defined = [v for v in per_class.values() if v is not None]
    return MiouReport(per_class, float(np.mean(defined)) if defined else None)


def evaluate_clouds(pred: SemanticPointCloud, gt: SemanticPointCloud,
                    taus: Sequence[float] = DEFAULT_TAUS) -> list[MetricRecord]:
    """Every metric at every threshold, as flat records."""
    records: list[MetricRecord] = []
    for tau in taus:
        counts = match_counts(pred, gt, tau)
        ratios = prf_iou(counts)
        try:
            cd: Optional[float] = chamfer(pred, gt, tau)
        except UndefinedMetricError:
            log.warning("Chamfer distance undefined at tau=%s (empty cloud)", tau)
            cd = None
        records += [
            MetricRecord("tp", tau, "all", float(counts.tp)),
            MetricRecord("fp", tau, "all", float(counts.fp)),
            MetricRecord("fn", tau, "all", float(counts.fn)),
            MetricRecord("cd", tau, "all", cd),
            MetricRecord("precision", tau, "all", ratios.precision),
            MetricRecord("recall", tau, "all", ratios.recall),
            MetricRecord("iou", tau, "all", ratios.iou),
        ]
        report = miou(pred, gt, tau)
        for label, value in report.per_class.items():
            records.append(MetricRecord("iou", tau, ClassLabel(label).name.lower(), value))
        records.append(MetricRecord("miou", tau, "all", report.mean))
    return records


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return "undefined"
    if float(value).is_integer() and abs(value) >= 1:
        return str(int(value))
    return f"{value:.4f}"


def format_table(records: Sequence[MetricRecord]) -> str:
    """Summary table with one column per threshold."""
    taus = sorted({r.tau for r in records})
    rows: dict[tuple[str, str], dict[float, Optional[float]]] = {}
    for r in records:
        rows.setdefault((r.metric, r.label), {})[r.tau] = r.value
    header = ["metric", "class"] + [f"tau={t:g}m" for t in taus]
    body = [[m, c] + [_fmt(v.get(t)) for t in taus] for (m, c), v in rows.items()]
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)) for row in [header] + body]
    return "\n".join(lines)


@dataclass
class EvaluateConfig:
    """Matching thresholds in meters."""
    taus: tuple[float, ...] = DEFAULT_TAUS

    def validate(self) -> None:
        if not self.taus or min(self.taus) <= 0:
            raise ConfigError("evaluate.taus must be a non-empty list of positive distances")
