"""ROC, precision-recall and threshold-curve metrics for OOD score reports.

Conventions:
  * ID is the positive class; a sample is predicted ID when ``score >= t``.
  * Thresholds sweep the distinct score values, so tied scores move together.
    Trapezoidal ROC area therefore gives ties half credit, matching the
    Mann-Whitney statistic.
  * AUPR is step-wise average precision, ``sum (R_i - R_{i-1}) * P_i``.
  * AUTC is the mean of the areas under FPR(t) and FNR(t) for t in [0, 1],
    computed on min-max normalised scores. Lower is better.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .featstore import FeatureTable
from .scorers import ScoreReport

AUTC_DEFINITION = (
    "AUTC = 0.5 * (area under FPR(t) + area under FNR(t)), t in [0, 1], "
    "scores min-max normalised per report; FPR(t) = share of OOD with score >= t, "
    "FNR(t) = share of ID with score < t; 0.5 when all scores are equal"
)


def _split(report) -> tuple[np.ndarray, np.ndarray]:
    """(scores, is_id) from a ScoreReport or a ``(scores, is_ood)`` pair."""
    if isinstance(report, ScoreReport):
        scores, is_ood = report.scores, report.is_ood
    else:
        scores, is_ood = report
        scores = np.asarray(scores, dtype=np.float64)
        is_ood = np.asarray(is_ood, dtype=bool)
    is_id = ~is_ood
    if not is_id.any() or not is_ood.any():
        raise ValueError("metrics need at least one ID and one OOD record")
    return scores, is_id


def _sweep(scores: np.ndarray, positive: np.ndarray):
    """Cumulative (tp, fp) at each distinct score, highest first."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positive[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(pos)[last]
    fp = np.cumsum(~pos)[last]
    return s[last], tp, fp


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray

    def __len__(self) -> int:
        return len(self.tpr)


@dataclass(frozen=True)
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    positive_class: str


def roc_curve(report) -> RocCurve:
    """ROC points from (0, 0) at ``t = +inf`` to (1, 1) at the lowest score."""
    scores, is_id = _split(report)
    thr, tp, fp = _sweep(scores, is_id)
    return RocCurve(
        thresholds=np.r_[np.inf, thr],
        tpr=np.r_[0.0, tp / is_id.sum()],
        fpr=np.r_[0.0, fp / (~is_id).sum()],
    )


def auroc(curve) -> float:
    if not isinstance(curve, RocCurve):
        curve = roc_curve(curve)
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) * 0.5))


def pr_curve(report, positive: str = "ID") -> PrCurve:
    scores, is_id = _split(report)
    if positive == "ID":
        pos = is_id
    elif positive == "OOD":
        scores, pos = -scores, ~is_id
    else:
        raise ValueError(f"positive must be 'ID' or 'OOD', got {positive!r}")
    thr, tp, fp = _sweep(scores, pos)
    return PrCurve(
        recall=np.r_[0.0, tp / pos.sum()],
        precision=np.r_[1.0, tp / (tp + fp)],
        thresholds=np.r_[np.inf, thr],
        positive_class=positive,
    )


def aupr(report, positive: str = "ID") -> float:
    """Average precision with ``positive`` ("ID" or "OOD") as the positive class."""
    curve = pr_curve(report, positive)
    return float(np.sum(np.diff(curve.recall) * curve.precision[1:]))


def autc(report) -> float:
    """Area under the threshold curve; see :data:`AUTC_DEFINITION`.

    For normalised scores ``u``, the step function ``1[u_j >= t]`` integrates
    to ``u_j`` over [0, 1], so the FPR area is the mean OOD score and the
    FNR area is one minus the mean ID score. Both are exact.
    """
    scores, is_id = _split(report)
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return 0.5
    u = (scores - lo) / (hi - lo)
    area_fpr = float(np.mean(u[~is_id]))
    area_fnr = float(np.mean(1.0 - u[is_id]))
    return 0.5 * (area_fpr + area_fnr)


@dataclass(frozen=True)
class YoudenResult:
    threshold: float
    j: float


def youden_threshold(curve) -> YoudenResult:
    """Maximise ``tpr - fpr``; threshold is the midpoint of the winning score gap.

    Ties go to the lowest threshold. When that is the lowest score itself
    (every sample predicted ID) the threshold is that score.
    """
    if not isinstance(curve, RocCurve):
        curve = roc_curve(curve)
    j = curve.tpr - curve.fpr
    best = float(np.max(j))
    idx = int(np.flatnonzero(j == best)[-1])
    thr = curve.thresholds
    if idx == 0:
        tau = math.inf
    elif idx == len(thr) - 1:
        tau = float(thr[idx])
    else:
        tau = float(0.5 * (thr[idx] + thr[idx + 1]))
    return YoudenResult(tau, best)


@dataclass(frozen=True)
class PerClassReport:
    threshold: float
    class_accuracy: np.ndarray
    class_support: np.ndarray
    ood_accuracy: float
    ood_support: int


def per_class_report(report: ScoreReport, table: FeatureTable, threshold: float) -> PerClassReport:
    """Accuracy per ID class and on OOD at ``threshold``.

    An ID sample is correct when ``score >= threshold`` and the predicted
    class matches its label; an OOD sample when ``score < threshold``.
    Classes without samples get NaN.
    """
    if math.isnan(threshold):
        raise ValueError("threshold must not be NaN")
    label_of = dict(zip(table.ids, table.class_labels.tolist()))
    n = table.manifest.n
    correct = np.zeros(n)
    support = np.zeros(n, dtype=np.int64)
    ood_ok = ood_total = 0
    for r in report.records:
        if r.id not in label_of:
            raise KeyError(f"record {r.id!r} is not in the feature table")
        label = label_of[r.id]
        if r.is_ood_true:
            ood_total += 1
            ood_ok += r.score < threshold
        else:
            support[label] += 1
            correct[label] += r.score >= threshold and r.pred_class == label
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(support > 0, correct / np.maximum(support, 1), np.nan)
    return PerClassReport(
        threshold=threshold,
        class_accuracy=acc,
        class_support=support,
        ood_accuracy=ood_ok / ood_total if ood_total else math.nan,
        ood_support=ood_total,
    )


@dataclass
class MetricsSummary:
    method: str
    auroc: float
    aupr_in: float
    aupr_out: float
    autc: float
    youden_threshold: float
    youden_j: float
    per_class_accuracy: dict[str, float]
    ood_accuracy: float
    n_id: int
    n_ood: int
    threshold_source: str = "self"
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)

        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return {k: clean(v) for k, v in out.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsSummary":
        data = dict(data)
        for key in ("youden_threshold", "ood_accuracy"):
            if data.get(key) is None:
                data[key] = math.nan
        data["per_class_accuracy"] = {
            k: (math.nan if v is None else v) for k, v in data["per_class_accuracy"].items()
        }
        return cls(**data)


def summarize(
    report: ScoreReport, table: FeatureTable, threshold_report: ScoreReport | None = None
) -> MetricsSummary:
    """All metrics for one report.

    The Youden threshold comes from ``threshold_report`` when given (e.g. the
    same method scored on the validation split), else from ``report``.
    """
    curve = roc_curve(report)
    if threshold_report is not None:
        yj = youden_threshold(roc_curve(threshold_report))
        source = "threshold_report"
    else:
        yj = youden_threshold(curve)
        source = "self"
    pc = per_class_report(report, table, yj.threshold)
    is_ood = report.is_ood
    return MetricsSummary(
        method=report.method,
        auroc=auroc(curve),
        aupr_in=aupr(report, "ID"),
        aupr_out=aupr(report, "OOD"),
        autc=autc(report),
        youden_threshold=yj.threshold,
        youden_j=yj.j,
        per_class_accuracy={
            name: float(acc) for name, acc in zip(table.manifest.class_names, pc.class_accuracy)
        },
        ood_accuracy=float(pc.ood_accuracy),
        n_id=int((~is_ood).sum()),
        n_ood=int(is_ood.sum()),
        threshold_source=source,
        params=dict(report.params),
    )
