"""OOD scoring methods. Every score is oriented so that higher means more ID.

Logit-only scorers accept a single logit vector ``(n,)`` or a batch
``(B, n)``. :func:`score_dataset` runs a registered method over one split
of a :class:`FeatureTable`.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .featstore import FeatureTable, atomic_write_text, dump_json, filter_split, fmt_float
from .heads import HeadParams, apply_heads
from .prototypes import (
    DEFAULT_K,
    KnnIndex,
    PrototypeSet,
    kth_neighbor_distance,
    knn_majority,
    nearest_class,
    space_vectors,
)

DEFAULT_EPS = 1e-12
AGREEMENT_VARIANTS = ("literal", "normalized")


class MissingArtifactError(ValueError):
    """A method needs an artifact or column the caller did not supply."""


class UnknownMethodError(ValueError):
    pass


# -- records ------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    score: float
    pred_class: int
    is_ood_true: bool


@dataclass
class ScoreReport:
    method: str
    params: dict = field(default_factory=dict)
    records: list[ScoreRecord] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("score report ids must be unique")
        for r in self.records:
            if not math.isfinite(r.score):
                raise ValueError(f"record {r.id!r}: non-finite score")

    @classmethod
    def from_arrays(cls, scores, is_ood, pred_class=None, ids=None, method="custom", params=None):
        scores = np.asarray(scores, dtype=np.float64)
        is_ood = np.asarray(is_ood, dtype=bool)
        if pred_class is None:
            pred_class = np.zeros(len(scores), dtype=np.int64)
        if ids is None:
            ids = [f"r{i}" for i in range(len(scores))]
        records = [
            ScoreRecord(str(i), float(s), int(p), bool(o))
            for i, s, p, o in zip(ids, scores, pred_class, is_ood)
        ]
        return cls(method, dict(params or {}), records)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records], dtype=np.float64)

    @property
    def is_ood(self) -> np.ndarray:
        return np.array([r.is_ood_true for r in self.records], dtype=bool)

    @property
    def pred_class(self) -> np.ndarray:
        return np.array([r.pred_class for r in self.records], dtype=np.int64)


# -- logit scorers ----------------------------------------------------------------


def _logsumexp(a: np.ndarray) -> np.ndarray:
    top = np.max(a, axis=-1, keepdims=True)
    return np.squeeze(top, axis=-1) + np.log(np.sum(np.exp(a - top), axis=-1))


def log_softmax(logits, T: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / T
    return z - _logsumexp(z)[..., None]


def softmax(logits, T: float = 1.0) -> np.ndarray:
    """Temperature softmax, max-subtracted."""
    if not T > 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(logits, dtype=np.float64) / T
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def max_softmax_score(logits, T: float = 1.0):
    p = softmax(logits, T)
    return np.max(p, axis=-1) if p.ndim > 1 else float(np.max(p))


def max_logit_score(logits):
    logits = np.asarray(logits, dtype=np.float64)
    return np.max(logits, axis=-1) if logits.ndim > 1 else float(np.max(logits))


def energy_score(logits, T: float = 1.0):
    """Negative free energy, ``T * logsumexp(logits / T)``."""
    if not T > 0:
        raise ValueError("temperature must be > 0")
    out = T * _logsumexp(np.asarray(logits, dtype=np.float64) / T)
    return out if np.ndim(out) else float(out)


def entropy_score(logits):
    """Negative Shannon entropy (nats) of softmax(logits)."""
    logp = log_softmax(logits)
    out = np.sum(np.exp(logp) * logp, axis=-1)
    return out if np.ndim(out) else float(out)


def _golden_section(f, lo: float, hi: float, tol: float) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_temperature(
    table: FeatureTable, split: str = "val", log_bounds=(-2.0, 4.0), tol: float = 1e-4
) -> float:
    """Temperature minimising mean cross-entropy on the ID records of ``split``.

    Golden-section search over ``log T`` in ``log_bounds``.
    """
    if table.logits is None:
        raise MissingArtifactError("temperature fitting needs logits")
    part = filter_split(table, split, "id")
    if len(part) == 0:
        raise ValueError(f"no ID records with logits in split {split!r}")
    if len(np.unique(part.class_labels)) < 2:
        raise ValueError(f"split {split!r} holds a single class; temperature is not identifiable")
    logits = np.asarray(part.logits)
    rows = np.arange(len(part))
    labels = part.class_labels

    def nll(log_t: float) -> float:
        return float(-np.mean(log_softmax(logits, math.exp(log_t))[rows, labels]))

    return math.exp(_golden_section(nll, log_bounds[0], log_bounds[1], tol))


# -- feature scorers ----------------------------------------------------------------


def knn_score(index: KnnIndex, feature, k: int = DEFAULT_K) -> float:
    return -kth_neighbor_distance(index, feature, k)


@dataclass(frozen=True)
class Agreement:
    flag: int
    pred_class: int


def ncm_agreement(logits, protos: PrototypeSet, feature) -> Agreement:
    """Flag 1 when the classifier argmax equals the nearest class mean."""
    y1 = int(np.argmax(logits))
    y2 = nearest_class(protos, feature).label
    return Agreement(int(y1 == y2), y1)


def contrastive_agreement(logits, index: KnnIndex, projected_feature, k: int = DEFAULT_K) -> Agreement:
    """Flag 1 when the classifier argmax equals the KNN majority class."""
    y1 = int(np.argmax(logits))
    y2 = knn_majority(index, projected_feature, k).label
    return Agreement(int(y1 == y2), y1)


# -- agreement score ------------------------------------------------------------------


def distances_to_distribution(distances) -> np.ndarray:
    return softmax(-np.asarray(distances, dtype=np.float64))


def counts_to_distribution(counts, k: int) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    totals = np.sum(counts, axis=-1)
    if np.any(totals != k):
        raise ValueError(f"neighbour counts sum to {totals}, expected k={k}")
    return counts / k


def entropy(p) -> np.ndarray | float:
    """``-sum p log p`` in nats; zero entries contribute zero."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    out = -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1)
    return out if np.ndim(out) else float(out)


def kl_divergence(p, q) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pos = p > 0
    ratio = np.where(pos, p, 1.0) / np.where(pos, q, 1.0)
    out = np.sum(np.where(pos, p * np.log(ratio), 0.0), axis=-1)
    return out if np.ndim(out) else float(out)


def js_divergence(p, q) -> np.ndarray | float:
    """Jensen-Shannon divergence in nats, bounded by ln 2."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mid = 0.5 * (p + q)
    return 0.5 * (kl_divergence(p, mid) + kl_divergence(q, mid))


def _check_distribution(v, name):
    if np.any(v < 0) or np.any(np.abs(np.sum(v, axis=-1) - 1.0) > 1e-9):
        raise ValueError(f"{name} must be a probability vector (nonnegative, sums to 1)")


def agreement_score(v1, v2, eps: float = DEFAULT_EPS, variant: str = "literal"):
    """Agreement between classifier evidence ``v1`` and feature evidence ``v2``.

    ``literal``:    ``(1 - H(v1*v2 + eps)) / ln(n) * (1 - JS(v1, v2))``
    ``normalized``: ``(1 - H(v1*v2 + eps) / ln(n)) * (1 - JS(v1, v2))``

    ``H`` is taken over the unnormalised elementwise product. Rows of 2-D
    inputs are scored independently.
    """
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.shape != v2.shape:
        raise ValueError("v1 and v2 must have the same shape")
    _check_distribution(v1, "v1")
    _check_distribution(v2, "v2")
    n = v1.shape[-1]
    if n < 2:
        raise ValueError("the agreement score needs n >= 2 classes")
    h = entropy(v1 * v2 + eps)
    js = js_divergence(v1, v2)
    if variant == "literal":
        out = (1.0 - h) / math.log(n) * (1.0 - js)
    elif variant == "normalized":
        out = (1.0 - h / math.log(n)) * (1.0 - js)
    else:
        raise ValueError(f"unknown agreement variant {variant!r}; expected one of {AGREEMENT_VARIANTS}")
    return out if np.ndim(out) else float(out)


# -- registry --------------------------------------------------------------------------


@dataclass(frozen=True)
class Artifacts:
    protos: PrototypeSet | None = None
    knn_index: KnnIndex | None = None
    contrastive_index: KnnIndex | None = None
    heads: HeadParams | None = None


@dataclass(frozen=True)
class MethodInfo:
    name: str
    display: str
    needs: tuple[str, ...]
    defaults: dict


METHODS: dict[str, MethodInfo] = {
    m.name: m
    for m in (
        MethodInfo("MaxSoftmax", "MaxSoftmax", ("logits",), {}),
        MethodInfo("MaxLogit", "MaxLogit", ("logits",), {}),
        MethodInfo("TempScaling", "Temp'Scaling", ("logits",), {}),
        MethodInfo("KNN", "KNN", ("knn_index",), {"k": DEFAULT_K}),
        MethodInfo("EnergyBased", "EnergyBased", ("logits",), {"T": 1.0}),
        MethodInfo("Entropy", "Entropy", ("logits",), {}),
        MethodInfo("NCMAgreement", "NCM Agreement", ("logits", "protos"), {}),
        MethodInfo("ContrastiveAgreement", "Contrastive Agreement", ("logits", "contrastive_index"), {"k": DEFAULT_K}),
        MethodInfo(
            "NCMAgreementScore",
            "NCM Agreement Score",
            ("logits", "protos"),
            {"eps": DEFAULT_EPS, "variant": "literal"},
        ),
        MethodInfo(
            "ContrastiveAgreementScore",
            "Contrastive Agreement Score",
            ("logits", "contrastive_index"),
            {"k": DEFAULT_K, "eps": DEFAULT_EPS, "variant": "literal"},
        ),
    )
}

UNSUPPORTED = ("OpenMax", "SHE", "ReAct", "DICE", "DeepSVDD", "CenterLoss", "GROOD")

_ALIASES = {
    "temperaturescaling": "TempScaling",
    "energy": "EnergyBased",
    "contrastiveloss": "ContrastiveAgreement",
    "maxsoftmaxprobability": "MaxSoftmax",
    "msp": "MaxSoftmax",
}


def _key(name: str) -> str:
    return re.sub(r"[\s_\-']", "", name).lower()


def resolve_method(name: str) -> MethodInfo:
    """Look a method up by canonical name, display name or alias (case-insensitive)."""
    key = _key(name)
    for info in METHODS.values():
        if key in (_key(info.name), _key(info.display)):
            return info
    if key in _ALIASES:
        return METHODS[_ALIASES[key]]
    for other in UNSUPPORTED:
        if key == _key(other):
            raise UnknownMethodError(
                f"method {other!r} is not implemented: it needs model internals or training "
                f"procedures this package does not cover. Available: {', '.join(METHODS)}"
            )
    raise UnknownMethodError(f"unknown method {name!r}. Available: {', '.join(METHODS)}")


def _coerce_params(info: MethodInfo, params: dict | None) -> dict:
    out = dict(info.defaults)
    accepted = set(info.defaults) | ({"T"} if info.name == "TempScaling" else set())
    for key, value in (params or {}).items():
        if key not in accepted:
            raise ValueError(f"method {info.name} does not take parameter {key!r}")
        if key in ("T", "eps"):
            value = float(value)
            if not value > 0:
                raise ValueError(f"{key} must be > 0")
        elif key == "k":
            if float(value) != int(float(value)):
                raise ValueError(f"k must be an integer, got {value!r}")
            value = int(float(value))
        elif key == "variant":
            if value not in AGREEMENT_VARIANTS:
                raise ValueError(f"variant must be one of {AGREEMENT_VARIANTS}")
        out[key] = value
    return out


def score_dataset(
    method: str,
    table: FeatureTable,
    artifacts: Artifacts = Artifacts(),
    params: dict | None = None,
    split: str | None = "test",
) -> ScoreReport:
    """Score every record of ``split`` (all splits when ``None``) in table order.

    Logits come from ``artifacts.heads`` when given, else from the table;
    projected features likewise. ``pred_class`` is always the classifier
    argmax, except for ``KNN`` without logits, which reports the neighbour
    majority.
    """
    info = resolve_method(method)
    params = _coerce_params(info, params)
    full = apply_heads(table, artifacts.heads) if artifacts.heads is not None else table
    part = filter_split(full, split)

    if "logits" in info.needs and full.logits is None:
        raise MissingArtifactError(f"{info.name} needs logits: supply a table with logits or head params")
    for need in info.needs:
        if need != "logits" and getattr(artifacts, need) is None:
            raise MissingArtifactError(f"{info.name} needs the {need} artifact")

    logits = part.logits
    count = len(part)
    pred = np.argmax(logits, axis=1) if logits is not None and count else np.zeros(count, dtype=np.int64)

    if info.name == "MaxSoftmax":
        scores = max_softmax_score(logits) if count else np.zeros(0)
    elif info.name == "MaxLogit":
        scores = max_logit_score(logits) if count else np.zeros(0)
    elif info.name == "TempScaling":
        if "T" not in params:
            params["T"] = fit_temperature(full, "val")
        scores = max_softmax_score(logits, params["T"]) if count else np.zeros(0)
    elif info.name == "EnergyBased":
        scores = energy_score(logits, params["T"]) if count else np.zeros(0)
    elif info.name == "Entropy":
        scores = entropy_score(logits) if count else np.zeros(0)
    elif info.name == "KNN":
        index = artifacts.knn_index
        vectors = space_vectors(part, index.space)
        scores = np.array([knn_score(index, v, params["k"]) for v in vectors])
        if logits is None:
            pred = np.array([knn_majority(index, v, params["k"]).label for v in vectors], dtype=np.int64)
    elif info.name in ("NCMAgreement", "NCMAgreementScore"):
        protos = artifacts.protos
        vectors = space_vectors(part, protos.space)
        nearest = [nearest_class(protos, v) for v in vectors]
        if info.name == "NCMAgreement":
            scores = np.array([float(pred[i] == nc.label) for i, nc in enumerate(nearest)])
        else:
            v2 = np.array([distances_to_distribution(nc.distances) for nc in nearest]).reshape(count, -1)
            scores = agreement_score(softmax(logits), v2, params["eps"], params["variant"]) if count else np.zeros(0)
    elif info.name in ("ContrastiveAgreement", "ContrastiveAgreementScore"):
        index = artifacts.contrastive_index
        vectors = space_vectors(part, index.space)
        votes = [knn_majority(index, v, params["k"]) for v in vectors]
        if info.name == "ContrastiveAgreement":
            scores = np.array([float(pred[i] == vote.label) for i, vote in enumerate(votes)])
        else:
            v2 = np.array([counts_to_distribution(vote.counts, params["k"]) for vote in votes]).reshape(count, -1)
            scores = agreement_score(softmax(logits), v2, params["eps"], params["variant"]) if count else np.zeros(0)
    else:  # pragma: no cover - registry and dispatch are kept in sync
        raise UnknownMethodError(info.name)

    return ScoreReport.from_arrays(
        np.asarray(scores, dtype=np.float64).reshape(count),
        part.is_ood,
        pred_class=pred,
        ids=part.ids,
        method=info.name,
        params=params,
    )


# -- scores file ------------------------------------------------------------------------

SCORES_HEADER = ["id", "method", "score", "pred_class", "is_ood_true"]


def _params_path(path: Path) -> Path:
    return path.with_name(path.stem + ".params.json")


def save_scores(reports: list[ScoreReport], path) -> Path:
    """Write reports to ``id,method,score,pred_class,is_ood_true`` CSV.

    Method parameters (e.g. a fitted temperature) go to a
    ``<stem>.params.json`` sidecar.
    """
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORES_HEADER)
    for rep in reports:
        for r in rep.records:
            writer.writerow([r.id, rep.method, fmt_float(r.score), r.pred_class, int(r.is_ood_true)])
    atomic_write_text(path, buf.getvalue())
    atomic_write_text(_params_path(path), dump_json({rep.method: rep.params for rep in reports}))
    return path


def load_scores(path) -> list[ScoreReport]:
    """Read a scores CSV back into one report per method, in file order."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != SCORES_HEADER:
        raise ValueError(f"{path}: line 1: expected header {','.join(SCORES_HEADER)}")
    params = {}
    if _params_path(path).exists():
        params = json.loads(_params_path(path).read_text(encoding="utf-8"))
    grouped: dict[str, list[ScoreRecord]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 5 or row[4] not in ("0", "1"):
            raise ValueError(f"{path}: line {lineno}: malformed row")
        try:
            rec = ScoreRecord(row[0], float(row[2]), int(row[3]), row[4] == "1")
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: malformed number") from None
        grouped.setdefault(row[1], []).append(rec)
    return [ScoreReport(m, params.get(m, {}), recs) for m, recs in grouped.items()]
