"""Two-layer classification and projection heads over frozen features.

Both heads share one hidden ReLU layer::

    hidden    = relu(x @ W1 + b1)
    logits    = hidden @ W2c + b2c      # classifier, n outputs
    projected = hidden @ W2p + b2p      # projection head, m outputs

Gradients are derived by hand; :func:`gradcheck` compares them against
central finite differences.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .featstore import FeatureTable, atomic_write_text, dump_json, filter_split, fmt_float

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2c", "b2c", "W2p", "b2p")


@dataclass
class HeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2c: np.ndarray
    b2c: np.ndarray
    W2p: np.ndarray
    b2p: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d, h = self.W1.shape
        expected = {
            "b1": (h,),
            "W2c": (h, self.W2c.shape[1] if self.W2c.ndim == 2 else -1),
            "b2c": (self.W2c.shape[1],),
            "W2p": (h, self.W2p.shape[1] if self.W2p.ndim == 2 else -1),
            "b2p": (self.W2p.shape[1],),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def h(self) -> int:
        return self.W1.shape[1]

    @property
    def n(self) -> int:
        return self.W2c.shape[1]

    @property
    def m(self) -> int:
        return self.W2p.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "HeadParams":
        return HeadParams(**{k: v.copy() for k, v in self.arrays().items()})

    def __eq__(self, other):
        if not isinstance(other, HeadParams):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in PARAM_NAMES)

    __hash__ = None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    weight_decay: float = 0.01
    warmup_epochs: int = 5
    max_epochs: int = 100
    batch_size: int = 64
    temperature: float = 0.5
    ntxent_weight: float = 0.5
    noise_aug_sigma: float = 0.1
    hidden: int = 512
    proj_dim: int = 32
    label_aware: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.ntxent_weight <= 1.0:
            raise ValueError("ntxent_weight must lie in [0, 1]")
        if self.warmup_epochs < 0 or self.weight_decay < 0 or self.noise_aug_sigma < 0:
            raise ValueError("warmup_epochs, weight_decay and noise_aug_sigma must be >= 0")
        if self.hidden < 1 or self.proj_dim < 1:
            raise ValueError("hidden and proj_dim must be positive")


def init_heads(d: int, h: int, n: int, m: int, seed: int = 0) -> HeadParams:
    """Uniform fan-in init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; zero biases."""
    for name, value in (("d", d), ("h", h), ("n", n), ("m", m)):
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    lim1 = 1.0 / math.sqrt(d)
    lim2 = 1.0 / math.sqrt(h)
    return HeadParams(
        W1=rng.uniform(-lim1, lim1, size=(d, h)),
        b1=np.zeros(h),
        W2c=rng.uniform(-lim2, lim2, size=(h, n)),
        b2c=np.zeros(n),
        W2p=rng.uniform(-lim2, lim2, size=(h, m)),
        b2p=np.zeros(m),
    )


def _as_batch(params: HeadParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != params.d:
        raise ValueError(f"feature shape {x.shape} does not match head input dim {params.d}")
    return x2, single


def _hidden(params: HeadParams, x: np.ndarray):
    pre = x @ params.W1 + params.b1
    return pre, np.maximum(pre, 0.0)


def forward_classifier(params: HeadParams, feature) -> np.ndarray:
    """Logits for one feature vector (d,) or a batch (B, d)."""
    x, single = _as_batch(params, feature)
    _, hid = _hidden(params, x)
    out = hid @ params.W2c + params.b2c
    return out[0] if single else out


def forward_projection(params: HeadParams, feature) -> np.ndarray:
    x, single = _as_batch(params, feature)
    _, hid = _hidden(params, x)
    out = hid @ params.W2p + params.b2p
    return out[0] if single else out


def apply_heads(table: FeatureTable, params: HeadParams) -> FeatureTable:
    """Copy of ``table`` with logits and projected columns produced by the heads."""
    if params.d != table.manifest.d or params.n != table.manifest.n:
        raise ValueError(
            f"head dims (d={params.d}, n={params.n}) do not match table "
            f"(d={table.manifest.d}, n={table.manifest.n})"
        )
    if len(table) == 0:
        return table.with_columns(logits=np.zeros((0, params.n)), projected=np.zeros((0, params.m)))
    return table.with_columns(
        logits=forward_classifier(params, table.features),
        projected=forward_projection(params, table.features),
    )


# -- losses ---------------------------------------------------------------


def _logsumexp(a: np.ndarray, axis=-1) -> np.ndarray:
    top = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(top, axis=axis) + np.log(np.sum(np.exp(a - top), axis=axis))


def cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    """``-log softmax(logits)[label]`` and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    if not (0 <= int(label) < n) or int(label) != label:
        raise ValueError(f"label {label!r} outside [0, {n})")
    lse = _logsumexp(logits)
    loss = float(lse - logits[label])
    grad = np.exp(logits - lse)
    grad[label] -= 1.0
    return loss, grad


def _cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    b = logits.shape[0]
    lse = _logsumexp(logits, axis=1)
    rows = np.arange(b)
    loss = float(np.mean(lse - logits[rows, labels]))
    grad = np.exp(logits - lse[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / b


def ntxent(z, tau: float, labels=None) -> tuple[float, np.ndarray]:
    """NT-Xent loss over ``2N`` rows where rows ``2i`` and ``2i+1`` are positives.

    Similarity is cosine. Each anchor ``i`` contributes
    ``-log(exp(s_ip / tau) / sum_{k != i} exp(s_ik / tau))``; the loss is the
    mean over all anchors. With ``labels`` every other row of the same label
    also counts as a positive and the numerator term is averaged over them.

    Returns ``(loss, dloss/dz)``.
    """
    z = np.asarray(z, dtype=np.float64)
    rows, _ = z.shape
    if rows < 2 or rows % 2:
        raise ValueError(f"ntxent needs an even number (>= 2) of rows, got {rows}")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    norms = np.linalg.norm(z, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise FloatingPointError(f"row {int(zero[0])} has zero norm; cosine similarity undefined")
    u = z / norms[:, None]
    s = (u @ u.T) / tau

    idx = np.arange(rows)
    if labels is None:
        pos = np.zeros((rows, rows))
        pos[idx, idx ^ 1] = 1.0
    else:
        labels = np.asarray(labels)
        pos = (labels[:, None] == labels[None, :]).astype(np.float64)
        pos[idx, idx ^ 1] = 1.0
        pos[idx, idx] = 0.0
        pos /= pos.sum(axis=1, keepdims=True)

    masked = s.copy()
    masked[idx, idx] = -np.inf
    lse = _logsumexp(masked, axis=1)
    loss = float(np.mean(lse - np.sum(pos * s, axis=1)))

    prob = np.exp(masked - lse[:, None])
    g_s = (prob - pos) / rows
    g_u = (g_s + g_s.T) @ u / tau
    g_z = (g_u - u * np.sum(g_u * u, axis=1, keepdims=True)) / norms[:, None]
    return loss, g_z


# -- backprop through the heads ----------------------------------------------


def _backward(params, x, pre, hid, d_logits, d_proj):
    grads = {}
    d_hid = np.zeros_like(hid)
    if d_logits is not None:
        grads["W2c"] = hid.T @ d_logits
        grads["b2c"] = d_logits.sum(axis=0)
        d_hid += d_logits @ params.W2c.T
    else:
        grads["W2c"] = np.zeros_like(params.W2c)
        grads["b2c"] = np.zeros_like(params.b2c)
    if d_proj is not None:
        grads["W2p"] = hid.T @ d_proj
        grads["b2p"] = d_proj.sum(axis=0)
        d_hid += d_proj @ params.W2p.T
    else:
        grads["W2p"] = np.zeros_like(params.W2p)
        grads["b2p"] = np.zeros_like(params.b2p)
    d_pre = d_hid * (pre > 0)
    grads["W1"] = x.T @ d_pre
    grads["b1"] = d_pre.sum(axis=0)
    return grads


def head_loss(
    params: HeadParams,
    x: np.ndarray,
    labels: np.ndarray,
    *,
    ntxent_weight: float,
    tau: float,
    label_aware: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """Combined objective ``w * ntxent + (1 - w) * cross_entropy`` on a view batch.

    ``x`` holds ``2B`` rows with views of sample ``i`` at rows ``2i`` and
    ``2i+1``. The NT-Xent term is skipped entirely when ``w == 0``.
    """
    pre, hid = _hidden(params, x)
    logits = hid @ params.W2c + params.b2c
    ce, d_logits = _cross_entropy_batch(logits, labels)
    loss = (1.0 - ntxent_weight) * ce
    d_logits = d_logits * (1.0 - ntxent_weight)
    d_proj = None
    if ntxent_weight > 0:
        proj = hid @ params.W2p + params.b2p
        nt, d_proj = ntxent(proj, tau, labels if label_aware else None)
        loss += ntxent_weight * nt
        d_proj = d_proj * ntxent_weight
    return loss, _backward(params, x, pre, hid, d_logits, d_proj)


# -- training ---------------------------------------------------------------


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def accuracy(params: HeadParams, table: FeatureTable) -> float:
    """Top-1 accuracy of the classifier head on the ID records of ``table``."""
    id_rows = ~table.is_ood
    if not id_rows.any():
        return float("nan")
    pred = np.argmax(forward_classifier(params, table.features[id_rows]), axis=1)
    return float(np.mean(pred == table.class_labels[id_rows]))


def train_heads(table: FeatureTable, config: TrainConfig = TrainConfig(), history: list | None = None) -> HeadParams:
    """Train both heads on the ID train split with AdamW.

    Positive pairs are two Gaussian-noise views of each feature. The learning
    rate follows :func:`lr_at` per optimizer step. After every epoch the
    classifier is scored on the ID validation split (when present) and the
    best-scoring parameters are returned; otherwise the final ones.

    If ``history`` is a list, one dict per epoch is appended to it.
    """
    cfg = config
    train = filter_split(table, "train", "id")
    if len(train) == 0:
        raise ValueError("table has no ID records in the train split")
    val = filter_split(table, "val", "id")
    man = table.manifest
    params = init_heads(man.d, cfg.hidden, man.n, cfg.proj_dim, seed=cfg.seed)
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 1]))

    x_all = np.asarray(train.features)
    y_all = np.asarray(train.class_labels)
    count = len(train)
    steps_per_epoch = math.ceil(count / cfg.batch_size)
    total = steps_per_epoch * cfg.max_epochs
    warmup = steps_per_epoch * cfg.warmup_epochs

    m1 = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    m2 = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    step = 0
    best, best_acc = params.copy(), -1.0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(count)
        epoch_loss = 0.0
        for start in range(0, count, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            xb, yb = x_all[batch], y_all[batch]
            views = np.repeat(xb, 2, axis=0)
            if cfg.noise_aug_sigma > 0:
                views = views + cfg.noise_aug_sigma * rng.standard_normal(views.shape)
            labels = np.repeat(yb, 2)
            loss, grads = head_loss(
                params,
                views,
                labels,
                ntxent_weight=cfg.ntxent_weight,
                tau=cfg.temperature,
                label_aware=cfg.label_aware,
            )
            epoch_loss += loss * len(batch)

            lr = lr_at(step, total, warmup, cfg.learning_rate)
            step += 1
            c1 = 1.0 - cfg.beta1**step
            c2 = 1.0 - cfg.beta2**step
            for name in PARAM_NAMES:
                p = getattr(params, name)
                g = grads[name]
                m1[name] = cfg.beta1 * m1[name] + (1.0 - cfg.beta1) * g
                m2[name] = cfg.beta2 * m2[name] + (1.0 - cfg.beta2) * g * g
                if cfg.weight_decay and name.startswith("W"):
                    p *= 1.0 - lr * cfg.weight_decay
                p -= lr * (m1[name] / c1) / (np.sqrt(m2[name] / c2) + cfg.adam_eps)

        val_acc = accuracy(params, val) if len(val) else float("nan")
        record = {"epoch": epoch + 1, "loss": epoch_loss / count, "val_accuracy": val_acc}
        if history is not None:
            history.append(record)
        log.debug("epoch %d loss %.6f val_acc %.4f", epoch + 1, record["loss"], val_acc)
        if len(val) and val_acc > best_acc:
            best_acc, best = val_acc, params.copy()

    if len(val):
        log.info("best validation accuracy %.4f", best_acc)
        return best
    return params


# -- finite-difference checking ----------------------------------------------


def _probe_loss(loss_kind: str, params: HeadParams, probe):
    if loss_kind == "cross_entropy":
        x, labels = probe
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(labels))
        return head_loss(params, x, labels, ntxent_weight=0.0, tau=1.0)
    if loss_kind == "ntxent":
        x, tau = probe
        x = np.asarray(x, dtype=np.float64)
        pre, hid = _hidden(params, x)
        proj = hid @ params.W2p + params.b2p
        loss, d_proj = ntxent(proj, tau)
        return loss, _backward(params, x, pre, hid, None, d_proj)
    raise ValueError(f"unknown loss kind {loss_kind!r}; expected 'cross_entropy' or 'ntxent'")


def gradcheck(loss_kind: str, params: HeadParams, probe, step: float = 1e-5, abs_floor: float = 1e-4) -> float:
    """Worst disagreement between analytic and central-difference parameter gradients.

    ``probe`` is ``(features, labels)`` for ``"cross_entropy"`` and
    ``(features_2N_by_d, tau)`` for ``"ntxent"``. Each element is perturbed by
    ``step * max(1, |theta|)``. The per-element error is
    ``|a - f| / max(|a|, |f|)``; elements where both sides are below
    ``abs_floor`` count their absolute difference instead, since central
    differences carry roughly ``1e-11`` of rounding noise at this step.

    Finite differences are meaningless across a ReLU kink, so probes should
    keep every hidden pre-activation further than a few steps from zero.
    """
    _, analytic = _probe_loss(loss_kind, params, probe)
    work = params.copy()
    worst = 0.0
    for name in PARAM_NAMES:
        arr = getattr(work, name)
        flat = arr.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            up = _probe_loss(loss_kind, work, probe)[0]
            flat[i] = orig - h
            down = _probe_loss(loss_kind, work, probe)[0]
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = a_flat[i]
            scale = max(abs(a), abs(numeric))
            err = abs(a - numeric) if scale < abs_floor else abs(a - numeric) / scale
            worst = max(worst, err)
    return worst


# -- persistence --------------------------------------------------------------


def save_head_params(params: HeadParams, path) -> Path:
    """Flat CSV ``array,index,value`` plus a JSON shape manifest at ``path``."""
    path = Path(path)
    data_name = path.name.removesuffix(".json") + ".csv"
    lines = ["array,index,value"]
    for name in PARAM_NAMES:
        for i, v in enumerate(getattr(params, name).reshape(-1)):
            lines.append(f"{name},{i},{fmt_float(v)}")
    manifest = {
        "kind": "head_params",
        "shapes": {name: list(getattr(params, name).shape) for name in PARAM_NAMES},
        "data_file": data_name,
    }
    atomic_write_text(path.parent / data_name, "\n".join(lines) + "\n")
    atomic_write_text(path, dump_json(manifest))
    return path


def load_head_params(path) -> HeadParams:
    path = Path(path)
    meta = json.loads(path.read_text(encoding="utf-8"))
    if meta.get("kind") != "head_params":
        raise ValueError(f"{path}: not a head-params manifest")
    shapes = {k: tuple(v) for k, v in meta["shapes"].items()}
    flat = {k: np.full(int(np.prod(s)), np.nan) for k, s in shapes.items()}
    lines = (path.parent / meta["data_file"]).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "array,index,value":
        raise ValueError(f"{meta['data_file']}: line 1: bad header")
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            name, idx, value = line.split(",")
            flat[name][int(idx)] = float(value)
        except (ValueError, KeyError, IndexError):
            raise ValueError(f"{meta['data_file']}: line {lineno}: malformed entry {line!r}") from None
    return HeadParams(**{k: flat[k].reshape(shapes[k]) for k in PARAM_NAMES})


def config_from_dict(values: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown training options: {sorted(unknown)}")
    return replace(TrainConfig(), **values)
