"""Seeded Gaussian-cluster benchmarks with ID classes and nearby OOD clusters.

ID centers sit on a scaled simplex (pairwise distance ``class_sep``) when
``dim >= n_id_classes``, otherwise on a circle in the first two axes with
adjacent centers ``class_sep`` apart. OOD centers start at midpoints of ID
center pairs (adjacent pairs first) and are pushed away from the ID
centroid, which keeps them close to two classes at once.

Randomness comes from numpy's ``PCG64`` bit generator seeded with
``config.seed``; draws happen in a fixed order, so a config maps to exactly
one table.

Logits are the linear discriminant readout for equal-variance isotropic
Gaussians, ``(mu_c . x - |mu_c|^2 / 2) / sigma^2``, so softmax(logits) is the
exact ID class posterior under a uniform prior. ``label_offset`` optionally
adds a constant to the true-class logit of ID records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .featstore import OOD_LABEL, FeatureTable, Manifest


@dataclass(frozen=True)
class SynthConfig:
    n_id_classes: int = 5
    n_ood_clusters: int = 6
    dim: int = 16
    per_class: tuple[int, int, int] = (300, 100, 100)
    ood_per_cluster: tuple[int, int] = (30, 70)
    class_sep: float = 6.0
    noise_sigma: float = 1.0
    ood_push: float = 0.25
    label_offset: float = 0.0
    seed: int = 0
    class_names: tuple[str, ...] | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "per_class", tuple(int(c) for c in self.per_class))
        object.__setattr__(self, "ood_per_cluster", tuple(int(c) for c in self.ood_per_cluster))
        if self.n_id_classes < 1:
            raise ValueError("n_id_classes must be positive")
        if self.n_ood_clusters < 0:
            raise ValueError("n_ood_clusters must be non-negative")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if len(self.per_class) != 3 or min(self.per_class) < 1:
            raise ValueError(f"per_class needs three counts >= 1 (train, val, test), got {self.per_class}")
        if len(self.ood_per_cluster) != 2 or min(self.ood_per_cluster) < 0:
            raise ValueError(f"ood_per_cluster needs two counts >= 0 (val, test), got {self.ood_per_cluster}")
        if not self.class_sep > 0:
            raise ValueError("class_sep must be > 0")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be > 0")
        if self.ood_push < 0:
            raise ValueError("ood_push must be >= 0")
        if self.class_names is not None and len(self.class_names) != self.n_id_classes:
            raise ValueError("class_names must have n_id_classes entries")


def id_centers(n: int, dim: int, sep: float) -> np.ndarray:
    """ID class centers with adjacent (simplex: every) pair ``sep`` apart."""
    centers = np.zeros((n, dim))
    if n == 1:
        return centers
    if dim >= n:
        centers[np.arange(n), np.arange(n)] = sep / math.sqrt(2.0)
    elif dim >= 2:
        radius = sep / (2.0 * math.sin(math.pi / n))
        angles = 2.0 * math.pi * np.arange(n) / n
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    else:
        centers[:, 0] = sep * np.arange(n)
    return centers


def _pair_order(n: int):
    """Center pairs ordered by cyclic gap: (0,1),(1,2),...,(n-1,0),(0,2),..."""
    seen, pairs = set(), []
    for gap in range(1, n // 2 + 1):
        for a in range(n):
            b = (a + gap) % n
            key = (min(a, b), max(a, b))
            if key not in seen:
                seen.add(key)
                pairs.append((a, b))
    return pairs


def ood_centers(centers: np.ndarray, count: int, sep: float, push: float) -> np.ndarray:
    """OOD centers at least ``sep / 2`` from every ID center."""
    n, dim = centers.shape
    if count == 0:
        return np.zeros((0, dim))
    centroid = centers.mean(axis=0)
    pairs = _pair_order(n)
    out = np.zeros((count, dim))
    for q in range(count):
        lap = q // len(pairs) if pairs else q
        if pairs:
            a, b = pairs[q % len(pairs)]
            base = 0.5 * (centers[a] + centers[b])
        else:
            base = centers[0].copy()
        direction = base - centroid
        norm = np.linalg.norm(direction)
        if norm < 1e-12 * max(sep, 1.0):
            axis = np.zeros(dim)
            axis[q % dim] = 1.0 if (q // dim) % 2 == 0 else -1.0
            direction = axis
            if pairs and dim > 1:
                # prefer leaving the midpoint orthogonally to the chord
                chord = centers[b] - centers[a]
                chord = chord / np.linalg.norm(chord)
                for cand in (axis, np.roll(axis, 1)):
                    ortho = cand - chord * (cand @ chord)
                    if np.linalg.norm(ortho) > 1e-12:
                        direction = ortho
                        break
            norm = np.linalg.norm(direction)
        direction = direction / norm
        step = (push + lap) * sep
        point = base + step * direction
        # later laps and degenerate layouts can land too close; walk outward
        while np.min(np.linalg.norm(centers - point, axis=1)) < sep / 2.0:
            step += 0.25 * sep
            point = base + step * direction
        out[q] = point
    return out


def linear_readout(features: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    weights = centers / sigma**2
    bias = -0.5 * np.sum(centers**2, axis=1) / sigma**2
    return features @ weights.T + bias


def gen_gaussian_benchmark(config: SynthConfig) -> FeatureTable:
    cfg = config
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    centers = id_centers(cfg.n_id_classes, cfg.dim, cfg.class_sep)
    o_centers = ood_centers(centers, cfg.n_ood_clusters, cfg.class_sep, cfg.ood_push)

    ids, splits, labels, oods, feats = [], [], [], [], []
    for split, count in zip(("train", "val", "test"), cfg.per_class):
        for c in range(cfg.n_id_classes):
            x = centers[c] + cfg.noise_sigma * rng.standard_normal((count, cfg.dim))
            ids += [f"{split}-c{c}-{i:05d}" for i in range(count)]
            splits += [split] * count
            labels += [c] * count
            oods += [False] * count
            feats.append(x)
    for split, count in zip(("val", "test"), cfg.ood_per_cluster):
        for q in range(cfg.n_ood_clusters):
            x = o_centers[q] + cfg.noise_sigma * rng.standard_normal((count, cfg.dim))
            ids += [f"{split}-ood{q}-{i:05d}" for i in range(count)]
            splits += [split] * count
            labels += [OOD_LABEL] * count
            oods += [True] * count
            feats.append(x)

    features = np.concatenate(feats, axis=0) if feats else np.zeros((0, cfg.dim))
    labels_arr = np.array(labels, dtype=np.int64)
    logits = linear_readout(features, centers, cfg.noise_sigma)
    if cfg.label_offset:
        rows = np.flatnonzero(labels_arr >= 0)
        logits[rows, labels_arr[rows]] += cfg.label_offset

    names = cfg.class_names or tuple(f"class_{c}" for c in range(cfg.n_id_classes))
    manifest = Manifest(cfg.n_id_classes, cfg.dim, 0, names)
    return FeatureTable(manifest, ids, splits, labels_arr, oods, features, logits=logits)
