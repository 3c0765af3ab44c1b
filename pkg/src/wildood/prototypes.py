"""Nearest-class-mean prototypes and an exact k-nearest-neighbour index.

Both structures are fitted from the ID records of one split and are
immutable afterwards. Every query is an exhaustive scan; ties resolve to the
lowest class index (argmin/argmax) or to reference insertion order
(neighbour ranking).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .featstore import FeatureTable, atomic_write_text, dump_json, filter_split, fmt_float

SPACES = ("raw", "projected")
NORMALIZATIONS = ("none", "unit_l2")
DEFAULT_K = 50


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def space_vectors(table: FeatureTable, space: str) -> np.ndarray:
    """The feature matrix of ``table`` in ``space`` ("raw" or "projected")."""
    if space == "raw":
        return table.features
    if space == "projected":
        if table.projected is None:
            raise ValueError("projected space requested but the table has no projected features (m = 0)")
        return table.projected
    raise ValueError(f"unknown space {space!r}; expected one of {SPACES}")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot unit-normalize a zero vector")
    return x / norms


def _distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = points - query
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


@dataclass(frozen=True)
class PrototypeSet:
    means: np.ndarray
    fitted_on: str
    space: str = "raw"

    def __post_init__(self):
        object.__setattr__(self, "means", _readonly(self.means))

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class NearestClass:
    label: int
    distances: np.ndarray


def fit_class_means(table: FeatureTable, split: str = "val", space: str = "raw") -> PrototypeSet:
    """Mean vector of each ID class over the ``split`` records."""
    part = filter_split(table, split, "id")
    vectors = space_vectors(part, space)
    man = table.manifest
    means = np.zeros((man.n, vectors.shape[1]))
    for c in range(man.n):
        rows = vectors[part.class_labels == c]
        if len(rows) == 0:
            raise ValueError(f"class {c} ({man.class_names[c]}) has no records in split {split!r}")
        means[c] = rows.mean(axis=0)
    return PrototypeSet(means, fitted_on=split, space=space)


def nearest_class(protos: PrototypeSet, feature) -> NearestClass:
    """Euclidean distance to every class mean and the closest class."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (protos.means.shape[1],):
        raise ValueError(f"feature shape {feature.shape} does not match prototype dim {protos.means.shape[1]}")
    dist = _distances(protos.means, feature)
    return NearestClass(int(np.argmin(dist)), dist)


def nearest_class_batch(protos: PrototypeSet, features) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`nearest_class`; returns ``(labels, distances)``."""
    features = np.asarray(features, dtype=np.float64)
    diff = features[:, None, :] - protos.means[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return np.argmin(dist, axis=1), dist


@dataclass(frozen=True)
class KnnIndex:
    points: np.ndarray
    labels: np.ndarray
    n_classes: int
    space: str = "raw"
    normalization: str = "none"
    split: str = "val"

    def __post_init__(self):
        object.__setattr__(self, "points", _readonly(self.points))
        labels = np.array(self.labels, dtype=np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        if self.points.ndim != 2 or len(self.points) != len(labels):
            raise ValueError("points and labels must have matching lengths")
        if len(labels) == 0:
            raise ValueError("a KNN index needs at least one reference point")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def prepare(self, feature) -> np.ndarray:
        feature = np.asarray(feature, dtype=np.float64)
        if feature.shape[-1] != self.points.shape[1]:
            raise ValueError(
                f"query dim {feature.shape[-1]} does not match index dim {self.points.shape[1]}"
            )
        return _unit_rows(feature) if self.normalization == "unit_l2" else feature

    def ranked(self, feature) -> tuple[np.ndarray, np.ndarray]:
        """All reference indices ordered by distance (stable), with distances."""
        dist = _distances(self.points, self.prepare(feature))
        order = np.argsort(dist, kind="stable")
        return order, dist[order]


def build_knn_index(
    table: FeatureTable, split: str = "val", space: str = "raw", normalization: str = "none"
) -> KnnIndex:
    """Exact index over the ID records of ``split``."""
    part = filter_split(table, split, "id")
    if len(part) == 0:
        raise ValueError(f"no ID records in split {split!r} to index")
    vectors = space_vectors(part, space)
    if normalization == "unit_l2":
        vectors = _unit_rows(vectors)
    elif normalization != "none":
        raise ValueError(f"unknown normalization {normalization!r}; expected one of {NORMALIZATIONS}")
    return KnnIndex(vectors, part.class_labels, table.manifest.n, space, normalization, split)


def _check_k(index: KnnIndex, k: int) -> None:
    if int(k) != k or not 1 <= k <= len(index):
        raise ValueError(f"k={k!r} outside [1, {len(index)}]")


@dataclass(frozen=True)
class Vote:
    label: int
    counts: np.ndarray


def knn_majority(index: KnnIndex, feature, k: int = DEFAULT_K) -> Vote:
    """Class tally over the ``k`` nearest references; majority with lowest-index ties."""
    _check_k(index, k)
    order, _ = index.ranked(feature)
    counts = np.bincount(index.labels[order[:k]], minlength=index.n_classes)
    return Vote(int(np.argmax(counts)), counts)


def kth_neighbor_distance(index: KnnIndex, feature, k: int = DEFAULT_K) -> float:
    _check_k(index, k)
    _, dist = index.ranked(feature)
    return float(dist[k - 1])


# -- persistence -------------------------------------------------------------


def _write_matrix(path: Path, kind: str, meta: dict, header: list[str], rows) -> Path:
    data_name = path.name.removesuffix(".json") + ".csv"
    lines = [",".join(header)] + [",".join(r) for r in rows]
    atomic_write_text(path.parent / data_name, "\n".join(lines) + "\n")
    atomic_write_text(path, dump_json({"kind": kind, "data_file": data_name, **meta}))
    return path


def _read_matrix(path: Path, kind: str):
    meta = json.loads(Path(path).read_text(encoding="utf-8"))
    if meta.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} manifest, found kind={meta.get('kind')!r}")
    lines = (Path(path).parent / meta["data_file"]).read_text(encoding="utf-8").splitlines()
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rows.append([float(tok) for tok in line.split(",")])
        except ValueError:
            raise ValueError(f"{meta['data_file']}: line {lineno}: malformed row") from None
    return meta, lines[0].split(","), rows


def save_prototypes(protos: PrototypeSet, path) -> Path:
    n, d = protos.means.shape
    return _write_matrix(
        Path(path),
        "prototypes",
        {"n": n, "d": d, "space": protos.space, "fitted_on": protos.fitted_on},
        [f"f{j}" for j in range(d)],
        ([fmt_float(v) for v in row] for row in protos.means),
    )


def load_prototypes(path) -> PrototypeSet:
    meta, _, rows = _read_matrix(Path(path), "prototypes")
    means = np.array(rows, dtype=np.float64).reshape(meta["n"], meta["d"])
    return PrototypeSet(means, fitted_on=meta["fitted_on"], space=meta["space"])


def save_knn_index(index: KnnIndex, path) -> Path:
    size, d = index.points.shape
    return _write_matrix(
        Path(path),
        "knn_index",
        {
            "size": size,
            "d": d,
            "n_classes": index.n_classes,
            "space": index.space,
            "normalization": index.normalization,
            "split": index.split,
        },
        ["label"] + [f"f{j}" for j in range(d)],
        ([str(int(index.labels[i]))] + [fmt_float(v) for v in index.points[i]] for i in range(size)),
    )


def load_knn_index(path) -> KnnIndex:
    meta, _, rows = _read_matrix(Path(path), "knn_index")
    arr = np.array(rows, dtype=np.float64).reshape(meta["size"], meta["d"] + 1)
    return KnnIndex(
        arr[:, 1:],
        arr[:, 0].astype(np.int64),
        meta["n_classes"],
        meta["space"],
        meta["normalization"],
        meta["split"],
    )


def load_artifact(path):
    """Load a prototype set, KNN index or head params by manifest ``kind``."""
    kind = json.loads(Path(path).read_text(encoding="utf-8")).get("kind")
    if kind == "prototypes":
        return load_prototypes(path)
    if kind == "knn_index":
        return load_knn_index(path)
    if kind == "head_params":
        from .heads import load_head_params

        return load_head_params(path)
    raise ValueError(f"{path}: unknown artifact kind {kind!r}")
