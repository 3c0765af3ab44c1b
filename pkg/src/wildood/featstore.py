"""Feature tables: labeled embeddings, optional logits and projected features.

A table is stored as a JSON manifest plus a CSV data file::

    bench.manifest.json   {"n": 5, "d": 16, "m": 0, "class_names": [...], "data_file": "bench.csv"}
    bench.csv             id,split,class_label,is_ood,f0..f{d-1}[,l0..l{n-1}][,p0..p{m-1}]

Floats are written with ``repr`` (shortest decimal that round-trips), so a
save/load cycle is bit-exact. OOD records carry ``class_label == -1``.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("train", "val", "test")
OOD_LABEL = -1
_FIXED_COLUMNS = ["id", "split", "class_label", "is_ood"]
_MANIFEST_SUFFIX = ".manifest.json"


class TableFormatError(ValueError):
    """The manifest or CSV does not follow the file format."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TableValidationError(ValueError):
    """The table parses but breaks a record or table invariant."""

    def __init__(self, message: str, record_id: str | None = None):
        self.record_id = record_id
        if record_id is not None:
            message = f"record {record_id!r}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Manifest:
    n: int
    d: int
    m: int
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.n < 1 or self.d < 1 or self.m < 0:
            raise TableValidationError(f"bad manifest dims n={self.n} d={self.d} m={self.m}")
        if len(self.class_names) != self.n:
            raise TableValidationError(
                f"manifest lists {len(self.class_names)} class names for n={self.n}"
            )


@dataclass(frozen=True)
class FeatureRecord:
    id: str
    split: str
    class_label: int
    is_ood: bool
    features: tuple[float, ...]
    logits: tuple[float, ...] | None = None
    projected: tuple[float, ...] | None = None


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


def _rows(a, count: int, width: int) -> np.ndarray:
    a = _frozen(a)
    # an empty column has no width of its own; take it from the manifest
    return a.reshape(count, width if a.size == 0 else -1)


class FeatureTable:
    """Immutable, column-oriented collection of :class:`FeatureRecord`.

    Columns are numpy arrays marked read-only. ``logits`` and ``projected``
    are either present for every record or absent (``None``).
    """

    def __init__(
        self,
        manifest: Manifest,
        ids: Sequence[str],
        splits: Sequence[str],
        class_labels,
        is_ood,
        features,
        logits=None,
        projected=None,
        *,
        validate: bool = True,
    ):
        self.manifest = manifest
        self.ids = tuple(str(i) for i in ids)
        self.splits = _frozen(list(splits), dtype=object)
        self.class_labels = _frozen(class_labels, dtype=np.int64).reshape(-1)
        self.is_ood = _frozen(is_ood, dtype=bool).reshape(-1)
        self.features = _frozen(features).reshape(len(self.ids), manifest.d)
        self.logits = None if logits is None else _rows(logits, len(self.ids), manifest.n)
        self.projected = None if projected is None else _rows(projected, len(self.ids), manifest.m)
        if validate:
            validate_table(self)

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureTable):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.array_equal(a, b))

        return (
            self.manifest == other.manifest
            and self.ids == other.ids
            and list(self.splits) == list(other.splits)
            and same(self.class_labels, other.class_labels)
            and same(self.is_ood, other.is_ood)
            and same(self.features, other.features)
            and same(self.logits, other.logits)
            and same(self.projected, other.projected)
        )

    __hash__ = None

    @property
    def has_logits(self) -> bool:
        return self.logits is not None

    @property
    def has_projected(self) -> bool:
        return self.projected is not None

    @property
    def records(self) -> list[FeatureRecord]:
        out = []
        for i, rid in enumerate(self.ids):
            out.append(
                FeatureRecord(
                    id=rid,
                    split=self.splits[i],
                    class_label=int(self.class_labels[i]),
                    is_ood=bool(self.is_ood[i]),
                    features=tuple(float(v) for v in self.features[i]),
                    logits=None if self.logits is None else tuple(float(v) for v in self.logits[i]),
                    projected=None
                    if self.projected is None
                    else tuple(float(v) for v in self.projected[i]),
                )
            )
        return out

    @classmethod
    def from_records(cls, manifest: Manifest, records: Iterable[FeatureRecord]) -> "FeatureTable":
        records = list(records)
        has_l = [r.logits is not None for r in records]
        has_p = [r.projected is not None for r in records]
        if any(has_l) and not all(has_l):
            raise TableValidationError("logits must be present for all records or none")
        if any(has_p) and not all(has_p):
            raise TableValidationError("projected features must be present for all records or none")
        for r in records:
            _check_lengths(manifest, r.id, len(r.features), r.logits, r.projected)
        return cls(
            manifest,
            [r.id for r in records],
            [r.split for r in records],
            [r.class_label for r in records],
            [r.is_ood for r in records],
            np.array([r.features for r in records], dtype=np.float64).reshape(len(records), manifest.d),
            logits=np.array([r.logits for r in records], dtype=np.float64).reshape(len(records), manifest.n)
            if records and all(has_l)
            else None,
            projected=np.array([r.projected for r in records], dtype=np.float64).reshape(
                len(records), manifest.m
            )
            if records and all(has_p)
            else None,
        )

    def take(self, mask) -> "FeatureTable":
        """Rows selected by a boolean mask or index array, order preserved."""
        idx = np.arange(len(self))[np.asarray(mask)]
        return FeatureTable(
            self.manifest,
            [self.ids[i] for i in idx],
            self.splits[idx],
            self.class_labels[idx],
            self.is_ood[idx],
            self.features[idx],
            logits=None if self.logits is None else self.logits[idx],
            projected=None if self.projected is None else self.projected[idx],
            validate=False,
        )

    def with_columns(self, *, logits=None, projected=None) -> "FeatureTable":
        """Copy with logits and/or projected columns replaced (manifest m updated)."""
        manifest = self.manifest
        if projected is not None:
            projected = np.asarray(projected, dtype=np.float64)
            manifest = Manifest(manifest.n, manifest.d, projected.shape[1], manifest.class_names)
        return FeatureTable(
            manifest,
            self.ids,
            self.splits,
            self.class_labels,
            self.is_ood,
            self.features,
            logits=self.logits if logits is None else logits,
            projected=self.projected if projected is None else projected,
        )


def _check_lengths(manifest, rid, n_feat, logits, projected):
    if n_feat != manifest.d:
        raise TableValidationError(f"expected {manifest.d} features, got {n_feat}", rid)
    if logits is not None and len(logits) != manifest.n:
        raise TableValidationError(f"expected {manifest.n} logits, got {len(logits)}", rid)
    if projected is not None and len(projected) != manifest.m:
        raise TableValidationError(f"expected {manifest.m} projected values, got {len(projected)}", rid)


def validate_table(table: FeatureTable) -> None:
    """Raise :class:`TableValidationError` on the first broken invariant."""
    man = table.manifest
    n_rec = len(table.ids)
    for name, col in (("splits", table.splits), ("class_labels", table.class_labels), ("is_ood", table.is_ood)):
        if len(col) != n_rec:
            raise TableValidationError(f"column {name} has {len(col)} rows, expected {n_rec}")
    if table.logits is not None and table.logits.shape[1] != man.n:
        raise TableValidationError(f"logits have width {table.logits.shape[1]}, expected n={man.n}")
    if table.projected is not None and table.projected.shape[1] != man.m:
        raise TableValidationError(
            f"projected features have width {table.projected.shape[1]}, expected m={man.m}"
        )
    if (table.projected is None) != (man.m == 0):
        raise TableValidationError("projected column must be present exactly when m > 0")

    seen = set()
    for i, rid in enumerate(table.ids):
        if rid in seen:
            raise TableValidationError("duplicate id", rid)
        seen.add(rid)
        split = table.splits[i]
        label = int(table.class_labels[i])
        ood = bool(table.is_ood[i])
        if split not in SPLITS:
            raise TableValidationError(f"unknown split {split!r}", rid)
        if not (label == OOD_LABEL or 0 <= label < man.n):
            raise TableValidationError(f"class_label {label} outside [0, {man.n}) and not {OOD_LABEL}", rid)
        if ood != (label == OOD_LABEL):
            raise TableValidationError(f"is_ood={int(ood)} inconsistent with class_label {label}", rid)
        if ood and split == "train":
            raise TableValidationError("OOD record in the train split", rid)
        for col, name in ((table.features, "features"), (table.logits, "logits"), (table.projected, "projected")):
            if col is not None and not np.all(np.isfinite(col[i])):
                raise TableValidationError(f"non-finite value in {name}", rid)

    id_mask = ~table.is_ood
    for split in SPLITS:
        in_split = id_mask & (table.splits == split)
        if not in_split.any():
            continue
        present = set(table.class_labels[in_split].tolist())
        missing = [c for c in range(man.n) if c not in present]
        if missing:
            names = ", ".join(f"{c} ({man.class_names[c]})" for c in missing)
            raise TableValidationError(f"split {split!r} has no records of class {names}")


def filter_split(table: FeatureTable, split: str | None, which: str | None = None) -> FeatureTable:
    """Select records of ``split`` (``None`` keeps every split).

    ``which`` restricts to ``"id"`` or ``"ood"`` records. The manifest is
    unchanged and an empty result is legal.
    """
    if split is not None and split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    mask = np.ones(len(table), dtype=bool)
    if split is not None:
        mask &= table.splits == split
    if which == "id":
        mask &= ~table.is_ood
    elif which == "ood":
        mask &= table.is_ood
    elif which is not None:
        raise ValueError(f"which must be 'id', 'ood' or None, got {which!r}")
    return table.take(mask)


# -- file format ----------------------------------------------------------


def manifest_path_for(path) -> Path:
    """Map an output prefix or a manifest path to the manifest path."""
    path = Path(path)
    if path.name.endswith(_MANIFEST_SUFFIX):
        return path
    return path.with_name(path.name + _MANIFEST_SUFFIX)


def _prefix_of(manifest_path: Path) -> str:
    return manifest_path.name[: -len(_MANIFEST_SUFFIX)]


def fmt_float(x: float) -> str:
    return repr(float(x))


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _header(man: Manifest, has_logits: bool) -> list[str]:
    cols = list(_FIXED_COLUMNS) + [f"f{j}" for j in range(man.d)]
    if has_logits:
        cols += [f"l{j}" for j in range(man.n)]
    cols += [f"p{j}" for j in range(man.m)]
    return cols


def save_feature_table(table: FeatureTable, path) -> Path:
    """Write ``table`` as ``<prefix>.manifest.json`` + ``<prefix>.csv``.

    ``path`` may be the manifest path or the bare prefix. Returns the
    manifest path.
    """
    mpath = manifest_path_for(path)
    data_name = _prefix_of(mpath) + ".csv"
    man = table.manifest

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_header(man, table.has_logits))
    for i, rid in enumerate(table.ids):
        row = [rid, table.splits[i], str(int(table.class_labels[i])), "1" if table.is_ood[i] else "0"]
        row += [fmt_float(v) for v in table.features[i]]
        if table.logits is not None:
            row += [fmt_float(v) for v in table.logits[i]]
        if table.projected is not None:
            row += [fmt_float(v) for v in table.projected[i]]
        writer.writerow(row)

    manifest = {
        "n": man.n,
        "d": man.d,
        "m": man.m,
        "class_names": list(man.class_names),
        "data_file": data_name,
    }
    atomic_write_text(mpath.parent / data_name, buf.getvalue())
    atomic_write_text(mpath, dump_json(manifest))
    return mpath


def _read_manifest(mpath: Path) -> tuple[Manifest, Path]:
    try:
        raw = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TableFormatError(f"{mpath}: invalid JSON ({exc.msg})", exc.lineno) from exc
    if not isinstance(raw, dict):
        raise TableFormatError(f"{mpath}: manifest must be a JSON object")
    missing = [k for k in ("n", "d", "m", "class_names", "data_file") if k not in raw]
    if missing:
        raise TableFormatError(f"{mpath}: manifest missing keys {missing}")
    for key in ("n", "d", "m"):
        if not isinstance(raw[key], int) or isinstance(raw[key], bool):
            raise TableFormatError(f"{mpath}: manifest key {key!r} must be an integer")
    man = Manifest(raw["n"], raw["d"], raw["m"], tuple(str(c) for c in raw["class_names"]))
    return man, mpath.parent / raw["data_file"]


def _parse_float(tok: str, line: int, col: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise TableFormatError(f"column {col}: not a number: {tok!r}", line) from None


def load_feature_table(path) -> FeatureTable:
    """Load and validate a table from its manifest path (or prefix)."""
    mpath = manifest_path_for(path)
    man, data_path = _read_manifest(mpath)
    with open(data_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TableFormatError(f"{data_path}: missing header", 1)

    header = rows[0]
    with_logits = _header(man, True)
    without_logits = _header(man, False)
    if header == with_logits:
        has_logits = True
    elif header == without_logits:
        has_logits = False
    else:
        raise TableFormatError(
            f"{data_path}: header does not match manifest (n={man.n}, d={man.d}, m={man.m}); "
            f"expected columns {','.join(without_logits[:6])}...",
            1,
        )
    width = len(header)
    d, n, m = man.d, man.n, man.m

    ids, splits, labels, oods = [], [], [], []
    feats, logits, proj = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        rid = row[0]
        if len(row) != width:
            raise TableValidationError(
                f"line {lineno}: dimension mismatch, {len(row)} columns but header has {width}", rid
            )
        try:
            label = int(row[2])
        except ValueError:
            raise TableFormatError(f"class_label not an integer: {row[2]!r}", lineno) from None
        if row[3] not in ("0", "1"):
            raise TableFormatError(f"is_ood must be 0 or 1, got {row[3]!r}", lineno)
        vals = [_parse_float(tok, lineno, header[4 + j]) for j, tok in enumerate(row[4:])]
        ids.append(rid)
        splits.append(row[1])
        labels.append(label)
        oods.append(row[3] == "1")
        feats.append(vals[:d])
        if has_logits:
            logits.append(vals[d : d + n])
        if m:
            proj.append(vals[width - 4 - m :])

    count = len(ids)
    return FeatureTable(
        man,
        ids,
        splits,
        labels,
        oods,
        np.array(feats, dtype=np.float64).reshape(count, d),
        logits=np.array(logits, dtype=np.float64).reshape(count, n) if has_logits else None,
        projected=np.array(proj, dtype=np.float64).reshape(count, m) if m else None,
    )

