"""Dataset ingestion, feature hashing, splits, batching and synthetic data."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "FieldSpec",
    "Schema",
    "Dataset",
    "DataError",
    "fnv1a_64",
    "hash_bucket",
    "load_dataset",
    "write_dataset",
    "split",
    "split_digest",
    "iter_batches",
    "SynthData",
    "synth_group_data",
    "pooled_vs_group_auc",
]

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
OOV_VALUES = frozenset({"", "NA", "NaN", "nan", "null", "None"})


class DataError(ValueError):
    pass


def fnv1a_64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def hash_bucket(value: str, buckets: int) -> int:
    """Row index in a table of ``buckets + 1`` rows; row 0 is out-of-vocabulary."""
    if value in OOV_VALUES:
        return 0
    return 1 + fnv1a_64(value) % buckets


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str  # categorical | dense | label
    hash_buckets: int = 0

    def __post_init__(self):
        if self.kind not in ("categorical", "dense", "label"):
            raise ValueError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and self.hash_buckets < 1:
            raise ValueError(f"field {self.name!r}: categorical fields need hash_buckets >= 1")


@dataclass(frozen=True)
class Schema:
    fields: tuple[FieldSpec, ...]

    def __post_init__(self):
        labels = [f for f in self.fields if f.kind == "label"]
        if len(labels) != 1:
            raise ValueError(f"schema needs exactly one label field, found {len(labels)}")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError("schema field names must be unique")

    @property
    def categorical(self) -> list[FieldSpec]:
        return [f for f in self.fields if f.kind == "categorical"]

    @property
    def dense(self) -> list[FieldSpec]:
        return [f for f in self.fields if f.kind == "dense"]

    @property
    def label(self) -> FieldSpec:
        return next(f for f in self.fields if f.kind == "label")

    def cat_index(self, name: str) -> int:
        for i, f in enumerate(self.categorical):
            if f.name == name:
                return i
        raise KeyError(f"no categorical field named {name!r}")

    def to_dict(self) -> list[dict]:
        return [{"name": f.name, "kind": f.kind, "hash_buckets": f.hash_buckets} for f in self.fields]

    @classmethod
    def from_dict(cls, items: Sequence[dict]) -> "Schema":
        return cls(tuple(FieldSpec(d["name"], d["kind"], int(d.get("hash_buckets", 0))) for d in items))


@dataclass
class Dataset:
    schema: Schema
    cat: np.ndarray  # (n, n_cat) int64 bucket rows
    dense: np.ndarray  # (n, n_dense) float64
    label: np.ndarray  # (n,) float64 in {0, 1}
    raw: dict[str, np.ndarray] = field(default_factory=dict)  # raw categorical strings

    def __len__(self) -> int:
        return len(self.label)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.schema, self.cat[idx], self.dense[idx], self.label[idx],
                       {k: v[idx] for k, v in self.raw.items()})


def load_dataset(path: str | Path, schema: Schema, delimiter: str = ",", max_bad_frac: float = 0.01) -> Dataset:
    """Read delimited text with a header row naming the schema's fields."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    cats = schema.categorical
    dens = schema.dense
    lab = schema.label
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise DataError(f"empty dataset: {path}")
        header = [h.strip() for h in header]
        missing = [f.name for f in schema.fields if f.name not in header]
        if missing:
            raise DataError(f"{path}: header lacks schema fields {missing}")
        col = {name: i for i, name in enumerate(header)}
        cat_rows, raw_rows, dense_rows, labels = [], [], [], []
        bad = 0
        total = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            total += 1
            if len(row) != len(header):
                bad += 1
                log.warning("%s:%d: expected %d columns, got %d", path, lineno, len(header), len(row))
                continue
            try:
                y = float(row[col[lab.name]])
                if y not in (0.0, 1.0):
                    raise ValueError(f"label {y} not in {{0, 1}}")
                dv = [float(row[col[f.name]]) for f in dens]
            except ValueError as exc:
                bad += 1
                log.warning("%s:%d: %s", path, lineno, exc)
                continue
            rv = [row[col[f.name]].strip() for f in cats]
            raw_rows.append(rv)
            cat_rows.append([hash_bucket(v, f.hash_buckets) for v, f in zip(rv, cats)])
            dense_rows.append(dv)
            labels.append(y)
    if total == 0:
        raise DataError(f"empty dataset: {path}")
    if bad > max_bad_frac * total:
        raise DataError(f"{path}: {bad} of {total} rows malformed (limit {max_bad_frac:.0%})")
    if bad:
        log.warning("%s: skipped %d malformed rows", path, bad)
    n = len(labels)
    cat = np.asarray(cat_rows, dtype=np.int64).reshape(n, len(cats))
    raw_arr = np.asarray(raw_rows, dtype=object).reshape(n, len(cats))
    return Dataset(
        schema,
        cat,
        np.asarray(dense_rows, dtype=np.float64).reshape(n, len(dens)),
        np.asarray(labels, dtype=np.float64),
        {f.name: raw_arr[:, i] for i, f in enumerate(cats)},
    )


def write_dataset(ds: Dataset, path: str | Path, delimiter: str = ",") -> None:
    cats = ds.schema.categorical
    dens = ds.schema.dense
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow([f.name for f in ds.schema.fields])
        ci = {f.name: i for i, f in enumerate(cats)}
        di = {f.name: i for i, f in enumerate(dens)}
        for r in range(len(ds)):
            row = []
            for f in ds.schema.fields:
                if f.kind == "categorical":
                    row.append(ds.raw[f.name][r] if f.name in ds.raw else str(ds.cat[r, ci[f.name]]))
                elif f.kind == "dense":
                    row.append(repr(float(ds.dense[r, di[f.name]])))
                else:
                    row.append(str(int(ds.label[r])))
            w.writerow(row)


def split(ds: Dataset, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle and cut into train/val/test; val and test sizes are floored,
    the remainder goes to train."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(ds)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    tr, va, te = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    return ds.subset(tr), ds.subset(va), ds.subset(te)


def split_digest(*parts: Dataset) -> str:
    """Short content hash identifying a split (logged by sweeps)."""
    h = hashlib.sha256()
    for part in parts:
        h.update(np.ascontiguousarray(part.cat).tobytes())
        h.update(np.ascontiguousarray(part.dense).tobytes())
        h.update(np.ascontiguousarray(part.label).tobytes())
    return h.hexdigest()[:16]


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# -- synthetic heterogeneous CTR data --------------------------------------------

@dataclass
class SynthData:
    dataset: Dataset
    teachers: np.ndarray  # (n_groups, feat_dim)
    group: np.ndarray  # (n,) group index per row
    similar_pairs: tuple[tuple[int, int], ...]

    def group_key(self, g: int) -> str:
        return f"g{g}"


def synth_group_data(
    n_groups: int = 10,
    n_per_group: int = 5000,
    feat_dim: int = 16,
    seed: int = 0,
    similar_pairs: Sequence[tuple[int, int]] = ((0, 1),),
    teacher_scale: float = 3.0,
    similar_noise: float = 0.1,
    hash_buckets: int = 1000,
) -> SynthData:
    """Groups with their own logistic teachers.

    ``x ~ N(0, I)``, ``y ~ Bernoulli(sigmoid(w_g . x))`` with ``w_g`` drawn
    uniformly on the sphere of radius ``teacher_scale``.  For each pair
    ``(a, b)`` in ``similar_pairs`` the second teacher is the first plus
    relative noise of size ``similar_noise``.
    """
    if n_groups < 2:
        raise ValueError("synthetic data needs n_groups >= 2")
    if n_per_group < 1 or feat_dim < 1:
        raise ValueError("n_per_group and feat_dim must be positive")
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(n_groups, feat_dim))
    t *= teacher_scale / np.linalg.norm(t, axis=1, keepdims=True)
    for a, b in similar_pairs:
        if not (0 <= a < n_groups and 0 <= b < n_groups) or a == b:
            raise ValueError(f"bad similar pair {(a, b)}")
        noise = rng.normal(size=feat_dim)
        noise *= similar_noise * teacher_scale / np.linalg.norm(noise)
        t[b] = t[a] + noise
    group = np.repeat(np.arange(n_groups), n_per_group)
    group = group[rng.permutation(len(group))]
    x = rng.normal(size=(len(group), feat_dim))
    logits = np.einsum("nd,nd->n", x, t[group])
    y = (rng.random(len(group)) < 1.0 / (1.0 + np.exp(-logits))).astype(np.float64)
    schema = Schema(
        (FieldSpec("group", "categorical", hash_buckets),)
        + tuple(FieldSpec(f"f{i}", "dense") for i in range(feat_dim))
        + (FieldSpec("label", "label"),)
    )
    keys = np.array([f"g{g}" for g in range(n_groups)], dtype=object)
    rows = np.array([hash_bucket(k, hash_buckets) for k in keys], dtype=np.int64)
    if len(set(rows.tolist())) != n_groups:
        raise DataError(f"group keys collide in {hash_buckets} hash buckets; raise hash_buckets")
    ds = Dataset(schema, rows[group][:, None], x, y, {"group": keys[group]})
    return SynthData(ds, t, group, tuple(tuple(p) for p in similar_pairs))


def pooled_vs_group_auc(data: SynthData, holdout: float = 0.2, seed: int = 0) -> tuple[float, float]:
    """Held-out AUC of one pooled least-squares linear scorer vs. each row scored
    by its own group's teacher."""
    from .metrics import auc

    n = len(data.group)
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = max(1, int(holdout * n))
    hold, fit = perm[:n_hold], perm[n_hold:]
    x = data.dataset.dense
    y = data.dataset.label
    xf = np.hstack([x[fit], np.ones((len(fit), 1))])
    w, *_ = np.linalg.lstsq(xf, y[fit], rcond=None)
    pooled = np.hstack([x[hold], np.ones((n_hold, 1))]) @ w
    own = np.einsum("nd,nd->n", x[hold], data.teachers[data.group[hold]])
    return auc(pooled, y[hold]), auc(own, y[hold])
