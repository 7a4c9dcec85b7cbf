"""AUC, log-loss, per-group evaluation and export of generated S_i."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .layers import Version
from .linalg import pca2d

__all__ = [
    "auc",
    "logloss",
    "EvalResult",
    "evaluate",
    "frequency_deciles",
    "group_conditions",
    "specific_params",
    "export_specific_params",
    "write_specific_params",
]


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties share the mean of the ranks they span."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly,
    ties worth one half.  O(n log n) via rank sums."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined for single-class input")
    ranks = _average_ranks(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss(p, y) -> float:
    from .model import bce_loss

    return float(np.mean(bce_loss(p, y)))


@dataclass
class EvalResult:
    auc: float | None
    logloss: float
    n_pos: int
    n_neg: int
    groups: dict[str, "EvalResult"] = field(default_factory=dict)
    single_class: bool = False

    @classmethod
    def of(cls, p: np.ndarray, y: np.ndarray) -> "EvalResult":
        n_pos = int((y == 1).sum())
        n_neg = len(y) - n_pos
        single = n_pos == 0 or n_neg == 0
        return cls(None if single else auc(p, y), logloss(p, y), n_pos, n_neg, single_class=single)

    def rows(self) -> list[dict]:
        out = [{"group": "__all__", "n": self.n_pos + self.n_neg, "n_pos": self.n_pos,
                "auc": self.auc, "logloss": self.logloss}]
        for key in sorted(self.groups):
            g = self.groups[key]
            out.append({"group": key, "n": g.n_pos + g.n_neg, "n_pos": g.n_pos, "auc": g.auc, "logloss": g.logloss})
        return out


def evaluate(model, ds, group_by: str | None = None, groups: np.ndarray | None = None) -> EvalResult:
    """Global metrics and, optionally, a breakdown by a categorical field
    (raw value when available) or by an explicit per-row group array."""
    from .model import predict

    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    p = predict(model, ds)
    result = EvalResult.of(p, ds.label)
    if group_by is not None and groups is None:
        if group_by in ds.raw:
            groups = ds.raw[group_by]
        else:
            groups = ds.cat[:, ds.schema.cat_index(group_by)]
    if groups is not None:
        groups = np.asarray(groups)
        for key in np.unique(groups):
            sel = groups == key
            result.groups[str(key)] = EvalResult.of(p[sel], ds.label[sel])
    return result


def frequency_deciles(keys: Sequence, n_bins: int = 10) -> np.ndarray:
    """Bin index per row: keys ranked by instance count (rarest first),
    then split into ``n_bins`` bins with equal numbers of keys."""
    keys = np.asarray(keys)
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    order = np.argsort(counts, kind="mergesort")
    bin_of_key = np.empty(len(uniq), dtype=np.int64)
    bin_of_key[order] = (np.arange(len(uniq)) * n_bins) // len(uniq)
    return bin_of_key[inverse]


def group_conditions(model, ds, field: str, layer: int = 0) -> list[tuple[str, np.ndarray]]:
    """One ``(key, z)`` per distinct value of ``field``: the mean condition
    vector that ``layer`` sees over that key's rows.  For group-wise models
    keyed by their own field this is exactly the key's embedding."""
    z = model.layer_conditions(ds.cat, ds.dense, layer)
    keys = ds.raw[field] if field in ds.raw else ds.cat[:, ds.schema.cat_index(field)]
    out = []
    for key in sorted(set(keys.tolist()), key=str):
        zk = z[keys == key]
        # identical rows are returned as-is; a mean would perturb the last bit
        out.append((str(key), zk[0].copy() if np.all(zk == zk[0]) else zk.mean(axis=0)))
    return out


def specific_params(model, conditions: Sequence[tuple[str, np.ndarray]], layer: int = 0) -> np.ndarray:
    """Flattened ``S_i`` of one layer for each ``(key, z)`` pair."""
    version = model.config.version if hasattr(model, "config") else model.version
    if version not in (Version.V4, Version.V5):
        raise ValueError(f"version {Version.parse(version).value} has no specific parameters")
    lay = model.layers[layer] if hasattr(model, "layers") else model
    z = np.stack([np.asarray(zc, dtype=np.float64) for _, zc in conditions])
    g, _ = lay.generator.forward(z)
    return g


def export_specific_params(model, conditions: Sequence[tuple[str, np.ndarray]], layer: int = 0):
    """Return ``(keys, s_flat, pca)``; ``pca`` is the 2-D projection of the rows of ``s_flat``."""
    if len(conditions) < 3:
        raise ValueError(f"need at least 3 conditions for a 2-D projection, got {len(conditions)}")
    s = specific_params(model, conditions, layer)
    keys = [k for k, _ in conditions]
    if not np.any(np.abs(s - s[0]) > 0):
        proj = np.zeros((len(s), 2))
    else:
        proj = pca2d(s)
    return keys, s, proj


def write_specific_params(path: str | Path, keys, s: np.ndarray, proj: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", *[f"s{i}" for i in range(s.shape[1])], "pc1", "pc2"])
        for key, row, pc in zip(keys, s, proj):
            w.writerow([key, *[repr(float(v)) for v in row], repr(float(pc[0])), repr(float(pc[1]))])
