"""Condition vectors for parameter generation.

Three strategies pick what drives the generator:

* group-wise: the embedding of one categorical field (e.g. the user id);
* mix-wise: several field embeddings combined, either before generation
  (input aggregation) or by combining the parameters each one generates
  (output aggregation);
* self-wise: the layer's own input.

Batched helpers take stacked conditions ``C`` of shape ``(B, c, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import ShapeError

__all__ = [
    "ConditionStrategy",
    "AttentionAgg",
    "condition_groupwise",
    "condition_selfwise",
    "aggregate_input",
    "aggregate_output",
    "attention_weights",
    "input_agg_forward",
    "input_agg_backward",
    "output_agg_forward",
    "output_agg_backward",
]

AGGS = ("mean", "concat", "attention")
POLICIES = ("input", "output")


@dataclass(frozen=True)
class ConditionStrategy:
    kind: str  # "self" | "group" | "mix"
    fields: tuple[str, ...] = ()
    policy: str = "input"
    agg: str = "attention"

    def __post_init__(self):
        if self.kind not in ("self", "group", "mix"):
            raise ValueError(f"unknown condition kind {self.kind!r}")
        if self.kind == "self" and self.fields:
            raise ValueError("self-wise condition takes no fields")
        if self.kind == "group" and len(self.fields) != 1:
            raise ValueError("group-wise condition needs exactly one field")
        if self.kind == "mix":
            if len(self.fields) < 2:
                raise ValueError("mix-wise condition needs at least 2 fields")
            if self.policy not in POLICIES:
                raise ValueError(f"unknown aggregation policy {self.policy!r}")
            if self.agg not in AGGS:
                raise ValueError(f"unknown aggregation {self.agg!r}")
            if self.agg == "concat" and self.policy == "output":
                raise ValueError("concat is only defined for input aggregation")

    @classmethod
    def parse(cls, text: str) -> "ConditionStrategy":
        """Parse ``self``, ``group:user_id`` or
        ``mix:user_id,item_id;policy=input;agg=attention``."""
        text = text.strip()
        if text == "self":
            return cls("self")
        head, _, rest = text.partition(":")
        if head == "group":
            return cls("group", (rest.strip(),) if rest.strip() else ())
        if head == "mix":
            parts = [s.strip() for s in rest.split(";")]
            fields = tuple(f.strip() for f in parts[0].split(",") if f.strip())
            opts = {"policy": "input", "agg": "attention"}
            for part in parts[1:]:
                if not part:
                    continue
                key, eq, val = part.partition("=")
                if not eq or key.strip() not in opts:
                    raise ValueError(f"bad mix-wise option {part!r}")
                opts[key.strip()] = val.strip()
            return cls("mix", fields, opts["policy"], opts["agg"])
        raise ValueError(f"cannot parse condition {text!r}")

    def __str__(self) -> str:
        if self.kind == "self":
            return "self"
        if self.kind == "group":
            return f"group:{self.fields[0]}"
        return f"mix:{','.join(self.fields)};policy={self.policy};agg={self.agg}"

    @property
    def n_generators(self) -> int:
        if self.kind == "mix" and self.policy == "output":
            return len(self.fields)
        return 1

    def condition_dim(self, emb_dim: int, layer_in: int) -> int:
        """Generator input size for a layer whose input has ``layer_in`` dims."""
        if self.kind == "self":
            return layer_in
        if self.kind == "mix" and self.policy == "input" and self.agg == "concat":
            return len(self.fields) * emb_dim
        return emb_dim

    @property
    def uses_attention(self) -> bool:
        return self.kind == "mix" and self.agg == "attention"


@dataclass
class AttentionAgg:
    """Single learned query scored against each condition, scaled dot product."""

    query: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.float64)
        self.dim = self.query.shape[0]

    def weights(self, conds: Sequence[np.ndarray]) -> np.ndarray:
        c = np.asarray(conds, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != self.dim:
            raise ShapeError("attention", c.shape, (self.dim,))
        return attention_weights(c[None], self.query)[0]


def condition_groupwise(embedding_of_group) -> np.ndarray:
    return np.array(embedding_of_group, dtype=np.float64)


def condition_selfwise(layer_input) -> np.ndarray:
    return np.asarray(layer_input, dtype=np.float64)


def attention_weights(conds: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Softmax over ``query . cond_j / sqrt(d)``; ``conds`` is ``(B, c, d)``."""
    d = conds.shape[-1]
    if query.shape != (d,):
        raise ShapeError("attention query", query.shape, (d,))
    scores = conds @ query / math.sqrt(d)
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=1, keepdims=True)


def _stack(conds) -> np.ndarray:
    if len(conds) == 0:
        raise ValueError("aggregation needs at least one condition")
    dims = {np.shape(c) for c in conds}
    if len(dims) != 1:
        raise ShapeError("aggregate", *sorted(dims))
    return np.asarray(conds, dtype=np.float64)


def input_agg_forward(conds: np.ndarray, agg: str, query: np.ndarray | None = None):
    """Aggregate ``(B, c, d)`` conditions into ``z``.  Returns ``(z, alpha)``."""
    b, c, d = conds.shape
    if agg == "mean":
        return conds.mean(axis=1), None
    if agg == "concat":
        return conds.reshape(b, c * d), None
    if agg == "attention":
        if query is None:
            raise ValueError("attention aggregation needs a query")
        alpha = attention_weights(conds, query)
        return np.einsum("bc,bcd->bd", alpha, conds), alpha
    raise ValueError(f"unknown aggregation {agg!r}")


def _softmax_backward(alpha: np.ndarray, dalpha: np.ndarray) -> np.ndarray:
    return alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))


def _attention_backward(conds, query, alpha, dalpha):
    d = conds.shape[-1]
    dscore = _softmax_backward(alpha, dalpha) / math.sqrt(d)
    dconds = dscore[:, :, None] * query[None, None, :]
    dquery = np.einsum("bc,bcd->d", dscore, conds)
    return dconds, dquery


def input_agg_backward(conds, agg, query, alpha, dz):
    """Gradients of input aggregation: ``(dconds, dquery)``."""
    b, c, d = conds.shape
    if agg == "mean":
        return np.repeat(dz[:, None, :] / c, c, axis=1), None
    if agg == "concat":
        return dz.reshape(b, c, d), None
    dalpha = np.einsum("bd,bcd->bc", dz, conds)
    dconds, dquery = _attention_backward(conds, query, alpha, dalpha)
    dconds = dconds + alpha[:, :, None] * dz[:, None, :]
    return dconds, dquery


def output_agg_forward(gens: np.ndarray, agg: str, conds=None, query=None):
    """Combine per-condition generated vectors ``(B, c, P)``.  Returns ``(g, alpha)``."""
    if agg == "mean":
        return gens.mean(axis=1), None
    if agg == "attention":
        if conds is None or query is None:
            raise ValueError("attention output aggregation needs conditions and a query")
        alpha = attention_weights(conds, query)
        return np.einsum("bc,bcp->bp", alpha, gens), alpha
    raise ValueError(f"output aggregation does not support {agg!r}")


def output_agg_backward(gens, agg, conds, query, alpha, dg):
    """Gradients of output aggregation: ``(dgens, dconds, dquery)``."""
    c = gens.shape[1]
    if agg == "mean":
        return np.repeat(dg[:, None, :] / c, c, axis=1), None, None
    dgens = alpha[:, :, None] * dg[:, None, :]
    dalpha = np.einsum("bp,bcp->bc", dg, gens)
    dconds, dquery = _attention_backward(conds, query, alpha, dalpha)
    return dgens, dconds, dquery


def aggregate_input(conds: Sequence[np.ndarray], agg: str, att: AttentionAgg | None = None) -> np.ndarray:
    c = _stack(conds)
    if c.ndim != 2:
        raise ShapeError("aggregate_input", c.shape, detail="conditions must be vectors")
    z, _ = input_agg_forward(c[None], agg, None if att is None else att.query)
    return z[0]


def aggregate_output(
    params: Sequence[np.ndarray],
    agg: str,
    att: AttentionAgg | None = None,
    conds: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    p = _stack(params)
    if agg == "concat":
        raise ValueError("concat output aggregation has no K x K result")
    shape = p.shape[1:]
    flat = p.reshape(1, p.shape[0], -1)
    c = None
    if agg == "attention":
        if att is None or conds is None:
            raise ValueError("attention output aggregation needs a query and the source conditions")
        c = _stack(conds)
        if c.shape[0] != p.shape[0]:
            raise ShapeError("aggregate_output", c.shape, p.shape, detail="one condition per matrix")
        c = c[None]
    g, _ = output_agg_forward(flat, agg, c, None if att is None else att.query)
    return g[0].reshape(shape)
