"""End-to-end CTR model: embeddings, a stack of adaptive layers, sigmoid head."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np

from . import conditioning as cond
from .conditioning import ConditionStrategy
from .data import Dataset, Schema, hash_bucket, iter_batches
from .layers import (
    ApgLayer,
    Version,
    apply_generated,
    backward_generated,
    collapse_overparam,
    make_layer,
)
from .linalg import ShapeError
from .optim import Adam

log = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "CtrModel",
    "TrainingDiverged",
    "TrainResult",
    "build_model",
    "embed_instance",
    "model_forward",
    "bce_loss",
    "predict",
    "train",
]

PROB_CLAMP = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    hidden_dims: tuple[int, ...] = (256, 128, 64)
    version: Version = Version.V4
    k: int = 4
    p: int = 32
    condition: ConditionStrategy = field(default_factory=lambda: ConditionStrategy("self"))
    emb_dim: int = 32
    gen_hidden: tuple[int, ...] = ()
    lr: float = 0.005
    batch_size: int = 1024
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        self.version = Version.parse(self.version)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.gen_hidden = tuple(int(h) for h in self.gen_hidden)
        if isinstance(self.condition, str):
            self.condition = ConditionStrategy.parse(self.condition)

    def validate(self, input_dim: int | None = None) -> None:
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError(f"hidden_dims must be non-empty positive sizes, got {self.hidden_dims}")
        if self.version in (Version.V2, Version.V3, Version.V4, Version.V5):
            limit = min(self.hidden_dims) if input_dim is None else min(min(self.hidden_dims), input_dim)
            if not 1 <= self.k <= limit:
                raise ValueError(f"k={self.k} violates 1 <= k <= min(layer dims) = {limit}")
        if self.version is Version.V5 and self.p <= self.k:
            raise ValueError(f"version v5 requires p > k (got p={self.p}, k={self.k})")
        for name in ("lr",):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.emb_dim < 1:
            raise ValueError("batch_size and emb_dim must be >= 1, epochs >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "hidden_dims": list(self.hidden_dims),
            "version": self.version.value,
            "k": self.k,
            "p": self.p,
            "condition": str(self.condition),
            "emb_dim": self.emb_dim,
            "gen_hidden": list(self.gen_hidden),
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        return cls(**dict(d))


@dataclass
class CtrModel:
    schema: Schema
    config: ModelConfig
    embeddings: dict[str, np.ndarray]
    layers: list[ApgLayer]
    head_w: np.ndarray
    head_b: np.ndarray
    query: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        return len(self.schema.categorical) * self.config.emb_dim + len(self.schema.dense)

    @property
    def condition(self) -> ConditionStrategy:
        return self.config.condition

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, table in self.embeddings.items():
            out[f"emb.{name}"] = table
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"layer{i}.{name}"] = arr
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        if self.query is not None:
            out["att.query"] = self.query
        return out

    def condition_dims(self) -> list[int]:
        """Generator input size per layer (0 for static layers)."""
        dims = []
        prev = self.input_dim
        for layer in self.layers:
            dims.append(self.condition.condition_dim(self.config.emb_dim, prev) if layer.version.generated else 0)
            prev = layer.n
        return dims

    # -- batched passes ---------------------------------------------------------

    def _inputs(self, cat: np.ndarray, dense: np.ndarray) -> np.ndarray:
        parts = [self.embeddings[f.name][cat[:, i]] for i, f in enumerate(self.schema.categorical)]
        parts.append(dense)
        return np.concatenate(parts, axis=1)

    def _conditions(self, cat: np.ndarray) -> np.ndarray:
        """Stacked condition embeddings ``(B, c, d)`` for group/mix strategies."""
        c = self.condition
        return np.stack(
            [self.embeddings[f][cat[:, self.schema.cat_index(f)]] for f in c.fields], axis=1
        )

    def layer_conditions(self, cat: np.ndarray, dense: np.ndarray, layer: int = 0) -> np.ndarray:
        """Condition vectors ``(B, D)`` fed to ``layer``'s generator."""
        strat = self.condition
        if not self.layers[layer].version.generated:
            raise ValueError("static layers have no condition")
        if strat.kind == "mix" and strat.policy == "output":
            raise ValueError("output aggregation has one condition per generator, not a single z")
        _, cache = self.forward_batch(cat, dense)
        if strat.kind == "self":
            return cache["layers"][layer]["cache"].x
        return cache["z_shared"]

    def forward_batch(self, cat: np.ndarray, dense: np.ndarray):
        """Return ``(probabilities, cache)`` for a batch."""
        strat = self.condition
        x = self._inputs(cat, dense)
        cache: dict[str, Any] = {"cat": cat, "layers": []}
        z_shared = None
        if strat.kind != "self" and any(l.version.generated for l in self.layers):
            conds = self._conditions(cat)
            cache["conds"] = conds
            if strat.kind == "group":
                z_shared = conds[:, 0, :]
            elif strat.policy == "input":
                z_shared, alpha = cond.input_agg_forward(conds, strat.agg, self.query)
                cache["in_alpha"] = alpha
        h = x
        outs = []
        for layer in self.layers:
            entry: dict[str, Any] = {}
            g = None
            if layer.version.generated:
                if strat.kind == "self":
                    g, acts = layer.generator.forward(h)
                    entry["acts"] = [acts]
                elif strat.kind == "mix" and strat.policy == "output":
                    gens, acts_list = [], []
                    for j, gen in enumerate(layer.generators):
                        gj, acts = gen.forward(cache["conds"][:, j, :])
                        gens.append(gj)
                        acts_list.append(acts)
                    stacked = np.stack(gens, axis=1)
                    g, alpha = cond.output_agg_forward(stacked, strat.agg, cache["conds"], self.query)
                    entry.update(acts=acts_list, gens=stacked, alpha=alpha)
                else:
                    g, acts = layer.generator.forward(z_shared)
                    entry["acts"] = [acts]
            h, lc = apply_generated(layer, g, h)
            entry["cache"] = lc
            cache["layers"].append(entry)
            outs.append(h)
        logit = h @ self.head_w + self.head_b[0]
        prob = 0.5 * (1.0 + np.tanh(0.5 * logit))
        cache.update(h_last=h, outs=outs, logit=logit, z_shared=z_shared)
        return prob, cache

    def backward_batch(self, cache: dict[str, Any], dlogit: np.ndarray) -> dict[str, np.ndarray]:
        strat = self.condition
        grads: dict[str, np.ndarray] = {name: None for name in self.params()}
        grads["head.w"] = cache["h_last"].T @ dlogit
        grads["head.b"] = np.array([dlogit.sum()])
        dh = dlogit[:, None] * self.head_w[None, :]
        conds = cache.get("conds")
        dz_shared = None if cache["z_shared"] is None else np.zeros_like(cache["z_shared"])
        dconds = None if conds is None else np.zeros_like(conds)
        dquery = None if self.query is None else np.zeros_like(self.query)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            entry = cache["layers"][i]
            shared, dg, dx = backward_generated(layer, entry["cache"], dh)
            for name, arr in shared.items():
                grads[f"layer{i}.{name}"] = arr
            if not layer.version.generated:
                dh = dx
                continue
            if strat.kind == "self":
                gg, dz = layer.generator.backward(entry["acts"][0], dg)
                self._put_gen(grads, i, 0, gg)
                dh = dx + dz
            elif strat.kind == "mix" and strat.policy == "output":
                dgens, dc_att, dq = cond.output_agg_backward(
                    entry["gens"], strat.agg, conds, self.query, entry["alpha"], dg
                )
                for j, gen in enumerate(layer.generators):
                    gg, dc = gen.backward(entry["acts"][j], dgens[:, j, :])
                    self._put_gen(grads, i, j, gg)
                    dconds[:, j, :] += dc
                if dc_att is not None:
                    dconds += dc_att
                    dquery += dq
                dh = dx
            else:
                gg, dz = layer.generator.backward(entry["acts"][0], dg)
                self._put_gen(grads, i, 0, gg)
                dz_shared += dz
                dh = dx
        if dz_shared is not None:
            if strat.kind == "group":
                dconds[:, 0, :] += dz_shared
            else:
                dc, dq = cond.input_agg_backward(conds, strat.agg, self.query, cache["in_alpha"], dz_shared)
                dconds += dc
                if dq is not None:
                    dquery += dq
        # embedding gradients: input path plus condition path
        cat = cache["cat"]
        d = self.config.emb_dim
        for fi, f in enumerate(self.schema.categorical):
            table_grad = np.zeros_like(self.embeddings[f.name])
            np.add.at(table_grad, cat[:, fi], dh[:, fi * d:(fi + 1) * d])
            grads[f"emb.{f.name}"] = table_grad
        if dconds is not None:
            for j, fname in enumerate(strat.fields):
                np.add.at(grads[f"emb.{fname}"], cat[:, self.schema.cat_index(fname)], dconds[:, j, :])
        if dquery is not None:
            grads["att.query"] = dquery
        for name, arr in self.params().items():
            if grads[name] is None:
                grads[name] = np.zeros_like(arr)
        return grads

    @staticmethod
    def _put_gen(grads, i, j, gg):
        for name, arr in gg.items():
            grads[f"layer{i}.gen{j}.{name}"] = arr

    def loss_and_grads(self, cat, dense, label):
        prob, cache = self.forward_batch(cat, dense)
        loss = float(np.mean(bce_loss(prob, label)))
        if not np.isfinite(loss):
            raise TrainingDiverged(self._diagnose(cache))
        dlogit = (prob - label) / len(label)
        return loss, self.backward_batch(cache, dlogit)

    def _diagnose(self, cache) -> str:
        for i, out in enumerate(cache["outs"]):
            if not np.all(np.isfinite(out)):
                return f"non-finite loss: first non-finite activations in hidden layer {i} ({self.layers[i].version.value})"
        return "non-finite loss: hidden activations finite, head output diverged"

    def collapsed(self) -> "CtrModel":
        """Inference copy with every v5 layer folded into a v4 layer."""
        if self.config.version is not Version.V5:
            raise ValueError(f"only v5 models collapse, this one is {self.config.version.value}")
        out = copy.deepcopy(self)
        out.layers = [collapse_overparam(l) for l in self.layers]
        out.config = replace(self.config, version=Version.V4)
        return out


def build_model(schema: Schema, config: ModelConfig, out_of_core: str | None = None) -> CtrModel:
    config.validate()
    strat = config.condition
    for fname in strat.fields:
        schema.cat_index(fname)
    rng = np.random.default_rng(config.seed)
    embeddings = {
        f.name: rng.normal(0.0, 0.1, size=(f.hash_buckets + 1, config.emb_dim)) for f in schema.categorical
    }
    input_dim = len(schema.categorical) * config.emb_dim + len(schema.dense)
    config.validate(input_dim)
    layers = []
    prev = input_dim
    for li, n in enumerate(config.hidden_dims):
        d = strat.condition_dim(config.emb_dim, prev)
        layers.append(
            make_layer(
                config.version, n, prev, d=d, k=config.k, p=config.p, activation="relu", rng=rng,
                n_generators=strat.n_generators, gen_hidden=config.gen_hidden,
                out_of_core=None if out_of_core is None else f"{out_of_core}/layer{li}",
            )
        )
        prev = n
    limit = np.sqrt(6.0 / (prev + 1))
    head_w = rng.uniform(-limit, limit, size=prev)
    query = None
    if strat.uses_attention and config.version.generated:
        query = rng.normal(0.0, 0.1, size=config.emb_dim)
    return CtrModel(schema, config, embeddings, layers, head_w, np.zeros(1), query)


def bce_loss(p, y):
    """Binary cross-entropy with ``p`` clamped to ``[1e-12, 1 - 1e-12]``."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def _encode_instance(model: CtrModel, instance: Mapping[str, Any]):
    schema = model.schema
    known = {f.name for f in schema.fields}
    unknown = set(instance) - known
    if unknown:
        raise KeyError(f"unknown fields {sorted(unknown)}")
    cat = []
    for f in schema.categorical:
        v = instance.get(f.name, "")
        cat.append(int(v) if isinstance(v, (int, np.integer)) else hash_bucket(str(v), f.hash_buckets))
    dense = [float(instance.get(f.name, 0.0)) for f in schema.dense]
    return np.array([cat], dtype=np.int64).reshape(1, -1), np.array([dense], dtype=np.float64).reshape(1, -1)


def embed_instance(model: CtrModel, instance: Mapping[str, Any]) -> np.ndarray:
    """Concatenate field embeddings (schema order) and dense values.

    Categorical values given as ints are taken as table rows; strings are hashed.
    """
    cat, dense = _encode_instance(model, instance)
    return model._inputs(cat, dense)[0]


def model_forward(model: CtrModel, instance: Mapping[str, Any]) -> float:
    cat, dense = _encode_instance(model, instance)
    prob, _ = model.forward_batch(cat, dense)
    return float(prob[0])


def predict(model: CtrModel, ds: Dataset, batch_size: int = 4096) -> np.ndarray:
    out = np.empty(len(ds))
    for idx in iter_batches(len(ds), batch_size):
        out[idx], _ = model.forward_batch(ds.cat[idx], ds.dense[idx])
    return out


@dataclass
class TrainResult:
    model: CtrModel
    log: list[dict[str, float]]
    best_epoch: int
    best_val_auc: float


def train(model: CtrModel, train_ds: Dataset, val_ds: Dataset, config: ModelConfig | None = None,
          timing: bool = True) -> TrainResult:
    """Adam training; keeps the parameters of the best validation-AUC epoch."""
    from .metrics import auc

    config = config or model.config
    if len(train_ds) == 0:
        raise ValueError("training split is empty")
    if len(val_ds) == 0:
        raise ValueError("validation split is empty")
    params = model.params()
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    history = []
    best = (-1, -np.inf, {k: v.copy() for k, v in params.items()})
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for idx in iter_batches(len(train_ds), config.batch_size, rng):
            loss, grads = model.loss_and_grads(train_ds.cat[idx], train_ds.dense[idx], train_ds.label[idx])
            opt.step(params, grads)
            total += loss * len(idx)
        val_scores = predict(model, val_ds)
        try:
            val_auc = auc(val_scores, val_ds.label)
        except ValueError:
            val_auc = float("nan")
        row = {"epoch": epoch, "train_loss": total / len(train_ds), "val_auc": val_auc,
               "seconds": time.perf_counter() - t0 if timing else None}
        history.append(row)
        log.info("epoch %d loss %.5f val_auc %.5f", epoch, row["train_loss"], val_auc)
        if val_auc > best[1]:
            best = (epoch, val_auc, {k: v.copy() for k, v in params.items()})
    for name, arr in params.items():
        arr[...] = best[2][name]
    return TrainResult(model, history, best[0], best[1])
