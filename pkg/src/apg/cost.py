"""Exact per-layer cost accounting.

One MAC is one scalar multiply inside a matrix or vector product; adds,
biases, activations and reshapes are free.  Parameter counts follow the
same table: generator weights (SPG) plus stored shared factors (SPS).
Generator bias vectors are reported separately in ``params_extra``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import linalg
from .layers import ApgLayer, Version, forward, gen_out_dim

__all__ = [
    "LayerCost",
    "CostReport",
    "macs_per_layer",
    "params_per_layer",
    "instrument_forward",
    "layer_cost",
    "model_cost",
    "shape_cost",
    "write_cost_csv",
]


def _check(version: Version, n, m, k, d, p):
    if n < 1 or m < 1:
        raise ValueError(f"invalid dims n={n}, m={m}")
    if version.generated and d < 1:
        raise ValueError(f"invalid condition dim d={d}")
    if version in (Version.V2, Version.V3, Version.V4, Version.V5) and not 1 <= k <= min(n, m):
        raise ValueError(f"invalid rank k={k} for n={n}, m={m}")
    if version is Version.V5 and p <= k:
        raise ValueError(f"v5 needs p > k (p={p}, k={k})")


def _gen_weights(out_dim: int, d: int, hidden: Sequence[int]) -> int:
    dims = [d, *hidden, out_dim]
    return sum(a * b for a, b in zip(dims[:-1], dims[1:]))


def macs_per_layer(version, n: int, m: int, k: int = 0, d: int = 0, p: int = 0,
                   phase: str = "train", gen_hidden: Sequence[int] = (), n_generators: int = 1) -> dict[str, int]:
    """MAC breakdown per instance: generation, reconstruction, feedforward, total.

    ``phase="inference"`` prices a v5 layer after collapse (same as v4).
    """
    version = Version.parse(version)
    _check(version, n, m, k, d, p)
    if version is Version.V5 and phase == "inference":
        version = Version.V4
    gen = _gen_weights(gen_out_dim(version, n, m, k), d, gen_hidden) * n_generators if version.generated else 0
    recon = 0
    if version in (Version.BASE, Version.V1):
        ff = n * m
    elif version is Version.V2:
        recon = n * k * k + n * m * k
        ff = n * m
    elif version in (Version.V3, Version.V4):
        ff = n * k + k * k + k * m
    else:
        ff = p * m + k * p + k * k + p * k + n * p
    return {"generation": gen, "reconstruction": recon, "feedforward": ff, "total": gen + recon + ff}


def params_per_layer(version, n: int, m: int, k: int = 0, d: int = 0, p: int = 0,
                     phase: str = "train", gen_hidden: Sequence[int] = (), n_generators: int = 1) -> dict[str, int]:
    version = Version.parse(version)
    _check(version, n, m, k, d, p)
    if version is Version.V5 and phase == "inference":
        version = Version.V4
    out_dim = gen_out_dim(version, n, m, k)
    gen = _gen_weights(out_dim, d, gen_hidden) * n_generators if version.generated else 0
    extra = (out_dim + sum(gen_hidden)) * n_generators if version.generated else 0
    if version is Version.BASE:
        shared = n * m
    elif version is Version.V4:
        shared = n * k + m * k
    elif version is Version.V5:
        shared = n * p + p * k + k * p + p * m
    else:
        shared = 0
    return {"generator": gen, "shared": shared, "total": gen + shared, "extra": extra}


def instrument_forward(layer: ApgLayer, z, x):
    """Run one forward pass under a multiply counter; returns ``(y, macs)``."""
    with linalg.count_macs() as counter:
        y, _ = forward(layer, z, x)
    return y, counter.macs


@dataclass
class LayerCost:
    layer: int
    version: str
    n: int
    m: int
    k: int
    d: int
    p: int
    macs_generation: int
    macs_reconstruction: int
    macs_feedforward: int
    macs_total: int
    params_generator: int
    params_shared: int
    params_total: int
    bytes_total: int

    CSV_FIELDS = ("layer", "version", "n", "m", "k", "d", "p", "macs_total", "params_total", "bytes_total")


def layer_cost(index: int, version, n, m, k=0, d=0, p=0, phase="train", gen_hidden=(), n_generators=1) -> LayerCost:
    version = Version.parse(version)
    mc = macs_per_layer(version, n, m, k, d, p, phase, gen_hidden, n_generators)
    pc = params_per_layer(version, n, m, k, d, p, phase, gen_hidden, n_generators)
    uses_k = version in (Version.V2, Version.V3, Version.V4, Version.V5)
    return LayerCost(
        index, version.value, n, m, k if uses_k else 0, d if version.generated else 0,
        p if version is Version.V5 and phase == "train" else 0,
        mc["generation"], mc["reconstruction"], mc["feedforward"], mc["total"],
        pc["generator"], pc["shared"], pc["total"], pc["total"] * 8,
    )


@dataclass
class CostReport:
    layers: list[LayerCost] = field(default_factory=list)
    inference_layers: list[LayerCost] = field(default_factory=list)

    @property
    def macs_total(self) -> int:
        return sum(l.macs_total for l in self.layers)

    @property
    def params_total(self) -> int:
        return sum(l.params_total for l in self.layers)

    @property
    def bytes_total(self) -> int:
        return sum(l.bytes_total for l in self.layers)

    @property
    def inference_macs_total(self) -> int:
        return sum(l.macs_total for l in (self.inference_layers or self.layers))

    @property
    def inference_params_total(self) -> int:
        return sum(l.params_total for l in (self.inference_layers or self.layers))

    @property
    def feedforward_macs(self) -> int:
        return sum(l.macs_feedforward for l in self.layers)


def _report(specs) -> CostReport:
    rep = CostReport()
    for i, (version, n, m, k, d, p, gh, ng) in enumerate(specs):
        rep.layers.append(layer_cost(i, version, n, m, k, d, p, "train", gh, ng))
        rep.inference_layers.append(layer_cost(i, version, n, m, k, d, p, "inference", gh, ng))
    return rep


def model_cost(model) -> CostReport:
    """Sum layer costs of a built model (``d`` read from its condition strategy).

    Accepts a :class:`~apg.model.CtrModel` or a bare sequence of layer specs
    ``(version, n, m, k, d, p)``.
    """
    if hasattr(model, "layers") and hasattr(model, "condition_dims"):
        specs = []
        for layer, d in zip(model.layers, model.condition_dims()):
            gh = tuple(w.shape[0] for w in layer.generators[0].weights[:-1]) if layer.generators else ()
            specs.append((layer.version, layer.n, layer.m, layer.k, d, layer.p, gh, max(1, len(layer.generators))))
        return _report(specs)
    return _report([(*spec, (), 1) for spec in model])


def shape_cost(shape: Sequence[int], version, k: int = 4, p: int = 32, condition: str = "self",
               emb_dim: int = 32) -> CostReport:
    """Cost of a stack ``[input, h1, h2, ...]``; self-wise layers use their
    input width as ``d``, other strategies the embedding size."""
    if len(shape) < 2 or min(shape) < 1:
        raise ValueError(f"invalid shape {list(shape)}")
    specs = []
    for m, n in zip(shape[:-1], shape[1:]):
        d = m if condition == "self" else emb_dim
        specs.append((version, n, m, k, d, p))
    return model_cost(specs)


def write_cost_csv(report: CostReport, path: str | Path, inference: bool = False) -> None:
    rows = report.inference_layers if inference and report.inference_layers else report.layers
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LayerCost.CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(asdict(row))
