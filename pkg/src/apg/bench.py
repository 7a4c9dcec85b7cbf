"""Wall-clock and cost benchmark over the version ladder."""

from __future__ import annotations

import csv
import gc
import logging
import os
import shutil
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import linalg
from .cost import shape_cost
from .layers import Version, backward, forward, make_layer

log = logging.getLogger(__name__)

WARMUP = 2
BENCH_FIELDS = (
    "shape", "version", "k", "p", "condition", "batch_size",
    "macs_formula", "macs_instrumented", "params", "bytes", "seconds_median", "out_of_core",
)


@dataclass
class BenchRow:
    shape: str
    version: str
    k: int
    p: int
    condition: str
    batch_size: int
    macs_formula: int
    macs_instrumented: int
    params: int
    bytes: int
    seconds_median: float
    out_of_core: bool


def available_memory() -> int:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return 1 << 32


class LayerStack:
    """Hidden layers only, conditioned self-wise or on a fixed random embedding."""

    def __init__(self, shape: Sequence[int], version, k: int, p: int, condition: str = "self",
                 emb_dim: int = 32, seed: int = 0, out_of_core: str | Path | None = None):
        rng = np.random.default_rng(seed)
        self.condition = condition
        self.emb_dim = emb_dim
        self.layers = []
        for i, (m, n) in enumerate(zip(shape[:-1], shape[1:])):
            d = m if condition == "self" else emb_dim
            ooc = None if out_of_core is None else Path(out_of_core) / f"layer{i}"
            self.layers.append(make_layer(version, n, m, d=d, k=k, p=p, rng=rng, out_of_core=ooc))

    def forward_backward(self, x: np.ndarray, z: np.ndarray | None, dy: np.ndarray):
        caches = []
        h = x
        for layer in self.layers:
            cond = h if self.condition == "self" else z
            h, cache = forward(layer, cond, h)
            caches.append(cache)
        grad = dy
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            _, dx, dz = backward(layer, cache, grad)
            grad = dx + dz if (self.condition == "self" and dz is not None) else dx
        return h

    def count_forward_macs(self, x: np.ndarray, z: np.ndarray | None) -> int:
        with linalg.count_macs() as counter:
            h = x
            for layer in self.layers:
                h, _ = forward(layer, h if self.condition == "self" else z, h)
        return counter.macs


def time_version(shape, version, k=4, p=32, condition="self", batch_size=1024, repeats=5,
                 seed=0, memory_budget: int | None = None, scratch: str | Path | None = None) -> BenchRow:
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    version = Version.parse(version)
    shape = [int(s) for s in shape]
    if len(shape) < 2 or min(shape) < 1:
        raise ValueError(f"invalid shape {shape}")
    report = shape_cost(shape, version, k=k, p=p, condition=condition)
    budget = memory_budget if memory_budget is not None else available_memory() // 3
    gen_bytes = report.params_total * 8
    tmpdir = None
    if version.generated and gen_bytes > budget:
        tmpdir = tempfile.mkdtemp(prefix="apg-bench-", dir=scratch)
        log.info("%s: %.2f GB of parameters exceed budget, using memory maps in %s",
                 version.value, gen_bytes / 1e9, tmpdir)
    try:
        stack = LayerStack(shape, version, k, p, condition, seed=seed, out_of_core=tmpdir)
        rng = np.random.default_rng(seed + 1)
        x = rng.normal(size=(batch_size, shape[0]))
        z = rng.normal(size=(batch_size, stack.emb_dim)) if condition != "self" else None
        dy = rng.normal(size=(batch_size, shape[-1]))
        counted = stack.count_forward_macs(x[:1], None if z is None else z[:1])
        times = []
        for i in range(WARMUP + repeats):
            t0 = time.perf_counter()
            stack.forward_backward(x, z, dy)
            dt = time.perf_counter() - t0
            if i >= WARMUP:
                times.append(dt)
        del stack
        gc.collect()
    finally:
        if tmpdir is not None:
            shutil.rmtree(tmpdir, ignore_errors=True)
    return BenchRow(
        "-".join(map(str, shape)), version.value, k, p, condition, batch_size,
        report.macs_total, counted, report.params_total, report.bytes_total,
        statistics.median(times), tmpdir is not None,
    )


def run_bench(shapes, versions, k=4, p=32, condition="self", batch_size=1024, repeats=5, seed=0,
              memory_budget=None, scratch=None) -> list[BenchRow]:
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = []
    for shape in shapes:
        for v in versions:
            rows.append(time_version(shape, v, k, p, condition, batch_size, repeats, seed, memory_budget, scratch))
            log.info("%s %s: %.4fs", rows[-1].shape, rows[-1].version, rows[-1].seconds_median)
    return rows


def write_bench_csv(rows: list[BenchRow], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
