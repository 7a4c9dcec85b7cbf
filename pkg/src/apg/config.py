"""Run configuration: a TOML document validated before any compute.

Example::

    seed = 7
    output_dir = "runs/v4"

    [data]
    path = "data.csv"
    delimiter = ","
    schema = [
      { name = "group", kind = "categorical", hash_buckets = 1000 },
      { name = "f0", kind = "dense" },
      { name = "label", kind = "label" },
    ]

    [model]
    version = "v4"
    hidden_dims = [256, 128, 64]
    k = 4
    condition = "group:group"

Precedence is command-line flag > file > default.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .conditioning import ConditionStrategy
from .data import FieldSpec, Schema
from .layers import Version
from .model import ModelConfig

TOP_KEYS = {"seed", "output_dir", "timing", "data", "model", "bench", "sweep"}
DATA_KEYS = {"path", "delimiter", "schema", "split"}
MODEL_KEYS = {"version", "hidden_dims", "k", "p", "condition", "emb_dim", "gen_hidden", "lr", "batch_size", "epochs"}
BENCH_KEYS = {"shapes", "versions", "repeats", "batch_size", "condition", "memory_budget_mb"}
SWEEP_KEYS = {"k", "p", "large_k"}

DEFAULT_K_GRID = (2, 4, 6, 8)
LARGE_K_GRID = (16, 32)
DEFAULT_P_GRID = (32, 64, 128, 256, 512)


class ConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    shapes: list[list[int]] = field(default_factory=lambda: [[393, 64, 32, 16], [393, 1024, 512, 256]])
    versions: list[str] = field(default_factory=lambda: ["base", "v1", "v2", "v3", "v4"])
    repeats: int = 5
    batch_size: int = 32
    condition: str = "self"
    memory_budget_mb: int | None = None


@dataclass
class SweepConfig:
    k: list[int] = field(default_factory=lambda: list(DEFAULT_K_GRID))
    p: list[int] = field(default_factory=lambda: list(DEFAULT_P_GRID))
    large_k: bool = False

    def k_values(self) -> list[int]:
        ks = list(self.k)
        if self.large_k:
            ks += [k for k in LARGE_K_GRID if k not in ks]
        return ks


@dataclass
class RunConfig:
    model: ModelConfig
    data_path: Path | None = None
    delimiter: str = ","
    schema: Schema | None = None
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    output_dir: Path = Path("runs")
    timing: bool = False
    bench: BenchConfig = field(default_factory=BenchConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    source: Path | None = None

    def validate(self, need_data: bool = True) -> None:
        if need_data:
            if self.data_path is None:
                raise ConfigError("config has no [data] path")
            if self.schema is None:
                raise ConfigError("config has no [data] schema")
            for fname in self.model.condition.fields:
                if fname not in {f.name for f in self.schema.categorical}:
                    raise ConfigError(f"condition field {fname!r} is not a categorical field of the schema")
        m = self.model
        if m.version in (Version.V2, Version.V3, Version.V4, Version.V5) and m.k > min(m.hidden_dims):
            raise ConfigError(
                f"k={m.k} exceeds min(hidden_dims)={min(m.hidden_dims)}; the rank must satisfy k <= min(N, M)"
            )
        if m.version is Version.V5 and m.p <= m.k:
            raise ConfigError(f"version v5 requires p > k (got p={m.p}, k={m.k})")
        try:
            m.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _reject_unknown(section: str, got: Mapping[str, Any], allowed: set[str]) -> None:
    unknown = sorted(set(got) - allowed)
    if unknown:
        where = "top level" if not section else f"[{section}]"
        raise ConfigError(f"unknown key(s) at {where}: {', '.join(unknown)}")


def parse_config(doc: Mapping[str, Any], base_dir: Path | None = None) -> RunConfig:
    _reject_unknown("", doc, TOP_KEYS)
    data = dict(doc.get("data", {}))
    model = dict(doc.get("model", {}))
    bench = dict(doc.get("bench", {}))
    sweep = dict(doc.get("sweep", {}))
    _reject_unknown("data", data, DATA_KEYS)
    _reject_unknown("model", model, MODEL_KEYS)
    _reject_unknown("bench", bench, BENCH_KEYS)
    _reject_unknown("sweep", sweep, SWEEP_KEYS)
    seed = int(doc.get("seed", 0))
    try:
        mc = ModelConfig(seed=seed, **model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}") from None
    schema = None
    if "schema" in data:
        try:
            schema = Schema(tuple(FieldSpec(f["name"], f["kind"], int(f.get("hash_buckets", 0))) for f in data["schema"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"[data] schema: {exc}") from None
    path = None
    if "path" in data:
        path = Path(data["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
    out_dir = Path(doc.get("output_dir", "runs"))
    if base_dir is not None and not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    split = tuple(float(r) for r in data.get("split", (0.8, 0.1, 0.1)))
    if len(split) != 3:
        raise ConfigError("[data] split must have three ratios")
    try:
        bc = BenchConfig(**bench)
        sc = SweepConfig(**sweep)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(
        model=mc, data_path=path, delimiter=str(data.get("delimiter", ",")), schema=schema,
        split=split, seed=seed, output_dir=out_dir, timing=bool(doc.get("timing", False)),
        bench=bc, sweep=sc,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = parse_config(doc, base_dir=path.parent)
    cfg.source = path
    return cfg


def apply_overrides(cfg: RunConfig, *, seed=None, version=None, k=None, p=None, condition=None,
                    epochs=None) -> RunConfig:
    m = cfg.model
    changes: dict[str, Any] = {}
    if version is not None:
        changes["version"] = Version.parse(version)
    if k is not None:
        changes["k"] = int(k)
    if p is not None:
        changes["p"] = int(p)
    if condition is not None:
        changes["condition"] = ConditionStrategy.parse(condition)
    if epochs is not None:
        changes["epochs"] = int(epochs)
    if seed is not None:
        changes["seed"] = int(seed)
        cfg = replace(cfg, seed=int(seed))
    if changes:
        cfg = replace(cfg, model=replace(m, **changes))
    return cfg


def synth_config_text(data_path: str, feat_dim: int, hash_buckets: int, version: str = "v4",
                      condition: str = "group:group", seed: int = 0) -> str:
    """A ready-to-run config for a file written by ``apg synth``."""
    fields = [f'  {{ name = "group", kind = "categorical", hash_buckets = {hash_buckets} }},']
    fields += [f'  {{ name = "f{i}", kind = "dense" }},' for i in range(feat_dim)]
    fields += ['  { name = "label", kind = "label" },']
    return "\n".join([
        f"seed = {seed}",
        'output_dir = "runs"',
        "",
        "[data]",
        f'path = "{data_path}"',
        'delimiter = ","',
        "schema = [",
        *fields,
        "]",
        "",
        "[model]",
        f'version = "{version}"',
        "hidden_dims = [256, 128, 64]",
        "k = 4",
        "p = 32",
        f'condition = "{condition}"',
        "epochs = 10",
        "",
    ])
