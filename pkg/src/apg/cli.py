"""``apg`` command line: train, eval, bench, sweep, synth, inspect-params."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .bench import run_bench, write_bench_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, load_config, synth_config_text
from .cost import model_cost, shape_cost, write_cost_csv
from .data import DataError, load_dataset, split, split_digest, synth_group_data, write_dataset
from .layers import Version
from .metrics import auc, evaluate, export_specific_params, group_conditions, write_specific_params
from .model import TrainingDiverged, build_model, predict, train

log = logging.getLogger("apg")

METRICS_FIELDS = ("epoch", "train_loss", "val_auc", "seconds")
SWEEP_FIELDS = ("k", "p", "val_auc", "test_auc", "macs", "params")


@contextmanager
def _thread_limit():
    n = os.environ.get("APG_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def _load(args, need_data=True) -> RunConfig:
    cfg = load_config(args.config)
    cfg = apply_overrides(
        cfg, seed=getattr(args, "seed", None), version=getattr(args, "version", None),
        k=getattr(args, "k", None), p=getattr(args, "p", None),
        condition=getattr(args, "condition", None), epochs=getattr(args, "epochs", None),
    )
    cfg.validate(need_data=need_data)
    return cfg


def _splits(cfg: RunConfig):
    ds = load_dataset(cfg.data_path, cfg.schema, cfg.delimiter)
    return split(ds, cfg.split, seed=cfg.seed)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path: Path, history) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_FIELDS)
        for row in history:
            w.writerow([_fmt(row[k]) for k in METRICS_FIELDS])


def _train_once(cfg: RunConfig, tr, va, te):
    model = build_model(cfg.schema, cfg.model)
    result = train(model, tr, va, timing=cfg.timing)
    test_auc = auc(predict(model, te), te.label)
    return result, test_auc


def cmd_train(args) -> int:
    cfg = _load(args)
    tr, va, te = _splits(cfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    result, test_auc = _train_once(cfg, tr, va, te)
    metrics_path = Path(args.emit) if args.emit else out / "metrics.csv"
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "model.apg"
    write_metrics_csv(metrics_path, result.log)
    save_checkpoint(result.model, ckpt_path)
    print(f"best epoch: {result.best_epoch}")
    print(f"val_auc: {result.best_val_auc!r}")
    print(f"test_auc: {test_auc!r}")
    print(f"metrics: {metrics_path}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    model = load_checkpoint(args.checkpoint, collapse=args.collapse)
    _, _, te = _splits(cfg)
    res = evaluate(model, te, group_by=args.group_by)
    print(f"test_auc: {res.auc!r}")
    print(f"test_logloss: {res.logloss!r}")
    if args.emit:
        with Path(args.emit).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["group", "n", "n_pos", "auc", "logloss"], lineterminator="\n")
            w.writeheader()
            for row in res.rows():
                w.writerow({k: _fmt(v) for k, v in row.items()})
        print(f"eval: {args.emit}")
    for key, g in res.groups.items():
        if g.single_class:
            print(f"group {key}: single class, AUC omitted", file=sys.stderr)
    return 0


def _parse_shapes(text: str) -> list[list[int]]:
    shapes = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            dims = [int(d) for d in part.split(",")]
        except ValueError:
            raise ConfigError(f"invalid shape {part!r}") from None
        if len(dims) < 2 or min(dims) < 1:
            raise ConfigError(f"invalid shape {part!r}")
        shapes.append(dims)
    if not shapes:
        raise ConfigError("no shapes given")
    return shapes


def cmd_bench(args) -> int:
    if args.config:
        cfg = _load(args, need_data=False)
        b = cfg.bench
        k, p = cfg.model.k, cfg.model.p
    else:
        cfg = None
        from .config import BenchConfig

        b = BenchConfig()
        k = args.k if args.k is not None else 4
        p = args.p if args.p is not None else 32
    shapes = _parse_shapes(args.shapes) if args.shapes else b.shapes
    versions = args.versions.split(",") if args.versions else b.versions
    versions = [Version.parse(v).value for v in versions]
    repeats = args.repeats if args.repeats is not None else b.repeats
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    batch = args.batch_size if args.batch_size is not None else b.batch_size
    condition = args.condition or b.condition
    budget = args.memory_budget_mb if args.memory_budget_mb is not None else b.memory_budget_mb
    for shape in shapes:
        if min(shape[1:]) < k and any(v in ("v2", "v3", "v4", "v5") for v in versions):
            raise ConfigError(f"shape {shape}: k={k} exceeds the smallest layer")
    cost_rows = []
    for shape in shapes:
        for v in versions:
            cost_rows.extend(shape_cost(shape, v, k=k, p=p, condition=condition).layers)
    cost_path = Path(args.emit) if args.emit else None
    if cost_path:
        from .cost import CostReport

        write_cost_csv(CostReport(cost_rows), cost_path)
        print(f"cost: {cost_path}")
    if args.no_timing:
        return 0
    with _thread_limit() if args.parallel else _single_thread():
        rows = run_bench(shapes, versions, k=k, p=p, condition=condition, batch_size=batch, repeats=repeats,
                         memory_budget=None if budget is None else int(budget) << 20)
    timing_path = Path(args.timing_emit) if args.timing_emit else None
    if timing_path:
        write_bench_csv(rows, timing_path)
        print(f"timing: {timing_path}")
    base = {r.shape: r for r in rows if r.version == "base"}
    for r in rows:
        rel = ""
        if r.shape in base and r.version != "base":
            rel = f"  time x{r.seconds_median / base[r.shape].seconds_median:.3f}" \
                  f"  macs x{r.macs_formula / base[r.shape].macs_formula:.4f}" \
                  f"  params x{r.params / base[r.shape].params:.4f}"
        match = "ok" if r.macs_formula == r.macs_instrumented else "MISMATCH"
        print(f"{r.shape:>20} {r.version:>4}  macs={r.macs_formula} ({match})  params={r.params}"
              f"  {r.seconds_median * 1e3:.3f} ms{rel}")
    return 0 if all(r.macs_formula == r.macs_instrumented for r in rows) else 1


@contextmanager
def _single_thread():
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def cmd_sweep(args) -> int:
    cfg = _load(args)
    ks = [int(x) for x in args.k_grid.split(",")] if args.k_grid else cfg.sweep.k_values()
    if args.large_k:
        ks += [k for k in (16, 32) if k not in ks]
    ps = [int(x) for x in args.p_grid.split(",")] if args.p_grid else list(cfg.sweep.p)
    if not ks or not ps:
        raise ConfigError("sweep grid is empty")
    tr, va, te = _splits(cfg)
    digest = split_digest(tr, va, te)
    print(f"split digest: {digest}")
    out_path = Path(args.emit) if args.emit else cfg.output_dir / "sweep.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in ks:
        for p in ps:
            point = apply_overrides(cfg, k=k, p=p)
            point.validate()
            result, test_auc = _train_once(point, tr, va, te)
            report = model_cost(result.model)
            rows.append({"k": k, "p": p, "val_auc": result.best_val_auc, "test_auc": test_auc,
                         "macs": report.macs_total, "params": report.params_total})
            print(f"k={k} p={p} val_auc={result.best_val_auc:.5f} test_auc={test_auc:.5f} split={digest}")
    with out_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    print(f"sweep: {out_path}")
    return 0


def cmd_synth(args) -> int:
    sd = synth_group_data(args.groups, args.per_group, args.feat_dim, seed=args.seed,
                          hash_buckets=args.hash_buckets)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(sd.dataset, out)
    print(f"wrote {len(sd.dataset)} rows, {args.groups} groups to {out}")
    if args.emit_config:
        cfg_path = Path(args.emit_config)
        rel = os.path.relpath(out.resolve(), cfg_path.resolve().parent)
        cfg_path.write_text(synth_config_text(rel, args.feat_dim, args.hash_buckets, seed=args.seed))
        print(f"config: {cfg_path}")
    if args.emit_teachers:
        with Path(args.emit_teachers).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", *[f"w{i}" for i in range(args.feat_dim)]])
            for g, row in enumerate(sd.teachers):
                w.writerow([sd.group_key(g), *[repr(float(v)) for v in row]])
    return 0


def cmd_inspect_params(args) -> int:
    cfg = _load(args)
    model = load_checkpoint(args.checkpoint)
    if model.config.version not in (Version.V4, Version.V5):
        raise ConfigError(f"version {model.config.version.value} has no specific parameters")
    ds = load_dataset(cfg.data_path, cfg.schema, cfg.delimiter)
    field_name = args.field or (model.condition.fields[0] if model.condition.fields else cfg.schema.categorical[0].name)
    conds = group_conditions(model, ds, field_name, layer=args.layer)
    keys, s, proj = export_specific_params(model, conds, layer=args.layer)
    out = Path(args.emit) if args.emit else cfg.output_dir / "sparams.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_specific_params(out, keys, s, proj)
    print(f"sparams: {out} ({len(keys)} keys, layer {args.layer})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="apg", description="Adaptive parameter generation layers for CTR models.")
    ap.add_argument("--log-level", default="WARNING")
    ap.add_argument("--version-info", action="version", version=f"apg {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("-c", "--config", required=config_required)
        p.add_argument("--seed", type=int)
        p.add_argument("--version", choices=[v.value for v in Version])
        p.add_argument("--k", type=int)
        p.add_argument("--p", type=int)
        p.add_argument("--condition")
        p.add_argument("--emit")

    p = sub.add_parser("train", help="train a model, write metrics CSV and checkpoint")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--group-by")
    p.add_argument("--collapse", action="store_true", help="fold v5 layers before evaluating")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="cost table and forward+backward timing")
    common(p, config_required=False)
    p.add_argument("--shapes", help='e.g. "393,1024,512,256;393,64,32,16"')
    p.add_argument("--versions", help="comma-separated, e.g. base,v1,v2,v3,v4")
    p.add_argument("--repeats", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--memory-budget-mb", type=int)
    p.add_argument("--timing-emit")
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--parallel", action="store_true", help="allow multi-threaded BLAS (APG_THREADS caps it)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="grid search over k and p")
    common(p)
    p.add_argument("--k-grid")
    p.add_argument("--p-grid")
    p.add_argument("--large-k", action="store_true", help="add k in {16, 32}")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write a synthetic group-heterogeneous CTR dataset")
    p.add_argument("--groups", type=int, default=10)
    p.add_argument("--per-group", type=int, default=5000)
    p.add_argument("--feat-dim", type=int, default=16)
    p.add_argument("--hash-buckets", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-config")
    p.add_argument("--emit-teachers")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect-params", help="export generated S_i per key with a 2-D PCA projection")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--field")
    p.add_argument("--layer", type=int, default=0)
    p.set_defaults(func=cmd_inspect_params)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, DataError, CheckpointError, TrainingDiverged, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
