import csv

import pytest

from apg.cli import main
from apg.config import ConfigError, load_config, parse_config


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture()
def run_dir(tmp_path):
    assert main(["synth", "--groups", "4", "--per-group", "150", "--feat-dim", "3", "--seed", "2",
                 "--out", str(tmp_path / "data.csv"), "--emit-config", str(tmp_path / "run.toml")]) == 0
    cfg = tmp_path / "run.toml"
    text = cfg.read_text().replace("epochs = 10", "epochs = 2").replace("[256, 128, 64]", "[16, 8]")
    cfg.write_text(text.replace("[model]", "[model]\nbatch_size = 64"))
    return tmp_path


def test_synth_writes_header_and_groups(run_dir):
    rows = read_csv(run_dir / "data.csv")
    assert len(rows) == 600
    assert list(rows[0])[:2] == ["group", "f0"]
    assert {r["group"] for r in rows} == {"g0", "g1", "g2", "g3"}


def test_train_then_eval_same_auc(run_dir, capsys):
    cfg = str(run_dir / "run.toml")
    assert main(["train", "-c", cfg]) == 0
    out = capsys.readouterr().out
    train_auc = next(l for l in out.splitlines() if l.startswith("test_auc:"))
    assert (run_dir / "runs" / "model.apg").exists()
    rows = read_csv(run_dir / "runs" / "metrics.csv")
    assert list(rows[0]) == ["epoch", "train_loss", "val_auc", "seconds"]
    assert len(rows) == 2 and rows[0]["seconds"] == ""

    assert main(["eval", "-c", cfg, "--checkpoint", str(run_dir / "runs" / "model.apg"),
                 "--group-by", "group", "--emit", str(run_dir / "eval.csv")]) == 0
    out = capsys.readouterr().out
    assert next(l for l in out.splitlines() if l.startswith("test_auc:")) == train_auc
    groups = [r["group"] for r in read_csv(run_dir / "eval.csv")]
    assert groups[0] == "__all__" and len(groups) == 5


def test_train_seed_flag_deterministic(run_dir):
    cfg = str(run_dir / "run.toml")
    for name in ("a", "b"):
        assert main(["train", "-c", cfg, "--seed", "7", "--emit", str(run_dir / f"{name}.csv"),
                     "--checkpoint", str(run_dir / f"{name}.apg")]) == 0
    assert (run_dir / "a.csv").read_bytes() == (run_dir / "b.csv").read_bytes()
    assert (run_dir / "a.apg").read_bytes() == (run_dir / "b.apg").read_bytes()


def test_timing_column_opt_in(run_dir):
    cfg = run_dir / "run.toml"
    cfg.write_text("timing = true\n" + cfg.read_text())
    assert main(["train", "-c", str(cfg)]) == 0
    assert float(read_csv(run_dir / "runs" / "metrics.csv")[0]["seconds"]) > 0


def test_missing_dataset_names_path(run_dir, capsys):
    (run_dir / "data.csv").unlink()
    assert main(["train", "-c", str(run_dir / "run.toml")]) != 0
    assert "data.csv" in capsys.readouterr().err


def test_config_constraints(run_dir, capsys):
    cfg = str(run_dir / "run.toml")
    assert main(["train", "-c", cfg, "--k", "12"]) != 0
    assert "k <= min" in capsys.readouterr().err
    assert main(["train", "-c", cfg, "--version", "v5", "--p", "4"]) != 0
    assert "p > k" in capsys.readouterr().err


def test_inspect_params(run_dir, capsys):
    cfg = str(run_dir / "run.toml")
    assert main(["train", "-c", cfg]) == 0
    out = run_dir / "s.csv"
    assert main(["inspect-params", "-c", cfg, "--checkpoint", str(run_dir / "runs" / "model.apg"),
                 "--emit", str(out)]) == 0
    rows = read_csv(out)
    assert [r["key"] for r in rows] == ["g0", "g1", "g2", "g3"]
    assert list(rows[0])[-2:] == ["pc1", "pc2"]

    assert main(["train", "-c", cfg, "--version", "base", "--checkpoint", str(run_dir / "base.apg")]) == 0
    capsys.readouterr()
    assert main(["inspect-params", "-c", cfg, "--checkpoint", str(run_dir / "base.apg")]) != 0
    assert "has no specific parameters" in capsys.readouterr().err


def test_eval_collapse_v5(run_dir, capsys):
    cfg = str(run_dir / "run.toml")
    assert main(["train", "-c", cfg, "--version", "v5", "--p", "8"]) == 0
    capsys.readouterr()
    ck = str(run_dir / "runs" / "model.apg")
    assert main(["eval", "-c", cfg, "--version", "v5", "--p", "8", "--checkpoint", ck]) == 0
    full = float(capsys.readouterr().out.split()[1])
    assert main(["eval", "-c", cfg, "--version", "v5", "--p", "8", "--checkpoint", ck, "--collapse"]) == 0
    flat = float(capsys.readouterr().out.split()[1])
    assert abs(full - flat) <= 1e-9


def test_sweep(run_dir, capsys):
    cfg = str(run_dir / "run.toml")
    out = run_dir / "sweep.csv"
    assert main(["sweep", "-c", cfg, "--k-grid", "2,4", "--p-grid", "32", "--emit", str(out)]) == 0
    text = capsys.readouterr().out
    rows = read_csv(out)
    assert list(rows[0]) == ["k", "p", "val_auc", "test_auc", "macs", "params"]
    assert [(r["k"], r["p"]) for r in rows] == [("2", "32"), ("4", "32")]
    digests = {l.split("split=")[1] for l in text.splitlines() if "split=" in l}
    assert len(digests) == 1


def test_bench(tmp_path, capsys):
    cost, timing = tmp_path / "c.csv", tmp_path / "t.csv"
    assert main(["bench", "--shapes", "24,16,8", "--versions", "base,v1,v2,v3,v4,v5", "--repeats", "1",
                 "--emit", str(cost), "--timing-emit", str(timing)]) == 0
    rows = read_csv(timing)
    assert [r["version"] for r in rows] == ["base", "v1", "v2", "v3", "v4", "v5"]
    assert all(r["macs_formula"] == r["macs_instrumented"] for r in rows)
    assert len(read_csv(cost)) == 12


def test_bench_errors(capsys):
    assert main(["bench", "--shapes", "24,16", "--repeats", "0"]) != 0
    assert "repeats" in capsys.readouterr().err
    assert main(["bench", "--shapes", "24,x"]) != 0
    assert "invalid shape" in capsys.readouterr().err


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        parse_config({"colour": "red"})
    with pytest.raises(ConfigError, match=r"\[model\]"):
        parse_config({"model": {"depth": 3}})
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.toml")


def test_config_precedence(run_dir):
    from apg.config import apply_overrides

    cfg = load_config(run_dir / "run.toml")
    assert cfg.model.k == 4 and cfg.model.epochs == 2
    over = apply_overrides(cfg, k=2, seed=9, condition="self")
    assert (over.model.k, over.seed, over.model.seed, str(over.model.condition)) == (2, 9, 9, "self")
    assert cfg.model.k == 4
