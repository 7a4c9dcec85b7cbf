import numpy as np
import pytest

from apg.bench import LayerStack, run_bench, time_version, write_bench_csv
from apg.layers import forward


def test_out_of_core_matches_in_memory(tmp_path):
    mem = LayerStack([12, 10, 6], "v1", k=2, p=4, seed=3)
    disk = LayerStack([12, 10, 6], "v1", k=2, p=4, seed=3, out_of_core=tmp_path)
    assert isinstance(disk.layers[0].generator.weights[-1], np.memmap)
    x = np.random.default_rng(0).normal(size=(4, 12))
    dy = np.ones((4, 6))
    assert np.array_equal(mem.forward_backward(x, None, dy), disk.forward_backward(x, None, dy))


def test_time_version_out_of_core_flag(tmp_path):
    row = time_version([12, 10, 6], "v1", batch_size=4, repeats=1, memory_budget=1, scratch=tmp_path)
    assert row.out_of_core and row.macs_formula == row.macs_instrumented
    assert list(tmp_path.iterdir()) == []


def test_group_condition_stack():
    row = time_version([12, 10, 6], "v4", k=2, condition="group", batch_size=4, repeats=1)
    assert row.macs_formula == row.macs_instrumented and not row.out_of_core


def test_run_bench_rows(tmp_path):
    rows = run_bench([[8, 6, 4]], ["base", "v3"], k=2, batch_size=3, repeats=1)
    write_bench_csv(rows, tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().count("\n") == 3
    with pytest.raises(ValueError):
        run_bench([[8, 6]], ["base"], repeats=0)
