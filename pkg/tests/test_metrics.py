import csv
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apg.data import Dataset, split, synth_group_data
from apg.metrics import (
    auc,
    evaluate,
    export_specific_params,
    frequency_deciles,
    group_conditions,
    logloss,
    write_specific_params,
)
from apg.model import ModelConfig, build_model

from test_model import tiny_model


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = Fraction(0)
    for p in pos:
        for n in neg:
            credit += 1 if p > n else Fraction(1, 2) if p == n else 0
    return float(credit / (len(pos) * len(neg)))


def test_auc_examples():
    assert auc([0.9, 0.3, 0.8], [1, 0, 1]) == 1.0
    assert auc([0.5, 0.5], [1, 0]) == 0.5
    assert auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == 0.75


def test_auc_errors():
    with pytest.raises(ValueError, match="single-class"):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 2])
    with pytest.raises(ValueError):
        auc([0.1], [1, 0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=200))
def test_auc_matches_pair_enumeration(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    assert auc(scores, labels) == brute_auc(scores, labels)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 150))
def test_auc_monotone_invariance_and_complement(seed, n):
    rng = np.random.default_rng(seed)
    s = rng.permutation(n) / n + 0.01
    y = rng.integers(0, 2, size=n)
    y[:2] = [0, 1]
    a = auc(s, y)
    assert 0.0 <= a <= 1.0
    assert auc(2 * s + 1, y) == a
    assert auc(s ** 3, y) == a
    assert auc(-s, y) == pytest.approx(1 - a, abs=1e-15)


def test_logloss():
    assert logloss([0.5, 0.5], [1, 0]) == pytest.approx(np.log(2))


class Stub:
    """Minimal model scoring rows by a fixed function of their dense features."""

    def __init__(self, fn):
        self.fn = fn

    def forward_batch(self, cat, dense):
        return self.fn(dense), None


def labelled(n=200, seed=0):
    data = synth_group_data(n_groups=4, n_per_group=n // 4, feat_dim=2, seed=seed)
    ds = data.dataset
    ds.label[:] = (ds.dense[:, 0] > 0).astype(float)
    return ds


def test_evaluate_perfect_and_constant():
    ds = labelled()
    perfect = evaluate(Stub(lambda d: 1 / (1 + np.exp(-d[:, 0]))), ds)
    assert perfect.auc == 1.0
    assert perfect.n_pos + perfect.n_neg == len(ds)
    const = evaluate(Stub(lambda d: np.full(len(d), 0.3)), ds)
    assert const.auc == 0.5


def test_evaluate_groups_and_single_class_flag():
    ds = labelled()
    res = evaluate(Stub(lambda d: 1 / (1 + np.exp(-d[:, 1]))), ds, group_by="group")
    assert sorted(res.groups) == ["g0", "g1", "g2", "g3"]
    mask = ds.raw["group"] != "g0"
    ds.label[ds.raw["group"] == "g0"] = 1.0
    res = evaluate(Stub(lambda d: 1 / (1 + np.exp(-d[:, 1]))), ds, group_by="group")
    assert res.groups["g0"].single_class and res.groups["g0"].auc is None
    assert not res.groups["g1"].single_class
    assert mask.sum() < len(ds)
    with pytest.raises(ValueError):
        evaluate(Stub(lambda d: d[:, 0]), ds.subset(np.array([], dtype=int)))


def test_frequency_deciles():
    keys = np.repeat(np.arange(20), np.arange(1, 21))
    bins = frequency_deciles(keys)
    assert bins[keys == 0][0] == 0 and bins[keys == 19][0] == 9
    assert all(len(np.unique(keys[bins == b])) == 2 for b in range(10))


def groupwise_model(version="v4"):
    data = synth_group_data(n_groups=5, n_per_group=20, feat_dim=3, seed=1)
    cfg = ModelConfig(hidden_dims=(8, 6), version=version, k=2, p=4, condition="group:group", emb_dim=4)
    return build_model(data.dataset.schema, cfg), data.dataset


def test_group_conditions_are_embeddings():
    model, ds = groupwise_model()
    conds = group_conditions(model, ds, "group")
    assert [k for k, _ in conds] == [f"g{i}" for i in range(5)]
    row = ds.cat[ds.raw["group"] == "g2"][0, 0]
    np.testing.assert_array_equal(conds[2][1], model.embeddings["group"][row])


def test_export_specific_params(tmp_path):
    model, ds = groupwise_model("v5")
    conds = group_conditions(model, ds, "group")
    keys, s, proj = export_specific_params(model, conds)
    assert s.shape == (5, 4) and proj.shape == (5, 2)
    write_specific_params(tmp_path / "s.csv", keys, s, proj)
    with (tmp_path / "s.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["key", "s0", "s1", "s2", "s3", "pc1", "pc2"]
    assert [r[0] for r in rows[1:]] == keys


def test_export_identical_conditions():
    model, _ = groupwise_model()
    z = np.ones(4)
    _, s, proj = export_specific_params(model, [("a", z), ("b", z), ("c", z)])
    assert np.array_equal(s[0], s[1]) and np.array_equal(s[1], s[2])
    assert np.array_equal(proj[0], proj[1]) and np.array_equal(proj[1], proj[2])


def test_export_errors():
    model, _ = groupwise_model()
    with pytest.raises(ValueError, match="at least 3"):
        export_specific_params(model, [("a", np.ones(4)), ("b", np.zeros(4))])
    base = tiny_model("base")
    with pytest.raises(ValueError, match="no specific parameters"):
        export_specific_params(base, [(str(i), np.ones(4)) for i in range(3)])
