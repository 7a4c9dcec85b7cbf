import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from apg import linalg
from apg.linalg import ShapeError, count_macs, matmul, matvec, pca2d, reshape, flatten


def test_matmul_hand_values():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(matmul(a, b), [[19, 22], [43, 50]])


def test_matmul_identity_and_zero():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(matmul(a, np.eye(4)), a)
    np.testing.assert_array_equal(matmul(np.zeros((3, 5)), a), np.zeros((3, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        matmul(np.ones((2, 3)), np.ones((4, 2)))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matvec_examples():
    np.testing.assert_array_equal(matvec(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0])), [3, 7])
    np.testing.assert_array_equal(matvec(np.zeros((1, 2)), np.array([5.0, 9.0])), [0])
    x = np.arange(4.0)
    np.testing.assert_array_equal(matvec(np.eye(4), x), x)
    with pytest.raises(ShapeError):
        matvec(np.eye(3), np.ones(2))


def test_matvec_equals_matmul_column():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(7, 5))
    x = rng.normal(size=5)
    assert np.array_equal(matvec(a, x), matmul(a, x[:, None])[:, 0])


def test_reshape_row_major():
    np.testing.assert_array_equal(reshape(np.arange(1.0, 7.0), 2, 3), [[1, 2, 3], [4, 5, 6]])
    np.testing.assert_array_equal(reshape(np.array([7.0]), 1, 1), [[7]])
    with pytest.raises(ShapeError):
        reshape(np.ones(5), 2, 3)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6)))
def test_flatten_reshape_round_trip(a):
    assert np.array_equal(reshape(flatten(a), *a.shape), a)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_matmul_associativity(n, k, l, m, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.uniform(-1, 1, (n, k)), rng.uniform(-1, 1, (k, l)), rng.uniform(-1, 1, (l, m))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    scale = max(1.0, np.abs(left).max())
    assert np.abs(left - right).max() <= 1e-9 * scale


def test_mac_counter_is_scoped():
    a, b = np.ones((4, 3)), np.ones((3, 2))
    with count_macs() as outer:
        matmul(a, b)
        with count_macs() as inner:
            matvec(a, np.ones(3))
        matmul(a, b)
    assert inner.macs == 12
    assert outer.macs == 48
    matmul(a, b)  # no active counter, nothing to tally
    assert outer.macs == 48


def test_linear_counts_batch():
    with count_macs() as c:
        linalg.linear(np.ones((5, 3)), np.ones((4, 3)))
    assert c.macs == 5 * 4 * 3


def test_jacobi_matches_numpy():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(9, 9))
    sym = a + a.T
    vals, vecs = linalg.jacobi_eigh(sym)
    np.testing.assert_allclose(vals, np.sort(np.linalg.eigvalsh(sym))[::-1], atol=1e-9)
    np.testing.assert_allclose(sym @ vecs, vecs * vals, atol=1e-8)


class TestPca2d:
    def test_already_diagonal_2d(self):
        pts = np.array([[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        out = pca2d(pts)
        np.testing.assert_allclose(np.abs(out), np.abs(pts), atol=1e-12)

    def test_collinear_second_component_zero(self):
        t = np.array([-2.0, 0.5, 1.0, 3.0])
        pts = t[:, None] * np.ones((1, 3))
        out = pca2d(pts)
        np.testing.assert_allclose(out[:, 1], 0.0, atol=1e-9)

    def test_planar_rectangle_distances(self):
        rect = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 1.5], [0.0, 1.5]])
        rng = np.random.default_rng(3)
        basis, _ = np.linalg.qr(rng.normal(size=(5, 2)))
        pts = rect @ basis.T + rng.normal(size=5)
        out = pca2d(pts)

        def dists(p):
            return np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)

        np.testing.assert_allclose(dists(out), dists(pts), atol=1e-9)

    def test_errors(self):
        with pytest.raises(ValueError, match="at least 3"):
            pca2d(np.ones((2, 3)))
        with pytest.raises(ValueError, match="degenerate"):
            pca2d(np.ones((4, 3)))
        with pytest.raises(ValueError):
            pca2d(np.ones((4, 1)))

    def test_orthonormal_and_sign(self):
        rng = np.random.default_rng(4)
        _, comps = pca2d(rng.normal(size=(30, 6)), return_components=True)
        u, v = comps[:, 0], comps[:, 1]
        assert abs(u @ v) <= 1e-8
        assert abs(np.linalg.norm(u) - 1) <= 1e-8 and abs(np.linalg.norm(v) - 1) <= 1e-8
        for axis in (u, v):
            assert axis[np.flatnonzero(np.abs(axis) > 1e-12)[0]] > 0

    def test_captures_more_variance_than_random_projections(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(50, 8)) * np.arange(1, 9)
        best = np.var(pca2d(pts), axis=0, ddof=1).sum()
        centered = pts - pts.mean(axis=0)
        for _ in range(100):
            q, _ = np.linalg.qr(rng.normal(size=(8, 2)))
            assert best >= np.var(centered @ q, axis=0, ddof=1).sum() - 1e-9
