import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gluestick import numerics
from gluestick.errors import ConvergenceError, DimensionError, NumericError, ValidationError

from oracles import elementwise_frobenius, naive_matmul, random_rank_r, singular_values_oracle

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
shapes = st.tuples(st.integers(1, 9), st.integers(1, 9))


def matrices(dtype=np.float64):
    return shapes.flatmap(lambda s: arrays(dtype, s, elements=finite))


def test_matmul_identity(rng):
    m = rng.standard_normal((3, 4))
    assert np.array_equal(numerics.matmul_dense(np.eye(3), m), m)


def test_matmul_small_product():
    out = numerics.matmul_dense([[1, 2], [3, 4]], [[1], [1]])
    assert out.tolist() == [[3.0], [7.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(numerics.matmul_dense(a, b), naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_dimension_mismatch():
    with pytest.raises(DimensionError):
        numerics.matmul_dense(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_rejected():
    with pytest.raises(NumericError):
        numerics.svd_full(np.array([[1.0, np.nan]]))
    with pytest.raises(DimensionError):
        numerics.frobenius_norm(np.ones(3))


@pytest.mark.parametrize("m, expected", [(np.zeros((3, 2)), 0.0), (np.eye(4), 2.0)])
def test_frobenius_simple(m, expected):
    assert numerics.frobenius_norm(m) == expected


def test_frobenius_matches_elementwise(rng):
    m = rng.standard_normal((6, 6))
    assert numerics.frobenius_norm(m) == pytest.approx(elementwise_frobenius(m), rel=1e-14)


def test_svd_identity():
    assert numerics.svd_full(np.eye(2)).S.tolist() == [1.0, 1.0]


def test_svd_rank_one_outer():
    res = numerics.svd_full(np.outer([3.0, 4.0], [1.0, 0.0]))
    assert res.S[0] == pytest.approx(5.0, abs=1e-14)
    assert res.S[1] == 0.0


def test_svd_matches_eigen_oracle(rng):
    m = rng.standard_normal((8, 6))
    np.testing.assert_allclose(numerics.svd_full(m).S, singular_values_oracle(m), atol=1e-9, rtol=0)


def _check_svd(m, res):
    k = min(m.shape)
    assert res.U.shape == (m.shape[0], k) and res.V.shape == (m.shape[1], k)
    assert np.all(res.S >= 0) and np.all(np.diff(res.S) <= 0)
    assert np.abs(res.U.T @ res.U - np.eye(k)).max() <= 1e-6
    assert np.abs(res.V.T @ res.V - np.eye(k)).max() <= 1e-6
    scale = max(numerics.frobenius_norm(m), 1e-300)
    assert numerics.frobenius_norm(m - res.reconstruct()) / scale <= 1e-6 or scale == 1e-300
    for j in range(k):
        col = res.U[:, j]
        nz = np.flatnonzero(np.abs(col) > np.finfo(float).eps)
        if nz.size:
            assert col[nz[0]] > 0


@given(matrices())
def test_svd_invariants_property(m):
    _check_svd(m, numerics.svd_full(m))


@given(matrices(np.float32))
def test_svd_float32_input(m):
    _check_svd(m.astype(np.float64), numerics.svd_full(m))


def test_svd_deterministic(rng):
    m = rng.standard_normal((9, 5))
    a, b = numerics.svd_full(m), numerics.svd_full(m.copy())
    assert a.U.tobytes() == b.U.tobytes() and a.S.tobytes() == b.S.tobytes() and a.V.tobytes() == b.V.tobytes()


def test_svd_rank_deficient_basis_is_completed(rng):
    m = random_rank_r(rng, 7, 5, 2)
    res = numerics.svd_full(m)
    assert np.count_nonzero(res.S) == 2
    _check_svd(m, res)


def test_svd_zero_matrix():
    res = numerics.svd_full(np.zeros((4, 3)))
    assert res.S.tolist() == [0.0, 0.0, 0.0]
    np.testing.assert_allclose(res.U.T @ res.U, np.eye(3), atol=1e-12)


def test_svd_iteration_cap(monkeypatch, rng):
    monkeypatch.setattr(numerics, "MAX_SWEEPS", 1)
    with pytest.raises(ConvergenceError):
        numerics.svd_full(rng.standard_normal((6, 6)))


def test_truncated_diagonal_residual():
    res = numerics.svd_truncated(np.diag([3.0, 2.0, 1.0]), 2)
    assert numerics.frobenius_norm(np.diag([3.0, 2.0, 1.0]) - res.reconstruct()) == pytest.approx(1.0, abs=1e-14)


def test_truncated_full_rank_zero_residual(rng):
    m = rng.standard_normal((5, 7))
    assert numerics.frobenius_norm(m - numerics.svd_truncated(m, 5).reconstruct()) < 1e-12


def test_truncated_beats_random_competitors(rng):
    m = rng.standard_normal((10, 10))
    best = numerics.frobenius_norm(m - numerics.svd_truncated(m, 3).reconstruct())
    for _ in range(1000):
        assert best <= numerics.frobenius_norm(m - random_rank_r(rng, 10, 10, 3, scale=0.5))


@pytest.mark.parametrize("r", [0, 6])
def test_truncated_rank_out_of_range(r):
    with pytest.raises(ValidationError):
        numerics.svd_truncated(np.ones((5, 5)), r)


def test_truncated_residual_identity(rng):
    m = rng.standard_normal((9, 7))
    s = numerics.svd_full(m).S
    for r in range(1, 8):
        res = numerics.frobenius_norm(m - numerics.svd_truncated(m, r).reconstruct()) ** 2
        assert res == pytest.approx(np.sum(s[r:] ** 2), rel=1e-8, abs=1e-20)


def test_randomized_svd_close_on_low_rank(rng):
    m = random_rank_r(rng, 40, 30, 5) + 1e-9 * rng.standard_normal((40, 30))
    exact = numerics.svd_full(m)
    approx = numerics.randomized_svd(m, 5)
    np.testing.assert_allclose(approx.S, exact.S[:5], rtol=1e-8)
    assert np.abs(approx.U.T @ approx.U - np.eye(5)).max() < 1e-10


def test_large_matrix_uses_randomized(monkeypatch, rng):
    calls = []
    real = numerics.randomized_svd
    monkeypatch.setattr(numerics, "JACOBI_MAX_DIM", 8)
    monkeypatch.setattr(numerics, "randomized_svd", lambda a, r, **kw: calls.append(r) or real(a, r, **kw))
    numerics.svd_truncated(rng.standard_normal((12, 10)), 3)
    assert calls == [3]
