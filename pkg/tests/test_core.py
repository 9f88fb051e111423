import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helmfci.core import (ConvergenceError, DimensionError, NonFiniteError, Operator, SolveStats,
                          as_vector, axpy, dense_operator, diagonal_operator, dot, materialize, norm,
                          shifted)

complex_vec = st.lists(st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False),
                       min_size=1, max_size=30)


def test_dot_is_conjugate_linear_in_first_argument():
    x = np.array([1j, 2.0])
    y = np.array([1.0, 1j])
    assert dot(x, y) == pytest.approx(np.conj(1j) * 1 + 2 * 1j)
    assert dot(2j * x, y) == pytest.approx(-2j * dot(x, y))


@given(complex_vec)
def test_norm_matches_numpy(v):
    x = np.array(v, dtype=complex)
    assert norm(x) == pytest.approx(np.linalg.norm(x), rel=1e-12, abs=1e-300)


@given(complex_vec, st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False))
def test_axpy_in_place(v, alpha):
    x = np.array(v, dtype=complex)
    y = np.ones_like(x)
    ref = alpha * x + 1
    out = axpy(alpha, x, y)
    assert out is y
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-9)


def test_dimension_mismatch_raises():
    with pytest.raises(DimensionError):
        dot(np.ones(3), np.ones(4))
    with pytest.raises(DimensionError):
        as_vector(np.ones(3), 4)


def test_non_finite_input_and_output_rejected():
    op = diagonal_operator(np.ones(3))
    with pytest.raises(NonFiniteError):
        op.apply(np.array([1.0, np.nan, 0.0]))
    bad = Operator(2, "dense-test", lambda x: x / 0.0 * np.inf)
    with np.errstate(all="ignore"), pytest.raises(NonFiniteError):
        bad.apply(np.ones(2))


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        Operator(3, "mystery", lambda x: x)


def test_counters_split_by_kind():
    A = diagonal_operator(np.arange(1, 4))
    P = Operator(3, "invlap-precond", lambda x: x)
    for _ in range(3):
        A.apply(np.ones(3))
    P.apply(np.ones(3))
    A.raw(np.ones(3))
    assert (A.matvec_count, A.precond_count) == (3, 0)
    assert (P.matvec_count, P.precond_count) == (0, 1)
    A.reset_counters()
    assert A.matvec_count == 0


def test_counter_is_thread_safe():
    A = diagonal_operator(np.ones(8))
    x = np.ones(8)

    def work():
        for _ in range(200):
            A.apply(x)

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert A.matvec_count == 1600


def test_shifted_and_materialize(rng):
    M = rng.standard_normal((5, 5)) + 1j * rng.standard_normal((5, 5))
    A = dense_operator(M)
    B = shifted(A, 0.3 - 2j)
    np.testing.assert_allclose(materialize(B), M - (0.3 - 2j) * np.eye(5), atol=1e-14)
    with pytest.raises(ValueError):
        materialize(diagonal_operator(np.ones(10)), max_dim=5)


def test_dot_repeats_bitwise(rng):
    x = rng.standard_normal(10001) + 1j * rng.standard_normal(10001)
    y = rng.standard_normal(10001) + 1j * rng.standard_normal(10001)
    assert dot(x, y) == dot(x.copy(), y.copy())


def test_solve_stats_and_error_payload():
    s = SolveStats()
    assert np.isnan(s.final_residual)
    s.record(0.5)
    s.its = 2
    s.record(0.1)
    assert s.residual_history == [(0, 0.5), (2, 0.1)]
    err = ConvergenceError("x", {"factor": 2.0})
    assert err.diagnostics["factor"] == 2.0
