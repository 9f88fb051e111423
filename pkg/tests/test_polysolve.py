import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helmfci.core import ConvergenceError, diagonal_operator
from helmfci.polysolve import (PolyScheme, _ptilde, fixpoint_solve, predicted_sweeps,
                               residual_poly_eval, richardson_optimal, richardson_solve, scan_orders,
                               scheme_rate, taylor_center, tune_scheme)
from helmfci.spectrum import SpectralBox

BOX = SpectralBox(-1.0, 2.8, 0.65)


@pytest.mark.parametrize("q", [1, 2, 5, 9])
def test_ptilde_matches_direct_sum(q):
    lam = np.array([0.3 - 0.2j, -1.0, 2.0 + 1j])
    delta, z0 = 0.7, 0.9 + 1j
    x = -1j * delta * (lam - z0)
    direct = sum(x ** j / math.factorial(j) for j in range(q + 1))
    np.testing.assert_allclose(_ptilde(lam, q, delta, z0), direct, rtol=1e-14)


def test_residual_polynomial_is_one_at_shift():
    s = tune_scheme(BOX, 1j)
    assert residual_poly_eval(s, s.z) == pytest.approx(1.0)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 5), st.floats(0.05, 1.5))
def test_maximum_principle(u, v, q, delta):
    # |R| inside the box never exceeds its boundary maximum
    lam = complex(BOX.b1 + u * BOX.width, -v * BOX.depth)
    z0 = taylor_center(BOX, 1j)
    nu = scheme_rate(BOX, 1j, q, delta, BOX.boundary(4096))
    s = PolyScheme(q, delta, z0, 1j, nu, BOX)
    assert abs(residual_poly_eval(s, lam)) <= nu * (1 + 1e-3) + 1e-12


def test_delta_is_dyadic_with_three_bits():
    for s in scan_orders(BOX, 1j):
        d = abs(s.delta)
        mant = d / 2.0 ** math.floor(math.log2(d)) * 8
        assert mant == pytest.approx(round(mant), abs=1e-9)


def test_delta_sign_follows_shift_side():
    assert tune_scheme(BOX, 1j).delta > 0
    assert tune_scheme(BOX, -2j).delta < 0
    with pytest.raises(ValueError):
        tune_scheme(BOX, 1.0 - 0.3j)


def test_tuned_scheme_minimises_rate_per_matvec():
    rows = scan_orders(BOX, 1j)
    best = tune_scheme(BOX, 1j)
    assert best.rate_per_matvec == pytest.approx(min(r.rate_per_matvec for r in rows))


def test_predicted_sweeps():
    assert predicted_sweeps(0.5, 1e-2) == 7
    assert predicted_sweeps(0.1, 1e-2) == 2
    assert predicted_sweeps(1.2, 1e-2) == math.inf


@pytest.mark.parametrize("q", [1, 3, 4])
def test_fixpoint_matvecs_are_q_per_sweep(q, rng):
    lam = BOX.b1 + BOX.width * rng.uniform(size=50) - 1j * BOX.depth * rng.uniform(size=50)
    A = diagonal_operator(lam)
    s = [r for r in scan_orders(BOX, 1j) if r.q == q][0]
    _, st_ = fixpoint_solve(A, 1j, np.ones(50), s, max_sweeps=6)
    assert st_.its == 6
    # the first residual is free; each later sweep reuses its first product
    assert st_.mvs == 6 * q
    assert A.matvec_count == 6 * q


def test_fixpoint_solution_solves_shifted_system(rng):
    lam = BOX.b1 + BOX.width * rng.uniform(size=80) - 1j * BOX.depth * rng.uniform(size=80)
    A = diagonal_operator(lam)
    f = rng.standard_normal(80) + 1j * rng.standard_normal(80)
    y, st_ = fixpoint_solve(A, 1j, f, tune_scheme(BOX, 1j), tol=1e-10, max_sweeps=500)
    assert st_.converged
    np.testing.assert_allclose((lam - 1j) * y, f, atol=1e-9 * np.linalg.norm(f))


def test_fixpoint_warm_start_and_zero_rhs(rng):
    lam = np.linspace(-1, 2.8, 30) + 0j
    A = diagonal_operator(lam)
    s = tune_scheme(BOX, 1j)
    y, st_ = fixpoint_solve(A, 1j, np.zeros(30), s, tol=1e-6)
    assert st_.converged and not np.any(y)
    f = np.ones(30)
    exact = f / (lam - 1j)
    _, st_ = fixpoint_solve(A, 1j, f, s, tol=1e-6, x0=exact)
    assert st_.its == 0


def test_fixpoint_diverges_outside_the_box():
    s = tune_scheme(BOX, 1j)
    A = diagonal_operator(np.array([40.0 + 0j, 0.0]))
    with pytest.raises(ConvergenceError) as exc:
        fixpoint_solve(A, 1j, np.ones(2), s, tol=1e-8, max_sweeps=100)
    assert exc.value.diagnostics["factor"] > 1


def test_richardson_rate_at_unit_shift():
    p = richardson_optimal(BOX, 1j)
    assert not p.fallback
    assert p.rate == pytest.approx(0.8661, abs=1e-3)
    assert scheme_rate(BOX, 1j, 1, 0.25) == pytest.approx(0.866, abs=1e-3)


def test_richardson_solve_converges_at_rate(rng):
    lam = BOX.b1 + BOX.width * rng.uniform(size=40) - 1j * BOX.depth * rng.uniform(size=40)
    lam[:4] = BOX.vertices
    A = diagonal_operator(lam)
    p = richardson_optimal(BOX, 1j)
    f = rng.standard_normal(40) + 0j
    _, st_ = richardson_solve(A, 1j, f, p, tol=1e-8)
    assert st_.converged
    hist = [r for _, r in st_.residual_history]
    assert hist[-1] / hist[-11] <= p.rate ** 10 * 1.01


def test_richardson_fallback_far_shift():
    p = richardson_optimal(BOX, 10 + 5j)
    assert p.fallback
    verts = BOX.vertices
    assert p.rate == pytest.approx(np.max(np.abs(1 - (verts - (10 + 5j)) * p.p_star)))
    assert p.rate < 1
