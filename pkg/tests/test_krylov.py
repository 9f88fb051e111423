import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from helmfci.core import NonFiniteError, Operator, dense_operator, diagonal_operator
from helmfci.krylov import KrylovConfig, _givens, gmres, optimal_step


def random_system(rng, n=40, shift=3.0):
    M = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return M / np.sqrt(n) + shift * np.eye(n), rng.standard_normal(n) + 1j * rng.standard_normal(n)


def krylov_oracle(M, f, k):
    """min ||f - M x|| over span{f, Mf, ..., M^{k-1} f} by dense least squares."""
    K = np.empty((f.size, k), dtype=complex)
    v = f / np.linalg.norm(f)
    for j in range(k):
        K[:, j] = v
        v = M @ v
        v /= np.linalg.norm(v)
    Q, _ = np.linalg.qr(K)
    c = np.linalg.lstsq(M @ Q, f, rcond=None)[0]
    return np.linalg.norm(f - M @ Q @ c) / np.linalg.norm(f)


@pytest.mark.parametrize("k", [1, 3, 6, 10])
def test_gmres_matches_least_squares_oracle(k, rng):
    M, f = random_system(rng, shift=1.0)
    _, st_ = gmres(dense_operator(M), f, cfg=KrylovConfig(restart=50, max_total_its=k, tol=1e-15))
    assert st_.its == k
    assert st_.final_residual == pytest.approx(krylov_oracle(M, f, k), rel=1e-8)


def test_gmres_reported_residual_is_true_residual(rng):
    M, f = random_system(rng)
    x, st_ = gmres(dense_operator(M), f, cfg=KrylovConfig(restart=7, tol=1e-10))
    assert st_.converged and st_.info["restarts"] > 0
    assert np.linalg.norm(f - M @ x) / np.linalg.norm(f) <= 1.01e-10


def test_gmres_residuals_non_increasing(rng):
    M, f = random_system(rng, shift=0.5)
    _, st_ = gmres(dense_operator(M), f, cfg=KrylovConfig(restart=5, max_total_its=60, tol=1e-12))
    hist = [r for _, r in st_.residual_history]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))


def test_gmres_finite_termination(rng):
    n = 25
    M, f = random_system(rng, n=n, shift=0.0)
    _, st_ = gmres(dense_operator(M), f, cfg=KrylovConfig(restart=n, max_total_its=n, tol=1e-10))
    assert st_.converged and st_.its <= n


def test_gmres_identity_and_two_eigenvalues():
    f = np.arange(1, 6, dtype=complex)
    x, st_ = gmres(diagonal_operator(np.ones(5)), f, cfg=KrylovConfig(tol=1e-12))
    assert st_.its == 1 and st_.info["breakdown"]
    np.testing.assert_allclose(x, f)
    _, st_ = gmres(diagonal_operator(np.array([1, 1, 2, 2, 2.0])), f, cfg=KrylovConfig(tol=1e-12))
    assert st_.its == 2


def test_gmres_zero_rhs_and_validation():
    x, st_ = gmres(diagonal_operator(np.ones(3)), np.zeros(3))
    assert st_.converged and st_.mvs == 0 and not np.any(x)
    with pytest.raises(ValueError):
        KrylovConfig(restart=0)
    with pytest.raises(ValueError):
        KrylovConfig(tol=1.0)


def test_flexible_equals_right_preconditioned_with_fixed_preconditioner(rng):
    M, f = random_system(rng, shift=1.0)
    P = np.linalg.inv(M + 0.3 * rng.standard_normal(M.shape))
    prec = Operator(M.shape[0], "dense-test", lambda v: P @ v)
    A = dense_operator(M)
    x1, s1 = gmres(A, f, cfg=KrylovConfig(restart=10, tol=1e-10, preconditioner=prec))
    x2, s2 = gmres(A, f, cfg=KrylovConfig(restart=10, tol=1e-10, preconditioner=prec, flexible=True))
    assert s1.its == s2.its
    np.testing.assert_allclose(x1, x2, atol=1e-8)


def test_preconditioner_matvecs_are_counted(rng):
    M, f = random_system(rng)

    class Costly:
        mvs = 0

        def __call__(self, v):
            self.mvs += 3
            return v

    pre = Costly()
    _, st_ = gmres(dense_operator(M), f, cfg=KrylovConfig(restart=50, tol=1e-8, preconditioner=pre,
                                                          flexible=True))
    assert st_.info["precond_mvs"] == pre.mvs == 3 * st_.its
    assert st_.mvs == st_.info["arnoldi_mvs"] + st_.info["precond_mvs"]


def test_gmres_rejects_nan_basis():
    A = Operator(3, "dense-test", lambda v: np.full(3, np.nan))
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
        gmres(A, np.ones(3))


def test_callback_can_abort(rng):
    M, f = random_system(rng)
    seen = []

    def cb(its, rel):
        seen.append(its)
        if its == 3:
            raise RuntimeError("stop")

    with pytest.raises(RuntimeError):
        gmres(dense_operator(M), f, cfg=KrylovConfig(tol=1e-12), callback=cb)
    assert seen == [1, 2, 3]


@given(st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False),
       st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False))
def test_givens_annihilates(a, b):
    c, s = _givens(a, b)
    r0 = c * a + s * b
    r1 = -np.conj(s) * a + c * b
    assert abs(r1) <= 1e-12 * max(abs(a), abs(b), 1e-300)
    assert abs(r0) == pytest.approx(np.hypot(abs(a), abs(b)), rel=1e-12, abs=1e-300)


@given(st.lists(st.complex_numbers(max_magnitude=100, allow_nan=False, allow_infinity=False),
                min_size=2, max_size=12),
       st.integers(0, 2 ** 31 - 1))
def test_optimal_step_never_increases_residual(vals, seed):
    Aw = np.array(vals)
    assume(np.vdot(Aw, Aw).real > 0)
    f = np.random.default_rng(seed).standard_normal(Aw.size) + 0j
    d, r = optimal_step(Aw, f)
    assert np.linalg.norm(r) <= np.linalg.norm(f) * (1 + 1e-12)
    # residual is orthogonal to Aw
    assert abs(np.vdot(Aw, r)) <= 1e-9 * max(np.linalg.norm(Aw) * np.linalg.norm(f), 1e-300)


def test_optimal_step_recovers_scalar_and_zero_warning():
    Aw = np.array([1.0, 2j, -1.0])
    d, r = optimal_step(Aw, (2 + 1j) * Aw)
    assert d == pytest.approx(2 + 1j)
    assert np.linalg.norm(r) < 1e-14
    with pytest.warns(UserWarning):
        d, r = optimal_step(np.zeros(3), np.ones(3))
    assert d == 0
