"""Polynomial fixed-point solvers for shifted systems (A - zI) y = f.

Two schemes live here: the optimal stationary Richardson iteration for a
rectangular spectrum, and the truncated-exponential iteration whose residual
polynomial is p(lam)/p(z) with p(lam) = sum_{j<=q} (-i*delta*(lam - z0))^j / j!.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .core import ConvergenceError, SolveStats, Timer, as_vector, norm
from .spectrum import SpectralBox

BOUNDARY_SAMPLES = 1024
SCAN_POINTS = 200
DELTA_BITS = 3


class DegenerateSchemeError(ValueError):
    pass


class NoConvergentSchemeError(ValueError):
    pass


@dataclass(frozen=True)
class PolyScheme:
    q: int
    delta: float
    z0: complex
    z: complex
    nu: float
    box: SpectralBox
    target: Optional[float] = None

    @property
    def rate_per_matvec(self) -> float:
        return self.nu ** (1.0 / self.q)

    @property
    def predicted_sweeps(self) -> Optional[int]:
        return predicted_sweeps(self.nu, self.target) if self.target else None

    @property
    def predicted_mvs(self) -> Optional[int]:
        s = self.predicted_sweeps
        return None if s is None else self.q * s


def predicted_sweeps(nu: float, target: float) -> int:
    if nu <= 0:
        return 1
    if nu >= 1:
        return math.inf
    return int(math.ceil(math.log(target) / math.log(nu) - 1e-12))


def taylor_center(box: SpectralBox, z: complex) -> complex:
    return complex((box.b1 + box.b2) / 2, complex(z).imag)


def _ptilde(lam, q: int, delta: float, z0: complex) -> np.ndarray:
    """Truncated exponential sum_{j=0}^q x^j/j!, x = -i*delta*(lam - z0), by Horner."""
    x = -1j * delta * (np.asarray(lam, dtype=np.complex128) - z0)
    acc = np.ones_like(x)
    for j in range(q, 0, -1):
        acc = 1 + acc * x / j
    return acc


def residual_poly_eval(scheme: PolyScheme, lam) -> np.ndarray:
    """R(lam) = p(lam)/p(z) for the scheme's truncated exponential p."""
    denom = _ptilde(scheme.z, scheme.q, scheme.delta, scheme.z0)
    if abs(denom) == 0:
        raise DegenerateSchemeError("p(z) vanishes")
    return _ptilde(lam, scheme.q, scheme.delta, scheme.z0) / denom


def scheme_rate(box: SpectralBox, z: complex, q: int, delta: float,
                boundary: Optional[np.ndarray] = None) -> float:
    """max over the box boundary of |R(lam)| for given (q, delta)."""
    if boundary is None:
        boundary = box.boundary(BOUNDARY_SAMPLES)
    z0 = taylor_center(box, z)
    denom = abs(_ptilde(z, q, delta, z0))
    if denom == 0:
        return math.inf
    return float(np.max(np.abs(_ptilde(boundary, q, delta, z0))) / denom)


def _delta_sign(box: SpectralBox, z: complex) -> int:
    im = complex(z).imag
    if im > 0:
        return 1
    if im < -box.depth:
        return -1
    raise ValueError(f"shift {z} lies in the spectral strip Im in [{-box.depth}, 0]")


def _optimize_delta(box, z, q, boundary, bits):
    sign = _delta_sign(box, z)
    scale = max(box.width, box.depth, abs(z - taylor_center(box, z)), 1e-12)
    grid = np.geomspace(1e-4, 4.0 * (q + 1), SCAN_POINTS) / scale
    vals = np.array([scheme_rate(box, z, q, sign * d, boundary) for d in grid])
    k = int(np.argmin(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = minimize_scalar(lambda d: scheme_rate(box, z, q, sign * d, boundary),
                          bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-10 * hi})
    best_d, best_v = (res.x, res.fun) if res.fun < vals[k] else (grid[k], vals[k])
    if bits is not None:
        # quantize to a relative dyadic grid with `bits` mantissa bits
        step = 2.0 ** math.floor(math.log2(best_d)) / 2 ** bits
        base = math.floor(best_d / step)
        cands = [m * step for m in range(max(base - 2 ** bits, 1), base + 2 ** bits + 2)]
        qv = [scheme_rate(box, z, q, sign * d, boundary) for d in cands]
        j = int(np.argmin(qv))
        best_d, best_v = cands[j], qv[j]
    return sign * best_d, float(best_v)


def scan_orders(box: SpectralBox, z: complex, q_max: int = 5, target: float = 1e-2,
                delta_bits: Optional[int] = DELTA_BITS,
                n_boundary: int = BOUNDARY_SAMPLES) -> list:
    """Tuned scheme for every order q = 1..q_max."""
    if q_max < 1:
        raise ValueError("q_max must be at least 1")
    if box.width == 0 and box.depth == 0:
        raise ValueError("box is a single point; use richardson_optimal")
    z = complex(z)
    boundary = box.boundary(n_boundary)
    z0 = taylor_center(box, z)
    rows = []
    for q in range(1, q_max + 1):
        delta, nu = _optimize_delta(box, z, q, boundary, delta_bits)
        rows.append(PolyScheme(q, delta, z0, z, nu, box, target))
    return rows


def tune_scheme(box: SpectralBox, z: complex, q_max: int = 5, target: float = 1e-2,
                delta_bits: Optional[int] = DELTA_BITS) -> PolyScheme:
    """Scheme with the smallest per-matvec rate nu^(1/q) over q = 1..q_max."""
    rows = scan_orders(box, z, q_max, target, delta_bits)
    ok = [s for s in rows if s.nu < 1]
    if not ok:
        raise NoConvergentSchemeError(
            f"no order up to {q_max} contracts for z={z}; enlarge |Im z| or q_max")
    return min(ok, key=lambda s: (s.rate_per_matvec, s.q))


# Richardson -------------------------------------------------------------------------

@dataclass(frozen=True)
class RichardsonParam:
    p_star: complex
    rate: float
    alpha1: complex
    alpha2: complex
    fallback: bool = False


def _vertex_rate(verts, z, p):
    return float(np.max(np.abs(1 - (verts - z) * p)))


def richardson_optimal(box: SpectralBox, z: complex) -> RichardsonParam:
    """Optimal constant p for y <- y + p*r on a rectangular spectrum.

    Closed form when Im(z) is off [-depth, 0] and z sits inside the box's
    circumcircle; otherwise a numerical minimax over the four vertices
    (where |R| peaks for a constant p) flagged ``fallback``.
    """
    z = complex(z)
    verts = box.vertices
    if z.imag > 0:
        a1, a2 = box.b1 - z, box.b2 - z
    else:
        a1, a2 = box.b1 - 1j * box.depth - z, box.b2 - 1j * box.depth - z
    if abs(a1) == 0 or abs(a2) == 0:
        raise DegenerateSchemeError("shift coincides with a vertex")
    p_star = (abs(a1) / a1 + abs(a2) / a2) / (abs(a1) + abs(a2))
    rate = abs(a1 - a2) / (abs(a1) + abs(a2))
    if box.width == 0 and box.depth == 0:
        return RichardsonParam(p_star, rate, a1, a2)
    half_diag = abs(complex(box.width, box.depth)) / 2
    admissible = not (-box.depth <= z.imag <= 0) and abs(z - box.center) < half_diag
    if admissible:
        return RichardsonParam(p_star, rate, a1, a2)

    def obj(v):
        return _vertex_rate(verts, z, complex(v[0], v[1]))

    res = minimize(obj, [p_star.real, p_star.imag], method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
    p = complex(res.x[0], res.x[1])
    return RichardsonParam(p, obj(res.x), a1, a2, fallback=True)


def richardson_solve(A, z: complex, f, param: RichardsonParam, tol: float = 1e-6,
                     max_iters: int = 10000) -> tuple:
    f = as_vector(f, A.dim)
    y = np.zeros_like(f)
    stats = SolveStats()
    nf = norm(f)
    r = f.copy()
    with Timer() as t:
        while True:
            rel = norm(r) / nf if nf else 0.0
            stats.record(rel)
            if rel <= tol or stats.its >= max_iters:
                break
            y += param.p_star * r
            r = f - A.apply(y) + z * y
            stats.mvs += 1
            stats.its += 1
    stats.seconds = t.seconds
    stats.converged = stats.final_residual <= tol
    return y, stats


# Exponential fixed-point iteration ---------------------------------------------------------

DIVERGENCE_CAP = 2.0


def fixpoint_solve(A, z: complex, f, scheme: PolyScheme, tol: Optional[float] = None,
                   max_sweeps: int = 1000, x0=None, divergence_window: int = 3,
                   divergence_cap: float = DIVERGENCE_CAP) -> tuple:
    """Truncated-exponential fixed-point iteration for (A - zI) y = f.

    Each sweep costs exactly q applications of A; the residual of the current
    iterate falls out of the first one. Stops when ||f - (A - zI)y|| <= tol*||f||
    or after ``max_sweeps`` sweeps (then ``stats.converged`` is False). Raises
    ConvergenceError when the residual grows ``divergence_window`` sweeps in a
    row while sitting above ``divergence_cap`` times its starting value; the cap
    lets non-normal operators ride out transient growth.
    """
    f = as_vector(f, A.dim)
    z = complex(z)
    q, delta, z0 = scheme.q, scheme.delta, scheme.z0
    pz = complex(_ptilde(z, q, delta, z0))
    if pz == 0:
        raise DegenerateSchemeError("p(z) vanishes")
    nf = norm(f)
    stats = SolveStats(info={"q": q, "delta": delta, "z": z, "factors": []})
    if nf == 0:
        stats.record(0.0)
        stats.converged = True
        return np.zeros_like(f), stats
    y = np.zeros_like(f) if x0 is None else as_vector(x0, A.dim).copy()
    zero_start = x0 is None or not np.any(y)
    c = -1j * delta * (z - z0)
    growth = 0
    prev = None
    first = None
    with Timer() as t:
        while True:
            if zero_start and stats.its == 0:
                Ay = np.zeros_like(f)
            else:
                Ay = A.apply(y)
                stats.mvs += 1
            rel = norm(f - Ay + z * y) / nf
            stats.record(rel)
            first = rel if first is None else first
            if prev is not None:
                stats.info["factors"].append(rel / prev if prev else 0.0)
                growth = growth + 1 if rel > prev else 0
                if growth >= divergence_window and rel > divergence_cap * first:
                    raise ConvergenceError(
                        f"fixed-point residual grew {growth} sweeps in a row (z={z})",
                        {"factor": rel / prev, "history": stats.residual_history, "z": z})
            prev = rel
            if (tol is not None and rel <= tol) or stats.its >= max_sweeps:
                break
            k = -1j * delta * (Ay - z0 * y - f)
            acc = y + k
            coef = 1.0 + 0j
            for j in range(2, q + 1):
                coef *= c / (j - 1)
                k = (-1j * delta / j) * (A.apply(k) - z0 * k - coef * f)
                stats.mvs += 1
                acc += k
            y = acc / pz
            stats.its += 1
    stats.seconds = t.seconds
    stats.converged = tol is not None and stats.final_residual <= tol
    return y, stats


def with_target(scheme: PolyScheme, target: float) -> PolyScheme:
    return replace(scheme, target=target)
