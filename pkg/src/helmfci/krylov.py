"""Restarted GMRES with right or flexible preconditioning, and the scalar least-squares step."""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import DimensionError, NonFiniteError, SolveStats, as_vector, dot, norm

REORTH_THRESHOLD = 0.7071
BREAKDOWN_TOL = 1e-14


@dataclass
class KrylovConfig:
    restart: int = 40
    max_total_its: int = 1000
    tol: float = 1e-6
    preconditioner: Optional[Callable] = None
    flexible: bool = False

    def __post_init__(self):
        if self.restart < 1:
            raise ValueError("restart must be at least 1")
        if self.max_total_its < 0:
            raise ValueError("max_total_its must be non-negative")
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")


def _precond_mvs(M) -> int:
    """Matvecs a preconditioner has spent so far (0 for plain operators)."""
    return int(getattr(M, "mvs", 0)) if M is not None else 0


def _givens(a: complex, b: complex):
    """(c, s) with [[c, s], [-conj(s), c]] @ [a, b] = [r, 0]."""
    if b == 0:
        return 1.0, 0j
    if a == 0:
        return 0.0, 1 + 0j
    # rescale so subnormal inputs keep their phase
    a, b = complex(a), complex(b)
    an = a / max(abs(a.real), abs(a.imag))
    m = max(abs(a.real), abs(a.imag), abs(b.real), abs(b.imag))
    a, b = a / m, b / m
    den = math.hypot(abs(a), abs(b))
    return abs(a) / den, (an / abs(an)) * np.conj(b) / den


def gmres(A, f, x0=None, cfg: Optional[KrylovConfig] = None,
          callback: Optional[Callable[[int, float], None]] = None) -> tuple:
    """Solve A x = f by restarted GMRES(m), preconditioned on the right.

    Residual norms in ``stats.residual_history`` are relative to ||f||. With
    ``cfg.flexible`` the preconditioned directions are stored, so the
    preconditioner may change from one step to the next. ``stats.mvs`` counts
    applications of A here plus any matvecs the preconditioner reports through
    a ``mvs`` attribute. ``callback(its, relres)`` runs after every step and
    may raise to abort.
    """
    cfg = cfg or KrylovConfig()
    f = as_vector(f, A.dim)
    n = A.dim
    M = cfg.preconditioner
    stats = SolveStats(info={"restarts": 0, "breakdown": False, "precond_mvs": 0,
                             "arnoldi_mvs": 0, "trace": []})
    t_start = time.perf_counter()
    nf = norm(f)
    x = np.zeros(n, dtype=np.complex128) if x0 is None else as_vector(x0, n).copy()
    if nf == 0:
        x[:] = 0
        stats.record(0.0)
        stats.converged = True
        stats.info["trace"].append({"its": 0, "relres": 0.0, "mvs": 0, "seconds": 0.0})
        return x, stats

    def apply_A(v):
        stats.mvs += 1
        stats.info["arnoldi_mvs"] += 1
        return A.apply(v)

    def apply_M(v):
        if M is None:
            return v.copy()
        before = _precond_mvs(M)
        out = as_vector(M(v), n)
        spent = _precond_mvs(M) - before
        stats.mvs += spent
        stats.info["precond_mvs"] += spent
        return out

    def log(relres):
        stats.record(relres)
        stats.info["trace"].append({"its": stats.its, "relres": float(relres), "mvs": stats.mvs,
                                    "seconds": time.perf_counter() - t_start})

    r = f.copy() if x0 is None or not np.any(x) else f - apply_A(x)
    beta = norm(r)
    log(beta / nf)
    m = cfg.restart
    while beta / nf > cfg.tol and stats.its < cfg.max_total_its:
        V = np.zeros((m + 1, n), dtype=np.complex128)
        Z = np.zeros((m, n), dtype=np.complex128) if (cfg.flexible and M is not None) else None
        H = np.zeros((m + 1, m), dtype=np.complex128)
        cs = np.zeros(m)
        sn = np.zeros(m, dtype=np.complex128)
        g = np.zeros(m + 1, dtype=np.complex128)
        g[0] = beta
        V[0] = r / beta
        k = 0
        breakdown = False
        for j in range(m):
            zj = apply_M(V[j])
            if Z is not None:
                Z[j] = zj
            w = apply_A(zj)
            w0 = norm(w)
            for i in range(j + 1):
                h = dot(V[i], w)
                H[i, j] += h
                w -= h * V[i]
            hn = norm(w)
            if hn < REORTH_THRESHOLD * w0:
                for i in range(j + 1):
                    h = dot(V[i], w)
                    H[i, j] += h
                    w -= h * V[i]
                hn = norm(w)
            if not np.isfinite(hn) or not np.all(np.isfinite(H[: j + 2, j])):
                raise NonFiniteError("non-finite entry in the Krylov basis")
            H[j + 1, j] = hn
            for i in range(j):
                a, b = H[i, j], H[i + 1, j]
                H[i, j] = cs[i] * a + sn[i] * b
                H[i + 1, j] = -np.conj(sn[i]) * a + cs[i] * b
            cs[j], sn[j] = _givens(H[j, j], H[j + 1, j])
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0
            g[j + 1] = -np.conj(sn[j]) * g[j]
            g[j] = cs[j] * g[j]
            k = j + 1
            stats.its += 1
            log(abs(g[j + 1]) / nf)
            if callback is not None:
                callback(stats.its, abs(g[j + 1]) / nf)
            if hn <= BREAKDOWN_TOL * max(w0, 1e-300):
                breakdown = True
                stats.info["breakdown"] = True
                break
            V[j + 1] = w / hn
            if abs(g[j + 1]) / nf <= cfg.tol or stats.its >= cfg.max_total_its:
                break
        # back substitution on the rotated Hessenberg system
        y = np.zeros(k, dtype=np.complex128)
        for i in range(k - 1, -1, -1):
            if H[i, i] == 0:
                raise np.linalg.LinAlgError("singular Hessenberg factor")
            y[i] = (g[i] - H[i, i + 1:k] @ y[i + 1:k]) / H[i, i]
        if Z is not None:
            x += Z[:k].T @ y
        else:
            x += apply_M(V[:k].T @ y)
        done = abs(g[k]) / nf <= cfg.tol or stats.its >= cfg.max_total_its
        if done and not breakdown:
            beta = abs(g[k])
            break
        r = f - apply_A(x)
        beta = norm(r)
        if breakdown and beta / nf > cfg.tol and Z is None:
            # exact breakdown of a fixed-preconditioner Krylov space
            break
        stats.info["restarts"] += 1
    stats.seconds = time.perf_counter() - t_start
    stats.converged = beta / nf <= cfg.tol
    return x, stats


def optimal_step(Aw, f) -> tuple:
    """d = argmin_d ||f - d*Aw||, returned with the residual f - d*Aw."""
    Aw = np.asarray(Aw, dtype=np.complex128).reshape(-1)
    f = np.asarray(f, dtype=np.complex128).reshape(-1)
    if Aw.shape != f.shape:
        raise DimensionError(f"length mismatch: {Aw.size} vs {f.size}")
    den = dot(Aw, Aw).real
    if den == 0:
        warnings.warn("quadrature produced a zero vector; step set to 0", stacklevel=2)
        return 0j, f.copy()
    d = dot(Aw, f) / den
    return d, f - d * Aw
