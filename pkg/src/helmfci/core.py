"""Vector kernels and the matrix-free operator contract with its bookkeeping."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

KINDS = (
    "spectral-laplacian",
    "fd7-laplacian",
    "diagonal",
    "helmholtz-composite",
    "doubled",
    "shifted",
    "ilu0-precond",
    "invlap-precond",
    "dense-test",
    "lifted-precond",
)
PRECONDITIONER_KINDS = frozenset({"ilu0-precond", "invlap-precond", "lifted-precond"})


class DimensionError(ValueError):
    """Vector length does not match the operator or the other operand."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in an operand or a result."""


class ConvergenceError(RuntimeError):
    """An iteration diverged or stagnated; ``diagnostics`` carries the evidence."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def as_vector(x, n: Optional[int] = None) -> np.ndarray:
    """Return ``x`` as a contiguous 1-D complex128 array, checking length and finiteness."""
    v = np.ascontiguousarray(x, dtype=np.complex128).reshape(-1)
    if n is not None and v.size != n:
        raise DimensionError(f"expected length {n}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("vector has non-finite entries")
    return v


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.size} vs {y.size}")


def dot(x: np.ndarray, y: np.ndarray) -> complex:
    """Inner product, conjugate-linear in the first argument."""
    _check_pair(x, y)
    # np.vdot reduces in a fixed order for a given length, so results repeat bitwise.
    return complex(np.vdot(x, y))


def norm(x: np.ndarray) -> float:
    return float(np.sqrt(max(dot(x, x).real, 0.0)))


def axpy(alpha: complex, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """y <- alpha*x + y (in place); returns y."""
    _check_pair(x, y)
    if alpha != 0:
        y += alpha * x
    return y


class Operator:
    """A square complex linear map applied through a function.

    ``apply`` validates the input, runs the kernel, checks the output and bumps
    ``matvec_count`` (or ``precond_count`` for preconditioner kinds).
    Composite operators call ``raw`` on their parts so that one application of the
    composite counts once.
    """

    def __init__(self, dim: int, kind: str, func: Callable[[np.ndarray], np.ndarray],
                 name: Optional[str] = None, hermitian: bool = False):
        if dim <= 0:
            raise ValueError("dim must be positive")
        if kind not in KINDS:
            raise ValueError(f"unknown operator kind {kind!r}")
        self.dim = int(dim)
        self.kind = kind
        self.name = name or kind
        self.hermitian = hermitian
        self._func = func
        self._lock = threading.Lock()
        self.matvec_count = 0
        self.precond_count = 0

    @property
    def is_preconditioner(self) -> bool:
        return self.kind in PRECONDITIONER_KINDS

    def raw(self, x: np.ndarray) -> np.ndarray:
        return self._func(x)

    def apply(self, x) -> np.ndarray:
        v = as_vector(x, self.dim)
        out = np.asarray(self._func(v), dtype=np.complex128)
        if out.shape != (self.dim,):
            raise DimensionError(f"{self.name} returned shape {out.shape}")
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{self.name} produced non-finite output")
        with self._lock:
            if self.is_preconditioner:
                self.precond_count += 1
            else:
                self.matvec_count += 1
        return out

    __call__ = apply

    def reset_counters(self) -> None:
        with self._lock:
            self.matvec_count = 0
            self.precond_count = 0

    def __repr__(self) -> str:
        return f"Operator(dim={self.dim}, kind={self.kind!r}, name={self.name!r})"


def diagonal_operator(diag, name: Optional[str] = None) -> Operator:
    d = np.ascontiguousarray(diag, dtype=np.complex128).reshape(-1)
    op = Operator(d.size, "diagonal", lambda x: d * x, name=name,
                  hermitian=bool(np.all(d.imag == 0)))
    op.diag = d
    return op


def dense_operator(matrix) -> Operator:
    """Wrap an explicit matrix; used by tests and small oracles."""
    mat = np.asarray(matrix, dtype=np.complex128)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError("dense operator needs a square matrix")
    op = Operator(mat.shape[0], "dense-test", lambda x: mat @ x,
                  hermitian=bool(np.allclose(mat, mat.conj().T, atol=0)))
    op.matrix = mat
    return op


def shifted(op: Operator, z: complex) -> Operator:
    """The operator x -> op(x) - z*x; counts as one matvec of its own."""
    z = complex(z)
    return Operator(op.dim, "shifted", lambda x: op.raw(x) - z * x,
                    name=f"{op.name}-({z:g})I")


def materialize(op: Operator, max_dim: int = 4000) -> np.ndarray:
    """Dense matrix of ``op`` built column by column (test oracle only)."""
    if op.dim > max_dim:
        raise ValueError(f"refusing to materialize dim {op.dim} > {max_dim}")
    mat = np.empty((op.dim, op.dim), dtype=np.complex128)
    e = np.zeros(op.dim, dtype=np.complex128)
    for j in range(op.dim):
        e[j] = 1.0
        mat[:, j] = op.raw(e)
        e[j] = 0.0
    return mat


@dataclass
class SolveStats:
    its: int = 0
    mvs: int = 0
    seconds: float = 0.0
    residual_history: list = field(default_factory=list)
    converged: bool = False
    info: dict = field(default_factory=dict)

    def record(self, relres: float) -> None:
        self.residual_history.append((self.its, float(relres)))

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1][1] if self.residual_history else float("nan")


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
        return False
