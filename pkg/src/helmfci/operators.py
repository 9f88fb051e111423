"""Discrete Helmholtz operators A = S - M - iD together with their inner preconditioners.

Grid vectors are stored x-fastest: the flat index of point (i1, i2, i3) is
``i1 + n1*(i2 + n2*i3)``, i.e. a C-ordered array of shape ``(n3, n2, n1)``.
An axis of size 1 is inactive (no stencil, no Fourier mode), which is how the
1D and 2D analogs are built.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.fft
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .core import DimensionError, Operator, diagonal_operator, materialize

SPECTRAL_MIN_RATE = 2.25


class ModelError(ValueError):
    """Invalid grid or wavespeed model."""


class FactorizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid3:
    n1: int
    n2: int
    n3: int
    l_min: float
    max_points: int = 2 ** 27

    def __post_init__(self):
        if min(self.n1, self.n2, self.n3) < 1:
            raise ModelError("grid dims must be positive")
        if not self.l_min > 0:
            raise ModelError("l_min must be positive")
        if self.size > self.max_points:
            raise ModelError(f"grid of {self.size} points exceeds cap {self.max_points}")
        if self.l_min <= 2:
            raise ModelError("l_min must exceed 2 points per wavelength")
        if self.l_min < SPECTRAL_MIN_RATE:
            warnings.warn(f"l_min={self.l_min} is below {SPECTRAL_MIN_RATE} points per wavelength",
                          stacklevel=2)

    @classmethod
    def cube(cls, n: int, l_min: float, **kw) -> "Grid3":
        return cls(n, n, n, l_min, **kw)

    @property
    def dims(self) -> tuple:
        return (self.n1, self.n2, self.n3)

    @property
    def shape(self) -> tuple:
        """Array shape for x-fastest storage."""
        return (self.n3, self.n2, self.n1)

    @property
    def size(self) -> int:
        return self.n1 * self.n2 * self.n3

    @property
    def active_axes(self) -> list:
        return [k for k, n in enumerate(self.dims) if n > 1]

    @property
    def omega(self) -> float:
        """Angular frequency for unit background speed on a unit domain along the longest axis."""
        return 2 * np.pi * max(self.dims) / self.l_min


def _axis_index(grid: Grid3, axis: int) -> np.ndarray:
    """Broadcastable index array along grid axis ``axis`` (0 = x) in storage layout."""
    n = grid.dims[axis]
    shape = [1, 1, 1]
    shape[2 - axis] = n
    return np.arange(n).reshape(shape)


class WavespeedModel:
    """Per-point sampling rate ``l`` (points per wavelength) on a grid."""

    def __init__(self, grid: Grid3, rates):
        l = np.asarray(rates, dtype=np.float64).reshape(-1)
        if l.size != grid.size:
            raise DimensionError(f"model has {l.size} points, grid has {grid.size}")
        if not np.all(np.isfinite(l)) or np.any(l <= 0):
            raise ModelError("sampling rates must be finite and positive")
        if np.min(l) < grid.l_min * (1 - 1e-12):
            raise ModelError("some sampling rate falls below the grid's l_min")
        if not np.isclose(np.min(l), grid.l_min, rtol=1e-12):
            raise ModelError("minimum sampling rate must equal the grid's l_min")
        self.grid = grid
        self.rates = l

    @classmethod
    def uniform(cls, grid: Grid3) -> "WavespeedModel":
        return cls(grid, np.full(grid.size, grid.l_min))

    @classmethod
    def eight_anomaly(cls, grid: Grid3, contrast: float = 2.0) -> "WavespeedModel":
        """Eight spheres of radius N/8 at the (N/4, 3N/4)^3 lattice, wavespeed ``contrast`` x background."""
        radius = min(grid.dims[k] for k in grid.active_axes) / 8
        inside = np.zeros(grid.shape, dtype=bool)
        centres = [(grid.dims[k] / 4, 3 * grid.dims[k] / 4) if grid.dims[k] > 1 else (0.0,)
                   for k in range(3)]
        for cx in centres[0]:
            for cy in centres[1]:
                for cz in centres[2]:
                    r2 = ((_axis_index(grid, 0) - cx) ** 2 + (_axis_index(grid, 1) - cy) ** 2
                          + (_axis_index(grid, 2) - cz) ** 2)
                    inside |= r2 < radius ** 2
        rates = np.where(inside, contrast * grid.l_min, grid.l_min)
        return cls(grid, rates.reshape(-1))

    @classmethod
    def from_wavespeed(cls, grid: Grid3, c, c_min: Optional[float] = None) -> "WavespeedModel":
        c = np.asarray(c, dtype=np.float64).reshape(-1)
        c_min = float(np.min(c)) if c_min is None else float(c_min)
        return cls(grid, grid.l_min * c / c_min)


def read_wavespeed(raw_path, sidecar_path=None, l_min: float = SPECTRAL_MIN_RATE) -> WavespeedModel:
    """Load a little-endian raw wavespeed cube plus its JSON sidecar.

    The sidecar holds ``{"dims": [n1, n2, n3], "dtype": "float32"|"float64",
    "c_min", "c_max", "spacing"}``; data are x-fastest.
    """
    raw_path = Path(raw_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else raw_path.with_suffix(".json")
    meta = json.loads(sidecar_path.read_text())
    dtype = {"float32": "<f4", "float64": "<f8"}.get(meta.get("dtype"))
    if dtype is None:
        raise ModelError(f"unsupported dtype {meta.get('dtype')!r}")
    n1, n2, n3 = (int(v) for v in meta["dims"])
    c = np.fromfile(raw_path, dtype=dtype)
    if c.size != n1 * n2 * n3:
        raise ModelError(f"{raw_path} holds {c.size} values, sidecar says {n1 * n2 * n3}")
    c_min = float(meta.get("c_min", c.min()))
    if c.min() < c_min * (1 - 1e-6):
        raise ModelError("data contain wavespeeds below the sidecar c_min")
    grid = Grid3(n1, n2, n3, l_min)
    return WavespeedModel(grid, np.maximum(l_min * c.astype(np.float64) / c_min, l_min))


def write_wavespeed(raw_path, c, dims, dtype: str = "float32", spacing: float = 1.0) -> None:
    raw_path = Path(raw_path)
    c = np.asarray(c).reshape(-1)
    c.astype({"float32": "<f4", "float64": "<f8"}[dtype]).tofile(raw_path)
    meta = {"dims": list(dims), "dtype": dtype, "c_min": float(c.min()),
            "c_max": float(c.max()), "spacing": spacing}
    raw_path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


# Laplacians ----------------------------------------------------------------

def spectral_eigenvalues(grid: Grid3) -> np.ndarray:
    """Eigenvalues of the spectral negative Laplacian, as an array in storage layout."""
    lam = np.zeros(grid.shape)
    for k in grid.active_axes:
        n = grid.dims[k]
        i = _axis_index(grid, k)
        lam = lam + (np.minimum(i, n - i) / n) ** 2
    return grid.l_min ** 2 * lam


def _fft_diag_operator(grid: Grid3, diag: np.ndarray, kind: str, workers: int, **kw) -> Operator:
    shape = grid.shape
    axes = tuple(2 - k for k in grid.active_axes)

    def apply(x):
        if not axes:
            return diag.reshape(-1) * x
        xh = scipy.fft.fftn(x.reshape(shape), axes=axes, workers=workers)
        xh *= diag
        return scipy.fft.ifftn(xh, axes=axes, workers=workers).reshape(-1)

    return Operator(grid.size, kind, apply, **kw)


def build_spectral_laplacian(grid: Grid3, workers: int = 1) -> Operator:
    for n in grid.dims:
        if n > 1 and n % 2:
            raise ModelError(f"spectral discretization needs even dims, got {grid.dims}")
    lam = spectral_eigenvalues(grid)
    op = _fft_diag_operator(grid, lam, "spectral-laplacian", workers, hermitian=True)
    op.eigenvalues = lam
    op.grid = grid
    return op


def _stencil_1d(n: int, closure: str) -> sp.csr_matrix:
    t = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="lil")
    if closure == "periodic":
        t[0, n - 1] = -1
        t[n - 1, 0] = -1
    return t.tocsr()


def fd7_matrix(grid: Grid3, closure: str = "dirichlet") -> sp.csr_matrix:
    """Scaled seven-point negative Laplacian (l_min/2pi)^2 * stencil, CSR, x-fastest."""
    if closure not in ("dirichlet", "periodic"):
        raise ValueError(f"unknown closure {closure!r}")
    for n in grid.dims:
        if n == 2:
            raise ModelError("fd7 needs every active axis to have at least 3 points")
    eyes = [sp.identity(n, format="csr") for n in grid.dims]
    mat = sp.csr_matrix((grid.size, grid.size))
    for k in grid.active_axes:
        factors = list(eyes)
        factors[k] = _stencil_1d(grid.dims[k], closure)
        # kron(A, B) makes B's index fastest, so x goes last
        mat = mat + sp.kron(factors[2], sp.kron(factors[1], factors[0]))
    mat = (grid.l_min / (2 * np.pi)) ** 2 * mat
    mat = mat.tocsr().astype(np.complex128)
    mat.sort_indices()
    return mat


def fd7_eigenvalues(grid: Grid3, closure: str = "dirichlet") -> np.ndarray:
    lam = np.zeros(grid.shape)
    for k in grid.active_axes:
        n = grid.dims[k]
        i = _axis_index(grid, k)
        if closure == "dirichlet":
            lam = lam + 2 * (1 - np.cos((i + 1) * np.pi / (n + 1)))
        else:
            lam = lam + 2 * (1 - np.cos(2 * np.pi * i / n))
    return (grid.l_min / (2 * np.pi)) ** 2 * lam


def build_fd7_laplacian(grid: Grid3, closure: str = "dirichlet") -> Operator:
    mat = fd7_matrix(grid, closure)
    op = Operator(grid.size, "fd7-laplacian", lambda x: mat @ x, hermitian=True)
    op.matrix = mat
    op.grid = grid
    op.closure = closure
    return op


# Diagonal pieces -------------------------------------------------------------

def build_mass(model: WavespeedModel) -> Operator:
    if np.any(model.rates < model.grid.l_min * (1 - 1e-12)):
        raise ModelError("sampling rate below l_min")
    op = diagonal_operator(model.grid.l_min ** 2 / model.rates ** 2, name="mass")
    return op


def sponge_profile(grid: Grid3, width: int, strength: float) -> np.ndarray:
    """Quadratic ramp strength*((w-d)/w)^2 at boundary distance d < w, zero inside."""
    active = grid.active_axes
    if width < 0 or (active and 2 * width >= min(grid.dims[k] for k in active)):
        raise ModelError("sponge width must be below half the smallest active dim")
    if width == 0 or strength == 0:
        return np.zeros(grid.size)
    dist = np.full(grid.shape, np.inf)
    for k in active:
        i = _axis_index(grid, k)
        dist = np.minimum(dist, np.minimum(i, grid.dims[k] - 1 - i))
    ramp = np.where(dist < width, strength * ((width - dist) / width) ** 2, 0.0)
    return np.broadcast_to(ramp, grid.shape).reshape(-1).copy()


def build_sponge(grid: Grid3, width: int, strength: float) -> Operator:
    if strength < 0:
        raise ModelError("sponge strength must be non-negative")
    return diagonal_operator(sponge_profile(grid, width, strength), name="sponge")


# Composite and doubled systems --------------------------------------------------

class HelmholtzComposite(Operator):
    """A = (S - M) + damping_sign * i * D.

    The default ``damping_sign=-1`` gives A = A1 - i*A2 with A1 = S - M and A2 = D,
    so the spectrum sits in the lower half plane.
    """

    def __init__(self, S: Operator, M: Operator, D: Operator, discretization: str = "spectral",
                 damping_sign: int = -1):
        if not (S.dim == M.dim == D.dim):
            raise DimensionError("S, M, D must share one dimension")
        if damping_sign not in (-1, 1):
            raise ValueError("damping_sign must be -1 or +1")
        self.S, self.M, self.D = S, M, D
        self.discretization = discretization
        self.damping_sign = damping_sign
        coef = 1j * damping_sign
        super().__init__(S.dim, "helmholtz-composite",
                         lambda x: S.raw(x) - M.raw(x) + coef * D.raw(x))
        self.grid = getattr(S, "grid", None)
        self._radii = {}

    def hermitian_part(self) -> Operator:
        """A1 = S - M."""
        S, M = self.S, self.M
        return Operator(self.dim, "helmholtz-composite", lambda x: S.raw(x) - M.raw(x),
                        name="A1", hermitian=True)

    def shifted_hermitian_part(self) -> Operator:
        """A1 + I, positive semidefinite when rho(M) <= 1."""
        S, M = self.S, self.M
        return Operator(self.dim, "helmholtz-composite",
                        lambda x: S.raw(x) - M.raw(x) + x, name="A1+I", hermitian=True)

    def skew_part(self) -> Operator:
        """A2 with A = A1 - i*A2."""
        d = -self.damping_sign * self.D.diag
        op = diagonal_operator(d, name="A2")
        return op

    def radii(self, tol: float = 1e-6, seed: int = 0, method: str = "lanczos") -> tuple:
        """(rho1, rho2) = (rho(A1+I), rho(A2)), cached per settings."""
        key = (tol, seed, method)
        if key not in self._radii:
            r1 = estimate_rho(self.shifted_hermitian_part(), tol=tol, seed=seed, method=method)
            r2 = estimate_rho(self.skew_part(), tol=tol)
            self._radii[key] = (r1.value, r2.value)
        return self._radii[key]


def assemble_helmholtz(S: Operator, M: Operator, D: Operator, discretization: str = "spectral",
                       damping_sign: int = -1) -> HelmholtzComposite:
    return HelmholtzComposite(S, M, D, discretization, damping_sign)


class DoubledSystem(Operator):
    """iC - I with C = [[0, I], [-(A1+I), -A2]], applied blockwise without forming C."""

    def __init__(self, A1: Operator, A2: Operator):
        if A1.dim != A2.dim:
            raise DimensionError("A1 and A2 must share one dimension")
        n = A1.dim
        self.n = n
        self.A1, self.A2 = A1, A2

        def apply(x):
            a, b = x[:n], x[n:]
            top = 1j * b - a
            bottom = -1j * (A1.raw(a) + a) - 1j * A2.raw(b) - b
            return np.concatenate([top, bottom])

        super().__init__(2 * n, "doubled", apply)

    def embed(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=np.complex128).reshape(-1)
        if f.size != self.n:
            raise DimensionError(f"expected length {self.n}, got {f.size}")
        return np.concatenate([np.zeros_like(f), f])

    def extract(self, x) -> np.ndarray:
        return np.asarray(x)[self.n:].copy()


def assemble_doubled(A1: Operator, A2: Operator) -> DoubledSystem:
    return DoubledSystem(A1, A2)


def doubled_from(A: HelmholtzComposite) -> DoubledSystem:
    return DoubledSystem(A.hermitian_part(), A.skew_part())


# Spectral radius ------------------------------------------------------------------

@dataclass(frozen=True)
class RhoEstimate:
    value: float
    iterations: int
    converged: bool


def estimate_rho(op: Operator, tol: float = 1e-8, maxiter: int = 2000, seed: int = 0,
                 method: str = "power") -> RhoEstimate:
    """Spectral radius of a Hermitian operator from a seeded start vector.

    ``method="power"`` runs power iteration; ``"lanczos"`` calls ARPACK, which
    resolves a clustered top of the spectrum far sooner. Diagonal operators
    return the exact max |entry|. Without convergence the best estimate is
    returned with ``converged=False`` and a warning.
    """
    diag = getattr(op, "diag", None)
    if diag is not None:
        return RhoEstimate(float(np.max(np.abs(diag))) if diag.size else 0.0, 0, True)
    if method == "lanczos":
        return _lanczos_rho(op, tol, maxiter, seed)
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.dim) + 1j * rng.standard_normal(op.dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for it in range(1, maxiter + 1):
        w = op.raw(v)
        # ||Av|| for unit v is a Rayleigh quotient of A^2: a lower bound on rho
        new = float(np.linalg.norm(w))
        if new == 0:
            return RhoEstimate(0.0, it, True)
        v = w / new
        if it > 1 and abs(new - est) <= tol * new:
            return RhoEstimate(max(new, est), it, True)
        est = max(new, est)
    warnings.warn(f"power iteration did not reach tol={tol} in {maxiter} steps", stacklevel=2)
    return RhoEstimate(est, maxiter, False)


def _lanczos_rho(op: Operator, tol: float, maxiter: int, seed: int) -> RhoEstimate:
    from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

    if op.dim < 3:
        vals = np.linalg.eigvalsh(materialize(op))
        return RhoEstimate(float(np.max(np.abs(vals))), 0, True)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(op.dim) + 1j * rng.standard_normal(op.dim)
    count = [0]

    def mv(x):
        count[0] += 1
        return op.raw(np.asarray(x, dtype=np.complex128).reshape(-1))

    lin = LinearOperator((op.dim, op.dim), matvec=mv, dtype=np.complex128)
    try:
        vals = eigsh(lin, k=1, which="LM", v0=v0, tol=tol, maxiter=maxiter,
                     ncv=min(op.dim - 1, 40), return_eigenvectors=False)
        return RhoEstimate(float(np.max(np.abs(vals))), count[0], True)
    except ArpackNoConvergence as exc:
        warnings.warn("ARPACK did not converge; returning best estimate", stacklevel=3)
        vals = exc.eigenvalues
        return RhoEstimate(float(np.max(np.abs(vals))) if len(vals) else 0.0, count[0], False)


# Inner preconditioners ----------------------------------------------------------------

def build_invlap_precond(grid: Grid3, workers: int = 1) -> Operator:
    """FFT-diagonal regularized inverse Laplacian with eigenvalues 1/max(lambda_i, 1)."""
    lam = spectral_eigenvalues(grid)
    return _fft_diag_operator(grid, 1.0 / np.maximum(lam, 1.0), "invlap-precond", workers)


class ILU0:
    """Incomplete LU without fill on the sparsity pattern of a CSR matrix."""

    def __init__(self, matrix, shift_retry: bool = True):
        A = sp.csr_matrix(matrix, dtype=np.complex128)
        A.sort_indices()
        try:
            self.L, self.U = self._factor(A)
            self.shift = 0.0
        except FactorizationError:
            if not shift_retry:
                raise
            self.shift = 1e-8 * float(np.max(np.abs(A.diagonal())))
            self.L, self.U = self._factor(A + self.shift * sp.identity(A.shape[0], format="csr"))
        self.pattern = A.copy()
        self.pattern.data[:] = 1

    @staticmethod
    def _factor(A: sp.csr_matrix):
        n = A.shape[0]
        indptr, indices = A.indptr, A.indices
        data = A.data.copy()
        diag_pos = np.empty(n, dtype=np.int64)
        for i in range(n):
            row = indices[indptr[i]:indptr[i + 1]]
            hit = np.searchsorted(row, i)
            if hit >= row.size or row[hit] != i:
                raise FactorizationError(f"row {i} has no diagonal entry")
            diag_pos[i] = indptr[i] + hit
        scale = np.max(np.abs(data)) if data.size else 1.0
        for i in range(n):
            start, stop = indptr[i], indptr[i + 1]
            pos = {int(indices[p]): p for p in range(start, stop)}
            for p in range(start, diag_pos[i]):
                k = int(indices[p])
                pivot = data[diag_pos[k]]
                if abs(pivot) <= 1e-14 * scale:
                    raise FactorizationError(f"zero pivot at row {k}")
                data[p] /= pivot
                lik = data[p]
                for pk in range(diag_pos[k] + 1, indptr[k + 1]):
                    q = pos.get(int(indices[pk]))
                    if q is not None:
                        data[q] -= lik * data[pk]
            if abs(data[diag_pos[i]]) <= 1e-14 * scale:
                raise FactorizationError(f"zero pivot at row {i}")
        LU = sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=A.shape)
        L = sp.tril(LU, k=-1, format="csr") + sp.identity(n, format="csr", dtype=np.complex128)
        U = sp.triu(LU, k=0, format="csr")
        return L.tocsr(), U.tocsr()

    def solve(self, b: np.ndarray) -> np.ndarray:
        y = spsolve_triangular(self.L, b, lower=True, unit_diagonal=True)
        return spsolve_triangular(self.U, y, lower=False)


def build_ilu0_precond(matrix, shift: float = 0.0) -> Operator:
    """ILU(0) of ``matrix + shift*I`` applied as forward/backward triangular solves."""
    A = sp.csr_matrix(matrix, dtype=np.complex128)
    if shift:
        A = (A + shift * sp.identity(A.shape[0], format="csr")).tocsr()
    fac = ILU0(A)
    op = Operator(A.shape[0], "ilu0-precond", fac.solve)
    op.factors = fac
    return op


def lift_preconditioner(P: Operator, A1: Operator) -> Operator:
    """Turn an approximate inverse P of A into one for the doubled system.

    Block elimination of (iC - I)(a; b) = (g; h) gives A b = h - i(A1 + I) g and
    a = i b - g, so b is approximated by P applied to the reduced right-hand side.
    """
    n = P.dim

    def apply(x):
        g, h = x[:n], x[n:]
        b = P.raw(h - 1j * (A1.raw(g) + g))
        return np.concatenate([1j * b - g, b])

    return Operator(2 * n, "lifted-precond", apply)
