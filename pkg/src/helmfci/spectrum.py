"""Spectral boxes with elliptic contour quadrature; phase roots of the impedance problem."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

BOX_INFLATION = 1.02


@dataclass(frozen=True)
class SpectralBox:
    """Rectangle [b1, b2] x [-depth, 0] in the complex plane."""

    b1: float
    b2: float
    depth: float = 0.0

    def __post_init__(self):
        if self.b1 > self.b2:
            raise ValueError(f"need b1 <= b2, got {self.b1} > {self.b2}")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")

    @property
    def width(self) -> float:
        return self.b2 - self.b1

    @property
    def vertices(self) -> np.ndarray:
        """b1, b2, beta2, beta1 (counter-clockwise from the lower-left on the real axis)."""
        b1, b2, d = self.b1, self.b2, self.depth
        return np.array([b1, b2, b2 - 1j * d, b1 - 1j * d], dtype=np.complex128)

    @property
    def center(self) -> complex:
        return complex((self.b1 + self.b2) / 2, -self.depth / 2)

    def contains(self, lam, margin: float = 0.0) -> np.ndarray:
        lam = np.asarray(lam)
        return ((lam.real >= self.b1 - margin) & (lam.real <= self.b2 + margin)
                & (lam.imag >= -self.depth - margin) & (lam.imag <= margin))

    def boundary(self, n: int = 1024) -> np.ndarray:
        """At least ``n`` points on the perimeter, vertices included.

        A zero-depth box degenerates to the segment [b1, b2].
        """
        verts = self.vertices
        if self.depth == 0:
            if self.width == 0:
                return verts[:1].copy()
            return np.linspace(self.b1, self.b2, max(n, 2)).astype(np.complex128)
        perimeter = 2 * (self.width + self.depth)
        pieces = []
        for a, b in zip(verts, np.roll(verts, -1)):
            k = max(2, int(np.ceil(n * abs(b - a) / perimeter)))
            pieces.append(a + (b - a) * np.linspace(0.0, 1.0, k, endpoint=False))
        return np.concatenate(pieces)


def box_from_operator(A, inflation: float = BOX_INFLATION, tol: float = 1e-6,
                      seed: int = 0) -> SpectralBox:
    """Rectangle [-1, rho1 - 1] x [-rho2, 0] holding the numerical range of A = A1 - iA2.

    Both radii are inflated by ``inflation`` because power iteration approaches
    them from below.
    """
    rho1, rho2 = A.radii(tol=tol, seed=seed)
    return SpectralBox(-1.0, inflation * rho1 - 1.0, inflation * rho2)


def doubled_box(box: SpectralBox) -> SpectralBox:
    """Box holding the spectrum of iC - I built from the same A1, A2.

    With rho1 = b2 + 1 and rho2 = depth the eigenvalues satisfy
    |mu + 1| <= rho2/2 + sqrt(rho2^2/4 + rho1) and -rho2 <= Im(mu) <= 0.
    """
    rho1, rho2 = box.b2 + 1.0, box.depth
    radius = rho2 / 2 + np.sqrt(rho2 ** 2 / 4 + rho1)
    return SpectralBox(-1.0 - radius, -1.0 + radius, rho2)


@dataclass(frozen=True)
class Contour:
    """Quadrature on the ellipse t*r*cos(theta) + i*r*sin(theta), moved to its center."""

    t: float
    r: float
    J: int
    eps: float
    rho2: float
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    offset: complex = None

    @property
    def center(self) -> complex:
        if self.offset is not None:
            return complex(self.offset)
        return complex(-self.t * self.r * np.cos(np.pi / self.J), -self.rho2 / 2)

    def inside(self, lam) -> np.ndarray:
        lam = np.asarray(lam) - self.center
        return (lam.real / (self.t * self.r)) ** 2 + (lam.imag / self.r) ** 2 < 1


def contour_from_radius(J: int, t: float, r: float, rho2: float, eps: float = float("nan")) -> Contour:
    if J < 2:
        raise ValueError("need at least two quadrature nodes")
    if not 0 < t <= 1:
        raise ValueError("axis ratio t must lie in (0, 1]")
    if r <= 0:
        raise ValueError("radius must be positive")
    phi = np.pi / J
    theta = (2 * np.arange(1, J + 1) - 1) * phi
    nodes = (t * r * (np.cos(theta) - np.cos(phi))
             + 1j * (r * np.sin(theta) - rho2 / 2))
    # a rigid translation leaves dz/dtheta, hence the weights, unchanged
    weights = (r * np.cos(theta) + 1j * t * r * np.sin(theta)) / J
    return Contour(t, r, J, eps, rho2, nodes, weights)


def ellipse_contour(J: int, t: float, r: float, center: complex) -> Contour:
    """Same trapezoid rule on an ellipse with an arbitrary center.

    The solver's contour keeps the origin between two neighbouring nodes, so
    its raw quadrature of 1/z is only accurate up to a scalar; this variant
    (origin well inside) exposes the rule's geometric convergence in J.
    """
    if J < 2 or r <= 0 or not 0 < t <= 1:
        raise ValueError("need J >= 2, r > 0 and t in (0, 1]")
    theta = (2 * np.arange(1, J + 1) - 1) * np.pi / J
    nodes = complex(center) + t * r * np.cos(theta) + 1j * r * np.sin(theta)
    weights = (r * np.cos(theta) + 1j * t * r * np.sin(theta)) / J
    return Contour(t, r, J, float("nan"), float("nan"), nodes, weights, complex(center))


def make_contour(box: SpectralBox, J: int = 6, t: float = 0.1, eps: float = 0.35) -> Contour:
    """Nodes on an ellipse whose radius keeps every node at least ``eps`` off the strip."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    rho2 = box.depth
    r = (rho2 / 2 + eps) / np.sin(np.pi / J)
    return contour_from_radius(J, t, r, rho2, eps)


def default_eps(omega: float, coefficient: float = None) -> float:
    """Clearance eps = c/omega with c set so 35.56 wavelengths give eps = 0.8."""
    if coefficient is None:
        coefficient = EPS_COEFFICIENT
    return coefficient / omega


EPS_COEFFICIENT = 0.8 * 2 * np.pi * 80 / 2.25


def quadrature_apply(contour: Contour, solves) -> np.ndarray:
    """w = sum_j sigma_j / z_j * y_j for precomputed node solutions."""
    w = 0
    for z, s, y in zip(contour.nodes, contour.weights, solves):
        w = w + (s / z) * y
    return w


def filtered_inverse_oracle(eigs, eigvecs, contour: Contour, f, guard: float = 1e-8) -> np.ndarray:
    """Exact P A^{-1} f for a normal matrix given its eigendecomposition.

    Only eigenvalues outside the contour contribute. ``eigvecs`` holds
    orthonormal eigenvectors as columns (``None`` means the identity).
    """
    eigs = np.asarray(eigs, dtype=np.complex128)
    if np.min(_distance_to_contour(eigs, contour)) < guard:
        raise ValueError("an eigenvalue lies on the contour")
    f = np.asarray(f, dtype=np.complex128)
    coef = f if eigvecs is None else eigvecs.conj().T @ f
    keep = ~contour.inside(eigs)
    coef = np.where(keep, coef / np.where(keep, eigs, 1.0), 0.0)
    return coef if eigvecs is None else eigvecs @ coef


def _distance_to_contour(lam: np.ndarray, contour: Contour, samples: int = 4096) -> np.ndarray:
    theta = np.linspace(0, 2 * np.pi, samples, endpoint=False)
    curve = contour.center + contour.t * contour.r * np.cos(theta) + 1j * contour.r * np.sin(theta)
    d = np.full(lam.shape, np.inf)
    for chunk in np.array_split(curve, 16):
        d = np.minimum(d, np.min(np.abs(lam[:, None] - chunk[None, :]), axis=1))
    return d


# Impedance eigenproblem on the unit interval --------------------------------------------

@dataclass(frozen=True)
class PhaseRoot:
    xi: complex
    sign: int
    residual: float


def phase_residual(z, omega: float, sign: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.complex128)
    return np.abs((omega - z) / (omega + z) - sign * np.exp(-1j * z))


def _newton(z, omega, sign, maxiter=60, tol=1e-14):
    """Damped Newton on G(z) = (omega - z) - sign*(omega + z)*exp(-iz)."""
    for _ in range(maxiter):
        e = np.exp(-1j * z)
        g = (omega - z) - sign * (omega + z) * e
        dg = -1 - sign * e * (1 - 1j * (omega + z))
        if dg == 0 or not np.isfinite(g):
            return None
        step = g / dg
        lam = 1.0
        gn = abs(g)
        while lam > 1e-4:
            zn = z - lam * step
            en = np.exp(-1j * zn)
            if abs((omega - zn) - sign * (omega + zn) * en) < gn:
                break
            lam /= 2
        else:
            return z
        z = zn
        if abs(lam * step) <= tol * max(1.0, abs(z)):
            break
    return z


def impedance_phase_roots(omega: float, count: int, dedup: float = 1e-6,
                          seeds=None) -> list:
    """Roots xi in Re >= 0, Im <= 0 of (omega - z)/(omega + z) = +-exp(-iz), sorted by Re.

    Seeds default to k*pi - 0.5i for k = 0..count+4, each refined first by the
    fixed-point map z <- k*pi + i*Log((omega - z)/(omega + z)), then by damped
    Newton on both sign branches. The trivial root z = 0 is dropped.
    """
    if omega <= 0:
        raise ValueError("omega must be positive")
    if seeds is None:
        seeds = [k * np.pi - 0.5j for k in range(count + 5)]
    found: list[PhaseRoot] = []
    for seed in seeds:
        z0 = complex(seed)
        k = np.round(z0.real / np.pi)
        z = z0
        for _ in range(20):
            w = (omega - z) / (omega + z)
            if w == 0:
                break
            z = k * np.pi + 1j * np.log(w)
        for start in (z, z0):
            for sign in (1, -1):
                root = _newton(start, omega, sign)
                if root is None:
                    continue
                res = float(phase_residual(root, omega, sign))
                if res >= 1e-10 or abs(root) < 1e-8:
                    continue
                if root.real < -1e-12 or root.imag > 1e-12:
                    continue
                if any(abs(root - r.xi) < dedup for r in found):
                    continue
                found.append(PhaseRoot(complex(max(root.real, 0.0) if abs(root.real) < 1e-12 else root.real,
                                               root.imag), sign, res))
    found.sort(key=lambda r: r.xi.real)
    if len(found) < count:
        warnings.warn(f"found {len(found)} of {count} requested roots", stacklevel=2)
    return found[:count]


def tensor_eigenvalues(roots, omega: float, d: int = 2) -> np.ndarray:
    """lambda = sum_j xi_j^2 - omega^2 over all d-tuples of 1D roots."""
    sq = np.array([r.xi if isinstance(r, PhaseRoot) else r for r in roots]) ** 2
    total = sq
    for _ in range(d - 1):
        total = (total[:, None] + sq[None, :]).reshape(-1)
    return total - omega ** 2


def imaginary_gap(omega: float, ratio: float = 0.5, d: int = 2) -> float:
    """min |Im lambda| / omega over tensor eigenvalues with |lambda| <= ratio * omega^2."""
    reach = np.sqrt((1 + ratio) * omega ** 2)
    count = int(np.ceil(reach / np.pi)) + 3
    roots = impedance_phase_roots(omega, count)
    if roots and roots[-1].xi.real < reach:
        raise RuntimeError("root set does not cover the requested eigenvalue window")
    lam = tensor_eigenvalues(roots, omega, d)
    lam = lam[np.abs(lam) <= ratio * omega ** 2]
    return float(np.min(np.abs(lam.imag)) / omega)
