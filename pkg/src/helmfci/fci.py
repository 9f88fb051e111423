"""Contour-integral preconditioner: quadrature over node solves plus an inner GMRES correction.

``fci_apply`` approximates A^{-1} f once. ``outer_solve`` wraps it as a variable
preconditioner inside flexible GMRES (or iterative refinement), on either the
n x n system or the 2n x 2n first-order form.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .core import ConvergenceError, NonFiniteError, Operator, SolveStats, as_vector, diagonal_operator, norm
from .krylov import KrylovConfig, gmres, optimal_step
from .operators import (DoubledSystem, Grid3, HelmholtzComposite, WavespeedModel, assemble_helmholtz, build_fd7_laplacian,
                        build_ilu0_precond, build_invlap_precond, build_mass, build_spectral_laplacian,
                        build_sponge, doubled_from, lift_preconditioner)
from .polysolve import PolyScheme, fixpoint_solve, tune_scheme
from .spectrum import Contour, SpectralBox, box_from_operator, default_eps, doubled_box, make_contour

FORMULATIONS = ("single", "doubled")


@dataclass
class FciConfig:
    contour: Contour
    schemes: list
    node_reduction: float = 5.0
    inner_its: int = 10
    inner_preconditioner: Optional[Operator] = None
    formulation: str = "single"
    warm_start: bool = False
    threads: int = 1
    max_node_sweeps: int = 2000

    def __post_init__(self):
        if len(self.schemes) != self.contour.J:
            raise ValueError(f"need one scheme per node: {len(self.schemes)} vs {self.contour.J}")
        for z, s in zip(self.contour.nodes, self.schemes):
            if abs(complex(s.z) - complex(z)) > 1e-12 * max(1.0, abs(z)):
                raise ValueError(f"scheme tuned for {s.z} attached to node {z}")
        if self.node_reduction <= 1:
            raise ValueError("node_reduction must exceed 1")
        if self.inner_its < 0:
            raise ValueError("inner_its must be non-negative")
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"formulation must be one of {FORMULATIONS}")


def tune_nodes(box: SpectralBox, contour: Contour, node_reduction: float = 5.0,
               q_max: int = 5) -> list:
    """One independently tuned scheme per quadrature node."""
    return [tune_scheme(box, z, q_max=q_max, target=1.0 / node_reduction) for z in contour.nodes]


def _solve_node(A, j, z, f, scheme, tol, max_sweeps, x0):
    try:
        y, st = fixpoint_solve(A, z, f, scheme, tol=tol, max_sweeps=max_sweeps, x0=x0)
    except ConvergenceError as exc:
        raise ConvergenceError(f"node {j} (z={complex(z):.4g}) diverged; the spectral box is "
                               "probably too small", {"node": j, **exc.diagnostics}) from exc
    if not st.converged:
        raise ConvergenceError(f"node {j} (z={complex(z):.4g}) missed its tolerance in "
                               f"{max_sweeps} sweeps", {"node": j, "history": st.residual_history})
    return y, st


def fci_apply(A: Operator, f, cfg: FciConfig, warm: Optional[list] = None) -> tuple:
    """Approximate A^{-1} f by quadrature over the contour plus a short GMRES correction.

    ``stats.mvs`` counts every application of A: node solves, the product A*w
    and the inner GMRES steps. ``warm`` (a list, one slot per node) supplies and
    receives warm starts when ``cfg.warm_start`` is set.
    """
    f = as_vector(f, A.dim)
    stats = SolveStats(info={"node_mvs": [], "node_sweeps": [], "node_factors": [],
                             "quad_mvs": 0, "inner_mvs": 0, "inner_its": 0, "d": 0j})
    t0 = time.perf_counter()
    if not np.any(f):
        stats.record(0.0)
        stats.converged = True
        return np.zeros_like(f), stats
    tol = 1.0 / cfg.node_reduction
    nodes = cfg.contour.nodes
    starts = [None] * len(nodes)
    if cfg.warm_start and warm is not None:
        starts = [warm[j] if j < len(warm) else None for j in range(len(nodes))]

    def work(j):
        return _solve_node(A, j, nodes[j], f, cfg.schemes[j], tol, cfg.max_node_sweeps, starts[j])

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(work, range(len(nodes))))
    else:
        results = [work(j) for j in range(len(nodes))]

    w = np.zeros_like(f)
    for j, (y, st) in enumerate(results):
        w += (cfg.contour.weights[j] / nodes[j]) * y
        stats.info["node_mvs"].append(st.mvs)
        stats.info["node_sweeps"].append(st.its)
        stats.info["node_factors"].append(st.final_residual)
        stats.mvs += st.mvs
    if cfg.warm_start and warm is not None:
        warm[:] = [y for y, _ in results]

    Aw = A.apply(w)
    stats.mvs += 1
    stats.info["quad_mvs"] = 1
    d, r = optimal_step(Aw, f)
    stats.info["d"] = d
    x = d * w
    if cfg.inner_its > 0 and np.any(r):
        icfg = KrylovConfig(restart=cfg.inner_its, max_total_its=cfg.inner_its, tol=1e-14,
                            preconditioner=cfg.inner_preconditioner)
        v, ist = gmres(A, r, None, icfg)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("inner GMRES returned non-finite values")
        x = x + v
        stats.mvs += ist.mvs
        stats.info["inner_mvs"] = ist.mvs
        stats.info["inner_its"] = ist.its
        stats.info["inner_relres"] = ist.final_residual * norm(r) / norm(f)
    stats.its = 1
    stats.seconds = time.perf_counter() - t0
    stats.converged = True
    return x, stats


class FciPreconditioner:
    """Callable wrapper around ``fci_apply`` for use as a flexible preconditioner.

    ``mvs`` is the running matvec total; ``log`` keeps one diagnostics record per
    application.
    """

    def __init__(self, A: Operator, cfg: FciConfig):
        self.A = A
        self.cfg = cfg
        self.mvs = 0
        self.log: list = []
        self._warm: list = []

    def __call__(self, v) -> np.ndarray:
        x, st = fci_apply(self.A, v, self.cfg, self._warm)
        self.mvs += st.mvs
        info = st.info
        self.log.append({
            "apply": len(self.log) + 1,
            "node_factors": [float(a) for a in info["node_factors"]],
            "node_mvs": list(info["node_mvs"]),
            "node_sweeps": list(info["node_sweeps"]),
            "d": [float(np.real(info["d"])), float(np.imag(info["d"]))],
            "inner_its": info["inner_its"],
            "inner_mvs": info["inner_mvs"],
            "quad_mvs": info["quad_mvs"],
            "mvs": st.mvs,
            "seconds": st.seconds,
        })
        return x


# Configuration and setup -----------------------------------------------------------------

@dataclass
class SolverConfig:
    tol: float = 1e-6
    restart: int = 20
    max_outer: int = 200
    formulation: str = "single"
    J: int = 6
    t: float = 0.1
    eps: Optional[float] = None
    eps_coefficient: Optional[float] = None
    node_reduction: float = 5.0
    inner_its: int = 10
    q_max: int = 5
    warm_start: bool = False
    threads: int = 1
    refinement: bool = False
    stagnation_window: int = 3
    stagnation_ratio: float = 0.99
    box_inflation: float = 1.02
    rho_seed: int = 0

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"formulation must be one of {FORMULATIONS}")
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")


def _inner_preconditioner(A: HelmholtzComposite, threads: int = 1) -> Optional[Operator]:
    grid = A.grid
    if A.discretization == "spectral":
        return build_invlap_precond(grid, workers=threads)
    matrix = getattr(A.S, "matrix", None)
    if matrix is None:
        return None
    # S + I keeps the factorization away from the near-null modes, mirroring max(lambda, 1)
    return build_ilu0_precond(matrix, shift=1.0)


@dataclass
class PreparedSolver:
    operator: Operator
    box: SpectralBox
    fci: FciConfig
    eps: float


def prepare(A: HelmholtzComposite, cfg: SolverConfig) -> PreparedSolver:
    """Spectral box of A plus the contour setup (node schemes and inner preconditioner)."""
    box = box_from_operator(A, inflation=cfg.box_inflation, seed=cfg.rho_seed)
    if cfg.eps is not None:
        eps = cfg.eps
    else:
        omega = A.grid.omega if A.grid is not None else None
        if omega is None:
            raise ValueError("eps must be given when the operator carries no grid")
        eps = default_eps(omega, cfg.eps_coefficient)
    inner = _inner_preconditioner(A, cfg.threads) if cfg.inner_its > 0 else None
    op: Operator = A
    if cfg.formulation == "doubled":
        op = doubled_from(A)
        box = doubled_box(box)
        if inner is not None:
            inner = lift_preconditioner(inner, A.hermitian_part())
    contour = make_contour(box, cfg.J, cfg.t, eps)
    schemes = tune_nodes(box, contour, cfg.node_reduction, cfg.q_max)
    fcfg = FciConfig(contour, schemes, cfg.node_reduction, cfg.inner_its, inner,
                     cfg.formulation, cfg.warm_start, cfg.threads)
    return PreparedSolver(op, box, fcfg, eps)


def _stagnation_guard(cfg: SolverConfig, pre: FciPreconditioner, history: list):
    def check(its, relres):
        history.append(relres)
        k = cfg.stagnation_window
        if len(history) > k and history[-1] > cfg.stagnation_ratio * history[-1 - k]:
            raise ConvergenceError(
                f"outer iteration stagnated: relative residual {history[-1]:.3e} after {its} "
                f"iterations, less than {100 * (1 - cfg.stagnation_ratio):.0f}% below the value "
                f"{k} iterations earlier",
                {"history": list(history), "fci": pre.log[-k:]})
    return check


def outer_solve(A: HelmholtzComposite, f, cfg: Optional[SolverConfig] = None,
                prepared: Optional[PreparedSolver] = None) -> tuple:
    """Solve A u = f with the contour preconditioner inside flexible GMRES.

    Returns (u, stats). ``stats.info`` carries the per-application diagnostics
    (``fci``), the matvec split and the resolved box and contour parameters.
    """
    cfg = cfg or SolverConfig()
    f = as_vector(f, A.dim)
    prepared = prepared or prepare(A, cfg)
    op = prepared.operator
    rhs = op.embed(f) if cfg.formulation == "doubled" else f
    pre = FciPreconditioner(op, prepared.fci)
    history: list = []
    guard = _stagnation_guard(cfg, pre, history)
    if cfg.refinement:
        x, stats = _refine(op, rhs, pre, cfg, guard)
    else:
        kcfg = KrylovConfig(restart=cfg.restart, max_total_its=cfg.max_outer, tol=cfg.tol,
                            preconditioner=pre, flexible=True)
        x, stats = gmres(op, rhs, None, kcfg, callback=guard)
    if cfg.formulation == "doubled":
        u = op.extract(x)
        if stats.converged:
            u = _correct_doubled(A, op, f, u, pre, cfg, stats)
    else:
        u = x
    node = sum(sum(e["node_mvs"]) for e in pre.log)
    stats.info.update({
        "fci": pre.log,
        "node_mvs": node,
        "inner_mvs": sum(e["inner_mvs"] for e in pre.log),
        "quad_mvs": sum(e["quad_mvs"] for e in pre.log),
        "inner_its_total": sum(e["inner_its"] for e in pre.log),
        "box": asdict(prepared.box),
        "eps": prepared.eps,
        "nodes": [[float(z.real), float(z.imag)] for z in prepared.fci.contour.nodes],
        "schemes": [{"q": s.q, "delta": s.delta, "nu": s.nu} for s in prepared.fci.schemes],
        "formulation": cfg.formulation,
    })
    if not stats.converged:
        raise ConvergenceError(f"outer iteration reached {stats.its} iterations at relative "
                               f"residual {stats.final_residual:.3e}", stats.info)
    return u, stats


MAX_CORRECTIONS = 3


def _correct_doubled(A, op, f, u, pre, cfg, stats):
    """Defect correction on A u = f after a converged doubled solve.

    A small residual of the first block row can grow by up to rho1 in the
    extracted solution, so the Helmholtz residual is checked (one counted
    matvec) and, when above tolerance, the doubled system is solved again for
    the defect.
    """
    nf = norm(f)
    passes = 0
    while True:
        r = f - A.apply(u)
        stats.mvs += 1
        stats.info["arnoldi_mvs"] += 1
        rel = norm(r) / nf
        if rel <= cfg.tol or passes >= MAX_CORRECTIONS or stats.its >= cfg.max_outer:
            break
        passes += 1
        kcfg = KrylovConfig(restart=cfg.restart, max_total_its=cfg.max_outer - stats.its,
                            tol=0.5 * cfg.tol / rel, preconditioner=pre, flexible=True)
        dx, st = gmres(op, op.embed(r), None, kcfg)
        u = u + op.extract(dx)
        base, scale = stats.its, rel
        for k, rr in st.residual_history[1:]:
            stats.residual_history.append((base + k, rr * scale))
        for e in st.info["trace"][1:]:
            stats.info["trace"].append({**e, "its": base + e["its"], "relres": e["relres"] * scale,
                                        "mvs": stats.mvs + e["mvs"]})
        stats.its += st.its
        stats.mvs += st.mvs
        stats.info["arnoldi_mvs"] += st.info["arnoldi_mvs"]
        stats.info["precond_mvs"] += st.info["precond_mvs"]
    stats.info["helmholtz_relres"] = rel
    stats.info["corrections"] = passes
    stats.converged = rel <= cfg.tol
    return u


def _refine(op, rhs, pre, cfg, guard) -> tuple:
    x = np.zeros_like(rhs)
    r = rhs.copy()
    nf = norm(rhs)
    stats = SolveStats(info={"arnoldi_mvs": 0, "precond_mvs": 0, "trace": []})
    t0 = time.perf_counter()

    def log(rel):
        stats.record(rel)
        stats.info["trace"].append({"its": stats.its, "relres": rel, "mvs": stats.mvs,
                                    "seconds": time.perf_counter() - t0})

    log(1.0)
    while stats.its < cfg.max_outer:
        before = pre.mvs
        x = x + pre(r)
        stats.info["precond_mvs"] += pre.mvs - before
        r = rhs - op.apply(x)
        stats.info["arnoldi_mvs"] += 1
        stats.mvs += pre.mvs - before + 1
        stats.its += 1
        rel = norm(r) / nf
        log(rel)
        guard(stats.its, rel)
        if rel <= cfg.tol:
            break
    stats.seconds = time.perf_counter() - t0
    stats.converged = stats.final_residual <= cfg.tol
    return x, stats


# Problem setup -----------------------------------------------------------------------------

@dataclass
class Problem:
    grid: Grid3
    model: WavespeedModel
    A: HelmholtzComposite
    f: np.ndarray


def default_sponge_width(n: int) -> int:
    return max(1, int(round(0.15 * n)))


def point_source(grid: Grid3) -> np.ndarray:
    """Unit impulse at the grid center."""
    f = np.zeros(grid.shape, dtype=np.complex128)
    f[tuple(n // 2 for n in grid.shape)] = 1.0
    return f.reshape(-1)


def build_problem(n: int, l_min: float = 2.25, discretization: str = "spectral",
                  model: str | WavespeedModel = "eight-anomaly", contrast: float = 2.0,
                  sponge_width: Optional[int] = None, sponge_strength: float = 0.9,
                  threads: int = 1, dims: Optional[Sequence[int]] = None) -> Problem:
    """Helmholtz operator on an n^3 grid (or ``dims``) with a centered point source."""
    dims = tuple(dims) if dims is not None else (n, n, n)
    grid = Grid3(*dims, l_min)
    if isinstance(model, WavespeedModel):
        wm = model
    elif model == "eight-anomaly":
        wm = WavespeedModel.eight_anomaly(grid, contrast)
    elif model == "constant":
        wm = WavespeedModel.uniform(grid)
    else:
        raise ValueError(f"unknown model {model!r}")
    if discretization == "spectral":
        S = build_spectral_laplacian(grid, workers=threads)
    elif discretization == "fd7":
        S = build_fd7_laplacian(grid)
    else:
        raise ValueError(f"unknown discretization {discretization!r}")
    active = [grid.dims[k] for k in grid.active_axes]
    width = default_sponge_width(min(active)) if sponge_width is None else sponge_width
    A = assemble_helmholtz(S, build_mass(wm), build_sponge(grid, width, sponge_strength),
                           discretization)
    return Problem(grid, wm, A, point_source(grid))


# Shifted-system benchmark ------------------------------------------------------------------

def interval_test_operator(b1: float, b2: float, n: int = 2000) -> Operator:
    """Sparse Hermitian matrix with spectrum spread over exactly [b1, b2].

    A shifted and scaled 1D Dirichlet second-difference matrix, so the
    eigenvalues follow the arcsine density of a discrete Laplacian.
    """
    k = np.arange(1, n + 1)
    lam = 4 * np.sin(k * np.pi / (2 * (n + 1))) ** 2
    lo, hi = lam[0], lam[-1]
    T = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")
    scale = (b2 - b1) / (hi - lo)
    mat = (scale * T + (b1 - scale * lo) * sp.identity(n, format="csr")).astype(np.complex128).tocsr()
    op = Operator(n, "dense-test", lambda x: mat @ x, name=f"interval[{b1:g},{b2:g}]", hermitian=True)
    op.matrix = mat
    op.interval = (b1, b2)
    return op


@dataclass
class ShiftCell:
    interval: tuple
    z: complex
    mvs: dict
    schemes: dict
    winner: str


@dataclass
class ShiftReport:
    cells: list = field(default_factory=list)
    reduction: float = 1e-2

    def table(self, formulation: str) -> list:
        """Rows of matvec counts per interval, columns per shift."""
        intervals = sorted({c.interval for c in self.cells}, key=lambda iv: iv[1] - iv[0])
        shifts = []
        for c in self.cells:
            if c.z not in shifts:
                shifts.append(c.z)
        look = {(c.interval, c.z): c for c in self.cells}
        return [[look[(iv, z)].mvs.get(formulation, math.inf) for z in shifts] for iv in intervals]

    def format(self) -> str:
        lines = []
        for form in ("single", "doubled"):
            lines.append(f"{form}: matvecs to reduce the residual by {1 / self.reduction:g} (* = cheaper)")
            for c in self.cells:
                m = c.mvs.get(form, math.inf)
                mark = "*" if c.winner == form else " "
                lines.append(f"  [{c.interval[0]:g},{c.interval[1]:g}] z={c.z:.4g}: {m}{mark}")
        return "\n".join(lines)


def bench_shifted(operators: Sequence[Operator], shifts: Sequence[complex],
                  formulations: Sequence[str] = FORMULATIONS, reduction: float = 1e-2,
                  q_max: int = 5, max_mvs: int = 20000, seed: int = 0) -> ShiftReport:
    """Matvecs to cut the residual of equivalent shifted problems by ``1/reduction``.

    For Hermitian A with interval [b1, b2] (attribute ``interval``) the single
    form solves (A - zI)y = f. The doubled form solves (iC - I - sI)x = (0; f)
    with A2 = 0 and (s + 1)^2 = z + 1, which carries the same solution.
    Each cell uses its own tuned scheme; a cell that fails records inf.
    """
    rng = np.random.default_rng(seed)
    report = ShiftReport(reduction=reduction)
    for A in operators:
        b1, b2 = A.interval
        f = rng.standard_normal(A.dim) + 1j * rng.standard_normal(A.dim)
        box = SpectralBox(b1, b2, 0.0)
        C = DoubledSystem(A, diagonal_operator(np.zeros(A.dim)))
        for z in shifts:
            z = complex(z)
            mvs, schemes = {}, {}
            for form in formulations:
                if form == "single":
                    op, zz, rhs, bx = A, z, f, box
                else:
                    op, zz, rhs, bx = C, np.sqrt(z + 1) - 1, C.embed(f), doubled_box(box)
                try:
                    sch = tune_scheme(bx, zz, q_max=q_max, target=reduction)
                    _, st = fixpoint_solve(op, zz, rhs, sch, tol=reduction,
                                           max_sweeps=max(1, max_mvs // sch.q))
                    mvs[form] = st.mvs if st.converged else math.inf
                    schemes[form] = (sch.q, sch.delta)
                except (ConvergenceError, ValueError):
                    mvs[form] = math.inf
                    schemes[form] = None
            winner = min(mvs, key=lambda k: (mvs[k], FORMULATIONS.index(k)))
            report.cells.append(ShiftCell((b1, b2), z, mvs, schemes, winner))
    return report
