"""Contour-integral preconditioning for high-frequency Helmholtz problems.

Modules:
    core        vector kernels and the operator contract
    operators   discrete Helmholtz operators and the doubled system
    spectrum    spectral boxes and contour quadrature
    polysolve   polynomial fixed-point solvers for shifted systems
    krylov      restarted and flexible GMRES
    fci         the contour preconditioner and the outer solver
    cli         JSON-configured command-line runs
"""

__version__ = "0.1.0"
