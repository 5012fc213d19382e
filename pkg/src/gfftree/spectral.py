"""Leading eigenpair of the truncated step operator and the critical level.

The operator acts on L2(nu) as

    (L f)(a) = (d-1) * 1_{a >= h} * E[ f(drift*a + Y) * 1_{drift*a + Y >= h} ]

with Y ~ N(0, var_step).  Its Lebesgue kernel on [h, inf)^2 is
(d-1) * phi_step(b - drift*a), which is self-adjoint against the nu density.
A Nystrom discretization with symmetric sqrt(weight * density) scaling turns
the eigenproblem into a symmetric nonnegative matrix problem; the operator
norm lam_h is its top eigenvalue, simple, with a positive eigenfunction
chi_h vanishing below h.  The critical level h_star is the unique level
where lam_h = 1, located by bisection (lam is strictly decreasing in h,
ranging over (0, d-1)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .grids import (
    BELOW_ZERO,
    BELOW_ONE,
    Grid,
    GridFunction,
    GridSpec,
    build_grid_from_spec,
    step_expectation_nodes,
)
from .model import ModelParams

__all__ = [
    "SpectralConfig",
    "SpectralSolution",
    "HStarResult",
    "NonConvergenceError",
    "kernel",
    "discretize",
    "discretize_raw",
    "leading_eig",
    "lambda_of_h",
    "find_h_star",
    "chi_exponent_fit",
    "chi_upper_bound_constant",
    "apply_Lh",
    "frechet_apply",
    "frechet_operator_norm",
]


class NonConvergenceError(RuntimeError):
    """An iterative solver ran out of its iteration budget."""

    def __init__(self, message: str, residual: float | None = None, iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SpectralConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    eig_tol: float = 1e-12
    residual_tol: float = 1e-10
    max_iter: int = 100_000
    dense: bool = False


@dataclass(frozen=True)
class SpectralSolution:
    h: float
    lam: float
    chi: GridFunction
    residual: float
    iterations: int

    @property
    def kappa(self) -> float:
        """Power-law exponent 1 - log_{d-1}(lam) of the eigenfunction."""
        d = self.chi.grid.params.d
        return 1.0 - np.log(self.lam) / np.log(d - 1)


@dataclass(frozen=True)
class HStarResult:
    h_star: float
    bracket: tuple[float, float]
    lambda_at_h_star: float
    evaluations: int


def kernel(params: ModelParams, h: float, a, b):
    """Lebesgue kernel of the operator: (d-1)*phi_step(b - drift*a) on [h, inf)^2."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    var = params.var_step
    dens = np.exp(-0.5 * (b - params.drift * a) ** 2 / var) / np.sqrt(2.0 * np.pi * var)
    out = (params.d - 1) * dens * (a >= h) * (b >= h)
    return float(out) if out.ndim == 0 else out


def discretize_raw(params: ModelParams, grid: Grid) -> np.ndarray:
    """Nystrom matrix of the operator before symmetrization.

    M[i,j] = s_i * k_nu(x_i, x_j) * s_j with s_i = sqrt(w_i * rho(x_i)) and
    k_nu the kernel against nu, i.e. the Lebesgue kernel divided by the nu
    density of its second argument.  The detailed-balance identity
    k(a,b) rho(a) = k(b,a) rho(b) makes this symmetric up to quadrature
    rounding.
    """
    s = np.sqrt(grid.weights * grid.nu_density)
    k = kernel(params, grid.h, grid.nodes[:, None], grid.nodes[None, :])
    return s[:, None] * (k / grid.nu_density[None, :]) * s[None, :]


def discretize(params: ModelParams, grid: Grid) -> np.ndarray:
    """Symmetrized Nystrom matrix of the operator on the given grid."""
    m = discretize_raw(params, grid)
    return 0.5 * (m + m.T)


def leading_eig(
    matrix: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 100_000,
    residual_tol: float = 1e-10,
    start: np.ndarray | None = None,
):
    """Top eigenpair of a symmetric nonnegative matrix by power iteration.

    Returns (lam, unit eigenvector, residual, iterations).  The eigenvector
    sign is fixed to the nonnegative one (Perron-Frobenius); convergence
    requires both a relative eigenvalue change below ``tol`` and a residual
    ||M v - lam v|| below ``residual_tol``.
    """
    n = matrix.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n)) if start is None else start / np.linalg.norm(start)
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise ValueError("matrix annihilates the iterate; no positive eigenpair")
        v_new = w / norm
        lam_new = float(v_new @ (matrix @ v_new))
        residual = float(np.linalg.norm(matrix @ v_new - lam_new * v_new))
        done = abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300) and residual <= residual_tol
        v, lam = v_new, lam_new
        if done:
            break
    else:
        raise NonConvergenceError(
            f"power iteration did not converge in {max_iter} iterations "
            f"(residual {residual:.3e}); grid may be too coarse or spectrum near-degenerate",
            residual=residual,
            iterations=max_iter,
        )
    if v.sum() < 0:
        v = -v
    v = np.clip(v, 0.0, None)
    v /= np.linalg.norm(v)
    return lam, v, residual, it


def _leading_eig_dense(matrix: np.ndarray):
    vals, vecs = scipy.linalg.eigh(matrix)
    lam = float(vals[-1])
    v = vecs[:, -1]
    if v.sum() < 0:
        v = -v
    v = np.clip(v, 0.0, None)
    v /= np.linalg.norm(v)
    residual = float(np.linalg.norm(matrix @ v - lam * v))
    return lam, v, residual, 1


def lambda_of_h(
    params: ModelParams,
    h: float,
    config: SpectralConfig = SpectralConfig(),
    grid: Grid | None = None,
) -> SpectralSolution:
    """Full pipeline: grid -> Nystrom matrix -> top eigenpair -> chi on the grid.

    The returned eigenfunction has unit L2(nu) norm; that is automatic
    because the symmetric scaling makes the discrete euclidean norm of the
    eigenvector coincide with the quadrature L2(nu) norm of chi.
    """
    if grid is None:
        grid = build_grid_from_spec(params, h, config.grid)
    m = discretize(params, grid)
    s = np.sqrt(grid.weights * grid.nu_density)
    if config.dense:
        lam, v, residual, iters = _leading_eig_dense(m)
    else:
        lam, v, residual, iters = leading_eig(
            m,
            tol=config.eig_tol,
            max_iter=config.max_iter,
            residual_tol=config.residual_tol,
            start=s,
        )
    if not 0.0 < lam < params.d - 1:
        raise ValueError(f"computed lambda {lam} outside (0, {params.d - 1})")
    chi = GridFunction(grid, v / s, BELOW_ZERO)
    return SpectralSolution(h=float(h), lam=lam, chi=chi, residual=residual, iterations=iters)


def find_h_star(
    params: ModelParams,
    tol: float = 1e-6,
    config: SpectralConfig = SpectralConfig(),
    max_bisect: int = 200,
) -> HStarResult:
    """Bisection on h -> lam_h - 1.

    The bracket starts at [-1, 1] and doubles outward (at most 12 times per
    side); failure to find a sign change signals a discretization problem,
    since existence and uniqueness of the crossing are guaranteed.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    evals = 0

    def lam_at(h: float) -> float:
        nonlocal evals
        evals += 1
        return lambda_of_h(params, h, config).lam

    lo, hi = -1.0, 1.0
    f_lo, f_hi = lam_at(lo) - 1.0, lam_at(hi) - 1.0
    widenings = 0
    while f_lo <= 0.0 and widenings < 12:
        lo *= 2.0
        f_lo = lam_at(lo) - 1.0
        widenings += 1
    widenings = 0
    while f_hi >= 0.0 and widenings < 12:
        hi *= 2.0
        f_hi = lam_at(hi) - 1.0
        widenings += 1
    if f_lo <= 0.0 or f_hi >= 0.0:
        raise NonConvergenceError(
            "no sign change of lam_h - 1 found in a wide scan; discretization failure"
        )

    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        f_mid = lam_at(mid) - 1.0
        if abs(f_mid) <= tol:
            return HStarResult(mid, (lo, hi), f_mid + 1.0, evals)
        if f_mid > 0.0:
            lo = mid
        else:
            hi = mid
    raise NonConvergenceError(
        f"bisection did not drive |lam - 1| below {tol} in {max_bisect} steps"
    )


def chi_exponent_fit(sol: SpectralSolution, fit_range: tuple[float, float]) -> float:
    """Least-squares slope of log chi(a) against log a over the fit range.

    For the exact eigenfunction the slope equals kappa = 1 - log_{d-1}(lam).
    Rejects windows narrower than one decade or sticking out of the grid.
    """
    a_lo, a_hi = fit_range
    grid = sol.chi.grid
    d = grid.params.d
    if a_lo < max(grid.h, float(d - 1)):
        raise ValueError(f"fit window must start at or above max(h, d-1) = {max(grid.h, d - 1)}")
    if a_hi > grid.nodes[-1]:
        raise ValueError("fit window exceeds the grid; enlarge cutoff_sigmas")
    if a_hi < 10.0 * a_lo * (1.0 - 1e-12):
        raise ValueError("fit window narrower than one decade")
    mask = (grid.nodes >= a_lo) & (grid.nodes <= a_hi)
    vals = sol.chi.values[mask]
    if mask.sum() < 8 or np.any(vals <= 0):
        raise ValueError("not enough positive eigenfunction values in the fit window")
    slope, _ = np.polyfit(np.log(grid.nodes[mask]), np.log(vals), 1)
    return float(slope)


def chi_upper_bound_constant(params: ModelParams) -> float:
    """Explicit constant c with chi_h(a) <= c * a**kappa_h for a >= d-1."""
    return float(
        np.sqrt(params.var_root / params.var_step)
        * np.exp((params.d - 1) ** 2 / (2.0 * params.var_root))
    )


def apply_Lh(params: ModelParams, h: float, f: GridFunction) -> GridFunction:
    """Apply the operator by quadrature to a function vanishing below h."""
    if f.below_h != BELOW_ZERO:
        raise ValueError("operator argument must vanish below h (below_h = 0)")
    g = f.grid
    if abs(g.h - h) > 1e-12:
        raise ValueError("grid level does not match h")
    vals = (params.d - 1) * (g.step_matrix @ f.values + g.step_tail * f.values[-1])
    return GridFunction(g, vals, BELOW_ZERO)


def frechet_apply(
    params: ModelParams, h: float, f: GridFunction, g: GridFunction
) -> GridFunction:
    """Derivative of the nonlinear generating operator at f, applied to g.

    Equals 1_{[h,inf)} * (d-1) * E[f(drift*.+Y)]**(d-2) * E[g(drift*.+Y)].
    With f identically 1 this reduces to the linear operator on functions
    vanishing below h.
    """
    if f.below_h != BELOW_ONE:
        raise ValueError("base point f must carry below_h = 1")
    if g.below_h != BELOW_ZERO:
        raise ValueError("direction g must vanish below h (below_h = 0)")
    ef = step_expectation_nodes(f)
    eg = step_expectation_nodes(g)
    vals = (params.d - 1) * ef ** (params.d - 2) * eg
    return GridFunction(f.grid, vals, BELOW_ZERO)


def frechet_operator_norm(
    params: ModelParams,
    h: float,
    f: GridFunction,
    scale: float = 1.0,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> float:
    """L2(nu) operator norm of g -> scale * (derivative at f applied to g).

    Power iteration on B^T B where B is the weighted-similarity transform of
    the discretized linearization restricted to functions vanishing below h.
    """
    grid = f.grid
    ef = step_expectation_nodes(f)
    diag = scale * (params.d - 1) * ef ** (params.d - 2)
    s = np.sqrt(grid.weights * grid.nu_density)
    # B = S diag(d) T S^{-1}; T[i,j] = w_j phi_step(x_j - drift x_i)
    b = (s * diag)[:, None] * grid.step_matrix / s[None, :]
    n = b.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    sigma2 = 0.0
    for _ in range(max_iter):
        w = b.T @ (b @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v_new = w / norm
        sigma2_new = float(v_new @ (b.T @ (b @ v_new)))
        if abs(sigma2_new - sigma2) <= tol * max(sigma2_new, 1e-300):
            return float(np.sqrt(sigma2_new))
        v, sigma2 = v_new, sigma2_new
    raise NonConvergenceError("singular-value power iteration did not converge")
