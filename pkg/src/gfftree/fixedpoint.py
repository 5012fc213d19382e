"""Nonlinear fixed points: extinction probability and exponential moments.

Two operators act on functions equal to 1 below h:

    (R f)(a)       = 1_{a<h} + 1_{a>=h} * E[f(drift*a + Y)]**(d-1)
    (R_delta f)(a) = 1_{a<h} + 1_{a>=h} * (1+delta) * E[f(drift*a + Y)]**(d-1)

R maps the class S_h (values in [0,1], equal 1 below h) to itself and has
exactly two fixed points there: the constant 1 and the conditional forward
extinction probability q_h, which is the SMALLEST one.  Iterating from the
indicator of (-inf, h) -- the smallest element of S_h -- produces a
pointwise nondecreasing sequence converging to q_h; iterating from 1 would
sit at the wrong fixed point, which is why the initialization here is not
configurable.

R_delta iterated on the constant 1 produces the nondecreasing truncated
exponential moments of the forward cluster size; for levels above the
critical one there is a delta > 0 for which the limit is finite, and the
iteration converges to it.  Divergence of the iteration is a result, not an
error: it is the expected outcome for delta too large or below-critical
levels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .grids import (
    BELOW_ONE,
    Grid,
    GridFunction,
    GridSpec,
    build_grid_from_spec,
    integrate_nu,
    step_expectation_nodes,
)
from .model import ModelParams
from .spectral import NonConvergenceError, frechet_operator_norm, lambda_of_h, SpectralConfig

__all__ = [
    "FixedPointSolution",
    "ExpMomentSolution",
    "DeltaSearchConfig",
    "RecursiveBoundReport",
    "apply_Rh",
    "solve_q",
    "eta_from_q",
    "apply_Rh_delta",
    "solve_g",
    "find_delta_h",
    "contraction_norm",
    "recursive_bound_report",
    "tail_loglog_slope",
]

NEAR_CRITICAL_BAND = 1e-3


@dataclass(frozen=True)
class FixedPointSolution:
    h: float
    q: GridFunction
    residual: float
    iterations: int
    eta_plus: float
    eta: float


@dataclass(frozen=True)
class ExpMomentSolution:
    h: float
    delta: float
    g: GridFunction
    converged: bool
    residual: float
    growth_cap: float
    iterations: int


@dataclass(frozen=True)
class DeltaSearchConfig:
    delta_max: float = 1.0
    max_probes: int = 40
    tol: float = 1e-10
    max_iter: int = 200_000
    blowup_threshold: float = 1e12
    critical_margin: float = 1e-3


def _check_sh(f: GridFunction) -> None:
    if f.below_h != BELOW_ONE:
        raise ValueError("argument must equal 1 below h (below_h = 1)")
    if f.values.min() < -1e-12 or f.values.max() > 1 + 1e-12:
        raise ValueError("argument values must lie in [0, 1]")


def apply_Rh(params: ModelParams, h: float, f: GridFunction) -> GridFunction:
    """One application of the generating operator to an S_h function."""
    _check_sh(f)
    e = np.clip(step_expectation_nodes(f), 0.0, 1.0)
    return GridFunction(f.grid, e ** (params.d - 1), BELOW_ONE)


def apply_Rh_delta(params: ModelParams, h: float, delta: float, f: GridFunction) -> GridFunction:
    """One application of the tilted operator to a function >= 1 below-One."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if f.below_h != BELOW_ONE or f.values.min() < 1 - 1e-12:
        raise ValueError("argument must be >= 1 and equal 1 below h")
    e = step_expectation_nodes(f)
    return GridFunction(f.grid, (1.0 + delta) * e ** (params.d - 1), BELOW_ONE)


def solve_q(
    params: ModelParams,
    h: float,
    tol: float = 1e-10,
    max_iter: int = 200_000,
    grid_spec: GridSpec = GridSpec(),
    grid: Grid | None = None,
    lam_hint: float | None = None,
) -> FixedPointSolution:
    """Smallest fixed point of the generating operator in S_h.

    Iterates from the indicator of (-inf, h); the iterates increase
    pointwise to q_h.  Stops when the sup-node increment drops below
    ``tol``; raises on iteration-budget exhaustion (expected only very near
    the critical level, where convergence degrades).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if grid is None:
        grid = build_grid_from_spec(params, h, grid_spec)
    if lam_hint is not None and abs(lam_hint - 1.0) < NEAR_CRITICAL_BAND:
        warnings.warn(
            f"level h={h} is within {NEAR_CRITICAL_BAND} of critical in lambda; "
            "fixed-point convergence will be slow",
            stacklevel=2,
        )
    t, c, tail = grid.step_matrix, grid.step_below, grid.step_tail
    power = params.d - 1
    f = np.zeros(grid.n)
    inc = np.inf
    for it in range(1, max_iter + 1):
        e = t @ f + c + tail * f[-1]
        np.clip(e, 0.0, 1.0, out=e)
        f_new = e**power
        inc = float(np.max(np.abs(f_new - f)))
        f = f_new
        if inc < tol:
            break
    else:
        raise NonConvergenceError(
            f"extinction fixed point did not converge in {max_iter} iterations "
            f"(last sup increment {inc:.3e}); level likely near critical",
            residual=inc,
            iterations=max_iter,
        )
    q = GridFunction(grid, f, BELOW_ONE)
    eta_plus, eta = eta_from_q(params, h, q)
    return FixedPointSolution(
        h=float(h), q=q, residual=inc, iterations=it, eta_plus=eta_plus, eta=eta
    )


def eta_from_q(params: ModelParams, h: float, q: GridFunction) -> tuple[float, float]:
    """(forward percolation probability, full percolation probability).

    eta_plus = 1 - int q dnu.  The full probability integrates the root law
    against the chance that at least one of the d root subtrees percolates:
    eta = int 1_{[h,inf)}(a) * (1 - E[q(drift*a + Y)]**d) dnu(a).
    """
    _check_sh(q)
    g = q.grid
    eta_plus = 1.0 - integrate_nu(q)
    e = np.clip(step_expectation_nodes(q), 0.0, 1.0)
    integrand = 1.0 - e**params.d
    eta = float(g.nu_weights @ integrand + g.tail_mass * integrand[-1])
    return eta_plus, eta


def solve_g(
    params: ModelParams,
    h: float,
    delta: float,
    tol: float = 1e-10,
    max_iter: int = 200_000,
    blowup_threshold: float = 1e12,
    grid_spec: GridSpec = GridSpec(),
    grid: Grid | None = None,
    divergence_patience: int = 50,
) -> ExpMomentSolution:
    """Iterate the tilted operator from the constant 1.

    The iterates are the truncated exponential moments of the cluster size
    and increase pointwise.  ``converged=False`` means divergence was
    detected (a node passed ``blowup_threshold``, increments grew for
    ``divergence_patience`` consecutive iterations, or the budget ran out);
    that is the expected outcome when delta is too large for the level.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if grid is None:
        grid = build_grid_from_spec(params, h, grid_spec)
    t, c, tail = grid.step_matrix, grid.step_below, grid.step_tail
    power = params.d - 1
    f = np.ones(grid.n)
    growth_cap = 1.0
    inc_prev = np.inf
    growing = 0
    converged = False
    inc = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        e = t @ f + c + tail * f[-1]
        f_new = (1.0 + delta) * e**power
        inc = float(np.max(np.abs(f_new - f)))
        f = f_new
        growth_cap = max(growth_cap, float(f.max()))
        if not np.isfinite(growth_cap) or growth_cap > blowup_threshold:
            break
        if inc < tol:
            converged = True
            break
        growing = growing + 1 if inc > inc_prev else 0
        if growing >= divergence_patience:
            break
        inc_prev = inc
    g = GridFunction(grid, np.where(np.isfinite(f), f, blowup_threshold), BELOW_ONE)
    return ExpMomentSolution(
        h=float(h),
        delta=float(delta),
        g=g,
        converged=converged,
        residual=inc,
        growth_cap=growth_cap,
        iterations=it,
    )


def find_delta_h(
    params: ModelParams,
    h: float,
    search: DeltaSearchConfig = DeltaSearchConfig(),
    grid_spec: GridSpec = GridSpec(),
    lam: float | None = None,
) -> tuple[float, ExpMomentSolution]:
    """Largest tilt on a halving ladder for which the moment iteration converges.

    Probes delta_max, delta_max/2, ... and returns the first convergent
    probe (convergence is monotone in delta, so that is the largest
    convergent rung).  Requires a below-one operator norm, i.e. a level
    strictly above critical; this is checked through lambda_h rather than
    through an h_star solve, which is equivalent by monotonicity and much
    cheaper.
    """
    if lam is None:
        lam = lambda_of_h(params, h, SpectralConfig(grid=grid_spec)).lam
    if lam >= 1.0 - search.critical_margin:
        raise ValueError(
            f"find_delta_h requires a level above critical with margin: "
            f"lambda_h = {lam:.6f} at h = {h}"
        )
    grid = build_grid_from_spec(params, h, grid_spec)
    delta = search.delta_max
    for _ in range(search.max_probes):
        sol = solve_g(
            params,
            h,
            delta,
            tol=search.tol,
            max_iter=search.max_iter,
            blowup_threshold=search.blowup_threshold,
            grid=grid,
        )
        if sol.converged:
            return delta, sol
        delta *= 0.5
    raise NonConvergenceError(
        f"no convergent tilt found down to delta = {delta * 2:.3e}; "
        "level may be at or below critical, or the grid is too coarse"
    )


def contraction_norm(params: ModelParams, h: float, delta: float, f: GridFunction) -> float:
    """Operator norm of the tilted linearization at f on functions vanishing below h.

    Values below 1 certify that the tilted operator is a local contraction
    at f.  With f identically 1 and delta = 0 this equals lambda_h.
    """
    _check_g_base(f)
    return frechet_operator_norm(params, h, f, scale=1.0 + delta)


def _check_g_base(f: GridFunction) -> None:
    if f.below_h != BELOW_ONE:
        raise ValueError("base point must equal 1 below h")
    if f.values.min() < 1.0 - 1e-9:
        raise ValueError("base point must be >= 1")


@dataclass(frozen=True)
class RecursiveBoundReport:
    threshold: float
    n_checked: int
    holds: bool
    max_ratio: float
    eta_param: float


def recursive_bound_report(
    params: ModelParams,
    h: float,
    delta: float,
    g: GridFunction,
    eta_param: float = 0.5,
) -> RecursiveBoundReport:
    """Check g(a) <= (1+2*delta) * g(drift*a*(1+eta))**(d-1) above a computed threshold.

    The threshold is the first grid node from which onward the tilted
    tail term (1+delta)*(1 + E[g(drift*a+Y); Y >= eta*drift*a])**(d-1)
    stays below 1+2*delta, mirroring how the bound is derived; above it the
    displayed inequality is checked at every node.
    """
    grid = g.grid
    drift, var = params.drift, params.var_step
    m = drift * grid.nodes
    z = (grid.nodes[None, :] - m[:, None]) / params.sigma_step
    from scipy.special import ndtr

    dens = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi * var)
    restricted = grid.nodes[None, :] >= (1.0 + eta_param) * m[:, None]
    tail_term = (grid.weights[None, :] * dens * restricted) @ g.values
    tail_term += ndtr(-(grid.x_max - m) / params.sigma_step) * g.values[-1]
    below_hi = ndtr((h - m) / params.sigma_step)
    below_lo = ndtr(-eta_param * m / params.sigma_step)
    tail_term += np.clip(below_hi - below_lo, 0.0, None)

    prefactor = (1.0 + delta) * (1.0 + tail_term) ** (params.d - 1)
    ok = prefactor <= 1.0 + 2.0 * delta
    # first node from which the prefactor condition holds for every later node
    holds_from = np.flip(np.logical_and.accumulate(np.flip(ok)))
    if not holds_from.any():
        return RecursiveBoundReport(np.inf, 0, False, np.inf, eta_param)
    idx = int(np.argmax(holds_from))
    nodes = grid.nodes[idx:]
    rhs = (1.0 + 2.0 * delta) * g(drift * nodes * (1.0 + eta_param)) ** (params.d - 1)
    ratio = g.values[idx:] / rhs
    return RecursiveBoundReport(
        threshold=float(grid.nodes[idx]),
        n_checked=int(nodes.size),
        holds=bool(np.all(ratio <= 1.0 + 1e-9)),
        max_ratio=float(ratio.max()),
        eta_param=eta_param,
    )


def tail_loglog_slope(g: GridFunction) -> float:
    """Slope of log(log g(a)) against log a over the top decade of the grid.

    A value below 2 witnesses subquadratic growth of log g.  Requires g > 1
    on the window.
    """
    x = g.grid.nodes
    mask = (x >= x[-1] / 10.0) & (x > 0) & (g.values > 1.0)
    if mask.sum() < 8:
        raise ValueError("not enough nodes with g > 1 in the top decade")
    slope, _ = np.polyfit(np.log(x[mask]), np.log(np.log(g.values[mask])), 1)
    return float(slope)
