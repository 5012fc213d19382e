"""Truncated weighted grids on [h, infinity) and functions living on them.

The two measures of the model are the root law nu = N(0, var_root) and the
child step law N(0, var_step).  A :class:`Grid` discretizes [h, h + cutoff]
with composite Gauss-Legendre panels (Lebesgue weights); everything below h
is handled analytically through the ``below_h`` tag of a
:class:`GridFunction` (the implicit constant value 0 or 1 on (-inf, h)),
and the truncated tail mass is carried as an explicit correction.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import ndtr

from .model import ModelParams

__all__ = [
    "Grid",
    "GridFunction",
    "GridSpec",
    "build_grid",
    "integrate_nu",
    "step_expectation",
]

BELOW_ZERO = 0
BELOW_ONE = 1


def _gauss_pdf(x, var):
    return np.exp(-0.5 * x * x / var) / np.sqrt(2.0 * np.pi * var)


@dataclass(frozen=True)
class GridSpec:
    """Resolution settings shared by every solver that builds a grid."""

    n: int = 512
    cutoff_sigmas: float = 8.0
    points_per_panel: int = 8


@dataclass(frozen=True)
class Grid:
    """Composite Gauss-Legendre discretization of [h, h + cutoff].

    ``weights`` are plain Lebesgue weights; measure densities are applied by
    the operations, not baked into the weights.
    """

    params: ModelParams
    h: float
    nodes: np.ndarray
    weights: np.ndarray
    cutoff: float

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def n(self) -> int:
        return self.nodes.size

    @property
    def x_max(self) -> float:
        return self.h + self.cutoff

    # --- root measure nu ------------------------------------------------

    @cached_property
    def nu_density(self) -> np.ndarray:
        return _gauss_pdf(self.nodes, self.params.var_root)

    @cached_property
    def nu_weights(self) -> np.ndarray:
        return self.weights * self.nu_density

    @cached_property
    def below_mass(self) -> float:
        """nu((-inf, h))."""
        return float(ndtr(self.h / self.params.sigma_root))

    @cached_property
    def tail_mass(self) -> float:
        """nu((h + cutoff, inf))."""
        return float(ndtr(-self.x_max / self.params.sigma_root))

    @cached_property
    def nu_mass_error(self) -> float:
        """Relative error of the grid quadrature against nu([h, x_max))."""
        exact = 1.0 - self.below_mass - self.tail_mass
        return abs(float(self.nu_weights.sum()) - exact) / exact

    # --- step law N(drift * a, var_step) --------------------------------

    @cached_property
    def step_matrix(self) -> np.ndarray:
        """T[i, j] = w_j * phi_step(x_j - drift * x_i); E[f(drift a + Y); grid] = T f."""
        m = self.params.drift * self.nodes[:, None]
        return self.weights[None, :] * _gauss_pdf(self.nodes[None, :] - m, self.params.var_step)

    @cached_property
    def step_below(self) -> np.ndarray:
        """P(drift * x_i + Y < h) for each node."""
        return ndtr((self.h - self.params.drift * self.nodes) / self.params.sigma_step)

    @cached_property
    def step_tail(self) -> np.ndarray:
        """P(drift * x_i + Y > x_max) for each node."""
        return ndtr(-(self.x_max - self.params.drift * self.nodes) / self.params.sigma_step)

    def step_pieces_at(self, a):
        """(grid kernel row, below-h mass, tail mass) of the step law at a.

        Works for scalar or array ``a``; rows integrate f against the law of
        drift * a + Y over the three regions (-inf,h) / grid / (x_max,inf).
        """
        a = np.asarray(a, dtype=float)
        m = self.params.drift * a[..., None]
        row = self.weights * _gauss_pdf(self.nodes - m, self.params.var_step)
        below = ndtr((self.h - self.params.drift * a) / self.params.sigma_step)
        tail = ndtr(-(self.x_max - self.params.drift * a) / self.params.sigma_step)
        return row, below, tail


@dataclass(frozen=True)
class GridFunction:
    """Values on the grid plus the implicit constant below h (0 or 1)."""

    grid: Grid
    values: np.ndarray
    below_h: int

    def __post_init__(self):
        if self.values.shape != (self.grid.n,):
            raise ValueError(
                f"values shape {self.values.shape} does not match grid size {self.grid.n}"
            )
        if self.below_h not in (BELOW_ZERO, BELOW_ONE):
            raise ValueError(f"below_h must be 0 or 1, got {self.below_h}")
        self.values.setflags(write=False)

    @classmethod
    def constant(cls, grid: Grid, value: float, below_h: int) -> "GridFunction":
        return cls(grid, np.full(grid.n, float(value)), below_h)

    @classmethod
    def indicator_below(cls, grid: Grid) -> "GridFunction":
        """The indicator of (-inf, h): the smallest element of S_h."""
        return cls(grid, np.zeros(grid.n), BELOW_ONE)

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.grid, np.asarray(values, dtype=float), self.below_h)

    @cached_property
    def _interp(self) -> PchipInterpolator:
        # monotone piecewise cubic: no overshoot, preserves data bounds
        return PchipInterpolator(self.grid.nodes, self.values, extrapolate=False)

    @cached_property
    def tail_power_fit(self) -> tuple[float, float]:
        """(exponent, scale) of a power law fitted on the last decade of nodes.

        Requires positive nodes and values there; used to extrapolate
        polynomially growing functions past the cutoff.
        """
        x = self.grid.nodes
        top = x[-1]
        mask = (x >= top / 10.0) & (x > 0) & (self.values > 0)
        if mask.sum() < 4:
            raise ValueError("not enough positive nodes in the last decade for a power fit")
        lx = np.log(x[mask])
        lv = np.log(self.values[mask])
        slope, intercept = np.polyfit(lx, lv, 1)
        return float(slope), float(np.exp(intercept))

    def __call__(self, a, tail: str = "constant"):
        """Evaluate at arbitrary points.

        Below h the implicit value applies; on the grid span a clamped
        monotone cubic interpolant; past the cutoff either the last node's
        value (``tail="constant"``) or the fitted power law (``tail="power"``).
        """
        a = np.asarray(a, dtype=float)
        scalar = a.ndim == 0
        a = np.atleast_1d(a)
        out = np.empty_like(a)

        below = a < self.grid.h
        above = a > self.grid.nodes[-1]
        mid = ~below & ~above
        out[below] = float(self.below_h)
        if mid.any():
            lo, hi = self._value_bounds()
            inner = self._interp(np.clip(a[mid], self.grid.nodes[0], None))
            # nodes[0] sits slightly above h: the first panel's left edge is h
            inner = np.where(a[mid] < self.grid.nodes[0], self.values[0], inner)
            out[mid] = np.clip(inner, lo, hi)
        if above.any():
            if tail == "constant":
                out[above] = self.values[-1]
            elif tail == "power":
                expo, scale = self.tail_power_fit
                out[above] = scale * a[above] ** expo
            else:
                raise ValueError(f"unknown tail mode {tail!r}")
        return out[0] if scalar else out

    def _value_bounds(self) -> tuple[float, float]:
        if self.below_h == BELOW_ONE and self.values.min() >= 0 and self.values.max() <= 1:
            return 0.0, 1.0
        if self.values.min() >= 0:
            return 0.0, np.inf
        return -np.inf, np.inf

    # --- serialization ---------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.csv_text())

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(
            f"# h={self.grid.h!r} d={self.grid.params.d} "
            f"below_h={self.below_h} cutoff={self.grid.cutoff!r}\n"
        )
        buf.write("node,value\n")
        for x, v in zip(self.grid.nodes, self.values):
            buf.write(f"{x:.17g},{v:.17g}\n")
        return buf.getvalue()


def parse_gridfunction_csv(text: str) -> tuple[dict, np.ndarray, np.ndarray]:
    """Parse the CSV produced by :meth:`GridFunction.to_csv`.

    Returns (metadata, nodes, values); reattach to a compatible Grid with
    :func:`gridfunction_from_csv`.
    """
    lines = text.strip().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("missing gridfunction header line")
    meta = {}
    for tok in lines[0][1:].split():
        key, _, val = tok.partition("=")
        meta[key] = val
    meta = {
        "h": float(meta["h"]),
        "d": int(meta["d"]),
        "below_h": int(meta["below_h"]),
        "cutoff": float(meta["cutoff"]),
    }
    data = np.loadtxt(io.StringIO("\n".join(lines[2:])), delimiter=",")
    data = np.atleast_2d(data)
    return meta, data[:, 0].copy(), data[:, 1].copy()


def gridfunction_from_csv(grid: Grid, path) -> GridFunction:
    with open(path, "r", encoding="utf-8") as fh:
        meta, nodes, values = parse_gridfunction_csv(fh.read())
    if meta["d"] != grid.params.d or abs(meta["h"] - grid.h) > 1e-12:
        raise ValueError("CSV metadata does not match the supplied grid")
    if nodes.size != grid.n or not np.allclose(nodes, grid.nodes, rtol=0, atol=1e-12):
        raise ValueError("CSV nodes do not match the supplied grid")
    return GridFunction(grid, values, meta["below_h"])


def build_grid(
    params: ModelParams,
    h: float,
    n: int = 512,
    cutoff_sigmas: float = 8.0,
    points_per_panel: int = 8,
) -> Grid:
    """Composite Gauss-Legendre grid on [h, h + cutoff_sigmas * sigma_root].

    Panels are graded: widths of about sigma_step/2 over the first few step
    standard deviations above h (where fixed points bend the hardest), then
    uniform panels out to the cutoff.  ``n`` is rounded down to a multiple
    of ``points_per_panel``.
    """
    if n < 16:
        raise ValueError(f"need at least 16 nodes, got {n}")
    if cutoff_sigmas <= 0:
        raise ValueError(f"cutoff_sigmas must be positive, got {cutoff_sigmas}")
    if points_per_panel < 2:
        raise ValueError("points_per_panel must be >= 2")

    # span from h to cutoff_sigmas root-sigmas above the bulk of nu: for
    # h < 0 the grid must still cover the upper range of the root measure,
    # otherwise lambda_h loses its monotone approach to d-1 as h -> -inf
    x_max = max(h, 0.0) + cutoff_sigmas * params.sigma_root
    if not _gauss_pdf(np.array([x_max]), params.var_root)[0] > 0.0:
        raise ValueError("cutoff so wide that the nu density underflows at the edge")

    n_panels = n // points_per_panel
    fine_end = min(h + 4.0 * params.sigma_step, x_max)
    n_fine = min(8, max(1, n_panels // 4)) if fine_end < x_max else n_panels
    edges = np.concatenate(
        [
            np.linspace(h, fine_end, n_fine + 1),
            np.linspace(fine_end, x_max, n_panels - n_fine + 1)[1:],
        ]
    )

    gl_x, gl_w = np.polynomial.legendre.leggauss(points_per_panel)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * gl_x[None, :]).ravel()
    weights = (half[:, None] * gl_w[None, :]).ravel()
    return Grid(params=params, h=float(h), nodes=nodes, weights=weights, cutoff=x_max - h)


def build_grid_from_spec(params: ModelParams, h: float, spec: GridSpec) -> Grid:
    return build_grid(params, h, spec.n, spec.cutoff_sigmas, spec.points_per_panel)


def integrate_nu(f: GridFunction) -> float:
    """Integral of f against nu over all of R.

    Adds the analytic below-h contribution per the ``below_h`` tag and a
    constant-extrapolation correction for the truncated tail.
    """
    g = f.grid
    return float(
        f.below_h * g.below_mass
        + g.nu_weights @ f.values
        + g.tail_mass * f.values[-1]
    )


def step_expectation(f: GridFunction, a) -> float | np.ndarray:
    """E[f(drift * a + Y)] with Y ~ N(0, var_step).

    Quadrature against f's grid plus the analytic below-h term and the
    constant tail correction.  ``a`` may be a scalar or an array.
    """
    g = f.grid
    row, below, tail = g.step_pieces_at(a)
    val = row @ f.values + f.below_h * below + tail * f.values[-1]
    return float(val) if np.isscalar(a) or np.asarray(a).ndim == 0 else val


def step_expectation_nodes(f: GridFunction) -> np.ndarray:
    """E[f(drift * x_i + Y)] at every grid node, using the cached matrices."""
    g = f.grid
    return g.step_matrix @ f.values + f.below_h * g.step_below + g.step_tail * f.values[-1]
