"""Closed-form Gaussian constants of the free field on the d-regular tree.

Everything downstream (quadrature, operators, simulation) reads the three
constants from :class:`ModelParams` so there is a single source of truth:

* ``var_root``  -- variance of the field at a vertex, (d-1)/(d-2)
* ``var_step``  -- conditional variance of a child given its parent, d/(d-1)
* ``drift``     -- conditional mean factor of a child, 1/(d-1)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

__all__ = ["ModelParams", "make_params", "green", "GreenUnderflowWarning"]


class GreenUnderflowWarning(UserWarning):
    """Raised when the covariance is requested past the distance cap."""


@dataclass(frozen=True)
class ModelParams:
    """Degree of the tree and the derived Gaussian constants."""

    d: int
    var_root: float
    var_step: float
    drift: float

    @property
    def sigma_root(self) -> float:
        return self.var_root ** 0.5

    @property
    def sigma_step(self) -> float:
        return self.var_step ** 0.5


def make_params(d: int) -> ModelParams:
    """Build the model constants for the d-regular tree.

    Rejects d < 3: at d = 2 the root variance (d-1)/(d-2) diverges and the
    field does not exist.
    """
    if int(d) != d:
        raise TypeError(f"degree must be an integer, got {d!r}")
    d = int(d)
    if d < 3:
        raise ValueError(f"degree must be >= 3, got {d} (root variance diverges)")
    return ModelParams(
        d=d,
        var_root=(d - 1) / (d - 2),
        var_step=d / (d - 1),
        drift=1.0 / (d - 1),
    )


def green(d: int, r: int, max_r: int = 64) -> float:
    """Covariance of the field at two vertices at graph distance r.

    Equals (d-1)/(d-2) * (1/(d-1))**r.  Distances beyond ``max_r`` return
    exactly 0.0 with a :class:`GreenUnderflowWarning` instead of silently
    underflowing.
    """
    params = make_params(d)
    if r < 0 or int(r) != r:
        raise ValueError(f"distance must be a nonnegative integer, got {r!r}")
    r = int(r)
    if r > max_r:
        warnings.warn(
            f"green(d={d}, r={r}) beyond distance cap {max_r}; returning 0.0",
            GreenUnderflowWarning,
            stacklevel=2,
        )
        return 0.0
    return params.var_root * params.drift**r
