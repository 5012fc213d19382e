"""Level-set percolation of the Gaussian free field on regular trees.

Numerical toolkit built around three independent engines that must agree:

* spectral   -- Nystrom discretization of the truncated step operator,
                its leading eigenpair, and the critical level where the
                eigenvalue crosses 1;
* fixedpoint -- extinction-probability and exponential-moment fixed
                points of the nonlinear generating operators;
* simulate   -- exact recursive Monte Carlo of the field with cluster
                exploration, against which every analytic quantity is
                cross-validated (verify).
"""

from .model import ModelParams, green, make_params

__version__ = "0.1.0"

__all__ = ["ModelParams", "make_params", "green", "__version__"]
