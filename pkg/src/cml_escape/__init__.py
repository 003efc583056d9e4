"""Escape rates of periodic lattices of weakly coupled expanding maps with holes.

Three routes to the rate are provided: the closed form for piecewise affine
maps (:mod:`rates_exact`), Monte Carlo survival volumes (:mod:`rates_volume`)
and partition-function bounds with certified distortion constants
(:mod:`partition`).
"""
from .coupling import Kernel, impulse, kernel_from_spec, laplacian
from .errors import (BudgetExceeded, CMLError, Degenerate, Extinction, FitFailure, MarkovViolation,
                     NoConvergence, NotContracting, ParameterViolation, SingularCoupling, WordCountOverflow)
from .localmap import LocalMap, make_lorenz, make_perturbed_lorenz, map_from_spec

__version__ = "0.1.0"
