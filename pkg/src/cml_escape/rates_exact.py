"""Closed-form escape rates of the piecewise affine lattice."""
from __future__ import annotations

import functools
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from .coupling import SINGULAR_TOL, Kernel, laplacian, log_abs_det, symbol, symbol_grid
from .errors import ParameterViolation, SingularCoupling


def _require_affine_threshold(a: float, kernel: Kernel) -> None:
    if not a > 2:
        raise ParameterViolation(f"need a > 2, got a = {a}")
    if not a * (2.0 * kernel.c0 - 1.0) - 2.0 > 1e-12:
        raise ParameterViolation(f"need a (2 c_0 - 1) > 2, got {a * (2.0 * kernel.c0 - 1.0):.6g}")


def gamma_affine(a: float, kernel: Kernel, L: int) -> float:
    """Escape rate ``L log(a/2) + log|det C|_L`` of the affine lattice of period L."""
    _require_affine_threshold(a, kernel)
    return _gamma_affine_formula(a, kernel, L)


def _gamma_affine_formula(a, kernel, L):
    return L * math.log(a / 2.0) + log_abs_det(kernel, L)


def gamma_infty(a: float, kernel: Kernel, panels: int = 1024) -> float:
    """Escape rate per lattice unit, ``log(a/2) + int_0^1 log|c_hat|`` by composite Simpson."""
    if panels < 2 or panels % 2:
        raise ParameterViolation(f"Simpson needs an even panel count >= 2, got {panels}")
    omega = np.linspace(0.0, 1.0, panels + 1)
    mod = np.abs(symbol(kernel, omega))
    if mod.min() < SINGULAR_TOL:
        raise SingularCoupling("symbol vanishes on the quadrature grid")
    return math.log(a / 2.0) + float(simpson(np.log(mod), x=omega))


def _laplacian_closed(a: float, eps: float) -> float:
    # int_0^1 log(p + q cos 2 pi w) dw = log((p + sqrt(p^2 - q^2)) / 2), p = 1 - eps, q = eps
    return math.log(a / 2.0) + math.log(((1.0 - eps) + math.sqrt(1.0 - 2.0 * eps)) / 2.0)


@functools.cache
def _closed_form_gate() -> float:
    worst = 0.0
    for eps in (0.0, 0.05, 0.1, 0.2, 0.3, 0.4):
        worst = max(worst, abs(_laplacian_closed(3.0, eps) - gamma_infty(3.0, laplacian(eps), 1024)))
    if worst > 1e-9:
        raise RuntimeError(f"closed-form Laplacian integral disagrees with quadrature by {worst:.3g}")
    return worst


def gamma_infty_laplacian_closed(a: float, eps: float) -> float:
    if not 0.0 <= eps < 0.5:
        raise ParameterViolation(f"need 0 <= eps < 1/2 (symbol touches 0 at eps = 1/2), got {eps}")
    _closed_form_gate()
    return _laplacian_closed(a, eps)


def lyapunov_exponents_affine(a: float, kernel: Kernel, L: int) -> list[float]:
    """``log(a |c_hat(k/L)|)`` for ``k = 1..L``."""
    mod = np.abs(symbol_grid(kernel, L))
    if mod.min() < SINGULAR_TOL:
        raise SingularCoupling(f"C is singular on Z_{L}")
    return [math.log(a * m) for m in mod]


def entropy_identity_check(a: float, kernel: Kernel, L: int) -> float:
    """Residual of ``gamma = sum(exponents) - L log 2`` (entropy equals ``L log 2``).

    Only needs a non-vanishing symbol, so it also runs on the threshold itself.
    """
    lam = math.fsum(lyapunov_exponents_affine(a, kernel, L))
    return abs(_gamma_affine_formula(a, kernel, L) - (lam - L * math.log(2.0)))


@dataclass(frozen=True)
class RateCurve:
    param: str
    points: tuple  # ((value, gamma), ...)

    def __post_init__(self):
        vals = [p for p, _ in self.points]
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("RateCurve parameter values must be strictly increasing")

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        buf.write("param,gamma\n")
        for p, g in self.points:
            buf.write(f"{p:.17g},{g:.17g}\n")
        return buf.getvalue()


def rate_curve_L(a: float, kernel: Kernel, Ls) -> RateCurve:
    return RateCurve("L", tuple((L, gamma_affine(a, kernel, L)) for L in Ls))


def rate_curve_eps(a: float, L: int, eps_values) -> RateCurve:
    return RateCurve("eps", tuple((e, gamma_affine(a, laplacian(e), L)) for e in eps_values))
