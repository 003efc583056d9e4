"""Convolution couplings on the periodic lattice Z_L.

``(Cx)_s = sum_n c_n x_{s-n}`` with ``c_n >= 0`` and ``sum c_n = 1``. On Z_L the
operator is a circulant matrix whose eigenvalues are the Fourier symbol
``c_hat(omega) = sum_n c_n exp(2 pi i n omega)`` sampled at ``omega = k/L``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import circulant

from .errors import FitFailure, ParameterViolation, SingularCoupling

SINGULAR_TOL = 1e-14
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class Kernel:
    """Finite-support, non-negative, normalized coupling sequence."""

    coeffs: tuple  # ((offset, value), ...) sorted by offset, zeros dropped
    spec: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        items = sorted((int(n), float(c)) for n, c in self.coeffs)
        offsets = [n for n, _ in items]
        if len(set(offsets)) != len(offsets):
            raise ParameterViolation("duplicate offsets in kernel table")
        if any(not math.isfinite(c) or c < 0 for _, c in items):
            raise ParameterViolation("kernel coefficients must be finite and non-negative")
        total = math.fsum(c for _, c in items)
        if not total > 0:
            raise ParameterViolation("kernel coefficients sum to zero")
        if abs(total - 1.0) > 4 * _EPS:
            items = [(n, c / total) for n, c in items]
        items = tuple((n, c) for n, c in items if c > 0)
        object.__setattr__(self, "coeffs", items)

    @classmethod
    def from_table(cls, table: dict, spec: dict | None = None) -> "Kernel":
        return cls(tuple((int(n), float(c)) for n, c in table.items()), spec=spec)

    @property
    def table(self) -> dict:
        return dict(self.coeffs)

    @property
    def c0(self) -> float:
        return self.table.get(0, 0.0)

    @property
    def support(self) -> tuple[int, int]:
        offs = [n for n, _ in self.coeffs]
        return min(offs), max(offs)

    def to_spec(self) -> dict:
        if self.spec is not None:
            return dict(self.spec)
        return {"kind": "table", "coeffs": {str(n): c for n, c in self.coeffs}}


def impulse() -> Kernel:
    return Kernel(((0, 1.0),), spec={"kind": "table", "coeffs": {"0": 1.0}})


def laplacian(eps: float) -> Kernel:
    """Discrete Laplacian coupling ``x_s + eps/2 (x_{s-1} - 2 x_s + x_{s+1})``."""
    if not 0.0 <= eps <= 1.0:
        raise ParameterViolation(f"need 0 <= eps <= 1, got eps = {eps}")
    return Kernel.from_table({-1: eps / 2, 0: 1.0 - eps, 1: eps / 2},
                             spec={"kind": "laplacian", "eps": eps})


def kernel_from_spec(spec: dict) -> Kernel:
    kind = spec.get("kind")
    if kind == "laplacian":
        return laplacian(float(spec["eps"]))
    if kind == "table":
        return Kernel.from_table({int(k): float(v) for k, v in spec["coeffs"].items()}, spec=dict(spec))
    raise ParameterViolation(f"unknown kernel kind {kind!r}")


def apply(kernel: Kernel, L: int, x):
    """Circular convolution along the last axis (batched over leading axes)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != L:
        raise ValueError(f"last axis has length {x.shape[-1]}, expected L = {L}")
    out = np.zeros_like(x)
    for n, c in kernel.coeffs:
        out += c * np.roll(x, n, axis=-1)  # roll(x, n)[s] == x[s - n]
    return out


def circulant_column(kernel: Kernel, L: int) -> np.ndarray:
    col = np.zeros(L)
    for n, c in kernel.coeffs:
        col[n % L] += c
    return col


def circulant_matrix(kernel: Kernel, L: int) -> np.ndarray:
    return circulant(circulant_column(kernel, L))


def id_minus_c_norm(kernel: Kernel) -> float:
    """Operator norm of ``Id - C`` in the sup norm; equals ``2 (1 - c_0)``."""
    return 2.0 * (1.0 - kernel.c0)


def symbol(kernel: Kernel, omega):
    omega = np.asarray(omega, dtype=float)
    out = np.zeros(omega.shape, dtype=complex)
    for n, c in kernel.coeffs:
        out += c * np.exp(2j * np.pi * n * omega)
    return out if out.ndim else complex(out)


def symbol_grid(kernel: Kernel, L: int) -> np.ndarray:
    """Symbol on the roots grid ``k/L``, ``k = 1..L``."""
    return symbol(kernel, np.arange(1, L + 1) / L)


def log_abs_det(kernel: Kernel, L: int) -> float:
    """``log |det C|`` on Z_L as a sum of log-moduli of the symbol."""
    mod = np.abs(symbol_grid(kernel, L))
    if mod.min() < SINGULAR_TOL:
        k = int(np.argmin(mod)) + 1
        raise SingularCoupling(f"|c_hat({k}/{L})| = {mod.min():.3g} vanishes; C is singular on Z_{L}")
    return math.fsum(np.log(mod))


@dataclass(frozen=True, eq=False)
class InverseKernel:
    """Coefficients of ``C^{-1}`` on Z_L; ``coeffs[n]`` is the offset ``n mod L``.

    Entries below ``floor`` (the round-off resolution of the Fourier
    inversion) are stored as exact zeros.
    """

    L: int
    coeffs: np.ndarray
    floor: float

    @property
    def l1_norm(self) -> float:
        return math.fsum(np.abs(self.coeffs))

    @property
    def distance(self) -> np.ndarray:
        n = np.arange(self.L)
        return np.minimum(n, self.L - n)

    def matrix(self) -> np.ndarray:
        return circulant(self.coeffs)

    def apply(self, y):
        """Solve ``C x = y`` along the last axis."""
        y = np.asarray(y, dtype=float)
        return y @ self.matrix().T


def inverse_kernel(kernel: Kernel, L: int) -> InverseKernel:
    col = circulant_column(kernel, L)
    lam = np.fft.fft(col)
    if np.abs(lam).min() < SINGULAR_TOL:
        raise SingularCoupling(f"C is singular on Z_{L}")
    raw = np.fft.ifft(1.0 / lam).real
    floor = 4.0 * _EPS * max(1.0, math.log2(L)) * float(np.abs(1.0 / lam).max())
    coeffs = np.where(np.abs(raw) < floor, 0.0, raw)
    resid = np.abs(np.fft.ifft(np.fft.fft(coeffs) * lam).real - np.eye(1, L)[0]).max()
    if resid > 1e-10:
        raise SingularCoupling(f"inverse kernel residual {resid:.3g} exceeds 1e-10 on Z_{L}")
    coeffs.setflags(write=False)
    return InverseKernel(L=L, coeffs=coeffs, floor=floor)


@dataclass(frozen=True)
class LocalizationFit:
    m1: float
    zeta1: float


_ZETA_GRID = np.unique(np.concatenate([np.geomspace(1e-4, 0.5, 400), np.linspace(0.5, 0.9999, 600)]))


def localization_fit(inv: InverseKernel, iota: float, zetas=None) -> LocalizationFit:
    """Certified envelope ``iota |c_n^{-1}| <= m1 zeta1^d(n)``.

    For each candidate rate the smallest valid ``m1`` is computed exactly;
    the pair minimising ``m1 / (1 - zeta1)`` is returned.
    """
    d = inv.distance
    wrap = np.abs(inv.coeffs[d >= inv.L // 4]).max(initial=0.0)
    if wrap > 1e-12:
        raise FitFailure(f"wrap-around amplitude {wrap:.3g} > 1e-12; increase L")
    amp = iota * np.abs(inv.coeffs)
    nz = amp > 0
    if not nz.any():
        raise FitFailure("inverse kernel is identically zero")
    zetas = _ZETA_GRID if zetas is None else np.asarray(zetas, dtype=float)
    log_m1 = np.max(np.log(amp[nz])[None, :] - d[nz][None, :] * np.log(zetas)[:, None], axis=1)
    m1 = np.exp(log_m1) * (1 + 1e-12)
    obj = m1 / (1 - zetas)
    obj[~np.isfinite(obj)] = np.inf
    k = int(np.argmin(obj))
    if not np.isfinite(obj[k]):
        raise FitFailure("no exponential envelope with zeta1 < 1")
    fit = LocalizationFit(m1=float(m1[k]), zeta1=float(zetas[k]))
    if np.any(amp > fit.m1 * fit.zeta1 ** d.astype(float)):
        raise FitFailure("envelope check failed after fitting")
    return fit


def finite_range_value(kernel: Kernel, zeta: float) -> float:
    """``sum_n zeta^|n| c_n``; finite for every finite-support kernel."""
    if not zeta > 1:
        raise ParameterViolation(f"need zeta > 1, got {zeta}")
    return math.fsum(zeta ** abs(n) * c for n, c in kernel.coeffs)
