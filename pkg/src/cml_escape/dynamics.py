"""The coupled map ``F = C o F0`` on Z_L and its symbolic structure.

States are float arrays whose last axis has length L; symbol frames are
integer arrays of the same shape (1-based, 0 = outside every interval).
Space-time words have shape ``(T, L)``, batches of words ``(W, T, L)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import coupling
from .coupling import Kernel, id_minus_c_norm, inverse_kernel
from .errors import NoConvergence, NotContracting, ParameterViolation
from .localmap import LocalMap, MapConstants, constants

CYLINDER_TOL = 1e-12
MAX_SWEEPS = 10_000


@dataclass(frozen=True)
class Escaped:
    site: int


def step(lmap: LocalMap, kernel: Kernel, x):
    """One application of F, or ``Escaped`` at the smallest offending site."""
    x = np.asarray(x, dtype=float)
    sym = lmap.symbols(x)
    out = np.flatnonzero(sym == 0)
    if out.size:
        return Escaped(int(out[0]))
    return coupling.apply(kernel, x.shape[-1], lmap.evaluate(x, sym))


def step_batch(lmap: LocalMap, kernel: Kernel, x):
    """Vectorised step over rows of ``x``; returns ``(F x, alive)``.

    Rows with a coordinate outside the intervals come back as nan.
    """
    sym = lmap.symbols(x)
    alive = (sym > 0).all(axis=-1)
    return coupling.apply(kernel, x.shape[-1], lmap.evaluate(x, sym)), alive


def locate(lmap: LocalMap, x):
    sym = lmap.symbols(x)
    if (sym == 0).any():
        return None
    return sym


def weak_coupling_ok_affine(a: float, eps: float, tol: float = 1e-12) -> bool:
    """Sharp symbolic-stability condition ``a (1 - 2 eps) > 2`` for the Lorenz family."""
    return a * (1.0 - 2.0 * eps) - 2.0 > tol


@dataclass(frozen=True)
class ThresholdReport:
    affine_ok: bool | None
    general_bound: float
    norm: float
    verdict: bool


def weak_coupling_ok_general(consts: MapConstants, kernel: Kernel,
                             affine_slope: float | None = None) -> ThresholdReport:
    """Sufficient weak-coupling bound ``min(2 gamma/M, delta/(delta + r))`` with ``r = M/2``.

    ``affine_ok`` is the convolution form ``a (2 c_0 - 1) > 2`` of the sharp
    affine criterion, evaluated only when ``affine_slope`` is given.
    """
    norm = id_minus_c_norm(kernel)
    r = consts.bigM / 2.0
    bound = min(2.0 * consts.gamma_margin / consts.bigM,
                consts.delta_margin / (consts.delta_margin + r))
    affine_ok = None
    if affine_slope is not None:
        affine_ok = affine_slope * (2.0 * kernel.c0 - 1.0) - 2.0 > 1e-12
    return ThresholdReport(affine_ok=affine_ok, general_bound=bound, norm=norm, verdict=norm < bound)


def weak_coupling_verdict(lmap: LocalMap, kernel: Kernel) -> bool:
    """Affine criterion for affine full-shift maps, the general bound otherwise."""
    slope = lmap.affine_slope
    report = weak_coupling_ok_general(constants(lmap), kernel, slope)
    if slope is not None and lmap.matrix.all():
        return bool(report.affine_ok)
    return report.verdict


def require_weak_coupling(lmap: LocalMap, kernel: Kernel) -> None:
    if not weak_coupling_verdict(lmap, kernel):
        raise ParameterViolation(
            f"coupling too strong: ||Id - C|| = {id_minus_c_norm(kernel):.6g} fails the weak-coupling criterion"
        )


def contraction_factor(lmap: LocalMap, kernel: Kernel, L: int) -> float:
    """``||C^{-1}|| / inf|f'|`` with the exact sup-norm of ``C^{-1}`` on Z_L."""
    return inverse_kernel(kernel, L).l1_norm / constants(lmap).inf_fp


class _Pullback:
    """Backward branch ``x = f_theta^{-1}(C^{-1} y)`` for a fixed lattice size."""

    def __init__(self, lmap: LocalMap, kernel: Kernel, L: int):
        inv = inverse_kernel(kernel, L)
        self.lmap = lmap
        self.alpha = inv.l1_norm / constants(lmap).inf_fp
        self.cinv_t = inv.matrix().T

    def __call__(self, sym, y):
        return self.lmap.inverse(y @ self.cinv_t, sym)

    def orbit(self, words, y):
        """Orbit ``x^0..x^{T-1}`` of the cylinder point with ``x^{T-1} = y``."""
        W, T, L = words.shape
        out = np.empty((W, T, L))
        out[:, T - 1] = y
        for t in range(T - 2, -1, -1):
            y = self(words[:, t], y)
            out[:, t] = y
        return out

    def sweep(self, seq, z):
        """Pull ``z`` (at the time after ``seq``) back through every frame of ``seq``."""
        W, T, L = seq.shape
        out = np.empty((W, T, L))
        for t in range(T - 1, -1, -1):
            z = self(seq[:, t], z)
            out[:, t] = z
        return out


def pull_back(lmap: LocalMap, kernel: Kernel, sym, y):
    """Single backward step through the frame ``sym``."""
    y = np.asarray(y, dtype=float)
    return _Pullback(lmap, kernel, y.shape[-1])(np.asarray(sym), y)


def _check_transitions(matrix, frames_from, frames_to, what):
    ok = matrix[frames_from - 1, frames_to - 1]
    if not ok.all():
        raise ParameterViolation(f"{what} contains a forbidden transition")


def _as_batch(words):
    words = np.asarray(words)
    single = words.ndim == 2
    return (words[None] if single else words).astype(np.int8), single


def cylinder_points(lmap: LocalMap, kernel: Kernel, words, tail=None, tol: float = CYLINDER_TOL,
                    max_sweeps: int = MAX_SWEEPS, return_orbit: bool = False):
    """Points whose orbits realise each space-time word.

    The word is continued forever by repeating ``tail`` (default: the word
    itself), which pins down a unique point; it is found by iterating the
    backward sweep through the repeated block, a contraction with factor
    ``alpha^len`` where ``alpha = ||C^{-1}|| / inf|f'|``.
    """
    words, single = _as_batch(words)
    W, T, L = words.shape
    if np.any((words < 1) | (words > lmap.n_symbols)):
        raise ParameterViolation("word symbols outside the alphabet")
    require_weak_coupling(lmap, kernel)
    pb = _Pullback(lmap, kernel, L)
    if not pb.alpha < 1:
        raise NotContracting(f"backward contraction factor {pb.alpha:.6g} >= 1")
    mat = lmap.matrix
    _check_transitions(mat, words[:, :-1], words[:, 1:], "word")
    if tail is None:
        cycle = words
    else:
        cycle, _ = _as_batch(tail)
        cycle = np.broadcast_to(cycle, (W,) + cycle.shape[1:])
        _check_transitions(mat, words[:, -1], cycle[:, 0], "word/tail junction")
        _check_transitions(mat, cycle[:, :-1], cycle[:, 1:], "tail")
    _check_transitions(mat, cycle[:, -1], cycle[:, 0], "cyclic closure")

    z = lmap.midpoints(cycle[:, 0])
    for _ in range(max_sweeps):
        orbit = pb.sweep(cycle, z)
        z_new = orbit[:, 0]
        done = np.max(np.abs(z_new - z), initial=0.0) < tol
        z = z_new
        if done:
            break
    else:
        raise NoConvergence(f"cylinder point not within tol = {tol} after {max_sweeps} sweeps")
    if tail is not None:
        orbit = pb.sweep(words, z)
    if return_orbit:
        return orbit[0] if single else orbit
    return orbit[0, 0] if single else orbit[:, 0]


def cylinder_point(lmap: LocalMap, kernel: Kernel, word, tol: float = CYLINDER_TOL, tail=None):
    return cylinder_points(lmap, kernel, word, tail=tail, tol=tol)


@dataclass(frozen=True)
class SurvivalOrbit:
    escape_time: int | None  # None: survived
    word: np.ndarray  # realised frames, shape (t, L)

    @property
    def survived(self) -> bool:
        return self.escape_time is None


def survival_orbit(lmap: LocalMap, kernel: Kernel, x, T: int) -> SurvivalOrbit:
    """Iterate until a coordinate leaves the intervals or ``F^t x`` is checked for all t <= T."""
    x = np.asarray(x, dtype=float)
    L = x.shape[-1]
    frames = []
    for t in range(T + 1):
        sym = lmap.symbols(x)
        if (sym == 0).any():
            return SurvivalOrbit(t, np.array(frames, dtype=np.int8).reshape(-1, L))
        frames.append(sym)
        if t < T:
            x = coupling.apply(kernel, L, lmap.evaluate(x, sym))
    return SurvivalOrbit(None, np.array(frames, dtype=np.int8))
