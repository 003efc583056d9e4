"""Single-site expanding Markov maps with holes.

A local map is a finite list of monotone C^2 branches, each defined on a
closed interval ``I_i``. Points leaving the union of the intervals are lost
(they fell into the hole). Symbols are 1-based: branch ``i`` lives on
``branches[i - 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import MarkovViolation, NoConvergence, ParameterViolation, WordCountOverflow

DEFAULT_TOL = 1e-12
INT64_MAX = 2**63 - 1


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or not self.lo < self.hi:
            raise ParameterViolation(f"interval needs finite lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x):
        return (x >= self.lo) & (x <= self.hi)


@dataclass(frozen=True, eq=False)
class Branch:
    """One monotone expanding branch ``f: domain -> R``.

    ``fp_lower`` and ``curvature_bound`` are certified bounds supplied by the
    constructor (closed-form for the shipped families); they are spot-checked
    on a sample grid but never estimated from samples.
    """

    domain: Interval
    f: Callable
    f_prime: Callable
    f_second: Callable
    inverse: Callable
    fp_lower: float
    curvature_bound: float
    slope: float | None = None

    def __post_init__(self):
        if not self.fp_lower > 1.0:
            raise ParameterViolation(f"inf |f'| must exceed 1, certified bound is {self.fp_lower}")
        grid = np.linspace(self.domain.lo, self.domain.hi, 257)
        fp = np.asarray(self.f_prime(grid), dtype=float)
        if not (np.all(fp > 0) or np.all(fp < 0)):
            raise ParameterViolation("f' changes sign on the branch domain")
        if np.any(np.abs(fp) < self.fp_lower * (1 - 1e-12)):
            raise ParameterViolation("sampled |f'| falls below the certified lower bound")
        ratio = np.abs(np.asarray(self.f_second(grid), dtype=float) / fp)
        if np.any(ratio > self.curvature_bound * (1 + 1e-12) + 1e-15):
            raise ParameterViolation("sampled |f''/f'| exceeds the certified curvature bound")

    @property
    def image(self) -> Interval:
        a, b = float(self.f(self.domain.lo)), float(self.f(self.domain.hi))
        return Interval(min(a, b), max(a, b))


def _pair_relation(image: Interval, target: Interval, tol: float) -> str:
    # Conservative: anything within tol of touching is neither contained nor disjoint.
    if target.lo - image.lo > tol and image.hi - target.hi > tol:
        return "contains"
    if target.lo - image.hi > tol or image.lo - target.hi > tol:
        return "disjoint"
    return "violation"


def markov_matrix(branches, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Transition matrix of a branch list, enforcing the Markov dichotomy."""
    n = len(branches)
    mat = np.zeros((n, n), dtype=bool)
    for i, bi in enumerate(branches):
        img = bi.image
        for j, bj in enumerate(branches):
            rel = _pair_relation(img, bj.domain, tol)
            if rel == "violation":
                raise MarkovViolation(
                    f"f(I_{i + 1}) = [{img.lo:.6g}, {img.hi:.6g}] meets I_{j + 1} = "
                    f"[{bj.domain.lo:.6g}, {bj.domain.hi:.6g}] without strictly containing it",
                    pair=(i + 1, j + 1),
                )
            mat[i, j] = rel == "contains"
        if not mat[i].any():
            raise MarkovViolation(f"f(I_{i + 1}) strictly contains no interval", pair=(i + 1, None))
    return mat


def transitivity_check(matrix) -> bool:
    """True iff every symbol reaches every symbol within N steps."""
    a = np.asarray(matrix, dtype=bool)
    n = a.shape[0]
    reach = np.zeros_like(a)
    power = np.eye(n, dtype=bool)
    for _ in range(n):
        power = (power.astype(np.int64) @ a.astype(np.int64)) > 0
        reach |= power
    return bool(reach.all())


@dataclass(frozen=True, eq=False)
class LocalMap:
    branches: tuple
    tol: float = DEFAULT_TOL
    spec: dict | None = field(default=None, compare=False)
    matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if len(self.branches) < 2:
            raise ParameterViolation("a local map needs N > 1 branches")
        doms = sorted((b.domain for b in self.branches), key=lambda d: d.lo)
        for left, right in zip(doms, doms[1:]):
            if not left.hi < right.lo:
                raise ParameterViolation(f"branch domains overlap: {left} and {right}")
        mat = markov_matrix(self.branches, self.tol)
        if not transitivity_check(mat):
            raise MarkovViolation("transition matrix is not irreducible (f is not transitive)")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @property
    def n_symbols(self) -> int:
        return len(self.branches)

    @property
    def intervals(self) -> list[Interval]:
        return [b.domain for b in self.branches]

    @property
    def affine_slope(self) -> float | None:
        """Common |f'| if every branch is affine with the same slope modulus."""
        slopes = {abs(b.slope) if b.slope is not None else None for b in self.branches}
        if len(slopes) == 1 and None not in slopes:
            return slopes.pop()
        return None

    def symbols(self, x):
        """Sitewise symbol (1-based) of every coordinate, 0 outside the intervals."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape, dtype=np.int8)
        for i, b in enumerate(self.branches, start=1):
            out[b.domain.contains(x)] = i
        return out

    def _by_symbol(self, attr, x, sym):
        x = np.asarray(x, dtype=float)
        out = np.full_like(x, np.nan)  # symbol 0 (escaped) maps to nan
        for i, b in enumerate(self.branches, start=1):
            m = sym == i
            if m.any():
                out[m] = getattr(b, attr)(x[m])
        return out

    def evaluate(self, x, sym):
        return self._by_symbol("f", x, sym)

    def derivative(self, x, sym):
        return self._by_symbol("f_prime", x, sym)

    def inverse(self, y, sym):
        return self._by_symbol("inverse", y, sym)

    def midpoints(self, sym):
        mids = np.array([0.0] + [b.domain.midpoint for b in self.branches])
        return mids[np.asarray(sym)]

    def to_spec(self) -> dict:
        if self.spec is None:
            raise ValueError("map was built from raw branches and has no JSON spec")
        return dict(self.spec)


@dataclass(frozen=True)
class MapConstants:
    inf_fp: float
    beta: float
    bigM: float
    gamma_margin: float
    delta_margin: float
    min_len: float
    max_len: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def default_lorenz_interval(a: float) -> tuple[float, float]:
    """Conventional ``(x_lo, x_hi)`` satisfying x_lo < 0 and 1/a < x_hi < 1/2."""
    x_hi = 0.5 * (1.0 / a + 0.5)
    return -(x_hi - 1.0 / a), x_hi


def _affine_branch(domain, slope, offset):
    return Branch(
        domain=domain,
        f=lambda x: slope * np.asarray(x, dtype=float) + offset,
        f_prime=lambda x: np.full(np.shape(x), slope, dtype=float),
        f_second=lambda x: np.zeros(np.shape(x), dtype=float),
        inverse=lambda y: (np.asarray(y, dtype=float) - offset) / slope,
        fp_lower=abs(slope),
        curvature_bound=0.0,
        slope=slope,
    )


def _newton_inverse(f, fp, slope, offset):
    def inv(y):
        y = np.asarray(y, dtype=float)
        x = (y - offset) / slope
        for _ in range(60):
            dx = (f(x) - y) / fp(x)
            x = x - dx
            if np.all(np.abs(dx) <= 4e-16 * (1.0 + np.abs(x))):
                break
        resid = np.max(np.abs(f(x) - y), initial=0.0)
        if resid > 1e-12 * (1.0 + np.max(np.abs(y), initial=0.0)):
            raise NoConvergence(f"branch inversion residual {resid:.3g}")
        return x

    return inv


def _sine_branch(domain, a, offset, eta):
    two_pi = 2.0 * math.pi

    def f(x):
        x = np.asarray(x, dtype=float)
        return a * x + offset + eta * np.sin(two_pi * x)

    def fp(x):
        return a + two_pi * eta * np.cos(two_pi * np.asarray(x, dtype=float))

    def fpp(x):
        return -(two_pi**2) * eta * np.sin(two_pi * np.asarray(x, dtype=float))

    fp_lower = a - two_pi * abs(eta)
    return Branch(
        domain=domain,
        f=f,
        f_prime=fp,
        f_second=fpp,
        inverse=_newton_inverse(f, fp, a, offset),
        fp_lower=fp_lower,
        curvature_bound=(two_pi**2) * abs(eta) / fp_lower,
        slope=a if eta == 0 else None,
    )


def _lorenz_domains(x_lo, x_hi):
    return Interval(x_lo, x_hi), Interval(1.0 - x_hi, 1.0 - x_lo)


def make_lorenz(a: float, x_lo: float | None = None, x_hi: float | None = None,
                tol: float = DEFAULT_TOL) -> LocalMap:
    """Piecewise affine map ``f(x) = a x + (1 - a) H(x - 1/2)``.

    Branch 1 lives on ``[x_lo, x_hi]`` and branch 2 on ``1 - [x_lo, x_hi]``;
    0 and 1 are fixed points.
    """
    if not a > 2:
        raise ParameterViolation(f"need a > 2, got a = {a}")
    if x_lo is None and x_hi is None:
        x_lo, x_hi = default_lorenz_interval(a)
    elif x_lo is None or x_hi is None:
        raise ParameterViolation("give both x_lo and x_hi or neither")
    if not x_lo < 0:
        raise ParameterViolation(f"need x_lo < 0, got x_lo = {x_lo}")
    if not 1.0 / a < x_hi < 0.5:
        raise ParameterViolation(f"need 1/a < x_hi < 1/2, got 1/a = {1.0 / a}, x_hi = {x_hi}")
    d1, d2 = _lorenz_domains(x_lo, x_hi)
    spec = {"kind": "lorenz", "a": a, "x_lo": x_lo, "x_hi": x_hi}
    return LocalMap((_affine_branch(d1, a, 0.0), _affine_branch(d2, a, 1.0 - a)), tol=tol, spec=spec)


def make_perturbed_lorenz(a: float, eta: float, x_lo: float | None = None,
                          x_hi: float | None = None, tol: float = DEFAULT_TOL) -> LocalMap:
    """Lorenz-type map plus ``eta * sin(2 pi x)``, a genuinely nonlinear test map."""
    if not a - 2.0 * math.pi * abs(eta) > 1.0:
        raise ParameterViolation(
            f"need a - 2*pi*|eta| > 1 for expansion, got {a - 2.0 * math.pi * abs(eta):.6g}"
        )
    if x_lo is None and x_hi is None:
        x_lo, x_hi = default_lorenz_interval(a)
    elif x_lo is None or x_hi is None:
        raise ParameterViolation("give both x_lo and x_hi or neither")
    d1, d2 = _lorenz_domains(x_lo, x_hi)
    spec = {"kind": "perturbed", "a": a, "eta": eta, "x_lo": x_lo, "x_hi": x_hi}
    branches = (_sine_branch(d1, a, 0.0, eta), _sine_branch(d2, a, 1.0 - a, eta))
    return LocalMap(branches, tol=tol, spec=spec)


def map_from_spec(spec: dict) -> LocalMap:
    kind = spec.get("kind")
    x_lo, x_hi = spec.get("x_lo"), spec.get("x_hi")
    if kind == "lorenz":
        return make_lorenz(float(spec["a"]), x_lo, x_hi)
    if kind == "perturbed":
        return make_perturbed_lorenz(float(spec["a"]), float(spec.get("eta", 0.0)), x_lo, x_hi)
    raise ParameterViolation(f"unknown map kind {kind!r}")


def branch_of(lmap: LocalMap, x: float) -> int | None:
    sym = int(lmap.symbols(np.asarray(x, dtype=float)))
    return sym or None


def transition_matrix(lmap: LocalMap) -> np.ndarray:
    return lmap.matrix


def admissible_word_count(matrix, T: int, limit: int = INT64_MAX) -> int:
    """Exact number of admissible words of length ``T``.

    Raises WordCountOverflow past ``limit``; use
    :func:`log_admissible_word_count` then.
    """
    if T < 1:
        raise ParameterViolation(f"need T >= 1, got {T}")
    rows = [[int(v) for v in row] for row in np.asarray(matrix, dtype=bool)]
    v = [1] * len(rows)
    for _ in range(T - 1):
        v = [sum(r * x for r, x in zip(row, v)) for row in rows]
    total = sum(v)
    if total > limit:
        raise WordCountOverflow(f"{total.bit_length()}-bit word count exceeds limit")
    return total


def log_admissible_word_count(matrix, T: int) -> float:
    if T < 1:
        raise ParameterViolation(f"need T >= 1, got {T}")
    a = np.asarray(matrix, dtype=float)
    v = np.ones(a.shape[0])
    log_scale = 0.0
    for _ in range(T - 1):
        v = a @ v
        s = v.max()
        v /= s
        log_scale += math.log(s)
    return log_scale + math.log(v.sum())


def enumerate_words(matrix, T: int) -> np.ndarray:
    """All admissible words of length ``T`` in lexicographic order, shape (W, T)."""
    a = np.asarray(matrix, dtype=bool)
    n = a.shape[0]
    words = np.arange(1, n + 1, dtype=np.int8)[:, None]
    for _ in range(T - 1):
        last = words[:, -1] - 1
        allowed = a[last]  # (W, n)
        w_idx, nxt = np.nonzero(allowed)
        words = np.concatenate([words[w_idx], (nxt + 1).astype(np.int8)[:, None]], axis=1)
    return words


def random_words(matrix, T: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` independent admissible words of length ``T`` (uniform successor choice)."""
    a = np.asarray(matrix, dtype=bool)
    n = a.shape[0]
    out = np.empty((size, T), dtype=np.int8)
    out[:, 0] = rng.integers(1, n + 1, size=size)
    for t in range(1, T):
        allowed = a[out[:, t - 1] - 1].astype(float)
        cum = np.cumsum(allowed / allowed.sum(axis=1, keepdims=True), axis=1)
        u = rng.random(size)[:, None]
        out[:, t] = (u > cum).sum(axis=1) + 1
    return out


def constants(lmap: LocalMap) -> MapConstants:
    """Expansion, distortion and Markov-margin constants of a local map.

    ``bigM`` is exact because branches are monotone (|f| peaks at an endpoint);
    ``inf_fp`` and ``beta`` are the branches' certified bounds.
    """
    max_abs_f = 0.0
    for b in lmap.branches:
        max_abs_f = max(max_abs_f, abs(float(b.f(b.domain.lo))), abs(float(b.f(b.domain.hi))))
    gamma = math.inf
    delta = math.inf
    for i, bi in enumerate(lmap.branches):
        img = bi.image
        for j, bj in enumerate(lmap.branches):
            d = bj.domain
            if lmap.matrix[i, j]:
                delta = min(delta, d.lo - img.lo, img.hi - d.hi)
            else:
                gamma = min(gamma, max(d.lo - img.hi, img.lo - d.hi))
    lengths = [b.domain.length for b in lmap.branches]
    return MapConstants(
        inf_fp=min(b.fp_lower for b in lmap.branches),
        beta=max(b.curvature_bound for b in lmap.branches),
        bigM=2.0 * max_abs_f,
        gamma_margin=gamma,
        delta_margin=delta,
        min_len=min(lengths),
        max_len=max(lengths),
    )
