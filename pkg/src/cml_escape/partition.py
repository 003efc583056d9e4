"""Partition function over space-time words and the bounded-distortion estimates.

``Z_{L,T}`` sums, over every admissible space-time word of length ``T``, the
supremum over the word's cylinder of ``prod_{t,s} |f'(x_s^t)|^{-1}``. Three
values are carried for every ``(L, T)``:

``log_z_point``
    each cylinder evaluated at its periodic cylinder point;
``log_z_sup``
    a numerical maximisation over the cylinder (never below the point value,
    never above the true supremum);
``log_z_upper``
    the certified bound ``log_z_point + L log c1``.

For affine maps the three coincide.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .coupling import Kernel, id_minus_c_norm, inverse_kernel, localization_fit, log_abs_det
from .dynamics import _Pullback, cylinder_points, require_weak_coupling
from .errors import BudgetExceeded, NotContracting, ParameterViolation
from .localmap import (LocalMap, admissible_word_count, constants, enumerate_words,
                       log_admissible_word_count, random_words)
from .rates_volume import _workers

WORD_BUDGET = 10**7
CHUNK = 2048
_SUP_GRID = {1: 33, 2: 9}  # grid points per site for the cylinder maximisation


@dataclass(frozen=True)
class DistortionConstants:
    alpha: float
    beta: float
    bigM: float
    c1: float
    iota: float
    c_cal_norm: float
    m1: float
    zeta1: float

    @property
    def log_c1(self) -> float:
        return self.alpha * self.beta * self.bigM / (1.0 - self.alpha)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def distortion_constants(lmap: LocalMap, kernel: Kernel, L_loc: int = 2048) -> DistortionConstants:
    """Distortion constant ``c1 = exp(alpha beta M / (1 - alpha))`` and localization data.

    ``alpha`` uses the Neumann bound ``||C^{-1}|| <= 1 / (1 - ||Id - C||)``.
    """
    norm = id_minus_c_norm(kernel)
    if not norm < 1:
        raise NotContracting(f"||Id - C|| = {norm:.6g} >= 1; no Neumann bound for C^-1")
    mc = constants(lmap)
    alpha = 1.0 / (1.0 - norm) / mc.inf_fp
    if not alpha < 1:
        raise NotContracting(f"alpha = {alpha:.6g} >= 1")
    iota = 1.0 / mc.inf_fp
    inv = inverse_kernel(kernel, L_loc)
    fit = localization_fit(inv, iota)
    return DistortionConstants(
        alpha=alpha,
        beta=mc.beta,
        bigM=mc.bigM,
        c1=math.exp(alpha * mc.beta * mc.bigM / (1.0 - alpha)),
        iota=iota,
        c_cal_norm=iota * inv.l1_norm,
        m1=fit.m1,
        zeta1=fit.zeta1,
    )


def _log_weight(lmap: LocalMap, orbit, words):
    """``-sum log|f'|`` over time and sites, one value per word."""
    return -np.log(np.abs(lmap.derivative(orbit, words))).sum(axis=(1, 2))


def verify_distortion(lmap: LocalMap, kernel: Kernel, L: int, T: int, n_pairs: int,
                      seed: int, tail_len: int = 6) -> float:
    """Largest per-site ``|log prod_t f'(x_s^t) / f'(y_s^t)|`` over sampled same-cylinder pairs.

    Both points of a pair realise the same random word of length ``T``; they
    differ through independent random continuations after time ``T``.
    """
    require_weak_coupling(lmap, kernel)
    rng = np.random.default_rng(seed)
    mat = lmap.matrix
    site_words = random_words(mat, T + 2 * tail_len, n_pairs * L, rng)
    words = site_words[:, :T].reshape(n_pairs, L, T).transpose(0, 2, 1)
    tails = []
    for k in range(2):
        tw = site_words[:, T + k * tail_len:T + (k + 1) * tail_len]
        # continuation must follow the word's last frame; regenerate its first symbol
        tw = _restart_after(mat, site_words[:, T - 1], tw, rng)
        tails.append(tw.reshape(n_pairs, L, tail_len).transpose(0, 2, 1))
    worst = 0.0
    for lo in range(0, n_pairs, CHUNK):
        hi = min(lo + CHUNK, n_pairs)
        w = words[lo:hi]
        xs = [cylinder_points(lmap, kernel, w, tail=tl[lo:hi], return_orbit=True) for tl in tails]
        lx = np.log(np.abs(lmap.derivative(xs[0], w))).sum(axis=1)
        ly = np.log(np.abs(lmap.derivative(xs[1], w))).sum(axis=1)
        worst = max(worst, float(np.abs(lx - ly).max()))
    return worst


def _restart_after(matrix, last, tail, rng):
    """Replace ``tail[:, 0]`` by a random successor of ``last`` and repair the rest."""
    tail = tail.copy()
    a = np.asarray(matrix, dtype=bool)
    prev = last
    for t in range(tail.shape[1]):
        ok = a[prev - 1, tail[:, t] - 1]
        if not ok.all():
            allowed = a[prev[~ok] - 1].astype(float)
            cum = np.cumsum(allowed / allowed.sum(axis=1, keepdims=True), axis=1)
            tail[~ok, t] = (rng.random(int((~ok).sum()))[:, None] > cum).sum(axis=1) + 1
        prev = tail[:, t]
    # close the cycle tail -> tail
    if not a[tail[:, -1] - 1, tail[:, 0] - 1].all():
        raise ParameterViolation("random tail does not close into a cycle; map is not a full shift")
    return tail


@dataclass(frozen=True)
class PartitionValue:
    L: int
    T: int
    log_z_point: float
    log_z_sup: float
    log_z_upper: float
    word_count_log: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def space_time_words(matrix, L: int, T: int) -> np.ndarray:
    """All ``(W, T, L)`` words: independent per-site words, site 0 most significant."""
    per_site = enumerate_words(matrix, T)
    idx = np.indices((per_site.shape[0],) * L).reshape(L, -1).T
    return per_site[idx].transpose(0, 2, 1)


def _logsumexp(terms) -> float:
    terms = np.asarray(terms, dtype=float)
    m = float(terms.max())
    return m + math.log(math.fsum(np.exp(terms - m)))


def _sup_search(lmap: LocalMap, pb: _Pullback, words, start_val, start_y, rel_tol=1e-13):
    """Zooming grid maximisation of the log weight over each cylinder.

    The cylinder is parametrised by its last frame ``y`` in the box of the
    final symbols; earlier frames follow by pulling back.
    """
    W, T, L = words.shape
    g = _SUP_GRID.get(L, 5)
    lo_tab = np.array([0.0] + [iv.lo for iv in lmap.intervals])
    hi_tab = np.array([0.0] + [iv.hi for iv in lmap.intervals])
    box_lo, box_hi = lo_tab[words[:, -1]], hi_tab[words[:, -1]]
    cur_lo, cur_hi = box_lo.copy(), box_hi.copy()
    mesh = np.stack(np.meshgrid(*([np.linspace(0.0, 1.0, g)] * L), indexing="ij"), -1).reshape(-1, L)
    G = mesh.shape[0]
    rep = np.repeat(words, G, axis=0)
    best, best_y = start_val.copy(), start_y.copy()
    shrink = 2.0 / (g - 1)
    levels = int(math.ceil(math.log(rel_tol) / math.log(shrink)))
    for _ in range(levels):
        pts = cur_lo[:, None, :] + (cur_hi - cur_lo)[:, None, :] * mesh[None]
        orbit = pb.orbit(rep, pts.reshape(W * G, L))
        val = _log_weight(lmap, orbit, rep)
        valid = (lmap.symbols(orbit) == rep).all(axis=(1, 2)) & np.isfinite(val)
        val = np.where(valid, val, -np.inf).reshape(W, G)
        k = np.argmax(val, axis=1)
        top = val[np.arange(W), k]
        centre = pts[np.arange(W), k]
        better = top > best
        best[better] = top[better]
        best_y[better] = centre[better]
        half = (cur_hi - cur_lo) * (shrink / 2.0)
        cur_lo = np.maximum(box_lo, best_y - half)
        cur_hi = np.minimum(box_hi, best_y + half)
    return best


def _chunk_terms(lmap, kernel, words, pb, optimise):
    orbit = cylinder_points(lmap, kernel, words, return_orbit=True)
    point = _log_weight(lmap, orbit, words)
    sup = _sup_search(lmap, pb, words, point, orbit[:, -1]) if optimise else point
    return point, sup


def partition_z(lmap: LocalMap, kernel: Kernel, L: int, T: int, budget: int = WORD_BUDGET,
                workers: int | None = None, consts: DistortionConstants | None = None) -> PartitionValue:
    """``log Z_{L,T}`` by complete enumeration of the space-time words."""
    if L < 1 or T < 1:
        raise ParameterViolation(f"need L, T >= 1, got L = {L}, T = {T}")
    per_site = admissible_word_count(lmap.matrix, T)
    required = per_site**L
    if required > budget:
        raise BudgetExceeded(f"{required} space-time words exceed the budget of {budget}", required=required)
    require_weak_coupling(lmap, kernel)
    consts = consts or distortion_constants(lmap, kernel)
    words = space_time_words(lmap.matrix, L, T)
    pb = _Pullback(lmap, kernel, L)
    optimise = consts.beta > 0
    chunks = [words[i:i + CHUNK] for i in range(0, words.shape[0], CHUNK)]
    with ThreadPoolExecutor(max_workers=_workers(workers)) as pool:
        parts = list(pool.map(lambda w: _chunk_terms(lmap, kernel, w, pb, optimise), chunks))
    point = _logsumexp(np.concatenate([p for p, _ in parts]))
    sup = _logsumexp(np.concatenate([s for _, s in parts]))
    return PartitionValue(
        L=L,
        T=T,
        log_z_point=point,
        log_z_sup=max(sup, point),
        log_z_upper=point + L * consts.log_c1,
        word_count_log=L * log_admissible_word_count(lmap.matrix, T),
    )


def partition_sequence(lmap: LocalMap, kernel: Kernel, L: int, T_max: int, **kw) -> list[PartitionValue]:
    consts = kw.pop("consts", None) or distortion_constants(lmap, kernel)
    return [partition_z(lmap, kernel, L, T, consts=consts, **kw) for T in range(1, T_max + 1)]


@dataclass(frozen=True)
class KLEstimate:
    value: float  # min_T (1/T) log Z, from the cylinder maximisation
    point: float  # same with cylinder-point evaluation
    certified: float  # same with the certified upper values
    T_argmin: int
    per_T: tuple  # (1/T) log_z_sup for T = 1..T_max


def k_l_estimate(lmap: LocalMap, kernel: Kernel, L: int, T_max: int, seq=None) -> KLEstimate:
    """``K_L = inf_T (1/T) log Z_{L,T}`` over ``1 <= T <= T_max``."""
    seq = seq or partition_sequence(lmap, kernel, L, T_max)
    per_T = [v.log_z_sup / v.T for v in seq]
    k = int(np.argmin(per_T))
    return KLEstimate(
        value=per_T[k],
        point=min(v.log_z_point / v.T for v in seq),
        certified=min(v.log_z_upper / v.T for v in seq),
        T_argmin=k + 1,
        per_T=tuple(per_T),
    )


def gamma_from_partition(lmap: LocalMap, kernel: Kernel, L: int, T_max: int, seq=None) -> float:
    """Escape rate ``log|det C|_L - K_L``."""
    return log_abs_det(kernel, L) - k_l_estimate(lmap, kernel, L, T_max, seq=seq).value


def exact_volume_log_affine(lmap: LocalMap, kernel: Kernel, L: int, T: int) -> float:
    """``log Vol`` of the states surviving ``T`` steps, affine full-shift maps only.

    The uniform law on the union of boxes is conditionally invariant, so the
    volume is the initial one times ``alpha^T``.
    """
    a = lmap.affine_slope
    if a is None or not lmap.matrix.all():
        raise ParameterViolation("exact volume oracle needs an affine full-shift map")
    total = math.fsum(iv.length for iv in lmap.intervals)
    log_alpha = L * math.log(2.0 / a) - log_abs_det(kernel, L)
    return L * math.log(total) + T * log_alpha


@dataclass(frozen=True)
class SandwichResult:
    ok: bool
    lower_slack: float  # vol_log - lower bound
    upper_slack: float  # upper bound - vol_log
    upper_slack_succ: float  # same with max_i sum_{j succ i} |I_j| in place of max_i |I_i|

    def __bool__(self) -> bool:
        return self.ok


def sandwich_check(lmap: LocalMap, kernel: Kernel, L: int, T: int, vol_log: float,
                   pv: PartitionValue | None = None,
                   consts: DistortionConstants | None = None) -> SandwichResult:
    """Two-sided bound ``c_lo^L Z |C|^{-T} <= Vol <= c_hi^L Z |C|^{-T}``.

    ``c_lo = min|I_i| / c1`` and ``c_hi = max|I_i|``; the lower side uses the
    point value of ``Z`` and the upper side the certified one.
    """
    consts = consts or distortion_constants(lmap, kernel)
    pv = pv or partition_z(lmap, kernel, L, T, consts=consts)
    lengths = [iv.length for iv in lmap.intervals]
    log_det = log_abs_det(kernel, L)
    lower = L * (math.log(min(lengths)) - consts.log_c1) - T * log_det + pv.log_z_point
    upper = L * math.log(max(lengths)) - T * log_det + pv.log_z_upper
    succ = max(math.fsum(l for l, ok in zip(lengths, row) if ok) for row in lmap.matrix)
    upper_succ = L * math.log(succ) - T * log_det + pv.log_z_upper
    lo_s, up_s = vol_log - lower, upper - vol_log
    return SandwichResult(ok=lo_s > 0 and up_s > 0, lower_slack=lo_s, upper_slack=up_s,
                          upper_slack_succ=upper_succ - vol_log)


_Z_FIELDS = {"sup": "log_z_sup", "point": "log_z_point"}


def subadd_t_check(lmap: LocalMap, kernel: Kernel, L: int, T_max: int, which: str = "sup",
                   seq=None) -> float:
    """Worst ``log Z_{T1+T2} - log Z_{T1} - log Z_{T2}`` over ``T1 + T2 <= T_max``.

    ``which`` selects the values compared: ``"sup"``, ``"point"``, or
    ``"certified"`` (point value on the left, certified upper values on the
    right, so a positive result contradicts the distortion bound).
    """
    seq = seq or partition_sequence(lmap, kernel, L, T_max)
    if which == "certified":
        left = [v.log_z_point for v in seq]
        right = [v.log_z_upper for v in seq]
    elif which in _Z_FIELDS:
        left = right = [getattr(v, _Z_FIELDS[which]) for v in seq]
    else:
        raise ParameterViolation(f"unknown comparison {which!r}")
    worst = -math.inf
    for t1 in range(1, T_max):
        for t2 in range(1, T_max - t1 + 1):
            worst = max(worst, left[t1 + t2 - 1] - right[t1 - 1] - right[t2 - 1])
    return worst


def sigma_prime_bound(consts: DistortionConstants, L: int) -> float:
    """``M L ||C_cal|| / (1 - ||C_cal||)``, linear in ``L``."""
    c = consts.c_cal_norm
    if not c < 1:
        raise NotContracting(f"||C_cal|| = {c:.6g} >= 1")
    return consts.bigM * L * c / (1.0 - c)


def finite_t_margin(consts: DistortionConstants, T: int) -> float:
    """Coarse remainder ``beta T ||C_cal|| M / (1 - ||C_cal||)`` reported beside the bound."""
    c = consts.c_cal_norm
    if not c < 1:
        raise NotContracting(f"||C_cal|| = {c:.6g} >= 1")
    return consts.beta * T * c * consts.bigM / (1.0 - c)


def subadd_l_check(lmap: LocalMap, kernel: Kernel, L1: int, L2: int, T: int,
                   consts: DistortionConstants | None = None) -> float:
    """``log Z_{L1} + log Z_{L2} + beta (Sigma'_{L1} + Sigma'_{L2}) - log Z_{L1+L2}``."""
    consts = consts or distortion_constants(lmap, kernel)
    z1 = partition_z(lmap, kernel, L1, T, consts=consts).log_z_sup
    z2 = z1 if L2 == L1 else partition_z(lmap, kernel, L2, T, consts=consts).log_z_sup
    z12 = partition_z(lmap, kernel, L1 + L2, T, consts=consts).log_z_sup
    bound = consts.beta * (sigma_prime_bound(consts, L1) + sigma_prime_bound(consts, L2))
    return z1 + z2 + bound - z12
