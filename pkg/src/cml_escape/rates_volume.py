"""Monte Carlo escape rate from surviving volumes.

A population of ``n`` lattice states starts uniform on the union of basic
sets. Each step maps every particle, records the surviving fraction ``p_t``
and refills the population from the survivors by systematic resampling. The
log-sum of the fractions telescopes to ``log Vol(U_T)`` up to the initial
volume, so the rate is ``-mean(log p_t)`` after burn-in.

Resampled copies of a deterministic orbit would stay identical forever, so
every step ends with a small reflected jitter inside each particle's current
interval. The jitter kernel is symmetric on each box, hence it leaves the
uniform law (the conditionally invariant law of the affine lattice) exactly
invariant.
"""
from __future__ import annotations

import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coupling import Kernel
from .dynamics import step_batch
from .errors import Degenerate, Extinction, ParameterViolation
from .localmap import LocalMap

N_BATCHES = 8


def rng_for(seed: int, replicate: int, step: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, replicate, step)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, replicate, step])))


@dataclass
class ParticleEnsemble:
    L: int
    particles: np.ndarray
    rng_seed: int
    step_count: int = 0
    replicate: int = 0

    @property
    def n(self) -> int:
        return self.particles.shape[0]


def init_uniform(lmap: LocalMap, L: int, n: int, seed: int, replicate: int = 0) -> ParticleEnsemble:
    """Each coordinate uniform on the union of intervals (interval picked by length)."""
    if n < 1000:
        raise ParameterViolation(f"need n >= 1000 particles, got {n}")
    rng = rng_for(seed, replicate, 0)
    lo = np.array([iv.lo for iv in lmap.intervals])
    length = np.array([iv.length for iv in lmap.intervals])
    which = rng.choice(len(lo), size=(n, L), p=length / length.sum())
    x = lo[which] + length[which] * rng.random((n, L))
    return ParticleEnsemble(L=L, particles=x, rng_seed=seed, replicate=replicate)


def systematic_resample(weights, n: int, u: float) -> np.ndarray:
    """Indices of ``n`` draws with the single uniform offset ``u`` in [0, 1)."""
    cum = np.cumsum(weights)
    cum /= cum[-1]
    positions = (u + np.arange(n)) / n
    return np.minimum(np.searchsorted(cum, positions, side="right"), len(weights) - 1)


def _reflect(x, lo, hi):
    width = hi - lo
    y = np.mod(x - lo, 2.0 * width)
    return lo + np.where(y > width, 2.0 * width - y, y)


@dataclass
class SurvivalTrace:
    p: np.ndarray
    n: int
    seed: int
    survivors: np.ndarray = field(default=None)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        if np.any((self.p < 0) | (self.p > 1)):
            raise ValueError("survival fractions must lie in [0, 1]")
        if self.survivors is None:
            self.survivors = np.rint(self.p * self.n).astype(int)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,p_t,survivors\n")
        for t, (p, s) in enumerate(zip(self.p, self.survivors), start=1):
            buf.write(f"{t},{p:.17g},{int(s)}\n")
        return buf.getvalue()


def evolve_resample(ens: ParticleEnsemble, lmap: LocalMap, kernel: Kernel, T: int,
                    jitter: float = 1e-3) -> SurvivalTrace:
    """Advance ``ens`` by ``T`` steps in place; ``jitter`` is relative to interval length."""
    if T < 1:
        raise ParameterViolation(f"need T >= 1, got {T}")
    n = ens.n
    lo = np.array([0.0] + [iv.lo for iv in lmap.intervals])
    hi = np.array([1.0] + [iv.hi for iv in lmap.intervals])
    ps, counts = [], []
    x = ens.particles
    for _ in range(T):
        ens.step_count += 1
        rng = rng_for(ens.rng_seed, ens.replicate, ens.step_count)
        y, _ = step_batch(lmap, kernel, x)
        sym = lmap.symbols(y)
        alive = (sym > 0).all(axis=1)
        k = int(alive.sum())
        ps.append(k / n)
        counts.append(k)
        if k == 0:
            trace = SurvivalTrace(ps, n, ens.rng_seed, np.array(counts))
            raise Extinction(f"population extinct at step {ens.step_count}", trace=trace)
        idx = systematic_resample(alive.astype(float), n, rng.random())
        x, sym = y[idx], sym[idx]
        if jitter > 0:
            a, b = lo[sym], hi[sym]
            x = _reflect(x + jitter * (b - a) * rng.standard_normal(x.shape), a, b)
        ens.particles = x
    return SurvivalTrace(ps, n, ens.rng_seed, np.array(counts))


@dataclass(frozen=True)
class RateEstimate:
    gamma: float
    std_err: float
    T_used: int
    burn_in: int
    tail_gamma: float = math.nan
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps({"gamma": self.gamma, "std_err": self.std_err, "T_used": self.T_used,
                           "burn_in": self.burn_in, "seed": self.seed})


def fit_rate(trace: SurvivalTrace, burn_in: int = 10) -> RateEstimate:
    """``-mean(log p_t)`` over ``t > burn_in`` with an 8-batch batch-means error."""
    T_used = len(trace.p)
    window = trace.p[burn_in:]
    if T_used - burn_in < 10:
        raise ParameterViolation(f"need at least 10 steps after burn-in, got {T_used - burn_in}")
    if np.any(window == 0):
        raise Degenerate("zero survival fraction inside the fitting window")
    logs = np.log(window)
    means = np.array([b.mean() for b in np.array_split(logs, N_BATCHES)])
    std_err = float(means.std(ddof=1) / math.sqrt(N_BATCHES))
    half = logs[len(logs) // 2:]
    return RateEstimate(gamma=float(-logs.mean()), std_err=std_err, T_used=T_used,
                        burn_in=burn_in, tail_gamma=float(-half.mean()), seed=trace.seed)


def exact_alpha_affine(a: float, kernel: Kernel, L: int) -> float:
    """Per-step survival ratio ``2^L / (a^L |det C|)`` of the affine lattice."""
    from .rates_exact import gamma_affine

    return math.exp(-gamma_affine(a, kernel, L))


def _workers(requested: int | None) -> int:
    w = requested or os.cpu_count() or 1
    cap = os.environ.get("CML_ESCAPE_THREADS")
    if cap:
        w = min(w, int(cap))
    return max(1, w)


def estimate_rate(lmap: LocalMap, kernel: Kernel, L: int, n: int, T: int, seed: int,
                  burn_in: int = 10, replicates: int = 1, workers: int | None = None,
                  jitter: float = 1e-3) -> RateEstimate:
    """Average of independent replicate fits; identical for any worker count."""

    def one(r):
        ens = init_uniform(lmap, L, n, seed, replicate=r)
        return fit_rate(evolve_resample(ens, lmap, kernel, T, jitter=jitter), burn_in)

    with ThreadPoolExecutor(max_workers=_workers(workers)) as pool:
        fits = list(pool.map(one, range(replicates)))
    gam = math.fsum(f.gamma for f in fits) / replicates
    se = math.sqrt(math.fsum(f.std_err**2 for f in fits)) / replicates
    tail = math.fsum(f.tail_gamma for f in fits) / replicates
    return RateEstimate(gamma=gam, std_err=se, T_used=T, burn_in=burn_in, tail_gamma=tail, seed=seed)


def preimage_fraction_1d(lmap: LocalMap) -> float:
    """Length fraction of the union of intervals that stays in it after one uncoupled step.

    Used as the L = 1 survival oracle; exact for affine branches.
    """
    total = sum(iv.length for iv in lmap.intervals)
    kept = 0.0
    for b in lmap.branches:
        for iv in lmap.intervals:
            img = b.image
            lo, hi = max(img.lo, iv.lo), min(img.hi, iv.hi)
            if hi > lo:
                kept += abs(float(b.inverse(hi)) - float(b.inverse(lo)))
    return kept / total
