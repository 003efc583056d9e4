import itertools
import json
import math

import numpy as np
import pytest

from cml_escape import partition
from cml_escape.coupling import impulse, laplacian, log_abs_det
from cml_escape.errors import BudgetExceeded, NotContracting
from cml_escape.localmap import admissible_word_count
from cml_escape.partition import (distortion_constants, exact_volume_log_affine, finite_t_margin,
                                  gamma_from_partition, k_l_estimate, partition_sequence, partition_z,
                                  sandwich_check, sigma_prime_bound, space_time_words, subadd_l_check,
                                  subadd_t_check, verify_distortion)
from cml_escape.rates_exact import gamma_affine


def test_affine_constants(lorenz3):
    c = distortion_constants(lorenz3, laplacian(0.1))
    assert c.c1 == 1.0
    assert c.alpha == pytest.approx(1.25 / 3)
    assert c.iota == pytest.approx(1 / 3)


def test_perturbed_constants(perturbed):
    m = perturbed(0.05)
    c = distortion_constants(m, laplacian(0.05))
    alpha = (1 / 0.9) / (3 - 2 * math.pi * 0.05)
    beta = 4 * math.pi**2 * 0.05 / (3 - 2 * math.pi * 0.05)
    assert c.alpha == pytest.approx(alpha)
    assert c.c1 == pytest.approx(math.exp(alpha * beta * c.bigM / (1 - alpha)))
    assert 1 < c.c1 < math.inf
    assert set(c.to_dict()) == {"alpha", "beta", "bigM", "c1", "iota", "c_cal_norm", "m1", "zeta1"}


def test_strong_coupling_refused(lorenz3):
    with pytest.raises(NotContracting):
        distortion_constants(lorenz3, laplacian(0.6))


def test_small_partition_by_hand(lorenz3):
    pv = partition_z(lorenz3, laplacian(0), 1, 2)
    assert pv.log_z_point == pytest.approx(math.log(4 / 9), abs=1e-15)
    assert pv.log_z_point == pv.log_z_sup == pv.log_z_upper
    assert json.loads(pv.to_json())["T"] == 2


@pytest.mark.parametrize("L,T", [(1, 1), (1, 7), (2, 3), (3, 4)])
def test_affine_log_z_exact(lorenz3, L, T):
    pv = partition_z(lorenz3, laplacian(0.05), L, T)
    assert pv.log_z_point == pytest.approx(L * T * math.log(2 / 3), abs=1e-12)
    assert pv.word_count_log == pytest.approx(L * T * math.log(2))


def test_word_enumeration_size(lorenz3):
    for L, T in ((1, 5), (2, 4), (3, 2)):
        words = space_time_words(lorenz3.matrix, L, T)
        assert words.shape[0] == admissible_word_count(lorenz3.matrix, T) ** L == 2 ** (L * T)
        assert len({w.tobytes() for w in words}) == words.shape[0]


def test_budget(lorenz3):
    with pytest.raises(BudgetExceeded) as info:
        partition_z(lorenz3, laplacian(0.05), 3, 9, budget=10**6)
    assert info.value.required == 2**27


def test_ordering_point_sup_upper(perturbed):
    m = perturbed(0.02)
    for L, T in ((1, 3), (2, 2)):
        pv = partition_z(m, laplacian(0.05), L, T)
        assert pv.log_z_point <= pv.log_z_sup <= pv.log_z_upper
        assert pv.log_z_point < pv.log_z_upper


def test_cylinder_sup_beats_brute_grid(perturbed):
    # brute force: each cylinder scanned on a dense grid of its last coordinate, no coupling at L = 1
    m = perturbed(0.02)
    T = 4
    pv = partition_z(m, laplacian(0), 1, T)
    terms = []
    for w in itertools.product([1, 2], repeat=T):
        iv = m.intervals[w[-1] - 1]
        y = np.linspace(iv.lo, iv.hi, 4001)
        logw = -np.log(m.derivative(y, np.full(y.shape, w[-1])))
        for t in range(T - 2, -1, -1):
            y = m.inverse(y, np.full(y.shape, w[t]))
            logw -= np.log(m.derivative(y, np.full(y.shape, w[t])))
        terms.append(logw.max())
    brute = max(terms) + math.log(math.fsum(np.exp(np.array(terms) - max(terms))))
    assert pv.log_z_sup >= brute - 1e-12
    assert pv.log_z_sup - brute < 1e-6


def test_partitioning_independent(perturbed, monkeypatch):
    m = perturbed(0.02)
    full = partition_z(m, laplacian(0.05), 2, 3)
    monkeypatch.setattr(partition, "CHUNK", 7)
    split = partition_z(m, laplacian(0.05), 2, 3, workers=3)
    for f in ("log_z_point", "log_z_sup", "log_z_upper"):
        assert getattr(split, f) == pytest.approx(getattr(full, f), rel=1e-12)


def test_k_l_affine_constant(lorenz3):
    kl = k_l_estimate(lorenz3, laplacian(0.05), 2, 5)
    np.testing.assert_allclose(kl.per_T, 2 * math.log(2 / 3), atol=1e-13)
    assert kl.value == pytest.approx(kl.certified, abs=1e-13)


def test_k_l_minimum_at_t_max(perturbed):
    kl = k_l_estimate(perturbed(0.02), laplacian(0.05), 1, 8)
    assert kl.T_argmin == 8
    assert all(b <= a for a, b in zip(kl.per_T, kl.per_T[1:]))
    assert kl.point <= kl.value <= kl.certified


def test_gamma_from_partition_sign(lorenz3):
    k = laplacian(0.05)
    g = gamma_from_partition(lorenz3, k, 2, 6)
    assert g == pytest.approx(gamma_affine(3, k, 2), abs=1e-9)
    # the opposite orientation K_L - log|C| gives the negative of the oracle
    literal = k_l_estimate(lorenz3, k, 2, 6).value - log_abs_det(k, 2)
    assert literal == pytest.approx(-gamma_affine(3, k, 2), abs=1e-9)
    assert gamma_from_partition(lorenz3, laplacian(0), 2, 6) == pytest.approx(2 * math.log(1.5), abs=1e-12)


@pytest.mark.parametrize("L", [1, 2])
@pytest.mark.parametrize("eps", [0.0, 0.05])
def test_sandwich_structure(lorenz3, L, eps):
    k = laplacian(eps)
    for T in range(1, 7):
        vol = exact_volume_log_affine(lorenz3, k, L, T)
        res = sandwich_check(lorenz3, k, L, T, vol)
        assert res.lower_slack > 0
        # gap between the two bounds is L log(c1 max|I| / min|I|), independent of T
        assert res.lower_slack + res.upper_slack == pytest.approx(0.0, abs=1e-12)
        # with the mass of the successor intervals as upper constant the bound is attained
        assert res.upper_slack_succ == pytest.approx(0.0, abs=1e-12)


def test_sandwich_perturbed_gap(perturbed):
    m = perturbed(0.02)
    k = laplacian(0.05)
    c = distortion_constants(m, k)
    res = sandwich_check(m, k, 2, 3, 0.0, consts=c)
    lengths = [iv.length for iv in m.intervals]
    gap = res.lower_slack + res.upper_slack
    # one factor c1 from the lower constant, one from the certified Z on the upper side
    assert gap == pytest.approx(2 * math.log(max(lengths) / min(lengths)) + 4 * math.log(c.c1), rel=1e-12)


def test_subadd_t(lorenz3, perturbed):
    assert abs(subadd_t_check(lorenz3, laplacian(0.05), 1, 8)) <= 1e-12
    m = perturbed(0.02)
    seq = partition_sequence(m, laplacian(0.05), 1, 8)
    assert subadd_t_check(m, laplacian(0.05), 1, 8, seq=seq) <= 1e-6
    assert subadd_t_check(m, laplacian(0.05), 1, 8, "certified", seq=seq) <= 0
    # T1 = T2 = 1 case
    assert seq[1].log_z_sup <= 2 * seq[0].log_z_sup


def test_subadd_l(lorenz3, perturbed):
    assert subadd_l_check(lorenz3, laplacian(0.05), 1, 1, 4) == pytest.approx(0.0, abs=1e-12)
    m = perturbed(0.02)
    assert subadd_l_check(m, laplacian(0.05), 1, 1, 4) >= 0
    c = distortion_constants(m, impulse())
    slack = subadd_l_check(m, impulse(), 1, 1, 3, consts=c)
    # uncoupled sites: Z is multiplicative, only the bound term remains
    assert slack == pytest.approx(2 * c.beta * sigma_prime_bound(c, 1), abs=1e-9)


def test_sigma_prime(lorenz3):
    c = distortion_constants(lorenz3, impulse())
    assert c.c_cal_norm == pytest.approx(1 / 3)
    assert sigma_prime_bound(c, 1) == pytest.approx(1.35)
    for L in (1, 3, 10):
        assert sigma_prime_bound(c, 2 * L) == 2 * sigma_prime_bound(c, L)
    assert finite_t_margin(c, 5) == 0.0


def test_distortion_affine_zero(lorenz3):
    assert verify_distortion(lorenz3, laplacian(0.1), 2, 5, 200, seed=1) <= 1e-12


def test_distortion_bounded(perturbed):
    m = perturbed(0.05)
    k = laplacian(0.05)
    log_c1 = math.log(distortion_constants(m, k).c1)
    vals = [verify_distortion(m, k, 2, T, 300, seed=3) for T in (1, 2, 4, 8)]
    assert max(vals) <= log_c1
    assert vals[-1] == pytest.approx(vals[-2], rel=0.5)
