import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cml_escape.coupling import Kernel, impulse, laplacian
from cml_escape.errors import ParameterViolation
from cml_escape.rates_exact import (RateCurve, entropy_identity_check, gamma_affine, gamma_infty,
                                    gamma_infty_laplacian_closed, lyapunov_exponents_affine, rate_curve_eps,
                                    rate_curve_L)


def test_known_values():
    assert gamma_affine(3, laplacian(0), 5) == pytest.approx(5 * math.log(1.5), abs=1e-14)
    assert gamma_affine(3, laplacian(0.1), 2) == pytest.approx(0.587787, abs=1e-6)
    for L in (1, 3, 17):
        assert gamma_affine(4, laplacian(0), L) / L == pytest.approx(math.log(2), abs=1e-15)
    assert gamma_affine(3.7, impulse(), 9) == 9 * math.log(3.7 / 2)


def test_threshold_enforced():
    with pytest.raises(ParameterViolation):
        gamma_affine(3, laplacian(0.2), 4)
    with pytest.raises(ParameterViolation):
        gamma_affine(2, laplacian(0), 4)


def test_gamma_infty_values():
    assert gamma_infty(3, laplacian(0), 2) == pytest.approx(math.log(1.5), abs=1e-15)
    assert gamma_infty(3, laplacian(0.1)) == pytest.approx(0.297004, abs=1e-6)
    with pytest.raises(ParameterViolation):
        gamma_infty(3, laplacian(0.1), 1023)


@pytest.mark.parametrize("eps", [0.0, 0.03, 0.1, 0.25, 0.45])
def test_closed_form_against_high_precision_integral(eps):
    mpmath.mp.dps = 30
    val = mpmath.quad(lambda w: mpmath.log(1 - eps * (1 - mpmath.cos(2 * mpmath.pi * w))), [0, 0.5, 1])
    assert gamma_infty_laplacian_closed(3, eps) == pytest.approx(math.log(1.5) + float(val), abs=1e-13)


def test_closed_form_domain():
    with pytest.raises(ParameterViolation):
        gamma_infty_laplacian_closed(3, 0.5)


def test_lyapunov_exponents():
    np.testing.assert_allclose(lyapunov_exponents_affine(3, laplacian(0.1), 2),
                               [math.log(2.4), math.log(3)], atol=1e-15)
    assert lyapunov_exponents_affine(3, laplacian(0), 4) == [math.log(3)] * 4


@settings(max_examples=40, deadline=None)
@given(a=st.floats(2.01, 5), frac=st.floats(0, 0.999), L=st.integers(1, 40))
def test_exponent_sum_and_palindrome(a, frac, L):
    eps = frac * 0.5 * (1 - 2 / a)
    lam = lyapunov_exponents_affine(a, laplacian(eps), L)
    np.testing.assert_allclose(lam[:-1], lam[:-1][::-1], atol=1e-13)
    assert math.fsum(lam) - L * math.log(2) == pytest.approx(gamma_affine(a, laplacian(eps), L), abs=1e-11)
    assert entropy_identity_check(a, laplacian(eps), L) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(a=st.floats(2.01, 5), f1=st.floats(0, 0.999), f2=st.floats(0, 0.999), L=st.integers(2, 30))
def test_monotone_in_eps(a, f1, f2, L):
    top = 0.5 * (1 - 2 / a)
    e1, e2 = sorted((f1 * top, f2 * top))
    if e2 - e1 < 1e-6:
        return
    assert gamma_affine(a, laplacian(e2), L) < gamma_affine(a, laplacian(e1), L)


def test_per_site_convergence_on_doublings():
    gc = gamma_infty_laplacian_closed(3, 0.05)
    errs = [abs(gamma_affine(3, laplacian(0.05), L) / L - gc) for L in (8, 16, 32, 64, 128)]
    assert all(b <= a + 1e-15 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-12


def test_general_kernel_threshold():
    k = Kernel.from_table({-2: 0.05, 0: 0.9, 3: 0.05})
    assert gamma_affine(3, k, 7) == pytest.approx(
        7 * math.log(1.5) + np.linalg.slogdet(_circ(k, 7))[1], abs=1e-12)


def _circ(k, L):
    C = np.zeros((L, L))
    for s in range(L):
        for n, c in k.coeffs:
            C[s, (s - n) % L] += c
    return C


def test_rate_curves():
    c = rate_curve_L(3, laplacian(0.1), [1, 2, 4])
    text = c.to_csv(comment="a=3 eps=0.1")
    lines = text.splitlines()
    assert lines[0] == "# a=3 eps=0.1"
    assert lines[1] == "param,gamma"
    assert float(lines[3].split(",")[1]) == gamma_affine(3, laplacian(0.1), 2)
    e = rate_curve_eps(3, 8, [0, 0.05, 0.1])
    assert [g for _, g in e.points] == sorted((g for _, g in e.points), reverse=True)
    with pytest.raises(ValueError):
        RateCurve("L", ((2, 1.0), (1, 0.5)))
