import json
import math
from importlib.resources import files

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from polar_denoise import specfun
from polar_denoise.errors import SpecFunDomainError, SpecFunRangeError

from conftest import rel_err


def half_integer_closed_log_k(nu: float, z: float) -> float:
    """K_{n+1/2} closed forms: sqrt(pi/(2z)) e^-z * polynomial in 1/z."""
    poly = {
        0.5: 1.0,
        1.5: 1.0 + 1.0 / z,
        2.5: 1.0 + 3.0 / z + 3.0 / z**2,
        3.5: 1.0 + 6.0 / z + 15.0 / z**2 + 15.0 / z**3,
    }[nu]
    return 0.5 * math.log(math.pi / (2.0 * z)) - z + math.log(poly)


ORDERS_HALF = [0.5, 1.5, 2.5, 3.5]
ZS = [0.1, 1.0, 10.0, 100.0]

order_strategy = st.integers(min_value=0, max_value=400).map(lambda k: k / 2.0)
z_strategy = st.floats(min_value=math.log(1e-6), max_value=math.log(1e4)).map(math.exp)


@pytest.mark.parametrize("nu", ORDERS_HALF)
@pytest.mark.parametrize("z", ZS)
def test_half_integer_closed_forms(nu, z):
    assert rel_err(specfun.log_bessel_k(nu, z), half_integer_closed_log_k(nu, z)) <= 1e-12


def test_log_k_examples():
    # K_{1/2}(1) = sqrt(pi/2) e^-1
    assert rel_err(specfun.log_bessel_k(0.5, 1.0), 0.5 * math.log(math.pi / 2) - 1.0) <= 1e-14
    # K_{3/2}(2) = sqrt(pi/4) e^-2 (1 + 1/2)
    want = math.log(math.sqrt(math.pi / 4.0) * math.exp(-2.0) * 1.5)
    assert rel_err(specfun.log_bessel_k(1.5, 2.0), want) <= 1e-14


def test_ratio_examples():
    assert rel_err(specfun.bessel_k_ratio(0.5, 3.0), 4.0 / 3.0) <= 1e-14
    # frozen high-precision oracle values (scripts/gen_bessel_oracle.py)
    table = json.loads(files("polar_denoise.data").joinpath("bessel_audit.json").read_text())
    assert rel_err(specfun.bessel_k_ratio(0.0, 1.0), table["named"]["ratio_nu0_z1"]) <= 1e-12
    assert rel_err(specfun.log_bessel_k(500.0, 10.0), table["named"]["log_k_nu500_z10"]) <= 1e-12
    # d=400 regime: ratio approaches 2*nu/z
    r = specfun.bessel_k_ratio(199.0, 1.0)
    assert abs(r - 398.0) / 398.0 <= 0.01
    assert rel_err(r, table["named"]["ratio_nu199_z1"]) <= 1e-12


def test_frozen_oracle_table():
    table = json.loads(files("polar_denoise.data").joinpath("bessel_audit.json").read_text())
    assert len(table["points"]) == 50
    for p in table["points"]:
        ev = specfun.bessel_eval(p["order"], p["argument"])
        assert rel_err(ev.log_k, p["log_k"]) <= 1e-10
        assert rel_err(ev.ratio_up, p["ratio_up"]) <= 1e-8


def test_large_order_formula():
    want = 0.5 * math.log(math.pi / 2000.0) + 1000.0 * math.log(2000.0 / math.e)
    assert rel_err(specfun.log_bessel_k_large_order(1000.0, 1.0), want) <= 1e-14


def test_large_order_agreement_at_nu2000():
    exact = specfun.log_bessel_k(2000.0, 1.0)
    approx = specfun.log_bessel_k_large_order(2000.0, 1.0)
    assert abs(exact - approx) / abs(exact) <= 1e-3


def test_large_order_out_of_regime_boundary():
    # nu=50, z=40 is outside the z = o(nu) regime: the op still evaluates,
    # but no accuracy is promised (and none holds).
    exact = specfun.log_bessel_k(50.0, 40.0)
    approx = specfun.log_bessel_k_large_order(50.0, 40.0)
    assert abs(exact - approx) / abs(exact) > 1e-3


def test_large_order_requires_nu_ge_10():
    with pytest.raises(SpecFunDomainError):
        specfun.log_bessel_k_large_order(5.0, 1.0)


@given(order=st.integers(min_value=2, max_value=300).map(lambda k: k / 2.0), z=z_strategy)
def test_recurrence_consistency(order, z):
    # r_nu = 2 nu / z + 1 / r_{nu-1}, the scaled form of the three-term recurrence
    r_prev = specfun.bessel_k_ratio(order - 1.0, z)
    r = specfun.bessel_k_ratio(order, z)
    assert rel_err(r, 2.0 * order / z + 1.0 / r_prev) <= 1e-8


@given(order=order_strategy, z1=z_strategy, z2=z_strategy)
def test_scaled_monotonicity_in_z(order, z1, z2):
    # z^nu K_nu(z) strictly decreasing in z (resolvable separations only:
    # adjacent doubles cannot witness strictness)
    lo, hi = (z1, z2) if z1 < z2 else (z2, z1)
    assume(hi > lo * (1.0 + 1e-9))
    f_lo = order * math.log(lo) + specfun.log_bessel_k(order, lo)
    f_hi = order * math.log(hi) + specfun.log_bessel_k(order, hi)
    assert f_lo > f_hi


@pytest.mark.parametrize("nu,z", [(1.0, 0.7), (2.5, 1.3), (5.0, 3.0), (10.0, 4.0)])
def test_derivative_identity(nu, z):
    # d/dz log(z^-nu K_nu(z)) = -K_{nu+1}/K_nu
    h = 1e-6 * z

    def g(zz):
        return -nu * math.log(zz) + specfun.log_bessel_k(nu, zz)

    fd = (g(z + h) - g(z - h)) / (2.0 * h)
    assert rel_err(fd, -specfun.bessel_k_ratio(nu, z)) <= 1e-5


@given(order=order_strategy, z=z_strategy)
def test_bessel_eval_invariants(order, z):
    ev = specfun.bessel_eval(order, z)
    assert math.isfinite(ev.log_k)
    assert ev.ratio_up > 1.0
    assert ev.ratio_up >= 2.0 * order / z


def test_determinism():
    a = specfun.bessel_eval(771.5, 0.037)
    b = specfun.bessel_eval(771.5, 0.037)
    assert a.log_k == b.log_k and a.ratio_up == b.ratio_up


@pytest.mark.parametrize(
    "order,z,exc",
    [
        (0.5, 0.0, SpecFunDomainError),
        (0.5, -1.0, SpecFunDomainError),
        (-0.5, 1.0, SpecFunDomainError),
        (0.3, 1.0, SpecFunDomainError),
        (2.0e4, 1.0, SpecFunRangeError),
        (1.0, 1.0e-9, SpecFunRangeError),
        (1.0, 1.0e6, SpecFunRangeError),
    ],
)
def test_domain_and_range_errors(order, z, exc):
    with pytest.raises(exc):
        specfun.log_bessel_k(order, z)
    with pytest.raises(exc):
        specfun.bessel_k_ratio(order, z)


def test_range_error_names_inputs():
    with pytest.raises(SpecFunRangeError) as info:
        specfun.log_bessel_k(2.0e4, 3.5)
    msg = str(info.value)
    assert "20000" in msg and "3.5" in msg
