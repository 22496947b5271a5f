import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidp.accountant import (ORDERS, CalibrationError, RdpLedger, calibrate_z, compose_and_convert,
                             epsilon_for, ledger_for, rdp_gaussian, rdp_subsampled_gaussian,
                             rdp_to_epsilon, single_step_epsilon)


def integrated_rdp(alpha: int, q: float, z: float) -> float:
    """Renyi divergence of (1-q)N(0,z^2) + qN(1,z^2) from N(0,z^2), by quadrature."""
    with mp.workdps(20):
        s2 = mp.mpf(z) ** 2

        def integrand(x):
            base = mp.exp(-x * x / (2 * s2)) / mp.sqrt(2 * mp.pi * s2)
            ratio = (1 - q) + q * mp.exp((2 * x - 1) / (2 * s2))
            return base * ratio ** alpha

        # mass sits near 0 and near x = alpha; split the line there
        pts = [-mp.inf, -12 * z, 0, 0.5, 1, alpha / 2, alpha, alpha + 12 * z, mp.inf]
        pts = sorted(set(pts), key=float)
        a = mp.quad(integrand, pts, method="gauss-legendre")
        return float(mp.log(a) / (alpha - 1))


def test_lemma_closed_form():
    assert single_step_epsilon(1.0, 1e-5) == math.sqrt(2 * math.log(1.25 / 1e-5))
    assert single_step_epsilon(1.0, 1e-5) == pytest.approx(4.8448, abs=5e-5)
    assert single_step_epsilon(4.8448, 1e-5) == pytest.approx(1.0, abs=1e-4)


def test_lemma_decreases_to_zero():
    vals = [single_step_epsilon(z, 1e-5) for z in (1, 10, 100, 1e6)]
    assert all(a > b for a, b in zip(vals, vals[1:])) and vals[-1] < 1e-5


@pytest.mark.parametrize("z, delta", [(0.0, 1e-5), (1.0, 0.0), (1.0, 1.25), (1.0, 2.0)])
def test_lemma_domain(z, delta):
    with pytest.raises(ValueError):
        single_step_epsilon(z, delta)


def test_gaussian_rdp_values():
    assert rdp_gaussian(2, 1.0) == 1.0
    assert rdp_gaussian(2, 2.0) == 0.25
    assert rdp_gaussian(6, 2.0) == 3 * rdp_gaussian(2, 2.0)


def test_subsampled_limits():
    assert rdp_subsampled_gaussian(8, 0.0, 1.0) == 0.0
    assert rdp_subsampled_gaussian(8, 1.0, 1.5) == rdp_gaussian(8, 1.5)
    close = rdp_subsampled_gaussian(8, 1 - 1e-9, 1.5)
    assert close == pytest.approx(rdp_gaussian(8, 1.5), rel=1e-6)


def test_subsampled_rejects_fractional_order():
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(2.5, 0.1, 1.0)
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(1, 0.1, 1.0)


def test_order_two_closed_form():
    q, z = 0.01, 1.0
    expect = math.log(1 + q * q * (math.exp(1 / z ** 2) - 1))
    assert rdp_subsampled_gaussian(2, q, z) == pytest.approx(expect, rel=1e-12)


def test_large_orders_do_not_overflow():
    v = rdp_subsampled_gaussian(256, 0.5, 0.3)
    assert math.isfinite(v) and v > 0


@pytest.mark.parametrize("q", [0.001, 0.01, 0.1])
@pytest.mark.parametrize("z", [0.5, 1.0, 2.0, 4.0])
def test_matches_numerical_integration(q, z):
    for alpha in (2, 3, 5, 8, 13, 21, 32):
        ours = rdp_subsampled_gaussian(alpha, q, z)
        ref = integrated_rdp(alpha, q, z)
        assert ours == pytest.approx(ref, rel=1e-6), (alpha, q, z)


def test_ledger_additive_and_monotone():
    a = ledger_for(0.01, 1.1, 100)
    b = ledger_for(0.01, 1.1, 100)
    both = a + b
    np.testing.assert_allclose(both.rdp, ledger_for(0.01, 1.1, 200).rdp, rtol=1e-15)
    assert both.num_steps == 200
    assert epsilon_for(0.01, 1.1, 200, 1e-5) > epsilon_for(0.01, 1.1, 100, 1e-5)


def test_empty_ledger_is_an_error():
    with pytest.raises(ValueError):
        compose_and_convert(RdpLedger(()), 1e-5)


def test_full_batch_single_step_beats_lemma():
    z = 4.8448
    eps, _ = compose_and_convert(ledger_for(1.0, z, 1), 1e-5)
    assert eps <= single_step_epsilon(z, 1e-5)
    eps1, _ = compose_and_convert(ledger_for(1.0, 1.0, 1, orders=np.arange(2, 400)), 1e-5)
    assert eps1 <= single_step_epsilon(1.0, 1e-5)


def test_classic_conversion_with_delta_near_one_is_min_rdp():
    led = ledger_for(0.05, 1.0, 50)
    eps, _ = compose_and_convert(led, 1 - 1e-12, conversion="classic")
    assert eps == pytest.approx(led.rdp.min(), abs=1e-9)


def test_improved_conversion_never_worse_than_classic():
    led = ledger_for(0.02, 0.9, 300)
    assert compose_and_convert(led, 1e-5)[0] <= compose_and_convert(led, 1e-5, "classic")[0]


def test_conversion_rejects_bad_arguments():
    with pytest.raises(ValueError):
        rdp_to_epsilon([2, 3], [0.1, 0.2], 1.5)
    with pytest.raises(ValueError):
        rdp_to_epsilon([2, 3], [0.1, 0.2], 1e-5, conversion="other")


def test_calibration_round_trip():
    q, T = 256 / 7500, 145
    for target in (0.5, 1.0, 3.0):
        z = calibrate_z(target, 1e-5, q, T)
        eps = epsilon_for(q, z, T, 1e-5)
        assert eps <= target and eps >= 0.99 * target


def test_calibration_monotone_in_steps():
    assert calibrate_z(1.0, 1e-5, 0.01, 2000) > calibrate_z(1.0, 1e-5, 0.01, 200)


def test_calibration_full_batch_no_worse_than_lemma():
    assert calibrate_z(1.0, 1e-5, 1.0, 1) <= 4.8448


def test_calibration_failure():
    with pytest.raises(CalibrationError):
        calibrate_z(1e-9, 1e-5, 1.0, 10_000)


def test_default_order_grid():
    assert ORDERS[:3] == (2, 3, 4) and ORDERS[-3:] == (64, 128, 256)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 64), st.floats(1e-4, 0.99), st.floats(0.3, 8.0))
def test_subsampling_never_exceeds_full_mechanism(alpha, q, z):
    v = rdp_subsampled_gaussian(alpha, q, z)
    assert 0 <= v <= rdp_gaussian(alpha, z) * (1 + 1e-12)
