"""Noise calibration and Renyi-DP accounting for the Poisson-subsampled Gaussian.

``z`` is always the noise multiplier: noise std divided by the L2 sensitivity
of the released quantity, so the per-step mechanism is a sensitivity-1
Gaussian with standard deviation ``z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256)


class CalibrationError(RuntimeError):
    pass


def single_step_epsilon(z: float, delta: float) -> float:
    """Classical Gaussian-mechanism bound ``sqrt(2 ln(1.25/delta)) / z``."""
    if z <= 0:
        raise ValueError("noise multiplier must be positive")
    if not 0 < delta < 1.25:
        raise ValueError("delta must lie in (0, 1.25) for the bound to be defined")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / z


def rdp_gaussian(alpha: float, z: float) -> float:
    if alpha <= 1:
        raise ValueError("Renyi order must exceed 1")
    if z <= 0:
        raise ValueError("noise multiplier must be positive")
    return alpha / (2.0 * z * z)


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def rdp_subsampled_gaussian(alpha: int, q: float, z: float) -> float:
    """RDP at integer order ``alpha`` of the Poisson-subsampled Gaussian.

    Evaluates (1/(alpha-1)) log sum_j C(alpha, j) q^j (1-q)^(alpha-j)
    exp(j(j-1) / (2 z^2)) with a log-sum-exp over the binomial terms.
    """
    if isinstance(alpha, bool) or int(alpha) != alpha:
        raise ValueError(f"order must be an integer, got {alpha!r}")
    alpha = int(alpha)
    if alpha < 2:
        raise ValueError("order must be at least 2")
    if not 0 <= q <= 1:
        raise ValueError("sampling rate must lie in [0, 1]")
    if z <= 0:
        raise ValueError("noise multiplier must be positive")
    if q == 0:
        return 0.0
    if q == 1:
        return rdp_gaussian(alpha, z)
    log_q, log_1q = math.log(q), math.log1p(-q)
    j = np.arange(alpha + 1)
    terms = np.array([_log_comb(alpha, k) for k in j]) + j * log_q + (alpha - j) * log_1q
    terms += j * (j - 1) / (2.0 * z * z)
    top = terms.max()
    log_a = top + math.log(np.exp(terms - top).sum())
    return max(log_a, 0.0) / (alpha - 1)


@dataclass(frozen=True)
class RdpLedger:
    """Composed RDP over a fixed grid of orders.

    Steps are stored as multiplicities per (q, z), so composing T identical
    steps one at a time gives exactly T times the single-step curve.
    """

    orders: tuple[int, ...] = ORDERS
    steps: tuple[tuple[float, float, int], ...] = field(default=())

    def add(self, q: float, z: float, count: int = 1) -> "RdpLedger":
        if count < 0:
            raise ValueError("step count must be nonnegative")
        merged = dict(((sq, sz), n) for sq, sz, n in self.steps)
        merged[(q, z)] = merged.get((q, z), 0) + count
        return RdpLedger(self.orders, tuple((a, b, n) for (a, b), n in merged.items()))

    def __add__(self, other: "RdpLedger") -> "RdpLedger":
        if tuple(self.orders) != tuple(other.orders):
            raise ValueError("ledgers use different order grids")
        out = self
        for q, z, n in other.steps:
            out = out.add(q, z, n)
        return out

    @property
    def num_steps(self) -> int:
        return sum(n for _, _, n in self.steps)

    @property
    def rdp(self) -> np.ndarray:
        total = np.zeros(len(self.orders))
        for q, z, n in self.steps:
            total += n * np.array([rdp_subsampled_gaussian(a, q, z) for a in self.orders])
        return total


def ledger_for(q: float, z: float, steps: int, orders: Sequence[int] = ORDERS) -> RdpLedger:
    return RdpLedger(tuple(orders)).add(q, z, steps)


def rdp_to_epsilon(orders: Iterable[float], rdp: Iterable[float], delta: float,
                   conversion: str = "improved") -> tuple[float, float]:
    """Convert an RDP curve to (epsilon, best order) at the given delta.

    ``classic``: eps = rdp + ln(1/delta)/(alpha-1).
    ``improved``: eps = rdp + ln((alpha-1)/alpha) - (ln delta + ln alpha)/(alpha-1),
    which is never larger than the classic value.
    """
    orders = np.asarray(list(orders), dtype=np.float64)
    rdp = np.asarray(list(rdp), dtype=np.float64)
    if orders.size == 0:
        raise ValueError("empty ledger")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if conversion == "classic":
        eps = rdp + math.log(1.0 / delta) / (orders - 1)
    elif conversion == "improved":
        eps = rdp + np.log((orders - 1) / orders) - (math.log(delta) + np.log(orders)) / (orders - 1)
    else:
        raise ValueError(f"unknown conversion {conversion!r}")
    eps = np.maximum(eps, 0.0)
    i = int(np.nanargmin(eps))
    return float(eps[i]), float(orders[i])


def compose_and_convert(ledger: RdpLedger, delta: float,
                        conversion: str = "improved") -> tuple[float, float]:
    if not ledger.orders:
        raise ValueError("empty ledger")
    return rdp_to_epsilon(ledger.orders, ledger.rdp, delta, conversion)


def epsilon_for(q: float, z: float, steps: int, delta: float,
                orders: Sequence[int] = ORDERS, conversion: str = "improved") -> float:
    if steps == 0:
        return 0.0
    return compose_and_convert(ledger_for(q, z, steps, orders), delta, conversion)[0]


def calibrate_z(target_eps: float, delta: float, q: float, steps: int,
                orders: Sequence[int] = ORDERS, conversion: str = "improved",
                lo: float = 1e-2, hi: float = 1e4, rtol: float = 1e-3) -> float:
    """Smallest noise multiplier (to ``rtol``) whose composed epsilon is at most the target."""
    if target_eps <= 0:
        raise ValueError("target epsilon must be positive")

    def eps(z):
        return epsilon_for(q, z, steps, delta, orders, conversion)

    if eps(hi) > target_eps:
        raise CalibrationError(f"no z in [{lo}, {hi}] reaches epsilon {target_eps}")
    if eps(lo) <= target_eps:
        return lo
    while hi / lo > 1 + rtol:
        mid = math.sqrt(lo * hi)
        if eps(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi
