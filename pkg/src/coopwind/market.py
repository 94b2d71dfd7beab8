"""Day-ahead offering under dual-price imbalance settlement.

The per-hour two-stage program

    min_q (1/N) sum_xi [psi_plus * u_xi + psi_minus * w_xi]
    s.t.  q + u_xi - w_xi = y_xi,  u, w >= 0,  0 <= q <= capacity

is a newsvendor problem; its dual is

    max_nu (1/N) sum_xi nu_xi y_xi
    s.t.  (1/N) sum_xi nu_xi <= 0,  -psi_minus <= nu_xi <= psi_plus.

Both are solved in closed form here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

DUALITY_TOL = 1e-6


class DualityGapError(ArithmeticError):
    def __init__(self, primal: float, dual: float):
        super().__init__(f"duality gap: primal {primal!r} vs dual {dual!r}")
        self.primal = primal
        self.dual = dual


@dataclass(frozen=True)
class PriceTriple:
    """Day-ahead price and imbalance penalties (currency/MWh).

    psi_plus = pi_f - pi_down is paid on surplus, psi_minus = pi_up - pi_f on
    shortfall.
    """

    pi_f: float
    psi_plus: float
    psi_minus: float

    def __post_init__(self):
        for name in ("pi_f", "psi_plus", "psi_minus"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.psi_plus < 0 or self.psi_minus < 0:
            raise ValueError("penalties must be nonnegative (pi_up >= pi_f >= pi_down)")

    @classmethod
    def from_prices(cls, pi_f: float, pi_up: float, pi_down: float) -> "PriceTriple":
        return cls(pi_f, pi_f - pi_down, pi_up - pi_f)


@dataclass(frozen=True)
class OfferSolution:
    offer: float
    expected_cost: float
    duals: np.ndarray
    dual_objective: float
    provenance: str = "analytic-newsvendor"


def critical_ratio(p: PriceTriple) -> float:
    """Optimal quantile level psi_plus / (psi_plus + psi_minus)."""
    denom = p.psi_plus + p.psi_minus
    if denom <= 0:
        raise ValueError("both penalties are zero: every offer is optimal")
    return p.psi_plus / denom


def _order_index(n: int, p: PriceTriple) -> int:
    """0-based index of the ceil(alpha N)-th order statistic, computed exactly."""
    critical_ratio(p)
    plus, minus = Fraction(p.psi_plus), Fraction(p.psi_minus)
    k = math.ceil(plus * n / (plus + minus))
    return max(k, 1) - 1


def quantile_offer(scenarios, p: PriceTriple) -> float:
    """Empirical critical-ratio quantile: the ceil(alpha N)-th order statistic."""
    y = np.sort(np.asarray(scenarios, dtype=float).reshape(-1))
    if y.size < 1:
        raise ValueError("need at least one scenario")
    return float(y[_order_index(y.size, p)])


def imbalance_cost(offer, actual, p: PriceTriple):
    """psi_minus * (offer - actual)^+ + psi_plus * (actual - offer)^+ (vectorised)."""
    offer = np.asarray(offer, dtype=float)
    actual = np.asarray(actual, dtype=float)
    return p.psi_minus * np.maximum(offer - actual, 0.0) + p.psi_plus * np.maximum(
        actual - offer, 0.0
    )


def solve_offer(scenarios, p: PriceTriple, capacity: float = math.inf) -> OfferSolution:
    """Optimal offer, expected cost and scenario duals for one trading hour.

    The offer is the smallest minimiser. Scenarios strictly above the offer
    get dual psi_plus, those below get -psi_minus, and those equal to it share
    the value that closes the duality gap.
    """
    y = np.asarray(scenarios, dtype=float).reshape(-1)
    n = y.size
    if n < 1:
        raise ValueError("need at least one scenario")
    if not np.all(np.isfinite(y)):
        raise ValueError("scenarios must be finite")
    if np.any(y < 0) or np.any(y > capacity):
        raise ValueError("scenarios must lie in [0, capacity]")
    q = float(np.sort(y)[_order_index(n, p)])
    above, below, equal = y > q, y < q, y == q
    n_eq = int(equal.sum())
    shared = (p.psi_minus * below.sum() - p.psi_plus * above.sum()) / n_eq
    shared = min(max(shared, -p.psi_minus), p.psi_plus)
    duals = np.where(above, p.psi_plus, np.where(below, -p.psi_minus, shared))
    primal = float(imbalance_cost(q, y, p).mean())
    dual = float(np.dot(duals, y) / n)
    if abs(primal - dual) > DUALITY_TOL * max(1.0, abs(primal)):
        raise DualityGapError(primal, dual)
    return OfferSolution(q, primal, duals, dual)


def realized_cost(offer: float, actual: float, p: PriceTriple) -> float:
    return float(imbalance_cost(offer, actual, p))


def independent_profit(offer: float, actual: float, p: PriceTriple) -> float:
    return p.pi_f * actual - realized_cost(offer, actual, p)
