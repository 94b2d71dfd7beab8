"""Hour-by-hour offering, settlement and evaluation over a test panel."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .allocation import audit_core, cooperative_profit, expected_allocation, expost_shares
from .hierarchy import ScenarioPanel
from .market import PriceTriple, independent_profit, quantile_offer, realized_cost, solve_offer
from .reconcile import Reconciler, apply
from .scoring import (
    case_rng,
    deviation_from_uniform,
    energy_score,
    multivariate_rank,
    rank_histogram,
)

METHODS = ("independent", "bottom_up", "projection", "nonparametric")


class HourFailure(ArithmeticError):
    def __init__(self, issuance: str, lead: int, cause: Exception):
        super().__init__(f"hour issuance_time={issuance} lead_time={lead}: {cause}")
        self.issuance = issuance
        self.lead = lead


@dataclass
class HourResult:
    t: int
    k: int
    offers: np.ndarray  # one aggregate offer, or one per producer for independent
    expected_costs: np.ndarray
    realized_cost: float
    duals: np.ndarray
    a: np.ndarray
    c: np.ndarray
    profit_coop: np.ndarray
    profit_indep: np.ndarray
    energy_score: float
    rank: int
    core_ok: bool
    core_violation: float
    scenarios: np.ndarray  # forecast scenarios used (N, m+1)


def settle_hour(
    base: np.ndarray,
    actual: np.ndarray,
    reconciler: Reconciler | None,
    p: PriceTriple,
    rng: np.random.Generator,
    t: int = 0,
    k: int = 0,
) -> HourResult:
    """Offer, settle and score one trading hour.

    ``reconciler`` None means independent offering on the base forecasts.
    """
    h = (reconciler.hierarchy if reconciler is not None else None)
    caps = None if h is None else h.bottom_capacities
    m = base.shape[1] - 1
    indep_offers = np.array([quantile_offer(base[:, 1 + i], p) for i in range(m)])
    profit_indep = np.array(
        [independent_profit(indep_offers[i], actual[1 + i], p) for i in range(m)]
    )
    if reconciler is None:
        forecast = base
        costs = np.array([solve_offer(base[:, 1 + i], p).expected_cost for i in range(m)])
        c = np.array([realized_cost(indep_offers[i], actual[1 + i], p) for i in range(m)])
        return HourResult(
            t, k, indep_offers, costs, math.fsum(c), np.zeros(0), costs, c,
            np.full(m, np.nan), profit_indep,
            energy_score(forecast, actual).value,
            multivariate_rank(forecast, actual, rng),
            True, 0.0, forecast,
        )
    forecast = apply(reconciler, base)
    if not np.all(np.isfinite(forecast)):
        raise FloatingPointError("reconciled scenarios are not finite")
    bottom, agg = forecast[:, 1:], forecast[:, 0]
    sol = solve_offer(agg, p, float(caps.sum()))
    alloc = expected_allocation(bottom, sol.duals, agg)
    cost = realized_cost(sol.offer, actual[0], p)
    c = expost_shares(alloc, cost, bottom.mean(axis=0))
    audit = audit_core(alloc, bottom, p)
    return HourResult(
        t, k, np.array([sol.offer]), np.array([sol.expected_cost]), cost, sol.duals,
        alloc.a, c, cooperative_profit(actual[1:], c, p), profit_indep,
        energy_score(forecast, actual).value,
        multivariate_rank(forecast, actual, rng),
        audit.is_core, audit.worst_violation, forecast,
    )


@dataclass
class RunResult:
    method: str
    hours: list[HourResult]
    panel: ScenarioPanel
    prices: PriceTriple
    seed: int

    @property
    def aes(self) -> float:
        return float(np.mean([r.energy_score for r in self.hours]))

    @property
    def ranks(self) -> np.ndarray:
        return np.array([r.rank for r in self.hours])

    def histogram(self, n_sim: int = 1000, level: float = 0.95):
        return rank_histogram(self.ranks, self.panel.n_scenarios, level, n_sim, self.seed)

    @property
    def average_profit(self) -> np.ndarray:
        """Per-producer mean profit of this method (currency/h)."""
        key = "profit_indep" if self.method == "independent" else "profit_coop"
        return np.mean([getattr(r, key) for r in self.hours], axis=0)

    @property
    def average_profit_independent(self) -> np.ndarray:
        return np.mean([r.profit_indep for r in self.hours], axis=0)

    @property
    def core_pass_rate(self) -> float:
        return float(np.mean([r.core_ok for r in self.hours]))

    def metrics(self, n_sim: int = 1000, level: float = 0.95) -> dict:
        names = self.panel.hierarchy.names
        hist = self.histogram(n_sim, level)
        return {
            "method": self.method,
            "seed": self.seed,
            "n_hours": len(self.hours),
            "n_scenarios": self.panel.n_scenarios,
            "aes": self.aes,
            "deviation": deviation_from_uniform(hist),
            "average_profit": dict(zip(names, self.average_profit.tolist())),
            "average_profit_independent": dict(zip(names, self.average_profit_independent.tolist())),
            "average_expected_cost": dict(
                zip(names, np.mean([r.a for r in self.hours], axis=0).tolist())
            ),
            "core_pass_rate": self.core_pass_rate,
        }


def run_method(
    method: str,
    panel: ScenarioPanel,
    reconciler: Reconciler | None,
    p: PriceTriple,
    seed: int = 0,
    threads: int = 1,
) -> RunResult:
    """Settle every (issuance, lead) of ``panel``; results keep panel order
    whatever the thread count."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if panel.observations is None:
        raise ValueError("test panel needs observations")
    if (reconciler is None) != (method == "independent"):
        raise ValueError(f"method {method} and reconciler do not match")
    cases = [(t, k) for t in range(panel.n_issuance) for k in range(panel.n_leads)]

    def one(case):
        t, k = case
        try:
            return settle_hour(
                panel.data[t, k], panel.observations[t, k], reconciler, p,
                case_rng(seed, t, k), t, k,
            )
        except ArithmeticError as exc:
            raise HourFailure(panel.issuance_times[t], panel.lead_times[k], exc) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            hours = list(pool.map(one, cases))
    else:
        hours = [one(c) for c in cases]
    return RunResult(method, hours, panel, p, seed)
