"""Dual-based cost allocation, ex-post sharing and coalition audits."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .hierarchy import INGEST_TOL
from .market import PriceTriple, _order_index, imbalance_cost, solve_offer

log = logging.getLogger(__name__)

CORE_TOL = 1e-6
EXHAUSTIVE_MAX_M = 20


class CoherenceError(ValueError):
    pass


@dataclass(frozen=True)
class AllocationVector:
    """Expected allocated costs a_i with the duals and scenarios behind them."""

    a: np.ndarray
    duals: np.ndarray
    scenarios: np.ndarray

    @property
    def total(self) -> float:
        return math.fsum(self.a)


def expected_allocation(bottom, duals, aggregate=None, tol: float = INGEST_TOL) -> AllocationVector:
    """a_i = (1/N) sum_xi bottom[xi, i] * duals[xi].

    If ``aggregate`` (the scenarios the grand coalition was solved on) is
    given, it must equal the row sums of ``bottom`` within ``tol``.
    """
    Y = np.atleast_2d(np.asarray(bottom, dtype=float))
    nu = np.asarray(duals, dtype=float).reshape(-1)
    if Y.shape[0] != nu.size:
        raise ValueError(f"{Y.shape[0]} scenarios but {nu.size} duals")
    if aggregate is not None:
        gap = np.abs(np.asarray(aggregate, dtype=float).reshape(-1) - Y.sum(axis=1))
        if np.any(gap > tol):
            xi = int(np.argmax(gap))
            raise CoherenceError(f"scenario {xi} is incoherent by {gap[xi]:.3g} MW")
    a = nu @ Y / nu.size
    return AllocationVector(a, nu, Y)


def _budget_remainder(shares: np.ndarray, total: float) -> np.ndarray:
    """Scale shares to ``total`` so that fsum of the result equals it exactly.

    The last producer takes total minus the others. When its rounding alone
    cannot close the gap, the exact residual is carried through the entries,
    largest first, so the final rounding lands on the smallest one.
    """
    c = shares * total
    if c.size == 1:
        c[0] = total
        return c
    c[-1] = total - math.fsum(c[:-1])
    if math.fsum(c) == total:
        return c
    target = Fraction(total)
    order = np.argsort(-np.abs(c), kind="stable")
    for j in order:
        others = sum(Fraction(float(x)) for i, x in enumerate(c) if i != j)
        c[j] = float(target - others)
        if math.fsum(c) == total:
            return c
    j = order[-1]
    for direction in (math.inf, -math.inf):
        trial = c.copy()
        trial[j] = np.nextafter(c[j], direction)
        if math.fsum(trial) == total:
            return trial
    log.warning("budget off by %.3g after remainder rule", math.fsum(c) - total)
    return c


def expost_shares(a, aggregate_realized_cost: float, expected_generation=None) -> np.ndarray:
    """Split the realised aggregate imbalance cost in proportion to a.

    When sum(a) is zero the split follows expected generation, and equal
    shares if that is zero as well.
    """
    a = np.asarray(a.a if isinstance(a, AllocationVector) else a, dtype=float)
    total_a = math.fsum(a)
    if abs(total_a) > 1e-12 * max(1.0, math.fsum(np.abs(a))):
        shares = a / total_a
    else:
        gen = None if expected_generation is None else np.asarray(expected_generation, float)
        if gen is not None and math.fsum(gen) > 0:
            shares = gen / math.fsum(gen)
        else:
            shares = np.full(a.size, 1.0 / a.size)
    return _budget_remainder(shares, float(aggregate_realized_cost))


def cooperative_profit(actual, c, p: PriceTriple):
    return p.pi_f * np.asarray(actual, dtype=float) - np.asarray(c, dtype=float)


def newsvendor_costs(scenarios: np.ndarray, p: PriceTriple) -> np.ndarray:
    """Optimal expected cost for each row of a (K, N) scenario matrix."""
    Y = np.sort(np.atleast_2d(scenarios), axis=1)
    q = Y[:, _order_index(Y.shape[1], p)]
    return imbalance_cost(q[:, None], Y, p).mean(axis=1)


def characteristic_value(coalition, bottom, p: PriceTriple, capacities=None) -> float:
    """l(S): optimal expected cost of coalition S offering its summed scenarios."""
    members = sorted(set(int(i) for i in coalition))
    if not members:
        raise ValueError("coalition must be nonempty")
    Y = np.atleast_2d(np.asarray(bottom, dtype=float))
    cap = math.inf if capacities is None else math.fsum(np.asarray(capacities)[members])
    return solve_offer(Y[:, members].sum(axis=1), p, cap).expected_cost


def _masks(m: int, coalitions) -> np.ndarray:
    M = np.zeros((len(coalitions), m))
    for r, members in enumerate(coalitions):
        M[r, list(members)] = 1.0
    return M


def _coalition_values(members_matrix: np.ndarray, Y: np.ndarray, p: PriceTriple, chunk=4096):
    out = np.empty(members_matrix.shape[0])
    for s in range(0, members_matrix.shape[0], chunk):
        sums = members_matrix[s : s + chunk] @ Y.T
        out[s : s + chunk] = newsvendor_costs(sums, p)
    return out


@dataclass
class CoreAudit:
    is_core: bool
    worst_violation: float
    efficiency_gap: float
    table: list[dict]

    def to_dict(self) -> dict:
        return {
            "is_core": self.is_core,
            "worst_violation": self.worst_violation,
            "efficiency_gap": self.efficiency_gap,
            "coalitions": self.table,
        }


def audit_core(
    a,
    bottom,
    p: PriceTriple,
    tol: float = CORE_TOL,
    n_samples: int = 100_000,
    seed: int = 0,
) -> CoreAudit:
    """Check sum_{i in S} a_i <= l(S) for every coalition and sum a = l(M).

    Exhaustive for m <= 20; above that a random sample of coalitions is
    checked alongside the singletons and the grand coalition.
    """
    a = np.asarray(a.a if isinstance(a, AllocationVector) else a, dtype=float)
    Y = np.atleast_2d(np.asarray(bottom, dtype=float))
    m = Y.shape[1]
    if m <= EXHAUSTIVE_MAX_M:
        coalitions = [
            tuple(i for i in range(m) if mask >> i & 1) for mask in range(1, 1 << m)
        ]
    else:
        rng = np.random.default_rng(seed)
        picks = {tuple(range(m))} | {(i,) for i in range(m)}
        while len(picks) < n_samples:
            draw = np.flatnonzero(rng.random(m) < 0.5)
            if draw.size:
                picks.add(tuple(int(i) for i in draw))
        coalitions = sorted(picks, key=lambda s: (len(s), s))
    M = _masks(m, coalitions)
    values = _coalition_values(M, Y, p)
    allocated = M @ a
    slack = values - allocated
    grand = next(r for r, s in enumerate(coalitions) if len(s) == m)
    efficiency_gap = float(abs(math.fsum(a) - values[grand]))
    worst = float(max(0.0, -slack.min()))
    ok = worst <= tol and efficiency_gap <= tol * max(1.0, abs(values[grand]))
    table = [
        {
            "coalition": list(s),
            "allocated": float(allocated[r]),
            "value": float(values[r]),
            "slack": float(slack[r]),
        }
        for r, s in enumerate(coalitions)
    ]
    return CoreAudit(bool(ok), worst, efficiency_gap, table)


@dataclass
class SuperadditivityAudit:
    holds: bool
    worst_violation: float
    n_pairs: int


def audit_superadditivity(
    bottom, p: PriceTriple, n_pairs: int | None = None, seed: int = 0, tol: float = CORE_TOL
) -> SuperadditivityAudit:
    """Check l(S u T) <= l(S) + l(T) over disjoint coalition pairs.

    All pairs are enumerated when ``n_pairs`` is None, otherwise that many
    random disjoint pairs are drawn.
    """
    Y = np.atleast_2d(np.asarray(bottom, dtype=float))
    m = Y.shape[1]
    if m < 2:
        raise ValueError("need at least two producers")
    if n_pairs is None:
        # label 0: outside, 1: in S, 2: in T; count each unordered pair once
        pairs = []
        for labels in itertools.product((0, 1, 2), repeat=m):
            S = tuple(i for i, l in enumerate(labels) if l == 1)
            T = tuple(i for i, l in enumerate(labels) if l == 2)
            if S and T and S < T:
                pairs.append((S, T))
    else:
        rng = np.random.default_rng(seed)
        pairs = []
        while len(pairs) < n_pairs:
            labels = rng.integers(0, 3, size=m)
            S = tuple(np.flatnonzero(labels == 1).tolist())
            T = tuple(np.flatnonzero(labels == 2).tolist())
            if S and T:
                pairs.append((S, T))
    if not pairs:
        return SuperadditivityAudit(True, 0.0, 0)
    left = _coalition_values(_masks(m, [S + T for S, T in pairs]), Y, p)
    right = _coalition_values(_masks(m, [S for S, _ in pairs]), Y, p) + _coalition_values(
        _masks(m, [T for _, T in pairs]), Y, p
    )
    worst = float(max(0.0, (left - right).max()))
    return SuperadditivityAudit(worst <= tol, worst, len(pairs))
