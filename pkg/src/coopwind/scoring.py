"""Energy score, band-depth rank histograms and calibration metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hierarchy import ScenarioPanel

#: norms below this are treated as zero when differentiating ||u||
NORM_EPS = 1e-12


@dataclass(frozen=True)
class EnergyScoreResult:
    value: float
    accuracy: float
    spread: float


def _check_inputs(scenarios, observation):
    X = np.atleast_2d(np.asarray(scenarios, dtype=float))
    y = np.asarray(observation, dtype=float).reshape(-1)
    if X.shape[0] < 1 or X.shape[1] != y.shape[0]:
        raise ValueError(f"scenarios {X.shape} do not match observation {y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("energy score inputs must be finite")
    return X, y


def energy_score(scenarios, observation) -> EnergyScoreResult:
    """Energy score of an N x d scenario set against one observation.

    Uses the exact double sum over all scenario pairs, so the result does
    not depend on any random pairing of the members.
    """
    X, y = _check_inputs(scenarios, observation)
    n = X.shape[0]
    accuracy = float(np.linalg.norm(X - y, axis=1).sum() / n)
    pair = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2)
    spread = float(pair.sum() / (2.0 * n * n))
    return EnergyScoreResult(accuracy - spread, accuracy, spread)


def energy_score_batch(scenarios: np.ndarray, observations: np.ndarray) -> np.ndarray:
    """Energy scores for stacked cases: scenarios (..., N, d), observations (..., d)."""
    X = np.asarray(scenarios, dtype=float)
    y = np.asarray(observations, dtype=float)
    n = X.shape[-2]
    acc = np.linalg.norm(X - y[..., None, :], axis=-1).sum(axis=-1) / n
    diff = X[..., :, None, :] - X[..., None, :, :]
    spread = np.sqrt(np.einsum("...ijk,...ijk->...ij", diff, diff)).sum(axis=(-2, -1))
    return acc - spread / (2.0 * n * n)


def _unit(u: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.einsum("...k,...k->...", u, u))[..., None]
    out = np.zeros_like(u)
    np.divide(u, norm, out=out, where=norm >= NORM_EPS)
    return out


def energy_score_batch_grad(scenarios: np.ndarray, observations: np.ndarray):
    """Energy scores and their gradients w.r.t. the scenarios, for stacked cases."""
    X = np.asarray(scenarios, dtype=float)
    y = np.asarray(observations, dtype=float)
    n = X.shape[-2]
    to_obs = X - y[..., None, :]
    diff = X[..., :, None, :] - X[..., None, :, :]
    u_obs = _unit(to_obs)
    u_pair = _unit(diff)
    acc = np.sqrt(np.einsum("...k,...k->...", to_obs, to_obs)).sum(axis=-1) / n
    spread = np.sqrt(np.einsum("...ijk,...ijk->...ij", diff, diff)).sum(axis=(-2, -1))
    value = acc - spread / (2.0 * n * n)
    # x_i enters pairs (i, j) and (j, i), hence 2 / (2 N^2)
    grad = u_obs / n - u_pair.sum(axis=-2) / (n * n)
    return value, grad


def energy_score_subgradient(scenarios, observation) -> np.ndarray:
    """Gradient of the energy score w.r.t. every scenario entry (N x d).

    The gradient of ||u|| is taken as zero wherever ||u|| < 1e-12.
    """
    X, y = _check_inputs(scenarios, observation)
    return energy_score_batch_grad(X, y)[1]


def band_depth_prerank(vectors, rng: np.random.Generator | None = None) -> np.ndarray:
    """Band-depth pre-rank of each of M vectors within the set (M x d).

    depth_j = mean_k (M - r_jk) (r_jk - 1), with r_jk the 1-based rank of
    coordinate k of vector j; ties are broken at random.
    """
    V = np.asarray(vectors, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    M, d = V.shape
    if M < 2:
        raise ValueError("band depth needs at least two vectors")
    if rng is None:
        rng = np.random.default_rng(0)
    keys = rng.random(V.shape)
    ranks = np.empty_like(V)
    for k in range(d):
        order = np.lexsort((keys[:, k], V[:, k]))
        ranks[order, k] = np.arange(1, M + 1)
    return ((M - ranks) * (ranks - 1)).mean(axis=1)


def multivariate_rank(scenarios, observation, rng: np.random.Generator | None = None) -> int:
    """Rank (1..N+1) of the observation's band depth among all N+1 depths."""
    X = np.atleast_2d(np.asarray(scenarios, dtype=float))
    y = np.asarray(observation, dtype=float).reshape(1, -1)
    if rng is None:
        rng = np.random.default_rng(0)
    depths = band_depth_prerank(np.vstack([y, X]), rng)
    obs, others = depths[0], depths[1:]
    below = int(np.sum(others < obs))
    ties = int(np.sum(others == obs))
    return below + 1 + int(rng.integers(0, ties + 1))


def case_rng(seed: int, *index: int) -> np.random.Generator:
    """Independent generator for one (issuance, lead) case."""
    return np.random.default_rng([int(seed), *(int(i) for i in index)])


def panel_ranks(panel: ScenarioPanel, seed: int = 0) -> np.ndarray:
    """Multivariate rank of every (issuance, lead) observation, flattened in panel order."""
    if panel.observations is None:
        raise ValueError("panel carries no observations")
    ranks = np.empty((panel.n_issuance, panel.n_leads), dtype=int)
    for t in range(panel.n_issuance):
        for k in range(panel.n_leads):
            ranks[t, k] = multivariate_rank(
                panel.data[t, k], panel.observations[t, k], case_rng(seed, t, k)
            )
    return ranks.reshape(-1)


def consistency_band(
    n_scenarios: int,
    n_cases: int,
    level: float = 0.95,
    n_sim: int = 1000,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise bin-count band of perfectly calibrated rank histograms.

    Simulates ``n_sim`` histograms of ``n_cases`` ranks drawn uniformly from
    the N+1 bins and returns the lower/upper quantiles of every bin count.
    """
    if n_scenarios < 1 or n_cases < 1 or n_sim < 1:
        raise ValueError("counts must be positive")
    bins = n_scenarios + 1
    rng = np.random.default_rng(seed)
    sims = rng.multinomial(n_cases, np.full(bins, 1.0 / bins), size=n_sim)
    tail = (1.0 - level) / 2.0
    lower = np.quantile(sims, tail, axis=0, method="lower")
    upper = np.quantile(sims, 1.0 - tail, axis=0, method="higher")
    return lower.astype(int), upper.astype(int)


@dataclass(frozen=True)
class RankHistogram:
    counts: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.total

    def inside_band(self) -> np.ndarray:
        return (self.counts >= self.lower) & (self.counts <= self.upper)


def rank_histogram(
    ranks, n_scenarios: int, level: float = 0.95, n_sim: int = 1000, seed: int = 0
) -> RankHistogram:
    ranks = np.asarray(ranks, dtype=int)
    if ranks.size == 0:
        raise ValueError("no ranks")
    if ranks.min() < 1 or ranks.max() > n_scenarios + 1:
        raise ValueError("rank out of range")
    counts = np.bincount(ranks - 1, minlength=n_scenarios + 1)
    lower, upper = consistency_band(n_scenarios, int(ranks.size), level, n_sim, seed)
    return RankHistogram(counts, lower, upper)


def rebin(h: RankHistogram, n_bins: int = 17) -> RankHistogram:
    """Group contiguous bins for display; bands are summed (approximate)."""
    if n_bins >= h.n_bins:
        return h
    groups = np.array_split(np.arange(h.n_bins), n_bins)
    counts = np.array([h.counts[g].sum() for g in groups])
    lower = np.array([h.lower[g].sum() for g in groups])
    upper = np.array([h.upper[g].sum() for g in groups])
    return RankHistogram(counts, lower, upper)


def deviation_from_uniform(h: RankHistogram) -> float:
    """Sum over bins of |f_b - 1/B|."""
    if h.total <= 0:
        raise ValueError("empty histogram")
    return float(np.abs(h.frequencies - 1.0 / h.n_bins).sum())


def panel_energy_scores(panel: ScenarioPanel) -> np.ndarray:
    """Energy score per (issuance, lead)."""
    if panel.observations is None:
        raise ValueError("panel carries no observations")
    return energy_score_batch(panel.data, panel.observations)


def average_energy_score(panel: ScenarioPanel) -> float:
    """AES: mean energy score over all (issuance, lead) pairs of the panel."""
    return float(panel_energy_scores(panel).mean())
