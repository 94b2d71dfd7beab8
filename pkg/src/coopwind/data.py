"""Panel ingestion, chronological splitting and seeded synthetic datasets.

Files are long-form CSV with header
``issuance_time,lead_time,scenario,series,value_mw``; observations use
``scenario = -1``.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.special import expit

from .hierarchy import INGEST_TOL, Hierarchy, ScenarioPanel, coherence_gap

log = logging.getLogger(__name__)

HEADER = ("issuance_time", "lead_time", "scenario", "series", "value_mw")
OBSERVATION = -1

#: Wind farm capacities (MW) of the NYISO North zone case
TABLE_I_SITES = (
    ("Marble_River", 215.25),
    ("Noble_Clinton", 100.5),
    ("Noble_Ellenburg", 81.0),
    ("Noble_Altona", 97.5),
    ("Noble_Chateaugay", 106.5),
    ("Jericho_Rise", 77.7),
    ("Bull_Run_II_Wind", 145.4),
    ("Bull_Run_Wind", 303.6),
)


class DataError(ValueError):
    pass


class MissingCellError(DataError):
    def __init__(self, file, index):
        self.index = index
        issuance, lead, scenario, series = index
        super().__init__(
            f"{file}: missing cell issuance_time={issuance} lead_time={lead} "
            f"scenario={scenario} series={series}"
        )


class IncoherentObservationError(DataError):
    pass


@dataclass
class DatasetManifest:
    sites: list[tuple[str, float]]
    forecast_path: Path
    observation_path: Path | None
    n_scenarios: int
    split_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        self.sites = [(str(n), float(c)) for n, c in self.sites]
        self.forecast_path = Path(self.forecast_path)
        if self.observation_path is not None:
            self.observation_path = Path(self.observation_path)
        if not 0 < self.split_fraction < 1:
            raise DataError("split_fraction must lie in (0, 1)")
        if self.n_scenarios < 2:
            raise DataError("need at least two scenarios")
        if not self.sites:
            raise DataError("manifest lists no sites")

    @property
    def hierarchy(self) -> Hierarchy:
        return Hierarchy(tuple(n for n, _ in self.sites), tuple(c for _, c in self.sites))

    @classmethod
    def from_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        raw = yaml.safe_load(path.read_text())
        try:
            sites = [(s["name"], s["capacity"]) for s in raw["sites"]]
            base = path.parent
            obs = raw.get("observation_path")
            return cls(
                sites,
                base / raw["forecast_path"],
                None if obs is None else base / obs,
                int(raw["n_scenarios"]),
                float(raw.get("split_fraction", 0.8)),
                int(raw.get("seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed manifest ({exc})") from exc

    def write(self, path):
        path = Path(path)
        base = path.parent.resolve()

        def rel(p):
            p = Path(p).resolve()
            return str(p.relative_to(base)) if p.is_relative_to(base) else str(p)

        body = {
            "sites": [{"name": n, "capacity": c} for n, c in self.sites],
            "forecast_path": rel(self.forecast_path),
            "observation_path": None if self.observation_path is None else rel(self.observation_path),
            "n_scenarios": self.n_scenarios,
            "split_fraction": self.split_fraction,
            "seed": self.seed,
        }
        path.write_text(yaml.safe_dump(body, sort_keys=False))


def _read_long(path) -> list[tuple[str, int, int, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != HEADER:
            raise DataError(f"{path}: expected header {','.join(HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((row[0], int(row[1]), int(row[2]), row[3], float(row[4])))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: cannot parse {row!r}") from exc
    return rows


def _quantile_match(values: np.ndarray, n: int) -> np.ndarray:
    """Resample the last axis to n members by empirical quantiles (sorted output)."""
    levels = (np.arange(n) + 0.5) / n
    return np.moveaxis(np.quantile(values, levels, axis=-1), 0, -1)


def load_panel(manifest: DatasetManifest) -> ScenarioPanel:
    """Read, align, clip and validate a scenario panel described by ``manifest``."""
    h = manifest.hierarchy
    series = h.series_names
    caps = h.series_capacities
    rows = _read_long(manifest.forecast_path)
    obs_rows = [r for r in rows if r[2] == OBSERVATION]
    rows = [r for r in rows if r[2] != OBSERVATION]
    if manifest.observation_path is not None:
        obs_rows += [r for r in _read_long(manifest.observation_path) if r[2] == OBSERVATION]
    if not rows:
        raise DataError(f"{manifest.forecast_path}: no forecast rows")
    unknown = {r[3] for r in rows} - set(series)
    if unknown:
        raise DataError(f"unknown series {sorted(unknown)}")

    times = sorted({r[0] for r in rows})
    leads = sorted({r[1] for r in rows})
    t_index = {t: i for i, t in enumerate(times)}
    k_index = {k: i for i, k in enumerate(leads)}
    by_series = defaultdict(list)
    for r in rows:
        by_series[r[3]].append(r)

    N = manifest.n_scenarios
    data = np.empty((len(times), len(leads), N, len(series)))
    for s, name in enumerate(series):
        srows = by_series.get(name)
        if not srows:
            raise MissingCellError(manifest.forecast_path, (times[0], leads[0], 0, name))
        n_s = max(r[2] for r in srows) + 1
        block = np.full((len(times), len(leads), n_s), np.nan)
        for t, k, xi, _, v in srows:
            block[t_index[t], k_index[k], xi] = v
        missing = np.argwhere(np.isnan(block))
        if missing.size:
            t, k, xi = missing[0]
            raise MissingCellError(manifest.forecast_path, (times[t], leads[k], int(xi), name))
        if n_s != N:
            log.info("series %s has %d scenarios; quantile-matching to %d", name, n_s, N)
            block = _quantile_match(block, N)
        data[..., s] = block

    lo_viol = int((data < 0).sum())
    hi_viol = int((data > caps).sum())
    if lo_viol or hi_viol:
        log.warning(
            "clipping %d forecast values below 0 and %d above capacity", lo_viol, hi_viol
        )
    data = np.clip(data, 0.0, caps)

    observations = None
    if obs_rows:
        observations = np.full((len(times), len(leads), len(series)), np.nan)
        s_index = {n: i for i, n in enumerate(series)}
        for t, k, _, name, v in obs_rows:
            if t in t_index and k in k_index and name in s_index:
                observations[t_index[t], k_index[k], s_index[name]] = v
        missing = np.argwhere(np.isnan(observations))
        if missing.size:
            t, k, s = missing[0]
            raise MissingCellError(
                manifest.observation_path or manifest.forecast_path,
                (times[t], leads[k], OBSERVATION, series[s]),
            )
        gap = coherence_gap(observations)
        if np.any(gap > INGEST_TOL):
            t, k = np.unravel_index(int(np.argmax(gap)), gap.shape)
            raise IncoherentObservationError(
                f"observation at issuance_time={times[t]} lead_time={leads[k]} is "
                f"incoherent: aggregate differs from the sum of producers by {gap[t, k]:.6g} MW"
            )
        clipped = np.clip(observations[..., 1:], 0.0, caps[1:])
        if np.any(clipped != observations[..., 1:]):
            log.warning("clipping observations outside [0, capacity]")
            observations = np.concatenate([clipped.sum(-1, keepdims=True), clipped], axis=-1)

    return ScenarioPanel(h, tuple(times), data, observations, tuple(leads))


def _fmt(v: float) -> str:
    return repr(float(v))


def save_panel(panel: ScenarioPanel, forecast_path, observation_path=None) -> None:
    """Write a panel in the long CSV format with round-trip float precision."""
    series = panel.series_names
    with open(forecast_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for t, time in enumerate(panel.issuance_times):
            for k, lead in enumerate(panel.lead_times):
                block = panel.data[t, k]
                for xi in range(panel.n_scenarios):
                    for s, name in enumerate(series):
                        w.writerow((time, lead, xi, name, _fmt(block[xi, s])))
    if panel.observations is not None and observation_path is not None:
        with open(observation_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADER)
            for t, time in enumerate(panel.issuance_times):
                for k, lead in enumerate(panel.lead_times):
                    for s, name in enumerate(series):
                        w.writerow((time, lead, OBSERVATION, name, _fmt(panel.observations[t, k, s])))


def chronological_split(panel: ScenarioPanel, fraction: float = 0.8):
    """Split issuance times in order: the first floor(fraction * n) go to training."""
    if not 0 < fraction < 1:
        raise DataError("fraction must lie in (0, 1)")
    n = panel.n_issuance
    if n < 2:
        raise DataError("need at least two issuance times to split")
    n_train = min(max(math.floor(round(fraction * n, 9)), 1), n - 1)
    return panel.select(range(n_train)), panel.select(range(n_train, n))


@dataclass
class SyntheticSpec:
    """Seeded wind-like dataset with a corrupted (biased, under-dispersed,
    warped) base forecast.

    The truth is a latent Gaussian field over sites, correlation
    exp(-|i-j| / corr_length), pushed through a logistic map scaled by
    capacity. ``warp`` raises the normalised base output to that power.
    """

    m: int = 4
    n_scenarios: int = 16
    n_days: int = 300
    corr_length: float = 2.0
    capacities: list[float] | None = None
    center_mean: float = 0.0
    center_scale: float = 1.2
    noise_scale: float = 0.8
    lead_corr: float = 0.9
    bias: float = 0.0
    shrink: float = 1.0
    warp: float = 1.0
    n_leads: int = 24
    start: str = "2018-01-01"
    seed: int = 0
    names: list[str] | None = field(default=None)

    def __post_init__(self):
        if self.m < 1 or self.n_scenarios < 1 or self.n_days < 1 or self.n_leads < 1:
            raise DataError("m, n_scenarios, n_days and n_leads must be positive")
        if not 0 < self.shrink <= 1:
            raise DataError(f"shrink must lie in (0, 1], got {self.shrink}")
        if self.corr_length <= 0 or self.noise_scale <= 0 or self.center_scale < 0:
            raise DataError("corr_length and noise_scale must be positive")
        if self.warp <= 0:
            raise DataError("warp must be positive")
        if not -1 < self.lead_corr < 1:
            raise DataError("lead_corr must lie in (-1, 1)")
        if self.capacities is not None and len(self.capacities) != self.m:
            raise DataError("capacities must have length m")
        if self.names is not None and len(self.names) != self.m:
            raise DataError("names must have length m")

    @property
    def hierarchy(self) -> Hierarchy:
        if self.capacities is not None:
            caps = [float(c) for c in self.capacities]
        else:
            caps = [TABLE_I_SITES[i % len(TABLE_I_SITES)][1] for i in range(self.m)]
        if self.names is not None:
            names = list(self.names)
        elif self.m <= len(TABLE_I_SITES):
            names = [TABLE_I_SITES[i][0] for i in range(self.m)]
        else:
            names = [f"wpp{i + 1}" for i in range(self.m)]
        return Hierarchy(tuple(names), tuple(caps))

    def to_dict(self) -> dict:
        return asdict(self)


class TruthSampler:
    """Draws joint outcomes from the true conditional distribution of a
    synthetic dataset, for oracle computations."""

    def __init__(self, hierarchy: Hierarchy, centers: np.ndarray, chol: np.ndarray, noise_scale: float):
        self.hierarchy = hierarchy
        self.centers = centers
        self.chol = chol
        self.noise_scale = noise_scale

    def latent(self, t: int, k: int, n: int, rng: np.random.Generator, scale: float = 1.0):
        eps = rng.standard_normal((n, self.hierarchy.m)) @ self.chol.T
        return self.centers[t, k] + scale * self.noise_scale * eps

    def sample_bottom(self, t: int, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.hierarchy.bottom_capacities * expit(self.latent(t, k, n, rng))

    def sample(self, t: int, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
        b = self.sample_bottom(t, k, n, rng)
        return np.concatenate([b.sum(axis=1, keepdims=True), b], axis=1)

    def calibrated_panel(self, panel: ScenarioPanel, n: int, seed: int) -> ScenarioPanel:
        """Panel whose scenarios are fresh truth draws (perfect calibration)."""
        rng = np.random.default_rng(seed)
        T, K = panel.n_issuance, panel.n_leads
        data = np.empty((T, K, n, self.hierarchy.m + 1))
        for t in range(T):
            for k in range(K):
                data[t, k] = self.sample(t, k, n, rng)
        return panel.with_data(data)


def _corrupted(sampler: TruthSampler, t, k, n, rng, spec: SyntheticSpec) -> np.ndarray:
    """Base scenario vectors (n, m+1) from one shrunken latent draw per scenario.

    Producers get caps * (expit(z)^warp + bias); the aggregate applies the
    same warp and bias to the normalised true total of that draw, so it is
    coherent with the producers only when warp = 1 and bias = 0.
    """
    h = sampler.hierarchy
    caps = h.bottom_capacities
    total = h.total_capacity
    u = expit(sampler.latent(t, k, n, rng, scale=spec.shrink))
    bottom = np.clip(caps * (u**spec.warp + spec.bias), 0.0, caps)
    share = (u @ caps) / total
    agg = np.clip(total * (share**spec.warp + spec.bias), 0.0, total)
    return np.concatenate([agg[:, None], bottom], axis=1)


def generate_synthetic(spec: SyntheticSpec):
    """Build (panel with observations, truth sampler) deterministically from ``spec.seed``.

    With shrink = 1, bias = 0 and warp = 1 the base scenarios are exact draws
    from the truth; otherwise the aggregate and producer series are
    corrupted separately and the base forecast is incoherent.
    """
    h = spec.hierarchy
    rng = np.random.default_rng(spec.seed)
    m, T, K, N = spec.m, spec.n_days, spec.n_leads, spec.n_scenarios
    idx = np.arange(m)
    corr = np.exp(-np.abs(idx[:, None] - idx[None, :]) / spec.corr_length)
    chol = np.linalg.cholesky(corr)

    z = np.empty((T, K, m))
    innov = rng.standard_normal((T, K, m)) @ chol.T
    z[:, 0] = innov[:, 0]
    rho = spec.lead_corr
    for k in range(1, K):
        z[:, k] = rho * z[:, k - 1] + math.sqrt(1 - rho * rho) * innov[:, k]
    centers = spec.center_mean + spec.center_scale * z
    sampler = TruthSampler(h, centers, chol, spec.noise_scale)

    observations = np.empty((T, K, m + 1))
    data = np.empty((T, K, N, m + 1))
    for t in range(T):
        for k in range(K):
            observations[t, k] = sampler.sample(t, k, 1, rng)[0]
            data[t, k] = _corrupted(sampler, t, k, N, rng, spec)

    start = dt.date.fromisoformat(spec.start)
    times = tuple((start + dt.timedelta(days=t)).isoformat() for t in range(T))
    panel = ScenarioPanel(h, times, data, observations, tuple(range(1, K + 1)))
    return panel, sampler
