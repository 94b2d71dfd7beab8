"""Two-level aggregation structure shared by every other module.

Series are always ordered ``[aggregate, producer_1, ..., producer_m]``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

AGGREGATE = "aggregate"

#: tolerance for coherence of ingested data (MW)
INGEST_TOL = 1e-6
#: tolerance for values produced through the structure matrix (MW)
EXACT_TOL = 1e-9


class HierarchyError(ValueError):
    pass


@dataclass(frozen=True)
class Hierarchy:
    """Producers and their rated capacities (MW)."""

    names: tuple[str, ...]
    capacities: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "capacities", tuple(float(c) for c in self.capacities))
        if len(self.names) < 1:
            raise HierarchyError("a hierarchy needs at least one producer")
        if len(self.names) != len(self.capacities):
            raise HierarchyError(
                f"{len(self.names)} names but {len(self.capacities)} capacities"
            )
        if len(set(self.names)) != len(self.names) or AGGREGATE in self.names:
            raise HierarchyError(f"producer names must be unique and not {AGGREGATE!r}")
        for name, cap in zip(self.names, self.capacities):
            if not (math.isfinite(cap) and cap > 0):
                raise HierarchyError(f"capacity of {name!r} must be positive, got {cap}")

    @classmethod
    def from_capacities(cls, capacities: Sequence[float]) -> "Hierarchy":
        return cls(tuple(f"wpp{i + 1}" for i in range(len(capacities))), tuple(capacities))

    @property
    def m(self) -> int:
        return len(self.names)

    @property
    def total_capacity(self) -> float:
        return math.fsum(self.capacities)

    @property
    def series_names(self) -> tuple[str, ...]:
        return (AGGREGATE,) + self.names

    @property
    def series_capacities(self) -> np.ndarray:
        """Capacity per series in panel order (aggregate first)."""
        return np.array((self.total_capacity,) + self.capacities)

    @property
    def bottom_capacities(self) -> np.ndarray:
        return np.array(self.capacities)

    def fingerprint(self) -> str:
        payload = "|".join(f"{n}={c!r}" for n, c in zip(self.names, self.capacities))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def structure_matrix(h: Hierarchy) -> np.ndarray:
    """Return G, a row of ones stacked over the m x m identity."""
    return np.vstack([np.ones((1, h.m)), np.eye(h.m)])


def aggregate_bottom(b) -> np.ndarray:
    """Map bottom-level values (..., m) to full hierarchy vectors (..., m+1)."""
    b = np.asarray(b, dtype=float)
    total = b.sum(axis=-1, keepdims=True)
    return np.concatenate([total, b], axis=-1)


def coherence_gap(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.abs(v[..., 0] - v[..., 1:].sum(axis=-1))


def is_coherent(v, tol: float = INGEST_TOL) -> bool:
    """True iff every vector's aggregate matches the sum of its parts within `tol`."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    return bool(np.all(coherence_gap(v) <= tol))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScenarioPanel:
    """Aligned scenario forecasts indexed (issuance, lead, scenario, series).

    ``observations`` is indexed (issuance, lead, series) when present. Scenario
    index ``xi`` couples the sites: entry ``xi`` of every series belongs to the
    same joint outcome.
    """

    hierarchy: Hierarchy
    issuance_times: tuple[str, ...]
    data: np.ndarray
    observations: np.ndarray | None = None
    lead_times: tuple[int, ...] = field(default=tuple(range(1, 25)))

    def __post_init__(self):
        object.__setattr__(self, "issuance_times", tuple(str(t) for t in self.issuance_times))
        object.__setattr__(self, "lead_times", tuple(int(k) for k in self.lead_times))
        object.__setattr__(self, "data", _readonly(self.data))
        expected = (len(self.issuance_times), len(self.lead_times))
        if self.data.ndim != 4 or self.data.shape[:2] != expected:
            raise HierarchyError(
                f"data shape {self.data.shape} does not match {expected} x N x series"
            )
        if self.data.shape[3] != self.hierarchy.m + 1:
            raise HierarchyError(
                f"data has {self.data.shape[3]} series, hierarchy needs {self.hierarchy.m + 1}"
            )
        if not np.all(np.isfinite(self.data)):
            raise HierarchyError("scenario values must be finite")
        if self.observations is not None:
            obs = _readonly(self.observations)
            if obs.shape != expected + (self.hierarchy.m + 1,):
                raise HierarchyError(f"observations shape {obs.shape} is inconsistent")
            object.__setattr__(self, "observations", obs)

    @property
    def n_issuance(self) -> int:
        return self.data.shape[0]

    @property
    def n_leads(self) -> int:
        return self.data.shape[1]

    @property
    def n_scenarios(self) -> int:
        return self.data.shape[2]

    @property
    def series_names(self) -> tuple[str, ...]:
        return self.hierarchy.series_names

    def select(self, index) -> "ScenarioPanel":
        """Sub-panel over the given issuance positions (order kept)."""
        index = np.asarray(index, dtype=int)
        return ScenarioPanel(
            self.hierarchy,
            tuple(self.issuance_times[i] for i in index),
            self.data[index],
            None if self.observations is None else self.observations[index],
            self.lead_times,
        )

    def with_data(self, data: np.ndarray) -> "ScenarioPanel":
        return ScenarioPanel(
            self.hierarchy, self.issuance_times, data, self.observations, self.lead_times
        )
