import csv
import logging
import math

import numpy as np
import pytest
from scipy import stats

from conftest import random_panel
from coopwind.data import (
    HEADER,
    TABLE_I_SITES,
    DataError,
    DatasetManifest,
    IncoherentObservationError,
    MissingCellError,
    SyntheticSpec,
    chronological_split,
    generate_synthetic,
    load_panel,
    save_panel,
)
from coopwind.hierarchy import Hierarchy, is_coherent
from coopwind.scoring import panel_ranks, rank_histogram


def write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        w.writerows(rows)


def tiny_files(tmp_path, h, value=None, obs_total=None, drop=None, n_scen=2):
    """One issuance, one lead, n_scen scenarios; observations coherent unless obs_total."""
    rows = []
    for xi in range(n_scen):
        parts = [min(c, 1.0 + xi + i) for i, c in enumerate(h.capacities)]
        if value is not None and xi == 0:
            parts[0] = value
        rows.append(("2020-01-01", 1, xi, "aggregate", sum(parts)))
        rows += [("2020-01-01", 1, xi, n, v) for n, v in zip(h.names, parts)]
    if drop is not None:
        rows = [r for r in rows if (r[2], r[3]) != drop]
    obs_parts = [1.0] * h.m
    total = sum(obs_parts) if obs_total is None else obs_total
    obs = [("2020-01-01", 1, -1, "aggregate", total)]
    obs += [("2020-01-01", 1, -1, n, v) for n, v in zip(h.names, obs_parts)]
    write_rows(tmp_path / "f.csv", rows)
    write_rows(tmp_path / "o.csv", obs)
    return DatasetManifest(list(zip(h.names, h.capacities)), tmp_path / "f.csv", tmp_path / "o.csv", n_scen)


def test_table_i_manifest_total_capacity(tmp_path):
    h = Hierarchy(tuple(n for n, _ in TABLE_I_SITES), tuple(c for _, c in TABLE_I_SITES))
    manifest = tiny_files(tmp_path, h)
    manifest.write(tmp_path / "manifest.yaml")
    panel = load_panel(DatasetManifest.from_file(tmp_path / "manifest.yaml"))
    assert panel.hierarchy.m == 8
    assert panel.hierarchy.capacities[0] == 215.25
    assert math.isclose(panel.hierarchy.total_capacity, 1127.45, rel_tol=0, abs_tol=1e-9)


def test_negative_forecast_is_clipped_to_zero(tmp_path, two_farms, caplog):
    manifest = tiny_files(tmp_path, two_farms, value=-3.0)
    with caplog.at_level(logging.WARNING):
        panel = load_panel(manifest)
    assert panel.data[0, 0, 0, 1] == 0.0
    assert "clipping" in caplog.text


def test_above_capacity_forecast_is_clipped(tmp_path, two_farms):
    panel = load_panel(tiny_files(tmp_path, two_farms, value=25.0))
    assert panel.data[0, 0, 0, 1] == 20.0


def test_incoherent_observation_is_fatal(tmp_path):
    h = Hierarchy(("a", "b"), (100.0, 100.0))
    rows = [("d", 1, xi, s, 1.0) for xi in range(2) for s in ("aggregate", "a", "b")]
    write_rows(tmp_path / "f.csv", rows)
    write_rows(tmp_path / "o.csv", [("d", 1, -1, "aggregate", 100.0), ("d", 1, -1, "a", 45.0), ("d", 1, -1, "b", 45.0)])
    manifest = DatasetManifest([("a", 100.0), ("b", 100.0)], tmp_path / "f.csv", tmp_path / "o.csv", 2)
    with pytest.raises(IncoherentObservationError):
        load_panel(manifest)
    assert h.m == 2


def test_missing_cell_names_first_missing_index(tmp_path, two_farms):
    manifest = tiny_files(tmp_path, two_farms, drop=(1, "wpp2"), n_scen=3)
    with pytest.raises(MissingCellError) as err:
        load_panel(manifest)
    assert err.value.index == ("2020-01-01", 1, 1, "wpp2")
    assert "scenario=1" in str(err.value)


def test_missing_observation_is_reported(tmp_path, two_farms):
    manifest = tiny_files(tmp_path, two_farms)
    lines = (tmp_path / "o.csv").read_text().splitlines()
    (tmp_path / "o.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(MissingCellError) as err:
        load_panel(manifest)
    assert err.value.index[2:] == (-1, "wpp2")


def test_bad_header_is_rejected(tmp_path, two_farms):
    (tmp_path / "f.csv").write_text("a,b,c\n1,2,3\n")
    manifest = DatasetManifest(list(zip(two_farms.names, two_farms.capacities)), tmp_path / "f.csv", None, 2)
    with pytest.raises(DataError):
        load_panel(manifest)


def test_heterogeneous_scenario_counts_are_quantile_matched(tmp_path):
    rows = [("d", 1, xi, "aggregate", 2.0 * xi) for xi in range(4)]
    rows += [("d", 1, xi, "a", float(xi)) for xi in range(4)]
    rows += [("d", 1, xi, "b", float(xi)) for xi in range(2)]
    write_rows(tmp_path / "f.csv", rows)
    manifest = DatasetManifest([("a", 10.0), ("b", 10.0)], tmp_path / "f.csv", None, 4)
    panel = load_panel(manifest)
    assert panel.n_scenarios == 4
    b = panel.data[0, 0, :, 2]
    assert np.all(np.diff(b) >= 0) and b.min() >= 0 and b.max() <= 1


def test_round_trip_is_exact(tmp_path):
    h = Hierarchy(("a", "b", "c"), (10.0, 20.0, 30.0))
    panel = random_panel(h, n_days=3, n_leads=4, n_scen=5, seed=3)
    save_panel(panel, tmp_path / "f.csv", tmp_path / "o.csv")
    manifest = DatasetManifest(list(zip(h.names, h.capacities)), tmp_path / "f.csv", tmp_path / "o.csv", 5)
    back = load_panel(manifest)
    np.testing.assert_array_equal(back.data, panel.data)
    np.testing.assert_array_equal(back.observations, panel.observations)
    assert back.issuance_times == panel.issuance_times
    assert back.lead_times == panel.lead_times


@pytest.mark.parametrize("n, fraction, n_train", [(10, 0.8, 8), (5, 0.5, 2), (3, 0.9, 2), (4, 0.1, 1)])
def test_chronological_split(two_farms, n, fraction, n_train):
    panel = random_panel(two_farms, n_days=n, n_leads=1, n_scen=2)
    train, test = chronological_split(panel, fraction)
    assert train.n_issuance == n_train
    assert test.n_issuance == n - n_train
    assert train.issuance_times + test.issuance_times == panel.issuance_times
    np.testing.assert_array_equal(np.concatenate([train.data, test.data]), panel.data)


def test_split_needs_two_days(two_farms):
    with pytest.raises(DataError):
        chronological_split(random_panel(two_farms, n_days=1), 0.8)
    with pytest.raises(DataError):
        chronological_split(random_panel(two_farms, n_days=4), 1.0)


@pytest.mark.parametrize(
    "kwargs", [{"shrink": 0.0}, {"shrink": 1.5}, {"n_days": 0}, {"warp": 0.0}, {"m": 2, "capacities": [1.0]}]
)
def test_synthetic_spec_validation(kwargs):
    with pytest.raises(DataError):
        SyntheticSpec(**kwargs)


def test_synthetic_same_seed_is_bit_identical():
    spec = SyntheticSpec(n_days=5, n_leads=3, bias=0.1, shrink=0.5, warp=2.0, seed=11)
    a, _ = generate_synthetic(spec)
    b, _ = generate_synthetic(spec)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.observations.tobytes() == b.observations.tobytes()
    c, _ = generate_synthetic(SyntheticSpec(n_days=5, n_leads=3, bias=0.1, shrink=0.5, warp=2.0, seed=12))
    assert c.data.tobytes() != a.data.tobytes()


def test_synthetic_panel_is_in_range_and_observations_coherent():
    panel, _ = generate_synthetic(SyntheticSpec(n_days=6, n_leads=4, bias=0.1, shrink=0.5, warp=2.0))
    caps = panel.hierarchy.series_capacities
    assert np.all(panel.data >= 0) and np.all(panel.data <= caps)
    assert np.all(panel.observations >= 0) and np.all(panel.observations <= caps)
    assert is_coherent(panel.observations, 1e-9)
    # corrupted base forecasts are not coherent
    assert not is_coherent(panel.data, 1e-6)


def test_uncorrupted_base_forecast_is_coherent():
    panel, _ = generate_synthetic(SyntheticSpec(n_days=3, n_leads=2))
    assert is_coherent(panel.data, 1e-9)


def _extreme_excess(panel, seed):
    ranks = panel_ranks(panel, seed)
    hist = rank_histogram(ranks, panel.n_scenarios)
    p0 = 2.0 / hist.n_bins
    freq = hist.frequencies[0] + hist.frequencies[-1]
    sigma = math.sqrt(p0 * (1 - p0) / hist.total)
    return (freq - p0) / sigma, hist


def test_uncorrupted_base_forecast_ranks_are_uniform():
    panel, _ = generate_synthetic(SyntheticSpec(n_days=30, seed=5))
    z, hist = _extreme_excess(panel, seed=5)
    assert stats.chisquare(hist.counts).pvalue > 0.01
    assert abs(z) < 3


def test_under_dispersed_base_forecast_has_heavy_extreme_bins():
    panel, _ = generate_synthetic(SyntheticSpec(n_days=200, n_leads=24, shrink=0.5, seed=5))
    z, _ = _extreme_excess(panel, seed=5)
    assert z > 3


def test_calibrated_panel_uses_truth_draws():
    panel, sampler = generate_synthetic(SyntheticSpec(n_days=2, n_leads=2, shrink=0.5, bias=0.1))
    cal = sampler.calibrated_panel(panel, 8, seed=1)
    assert cal.data.shape == (2, 2, 8, 5)
    assert is_coherent(cal.data, 1e-9)
    np.testing.assert_array_equal(cal.observations, panel.observations)
