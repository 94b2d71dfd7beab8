import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_panel
from coopwind import reconcile
from coopwind.data import SyntheticSpec, chronological_split, generate_synthetic
from coopwind.hierarchy import Hierarchy, aggregate_bottom, coherence_gap, is_coherent
from coopwind.reconcile import (
    Reconciler,
    TrainConfig,
    TrainingDiverged,
    apply,
    apply_panel,
    load_reconciler,
    save_reconciler,
    train,
)
from coopwind.scoring import average_energy_score

H2 = Hierarchy(("a", "b"), (20.0, 30.0))


def test_bottom_up_discards_base_aggregate():
    np.testing.assert_array_equal(apply(Reconciler.bottom_up(H2), [999.0, 4.0, 6.0]), [10.0, 4.0, 6.0])


def test_identity_projection_is_bottom_up():
    r = Reconciler.projection(H2, np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
    np.testing.assert_allclose(apply(r, [999.0, 4.0, 6.0]), [10.0, 4.0, 6.0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(r.Q, [[0, 1, 0], [0, 0, 1]], atol=1e-15)


def test_projection_applies_q_in_megawatts():
    Q = np.array([[0.1, 0.5, 0.0], [0.0, 0.2, 0.7]])
    r = Reconciler.projection(H2, Q)
    base = np.array([30.0, 8.0, 10.0])
    expected = aggregate_bottom(np.clip(Q @ base, 0, [20.0, 30.0]))
    np.testing.assert_allclose(apply(r, base), expected, rtol=1e-12)
    np.testing.assert_allclose(r.Q, Q, rtol=1e-12, atol=1e-15)


def test_outputs_are_clipped_to_capacity():
    r = Reconciler.projection(H2, np.array([[0.0, 5.0, 0.0], [0.0, 0.0, -1.0]]))
    out = apply(r, [0.0, 10.0, 10.0])
    np.testing.assert_array_equal(out, [20.0, 20.0, 0.0])


def test_zero_initialised_nonparametric_equals_bottom_up():
    h = Hierarchy(("a", "b", "c", "d"), (215.25, 100.5, 81.0, 97.5))
    rng = np.random.default_rng(0)
    base = rng.uniform(0, 1, (1000, 5)) * h.series_capacities
    npr = Reconciler.nonparametric(h, np.random.default_rng(1))
    diff = np.abs(apply(npr, base) - apply(Reconciler.bottom_up(h), base))
    assert diff.max() <= 1e-9


@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_every_variant_is_coherent(m, seed):
    rng = np.random.default_rng(seed)
    h = Hierarchy.from_capacities(rng.uniform(1, 300, m))
    base = rng.uniform(-0.2, 1.2, (50, m + 1)) * h.series_capacities
    net = Reconciler.nonparametric(h, rng).net.copy()
    net.weights[-1][...] = rng.normal(scale=2.0, size=net.weights[-1].shape)
    variants = [
        Reconciler.bottom_up(h),
        Reconciler.projection(h, rng.normal(size=(m, m + 1))),
        Reconciler("nonparametric", h, net),
    ]
    for r in variants:
        out = apply(r, base)
        assert np.all(coherence_gap(out) <= 1e-9 * np.maximum(1.0, out[:, 0]))
        assert np.all(out[:, 1:] >= 0) and np.all(out[:, 1:] <= h.bottom_capacities)


def test_apply_panel_on_coherent_input_is_identity(two_farms):
    panel = random_panel(two_farms, seed=2)
    coherent = panel.with_data(aggregate_bottom(panel.data[..., 1:]))
    out = apply_panel(Reconciler.bottom_up(two_farms), coherent)
    np.testing.assert_array_equal(out.data, coherent.data)
    np.testing.assert_array_equal(out.observations, panel.observations)


def test_apply_panel_output_is_coherent(two_farms):
    panel = random_panel(two_farms, seed=3)
    assert not is_coherent(panel.data, 1e-6)
    r = Reconciler.nonparametric(two_farms, np.random.default_rng(0))
    assert is_coherent(apply_panel(r, panel).data, 1e-9)


def test_variant_validation():
    with pytest.raises(ValueError):
        Reconciler("nonsense", H2)
    with pytest.raises(ValueError):
        Reconciler("projection", H2)
    with pytest.raises(ValueError):
        Reconciler.projection(H2, np.eye(2))
    with pytest.raises(ValueError):
        apply(Reconciler.bottom_up(H2), [1.0, 2.0])


@pytest.fixture(scope="module")
def small_data():
    panel, sampler = generate_synthetic(SyntheticSpec(n_days=40, n_leads=6, bias=0.1, shrink=0.5, warp=2.0, seed=1))
    train_panel, test_panel = chronological_split(panel, 0.8)
    fit, val = chronological_split(train_panel, 0.75)
    return fit, val, test_panel


@pytest.mark.parametrize("variant", ["projection", "nonparametric"])
def test_training_selects_best_validation_epoch(small_data, variant):
    fit, val, _ = small_data
    r, report = train(variant, fit, val, TrainConfig(max_epochs=15, patience=5, seed=3))
    bottom_up = average_energy_score(apply_panel(Reconciler.bottom_up(fit.hierarchy), val))
    assert report.val_aes[0] == pytest.approx(bottom_up, rel=1e-12)
    assert report.selected_epoch == int(np.argmin(report.val_aes))
    assert report.selected_val_aes <= report.val_aes[0] + 1e-6
    # the returned parameters are the selected checkpoint
    assert average_energy_score(apply_panel(r, val)) == pytest.approx(report.selected_val_aes, rel=1e-12)
    assert report.to_dict()["config"]["seed"] == 3 and "wall_time" not in report.to_dict()


def test_training_is_deterministic(small_data):
    fit, val, _ = small_data
    cfg = TrainConfig(max_epochs=3, patience=5, seed=7)
    a, ra = train("nonparametric", fit, val, cfg)
    b, rb = train("nonparametric", fit, val, cfg)
    assert ra.val_aes == rb.val_aes
    for p, q in zip(a.net.params, b.net.params):
        assert p.tobytes() == q.tobytes()


def test_training_stops_early(small_data):
    fit, val, _ = small_data
    _, report = train("projection", fit, val, TrainConfig(max_epochs=200, patience=2, seed=0))
    assert len(report.val_aes) - 1 <= report.selected_epoch + 2


def test_bottom_up_has_nothing_to_train(small_data):
    fit, val, _ = small_data
    with pytest.raises(ValueError):
        train("bottom_up", fit, val)


def test_divergence_reports_epoch_and_batch(small_data, monkeypatch):
    fit, val, _ = small_data
    real = reconcile._day_loss_and_grads
    calls = []

    def flaky(*args):
        calls.append(1)
        loss, grads = real(*args)
        return (float("nan") if len(calls) == 3 else loss), grads

    monkeypatch.setattr(reconcile, "_day_loss_and_grads", flaky)
    with pytest.raises(TrainingDiverged) as err:
        train("nonparametric", fit, val, TrainConfig(max_epochs=2))
    assert err.value.epoch == 1 and err.value.batch == 2
    assert "epoch 1" in str(err.value) and "batch 2" in str(err.value)


def test_trained_reconciler_removes_constant_bias():
    panel, sampler = generate_synthetic(SyntheticSpec(n_days=200, bias=0.1, seed=0))
    train_panel, test_panel = chronological_split(panel, 0.8)
    fit, val = chronological_split(train_panel, 0.8)
    r, _ = train("nonparametric", fit, val, TrainConfig(seed=0))
    caps = panel.hierarchy.bottom_capacities
    rng = np.random.default_rng(0)
    offset = train_panel.n_issuance
    truth_mean = np.array([
        [sampler.sample_bottom(offset + t, k, 2000, rng).mean(axis=0) for k in range(test_panel.n_leads)]
        for t in range(test_panel.n_issuance)
    ])

    def bias(p):
        return (p.data[..., 1:].mean(axis=2) - truth_mean).mean(axis=(0, 1)) / caps

    assert np.all(bias(test_panel) > 0.08)
    assert np.all(np.abs(bias(apply_panel(r, test_panel))) < 0.02)


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    r = Reconciler.nonparametric(H2, rng)
    r.net.weights[-1][...] = rng.normal(size=r.net.weights[-1].shape)
    save_reconciler(r, tmp_path / "r.json")
    back = load_reconciler(tmp_path / "r.json", H2)
    base = rng.uniform(0, 50, (20, 3))
    assert apply(back, base).tobytes() == apply(r, base).tobytes()
    save_reconciler(Reconciler.bottom_up(H2), tmp_path / "bu.json")
    assert load_reconciler(tmp_path / "bu.json", H2).variant == "bottom_up"


def test_serialization_refuses_other_hierarchy(tmp_path):
    save_reconciler(Reconciler.projection(H2), tmp_path / "r.json")
    with pytest.raises(ValueError, match="fitted to hierarchy"):
        load_reconciler(tmp_path / "r.json", Hierarchy(("a", "b"), (20.0, 31.0)))
