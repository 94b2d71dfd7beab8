"""Scenario-by-scenario reconciliation: bottom-up, learned projection and the
nonparametric (neural) reconciler, plus energy-score training."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hierarchy import Hierarchy, ScenarioPanel, structure_matrix
from .learn import Adam, DenseNetwork, _forward_cache, backward, init_network, network_from_dict, network_to_dict
from .scoring import average_energy_score, energy_score_batch_grad

log = logging.getLogger(__name__)

VARIANTS = ("bottom_up", "projection", "nonparametric")
TRAINABLE = ("projection", "nonparametric")
RECONCILER_FORMAT = "coopwind-reconciler"
RECONCILER_VERSION = 1


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def selector(h: Hierarchy) -> np.ndarray:
    """R = [0 | I_m]: picks the bottom-level entries of a full vector."""
    return np.hstack([np.zeros((h.m, 1)), np.eye(h.m)])


@dataclass(frozen=True)
class Reconciler:
    """A map from base scenario vectors to coherent ones.

    For the learned variants ``net`` works in capacity-normalised units:
    inputs are divided by series capacity, outputs multiplied by producer
    capacity. The projection variant is a bias-free single linear layer.
    """

    variant: str
    hierarchy: Hierarchy
    net: DenseNetwork | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if (self.net is None) != (self.variant == "bottom_up"):
            raise ValueError(f"{self.variant} reconciler needs a network iff it is learned")

    @classmethod
    def bottom_up(cls, h: Hierarchy) -> "Reconciler":
        return cls("bottom_up", h)

    @classmethod
    def projection(cls, h: Hierarchy, Q=None) -> "Reconciler":
        """Projection reconciler from an m x (m+1) matrix in MW (default [0 | I])."""
        R = selector(h)
        Q = R if Q is None else np.asarray(Q, dtype=float)
        if Q.shape != (h.m, h.m + 1):
            raise ValueError(f"Q must be {h.m} x {h.m + 1}")
        Qn = Q * h.series_capacities[None, :] / h.bottom_capacities[:, None]
        net = DenseNetwork((h.m + 1, h.m), [Qn - R], [None], R)
        return cls("projection", h, net)

    @classmethod
    def nonparametric(
        cls, h: Hierarchy, rng: np.random.Generator | None = None, hidden=None
    ) -> "Reconciler":
        """Two tanh layers of width 4(m+1) by default, zero output layer."""
        width = 4 * (h.m + 1)
        hidden = (width, width) if hidden is None else tuple(hidden)
        rng = np.random.default_rng(0) if rng is None else rng
        net = init_network((h.m + 1, *hidden, h.m), rng, residual=selector(h))
        return cls("nonparametric", h, net)

    @property
    def Q(self) -> np.ndarray:
        """Projection matrix in MW units."""
        if self.variant != "projection":
            raise AttributeError("only projection reconcilers have Q")
        h = self.hierarchy
        Qn = self.net.weights[0] + self.net.residual
        return Qn * h.bottom_capacities[:, None] / h.series_capacities[None, :]

    def bottom(self, base) -> np.ndarray:
        """Reconciled producer values (..., m) for base vectors (..., m+1), clipped."""
        h = self.hierarchy
        base = np.asarray(base, dtype=float)
        if base.shape[-1] != h.m + 1:
            raise ValueError(f"base vectors must have length {h.m + 1}")
        if self.variant == "bottom_up":
            b = base[..., 1:]
        else:
            flat = base.reshape(-1, h.m + 1) / h.series_capacities
            out, _ = _forward_cache(self.net, flat)
            b = (out * h.bottom_capacities).reshape(base.shape[:-1] + (h.m,))
        return np.clip(b, 0.0, h.bottom_capacities)


def apply(r: Reconciler, base) -> np.ndarray:
    """Reconcile one base vector (or a stack of them); the result is G h."""
    b = r.bottom(base)
    return b @ structure_matrix(r.hierarchy).T


def apply_panel(r: Reconciler, panel: ScenarioPanel) -> ScenarioPanel:
    """Reconcile every scenario of a panel; observations are carried through."""
    return panel.with_data(apply(r, panel.data))


@dataclass
class TrainConfig:
    max_epochs: int = 500
    patience: int = 20
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    clip: float = 10.0
    hidden: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if self.hidden is not None:
            self.hidden = tuple(int(w) for w in self.hidden)


@dataclass
class TrainingReport:
    variant: str
    train_aes: list[float]
    val_aes: list[float]
    selected_epoch: int
    seed: int
    config: dict
    wall_time: float = field(default=0.0, compare=False)

    @property
    def selected_val_aes(self) -> float:
        return self.val_aes[self.selected_epoch]

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time")
        return d


def _day_loss_and_grads(net: DenseNetwork, h: Hierarchy, G: np.ndarray, Xn: np.ndarray, Y: np.ndarray):
    """Mean energy score over one day's hours and its parameter gradients.

    Xn: normalised base scenarios (K, N, m+1); Y: observations (K, m+1) in MW.
    """
    K, N, d = Xn.shape
    flat = Xn.reshape(-1, d)
    out, acts = _forward_cache(net, flat)
    cap_b = h.bottom_capacities
    yhat = (out * cap_b) @ G.T
    scores, grad = energy_score_batch_grad(yhat.reshape(K, N, d), Y)
    upstream = (grad.reshape(-1, d) @ G) * cap_b / K
    return float(scores.mean()), backward(net, flat, upstream, acts)


def train(
    variant: str,
    train_panel: ScenarioPanel,
    val_panel: ScenarioPanel,
    config: TrainConfig | None = None,
) -> tuple[Reconciler, TrainingReport]:
    """Fit a reconciler by minimising the average energy score.

    One mini-batch is one issuance day (all its lead times). Epoch 0 is the
    initialisation; the returned parameters are those of the epoch with the
    lowest validation AES.
    """
    config = config or TrainConfig()
    if variant not in TRAINABLE:
        raise ValueError(f"variant {variant!r} has nothing to train")
    for p in (train_panel, val_panel):
        if p.observations is None:
            raise ValueError("training and validation panels need observations")
    h = train_panel.hierarchy
    rng = np.random.default_rng(config.seed)
    if variant == "projection":
        rec = Reconciler.projection(h)
    else:
        rec = Reconciler.nonparametric(h, rng, config.hidden)
    net = rec.net
    G = structure_matrix(h)
    Xn = train_panel.data / h.series_capacities
    Y = train_panel.observations
    opt = Adam(config.learning_rate, config.beta1, config.beta2, clip=config.clip)

    started = time.perf_counter()
    train_curve = [average_energy_score(apply_panel(rec, train_panel))]
    val_curve = [average_energy_score(apply_panel(rec, val_panel))]
    best_net, best_epoch, waited = net.copy(), 0, 0
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for batch, t in enumerate(rng.permutation(train_panel.n_issuance)):
            loss, grads = _day_loss_and_grads(net, h, G, Xn[t], Y[t])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(epoch, batch, loss)
            opt.step(net.params, grads)
            losses.append(loss)
        train_curve.append(float(np.mean(losses)))
        val_curve.append(average_energy_score(apply_panel(rec, val_panel)))
        if val_curve[-1] < val_curve[best_epoch]:
            best_net, best_epoch, waited = net.copy(), epoch, 0
        else:
            waited += 1
            if waited >= config.patience:
                break
        log.debug("epoch %d train %.4f val %.4f", epoch, train_curve[-1], val_curve[-1])

    report = TrainingReport(
        variant,
        train_curve,
        val_curve,
        best_epoch,
        config.seed,
        asdict(config),
        time.perf_counter() - started,
    )
    return Reconciler(variant, h, best_net), report


def save_reconciler(r: Reconciler, path) -> None:
    blob = {
        "format": RECONCILER_FORMAT,
        "version": RECONCILER_VERSION,
        "variant": r.variant,
        "hierarchy": {"names": list(r.hierarchy.names), "capacities": list(r.hierarchy.capacities)},
        "fingerprint": r.hierarchy.fingerprint(),
        "network": None if r.net is None else network_to_dict(r.net),
    }
    Path(path).write_text(json.dumps(blob, indent=1))


def load_reconciler(path, hierarchy: Hierarchy) -> Reconciler:
    """Load a saved reconciler, refusing one fitted to a different hierarchy."""
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != RECONCILER_FORMAT or blob.get("version") != RECONCILER_VERSION:
        raise ValueError(f"{path} is not a version {RECONCILER_VERSION} reconciler")
    if blob["fingerprint"] != hierarchy.fingerprint():
        raise ValueError(
            f"{path} was fitted to hierarchy {blob['fingerprint']}, "
            f"not {hierarchy.fingerprint()}"
        )
    net = None if blob["network"] is None else network_from_dict(blob["network"])
    return Reconciler(blob["variant"], hierarchy, net)
