"""Small feed-forward networks with hand-written reverse-mode gradients."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

CHECKPOINT_FORMAT = "coopwind-dense"
CHECKPOINT_VERSION = 1


@dataclass
class DenseNetwork:
    """Feed-forward map with tanh hidden layers, identity output and an
    optional fixed linear residual ``R`` added to the output.

    ``biases`` entries are None for layers built without bias.
    """

    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray | None]
    residual: np.ndarray | None = None

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias slot per layer is required")
        for i, W in enumerate(self.weights):
            if W.shape != (self.sizes[i + 1], self.sizes[i]):
                raise ValueError(f"layer {i} weight has shape {W.shape}")
            b = self.biases[i]
            if b is not None and b.shape != (self.sizes[i + 1],):
                raise ValueError(f"layer {i} bias has shape {b.shape}")
        if self.residual is not None and self.residual.shape != (self.sizes[-1], self.sizes[0]):
            raise ValueError(f"residual has shape {self.residual.shape}")

    @property
    def params(self) -> list[np.ndarray]:
        """Trainable arrays in layer order (W0, b0, W1, b1, ...)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            if b is not None:
                out.append(b)
        return out

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "DenseNetwork":
        return DenseNetwork(
            self.sizes,
            [W.copy() for W in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            None if self.residual is None else self.residual.copy(),
        )


def init_network(
    sizes,
    rng: np.random.Generator,
    residual: np.ndarray | None = None,
    bias: bool = True,
    zero_output: bool = True,
) -> DenseNetwork:
    """Glorot-uniform hidden layers; output layer zero unless ``zero_output`` is False.

    With a zero output layer the network initially returns exactly ``R x``.
    """
    sizes = tuple(int(s) for s in sizes)
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        if zero_output and i == len(sizes) - 2:
            W = np.zeros((fan_out, fan_in))
        else:
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        weights.append(W)
        biases.append(np.zeros(fan_out) if bias else None)
    return DenseNetwork(sizes, weights, biases, residual)


def zero_network(sizes, residual=None, bias: bool = True) -> DenseNetwork:
    sizes = tuple(int(s) for s in sizes)
    weights = [np.zeros((sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1)]
    biases = [np.zeros(sizes[i + 1]) if bias else None for i in range(len(sizes) - 1)]
    return DenseNetwork(sizes, weights, biases, residual)


def _forward_cache(net: DenseNetwork, X: np.ndarray):
    acts = [X]
    a = X
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W.T
        if b is not None:
            z = z + b
        a = np.tanh(z) if i < net.n_layers - 1 else z
        acts.append(a)
    out = a if net.residual is None else a + X @ net.residual.T
    return out, acts


def forward(net: DenseNetwork, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    out, _ = _forward_cache(net, np.atleast_2d(x))
    return out[0] if x.ndim == 1 else out


def backward(net: DenseNetwork, X, upstream, acts=None) -> list[np.ndarray]:
    """Gradients of sum(upstream * forward(net, X)) w.r.t. ``net.params``.

    ``upstream`` holds dLoss/dOutput row by row; rows are summed.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    delta = np.atleast_2d(np.asarray(upstream, dtype=float))
    if acts is None:
        _, acts = _forward_cache(net, X)
    grads_w = [None] * net.n_layers
    grads_b = [None] * net.n_layers
    for i in range(net.n_layers - 1, -1, -1):
        grads_w[i] = delta.T @ acts[i]
        if net.biases[i] is not None:
            grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * (1.0 - acts[i] ** 2)
    out = []
    for gw, gb in zip(grads_w, grads_b):
        out.append(gw)
        if gb is not None:
            out.append(gb)
    return out


def forward_backward(net: DenseNetwork, X, loss_grad: Callable):
    """Run forward, let ``loss_grad(out) -> (loss, dloss/dout)`` score it, backprop."""
    out, acts = _forward_cache(net, np.atleast_2d(X))
    loss, upstream = loss_grad(out)
    return loss, backward(net, X, upstream, acts)


@dataclass
class Adam:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 10.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        """Clip grads to global norm ``clip`` and update ``params`` in place."""
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        grads = clipped(grads, self.clip)
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def clipped(grads: list[np.ndarray], clip: float) -> list[np.ndarray]:
    """Rescale ``grads`` so their global norm is at most ``clip``."""
    norm = np.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    scale = clip / norm if norm > clip else 1.0
    return [g * scale for g in grads]


@dataclass
class GradientCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def check_gradients(
    net: DenseNetwork,
    loss_fn: Callable,
    n_trials: int = 10,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
    batch: int = 4,
    step: float = 1e-6,
    grad_fn: Callable | None = None,
) -> GradientCheckReport:
    """Compare backprop against central differences on every parameter entry.

    ``loss_fn(out)`` returns (loss, dloss/dout). ``grad_fn(net, X)`` overrides
    the analytic gradient (default: forward_backward).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if grad_fn is None:
        grad_fn = lambda n, X: forward_backward(n, X, loss_fn)[1]  # noqa: E731
    worst, count = 0.0, 0
    for _ in range(n_trials):
        X = rng.normal(size=(batch, net.sizes[0]))
        analytic = grad_fn(net, X)
        for p, g in zip(net.params, analytic):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + step
                up = loss_fn(forward(net, X))[0]
                flat[j] = old - step
                down = loss_fn(forward(net, X))[0]
                flat[j] = old
                fd = (up - down) / (2 * step)
                denom = max(abs(fd), abs(gflat[j]), 1e-5)
                worst = max(worst, abs(fd - gflat[j]) / denom)
                count += 1
    return GradientCheckReport(worst, tol, count)


def network_to_dict(net: DenseNetwork) -> dict:
    return {
        "sizes": list(net.sizes),
        "weights": [W.tolist() for W in net.weights],
        "biases": [None if b is None else b.tolist() for b in net.biases],
        "residual": None if net.residual is None else net.residual.tolist(),
    }


def network_from_dict(d: dict) -> DenseNetwork:
    sizes = tuple(d["sizes"])
    weights = [np.array(W, dtype=float).reshape(sizes[i + 1], sizes[i]) for i, W in enumerate(d["weights"])]
    biases = [None if b is None else np.array(b, dtype=float) for b in d["biases"]]
    residual = None if d["residual"] is None else np.array(d["residual"], dtype=float)
    return DenseNetwork(sizes, weights, biases, residual)


def save_checkpoint(net: DenseNetwork, path, seed: int | None = None, extra: dict | None = None):
    """Write a JSON checkpoint; floats are written with round-trip precision."""
    blob = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "seed": seed}
    blob["network"] = network_to_dict(net)
    if extra:
        blob.update(extra)
    Path(path).write_text(json.dumps(blob, indent=1))


def load_checkpoint(path) -> tuple[DenseNetwork, dict]:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version {CHECKPOINT_VERSION} network checkpoint")
    return network_from_dict(blob["network"]), blob
