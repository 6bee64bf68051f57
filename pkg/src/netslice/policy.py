"""Leaky-ReLU MLP agents with a fixed-spread Gaussian action head.

Parameters use the row-vector convention ``h = act(x @ W + b)`` so a batch of
feature vectors can be pushed through in one call. Every layer, the output
layer included, applies the leaky ReLU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def leaky_relu(x, a: float = 0.01):
    """Return ``(h(x), h'(x))``; the derivative at 0 is taken as ``a``."""
    x = np.asarray(x, dtype=float)
    pos = x > 0
    return np.where(pos, x, a * x), np.where(pos, 1.0, a)


@dataclass
class PolicyNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = 0.01
    stddev: float = 0.05

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} vs weight {W.shape}")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: input dim does not chain")
        if not 0.0 < self.slope < 1.0:
            raise ValueError("leaky slope must lie in (0, 1)")
        if not self.stddev > 0:
            raise ValueError("exploration stddev must be positive")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        """Flat view ``[W0, b0, W1, b1, ...]``; the arrays are shared, not copied."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "PolicyNet":
        return PolicyNet([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.slope, self.stddev)


def init_params(layer_sizes: Sequence[int], seed, slope: float = 0.01,
                stddev: float = 0.05) -> PolicyNet:
    """He-style init for leaky ReLU: ``W ~ N(0, 2 / (fan_in * (1 + slope**2)))``, zero biases."""
    sizes = [int(n) for n in layer_sizes]
    if len(sizes) < 3:
        raise ValueError("need input, at least one hidden layer, and output sizes")
    if any(n <= 0 for n in sizes):
        raise ValueError(f"layer sizes must be positive: {sizes}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = math.sqrt(2.0 / (fan_in * (1.0 + slope * slope)))
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return PolicyNet(weights, biases, slope, stddev)


def _check_input(net: PolicyNet, x: np.ndarray) -> None:
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"feature length {x.shape[-1]} != input dim {net.input_dim}")


def _forward_cache(net: PolicyNet, x: np.ndarray):
    acts = [x]
    slopes = []
    h = x
    for W, b in zip(net.weights, net.biases):
        h, d = leaky_relu(h @ W + b, net.slope)
        acts.append(h)
        slopes.append(d)
    return acts, slopes


def forward(net: PolicyNet, features) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    _check_input(net, x)
    h = x
    for W, b in zip(net.weights, net.biases):
        z = h @ W + b
        h = np.where(z > 0, z, net.slope * z)
    return h


def backward(net: PolicyNet, features, upstream) -> list[np.ndarray]:
    """Gradient of ``sum(upstream * forward(features))`` w.r.t. ``net.params()``.

    ``features`` may be a single vector or a batch of rows; batch gradients
    are summed.
    """
    x = np.atleast_2d(np.asarray(features, dtype=float))
    g = np.atleast_2d(np.asarray(upstream, dtype=float))
    _check_input(net, x)
    if g.shape != (x.shape[0], net.output_dim):
        raise ValueError(f"upstream shape {g.shape} does not match output {net.output_dim}")
    acts, slopes = _forward_cache(net, x)
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        dz = g * slopes[i]
        grads[2 * i] = acts[i].T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        if i:
            g = dz @ net.weights[i].T
    return grads


class ActionSample(NamedTuple):
    mean: np.ndarray
    raw: np.ndarray      # Gaussian draw before clamping
    action: np.ndarray   # max(0, raw)
    log_prob: float


def log_prob(mean, raw, stddev: float) -> float:
    mean = np.asarray(mean, dtype=float)
    z = (np.asarray(raw, dtype=float) - mean) / stddev
    k = mean.shape[-1]
    return float(-0.5 * np.sum(z * z) - 0.5 * k * (LOG_2PI + 2.0 * math.log(stddev)))


def sample_action(net: PolicyNet, features, rng: np.random.Generator,
                  stddev: float | None = None) -> ActionSample:
    s = net.stddev if stddev is None else stddev
    mean = forward(net, features)
    raw = mean + s * rng.standard_normal(mean.shape)
    return ActionSample(mean, raw, np.maximum(raw, 0.0), log_prob(mean, raw, s))


def grad_log_prob(net: PolicyNet, features, sample: ActionSample) -> list[np.ndarray]:
    mean = forward(net, features)
    raw = np.asarray(sample.raw, dtype=float)
    if raw.shape != mean.shape:
        raise ValueError(f"sample shape {raw.shape} does not match output {mean.shape}")
    score = (raw - mean) / net.stddev ** 2
    return backward(net, features, score)


# -- checkpoints -----------------------------------------------------------------
#
# Plain text, one block per named net:
#
#   net <name>
#   sizes 7 64 64 3
#   slope 0.01
#   stddev 0.05
#   matrix W0 7 64      followed by 7 rows of 64 values
#   vector b0 64        followed by one row
#   vector <extra> n    optional named extras (e.g. normaliser scales)
#   end
#
# Floats are written with repr(), which round-trips exactly.

_MAGIC = "netslice-checkpoint 1"


def _fmt(row) -> str:
    return " ".join(repr(float(v)) for v in row)


def save_checkpoint(path, nets: dict[str, tuple[PolicyNet, dict[str, np.ndarray]]]) -> None:
    lines = [_MAGIC]
    for name, (net, extras) in nets.items():
        lines.append(f"net {name}")
        lines.append("sizes " + " ".join(str(n) for n in net.layer_sizes))
        lines.append(f"slope {net.slope!r}")
        lines.append(f"stddev {net.stddev!r}")
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            lines.append(f"matrix W{i} {W.shape[0]} {W.shape[1]}")
            lines.extend(_fmt(r) for r in W)
            lines.append(f"vector b{i} {b.shape[0]}")
            lines.append(_fmt(b))
        for key, arr in (extras or {}).items():
            arr = np.asarray(arr, dtype=float).ravel()
            lines.append(f"vector {key} {arr.shape[0]}")
            lines.append(_fmt(arr))
        lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, tuple[PolicyNet, dict[str, np.ndarray]]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != _MAGIC:
        raise ValueError(f"{path}: not a netslice checkpoint")
    out = {}
    i = 1

    def floats(line: str) -> list[float]:
        return [float(t) for t in line.split()] if line.strip() else []

    while i < len(lines):
        head = lines[i].split()
        i += 1
        if not head:
            continue
        if head[0] != "net":
            raise ValueError(f"{path}:{i}: expected 'net', got {head[0]!r}")
        name = head[1]
        sizes = [int(t) for t in lines[i].split()[1:]]
        slope = float(lines[i + 1].split()[1])
        stddev = float(lines[i + 2].split()[1])
        i += 3
        mats: dict[str, np.ndarray] = {}
        while lines[i].strip() != "end":
            kind, key, *dims = lines[i].split()
            i += 1
            if kind == "matrix":
                r, c = int(dims[0]), int(dims[1])
                mats[key] = np.array([floats(lines[i + k]) for k in range(r)]).reshape(r, c)
                i += r
            else:
                n = int(dims[0])
                mats[key] = np.array(floats(lines[i])).reshape(n)
                i += 1
        i += 1
        n_layers = len(sizes) - 1
        weights = [mats.pop(f"W{k}") for k in range(n_layers)]
        biases = [mats.pop(f"b{k}") for k in range(n_layers)]
        net = PolicyNet(weights, biases, slope, stddev)
        if net.layer_sizes != sizes:
            raise ValueError(f"{path}: net {name!r} sizes header disagrees with matrices")
        out[name] = (net, mats)
    return out
