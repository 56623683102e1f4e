"""Tabular and neural reward-vector estimators.

The neural estimator is a plain numpy MLP (rectifier hidden layers, identity
output) with hand-written backprop, so parameter and input gradients are
available for both training and saliency.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .envs import MdpSpec

DEFAULT_HIDDEN = (64, 64)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class GradientBundle:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray

    def scaled(self, factor: float) -> "GradientBundle":
        return GradientBundle(
            [g * factor for g in self.weights], [g * factor for g in self.biases], self.inputs * factor
        )

    def add(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
            self.inputs + other.inputs,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.weights + self.biases) and bool(
            np.all(np.isfinite(self.inputs))
        )


class MLP:
    """Fully connected network; ``weights[i]`` has shape (fan_in, fan_out)."""

    def __init__(self, widths, seed: int = 0, zero: bool = False):
        self.widths = tuple(int(x) for x in widths)
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            if zero:
                self.weights.append(np.zeros((fan_in, fan_out)))
            else:
                self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def forward(self, x: np.ndarray, keep: bool = False):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.widths[0]:
            raise ShapeError(f"input dim {x.shape[1]} != {self.widths[0]}")
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            pre.append(z)
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        if keep:
            return h, (acts, pre)
        return h

    def backward(self, upstream: np.ndarray, cache) -> GradientBundle:
        acts, pre = cache
        n_layers = len(self.weights)
        gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        delta = upstream
        for i in reversed(range(n_layers)):
            if i != n_layers - 1:
                delta = delta * (pre[i] > 0)
            gw[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
        return GradientBundle(gw, gb, delta)

    def copy(self) -> "MLP":
        return copy.deepcopy(self)


class TabularTrd:
    """Lookup table of reward vectors, shape (S, A, n+1)."""

    kind = "tabular"

    def __init__(self, table: np.ndarray, n: int, w: int, gamma: float):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 3 or table.shape[2] != n + 1:
            raise ShapeError(f"table shape {table.shape} incompatible with n={n}")
        if not np.all(np.isfinite(table)):
            raise NonFiniteError("table entries must be finite")
        self.table = table
        self.n, self.w, self.gamma = int(n), int(w), float(gamma)

    @classmethod
    def zeros(cls, spec: MdpSpec, n: int, w: int, gamma: float) -> "TabularTrd":
        return cls(np.zeros((spec.num_states, spec.num_actions, n + 1)), n, w, gamma)

    @classmethod
    def from_value_table(cls, vt) -> "TabularTrd":
        if vt.form != "q":
            raise ValueError("tabular estimator needs a Q-form table")
        return cls(vt.vectors.copy(), vt.n, vt.w, vt.gamma)

    @property
    def num_states(self) -> int:
        return self.table.shape[0]

    @property
    def num_actions(self) -> int:
        return self.table.shape[1]

    def state_of(self, obs) -> np.ndarray:
        """State indices from integer states or one-hot observations."""
        arr = np.asarray(obs)
        if arr.ndim == 0 or (arr.ndim == 1 and np.issubdtype(arr.dtype, np.integer)):
            idx = np.atleast_1d(arr).astype(int)
        else:
            arr = np.atleast_2d(arr)
            if arr.shape[1] != self.num_states:
                raise ShapeError(f"observation dim {arr.shape[1]} != {self.num_states} states")
            idx = np.argmax(arr, axis=1)
        if np.any(idx < 0) or np.any(idx >= self.num_states):
            raise ShapeError("state index out of range")
        return idx

    def predict(self, obs) -> np.ndarray:
        return self.table[self.state_of(obs)]


class NeuralTrd:
    """MLP mapping an observation to ``num_actions`` reward vectors of length n+1."""

    kind = "neural_trd"

    def __init__(self, obs_dim: int, num_actions: int, n: int, w: int, gamma: float,
                 hidden=DEFAULT_HIDDEN, seed: int = 0, zero: bool = False):
        self.num_actions, self.n, self.w, self.gamma = int(num_actions), int(n), int(w), float(gamma)
        self.seed = int(seed)
        self.net = MLP((obs_dim, *hidden, num_actions * (n + 1)), seed=seed, zero=zero)

    @property
    def obs_dim(self) -> int:
        return self.net.widths[0]

    def predict(self, obs) -> np.ndarray:
        out = self.net.forward(obs)
        return out.reshape(-1, self.num_actions, self.n + 1)

    def forward_backward(self, obs, upstream: np.ndarray):
        """Outputs of shape (B, A, n+1) and gradients of ``sum(outputs * upstream)``."""
        out, cache = self.net.forward(obs, keep=True)
        out = out.reshape(-1, self.num_actions, self.n + 1)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.ndim == 2:
            upstream = upstream[None]
        if upstream.shape != out.shape:
            raise ShapeError(f"upstream gradient shape {upstream.shape} != output shape {out.shape}")
        with np.errstate(invalid="ignore", over="ignore"):  # reported below
            grads = self.net.backward(upstream.reshape(out.shape[0], -1), cache)
        if not grads.is_finite():
            raise NonFiniteError("non-finite gradient")
        return out, grads

    def copy(self) -> "NeuralTrd":
        return copy.deepcopy(self)


class QNetwork:
    """Scalar Q-value MLP used for the teacher."""

    kind = "neural_q"
    n = 0
    w = 1

    def __init__(self, obs_dim: int, num_actions: int, gamma: float, hidden=DEFAULT_HIDDEN,
                 seed: int = 0, zero: bool = False):
        self.num_actions, self.gamma, self.seed = int(num_actions), float(gamma), int(seed)
        self.net = MLP((obs_dim, *hidden, num_actions), seed=seed, zero=zero)

    @property
    def obs_dim(self) -> int:
        return self.net.widths[0]

    def predict(self, obs) -> np.ndarray:
        """Shape (B, A, 1), so a scalar network reads as a vector with only a tail."""
        return self.net.forward(obs)[:, :, None]

    def q_values(self, obs) -> np.ndarray:
        return self.net.forward(obs)

    def forward_backward(self, obs, upstream: np.ndarray):
        out, cache = self.net.forward(obs, keep=True)
        upstream = np.asarray(upstream, dtype=np.float64).reshape(out.shape)
        with np.errstate(invalid="ignore", over="ignore"):
            grads = self.net.backward(upstream, cache)
        if not grads.is_finite():
            raise NonFiniteError("non-finite gradient")
        return out, grads

    def copy(self) -> "QNetwork":
        return copy.deepcopy(self)


def predict_vector(est, obs) -> np.ndarray:
    """Reward vectors for every action: (A, n+1) for one observation, (B, A, n+1) for a batch."""
    single = _is_single(est, obs)
    out = est.predict(obs)
    return out[0] if single else out


def scalar_q(est, obs) -> np.ndarray:
    return predict_vector(est, obs).sum(axis=-1)


def greedy_action(est, obs):
    """Argmax of the summed vectors; ``np.argmax`` keeps the lowest index on ties."""
    q = scalar_q(est, obs)
    if q.ndim == 1:
        return int(np.argmax(q))
    return np.argmax(q, axis=-1)


def _is_single(est, obs) -> bool:
    arr = np.asarray(obs)
    if isinstance(est, TabularTrd) and np.issubdtype(arr.dtype, np.integer):
        return arr.ndim == 0
    return arr.ndim == 1


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def apply_update(est, grads: GradientBundle, opt: Adam):
    """One Adam step on ``est.net`` in place; returns ``est``."""
    net: MLP = est.net
    params = net.params
    flat = []
    for gw, gb in zip(grads.weights, grads.biases):
        flat.extend([gw, gb])
    if len(flat) != len(params) or any(g.shape != p.shape for g, p in zip(flat, params)):
        raise ShapeError("gradient shapes do not match parameters")
    if not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    opt.t += 1
    bc1 = 1.0 - opt.beta1**opt.t
    bc2 = 1.0 - opt.beta2**opt.t
    new = []
    for p, g, m, v in zip(params, flat, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        step = opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        new.append(p - step)
    if not all(np.all(np.isfinite(p)) for p in new):
        raise NonFiniteError("update produced non-finite parameters")
    for i in range(len(net.weights)):
        net.weights[i] = new[2 * i]
        net.biases[i] = new[2 * i + 1]
    return est
