"""Small feed-forward networks with exact reverse-mode derivatives.

Parameters live in one flat float64 vector. Layer ``k`` stores its weight
matrix ``W_k`` (fan_out x fan_in, row-major) followed by its bias ``b_k``.
Hidden layers use the configured activation, the output layer is linear.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class NumericFault(FloatingPointError):
    """Raised when an update would write non-finite values into parameters."""


def n_params(layer_dims) -> int:
    return int(sum((fi + 1) * fo for fi, fo in zip(layer_dims[:-1], layer_dims[1:])))


@dataclass
class MlpNet:
    layer_dims: tuple
    activation: str = "tanh"
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"invalid layer_dims {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        size = n_params(self.layer_dims)
        if self.params is None:
            self.params = np.zeros(size)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (size,):
            raise ValueError(f"expected {size} parameters, got shape {self.params.shape}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return self.params.size

    def with_params(self, params) -> "MlpNet":
        return MlpNet(self.layer_dims, self.activation, np.array(params, dtype=np.float64))

    def layers(self, params=None):
        """Return ``[(W, b), ...]`` as views into ``params`` (defaults to own)."""
        p = self.params if params is None else params
        out, off = [], 0
        for fi, fo in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            W = p[off:off + fi * fo].reshape(fo, fi)
            off += fi * fo
            b = p[off:off + fo]
            off += fo
            out.append((W, b))
        return out

    def __call__(self, x):
        return forward(self, x)


def init_mlp(layer_dims, rng: np.random.Generator, activation: str = "tanh", scale: float = 1.0) -> MlpNet:
    """Uniform init in [-s, s] with s = scale / sqrt(fan_in), biases included."""
    chunks = []
    for fi, fo in zip(layer_dims[:-1], layer_dims[1:]):
        s = scale / np.sqrt(fi)
        chunks.append(rng.uniform(-s, s, size=fi * fo))
        chunks.append(rng.uniform(-s, s, size=fo))
    return MlpNet(tuple(layer_dims), activation, np.concatenate(chunks))


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def _as_batch(net: MlpNet, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ValueError(f"input has shape {x.shape}, network expects last dim {net.input_dim}")
    return X, single


def _forward_cache(net: MlpNet, X):
    acts, pres = [X], []
    layers = net.layers()
    for k, (W, b) in enumerate(layers):
        z = acts[-1] @ W.T + b
        pres.append(z)
        acts.append(z if k == len(layers) - 1 else _act(net.activation, z))
    return acts, pres


def forward(net: MlpNet, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    X, single = _as_batch(net, x)
    out = _forward_cache(net, X)[0][-1]
    return out[0] if single else out


def _backprop(net, acts, pres, V):
    """Pull cotangents ``V`` of shape (N, K, out) back through the net.

    Returns per-layer deltas (N, K, fan_out) and the input cotangent (N, K, in).
    """
    layers = net.layers()
    deltas = [None] * len(layers)
    d = V
    for k in range(len(layers) - 1, -1, -1):
        if k < len(layers) - 1:
            d = d * _act_grad(net.activation, pres[k], acts[k + 1])[:, None, :]
        deltas[k] = d
        d = d @ layers[k][0]
    return deltas, d


def grad_params(net: MlpNet, x, cotangent) -> np.ndarray:
    """Vector-Jacobian product ``v^T d out / d params``.

    For batched input the per-row products are summed, which is what a
    batch loss needs.
    """
    X, single = _as_batch(net, x)
    V = np.asarray(cotangent, dtype=np.float64)
    V = V[None, :] if V.ndim == 1 else V
    if V.shape != (X.shape[0], net.output_dim):
        raise ValueError(f"cotangent shape {np.shape(cotangent)} does not match output")
    acts, pres = _forward_cache(net, X)
    deltas, _ = _backprop(net, acts, pres, V[:, None, :])
    chunks = []
    for k, d in enumerate(deltas):
        d = d[:, 0, :]
        chunks.append((d.T @ acts[k]).ravel())
        chunks.append(d.sum(axis=0))
    return np.concatenate(chunks)


def input_jacobian(net: MlpNet, x) -> np.ndarray:
    """d out / d input, shape (out, in) or (N, out, in) for a batch."""
    X, single = _as_batch(net, x)
    acts, pres = _forward_cache(net, X)
    eye = np.broadcast_to(np.eye(net.output_dim), (X.shape[0], net.output_dim, net.output_dim))
    _, J = _backprop(net, acts, pres, eye)
    return J[0] if single else J


def param_jacobian(net: MlpNet, x) -> np.ndarray:
    """d out / d params, shape (out, n_params) or (N, out, n_params)."""
    X, single = _as_batch(net, x)
    acts, pres = _forward_cache(net, X)
    N, K = X.shape[0], net.output_dim
    eye = np.broadcast_to(np.eye(K), (N, K, K))
    deltas, _ = _backprop(net, acts, pres, eye)
    chunks = []
    for k, d in enumerate(deltas):
        chunks.append((d[:, :, :, None] * acts[k][:, None, None, :]).reshape(N, K, -1))
        chunks.append(d)
    J = np.concatenate(chunks, axis=2)
    return J[0] if single else J


def forward_many(layer_dims, activation: str, P, X) -> np.ndarray:
    """Evaluate B networks sharing an architecture, row ``i`` of ``P`` on row ``i`` of ``X``."""
    P = np.asarray(P, dtype=np.float64)
    a = np.asarray(X, dtype=np.float64)
    off = 0
    n_layers = len(layer_dims) - 1
    for k, (fi, fo) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
        W = P[:, off:off + fi * fo].reshape(-1, fo, fi)
        off += fi * fo
        b = P[:, off:off + fo]
        off += fo
        z = np.matmul(W, a[:, :, None])[:, :, 0] + b
        a = z if k == n_layers - 1 else _act(activation, z)
    return a


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def fresh(cls, size: int, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, **kw)


def adam_update(params, grad, state: AdamState, lr: float):
    """One bias-corrected Adam step. Returns ``(new_params, new_state)``.

    Raises NumericFault (and leaves inputs untouched) on non-finite gradients.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.first_moment.shape != params.shape:
        raise ValueError("params, grad and optimizer state must have equal length")
    if not lr > 0:
        raise ValueError("Adam learning rate must be positive")
    if not np.all(np.isfinite(grad)):
        raise NumericFault("non-finite gradient passed to adam_update")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps_adam)
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps_adam)
