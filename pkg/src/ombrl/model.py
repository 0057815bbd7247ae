"""Replay buffer and the online one-step dynamics model."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import AdamState, MlpNet, NumericFault, adam_update, forward, grad_params, init_mlp, input_jacobian

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    episode_index: int


class ReplayBuffer:
    """Append-only store of (x, u, x+) triples, grouped by episode.

    With ``capacity`` set (in transitions) the oldest whole episodes are
    evicted once the buffer overflows; the newest episode is always kept.
    """

    def __init__(self, state_dim: int, action_dim: int, capacity: int | None = None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.capacity = capacity or None
        self._episodes: list[tuple[int, np.ndarray, np.ndarray, np.ndarray]] = []
        self._cache = None

    def __len__(self):
        return sum(len(e[1]) for e in self._episodes)

    @property
    def episode_indices(self) -> list[int]:
        return [e[0] for e in self._episodes]

    def episode_counts(self) -> dict[int, int]:
        return {e[0]: len(e[1]) for e in self._episodes}

    def next_episode_index(self) -> int:
        return self._episodes[-1][0] + 1 if self._episodes else 0

    def push(self, X, U, X_next, episode_index: int | None = None) -> int:
        X, U, Xn = (np.array(a, dtype=np.float64) for a in (X, U, X_next))
        if X.ndim != 2 or X.shape[1] != self.state_dim or Xn.shape != X.shape \
                or U.shape != (len(X), self.action_dim):
            raise ValueError("transition arrays have inconsistent shapes")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U)) and np.all(np.isfinite(Xn))):
            raise ValueError("non-finite transition")
        idx = self.next_episode_index() if episode_index is None else int(episode_index)
        if idx < 0 or (self._episodes and idx <= self._episodes[-1][0]):
            raise ValueError("episode indices must be non-negative and increasing")
        self._episodes.append((idx, X, U, Xn))
        if self.capacity:
            while len(self) > self.capacity and len(self._episodes) > 1:
                self._episodes.pop(0)
        self._cache = None
        return idx

    def push_episode(self, rollout, episode_index: int | None = None) -> int:
        """Add the H transitions of a rollout record."""
        H = len(rollout.actions)
        return self.push(rollout.states[:H], rollout.actions, rollout.states[1:H + 1], episode_index)

    def arrays(self):
        if self._cache is None:
            if not self._episodes:
                e = np.zeros((0, self.state_dim))
                self._cache = (e, np.zeros((0, self.action_dim)), e, np.zeros(0, dtype=np.int64))
            else:
                self._cache = (np.concatenate([e[1] for e in self._episodes]),
                               np.concatenate([e[2] for e in self._episodes]),
                               np.concatenate([e[3] for e in self._episodes]),
                               np.concatenate([np.full(len(e[1]), e[0]) for e in self._episodes]))
        return self._cache

    def episode(self, index: int):
        for idx, X, U, Xn in self._episodes:
            if idx == index:
                return X, U, Xn
        raise KeyError(f"episode {index} not in buffer")

    @property
    def transitions(self) -> list[Transition]:
        return [Transition(X[i], U[i], Xn[i], idx)
                for idx, X, U, Xn in self._episodes for i in range(len(X))]

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        n = len(self)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, n, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform draw with replacement; returns arrays (X, U, X_next)."""
        idx = self.sample_indices(batch_size, rng)
        X, U, Xn, _ = self.arrays()
        return X[idx], U[idx], Xn[idx]

    def sample_minibatch(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        idx = self.sample_indices(batch_size, rng)
        X, U, Xn, ep = self.arrays()
        return [Transition(X[i], U[i], Xn[i], int(ep[i])) for i in idx]

    def state_dict(self) -> dict:
        return {"state_dim": self.state_dim, "action_dim": self.action_dim,
                "capacity": self.capacity or 0,
                "episodes": [(i, X.copy(), U.copy(), Xn.copy()) for i, X, U, Xn in self._episodes]}

    @classmethod
    def from_state_dict(cls, d) -> "ReplayBuffer":
        buf = cls(d["state_dim"], d["action_dim"], d["capacity"] or None)
        buf._episodes = [(int(i), X, U, Xn) for i, X, U, Xn in d["episodes"]]
        return buf


@dataclass
class DynamicsModel:
    """f_theta(x, u) built on an MlpNet.

    ``mode="delta"`` predicts a rate and returns x + dt * rate; ``"absolute"``
    predicts x+ directly. The network sees standardized inputs and emits
    standardized targets; the affine maps are part of the model.
    """
    net: MlpNet
    state_dim: int
    dt: float = 1.0
    mode: str = "delta"
    in_mean: np.ndarray = None
    in_std: np.ndarray = None
    out_mean: np.ndarray = None
    out_std: np.ndarray = None
    stats_count: int = 0
    stats_frozen: bool = False

    def __post_init__(self):
        if self.mode not in ("delta", "absolute"):
            raise ValueError(f"unknown model mode {self.mode!r}")
        d_in, d_out = self.net.input_dim, self.net.output_dim
        if d_out != self.state_dim or d_in <= self.state_dim:
            raise ValueError("network dims must be (state+action) -> state")
        self.in_mean = np.zeros(d_in) if self.in_mean is None else np.asarray(self.in_mean, float)
        self.in_std = np.ones(d_in) if self.in_std is None else np.asarray(self.in_std, float)
        self.out_mean = np.zeros(d_out) if self.out_mean is None else np.asarray(self.out_mean, float)
        self.out_std = np.ones(d_out) if self.out_std is None else np.asarray(self.out_std, float)

    @property
    def action_dim(self) -> int:
        return self.net.input_dim - self.state_dim

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def with_params(self, params) -> "DynamicsModel":
        return dataclasses.replace(self, net=self.net.with_params(params))

    def _inputs(self, X, U):
        Z = np.concatenate([np.atleast_2d(X), np.atleast_2d(U)], axis=-1)
        return (Z - self.in_mean) / self.in_std

    def _targets(self, X, X_next):
        """Standardized network targets for transitions."""
        X, Xn = np.atleast_2d(X), np.atleast_2d(X_next)
        raw = (Xn - X) / self.dt if self.mode == "delta" else Xn
        return (raw - self.out_mean) / self.out_std

    def _scale(self):
        return self.out_std * (self.dt if self.mode == "delta" else 1.0)

    def predict(self, X, U) -> np.ndarray:
        single = np.ndim(X) == 1
        raw = self.out_mean + self.out_std * forward(self.net, self._inputs(X, U))
        out = np.atleast_2d(X) + self.dt * raw if self.mode == "delta" else raw
        return out[0] if single else out

    def jacobians(self, X, U):
        """(df/dx, df/du) at each row; shapes (N, n, n) and (N, n, m)."""
        single = np.ndim(X) == 1
        J = input_jacobian(self.net, self._inputs(X, U))
        if J.ndim == 2:
            J = J[None]
        J = self._scale()[None, :, None] * J / self.in_std[None, None, :]
        n = self.state_dim
        dfdx, dfdu = J[:, :, :n], J[:, :, n:]
        if self.mode == "delta":
            dfdx = dfdx + np.eye(n)
        return (dfdx[0], dfdu[0]) if single else (dfdx, dfdu)

    def update_stats(self, X, U, X_next):
        """Refresh the standardization from data unless frozen."""
        if self.stats_frozen:
            return
        Z = np.concatenate([X, U], axis=1)
        raw = (X_next - X) / self.dt if self.mode == "delta" else X_next
        self.in_mean, self.in_std = Z.mean(0), _safe_std(Z)
        self.out_mean, self.out_std = raw.mean(0), _safe_std(raw)
        self.stats_count += 1


def _safe_std(a):
    s = a.std(0)
    return np.where(s > 1e-8, s, 1.0)


def make_model(state_dim: int, action_dim: int, rng: np.random.Generator, hidden=(64, 64),
               activation: str = "tanh", dt: float = 1.0, mode: str = "delta") -> DynamicsModel:
    net = init_mlp((state_dim + action_dim, *hidden, state_dim), rng, activation)
    return DynamicsModel(net, state_dim, dt=dt, mode=mode)


def model_loss(model: DynamicsModel, X, U, X_next) -> float:
    """Mean over the batch of ||f_theta(x, u) - x+||^2."""
    X, U, Xn = np.atleast_2d(X), np.atleast_2d(U), np.atleast_2d(X_next)
    if len(X) == 0:
        raise ValueError("empty batch")
    err = model.predict(X, U) - Xn
    return float(np.mean(np.sum(err * err, axis=1)))


def batch_arrays(batch):
    """Convert a list of Transition into stacked (X, U, X_next)."""
    return (np.array([t.x for t in batch]), np.array([t.u for t in batch]),
            np.array([t.x_next for t in batch]))


def model_loss_grad(model: DynamicsModel, X, U, X_next, standardized: bool = True):
    """Gradient of the one-step MSE w.r.t. network parameters.

    ``standardized=True`` differentiates the same squared error measured in
    standardized target units, which keeps Adam well scaled for any dt.
    """
    Z = model._inputs(X, U)
    T = model._targets(X, X_next)
    resid = forward(model.net, Z) - T
    N = len(Z)
    if standardized:
        loss = float(np.mean(np.sum(resid**2, axis=1)))
        cot = 2.0 * resid / N
    else:
        s = model._scale()
        loss = float(np.mean(np.sum((resid * s) ** 2, axis=1)))
        cot = 2.0 * resid * s**2 / N
    return loss, grad_params(model.net, Z, cot)


def model_update(model: DynamicsModel, buffer: ReplayBuffer, opt_state: AdamState, lr: float,
                 batch_size: int, n_inner: int, rng: np.random.Generator):
    """``n_inner`` Adam steps on fresh uniform minibatches from the buffer.

    Returns ``(model, opt_state, n_faults)``; ``lr == 0`` leaves everything unchanged.
    """
    if len(buffer) == 0:
        raise ValueError("model update needs a non-empty buffer")
    if n_inner < 1:
        raise ValueError("n_inner must be >= 1")
    if lr == 0:
        return model, opt_state, 0
    params, faults = model.params, 0
    current = model
    for _ in range(n_inner):
        X, U, Xn = buffer.sample(batch_size, rng)
        _, g = model_loss_grad(current, X, U, Xn)
        try:
            params, opt_state = adam_update(params, g, opt_state, lr)
        except NumericFault:
            faults += 1
            log.warning("skipping model step with non-finite gradient")
            continue
        current = current.with_params(params)
    return current, opt_state, faults
