"""Tracking policy, rollouts, closed-loop gradients and the preconditioned update.

Gradient bookkeeping works on an augmented state ``s = (x, u_{t-1}, ..., u_{t-P})``
because previous actions are policy inputs. With ``P = 0`` the augmented state
is the plant state and every block below has the plain (n, m) shapes.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import plants
from .model import DynamicsModel
from .nn import MlpNet, forward, forward_many, init_mlp, input_jacobian, param_jacobian

log = logging.getLogger(__name__)


def reference_window(points: np.ndarray, tau: int, lookahead: int) -> np.ndarray:
    """Reference points tau .. tau+L-1, repeating the last point past the end."""
    idx = np.minimum(np.arange(tau, tau + lookahead), len(points) - 1)
    return points[idx]


@dataclass
class TrackingPolicy:
    """u = clip(action_scale * net(features)).

    Features are the scaled state, the lookahead window of reference errors
    ``(r_{t+k} - S x) / ref_scale`` and the scaled previous actions.
    """
    net: MlpNet
    state_dim: int
    ref_dim: int
    action_dim: int
    lookahead: int = 10
    prev_actions: int = 2
    state_scale: np.ndarray = None
    ref_scale: np.ndarray = None
    action_scale: np.ndarray = None
    action_low: np.ndarray = None
    action_high: np.ndarray = None
    state_to_ref: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n, p, m = self.state_dim, self.ref_dim, self.action_dim
        if self.lookahead < 1 or self.prev_actions < 0:
            raise ValueError("lookahead must be >= 1 and prev_actions >= 0")
        self.state_scale = np.ones(n) if self.state_scale is None else np.asarray(self.state_scale, float)
        self.ref_scale = np.ones(p) if self.ref_scale is None else np.asarray(self.ref_scale, float)
        self.action_scale = np.ones(m) if self.action_scale is None else np.asarray(self.action_scale, float)
        self.action_low = np.full(m, -np.inf) if self.action_low is None else np.asarray(self.action_low, float)
        self.action_high = np.full(m, np.inf) if self.action_high is None else np.asarray(self.action_high, float)
        if self.state_to_ref is None:
            S = np.zeros((p, n))
            S[:, :p] = np.eye(p)
            self.state_to_ref = S
        if self.net.input_dim != self.input_dim or self.net.output_dim != m:
            raise ValueError(f"policy net must map {self.input_dim} -> {m}")

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.lookahead * self.ref_dim + self.prev_actions * self.action_dim

    @property
    def aug_dim(self) -> int:
        return self.state_dim + self.prev_actions * self.action_dim

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def with_params(self, params) -> "TrackingPolicy":
        return dataclasses.replace(self, net=self.net.with_params(params))

    def features(self, x, window, prev):
        """Stack features; accepts single vectors or leading batch dims."""
        x = np.asarray(x, dtype=np.float64)
        window = np.asarray(window, dtype=np.float64)
        prev = np.asarray(prev, dtype=np.float64).reshape(x.shape[:-1] + (self.prev_actions, self.action_dim))
        err = (window - (x @ self.state_to_ref.T)[..., None, :]) / self.ref_scale
        return np.concatenate([x / self.state_scale,
                               err.reshape(x.shape[:-1] + (-1,)),
                               (prev / self.action_scale).reshape(x.shape[:-1] + (-1,))], axis=-1)

    def feature_jacobian(self) -> np.ndarray:
        """d features / d s for the augmented state s = (x, prev actions); constant."""
        n, p, m, L, P = self.state_dim, self.ref_dim, self.action_dim, self.lookahead, self.prev_actions
        D = np.zeros((self.input_dim, self.aug_dim))
        D[:n, :n] = np.diag(1.0 / self.state_scale)
        block = -self.state_to_ref / self.ref_scale[:, None]
        for k in range(L):
            D[n + k * p:n + (k + 1) * p, :n] = block
        off = n + L * p
        for j in range(P):
            D[off + j * m:off + (j + 1) * m, n + j * m:n + (j + 1) * m] = np.diag(1.0 / self.action_scale)
        return D

    def raw_action(self, feats):
        return self.action_scale * forward(self.net, feats)

    def act(self, x, window, prev):
        """Return (clipped action, clamp flag)."""
        raw = self.raw_action(self.features(x, window, prev))
        u = np.clip(raw, self.action_low, self.action_high)
        return u, bool(np.any(u != raw))


def make_policy(plant: plants.PlantConfig, rng: np.random.Generator, hidden=(64, 64),
                activation: str = "tanh", lookahead: int = 10, prev_actions: int = 2,
                state_scale=None, ref_scale=None, action_scale=None, init_scale: float = 1.0) -> TrackingPolicy:
    n, p, m = plant.state_dim, plant.ref_dim, plant.action_dim
    in_dim = n + lookahead * p + prev_actions * m
    lo, hi = plant.box("action")
    if action_scale is None:
        action_scale = 0.5 * (hi - lo)
    net = init_mlp((in_dim, *hidden, m), rng, activation, scale=init_scale)
    return TrackingPolicy(net, n, p, m, lookahead, prev_actions, state_scale, ref_scale,
                          action_scale, lo, hi, plant.state_to_ref)


@dataclass
class RolloutRecord:
    states: np.ndarray       # (H+1, n)
    actions: np.ndarray      # (H, m)
    references: np.ndarray   # (H, p)
    costs: np.ndarray        # (H,)
    clamped: np.ndarray      # (H,) bool
    valid: bool = True

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def episode_cost(self) -> float:
        return float(np.sum(self.costs))


def _prev_window(actions, tau, P, m):
    prev = np.zeros((P, m))
    for j in range(P):
        if tau - 1 - j >= 0:
            prev[j] = actions[tau - 1 - j]
    return prev


def rollout(policy, plant: plants.PlantConfig, reference: plants.ReferenceTrajectory,
            rng: np.random.Generator | None = None, x0=None) -> RolloutRecord:
    """Run ``policy`` on the real plant along ``reference``.

    ``policy`` needs ``act(x, window, prev)``, ``lookahead``, ``prev_actions``
    and ``action_dim``. A plant fault truncates the record and marks it invalid.
    """
    pts = reference.points
    H = len(pts)
    m, P = policy.action_dim, policy.prev_actions
    x = plants.initial_state(plant, pts[0]) if x0 is None else np.asarray(x0, dtype=np.float64)
    states, actions, clamped, costs = [x], [], [], []
    valid = True
    for tau in range(H):
        window = reference_window(pts, tau, policy.lookahead)
        u, flag = policy.act(x, window, _prev_window(actions, tau, P, m))
        u_plant, pflag = plants.clip_action(plant, u)
        costs.append(float(plants.stage_cost(plant, x, u_plant, pts[tau])))
        try:
            x = plants.step(plant, x, u_plant, rng)
        except plants.SimulationFault:
            log.warning("plant fault at step %d; truncating rollout", tau)
            actions.append(u_plant)
            clamped.append(flag or bool(pflag))
            valid = False
            break
        actions.append(u_plant)
        clamped.append(flag or bool(pflag))
        states.append(x)
    if not valid:
        actions, clamped, costs = actions[:-1], clamped[:-1], costs[:-1]
    k = len(actions)
    return RolloutRecord(np.array(states[:k + 1]), np.array(actions).reshape(k, m), pts[:k].copy(),
                         np.array(costs), np.array(clamped, dtype=bool), valid)


def episode_costs_many(policy: TrackingPolicy, params_batch, plant: plants.PlantConfig,
                       reference: plants.ReferenceTrajectory) -> np.ndarray:
    """Noise-free episode costs for many parameter vectors at once."""
    P_batch = np.atleast_2d(params_batch)
    B = len(P_batch)
    pts = reference.points
    H = len(pts)
    m, Pn = policy.action_dim, policy.prev_actions
    x = np.broadcast_to(plants.initial_state(plant, pts[0]), (B, policy.state_dim)).copy()
    prev = np.zeros((B, Pn, m))
    total = np.zeros(B)
    for tau in range(H):
        window = np.broadcast_to(reference_window(pts, tau, policy.lookahead), (B, policy.lookahead, policy.ref_dim))
        feats = policy.features(x, window, prev)
        raw = policy.action_scale * forward_many(policy.net.layer_dims, policy.net.activation, P_batch, feats)
        u = np.clip(raw, policy.action_low, policy.action_high)
        u, _ = plants.clip_action(plant, u)
        total += plants.stage_cost(plant, x, u, pts[tau])
        x = plants.step(plant, x, u)
        if Pn:
            prev = np.concatenate([u[:, None, :], prev[:, :-1]], axis=1)
    return total


# Jacobians and the closed-loop gradient ---------------------------------

@dataclass
class JacobianBundle:
    A_blocks: np.ndarray    # (H-1, ns, ns); block (j+1, j)
    B_blocks: np.ndarray    # (H-1, ns, m);  block (j+1, j)
    K_blocks: np.ndarray    # (H, m, ns);    block (j, j)
    dg_dx: np.ndarray       # (H*ns,) total stage-cost sensitivity to the visited state
    du_dphi: np.ndarray     # (H*m, n_phi)
    dc_du: np.ndarray = None  # (H*m,) direct action cost term, zero when control_weight == 0
    gamma_discount: float = 1.0

    def __post_init__(self):
        if self.dc_du is None:
            self.dc_du = np.zeros(self.du_dphi.shape[0])
        if not 0 < self.gamma_discount <= 1:
            raise ValueError("gamma_discount must lie in (0, 1]")

    @property
    def horizon(self) -> int:
        return len(self.K_blocks)

    @property
    def state_dim(self) -> int:
        return self.K_blocks.shape[2]

    @property
    def action_dim(self) -> int:
        return self.K_blocks.shape[1]

    def closed_loop_blocks(self) -> np.ndarray:
        """A_j + B_j K_j for j = 0..H-2."""
        if len(self.A_blocks) == 0:
            return self.A_blocks
        return self.A_blocks + self.B_blocks @ self.K_blocks[:-1]


def _dynamics_jacobians(source, X, U):
    if isinstance(source, DynamicsModel):
        return source.jacobians(X, U)
    if isinstance(source, plants.PlantConfig):
        pairs = [plants.true_jacobians(source, x, u) for x, u in zip(X, U)]
        n, m = X.shape[1], U.shape[1]
        return (np.array([a for a, _ in pairs]).reshape(-1, n, n),
                np.array([b for _, b in pairs]).reshape(-1, n, m))
    return source(X, U)


def assemble_jacobians(dynamics, policy: TrackingPolicy, record: RolloutRecord,
                       plant: plants.PlantConfig, gamma: float = 1.0) -> JacobianBundle:
    """Collect the blocks of the closed-loop gradient along a real rollout.

    ``dynamics`` is a DynamicsModel (learned f_theta), a PlantConfig (true
    Jacobians, the oracle mode) or a callable ``(X, U) -> (dfdx, dfdu)``.
    Jacobians are always taken at the visited states and actions.
    """
    H = record.horizon
    if H < 1:
        raise ValueError("empty rollout")
    n, m, P = policy.state_dim, policy.action_dim, policy.prev_actions
    ns = policy.aug_dim
    X, U, R = record.states[:H], record.actions, record.references
    prev = np.array([_prev_window(U, t, P, m) for t in range(H)]).reshape(H, P, m)
    windows = np.array([reference_window(R, t, policy.lookahead) for t in range(H)])
    feats = policy.features(X, windows, prev)
    raw = policy.action_scale * forward(policy.net, feats)
    active = ((raw >= policy.action_low) & (raw <= policy.action_high)).astype(np.float64)
    plo, phi = plant.box("action")
    active *= ((raw >= plo) & (raw <= phi))
    scale = (policy.action_scale * active)[:, :, None]        # (H, m, 1)

    J_in = input_jacobian(policy.net, feats).reshape(H, m, -1)
    K = scale * (J_in @ policy.feature_jacobian())          # (H, m, ns)
    du_dphi = (scale * param_jacobian(policy.net, feats).reshape(H, m, -1)).reshape(H * m, -1)

    if H > 1:
        fx, fu = _dynamics_jacobians(dynamics, X[:H - 1], U[:H - 1])
        A = np.zeros((H - 1, ns, ns))
        Bb = np.zeros((H - 1, ns, m))
        A[:, :n, :n] = fx
        Bb[:, :n, :] = fu
        if P:
            Bb[:, n:n + m, :] = np.eye(m)
            for j in range(1, P):
                A[:, n + j * m:n + (j + 1) * m, n + (j - 1) * m:n + j * m] = np.eye(m)
    else:
        A, Bb = np.zeros((0, ns, ns)), np.zeros((0, ns, m))

    dcdx, dcdu = plants.stage_cost_grad(plant, X, U, R)
    q = np.zeros((H, ns))
    q[:, :n] = dcdx
    q += np.einsum("hm,hms->hs", dcdu, K)
    return JacobianBundle(A, Bb, K, q.ravel(), du_dphi, dcdu.ravel(), gamma)


def closed_loop_gradient(bundle: JacobianBundle) -> np.ndarray:
    """dg/dx (I - gamma (A + BK))^{-1} B du/dphi, by a backward adjoint sweep."""
    H, ns, m = bundle.horizon, bundle.state_dim, bundle.action_dim
    q = bundle.dg_dx.reshape(H, ns)
    N = bundle.closed_loop_blocks()
    w = np.zeros((H, m))
    lam = q[H - 1].copy()
    for t in range(H - 2, -1, -1):
        w[t] = lam @ bundle.B_blocks[t]
        lam = q[t] + bundle.gamma_discount * (lam @ N[t])
    return (w.ravel() + bundle.dc_du) @ bundle.du_dphi


def dense_closed_loop_gradient(bundle: JacobianBundle) -> np.ndarray:
    """Reference implementation forming the full block matrices."""
    H, ns, m = bundle.horizon, bundle.state_dim, bundle.action_dim
    N = np.zeros((H * ns, H * ns))
    Bf = np.zeros((H * ns, H * m))
    for j, blk in enumerate(bundle.closed_loop_blocks()):
        N[(j + 1) * ns:(j + 2) * ns, j * ns:(j + 1) * ns] = blk
        Bf[(j + 1) * ns:(j + 2) * ns, j * m:(j + 1) * m] = bundle.B_blocks[j]
    y = np.linalg.solve((np.eye(H * ns) - bundle.gamma_discount * N).T, bundle.dg_dx)
    return (y @ Bf + bundle.dc_du) @ bundle.du_dphi


def zero_feedback(bundle: JacobianBundle) -> JacobianBundle:
    """Copy of the bundle with K blocks dropped (negative control for checks)."""
    return dataclasses.replace(bundle, K_blocks=np.zeros_like(bundle.K_blocks))


# preconditioner ---------------------------------------------------------

def _factor(grad, du_dphi, alpha):
    grad = np.asarray(grad, dtype=np.float64)
    J = np.asarray(du_dphi, dtype=np.float64).reshape(-1, grad.size)
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    cols = [grad[:, None]]
    if alpha > 0 and J.size:
        cols.append(np.sqrt(alpha) * J.T)
    return np.concatenate(cols, axis=1)


def _svd(U):
    Q, s, _ = np.linalg.svd(U, full_matrices=False)
    return Q, s


def preconditioner_solve(grad, du_dphi, alpha: float, epsilon: float, rhs=None) -> np.ndarray:
    """Lambda^{-1} rhs for Lambda = g g^T + alpha J^T J + eps I (rhs defaults to g).

    Uses the thin SVD of the (n_phi x (1 + mH)) factor; Lambda is never formed.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    v = np.asarray(grad if rhs is None else rhs, dtype=np.float64)
    Q, s = _svd(_factor(grad, du_dphi, alpha))
    c = Q.T @ v
    return Q @ (c / (s * s + epsilon)) + (v - Q @ c) / epsilon


def preconditioner_spectrum(du_dphi, grad, alpha: float, epsilon: float):
    """(lambda_min, lambda_max) of the preconditioner from its low-rank factor."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    _, s = _svd(_factor(grad, du_dphi, alpha))
    ev = s * s
    lam_max = float(ev.max() + epsilon) if ev.size else float(epsilon)
    lam_min = float(ev.min() + epsilon) if ev.size >= grad.size else float(epsilon)
    return lam_min, lam_max


def policy_update(policy: TrackingPolicy, grad, du_dphi, eta: float, alpha: float, epsilon: float,
                  param_bound: float | None = None):
    """phi <- Proj(phi - eta Lambda^{-1} grad). Returns (policy, step, ok)."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    step = eta * preconditioner_solve(grad, du_dphi, alpha, epsilon)
    if not np.all(np.isfinite(step)):
        log.warning("non-finite policy step; update skipped")
        return policy, np.zeros_like(step), False
    new = policy.params - step
    if param_bound:
        new = np.clip(new, -param_bound, param_bound)
    return policy.with_params(new), step, True
