"""Simulated ground-truth plants, reference generation and the tracking cost.

Three plants are available:

* ``linear``   x+ = A x + B u, the exactness oracle.
* ``pendulum`` damped pendulum, semi-implicit Euler, state (angle, rate).
* ``arm``      two-link planar arm in a vertical plane driven through
               first-order actuators with a deadband, payload at the tip.
               State (q1, q2, dq1, dq2, v1, v2).

All step functions accept arrays with arbitrary leading batch dimensions.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

KINDS = ("linear", "pendulum", "arm")


class SimulationFault(FloatingPointError):
    """The plant produced a non-finite state."""


def _tup(x):
    if x is None:
        return None
    return tuple(_tup(v) if isinstance(v, (list, tuple, np.ndarray)) else float(v) for v in x)


@dataclass(frozen=True)
class PlantConfig:
    kind: str
    dt: float = 0.01
    # linear plant
    A: tuple | None = None
    B: tuple | None = None
    # pendulum
    mass: float = 1.0
    length: float = 1.0
    damping: float = 0.1
    gravity: float = 9.81
    # arm
    link_masses: tuple = (1.0, 0.5)
    link_lengths: tuple = (0.5, 0.4)
    joint_damping: float = 0.5
    actuator_lag: float = 0.05
    deadband: float = 0.2
    payload: float = 1.0
    # boxes; references are boxed per position channel
    state_low: tuple = ()
    state_high: tuple = ()
    action_low: tuple = ()
    action_high: tuple = ()
    ref_low: tuple = ()
    ref_high: tuple = ()
    segment_steps: int = 500
    noise_std: float = 0.0
    control_weight: float = 0.0

    def __post_init__(self):
        for name in ("A", "B", "link_masses", "link_lengths", "state_low", "state_high",
                     "action_low", "action_high", "ref_low", "ref_high"):
            object.__setattr__(self, name, _tup(getattr(self, name)))
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown plant kind {self.kind!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        n, m = self.state_dim, self.action_dim
        for lo, hi, size, what in ((self.state_low, self.state_high, n, "state"),
                                   (self.action_low, self.action_high, m, "action"),
                                   (self.ref_low, self.ref_high, self.ref_channels, "reference")):
            if len(lo) != size or len(hi) != size:
                raise ValueError(f"{what} box must have {size} entries")
            if not np.all(np.asarray(lo) < np.asarray(hi)):
                raise ValueError(f"{what} box is empty")
        if self.kind == "linear":
            A, B = np.asarray(self.A), np.asarray(self.B)
            if A.shape != (n, n) or B.shape[0] != n:
                raise ValueError("linear plant needs square A and matching B")
        if self.kind == "pendulum" and not (self.mass > 0 and self.length > 0):
            raise ValueError("pendulum mass and length must be positive")
        if self.kind == "arm":
            if min(self.link_masses) <= 0 or min(self.link_lengths) <= 0 or self.actuator_lag <= 0:
                raise ValueError("arm masses, lengths and actuator lag must be positive")
            if self.payload < 0 or self.deadband < 0:
                raise ValueError("payload and deadband must be non-negative")
        if self.segment_steps < 1 or self.noise_std < 0 or self.control_weight < 0:
            raise ValueError("segment_steps >= 1, noise_std >= 0, control_weight >= 0 required")

    # dimensions -----------------------------------------------------------
    @property
    def state_dim(self) -> int:
        if self.kind == "linear":
            return len(self.A)
        return 2 if self.kind == "pendulum" else 6

    @property
    def action_dim(self) -> int:
        if self.kind == "linear":
            return len(self.B[0])
        return 1 if self.kind == "pendulum" else 2

    @property
    def ref_channels(self) -> int:
        """Number of independent spline channels in a reference."""
        if self.kind == "linear":
            return self.state_dim
        return 1 if self.kind == "pendulum" else 2

    @property
    def ref_dim(self) -> int:
        return 2 if self.kind == "pendulum" else self.ref_channels

    @property
    def state_to_ref(self) -> np.ndarray:
        """Selection matrix taking a state into reference coordinates."""
        S = np.zeros((self.ref_dim, self.state_dim))
        S[:, :self.ref_dim] = np.eye(self.ref_dim)
        return S

    def box(self, name):
        return np.asarray(getattr(self, name + "_low")), np.asarray(getattr(self, name + "_high"))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: (list(map(list, v)) if k in ("A", "B") and v is not None else
                    list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PlantConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown plant keys: {sorted(unknown)}")
        if "kind" not in d:
            raise ValueError("plant.kind is required")
        base = default_plant(d["kind"])
        return dataclasses.replace(base, **d)


def default_plant(kind: str) -> PlantConfig:
    if kind == "linear":
        A = np.array([[0.9, 0.1, 0.0], [-0.1, 0.85, 0.05], [0.0, 0.05, 0.8]])
        B = np.array([[0.1, 0.0], [0.0, 0.1], [0.05, 0.05]])
        return PlantConfig("linear", A=A, B=B, state_low=[-50.0] * 3, state_high=[50.0] * 3,
                           action_low=[-100.0] * 2, action_high=[100.0] * 2,
                           ref_low=[-1.0] * 3, ref_high=[1.0] * 3, segment_steps=5)
    if kind == "pendulum":
        return PlantConfig("pendulum", mass=0.5, length=0.3, damping=0.05,
                           state_low=[-np.pi, -30.0], state_high=[np.pi, 30.0],
                           action_low=[-5.0], action_high=[5.0],
                           ref_low=[-0.6], ref_high=[0.6], segment_steps=20)
    if kind == "arm":
        return PlantConfig("arm", link_masses=(1.0, 0.5), link_lengths=(0.5, 0.4),
                           joint_damping=0.5, actuator_lag=0.05, deadband=0.2, payload=1.0,
                           state_low=[-np.pi, -np.pi, -20.0, -20.0, -40.0, -40.0],
                           state_high=[np.pi, np.pi, 20.0, 20.0, 40.0, 40.0],
                           action_low=[-40.0, -40.0], action_high=[40.0, 40.0],
                           ref_low=[-0.8, 0.2], ref_high=[0.8, 1.8], segment_steps=20)
    raise ValueError(f"unknown plant kind {kind!r}")


def set_payload(config: PlantConfig, mass: float) -> PlantConfig:
    if mass < 0:
        raise ValueError("payload mass must be non-negative")
    return dataclasses.replace(config, payload=float(mass))


# dynamics ---------------------------------------------------------------

def clip_action(config: PlantConfig, u):
    lo, hi = config.box("action")
    uc = np.clip(u, lo, hi)
    return uc, np.any(uc != u, axis=-1)


def deadband(u, width):
    return np.sign(u) * np.maximum(np.abs(u) - width, 0.0)


def _arm_accel(config: PlantConfig, q, dq, torque):
    m1, m2 = config.link_masses
    M2 = m2 + config.payload
    l1, l2 = config.link_lengths
    g = config.gravity
    q1, q2 = q[..., 0], q[..., 1]
    c2, s2 = np.cos(q2), np.sin(q2)
    M11 = m1 * l1**2 + M2 * (l1**2 + l2**2 + 2 * l1 * l2 * c2)
    M12 = M2 * (l2**2 + l1 * l2 * c2)
    M22 = np.full_like(M11, M2 * l2**2)
    h = M2 * l1 * l2 * s2
    dq1, dq2 = dq[..., 0], dq[..., 1]
    cor1 = -h * (2 * dq1 * dq2 + dq2**2)
    cor2 = h * dq1**2
    G1 = (m1 + M2) * g * l1 * np.cos(q1) + M2 * g * l2 * np.cos(q1 + q2)
    G2 = M2 * g * l2 * np.cos(q1 + q2)
    r1 = torque[..., 0] - config.joint_damping * dq1 - cor1 - G1
    r2 = torque[..., 1] - config.joint_damping * dq2 - cor2 - G2
    det = M11 * M22 - M12**2
    return np.stack([(M22 * r1 - M12 * r2) / det, (M11 * r2 - M12 * r1) / det], axis=-1)


def _raw_step(config: PlantConfig, x, u):
    dt = config.dt
    if config.kind == "linear":
        return x @ np.asarray(config.A).T + u @ np.asarray(config.B).T
    if config.kind == "pendulum":
        th, w = x[..., 0], x[..., 1]
        ml2 = config.mass * config.length**2
        acc = (u[..., 0] - config.damping * w - config.mass * config.gravity * config.length * np.sin(th)) / ml2
        w_next = w + dt * acc
        return np.stack([th + dt * w_next, w_next], axis=-1)
    q, dq, v = x[..., 0:2], x[..., 2:4], x[..., 4:6]
    ddq = _arm_accel(config, q, dq, v)
    dq_next = dq + dt * ddq
    q_next = q + dt * dq_next
    v_next = v + dt * (deadband(u, config.deadband) - v) / config.actuator_lag
    return np.concatenate([q_next, dq_next, v_next], axis=-1)


def step(config: PlantConfig, x, u, rng: np.random.Generator | None = None):
    """Advance the plant one step. Actions and next states are clamped to their boxes."""
    x = np.asarray(x, dtype=np.float64)
    u, _ = clip_action(config, np.asarray(u, dtype=np.float64))
    nxt = _raw_step(config, x, u)
    if rng is not None and config.noise_std > 0:
        nxt = nxt + config.noise_std * rng.standard_normal(nxt.shape)
    if not np.all(np.isfinite(nxt)):
        raise SimulationFault(f"non-finite state after step from {x}")
    lo, hi = config.box("state")
    return np.clip(nxt, lo, hi)


def true_jacobians(config: PlantConfig, x, u, h: float = 1e-6):
    """(df/dx, df/du) of the noise-free step; exact for the linear plant."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if config.kind == "linear":
        return np.array(config.A), np.array(config.B)
    n, m = x.size, u.size
    z = np.concatenate([x, u])
    E = np.eye(n + m) * h
    plus = step(config, (z + E)[:, :n], (z + E)[:, n:])
    minus = step(config, (z - E)[:, :n], (z - E)[:, n:])
    J = ((plus - minus) / (2 * h)).T
    return J[:, :n], J[:, n:]


def initial_state(config: PlantConfig, ref_point) -> np.ndarray:
    """State matching the first reference point (velocities and actuators at rest)."""
    x = np.zeros(config.state_dim)
    x[:config.ref_dim] = ref_point
    lo, hi = config.box("state")
    return np.clip(x, lo, hi)


# kinematics and cost ----------------------------------------------------

def forward_kinematics(config: PlantConfig, q):
    l1, l2 = config.link_lengths
    q = np.asarray(q, dtype=np.float64)
    q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
    return np.stack([l1 * np.cos(q1) + l2 * np.cos(q12), l1 * np.sin(q1) + l2 * np.sin(q12)], axis=-1)


def tracked(config: PlantConfig, x):
    """Quantity that the cost compares against the reference."""
    x = np.asarray(x, dtype=np.float64)
    if config.kind == "arm":
        return forward_kinematics(config, x[..., :2])
    return x[..., :config.ref_dim]


def tracked_target(config: PlantConfig, r):
    r = np.asarray(r, dtype=np.float64)
    if config.kind == "arm":
        return forward_kinematics(config, r)
    return r


def tracked_jacobian(config: PlantConfig, x) -> np.ndarray:
    """d tracked / d x, shape (..., d, n)."""
    x = np.asarray(x, dtype=np.float64)
    n = config.state_dim
    if config.kind != "arm":
        return np.broadcast_to(config.state_to_ref, x.shape[:-1] + (config.ref_dim, n)).copy()
    l1, l2 = config.link_lengths
    q1, q12 = x[..., 0], x[..., 0] + x[..., 1]
    J = np.zeros(x.shape[:-1] + (2, n))
    J[..., 0, 0] = -l1 * np.sin(q1) - l2 * np.sin(q12)
    J[..., 0, 1] = -l2 * np.sin(q12)
    J[..., 1, 0] = l1 * np.cos(q1) + l2 * np.cos(q12)
    J[..., 1, 1] = l2 * np.cos(q12)
    return J


def stage_cost(config: PlantConfig, x, u, r):
    """||p(x) - p(r)||^2 + control_weight * ||u||^2."""
    e = tracked(config, x) - tracked_target(config, r)
    u = np.asarray(u, dtype=np.float64)
    return np.sum(e * e, axis=-1) + config.control_weight * np.sum(u * u, axis=-1)


def stage_cost_grad(config: PlantConfig, x, u, r):
    """(dc/dx, dc/du) for one or many stages."""
    e = tracked(config, x) - tracked_target(config, r)
    J = tracked_jacobian(config, x)
    dcdx = 2.0 * np.einsum("...d,...dn->...n", e, J)
    return dcdx, 2.0 * config.control_weight * np.asarray(u, dtype=np.float64)


# references -------------------------------------------------------------

@dataclass
class ReferenceTrajectory:
    points: np.ndarray          # (H, ref_dim)
    dt: float
    positions: np.ndarray = field(repr=False, default=None)   # (H, channels)
    velocities: np.ndarray = field(repr=False, default=None)  # (H, channels)

    @property
    def horizon(self) -> int:
        return len(self.points)


def quintic_segment(p0, v0, a0, p1, v1, a1, duration: float, t):
    """Quintic polynomial matching value/velocity/acceleration at both ends.

    Returns (position, velocity) sampled at times ``t`` (array).
    """
    T = duration
    p0, v0, a0, p1, v1, a1 = (np.asarray(z, dtype=np.float64) for z in (p0, v0, a0, p1, v1, a1))
    c0, c1, c2 = p0, v0, a0 / 2
    d = p1 - (c0 + c1 * T + c2 * T**2)
    dv = v1 - (c1 + 2 * c2 * T)
    da = a1 - 2 * c2
    c3 = (10 * d - 4 * dv * T + 0.5 * da * T**2) / T**3
    c4 = (-15 * d + 7 * dv * T - da * T**2) / T**4
    c5 = (6 * d - 3 * dv * T + 0.5 * da * T**2) / T**5
    t = np.asarray(t, dtype=np.float64)[:, None]
    pos = c0 + c1 * t + c2 * t**2 + c3 * t**3 + c4 * t**4 + c5 * t**5
    vel = c1 + 2 * c2 * t + 3 * c3 * t**2 + 4 * c4 * t**3 + 5 * c5 * t**4
    return pos, vel


def reference_from_channels(config: PlantConfig, positions, velocities) -> ReferenceTrajectory:
    positions = np.asarray(positions, dtype=np.float64)
    velocities = np.asarray(velocities, dtype=np.float64)
    pts = np.concatenate([positions, velocities], axis=1) if config.kind == "pendulum" else positions
    return ReferenceTrajectory(pts, config.dt, positions, velocities)


def sample_reference(config: PlantConfig, horizon: int, rng: np.random.Generator,
                     segment_steps: int | None = None) -> ReferenceTrajectory:
    """Concatenated rest-to-rest quintic segments between uniformly sampled waypoints.

    Waypoints have zero velocity and acceleration, so value, first and second
    derivative are continuous across segment joints.
    """
    seg = config.segment_steps if segment_steps is None else int(segment_steps)
    if horizon < 1 or horizon % seg:
        raise ValueError(f"horizon {horizon} is not a multiple of segment length {seg}")
    lo, hi = config.box("ref")
    waypoints = rng.uniform(lo, hi, size=(horizon // seg + 1, len(lo)))
    zero = np.zeros(len(lo))
    t = np.arange(seg) * config.dt
    pos, vel = [], []
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        p, v = quintic_segment(a, zero, zero, b, zero, zero, seg * config.dt, t)
        pos.append(p)
        vel.append(v)
    return reference_from_channels(config, np.concatenate(pos), np.concatenate(vel))
