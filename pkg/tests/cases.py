"""Shared problem instances for the gradient tests."""
import numpy as np

from ombrl import plants
from ombrl.nn import MlpNet, n_params
from ombrl.policy import JacobianBundle, TrackingPolicy, make_policy


def linear_oracle_case(seed, H=25, hidden=(8, 8)):
    """Linear plant (n=3, m=2), a small tanh policy and one sampled reference."""
    plant = plants.default_plant("linear")
    rng = np.random.default_rng(seed)
    policy = make_policy(plant, rng, hidden=hidden, action_scale=np.ones(2))
    ref = plants.sample_reference(plant, H, rng, segment_steps=5)
    return plant, policy, ref


def linear_feedback_policy(plant, K):
    """u = K x exactly: identity net, no lookahead influence, no previous actions."""
    n, m = plant.state_dim, plant.action_dim
    p = plant.ref_dim
    dims = (n + p, m)
    W = np.zeros((m, n + p))
    W[:, :n] = K
    net = MlpNet(dims, "identity", np.concatenate([W.ravel(), np.zeros(m)]))
    return TrackingPolicy(net, n, p, m, lookahead=1, prev_actions=0)


def random_bundle(rng, H, ns, m, n_phi, gamma=1.0, with_dc=True):
    return JacobianBundle(
        A_blocks=rng.normal(scale=0.5, size=(H - 1, ns, ns)),
        B_blocks=rng.normal(size=(H - 1, ns, m)),
        K_blocks=rng.normal(scale=0.5, size=(H, m, ns)),
        dg_dx=rng.normal(size=H * ns),
        du_dphi=rng.normal(size=(H * m, n_phi)),
        dc_du=rng.normal(size=H * m) if with_dc else None,
        gamma_discount=gamma)


assert n_params((3 + 30 + 4, 8, 8, 2)) <= 500
