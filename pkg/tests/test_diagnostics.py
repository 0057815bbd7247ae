import dataclasses

import numpy as np
import pytest

from ombrl import plants
from ombrl.config import config_from_dict
from ombrl.diagnostics import (OracleRefused, RegretReport, build_report, drift_proxy, fd_policy_gradient,
                               gradient_error, loglog_slope, model_regret, policy_regret)
from ombrl.model import ReplayBuffer, make_model, model_update
from ombrl.nn import AdamState
from ombrl.policy import make_policy
from ombrl.trainer import Trainer

from cases import linear_oracle_case


def small_pendulum(**over):
    # converges in about 20 episodes (cost ratio ~0.002 at episode 30)
    d = {"run": {"episodes": 30, "horizon": 100, "trajectories_per_episode": 5, "seed": 0},
         "plant": {"kind": "pendulum", "ref_low": [-0.3], "ref_high": [0.3]},
         "policy": {"hidden": [32, 32], "action_scale": [1.0], "eta": 50, "alpha": 100}}
    for k, v in over.items():
        d.setdefault(k, {}).update(v)
    return config_from_dict(d)


def test_fd_gradient_zero_on_flat_landscape():
    plant = dataclasses.replace(plants.default_plant("linear"), B=((0.0, 0.0),) * 3)
    policy = make_policy(plant, np.random.default_rng(0), hidden=(4,), action_scale=np.ones(2))
    ref = plants.sample_reference(plant, 10, np.random.default_rng(1), 5)
    assert np.array_equal(fd_policy_gradient(plant, policy, ref), np.zeros(policy.n_params))


def test_fd_gradient_step_halving_is_second_order():
    plant = plants.default_plant("pendulum")
    policy = make_policy(plant, np.random.default_rng(3), hidden=(4,), action_scale=np.ones(1))
    ref = plants.sample_reference(plant, 20, np.random.default_rng(4), 10)
    g1, g2, g4 = (fd_policy_gradient(plant, policy, ref, h) for h in (4e-2, 2e-2, 1e-2))
    best = (4 * g4 - g2) / 3             # Richardson extrapolation from the two finest steps
    ratio = np.linalg.norm(g1 - best) / np.linalg.norm(g2 - best)
    assert 3.0 < ratio < 5.0


def test_fd_gradient_refuses_large_policy_and_ignores_noise():
    plant, policy, ref = linear_oracle_case(0)
    with pytest.raises(OracleRefused):
        fd_policy_gradient(plant, policy, ref, cap=10)
    noisy = dataclasses.replace(plant, noise_std=0.1)
    np.testing.assert_array_equal(fd_policy_gradient(noisy, policy, ref), fd_policy_gradient(plant, policy, ref))


def test_fd_gradient_does_not_touch_policy():
    plant, policy, ref = linear_oracle_case(1)
    before = policy.params.copy()
    fd_policy_gradient(plant, policy, ref)
    assert np.array_equal(policy.params, before)


def test_gradient_error_examples():
    g = np.array([3.0, -4.0])
    assert gradient_error(g, g) == (0.0, 1.0)
    err, cos = gradient_error(-g, g)
    assert err == pytest.approx(10.0) and cos == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        gradient_error(g, np.zeros(3))


def test_drift_proxy_properties():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(150, 3)) + 0.3
    assert drift_proxy(a, a) == 0.0
    assert drift_proxy(a, b) == pytest.approx(drift_proxy(b, a), rel=1e-12)
    assert drift_proxy(a, b) > 0
    with pytest.raises(ValueError):
        drift_proxy(a, a[:0])


def test_drift_proxy_grows_with_mean_shift():
    rng = np.random.default_rng(1)
    base = rng.normal(size=(300, 2))
    other = rng.normal(size=(300, 2))
    vals = [drift_proxy(base, other + d, scale=np.ones(2)) for d in (0.0, 0.5, 1.0, 2.0)]
    assert vals == sorted(vals) and vals[0] < vals[1]


def test_drift_decreases_under_strong_regularization():
    cfg = config_from_dict({
        "run": {"episodes": 40, "horizon": 100, "seed": 0},
        "plant": {"kind": "pendulum", "ref_low": [-0.001], "ref_high": [0.001]},
        "policy": {"hidden": [16, 16], "action_scale": [1.0], "eta": 10, "alpha": 1, "epsilon": 1000},
        "model": {"inner_steps": 16}})
    trainer = Trainer(cfg)
    trainer.run()
    d = trainer.log.column("drift_proxy")
    assert np.nanmedian(d[-10:]) < np.nanmedian(d[1:11])


def test_loglog_slope_recovers_power_law():
    T = np.arange(200)
    slope, used = loglog_slope(T, 3.0 * (T + 1.0) ** 0.5, start=20)
    assert slope == pytest.approx(0.5, abs=1e-12) and used == 181


def test_report_cumulative_is_running_sum():
    inst = np.random.default_rng(0).normal(size=50)
    rep = build_report(np.arange(50), inst, "test", burn_in=5)
    assert isinstance(rep, RegretReport)
    assert np.array_equal(rep.cumulative, np.cumsum(inst))
    d = rep.to_dict()
    assert d["cumulative"] == rep.cumulative.tolist() and d["comparator"] == "test"


def test_policy_regret_self_comparison_and_frozen_baseline():
    cfg = small_pendulum()
    frozen = Trainer(cfg.replace(policy=dataclasses.replace(cfg.policy, eta=0.0)))
    frozen.run()
    same = policy_regret(frozen.log.records, frozen.policy, cfg, burn_in=5)
    assert np.all(np.abs(same.instantaneous) <= 1e-9)

    trainer = Trainer(cfg)
    trainer.run()
    rep0 = policy_regret(frozen.log.records, trainer.policy, cfg, burn_in=5)
    assert np.array_equal(rep0.cumulative, np.cumsum(rep0.instantaneous))
    assert np.all(rep0.instantaneous > 0)
    assert rep0.slope == pytest.approx(1.0, abs=0.1)


def test_policy_regret_needs_seeds():
    cfg = small_pendulum(run={"episodes": 2})
    trainer = Trainer(cfg)
    trainer.run()
    recs = [dict(r, ref_seed=None) for r in trainer.log.records]
    with pytest.raises(ValueError):
        policy_regret(recs, trainer.policy, cfg)


def linear_model_buffer(n_eps=3):
    plant = plants.default_plant("linear")
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(3, 2)
    for _ in range(n_eps):
        X, U = rng.uniform(-1, 1, (50, 3)), rng.uniform(-1, 1, (50, 2))
        buf.push(X, U, plants.step(plant, X, U))
    model = make_model(3, 2, np.random.default_rng(1), hidden=(8, 8), activation="identity", mode="absolute")
    model.update_stats(*buf.arrays()[:3])
    return model, buf


def test_model_regret_zero_for_converged_linear_model():
    model, buf = linear_model_buffer()
    model, _, _ = model_update(model, buf, AdamState.fresh(model.params.size), 1e-2, 128, 2000,
                               np.random.default_rng(2))
    rep = model_regret({0: model, 1: model, 2: model.params}, buf, model, retrain_budget=50)
    assert np.all(np.abs(rep.instantaneous) <= 1e-6)


def test_model_regret_comparator_never_worse_and_readonly():
    model, buf = linear_model_buffer()
    before = model.params.copy()
    rep = model_regret({0: model, 2: model, 7: model}, buf, model, retrain_budget=100)
    assert list(rep.episodes) == [0, 2]
    assert any("not in buffer" in n for n in rep.notes)
    assert np.all(rep.instantaneous >= -1e-8)
    assert np.array_equal(model.params, before)


def test_model_regret_grows_linearly_for_frozen_model():
    cfg = small_pendulum(run={"episodes": 25}, model={"lr": 0.0}, diagnostics={"snapshot_every": 1})
    trainer = Trainer(cfg)
    trainer.run()
    rep = model_regret(trainer.snapshots, trainer.buffer, trainer.model, retrain_budget=200, lr=1e-2,
                       burn_in=5)
    assert np.all(rep.instantaneous > 0)
    assert rep.slope > 0.8           # at least linear: the frozen model never catches up
