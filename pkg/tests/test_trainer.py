import dataclasses

import numpy as np
import pytest

from ombrl import plants
from ombrl.checkpoint import CheckpointError
from ombrl.config import ConfigError, config_from_dict, load_config
from ombrl.nn import MlpNet
from ombrl.policy import TrackingPolicy
from ombrl.trainer import LOG_FIELDS, Trainer, TrainingLog, evaluate, reference_suite, run_training


def pendulum(**over):
    d = {"run": {"episodes": 20, "horizon": 100, "trajectories_per_episode": 5, "seed": 0},
         "plant": {"kind": "pendulum", "ref_low": [-0.3], "ref_high": [0.3]},
         "policy": {"hidden": [32, 32], "action_scale": [1.0], "eta": 50, "alpha": 100}}
    for k, v in over.items():
        d.setdefault(k, {}).update(v)
    return config_from_dict(d)


def scalar_columns(log):
    return [[r[k] for k in LOG_FIELDS] for r in log.records]


def test_single_episode_with_zero_rates_changes_nothing():
    cfg = pendulum(run={"episodes": 1}, model={"lr": 0.0}, policy={"eta": 0.0})
    trainer = Trainer(cfg)
    model0, policy0 = trainer.model.params.copy(), trainer.policy.params.copy()
    log = trainer.run()
    assert len(log) == 1 and log[0]["episode"] == 0
    assert np.array_equal(trainer.model.params, model0)
    assert np.array_equal(trainer.policy.params, policy0)


def test_twenty_episode_run_improves():
    g = Trainer(pendulum()).run().column("g_t")
    assert g[-1] < g[0]


def test_runs_are_deterministic():
    a, b = Trainer(pendulum(run={"episodes": 5})).run(), Trainer(pendulum(run={"episodes": 5})).run()
    assert scalar_columns(a) == scalar_columns(b)


def test_buffer_excludes_current_episode_during_rollout():
    trainer = Trainer(pendulum(run={"episodes": 3}))
    for t in range(3):
        assert len(trainer.buffer) == t * 100
        trainer.run_episode()
    assert trainer.buffer.episode_indices == [0, 1, 2]


def test_resume_from_checkpoint_is_bit_exact(tmp_path):
    cfg = pendulum()
    full = Trainer(cfg).run()
    first = Trainer(cfg, tmp_path / "a")
    first.run(until=10, checkpoint_every=10)
    resumed = Trainer.load(tmp_path / "a" / "checkpoints" / "ckpt_000010.bin")
    assert resumed.episode == 10
    log = resumed.run()
    assert scalar_columns(log)[10:] == scalar_columns(full)[10:]


def test_save_load_round_trip_is_identical(tmp_path):
    trainer = Trainer(pendulum(run={"episodes": 3}))
    trainer.run()
    path = trainer.save(tmp_path / "s.bin")
    back = Trainer.load(path)
    assert path.read_bytes() == back.save(tmp_path / "t.bin").read_bytes()
    assert np.array_equal(back.model_opt.first_moment, trainer.model_opt.first_moment)
    assert back.minibatch_rng.bit_generator.state == trainer.minibatch_rng.bit_generator.state


def test_truncated_checkpoint_is_rejected(tmp_path):
    trainer = Trainer(pendulum(run={"episodes": 2}))
    trainer.run()
    blob = trainer.save(tmp_path / "s.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CheckpointError):
        Trainer.load(tmp_path / "cut.bin")
    bad = bytearray(blob)
    bad[len(bad) // 2] ^= 0xFF
    (tmp_path / "flip.bin").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError):
        Trainer.load(tmp_path / "flip.bin")


def test_run_training_resume_extends_episodes(tmp_path):
    cfg = pendulum(run={"episodes": 4})
    run_training(cfg, tmp_path / "r")
    log = run_training(cfg.replace(episodes=6), tmp_path / "r2", resume_from=tmp_path / "r" / "checkpoints" / "final.bin")
    assert [r["episode"] for r in log.records] == list(range(6))


def test_log_files_round_trip(tmp_path):
    Trainer(pendulum(run={"episodes": 3}), tmp_path).run()
    log = TrainingLog.read_jsonl(tmp_path / "log.jsonl")
    assert len(log) == 3 and [r["episode"] for r in log.records] == [0, 1, 2]
    assert (tmp_path / "checkpoints" / "final.bin").exists()


def test_payload_schedule_applies_before_episode():
    cfg = config_from_dict({"run": {"episodes": 4, "horizon": 20, "trajectories_per_episode": 1},
                            "plant": {"kind": "arm"}, "policy": {"hidden": [4], "eta": 0.0},
                            "model": {"hidden": [8], "inner_steps": 2}, "payload": {"schedule": [[2, 2.0]]}})
    payloads = Trainer(cfg).run().column("payload")
    assert payloads.tolist() == [1.0, 1.0, 2.0, 2.0]


def perfect_linear_tracker():
    """Fully actuated linear plant and the policy u = r_{t+1} - A x."""
    A = np.asarray(plants.default_plant("linear").A)
    plant = dataclasses.replace(plants.default_plant("linear"), B=tuple(map(tuple, np.eye(3))),
                                action_low=[-100.0] * 3, action_high=[100.0] * 3)
    W = np.hstack([np.eye(3) - A, np.zeros((3, 3)), np.eye(3)])
    net = MlpNet((9, 3), "identity", np.concatenate([W.ravel(), np.zeros(3)]))
    return plant, TrackingPolicy(net, 3, 3, 3, lookahead=2, prev_actions=0)


def test_evaluate_perfect_tracker_has_zero_error():
    plant, policy = perfect_linear_tracker()
    m = evaluate(policy, plant, reference_suite(plant, 50))
    assert m["mean_error"] <= 1e-9 and m["max_error"] <= 1e-9
    assert set(m["per_reference"]) == {"line", "circle", "spline"}


def test_evaluate_zero_policy_and_rho_identity():
    plant = plants.default_plant("pendulum")
    net = MlpNet((2 + 10 * 2 + 2, 1), "identity")
    zero = TrackingPolicy(net, 2, 2, 1)
    m = evaluate(zero, plant, reference_suite(plant, 100))
    assert m["mean_error"] > 0
    assert m["rho"] == m["max_error"] / m["max_velocity"]


@pytest.mark.parametrize("section, bad", [
    ({"run": {"episodes": 0}}, "episodes"),
    ({"run": {"horizon": 101, "trajectories_per_episode": 10}}, "multiple"),
    ({"policy": {"bogus": 1}}, "bogus"),
    ({"extra": {}}, "extra"),
    ({"payload": {"schedule": [[5, 2.0], [3, 1.0]]}}, "increasing"),
])
def test_config_errors(section, bad):
    d = {"plant": {"kind": "pendulum"}}
    d.update(section)
    with pytest.raises(ConfigError, match=bad):
        config_from_dict(d)


def test_config_file_round_trip(tmp_path):
    cfg = pendulum()
    lines = []
    for name, sec in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in sec.items():
            if v is None or v == [] or v == ():
                continue
            lines.append(f"{k} = {_toml(v)}")
    path = tmp_path / "c.toml"
    path.write_text("\n".join(lines) + "\n")
    assert load_config(path) == cfg
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def _toml(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml(x) for x in v) + "]"
    return repr(v)
