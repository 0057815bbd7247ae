"""The online model-based RL loop, its logs, checkpoints and evaluation."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import plants
from .config import TrainerConfig
from .diagnostics import OracleRefused, drift_proxy, fd_policy_gradient, gradient_error, transitions_matrix
from .model import DynamicsModel, ReplayBuffer, make_model, model_loss, model_update
from .nn import AdamState, MlpNet
from .policy import (TrackingPolicy, assemble_jacobians, closed_loop_gradient, make_policy, policy_update,
                     preconditioner_spectrum, rollout)

log = logging.getLogger(__name__)

LOG_SCHEMA = "ombrl-training-log"
LOG_VERSION = 1
LOG_FIELDS = ("episode", "g_t", "probe_loss", "grad_norm", "lambda_min", "lambda_max", "drift_proxy",
              "delta_t", "delta_cos", "payload", "valid", "clamped_steps", "model_faults",
              "policy_step_norm", "eta", "ref_seed", "noise_seed")
CSV_FIELDS = ("episode", "g_t", "probe_loss", "grad_norm", "lambda_min", "lambda_max", "drift_proxy",
              "delta_t", "payload")

# sub-seed stream tags
_INIT, _REF, _NOISE, _MINIBATCH = 0, 1, 2, 3


def derive_seed(seed: int, *key: int) -> int:
    """Fixed splitting rule: SeedSequence(seed, spawn_key=key) -> 63-bit int."""
    words = np.random.SeedSequence(seed, spawn_key=key).generate_state(2, np.uint32)
    return int((int(words[0]) << 31) ^ int(words[1]))


def _num(v):
    if v is None:
        return None
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = float(v)
    return v if math.isfinite(v) else None


class TrainingLog:
    """Per-episode records plus wall-clock timings kept apart from the scalars."""

    def __init__(self, records=None, wall_times=None):
        self.records: list[dict] = list(records or [])
        self.wall_times: list[float] = list(wall_times or [])

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name) -> np.ndarray:
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.records], dtype=float)

    def header(self) -> dict:
        return {"schema": LOG_SCHEMA, "version": LOG_VERSION, "fields": list(LOG_FIELDS)}

    @staticmethod
    def dumps(record) -> str:
        return json.dumps({k: record.get(k) for k in LOG_FIELDS}, sort_keys=False)

    def write_jsonl(self, path):
        path = Path(path)
        with path.open("w") as fh:
            fh.write(json.dumps(self.header()) + "\n")
            for r in self.records:
                fh.write(self.dumps(r) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrainingLog":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ValueError(f"{path} is empty")
        head = json.loads(lines[0])
        if head.get("schema") != LOG_SCHEMA:
            raise ValueError(f"{path} is not a training log")
        if head.get("version") != LOG_VERSION:
            raise ValueError(f"unsupported log version {head.get('version')}")
        recs = []
        for i, line in enumerate(lines[1:], start=2):
            rec = json.loads(line)
            if not isinstance(rec, dict) or "episode" not in rec:
                raise ValueError(f"{path}:{i}: malformed record")
            recs.append(rec)
        return cls(recs)

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for r in self.records:
                w.writerow(["" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float) else r[k]
                            for k in CSV_FIELDS])


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({k: (None if v == "" else int(v) if k == "episode" else float(v)) for k, v in row.items()})
    return out


def default_policy_scales(plant: plants.PlantConfig):
    lo, hi = plant.box("action")
    if plant.kind == "pendulum":
        return np.array([1.0, 5.0]), np.array([0.2, 2.0]), 0.5 * (hi - lo)
    if plant.kind == "arm":
        return np.array([1.0, 1.0, 5.0, 5.0, 10.0, 10.0]), np.array([0.2, 0.2]), 0.5 * (hi - lo)
    return np.ones(plant.state_dim), np.ones(plant.ref_dim), 0.5 * (hi - lo)


def build_policy(config: TrainerConfig, rng: np.random.Generator) -> TrackingPolicy:
    p = config.policy
    ss, rs, as_ = default_policy_scales(config.plant)
    return make_policy(config.plant, rng, p.hidden, p.activation, p.lookahead, p.prev_actions,
                       np.array(p.state_scale) if p.state_scale else ss,
                       np.array(p.ref_scale) if p.ref_scale else rs,
                       np.array(p.action_scale) if p.action_scale else as_, p.init_scale)


def build_model(config: TrainerConfig, rng: np.random.Generator) -> DynamicsModel:
    m = config.model
    return make_model(config.plant.state_dim, config.plant.action_dim, rng, m.hidden, m.activation,
                      dt=config.plant.dt if m.mode == "delta" else 1.0, mode=m.mode)


class Trainer:
    """Holds the full learner state and advances it one episode at a time."""

    def __init__(self, config: TrainerConfig, out_dir=None):
        self.config = config
        init = np.random.default_rng(derive_seed(config.seed, _INIT))
        self.plant = config.plant
        self.model = build_model(config, init)
        self.policy = build_policy(config, init)
        self.model_opt = AdamState.fresh(self.model.params.size)
        self.buffer = ReplayBuffer(self.plant.state_dim, self.plant.action_dim, config.model.capacity or None)
        self.minibatch_rng = np.random.default_rng(derive_seed(config.seed, _MINIBATCH))
        self.episode = 0
        self.log = TrainingLog()
        self.prev_samples = None
        self.snapshots: dict[int, np.ndarray] = {}
        self.out_dir = Path(out_dir) if out_dir else None
        self._apply_payload()

    # payload schedule ----------------------------------------------------
    def _apply_payload(self):
        for ep, mass in self.config.payload_schedule:
            if ep == self.episode:
                self.plant = plants.set_payload(self.plant, mass)
                log.info("episode %d: payload set to %.3f kg", ep, mass)

    def eta_at(self, t: int) -> float:
        p = self.config.policy
        return p.eta / math.sqrt(t + 1) if p.eta_schedule == "inv_sqrt" else p.eta

    def reference_for(self, t: int):
        seed = derive_seed(self.config.seed, _REF, t)
        rng = np.random.default_rng(seed)
        return seed, plants.sample_reference(self.plant, self.config.horizon, rng, self.config.segment_steps)

    # one iteration of the outer loop -------------------------------------
    def run_episode(self) -> dict:
        cfg, t = self.config, self.episode
        start = time.perf_counter()
        self._apply_payload()
        ref_seed, ref = self.reference_for(t)
        noise_seed = derive_seed(cfg.seed, _NOISE, t)
        noise_rng = np.random.default_rng(noise_seed) if self.plant.noise_std > 0 else None
        rec = rollout(self.policy, self.plant, ref, noise_rng)
        valid = rec.valid and rec.horizon == cfg.horizon

        record = {k: None for k in LOG_FIELDS}
        record.update(episode=t, g_t=rec.episode_cost, valid=valid, clamped_steps=int(rec.clamped.sum()),
                      payload=self.plant.payload if self.plant.kind == "arm" else None,
                      ref_seed=ref_seed, noise_seed=noise_seed, model_faults=0)

        if valid:
            self.buffer.push_episode(rec, t)
            if self.model.stats_count < cfg.model.stats_freeze_after:
                self.model.update_stats(*self.buffer.arrays()[:3])
        if len(self.buffer):
            self.model, self.model_opt, faults = model_update(
                self.model, self.buffer, self.model_opt, cfg.model.lr, cfg.model.batch_size + cfg.model.batch_growth * t,
                cfg.model.inner_steps, self.minibatch_rng)
            record["model_faults"] = faults

        if valid:
            H = rec.horizon
            X, U, Xn = rec.states[:H], rec.actions, rec.states[1:H + 1]
            record["probe_loss"] = model_loss(self.model, X, U, Xn)
            bundle = assemble_jacobians(self.model, self.policy, rec, self.plant, cfg.policy.gamma)
            grad = closed_loop_gradient(bundle)
            record["grad_norm"] = float(np.linalg.norm(grad))
            lmin, lmax = preconditioner_spectrum(bundle.du_dphi, grad, cfg.policy.alpha, cfg.policy.epsilon)
            record["lambda_min"], record["lambda_max"] = lmin, lmax

            every = cfg.diagnostics.oracle_every
            if every and t % every == 0 and self.plant.noise_std == 0:
                try:
                    oracle = fd_policy_gradient(self.plant, self.policy, ref, cfg.diagnostics.fd_step,
                                                cfg.diagnostics.fd_cap)
                    record["delta_t"], record["delta_cos"] = gradient_error(grad, oracle)
                except OracleRefused as exc:
                    log.warning("gradient oracle skipped: %s", exc)

            samples = transitions_matrix(X, U, Xn)
            if cfg.diagnostics.drift and self.prev_samples is not None:
                n = self.model.state_dim
                units = np.concatenate([self.model.in_std, self.model.in_std[:n]])
                record["drift_proxy"] = drift_proxy(self.prev_samples, samples, scale=units)
            self.prev_samples = samples

            eta = self.eta_at(t)
            record["eta"] = eta
            if eta > 0:
                self.policy, step, ok = policy_update(self.policy, grad, bundle.du_dphi, eta, cfg.policy.alpha,
                                                      cfg.policy.epsilon, cfg.policy.param_bound or None)
                record["policy_step_norm"] = float(np.linalg.norm(step))
            else:
                record["policy_step_norm"] = 0.0
        else:
            log.warning("episode %d faulted; policy update skipped", t)

        snap = cfg.diagnostics.snapshot_every
        if snap and t % snap == 0 and valid:
            self.snapshots[t] = self.model.params.copy()

        record = {k: _num(v) for k, v in record.items()}
        self.log.records.append(record)
        self.log.wall_times.append(time.perf_counter() - start)
        self.episode += 1
        return record

    def run(self, until: int | None = None, checkpoint_every: int | None = None) -> TrainingLog:
        """Run episodes until ``until`` (default: config.episodes)."""
        stop = self.config.episodes if until is None else until
        every = self.config.checkpoint_every if checkpoint_every is None else checkpoint_every
        log_fh = time_fh = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.log.write_jsonl(self.out_dir / "log.jsonl")
            log_fh = (self.out_dir / "log.jsonl").open("a")
            time_fh = (self.out_dir / "timing.jsonl").open("w")
        try:
            while self.episode < stop:
                rec = self.run_episode()
                if log_fh:
                    log_fh.write(TrainingLog.dumps(rec) + "\n")
                    log_fh.flush()
                    time_fh.write(json.dumps({"episode": rec["episode"], "wall_time": self.log.wall_times[-1]}) + "\n")
                if self.out_dir and every and self.episode % every == 0:
                    self.save(self.out_dir / "checkpoints" / f"ckpt_{self.episode:06d}.bin")
        finally:
            if log_fh:
                log_fh.close()
                time_fh.close()
        if self.out_dir:
            self.save(self.out_dir / "checkpoints" / "final.bin")
        return self.log

    # checkpointing -------------------------------------------------------
    def state_sections(self) -> dict:
        buf = self.buffer.state_dict()
        eps = buf["episodes"]
        meta = {
            "episode": self.episode,
            "config": self.config.to_dict(),
            "plant": self.plant.to_dict(),
            "model": {"layer_dims": list(self.model.net.layer_dims), "activation": self.model.net.activation,
                      "state_dim": self.model.state_dim, "dt": self.model.dt, "mode": self.model.mode,
                      "stats_count": self.model.stats_count, "stats_frozen": self.model.stats_frozen},
            "policy": {"layer_dims": list(self.policy.net.layer_dims), "activation": self.policy.net.activation,
                       "lookahead": self.policy.lookahead, "prev_actions": self.policy.prev_actions},
            "adam": {"step_count": self.model_opt.step_count, "beta1": self.model_opt.beta1,
                     "beta2": self.model_opt.beta2, "eps_adam": self.model_opt.eps_adam},
            "buffer": {"capacity": buf["capacity"], "episode_ids": [e[0] for e in eps]},
            "rng": {"minibatch": self.minibatch_rng.bit_generator.state},
            "log": self.log.records,
        }
        p = self.policy
        S = {
            "meta": meta,
            "model.params": self.model.params,
            "model.in_mean": self.model.in_mean, "model.in_std": self.model.in_std,
            "model.out_mean": self.model.out_mean, "model.out_std": self.model.out_std,
            "adam.first_moment": self.model_opt.first_moment,
            "adam.second_moment": self.model_opt.second_moment,
            "policy.params": p.params, "policy.state_scale": p.state_scale, "policy.ref_scale": p.ref_scale,
            "policy.action_scale": p.action_scale, "policy.action_low": p.action_low,
            "policy.action_high": p.action_high, "policy.state_to_ref": p.state_to_ref,
            "buffer.lengths": np.array([len(e[1]) for e in eps], dtype=np.int64),
            "buffer.X": np.concatenate([e[1] for e in eps]) if eps else np.zeros((0, buf["state_dim"])),
            "buffer.U": np.concatenate([e[2] for e in eps]) if eps else np.zeros((0, buf["action_dim"])),
            "buffer.X_next": np.concatenate([e[3] for e in eps]) if eps else np.zeros((0, buf["state_dim"])),
        }
        if self.prev_samples is not None:
            S["drift.prev_samples"] = self.prev_samples
        return S

    def save(self, path) -> Path:
        return ckpt.save(self.state_sections(), path)

    @classmethod
    def from_sections(cls, S: dict, out_dir=None) -> "Trainer":
        from .config import config_from_dict
        try:
            meta = S["meta"]
            cfg = config_from_dict(meta["config"])
            self = cls.__new__(cls)
            self.config = cfg
            self.plant = plants.PlantConfig.from_dict(meta["plant"])
            mm = meta["model"]
            net = MlpNet(tuple(mm["layer_dims"]), mm["activation"], S["model.params"])
            self.model = DynamicsModel(net, mm["state_dim"], mm["dt"], mm["mode"], S["model.in_mean"],
                                       S["model.in_std"], S["model.out_mean"], S["model.out_std"],
                                       mm["stats_count"], mm["stats_frozen"])
            ad = meta["adam"]
            self.model_opt = AdamState(S["adam.first_moment"], S["adam.second_moment"], ad["step_count"],
                                       ad["beta1"], ad["beta2"], ad["eps_adam"])
            pm = meta["policy"]
            pnet = MlpNet(tuple(pm["layer_dims"]), pm["activation"], S["policy.params"])
            self.policy = TrackingPolicy(pnet, self.plant.state_dim, self.plant.ref_dim, self.plant.action_dim,
                                         pm["lookahead"], pm["prev_actions"], S["policy.state_scale"],
                                         S["policy.ref_scale"], S["policy.action_scale"], S["policy.action_low"],
                                         S["policy.action_high"], S["policy.state_to_ref"])
            buf = ReplayBuffer(self.plant.state_dim, self.plant.action_dim, meta["buffer"]["capacity"] or None)
            ends = np.cumsum(S["buffer.lengths"])
            starts = ends - S["buffer.lengths"]
            buf._episodes = [(int(i), S["buffer.X"][a:b], S["buffer.U"][a:b], S["buffer.X_next"][a:b])
                             for i, a, b in zip(meta["buffer"]["episode_ids"], starts, ends)]
            self.buffer = buf
            rng = np.random.default_rng()
            rng.bit_generator.state = meta["rng"]["minibatch"]
            self.minibatch_rng = rng
            self.episode = int(meta["episode"])
            self.log = TrainingLog(meta["log"], [float("nan")] * len(meta["log"]))
            self.prev_samples = S.get("drift.prev_samples")
            self.snapshots = {}
            self.out_dir = Path(out_dir) if out_dir else None
        except (KeyError, TypeError, ValueError) as exc:
            raise ckpt.CheckpointError(f"checkpoint content is incomplete: {exc}") from None
        return self

    @classmethod
    def load(cls, path, out_dir=None) -> "Trainer":
        return cls.from_sections(ckpt.load(path), out_dir)


def run_training(config: TrainerConfig, out_dir=None, resume_from=None) -> TrainingLog:
    """Run the outer loop to ``config.episodes``; optionally resume from a checkpoint."""
    if resume_from is not None:
        trainer = Trainer.load(resume_from, out_dir)
        trainer.config = dataclasses.replace(trainer.config, episodes=config.episodes)
    else:
        trainer = Trainer(config, out_dir)
    return trainer.run()


# evaluation -------------------------------------------------------------

def reference_suite(plant: plants.PlantConfig, horizon: int, seed: int = 12345):
    """Fixed evaluation references: a line, a circle and a spline."""
    lo, hi = plant.box("ref")
    c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
    T = horizon * plant.dt
    t = np.arange(horizon) * plant.dt
    a, b = c - 0.6 * r, c + 0.6 * r
    line_p = a + (b - a) * (t / T)[:, None]
    line_v = np.broadcast_to((b - a) / T, line_p.shape)
    w = 2 * np.pi / T
    circ_p = np.tile(c, (horizon, 1)).astype(float)
    circ_v = np.zeros_like(circ_p)
    circ_p[:, 0] = c[0] + 0.6 * r[0] * np.cos(w * t) - 0.6 * r[0]
    circ_v[:, 0] = -0.6 * r[0] * w * np.sin(w * t)
    if len(c) > 1:
        circ_p[:, 1] = c[1] + 0.6 * r[1] * np.sin(w * t)
        circ_v[:, 1] = 0.6 * r[1] * w * np.cos(w * t)
    seg = plant.segment_steps if horizon % plant.segment_steps == 0 else horizon
    spline = plants.sample_reference(plant, horizon, np.random.default_rng(seed), seg)
    return {"line": plants.reference_from_channels(plant, line_p, line_v),
            "circle": plants.reference_from_channels(plant, circ_p, circ_v),
            "spline": spline}


def _positions(plant, x):
    if plant.kind == "arm":
        return plants.forward_kinematics(plant, np.asarray(x)[..., :2])
    return np.asarray(x)[..., :plant.ref_channels]


def _target_positions(plant, r):
    if plant.kind == "arm":
        return plants.forward_kinematics(plant, r)
    return np.asarray(r)[..., :plant.ref_channels]


def evaluate(policy, plant: plants.PlantConfig, suite) -> dict:
    """Tracking metrics over a reference suite; no learning happens here."""
    if isinstance(suite, dict):
        suite = list(suite.items())
    per, errs, vels, costs = {}, [], [], []
    for name, ref in suite:
        rec = rollout(policy, plant, ref)
        H = rec.horizon
        e = np.linalg.norm(_positions(plant, rec.states[:H]) - _target_positions(plant, ref.points[:H]), axis=-1)
        tgt = _target_positions(plant, ref.points)
        v = np.linalg.norm(np.diff(tgt, axis=0), axis=-1) / plant.dt if len(tgt) > 1 else np.zeros(1)
        per[name] = {"mean_error": float(e.mean()), "max_error": float(e.max()),
                     "episode_cost": rec.episode_cost, "valid": rec.valid}
        errs.append(e)
        vels.append(v)
        costs.append(rec.episode_cost)
    e, v = np.concatenate(errs), np.concatenate(vels)
    vmax = float(v.max())
    return {"mean_error": float(e.mean()), "max_error": float(e.max()), "mean_velocity": float(v.mean()),
            "max_velocity": vmax, "rho": float(e.max() / vmax) if vmax > 0 else float("inf"),
            "mean_cost": float(np.mean(costs)), "per_reference": per}
