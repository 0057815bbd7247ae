"""Measured counterparts of the regret analysis: gradient error, regret, drift.

Nothing here mutates the objects it inspects; oracle runs build their own
random generators.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import plants
from .model import DynamicsModel, model_loss
from .nn import AdamState
from .policy import TrackingPolicy, episode_costs_many, preconditioner_spectrum  # noqa: F401


class OracleRefused(ValueError):
    pass


def fd_policy_gradient(plant: plants.PlantConfig, policy: TrackingPolicy,
                       reference: plants.ReferenceTrajectory, h_fd: float = 1e-6,
                       cap: int = 2000, chunk: int = 4096) -> np.ndarray:
    """Central finite differences of the true episode cost in every policy parameter."""
    n = policy.n_params
    if n > cap:
        raise OracleRefused(f"policy has {n} parameters, finite-difference cap is {cap}")
    if plant.noise_std > 0:
        plant = dataclasses.replace(plant, noise_std=0.0)
    phi = policy.params
    grad = np.empty(n)
    per = max(1, chunk // 2)
    for start in range(0, n, per):
        idx = np.arange(start, min(n, start + per))
        E = np.zeros((len(idx), n))
        E[np.arange(len(idx)), idx] = h_fd
        costs = episode_costs_many(policy, np.vstack([phi + E, phi - E]), plant, reference)
        grad[idx] = (costs[:len(idx)] - costs[len(idx):]) / (2 * h_fd)
    return grad


def gradient_error(est, oracle):
    """(||est - oracle||, cosine similarity)."""
    est = np.asarray(est, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    if est.shape != oracle.shape:
        raise ValueError("gradient vectors differ in length")
    err = float(np.linalg.norm(est - oracle))
    denom = np.linalg.norm(est) * np.linalg.norm(oracle)
    cos = float(est @ oracle / denom) if denom > 0 else float("nan")
    return err, cos


def drift_proxy(a, b, max_points: int = 400, scale=None) -> float:
    """Energy distance between two (x, u, x+) sample sets after per-dimension scaling.

    A sample-based stand-in for the total-variation drift between episodes;
    it is symmetric, non-negative and zero for identical sets. ``scale`` fixes
    the per-dimension units; by default the pooled standard deviation of the
    two sets is used, which makes the value scale-free but also inflates tiny
    differences between nearly constant sets.
    """
    A = np.asarray(a, dtype=np.float64)
    B = np.asarray(b, dtype=np.float64)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("drift proxy needs non-empty sample sets")
    A = A[np.linspace(0, len(A) - 1, min(len(A), max_points)).astype(int)]
    B = B[np.linspace(0, len(B) - 1, min(len(B), max_points)).astype(int)]
    if scale is None:
        scale = np.vstack([A, B]).std(0)
    sd = np.asarray(scale, dtype=np.float64)
    sd = np.where(sd > 1e-12, sd, 1.0)
    A, B = A / sd, B / sd
    val = 2 * cdist(A, B).mean() - cdist(A, A).mean() - cdist(B, B).mean()
    return float(max(val, 0.0))


def transitions_matrix(X, U, Xn) -> np.ndarray:
    return np.concatenate([X, U, Xn], axis=1)


@dataclass
class RegretReport:
    instantaneous: np.ndarray
    cumulative: np.ndarray
    episodes: np.ndarray
    slope: float
    slope_window: tuple
    comparator: str
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"episodes": self.episodes.tolist(), "instantaneous": self.instantaneous.tolist(),
                "cumulative": self.cumulative.tolist(), "slope": self.slope,
                "slope_window": list(self.slope_window), "comparator": self.comparator,
                "notes": list(self.notes)}


def loglog_slope(episodes, cumulative, start: int, stop: int | None = None):
    """Least-squares slope of log R_T against log T over start <= T <= stop.

    T counts episodes from 1. Non-positive cumulative values are dropped.
    """
    T = np.asarray(episodes, dtype=np.float64) + 1.0
    R = np.asarray(cumulative, dtype=np.float64)
    sel = (T >= start) & (R > 0)
    if stop is not None:
        sel &= T <= stop
    if sel.sum() < 2:
        return float("nan"), int(sel.sum())
    slope = np.polyfit(np.log(T[sel]), np.log(R[sel]), 1)[0]
    return float(slope), int(sel.sum())


def build_report(episodes, inst, comparator: str, burn_in: int, notes=None) -> RegretReport:
    inst = np.asarray(inst, dtype=np.float64)
    cum = np.cumsum(inst)
    episodes = np.asarray(episodes)
    slope, used = loglog_slope(episodes, cum, burn_in)
    notes = list(notes or [])
    if used < len(inst) - burn_in + 1:
        notes.append(f"{len(inst) - used} points excluded from slope (burn-in or non-positive R_T)")
    return RegretReport(inst, cum, episodes, slope, (burn_in, int(episodes[-1]) + 1 if len(episodes) else 0),
                        comparator, notes)


def replay_reference(config, record) -> plants.ReferenceTrajectory:
    """Rebuild the reference of a logged episode from its stored seed."""
    if record.get("ref_seed") is None:
        raise ValueError(f"episode {record.get('episode')} has no stored reference seed")
    rng = np.random.default_rng(int(record["ref_seed"]))
    return plants.sample_reference(config.plant, config.horizon, rng, config.segment_steps)


def comparator_costs(config, records, comparator: TrackingPolicy) -> np.ndarray:
    """Episode cost of a fixed policy on each logged episode's reference and payload."""
    from .policy import rollout
    out = []
    for rec in records:
        plant = config.plant
        if plant.kind == "arm" and rec.get("payload") is not None:
            plant = plants.set_payload(plant, rec["payload"])
        ref = replay_reference(config, rec)
        noise = np.random.default_rng(int(rec["noise_seed"])) if plant.noise_std > 0 else None
        out.append(rollout(comparator, plant, ref, noise).episode_cost)
    return np.array(out)


def policy_regret(records, comparator: TrackingPolicy, config, burn_in: int = 20,
                  comparator_label: str = "frozen comparator policy") -> RegretReport:
    """Per-episode g_t(phi_t) - g(phi*) on the same replayed reference."""
    recs = [r for r in records if r.get("valid", True)]
    g = np.array([r["g_t"] for r in recs])
    base = comparator_costs(config, recs, comparator)
    notes = ["comparator is an approximate minimizer, so measured regret is a lower bound"]
    return build_report([r["episode"] for r in recs], g - base, comparator_label, burn_in, notes)


def fit_comparator_model(model: DynamicsModel, X, U, Xn, steps: int, lr: float,
                         rng: np.random.Generator, fresh_init=None):
    """Approximate argmin of the one-step loss on a single episode's data.

    Trains two candidates with full-batch Adam, one warm-started from
    ``model`` and one from ``fresh_init`` (if given), keeping the best
    iterate seen, including the starting point.
    """
    from .model import model_loss_grad
    from .nn import adam_update
    best_loss = model_loss(model, X, U, Xn)
    best = model
    starts = [model] + ([model.with_params(fresh_init)] if fresh_init is not None else [])
    for start in starts:
        cur, st = start, AdamState.fresh(start.params.size)
        for k in range(steps):
            loss = model_loss(cur, X, U, Xn)
            if loss < best_loss:
                best_loss, best = loss, cur
            _, g = model_loss_grad(cur, X, U, Xn)
            params, st = adam_update(cur.params, g, st, lr)
            cur = cur.with_params(params)
        loss = model_loss(cur, X, U, Xn)
        if loss < best_loss:
            best_loss, best = loss, cur
    return best, best_loss


def model_regret(snapshots: dict, buffer, template: DynamicsModel, retrain_budget: int = 500,
                 lr: float = 1e-3, seed: int = 0, burn_in: int = 1, min_points: int = 2) -> RegretReport:
    """Online model loss minus a per-episode comparator loss on that episode's data.

    ``snapshots`` maps episode index to the model used for that episode's
    gradient (a DynamicsModel or a parameter vector for ``template``).
    """
    eps, inst, notes = [], [], []
    rng = np.random.default_rng(seed)
    for ep in sorted(snapshots):
        snap = snapshots[ep]
        model = snap if isinstance(snap, DynamicsModel) else template.with_params(snap)
        try:
            X, U, Xn = buffer.episode(ep)
        except KeyError:
            notes.append(f"episode {ep} skipped: not in buffer")
            continue
        if len(X) < min_points:
            notes.append(f"episode {ep} skipped: {len(X)} transitions")
            continue
        online = model_loss(model, X, U, Xn)
        s = 1.0 / np.sqrt(model.net.input_dim)
        fresh = rng.uniform(-s, s, size=model.params.size)
        _, best = fit_comparator_model(model, X, U, Xn, retrain_budget, lr, rng, fresh)
        eps.append(ep)
        inst.append(online - best)
    notes.append("comparator is a retrained network, an approximation of the per-episode argmin")
    return build_report(eps, inst, "per-episode retrained model", burn_in, notes)


def evaluation_references(config, n: int = 5, seed: int = 777):
    """Held-out references from the training distribution, for ranking policies."""
    rng = np.random.default_rng(seed)
    return [plants.sample_reference(config.plant, config.horizon, rng, config.segment_steps) for _ in range(n)]


def evaluation_cost(policy: TrackingPolicy, plant: plants.PlantConfig, refs) -> float:
    from .policy import rollout
    return float(np.mean([rollout(policy, plant, r).episode_cost for r in refs]))


def train_comparator(trainer, factor: int = 5, eval_every: int = 10, n_eval: int = 5):
    """Approximate the fixed best policy by training on for ``factor`` x the nominal budget.

    Works on a copy of ``trainer``. Every ``eval_every`` episodes the current
    policy is scored on held-out references; the best one seen is returned
    with a small info dict.
    """
    from .trainer import Trainer
    work = Trainer.from_sections(trainer.state_sections())
    extra = factor * work.config.episodes
    stop = work.episode + extra
    work.config = dataclasses.replace(work.config, episodes=stop)
    refs = evaluation_references(work.config, n_eval)
    best_cost = evaluation_cost(work.policy, work.plant, refs)
    best, best_ep = work.policy, work.episode
    while work.episode < stop:
        work.run(until=min(stop, work.episode + eval_every), checkpoint_every=0)
        c = evaluation_cost(work.policy, work.plant, refs)
        if c < best_cost:
            best_cost, best, best_ep = c, work.policy, work.episode
    return best, {"extra_episodes": extra, "best_episode": best_ep, "best_eval_cost": best_cost,
                  "n_eval_references": n_eval}
