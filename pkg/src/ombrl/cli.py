"""Command-line entry point.

Exit codes:
  0  success
  2  usage, config, missing or corrupt input
  3  training run faulted (numeric or simulation fault)
  4  gradient check failed (oracle relative error above tolerance)

Flag values override config-file values. ``--seed`` is the single source of
randomness; sub-seeds are split from it deterministically.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, load_config

EXIT_OK, EXIT_USAGE, EXIT_FAULT, EXIT_GRADCHECK = 0, 2, 3, 4
GRAD_TOL = 1e-5


class UsageError(Exception):
    pass


def _load(args):
    cfg = load_config(args.config)
    over = {}
    if getattr(args, "episodes", None) is not None:
        over["episodes"] = args.episodes
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "horizon", None) is not None:
        over["horizon"] = args.horizon
    if over:
        try:
            cfg = cfg.replace(**over)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    from .trainer import Trainer
    cfg = _load(args)
    out = Path(args.out)
    if args.resume:
        trainer = Trainer.load(args.resume, out)
        trainer.config = trainer.config.replace(episodes=cfg.episodes)
    else:
        trainer = Trainer(cfg, out)
    t0 = time.perf_counter()
    trainer.run()
    recs = trainer.log.records
    faulted = [r["episode"] for r in recs if not r["valid"]]
    summary = {"episodes": len(recs), "final_g_t": recs[-1]["g_t"] if recs else None,
               "final_probe_loss": recs[-1]["probe_loss"] if recs else None,
               "faulted_episodes": faulted, "wall_time": time.perf_counter() - t0}
    _write_json(out / "summary.json", summary)
    print(f"trained {len(recs)} episodes; final g_t={summary['final_g_t']}")
    return EXIT_FAULT if faulted else EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import Trainer, evaluate, reference_suite
    cfg = _load(args)
    trainer = Trainer.load(args.checkpoint) if args.checkpoint else Trainer(cfg)
    plant = trainer.plant
    metrics = evaluate(trainer.policy, plant, reference_suite(plant, cfg.horizon))
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def gradient_check(cfg, trainer=None, corrupt_k: bool = False) -> dict:
    """Compare the closed-loop gradient with finite differences on one rollout."""
    from . import plants
    from .diagnostics import fd_policy_gradient, gradient_error
    from .policy import assemble_jacobians, closed_loop_gradient, rollout, zero_feedback
    from .trainer import Trainer
    if cfg.horizon < 2:
        raise UsageError("grad-check needs a horizon of at least 2 steps")
    if cfg.plant.noise_std > 0:
        raise UsageError("grad-check requires a noise-free plant (noise_std = 0)")
    trainer = trainer or Trainer(cfg)
    seed, ref = trainer.reference_for(trainer.episode)
    rec = rollout(trainer.policy, trainer.plant, ref)
    oracle = fd_policy_gradient(trainer.plant, trainer.policy, ref, cfg.diagnostics.fd_step, cfg.diagnostics.fd_cap)
    out = {}
    for mode, source in (("true_dynamics", trainer.plant), ("learned_model", trainer.model)):
        bundle = assemble_jacobians(source, trainer.policy, rec, trainer.plant)
        if corrupt_k:
            bundle = zero_feedback(bundle)
        est = closed_loop_gradient(bundle)
        err, cos = gradient_error(est, oracle)
        on = float(np.linalg.norm(oracle))
        out[mode] = {"delta_norm": err, "relative_error": err / on if on > 0 else float("nan"), "cosine": cos}
    out["passed"] = bool(out["true_dynamics"]["relative_error"] <= GRAD_TOL)
    out["n_params"] = trainer.policy.n_params
    return out


def cmd_grad_check(args) -> int:
    from .trainer import Trainer
    cfg = _load(args)
    trainer = Trainer.load(args.checkpoint) if args.checkpoint else None
    res = gradient_check(cfg, trainer, corrupt_k=args.corrupt_k)
    for mode in ("true_dynamics", "learned_model"):
        r = res[mode]
        print(f"{mode:14s} |delta|={r['delta_norm']:.3e} rel={r['relative_error']:.3e} cos={r['cosine']:.6f}")
    print("PASS" if res["passed"] else "FAIL", f"(oracle mode tolerance {GRAD_TOL:g})")
    if args.out:
        _write_json(Path(args.out), res)
    return EXIT_OK if res["passed"] else EXIT_GRADCHECK


def cmd_regret(args) -> int:
    from .diagnostics import policy_regret
    from .trainer import Trainer, TrainingLog
    from .diagnostics import train_comparator
    cfg = _load(args)
    run = Path(args.run_dir)
    log = TrainingLog.read_jsonl(run / "log.jsonl")
    final = Trainer.load(run / "checkpoints" / "final.bin")
    comp, info = train_comparator(final, factor=args.factor, eval_every=args.eval_every)
    report = policy_regret(log.records, comp, final.config, burn_in=args.burn_in)
    out = report.to_dict()
    out["comparator_info"] = info
    _write_json(Path(args.out) if args.out else run / "regret.json", out)
    print(f"policy regret slope over episodes >= {args.burn_in}: {report.slope:.3f}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .trainer import TrainingLog
    src = Path(args.log)
    try:
        log = TrainingLog.read_jsonl(src)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read log {src}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    dst = Path(args.out) if args.out else src.with_suffix(".csv")
    log.write_csv(dst)
    print(f"wrote {len(log)} rows to {dst}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ombrl", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", required=True, help="TOML config file")
        sp.add_argument("--seed", type=int, help="overrides run.seed")
        sp.add_argument("--out", required=out_required, help="output path")

    t = sub.add_parser("train", help="run online model-based training")
    common(t, out_required=True)
    t.add_argument("--episodes", type=int, help="overrides run.episodes")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a policy on the fixed reference suite")
    common(e)
    e.add_argument("--checkpoint", help="trained checkpoint (default: freshly initialized policy)")
    e.add_argument("--horizon", type=int)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grad-check", help="compare closed-loop gradients with finite differences")
    common(g)
    g.add_argument("--checkpoint")
    g.add_argument("--horizon", type=int)
    g.add_argument("--corrupt-k", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_grad_check)

    r = sub.add_parser("regret", help="policy regret against a long-trained comparator")
    common(r)
    r.add_argument("--run-dir", required=True, help="output directory of a train run")
    r.add_argument("--factor", type=int, default=5, help="comparator budget as a multiple of the run")
    r.add_argument("--eval-every", type=int, default=10)
    r.add_argument("--burn-in", type=int, default=20)
    r.set_defaults(func=cmd_regret)

    x = sub.add_parser("export", help="convert a JSONL training log to CSV")
    x.add_argument("--log", required=True)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
