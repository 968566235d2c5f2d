"""Operator entry point: training, evaluation, rollout dumps, plots, selfcheck.

Exit codes: 0 success, 1 config/runtime error, 2 usage error, 3 selfcheck or
acceptance failure.  `HWC_SEED` / `HWC_WORKERS` override seed and worker
count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .core import ConfigError, RunConfig, config_to_text, load_config, rng_stream

SUBCOMMANDS = ("train-goal", "train-recovery", "train-selector", "train-estimator",
               "eval", "rollout", "plot", "selfcheck")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="planarloco",
        description="Hierarchical robust locomotion on a planar biped")
    sub = ap.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="run directory")
        p.add_argument("--workers", type=int, default=None,
                       help="vectorized batch width for evaluation")

    for name in ("train-goal", "train-recovery"):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--lamda", type=float, default=None,
                       help="motion-prior reward weight (0 disables)")

    p = sub.add_parser("train-selector")
    common(p)
    p.add_argument("--goal-ckpt", required=True)
    p.add_argument("--recovery-ckpt", required=True)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="termination penalty")

    p = sub.add_parser("train-estimator")
    common(p)
    p.add_argument("--iters", type=int, default=400)

    p = sub.add_parser("eval")
    common(p)
    p.add_argument("--suite", required=True)
    p.add_argument("--controller", default=None,
                   choices=["goal_only", "recovery_only", "hierarchical"])
    p.add_argument("--goal-ckpt")
    p.add_argument("--recovery-ckpt")
    p.add_argument("--selector-ckpt")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--eval-seeds", type=int, default=3)
    p.add_argument("--allow-foreign", action="store_true",
                   help="skip the checkpoint code-version check")

    p = sub.add_parser("rollout")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--terrain", default="flat")
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--command", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--allow-foreign", action="store_true")

    p = sub.add_parser("plot")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--what", required=True,
                   choices=["switch-proportion", "reward-curves", "tracking",
                            "attribution-bars"])

    p = sub.add_parser("selfcheck")
    common(p)
    return ap


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = os.environ.get("HWC_SEED")
    if seed is not None:
        cfg.seed = int(seed)
    if args.seed is not None:
        cfg.seed = args.seed
    workers = os.environ.get("HWC_WORKERS")
    if workers is not None:
        cfg.workers = int(workers)
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    return cfg


def _init_run_dir(out, cfg: RunConfig, command: str):
    from .rl import code_hash
    if not out:
        return None
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(config_to_text(cfg))
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump({"command": command, "seed": cfg.seed, "code_hash": code_hash()},
                  fh, sort_keys=True, indent=2)
    return out


def check_manifest(run_dir) -> bool:
    """Config echo + manifest must exist and parse; code hash must be recorded."""
    try:
        with open(os.path.join(run_dir, "manifest.json")) as fh:
            manifest = json.load(fh)
        with open(os.path.join(run_dir, "config.txt")) as fh:
            from .core import config_from_text
            config_from_text(fh.read())
        return bool(manifest.get("code_hash"))
    except (OSError, ValueError, ConfigError):
        return False


def _check_ckpt_version(path, allow_foreign: bool):
    from . import net
    from .rl import code_hash
    meta, _ = net.load_checkpoint(path)
    if meta.get("code_hash") != code_hash() and not allow_foreign:
        raise RuntimeError(
            f"checkpoint {path} was produced by code version {meta.get('code_hash')}, "
            f"current is {code_hash()} (pass --allow-foreign to override)")


def cmd_train_goal(args) -> int:
    from .rl import train_goal_policy
    cfg = _load_cfg(args)
    out = _init_run_dir(args.out, cfg, "train-goal")
    train_goal_policy(cfg, out_dir=out, iterations=args.iterations, lamda=args.lamda)
    return 0


def cmd_train_recovery(args) -> int:
    from .rl import train_recovery_policy
    cfg = _load_cfg(args)
    out = _init_run_dir(args.out, cfg, "train-recovery")
    train_recovery_policy(cfg, out_dir=out, iterations=args.iterations, lamda=args.lamda)
    return 0


def cmd_train_selector(args) -> int:
    from .selector import train_selector
    cfg = _load_cfg(args)
    out = _init_run_dir(args.out, cfg, "train-selector")
    train_selector(cfg, args.goal_ckpt, args.recovery_ckpt, out_dir=out,
                   rounds=args.rounds, alpha=args.alpha)
    return 0


def cmd_train_estimator(args) -> int:
    from .estimator import train_estimator
    cfg = _load_cfg(args)
    out = _init_run_dir(args.out, cfg, "train-estimator")
    _, history = train_estimator(cfg, iters=args.iters, out_dir=out)
    if out:
        with open(os.path.join(out, "estimator_rmse.jsonl"), "w") as fh:
            for it, vel, marg in history:
                fh.write(json.dumps({"iteration": it, "velocity_rmse": vel,
                                     "margin_rmse": marg}, sort_keys=True) + "\n")
    print(f"final velocity RMSE {history[-1][1]:.4f} m/s, "
          f"margin RMSE {history[-1][2]:.4f} m")
    return 0


def cmd_eval(args) -> int:
    from .evalharness import SUITE_PRESETS, run_suite
    cfg = _load_cfg(args)
    if args.suite not in SUITE_PRESETS:
        print(f"unknown suite '{args.suite}'; available: {sorted(SUITE_PRESETS)}",
              file=sys.stderr)
        return 1
    spec = SUITE_PRESETS[args.suite]
    if args.controller:
        spec.controller = args.controller
    ckpts = {}
    for key, path in (("goal", args.goal_ckpt), ("recovery", args.recovery_ckpt),
                      ("selector", args.selector_ckpt)):
        if path:
            _check_ckpt_version(path, args.allow_foreign)
            ckpts[key] = path
    out = _init_run_dir(args.out or f"eval_{args.suite}", cfg, "eval")
    batch = cfg.workers if cfg.workers > 0 else None
    report = run_suite(cfg, spec, ckpts, n_episodes=args.episodes,
                       n_seeds=args.eval_seeds, out_dir=out, batch=batch,
                       collect_traces=spec.controller == "hierarchical")
    print(f"{spec.name} [{spec.controller}]: success "
          f"{report.success_rate_mean:.2f} +/- {report.success_rate_std:.2f} %, "
          f"tracking {report.goal_tracking_mean:.3f}, W1 {report.w1_mean:.3f}")
    return 0


def cmd_rollout(args) -> int:
    from .envs import VecEnv
    from .physics import generate_terrain, trajectory_row, write_heightfield_csv, \
        write_trajectory_csv
    from .rl import load_policy_checkpoint
    from .selector import FrozenController
    from .core import RobotState

    cfg = _load_cfg(args)
    _check_ckpt_version(args.ckpt, args.allow_foreign)
    policy, vae, _, meta, _ = load_policy_checkpoint(args.ckpt, cfg)
    fc = FrozenController(policy, vae, cfg)
    out = _init_run_dir(args.out or "rollout_out", cfg, "rollout")
    env = VecEnv(cfg, mode="eval", n_envs=1, seed=cfg.seed,
                 terrain_kinds=[args.terrain], fixed_level=args.level,
                 fixed_command=args.command, auto_reset=False, seed_stream_tag="eval")
    rows = []
    for t in range(args.steps):
        actions = fc.act(env.observe_history())
        info = env.step(actions)
        st = RobotState.from_qpos_qvel(env.qpos[0], env.qvel[0], time=t * cfg.dt)
        event = "done" if info["done"][0] else ""
        rows.append(trajectory_row(st, info["torques"][0],
                                   {"total": float(info["task"][0] + info["safety"][0]),
                                    "task": float(info["task"][0]),
                                    "safety": float(info["safety"][0]),
                                    "stand": float(info["stand"][0])}, event))
        if info["done"][0]:
            break
    write_trajectory_csv(os.path.join(out, "trajectory.csv"), rows)
    terrain = generate_terrain(args.terrain, args.level, rng_stream(cfg.seed, "terrain"))
    write_heightfield_csv(os.path.join(out, "heightfield.csv"), terrain)
    print(f"wrote {len(rows)} steps to {out}/trajectory.csv")
    return 0


def cmd_plot(args) -> int:
    from . import svgplot
    cfg = _load_cfg(args)
    run = args.run
    if not check_manifest(run):
        print(f"run directory {run} fails the manifest integrity check",
              file=sys.stderr)
        return 1
    out = os.path.join(run, f"{args.what}.svg")
    if args.what in ("reward-curves", "tracking"):
        rows = _read_jsonl(os.path.join(run, "metrics.jsonl"))
        xs = [r["iteration"] for r in rows]
        if args.what == "tracking":
            series = {"tracking_ratio": (xs, [r["tracking_ratio"] for r in rows])}
        else:
            series = {k: (xs, [r[f"reward_{k}"] for r in rows])
                      for k in ("total", "task", "style", "safety")}
        svgplot.line_chart(out, series, title=args.what, xlabel="iteration")
    elif args.what == "switch-proportion":
        rows = _read_jsonl(os.path.join(run, "metrics.jsonl"))
        xs = [r["round"] for r in rows]
        series = {"goal-tracking proportion": (xs, [r["goal_proportion"] for r in rows])}
        svgplot.line_chart(out, series, title="goal-tracking activation",
                           xlabel="round", ylabel="proportion")
    elif args.what == "attribution-bars":
        with open(os.path.join(run, "attributions.json")) as fh:
            groups = json.load(fh)
        svgplot.bar_chart(out, list(groups), list(groups.values()),
                          title="integrated-gradients attribution", ylabel="|IG|")
    print(f"wrote {out}")
    return 0


def _read_jsonl(path) -> list:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def cmd_selfcheck(args) -> int:
    """Fast oracle suite: gradients, ZMP, GAE, Double-DQN, VAE KL, IG."""
    from . import selfcheck
    ok = selfcheck.run_all(verbose=True)
    return 0 if ok else 3


def main(argv=None) -> int:
    ap = _build_parser()
    args, unknown = ap.parse_known_args(argv)
    if unknown or args.command is None:
        ap.print_usage(sys.stderr)
        return 2
    handlers = {
        "train-goal": cmd_train_goal,
        "train-recovery": cmd_train_recovery,
        "train-selector": cmd_train_selector,
        "train-estimator": cmd_train_estimator,
        "eval": cmd_eval,
        "rollout": cmd_rollout,
        "plot": cmd_plot,
        "selfcheck": cmd_selfcheck,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
