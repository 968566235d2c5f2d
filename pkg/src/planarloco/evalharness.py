"""Scenario runner and metrics: success rate, goal tracking, human-likeness,
robustness suites, and integrated-gradients saliency."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import net
from .core import PRIV_DIM, RunConfig, TaintGuard, rng_stream
from .envs import OBS_SCALE, VecEnv
from .imitation import FeatureBuffer, default_expert_library, human_likeness
from .physics import BipedModel
from .rl import load_policy_checkpoint
from .selector import (GOAL, FrozenController, QNet, load_selector_checkpoint,
                       selector_input)

CONTROLLERS = ("goal_only", "recovery_only", "hierarchical")


@dataclass
class ScenarioSpec:
    name: str
    terrain_kind: str = "flat"          # flat | obstacles | slope | stairs | mixed
    level: int = 4
    command_regime: str = "training"    # low_speed | high_speed | training
    disturbance_profile: str = "none"
    episode_steps: int = 1200
    controller: str = "hierarchical"


SUITE_PRESETS = {
    "flat-nominal": ScenarioSpec("flat-nominal", "flat", 0, "low_speed", "none"),
    "slopes-low-speed": ScenarioSpec("slopes-low-speed", "slope", 4, "low_speed", "none"),
    "slopes-high-speed": ScenarioSpec("slopes-high-speed", "slope", 4, "high_speed", "none"),
    "stairs-low-speed": ScenarioSpec("stairs-low-speed", "stairs", 4, "low_speed", "none"),
    "stairs-high-speed": ScenarioSpec("stairs-high-speed", "stairs", 4, "high_speed", "none"),
    "mixed-low-freq": ScenarioSpec("mixed-low-freq", "mixed", 4, "training", "low_freq"),
    "mixed-constant": ScenarioSpec("mixed-constant", "mixed", 4, "training", "constant"),
    "mixed-low-impulse": ScenarioSpec("mixed-low-impulse", "mixed", 4, "training", "low_impulse"),
    "mixed-high-impulse": ScenarioSpec("mixed-high-impulse", "mixed", 4, "training", "high_impulse"),
    "mixed-low-payload": ScenarioSpec("mixed-low-payload", "mixed", 4, "training", "low_payload"),
    "mixed-high-payload": ScenarioSpec("mixed-high-payload", "mixed", 4, "training", "high_payload"),
    "flat-high-impulse": ScenarioSpec("flat-high-impulse", "flat", 0, "training", "high_impulse"),
}


@dataclass
class EpisodeResult:
    seed: int
    episode: int
    success: bool
    steps: int
    goal_tracking: float
    switches: int
    mean_margin: float
    command: float


@dataclass
class SuiteReport:
    suite: str
    controller: str
    n_episodes: int
    n_seeds: int
    per_seed: list          # dicts with success_rate, goal_tracking, w1, switches
    episodes: list          # EpisodeResult
    success_rate_mean: float = 0.0
    success_rate_std: float = 0.0
    goal_tracking_mean: float = 0.0
    w1_mean: float = 0.0
    w1_std: float = 0.0

    def finalize(self):
        sr = np.array([s["success_rate"] for s in self.per_seed])
        gt = np.array([s["goal_tracking"] for s in self.per_seed])
        w1 = np.array([s["w1"] for s in self.per_seed])
        self.success_rate_mean = float(sr.mean())
        self.success_rate_std = float(sr.std())
        self.goal_tracking_mean = float(gt.mean())
        self.w1_mean = float(w1.mean())
        self.w1_std = float(w1.std())
        return self


class SingleController:
    """goal_only / recovery_only evaluation controller."""

    def __init__(self, ckpt_path, cfg: RunConfig, kind: str):
        policy, vae, _, meta, _ = load_policy_checkpoint(ckpt_path, cfg)
        self.fc = FrozenController(policy, vae, cfg)
        self.kind = kind
        self.meta = meta

    def reset(self, n: int):
        pass

    def act(self, hist, priv_guard: TaintGuard | None = None):
        return self.fc.act(hist), np.zeros(hist.shape[0], dtype=int)


class HierarchicalController:
    """Frozen goal + recovery policies under a greedy trained selector."""

    def __init__(self, goal_ckpt, recovery_ckpt, selector_ckpt, cfg: RunConfig):
        gp, gv, _, meta, _ = load_policy_checkpoint(goal_ckpt, cfg)
        rp, rv, _, _, _ = load_policy_checkpoint(recovery_ckpt, cfg)
        self.goal = FrozenController(gp, gv, cfg)
        self.recovery = FrozenController(rp, rv, cfg)
        self.qnet: QNet = load_selector_checkpoint(selector_ckpt, cfg)
        self.meta = meta
        self.kind = "hierarchical"

    def reset(self, n: int):
        pass

    def act(self, hist, priv_guard: TaintGuard | None = None):
        s = selector_input(hist, self.goal)
        q, _ = net.forward(self.qnet.params, s, self.qnet.spec)
        sel = np.where(q[:, 0] >= q[:, 1], 0, 1)
        a_goal = self.goal.act(hist)
        a_rec = self.recovery.act(hist)
        return np.where(sel[:, None] == GOAL, a_goal, a_rec), sel


def build_controller(spec_controller: str, cfg: RunConfig, checkpoints: dict):
    if spec_controller == "goal_only":
        return SingleController(checkpoints["goal"], cfg, "goal_only")
    if spec_controller == "recovery_only":
        return SingleController(checkpoints["recovery"], cfg, "recovery_only")
    if spec_controller == "hierarchical":
        return HierarchicalController(checkpoints["goal"], checkpoints["recovery"],
                                      checkpoints["selector"], cfg)
    raise ValueError(f"unknown controller: {spec_controller}")


def goal_tracking_score(task_rewards) -> float:
    """Mean per-step task reward over an episode."""
    return float(np.mean(task_rewards))


def run_suite(cfg: RunConfig, spec: ScenarioSpec, checkpoints: dict,
              n_episodes: int = 200, n_seeds: int = 3, out_dir=None,
              batch: int | None = None, base_seed: int | None = None,
              collect_traces: bool = False) -> SuiteReport:
    """Evaluate a controller on a scenario; deterministic per (spec, seed)."""
    base_seed = cfg.seed if base_seed is None else base_seed
    controller = build_controller(spec.controller, cfg, checkpoints)
    model = BipedModel()
    expert = FeatureBuffer(100_000)
    for clip in default_expert_library(model):
        expert.push(clip.frames)
    batch = batch or min(n_episodes, 64)
    report = SuiteReport(suite=spec.name, controller=spec.controller,
                         n_episodes=n_episodes, n_seeds=n_seeds,
                         per_seed=[], episodes=[])
    kinds = None if spec.terrain_kind == "mixed" else [spec.terrain_kind]
    taint_total = 0
    traces = []
    for s in range(n_seeds):
        feats_rows = []
        ep_idx = 0
        seed_eps: list = []
        while ep_idx < n_episodes:
            k = min(batch, n_episodes - ep_idx)
            env_seed = (base_seed + 1) * 1_000_003 + s * 10_007 + ep_idx
            env = VecEnv(cfg, mode="eval", n_envs=k, seed=env_seed,
                         terrain_kinds=kinds, fixed_level=spec.level,
                         command_regime=spec.command_regime,
                         disturbance_profile=spec.disturbance_profile,
                         auto_reset=False, seed_stream_tag="eval")
            controller.reset(k)
            alive = np.ones(k, dtype=bool)
            steps_alive = np.zeros(k, dtype=int)
            task_sums = np.zeros(k)
            margin_sums = np.zeros(k)
            switches = np.zeros(k, dtype=int)
            prev_sel = np.zeros(k, dtype=int)
            guard_reads = 0
            for t in range(spec.episode_steps):
                hist = env.observe_history()
                guard = TaintGuard(np.zeros((k, PRIV_DIM)))
                actions, sel = controller.act(hist, priv_guard=guard)
                guard_reads += guard.read_count
                info = env.step(actions)
                switches += ((sel != prev_sel) & alive & (steps_alive > 0)).astype(int)
                prev_sel = sel
                task_sums += np.where(alive, info["task"], 0.0)
                margin_sums += np.where(alive, info["margin"], 0.0)
                steps_alive += alive.astype(int)
                if alive.any():
                    feats_rows.append(info["features"][alive])
                if collect_traces and s == 0 and ep_idx == 0:
                    traces.append((t, int(sel[0]), float(env.qpos[0, 2]),
                                   float(env.qvel[0, 2]), float(info["margin"][0])))
                alive &= ~info["done"]
                if not alive.any():
                    break
            taint_total += guard_reads
            for i in range(k):
                success = steps_alive[i] >= spec.episode_steps
                seed_eps.append(EpisodeResult(
                    seed=s, episode=ep_idx + i, success=bool(success),
                    steps=int(steps_alive[i]),
                    goal_tracking=float(task_sums[i] / max(steps_alive[i], 1)),
                    switches=int(switches[i]),
                    mean_margin=float(margin_sums[i] / max(steps_alive[i], 1)),
                    command=float(env.commands[i])))
            ep_idx += k
        feats = np.concatenate(feats_rows) if feats_rows else np.zeros((1, 24))
        sub = feats[rng_stream(base_seed, "eval", s).choice(
            len(feats), size=min(4096, len(feats)), replace=False)]
        w1 = human_likeness(sub, expert.data[:expert.size])
        report.per_seed.append({
            "seed": s,
            "success_rate": 100.0 * np.mean([e.success for e in seed_eps]),
            "goal_tracking": float(np.mean([e.goal_tracking for e in seed_eps])),
            "w1": w1,
            "mean_switches": float(np.mean([e.switches for e in seed_eps])),
            "mean_margin": float(np.mean([e.mean_margin for e in seed_eps])),
        })
        report.episodes.extend(seed_eps)
    if taint_total > 0:
        raise AssertionError("privileged data was read on the deployment path")
    report.finalize()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_report(out_dir, report)
        if collect_traces and traces:
            write_selection_trace(os.path.join(out_dir, "selection_trace.csv"), traces)
    return report


def write_report(out_dir, report: SuiteReport):
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump({
            "suite": report.suite, "controller": report.controller,
            "n_episodes": report.n_episodes, "n_seeds": report.n_seeds,
            "success_rate_mean": report.success_rate_mean,
            "success_rate_std": report.success_rate_std,
            "goal_tracking_mean": report.goal_tracking_mean,
            "w1_mean": report.w1_mean, "w1_std": report.w1_std,
            "per_seed": report.per_seed,
        }, fh, sort_keys=True, indent=2)
    with open(os.path.join(out_dir, "episodes.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "episode", "success", "steps", "goal_tracking",
                    "switches", "mean_margin", "command"])
        for e in report.episodes:
            w.writerow([e.seed, e.episode, int(e.success), e.steps,
                        repr(e.goal_tracking), e.switches, repr(e.mean_margin),
                        repr(e.command)])


def write_selection_trace(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "selected_policy", "pitch", "pitch_rate", "margin"])
        w.writerows(rows)


# ---------------------------------------------------------------------------
# Integrated gradients
# ---------------------------------------------------------------------------

def integrated_gradients(grad_fn, x, baseline, steps: int = 50) -> np.ndarray:
    """Midpoint-rule integrated gradients for a scalar function.

    grad_fn(batch) must return (f (B,), grad (B, D)).  Attribution_i =
    (x - x0)_i * mean_k grad_i evaluated along the straight path.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x, dtype=float).reshape(-1)
    baseline = np.asarray(baseline, dtype=float).reshape(-1)
    if x.shape != baseline.shape:
        raise ValueError("baseline shape mismatch")
    alphas = (np.arange(steps) + 0.5) / steps
    pts = baseline[None, :] + alphas[:, None] * (x - baseline)[None, :]
    _, grads = grad_fn(pts)
    return (x - baseline) * grads.mean(axis=0)


def policy_grad_fn(policy, cfg: RunConfig):
    """(f, grad) of f = ||actor mean||_2 w.r.t. [scaled hist, extra]."""
    h, d = cfg.h_len, 29

    def fn(batch):
        b = batch.shape[0]
        hist = batch[:, :h * d].reshape(b, h, d)
        extra = batch[:, h * d:]
        mean, (trunk, atape) = policy.actor_mean(hist, extra, want_tape=True)
        norm = np.linalg.norm(mean, axis=1)
        dmean = mean / np.maximum(norm, 1e-12)[:, None]
        _, da_in = net.backward(atape, dmean)
        merged_dim = policy.specs["mrg"].sizes[-1]
        etape, mtape = trunk
        _, dm_in = net.backward(mtape, da_in[:, :merged_dim])
        _, de_in = net.backward(etape, dm_in.reshape(b * h, -1))
        g = np.concatenate((de_in.reshape(b, h * d), da_in[:, merged_dim:]), axis=1)
        return norm, g

    return fn


def qvalue_grad_fn(qnet: QNet, action: int = 0):
    def fn(batch):
        y, tape = net.forward(qnet.params, batch, qnet.spec)
        dy = np.zeros_like(y)
        dy[:, action] = 1.0
        _, dx = net.backward(tape, dy)
        return y[:, action], dx

    return fn


def attribution_groups(cfg: RunConfig) -> dict:
    """Index groups over the [scaled history, estimator extras] input vector."""
    hd = cfg.h_len * 29
    e0 = hd
    enc0 = hd + 4
    z0 = enc0 + 2 * cfg.freq_bands
    return {
        "proprio": list(range(0, 29)),
        "history": list(range(29, hd)),
        "est_velocity": [e0, e0 + 1],
        "zmp_encoding": [e0 + 2, e0 + 3] + list(range(enc0, z0)),
        "latent": list(range(z0, z0 + cfg.vae.latent_dim)),
    }


def grouped_attribution(attr: np.ndarray, cfg: RunConfig) -> dict:
    groups = attribution_groups(cfg)
    return {k: float(np.sum(np.abs(attr[idx]))) for k, idx in groups.items()}
