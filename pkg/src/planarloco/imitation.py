"""Expert gait source, discriminator features, Wasserstein critic, style reward.

Expert demonstrations come from a scripted parametric gait (stand / walk /
run) rather than retargeted motion capture; clips round-trip through CSV so
externally produced feature data can be dropped in.  The critic is trained
with the Wasserstein objective plus a gradient penalty whose exact parameter
gradients come from :func:`planarloco.net.directional_grad_params`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import net
from .core import RobotState
from .physics import (ARM_L, ARM_R, FOOT_L, FOOT_R, SHANK_L, SHANK_R,
                      BipedModel, body_points)

FEATURE_DIM = 24
STYLE_SPEED_RANGES = {"stand": (0.0, 0.0), "walk": (0.0, 1.5), "run": (1.5, 2.5)}


@dataclass
class ExpertClip:
    style: str
    speed: float
    frames: np.ndarray  # (T, FEATURE_DIM) at 100 Hz


@dataclass
class GaitParams:
    """Scripted-gait shape parameters; amplitude is solved from the speed."""

    base_freq: float = 0.6
    freq_per_speed: float = 0.55
    knee_lift: float = 0.30
    knee_lift_per_speed: float = 0.15
    arm_ratio: float = 0.8
    lean_per_speed: float = 0.03

    def stride_freq(self, speed: float) -> float:
        return self.base_freq + self.freq_per_speed * speed

    def hip_amplitude(self, speed: float, leg_len: float) -> float:
        # mean forward speed of an alternating-stance sinusoidal gait is
        # 4 * L * A * f; the (1 + 0.14 v) factor compensates the small-angle
        # shortfall at running amplitudes (calibrated by the replay oracle)
        return speed * (1.0 + 0.14 * speed) / (4.0 * leg_len * self.stride_freq(speed))


def gait_joint_targets(t, speed: float, model: BipedModel,
                       gait: GaitParams | None = None) -> np.ndarray:
    """Joint targets of the scripted gait at times t (scalar or array) -> (..., 8)."""
    gait = gait or GaitParams()
    t = np.asarray(t, dtype=float)
    center = model.symmetric_pose
    if speed <= 0.0:
        return np.broadcast_to(model.default_pose, t.shape + (8,)).copy()
    f = gait.stride_freq(speed)
    a_hip = gait.hip_amplitude(speed, model.stance_drop)
    a_knee = gait.knee_lift + gait.knee_lift_per_speed * speed
    ph_l = 2.0 * np.pi * f * t
    ph_r = ph_l + np.pi
    q = np.empty(t.shape + (8,))
    for side, ph in ((0, ph_l), (3, ph_r)):
        hip = center[side] + a_hip * np.cos(ph)
        knee = center[side + 1] - a_knee * np.maximum(0.0, -np.sin(ph))
        ankle = -(hip + knee)  # keep the foot level
        q[..., side] = hip
        q[..., side + 1] = knee
        q[..., side + 2] = ankle
    q[..., 6] = -gait.arm_ratio * a_hip * np.cos(ph_l)
    q[..., 7] = -gait.arm_ratio * a_hip * np.cos(ph_r)
    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
    return np.clip(q, lo, hi)


def extract_disc_features(state: RobotState, model: BipedModel) -> np.ndarray:
    """24-dim discriminator state: joints, base velocity, pitch rate, pitch,
    and hand/knee/ankle keypoints in the base frame."""
    return extract_disc_features_batch(
        state.qpos()[None, :], state.qvel()[None, :], model)[0]


def extract_disc_features_batch(qpos, qvel, model: BipedModel) -> np.ndarray:
    n = qpos.shape[0]
    fk = body_points(model, qpos)
    origins = fk["origins"]
    # keypoints: hands (arm tips), knees (shank origins), ankles (foot origins)
    phi_arm = fk["phi"][:, [ARM_L, ARM_R]]
    tip = np.stack((np.sin(phi_arm) * model.arm_len,
                    -np.cos(phi_arm) * model.arm_len), axis=-1)
    hands = origins[:, [ARM_L, ARM_R]] + tip
    knees = origins[:, [SHANK_L, SHANK_R]]
    ankles = origins[:, [FOOT_L, FOOT_R]]
    kp = np.concatenate((hands, knees, ankles), axis=1)  # (N, 6, 2)
    rel = kp - qpos[:, None, 0:2]
    th = qpos[:, 2]
    c, s = np.cos(-th), np.sin(-th)
    local = np.stack((c[:, None] * rel[..., 0] - s[:, None] * rel[..., 1],
                      s[:, None] * rel[..., 0] + c[:, None] * rel[..., 1]), axis=-1)
    feats = np.empty((n, FEATURE_DIM))
    feats[:, 0:8] = qpos[:, 3:]
    feats[:, 8:10] = qvel[:, 0:2]
    feats[:, 10] = qvel[:, 2]
    feats[:, 11] = qpos[:, 2]
    feats[:, 12:24] = local.reshape(n, 12)
    return feats


def generate_expert_clip(style: str, speed: float, duration: float,
                         model: BipedModel, control_hz: int = 100,
                         gait: GaitParams | None = None) -> ExpertClip:
    """Scripted demonstration clip, rendered to discriminator features."""
    lo, hi = STYLE_SPEED_RANGES.get(style, (None, None))
    if lo is None:
        raise ValueError(f"unknown style: {style}")
    if style == "stand":
        if speed != 0.0:
            raise ValueError("stand clips have speed 0")
    elif not (lo < speed <= hi):
        raise ValueError(f"{style} speed must be in ({lo}, {hi}]")
    gait = gait or GaitParams()
    steps = int(round(duration * control_hz))
    dt = 1.0 / control_hz
    t = np.arange(steps) * dt
    q = gait_joint_targets(t, speed, model, gait)
    qpos = np.zeros((steps, 11))
    qpos[:, 0] = speed * t
    qpos[:, 1] = model.nominal_base_height
    qpos[:, 2] = gait.lean_per_speed * speed
    qpos[:, 3:] = q
    qvel = np.zeros((steps, 11))
    if speed > 0.0:
        f = gait.stride_freq(speed)
        ph_l = 2.0 * np.pi * f * t
        swing = np.maximum(np.sin(ph_l), np.sin(ph_l + np.pi))
        qvel[:, 0] = speed * (np.pi / 2.0) * swing  # mean of swing is 2/pi
        qvel[:, 3:] = np.gradient(q, dt, axis=0)
    frames = extract_disc_features_batch(qpos, qvel, model)
    return ExpertClip(style=style, speed=float(speed), frames=frames)


def default_expert_library(model: BipedModel, duration: float = 8.0) -> list:
    """Stand, walk and run clips spanning the command range."""
    clips = [generate_expert_clip("stand", 0.0, duration, model)]
    for v in (0.4, 0.8, 1.2, 1.5):
        clips.append(generate_expert_clip("walk", v, duration, model))
    for v in (2.0, 2.5):
        clips.append(generate_expert_clip("run", v, duration, model))
    return clips


def save_clips_csv(path, clips: list):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(FEATURE_DIM)] + ["style", "speed"])
        for clip in clips:
            for row in clip.frames:
                w.writerow([repr(v) for v in row] + [clip.style, repr(clip.speed)])


def load_clips_csv(path) -> list:
    groups: dict = {}
    with open(path) as fh:
        r = csv.reader(fh)
        header = next(r)
        if len(header) != FEATURE_DIM + 2:
            raise ValueError("unexpected clip CSV layout")
        for row in r:
            key = (row[-2], float(row[-1]))
            groups.setdefault(key, []).append([float(v) for v in row[:FEATURE_DIM]])
    return [ExpertClip(style=k[0], speed=k[1], frames=np.array(v))
            for k, v in groups.items()]


class FeatureBuffer:
    """FIFO ring buffer of feature rows with uniform no-replacement sampling."""

    def __init__(self, capacity: int, dim: int = FEATURE_DIM):
        self.capacity = int(capacity)
        self.data = np.zeros((self.capacity, dim))
        self.size = 0
        self.head = 0

    def push(self, rows: np.ndarray):
        rows = np.atleast_2d(rows)
        for start in range(0, len(rows), self.capacity):
            chunk = rows[start:start + self.capacity]
            k = len(chunk)
            end = self.head + k
            if end <= self.capacity:
                self.data[self.head:end] = chunk
            else:
                split = self.capacity - self.head
                self.data[self.head:] = chunk[:split]
                self.data[:end - self.capacity] = chunk[split:]
            self.head = end % self.capacity
            self.size = min(self.size + k, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("empty buffer")
        n = min(n, self.size)
        idx = rng.choice(self.size, size=n, replace=False)
        return self.data[idx]


@dataclass
class Discriminator:
    """Wasserstein critic over DiscFeatures with gradient penalty."""

    params: list
    spec: net.MlpSpec
    opt: net.OptimizerState

    @staticmethod
    def create(cfg, rng: np.random.Generator) -> "Discriminator":
        spec = net.MlpSpec.make(FEATURE_DIM, tuple(cfg.hidden), 1, activation="elu")
        params = net.init_params(spec, rng, out_gain=0.1)
        opt = net.OptimizerState.for_params(net.flatten_mlp(params), lr=cfg.lr)
        return Discriminator(params=params, spec=spec, opt=opt)

    def score(self, feats) -> np.ndarray:
        y, _ = net.forward(self.params, np.atleast_2d(feats), self.spec)
        return y[:, 0]


def disc_update(disc: Discriminator, expert_batch, policy_batch,
                beta: float = 1.0, rng: np.random.Generator | None = None) -> dict:
    """One ascent step on E_e[f] - E_p[f] - beta * E[(||grad f|| - 1)^2]."""
    xe = np.atleast_2d(expert_batch)
    xp = np.atleast_2d(policy_batch)
    if len(xe) == 0 or len(xp) == 0:
        raise ValueError("empty discriminator batch")
    n = len(xp)
    if len(xe) != n:  # pair by cycling the (usually smaller) expert fetch
        xe = xe[np.arange(n) % len(xe)]
    ye, tape_e = net.forward(disc.params, xe, disc.spec)
    yp, tape_p = net.forward(disc.params, xp, disc.spec)
    de, _ = net.backward(tape_e, np.full_like(ye, -1.0 / n))
    dp, _ = net.backward(tape_p, np.full_like(yp, 1.0 / n))

    alpha = rng.random((n, 1)) if rng is not None else np.full((n, 1), 0.5)
    xhat = alpha * xe + (1.0 - alpha) * xp
    _, g = net.input_grad(disc.params, xhat, disc.spec)
    gnorm = np.sqrt(np.sum(g * g, axis=1))
    safe = np.maximum(gnorm, 1e-12)
    coeff = beta * 2.0 * (gnorm - 1.0) / (safe * n)
    dgp = net.directional_grad_params(disc.params, xhat, g, coeff, disc.spec)

    grads = [de[i][j] + dp[i][j] + dgp[i][j] for i in range(len(de)) for j in (0, 1)]
    flat = net.adam_step(net.flatten_mlp(disc.params), grads, disc.opt)
    disc.params = net.unflatten_mlp(flat)
    w_dist = float(ye.mean() - yp.mean())
    gp = float(np.mean((gnorm - 1.0) ** 2))
    return {"wasserstein": w_dist, "grad_penalty": gp, "loss": -w_dist + beta * gp}


def style_reward(disc: Discriminator, feats, lamda: float = 1.0,
                 clamp: float = 10.0) -> np.ndarray:
    """lamda * clamp(f_d, +/-clamp); the policy is rewarded for fooling the critic."""
    if lamda == 0.0:
        return np.zeros(len(np.atleast_2d(feats)))
    return lamda * np.clip(disc.score(feats), -clamp, clamp)


def human_likeness(policy_features, expert_features, max_samples: int = 2048) -> float:
    """Sliced per-dimension Wasserstein-1 between two feature clouds.

    Sorts each dimension and averages |quantile_a - quantile_b| on an
    equal-size quantile grid, then averages over dimensions.
    """
    a = np.atleast_2d(np.asarray(policy_features, dtype=float))
    b = np.atleast_2d(np.asarray(expert_features, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty feature set")
    k = min(len(a), len(b), max_samples)
    u = (np.arange(k) + 0.5) / k
    ia = np.minimum((u * len(a)).astype(int), len(a) - 1)
    ib = np.minimum((u * len(b)).astype(int), len(b) - 1)
    sa = np.sort(a, axis=0)[ia]
    sb = np.sort(b, axis=0)[ib]
    return float(np.mean(np.abs(sa - sb)))
