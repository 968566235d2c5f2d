"""Vectorized training/evaluation environments.

A `VecEnv` steps N independent biped environments in lockstep: per-env RNG
streams, terrain draws, domain randomization, disturbance schedules, command
schedules, observation noise, reward components, terminations, and the
terrain curriculum.  Trainers own the networks; the environment owns
everything physical.

Modes:
  goal      nominal init, mild noise, terrain curriculum, fixed per-episode command
  recovery  extreme init, intense noise, 1 Hz force/torque disturbances,
            5 Hz malicious command resampling (once level >= 5), uniform levels
  eval      scenario-driven: fixed terrain/level, command regime, disturbance profile
"""

from __future__ import annotations

import numpy as np

from . import physics, stability
from .core import GRAVITY, OBS_DIM, NoiseModel, RunConfig, rng_stream
from .imitation import extract_disc_features_batch
from .physics import (NQ, TERRAIN_N, BipedModel, DomainParams,
                      sample_disturbance_schedule, sample_domain_params)

TERRAIN_KINDS = ("flat", "obstacles", "slope", "stairs")

# fixed per-channel scaling applied to observations before they enter a network
OBS_SCALE = np.concatenate((
    [0.25, 1.0],          # pitch rate, pitch
    np.full(8, 1.0),      # joint pos
    np.full(8, 0.05),     # joint vel
    np.full(8, 1.0),      # prev action
    [1.0, 1.0],           # projected gravity
    [1.0],                # command
))

MAX_ACTION_DELAY = 6


class VecEnv:
    """N independent planar-biped environments stepped together."""

    def __init__(self, cfg: RunConfig, mode: str = "goal", n_envs: int | None = None,
                 seed: int | None = None, model: BipedModel | None = None,
                 terrain_kinds=None, fixed_level: int | None = None,
                 command_regime: str | None = None, fixed_command: float | None = None,
                 disturbance_profile: str | None = None, noise_scale: float | None = None,
                 auto_reset: bool = True, randomize: bool | None = None,
                 seed_stream_tag: str = "env"):
        if mode not in ("goal", "recovery", "eval"):
            raise ValueError(f"unknown env mode: {mode}")
        self.cfg = cfg
        self.mode = mode
        self.n = n_envs if n_envs is not None else cfg.ppo.num_envs
        self.model = model or BipedModel()
        self.seed = cfg.seed if seed is None else seed
        self.auto_reset = auto_reset
        self.fixed_level = fixed_level
        self.fixed_command = fixed_command
        self.command_regime = command_regime
        self.terrain_kinds = tuple(terrain_kinds) if terrain_kinds else TERRAIN_KINDS
        self.randomize = cfg.randomization.enabled if randomize is None else randomize
        if disturbance_profile is None:
            disturbance_profile = "low_freq" if mode == "recovery" else "none"
        self.disturbance_profile = disturbance_profile
        if noise_scale is None:
            noise_scale = {"goal": 0.25 * cfg.noise.scale,
                           "recovery": cfg.noise.scale, "eval": 0.0}[mode]
        self.noise = NoiseModel(**{**cfg.noise.__dict__})
        self.noise.enabled = noise_scale > 0.0
        self.noise.scale = noise_scale

        n, m = self.n, self.model
        self.rngs = [rng_stream(self.seed, seed_stream_tag, i) for i in range(n)]
        self.noise_rng = rng_stream(self.seed, "noise")
        self.qpos = np.zeros((n, NQ))
        self.qvel = np.zeros((n, NQ))
        self.anchors = np.full((n, m.n_contacts), np.nan)
        self.heights = np.zeros((n, TERRAIN_N))
        self.levels = np.zeros(n, dtype=int)
        self.kinds = [self.terrain_kinds[i % len(self.terrain_kinds)] for i in range(n)]
        self.friction = np.ones(n)
        self.gravity = np.full(n, GRAVITY)
        self.motor_strength = np.ones(n)
        self.action_delay = np.zeros(n, dtype=int)
        self.com_shift = np.zeros(n)
        self.link_masses = np.tile(m.link_masses, (n, 1))
        self.link_inertias = np.tile(m.link_inertias, (n, 1))
        self.commands = np.zeros(n)
        self.schedules: list = [[] for _ in range(n)]
        self.next_event = np.zeros(n, dtype=int)
        self.active_force = np.zeros((n, physics.N_LINKS, 2))
        self.active_torque = np.zeros((n, physics.N_LINKS))
        self.active_until = np.zeros((n, physics.N_LINKS))
        self.steps = np.zeros(n, dtype=int)
        self.prev_action = np.zeros((n, 8))
        self.prev_qvel = np.zeros((n, 8))
        self.prev_targets = np.zeros((n, MAX_ACTION_DELAY, 8))
        self.target_head = 0
        self.history = np.zeros((n, cfg.h_len, OBS_DIM))
        self.support = np.tile([-m.foot_half_len, m.foot_half_len], (n, 1))
        self.aerial = np.zeros(n, dtype=bool)
        self.track_num = np.zeros(n)
        self.track_den = np.zeros(n)
        self.episodes_done = 0
        self.mu = cfg.rewards.mu_init  # recovery ZMP dual variable (trainer-updated)
        self._soft_lo = m.joint_limits[:, 0] + 0.05
        self._soft_hi = m.joint_limits[:, 1] - 0.05
        self.last_episode_stats: list = []
        self.reset_envs(np.arange(n))

    # -- episode management -------------------------------------------------

    def _draw_level(self, i: int) -> int:
        if self.fixed_level is not None:
            return self.fixed_level
        if self.mode == "recovery":
            return int(self.rngs[i].integers(0, self.cfg.curriculum.max_level + 1))
        return int(self.levels[i])

    def _draw_command(self, i: int) -> float:
        if self.fixed_command is not None:
            return float(self.fixed_command)
        rng = self.rngs[i]
        regime = self.command_regime
        if regime == "low_speed":
            return float(rng.uniform(0.0, 1.0))
        if regime == "high_speed":
            return float(rng.uniform(1.0, 2.0))
        return float(rng.uniform(*self.cfg.commands.train_range))

    def reset_envs(self, ids):
        m = self.model
        for i in np.atleast_1d(ids):
            rng = self.rngs[i]
            self.levels[i] = self._draw_level(i)
            terrain = physics.generate_terrain(self.kinds[i], self.levels[i], rng)
            self.heights[i] = terrain.heights
            dom = sample_domain_params(rng, self.cfg.randomization) if self.randomize \
                else DomainParams()
            self.friction[i] = dom.friction
            self.gravity[i] = GRAVITY + dom.gravity_delta
            self.motor_strength[i] = dom.motor_strength_scale
            self.action_delay[i] = dom.action_delay
            self.com_shift[i] = dom.base_com_shift
            self.link_masses[i] = m.link_masses * dom.link_mass_scale
            self.link_masses[i, physics.TORSO] += dom.base_mass_delta
            self.link_inertias[i] = m.link_inertias * dom.link_mass_scale
            if self.mode == "recovery":
                st = physics.sample_extreme_init(m, rng)
            else:
                st = physics.sample_default_init(m, rng)
            qp, qv = st.qpos(), st.qvel()
            # settle the lowest body point onto the local terrain
            pts = physics.body_points(m, qp[None, :])["contacts"][0]
            h = terrain.height_at(pts[:, 0])
            qp[1] += np.max(h - pts[:, 1]) + 0.01
            self.qpos[i], self.qvel[i] = qp, qv
            self.anchors[i] = np.nan
            self.commands[i] = self._draw_command(i)
            self.schedules[i] = sample_disturbance_schedule(
                self.disturbance_profile, rng, self.cfg.episode_seconds)
            self.next_event[i] = 0
            self.active_force[i] = 0.0
            self.active_torque[i] = 0.0
            self.steps[i] = 0
            self.prev_action[i] = 0.0
            self.prev_qvel[i] = qv[3:]
            self.prev_targets[i, :, :] = m.default_pose
            self.track_num[i] = 0.0
            self.track_den[i] = 0.0
            self.support[i] = (qp[0] - m.foot_half_len, qp[0] + m.foot_half_len)
            self.aerial[i] = False
            obs = self._raw_observation(np.array([i]))
            self.history[i] = np.tile(obs[0], (self.cfg.h_len, 1))

    def _apply_events(self, i: int, t: float):
        """Activate disturbance events whose start time has arrived."""
        rng_events = self.schedules[i]
        while self.next_event[i] < len(rng_events) and rng_events[self.next_event[i]].start <= t:
            ev = rng_events[self.next_event[i]]
            self.next_event[i] += 1
            if ev.kind == "force_torque":
                self.active_force[i, ev.target_link] = ev.force
                self.active_torque[i, ev.target_link] = ev.torque
                self.active_until[i, ev.target_link] = ev.start + ev.duration
            elif ev.kind == "com_impulse":
                self.qvel[i, 0:2] += ev.lin_delta
                self.qvel[i, 2] += ev.ang_delta
            elif ev.kind == "payload":
                self.link_masses[i, ev.target_link] += ev.payload_kg
        expired = self.active_until[i] <= t
        self.active_force[i, expired] = 0.0
        self.active_torque[i, expired] = 0.0

    # -- observation assembly -----------------------------------------------

    def _raw_observation(self, ids) -> np.ndarray:
        """Noisy 29-dim observations for the given env ids (vectorized)."""
        ids = np.atleast_1d(ids)
        k = len(ids)
        th = self.qpos[ids, 2]
        out = np.zeros((k, OBS_DIM))
        out[:, 0] = self.qvel[ids, 2]
        out[:, 1] = th
        out[:, 2:10] = self.qpos[ids, 3:]
        out[:, 10:18] = self.qvel[ids, 3:]
        out[:, 18:26] = self.prev_action[ids]
        out[:, 26] = -np.sin(th)
        out[:, 27] = -np.cos(th)
        out[:, 28] = self.commands[ids]
        if self.noise.enabled:
            nz, s = self.noise, self.noise.scale
            widths = np.concatenate((
                [nz.ang_vel, nz.imu], np.full(8, nz.dof_pos), np.full(8, nz.dof_vel),
                np.zeros(8), [nz.gravity, nz.gravity], [0.0])) * s
            out += self.noise_rng.uniform(-1.0, 1.0, (k, OBS_DIM)) * widths
        return out

    def observe_history(self) -> np.ndarray:
        return self.history.copy()

    # -- stepping -------------------------------------------------------------

    def step(self, actions: np.ndarray) -> dict:
        """Advance one control step from raw policy actions (N, 8).

        Returns a dict with reward components, done/timeout masks, features,
        privileged vectors and per-episode stats for envs that finished.
        """
        cfg, m, n = self.cfg, self.model, self.n
        dt = cfg.dt
        actions = np.asarray(actions, dtype=float)
        t = self.steps * dt

        # malicious command resampling (recovery uncertainty set)
        if self.mode == "recovery" and self.fixed_command is None:
            period = int(round(cfg.control_hz / cfg.commands.malicious_hz))
            for i in range(n):
                if (self.levels[i] >= cfg.commands.malicious_min_level
                        and self.steps[i] % period == 0 and self.steps[i] > 0):
                    self.commands[i] = float(self.rngs[i].uniform(*cfg.commands.train_range))

        targets = m.default_pose + cfg.ppo.action_scale * actions
        targets = np.clip(targets, m.joint_limits[:, 0], m.joint_limits[:, 1])
        self.prev_targets[:, self.target_head % MAX_ACTION_DELAY] = targets
        delayed_idx = (self.target_head - self.action_delay) % MAX_ACTION_DELAY
        applied = self.prev_targets[np.arange(n), delayed_idx]
        self.target_head += 1

        kp = np.tile(m.kp, (n, 1))
        kd = np.tile(m.kd, (n, 1))
        if self.mode == "recovery" and self.noise.enabled:
            u = self.noise_rng.uniform(-self.noise.pd_gains, self.noise.pd_gains, (n, 2))
            kp *= 1.0 + u[:, 0:1] * self.noise.scale
            kd *= 1.0 + u[:, 1:2] * self.noise.scale
        torques = physics.pd_torques(applied, self.qpos[:, 3:], self.qvel[:, 3:], m,
                                     strength_scale=self.motor_strength[:, None],
                                     kp=kp, kd=kd)

        for i in range(n):
            if self.schedules[i]:
                self._apply_events(i, t[i])

        prev_qvel = self.qvel[:, 3:].copy()
        self.qpos, self.qvel, self.anchors, diag = physics.step_batch(
            m, self.qpos, self.qvel, torques, self.heights, self.friction,
            gravity=self.gravity, link_masses=self.link_masses,
            link_inertias=self.link_inertias, com_shift=self.com_shift,
            ext_force=self.active_force, ext_torque=self.active_torque,
            stick_anchor=self.anchors, dt=dt / cfg.substeps, substeps=cfg.substeps)
        self.steps += 1

        # support interval from active foot contacts; ZMP from exact CoM dynamics
        foot_active = diag.contact_active[:, m.foot_contact_mask]
        foot_x = diag.contact_points[:, m.foot_contact_mask, 0]
        has_support = foot_active.any(axis=1)
        smin = np.min(np.where(foot_active, foot_x, np.inf), axis=1)
        smax = np.max(np.where(foot_active, foot_x, -np.inf), axis=1)
        self.support[has_support, 0] = smin[has_support]
        self.support[has_support, 1] = smax[has_support]
        self.aerial = ~has_support
        ground = physics.terrain_height_lookup(
            self.heights, physics.TERRAIN_X0, physics.TERRAIN_DX, diag.com[:, 0:1])[:, 0]
        z_rel = np.maximum(diag.com[:, 1] - ground, 0.05)
        p_zmp = diag.com[:, 0] - (z_rel / self.gravity) * diag.com_acc[:, 0]
        center = 0.5 * (self.support[:, 0] + self.support[:, 1])
        half = 0.5 * (self.support[:, 1] - self.support[:, 0])
        offset = np.clip(p_zmp - center, -1.0, 1.0)
        margin = half - np.abs(offset)

        # rewards
        r = self.cfg.rewards
        sigma = r.recovery_sigma_lin_sq if self.mode == "recovery" else r.sigma_lin_sq
        vx = self.qvel[:, 0]
        task = r.alpha1 * np.exp(-((self.commands - vx) ** 2) / sigma)
        qacc = (self.qvel[:, 3:] - prev_qvel) / dt
        q = self.qpos[:, 3:]
        out_of_limits = ((q < self._soft_lo) | (q > self._soft_hi)).any(axis=1)
        collisions = (diag.contact_active & ~m.foot_contact_mask
                      & (diag.contact_forces[:, :, 1] > r.collision_force_threshold)).sum(axis=1)
        safety = (r.w_dof_limit * out_of_limits
                  + r.w_dof_acc * np.sum(qacc ** 2, axis=1)
                  + r.w_dof_vel * np.sum(self.qvel[:, 3:] ** 2, axis=1)
                  + r.w_action_rate * np.sum((actions - self.prev_action) ** 2, axis=1)
                  + r.w_torque * np.linalg.norm(torques, axis=1)
                  + r.w_collision * collisions)
        stand = -r.stand_weight * np.sum((q - m.default_pose) ** 2, axis=1)
        zmp_pen = -self.mu * np.maximum(0.0, r.eps_phi - margin)

        # termination
        base_h = physics.terrain_height_lookup(
            self.heights, physics.TERRAIN_X0, physics.TERRAIN_DX, self.qpos[:, 0:1])[:, 0]
        fallen = ((self.qpos[:, 1] - base_h) < 0.5 * m.nominal_base_height) \
            | (np.abs(self.qpos[:, 2]) > 1.0) \
            | (diag.contact_active & ~m.foot_contact_mask
               & (diag.contact_forces[:, :, 1] > r.collision_force_threshold)).any(axis=1)
        diverged = diag.diverged
        timeout = self.steps >= cfg.episode_steps
        done = fallen | diverged | timeout
        term = fallen | diverged

        # tracking accumulators (for the curriculum and metrics)
        sign = np.sign(self.commands)
        self.track_num += vx * sign
        self.track_den += np.abs(self.commands)

        features = extract_disc_features_batch(self.qpos, self.qvel, m)
        priv = np.zeros((n, 11))
        priv[:, 0:2] = self.qvel[:, 0:2]
        priv[:, 2] = offset
        priv[:, 3] = margin
        offs = np.array([-0.4, -0.2, 0.0, 0.2, 0.4])
        sample_x = self.qpos[:, 0:1] + offs[None, :]
        hsamp = physics.terrain_height_lookup(
            self.heights, physics.TERRAIN_X0, physics.TERRAIN_DX, sample_x)
        priv[:, 4:9] = hsamp - self.qpos[:, 1:2]
        priv[:, 9:11] = self.active_force.sum(axis=1)

        self.prev_action = actions.copy()

        obs = self._raw_observation(np.arange(n))
        self.history = np.roll(self.history, 1, axis=1)
        self.history[:, 0, :] = obs

        stats = []
        if done.any():
            for i in np.where(done)[0]:
                ratio = self._tracking_ratio(i)
                stats.append({"env": int(i), "steps": int(self.steps[i]),
                              "tracking_ratio": ratio, "level": int(self.levels[i]),
                              "terminated": bool(term[i]), "command": float(self.commands[i])})
                if self.mode == "goal" and self.cfg.curriculum.enabled \
                        and self.fixed_level is None:
                    self.levels[i] = physics.update_curriculum(
                        int(self.levels[i]), ratio, self.cfg.curriculum.up_threshold,
                        self.cfg.curriculum.down_threshold, self.cfg.curriculum.max_level)
                self.episodes_done += 1
            if self.auto_reset:
                self.reset_envs(np.where(done)[0])
        self.last_episode_stats = stats

        return {"task": task, "safety": safety, "stand": stand, "zmp_pen": zmp_pen,
                "done": done, "terminated": term, "timeout": timeout & ~term,
                "features": features, "priv": priv, "margin": margin,
                "offset": offset, "vx": vx, "torques": torques,
                "episode_stats": stats, "com": diag.com, "com_acc": diag.com_acc,
                "contact_forces": diag.contact_forces,
                "contact_active": diag.contact_active,
                "contact_points": diag.contact_points}

    def _tracking_ratio(self, i: int) -> float:
        steps = max(int(self.steps[i]), 1)
        den = self.track_den[i]
        if den < 0.05 * steps:
            return 1.0  # near-zero command: standing counts as tracked
        return float(np.clip(self.track_num[i] / den, 0.0, 1.5))

    def batch_tracking_ratio(self) -> float:
        """Rollout-level tracking ratio across all envs since their resets."""
        den = float(self.track_den.sum())
        steps = float(self.steps.sum())
        if den < 0.05 * max(steps, 1.0):
            return 1.0
        return float(np.clip(self.track_num.sum() / den, 0.0, 1.5))
