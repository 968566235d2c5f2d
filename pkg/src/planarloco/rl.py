"""Rewards, GAE, clipped-surrogate policy optimization, and the two low-level
training loops (goal tracking and safety recovery).

The actor consumes scaled observation history through an encoder + merger
trunk plus the estimator outputs (velocity/ZMP estimates, frequency-encoded
ZMP offset, latent); the critic gets the same plus the privileged vector.
Actor and critic use separate trunks and are updated by one global-norm
clipped Adam step.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import net
from .core import OBS_DIM, PRIV_DIM, RunConfig, rng_stream
from .envs import OBS_SCALE, VecEnv
from .estimator import Vae
from .imitation import (Discriminator, FeatureBuffer, default_expert_library,
                        disc_update, human_likeness, style_reward)
from .physics import BipedModel

LOGSTD_MIN, LOGSTD_MAX = -4.0, 1.0


# ---------------------------------------------------------------------------
# Reward operations (single-state forms; VecEnv computes the batched versions)
# ---------------------------------------------------------------------------

def task_reward(state, cmd, sigma_lin_sq: float, alpha1: float = 1.0) -> float:
    """Velocity-tracking kernel alpha1 * exp(-(v_cmd - v_x)^2 / sigma^2)."""
    err = cmd.vx_cmd - state.base_vx
    return alpha1 * float(np.exp(-(err ** 2) / sigma_lin_sq))


def safety_energy_reward(state, action, prev_action, torques, qacc,
                         joint_limits, cfg=None) -> float:
    """Weighted safety/energy penalty sum (all weights negative)."""
    from .core import RewardConfig
    r = cfg or RewardConfig()
    q = np.asarray(state.joint_pos)
    out = (q < joint_limits[:, 0]) | (q > joint_limits[:, 1])
    collisions = sum(1 for c in state.contact_points
                     if int(c[3]) not in (3, 6) and c[2] > r.collision_force_threshold)
    a, pa = np.asarray(action), np.asarray(prev_action)
    return float(r.w_dof_limit * out.any()
                 + r.w_dof_acc * np.sum(np.asarray(qacc) ** 2)
                 + r.w_dof_vel * np.sum(np.asarray(state.joint_vel) ** 2)
                 + r.w_action_rate * np.sum((a - pa) ** 2)
                 + r.w_torque * np.linalg.norm(torques)
                 + r.w_collision * collisions)


def stand_reward(q, q_default, weight: float = 0.5) -> float:
    """Penalty on deviation from the default standing pose."""
    d = np.asarray(q) - np.asarray(q_default)
    return -weight * float(np.sum(d * d))


def compute_gae(rewards, values, dones, bootstrap_value, gamma: float = 0.99,
                lam: float = 0.95):
    """Generalized advantage estimation over (T, ...) arrays.

    dones mask the bootstrap at terminal steps; `bootstrap_value` is V of the
    state after the last step.  Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("misaligned GAE inputs")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap_value, dtype=float)
    next_adv = np.zeros_like(next_value)
    for t in range(T - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * not_done * next_value - values[t]
        next_adv = delta + gamma * lam * not_done * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


# ---------------------------------------------------------------------------
# Policy networks
# ---------------------------------------------------------------------------

def extra_input_dim(cfg: RunConfig) -> int:
    return 4 + 2 * cfg.freq_bands + cfg.vae.latent_dim


@dataclass
class PolicyHead:
    """Actor-critic with separate history trunks and a state-independent log-std."""

    enc_a: list
    mrg_a: list
    actor: list
    enc_c: list
    mrg_c: list
    critic: list
    log_std: np.ndarray
    specs: dict
    h_len: int

    @staticmethod
    def create(cfg: RunConfig, rng: np.random.Generator) -> "PolicyHead":
        p = cfg.ppo
        extra = extra_input_dim(cfg)
        enc_spec = net.MlpSpec.make(OBS_DIM, tuple(p.encoder_hidden), p.encoder_out)
        mrg_spec = net.MlpSpec.make(cfg.h_len * p.encoder_out, (), p.merged_dim,
                                    out_activation="elu")
        actor_spec = net.MlpSpec.make(p.merged_dim + extra, tuple(p.actor_hidden), 8)
        critic_spec = net.MlpSpec.make(p.merged_dim + extra + PRIV_DIM,
                                       tuple(p.critic_hidden), 1)
        return PolicyHead(
            enc_a=net.init_params(enc_spec, rng),
            mrg_a=net.init_params(mrg_spec, rng),
            actor=net.init_params(actor_spec, rng, out_gain=0.01),
            enc_c=net.init_params(enc_spec, rng),
            mrg_c=net.init_params(mrg_spec, rng),
            critic=net.init_params(critic_spec, rng),
            log_std=np.full(8, p.log_std_init),
            specs={"enc": enc_spec, "mrg": mrg_spec, "actor": actor_spec,
                   "critic": critic_spec},
            h_len=cfg.h_len)

    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std, LOGSTD_MIN, LOGSTD_MAX))

    def _trunk(self, enc, mrg, hist_scaled, want_tape=False):
        b = hist_scaled.shape[0]
        flat = hist_scaled.reshape(b * self.h_len, OBS_DIM)
        eout, etape = net.forward(enc, flat, self.specs["enc"])
        merged_in = eout.reshape(b, -1)
        mout, mtape = net.forward(mrg, merged_in, self.specs["mrg"])
        return (mout, (etape, mtape)) if want_tape else (mout, None)

    def actor_mean(self, hist_scaled, extra, want_tape=False):
        mout, trunk_tapes = self._trunk(self.enc_a, self.mrg_a, hist_scaled, want_tape)
        x = np.concatenate((mout, extra), axis=1)
        mean, atape = net.forward(self.actor, x, self.specs["actor"])
        return (mean, (trunk_tapes, atape)) if want_tape else (mean, None)

    def value(self, hist_scaled, extra, priv, want_tape=False):
        mout, trunk_tapes = self._trunk(self.enc_c, self.mrg_c, hist_scaled, want_tape)
        x = np.concatenate((mout, extra, priv), axis=1)
        v, ctape = net.forward(self.critic, x, self.specs["critic"])
        return (v[:, 0], (trunk_tapes, ctape)) if want_tape else (v[:, 0], None)

    def act(self, hist, extra, rng: np.random.Generator, sample: bool = True):
        """Sampled action, its log-prob, and the mean, from raw history."""
        hist_scaled = hist * OBS_SCALE
        mean, _ = self.actor_mean(hist_scaled, extra)
        std = self.std()
        if sample:
            action = mean + std * rng.standard_normal(mean.shape)
        else:
            action = mean.copy()
        logp = gaussian_logp(action, mean, std)
        return action, logp, mean

    def param_groups(self) -> list:
        """Flat list of all trainable arrays (order matters for Adam state)."""
        flat = []
        for group in (self.enc_a, self.mrg_a, self.actor, self.enc_c, self.mrg_c,
                      self.critic):
            flat.extend(net.flatten_mlp(group))
        flat.append(self.log_std)
        return flat

    def set_from_flat(self, flat: list):
        i = 0
        for name in ("enc_a", "mrg_a", "actor", "enc_c", "mrg_c", "critic"):
            group = getattr(self, name)
            k = 2 * len(group)
            setattr(self, name, net.unflatten_mlp(flat[i:i + k]))
            i += k
        self.log_std = flat[i]

    def pack(self, arrays: dict, prefix: str = "policy"):
        for name in ("enc_a", "mrg_a", "actor", "enc_c", "mrg_c", "critic"):
            net.pack_mlp(f"{prefix}_{name}", getattr(self, name), arrays)
        arrays[f"{prefix}_log_std"] = self.log_std

    @staticmethod
    def unpack(arrays: dict, cfg: RunConfig, prefix: str = "policy") -> "PolicyHead":
        ph = PolicyHead.create(cfg, rng_stream(0, "policy"))
        for name in ("enc_a", "mrg_a", "actor", "enc_c", "mrg_c", "critic"):
            setattr(ph, name, net.unpack_mlp(f"{prefix}_{name}", arrays))
        ph.log_std = arrays[f"{prefix}_log_std"]
        return ph


def gaussian_logp(action, mean, std) -> np.ndarray:
    z = (action - mean) / std
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(std)) \
        - 0.5 * action.shape[-1] * np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------

@dataclass
class TransitionBatch:
    """Fixed-horizon rollout storage, (T, N, ...) arrays."""

    hist: np.ndarray          # (T, N, H, OBS_DIM) raw (unscaled)
    extra: np.ndarray         # (T, N, extra_dim)
    priv: np.ndarray          # (T, N, PRIV_DIM)
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray       # total
    components: dict          # name -> (T, N)
    dones: np.ndarray
    timeouts: np.ndarray
    features: np.ndarray      # (T, N, 24)
    margins: np.ndarray
    bootstrap: np.ndarray     # (N,)


def ppo_update(policy: PolicyHead, batch: TransitionBatch, cfg: RunConfig,
               opt: net.OptimizerState, rng: np.random.Generator) -> dict:
    """Clipped-surrogate PPO: epochs x minibatches over the flattened rollout."""
    p = cfg.ppo
    T, N = batch.rewards.shape
    adv, returns = compute_gae(batch.rewards, batch.values, batch.dones,
                               batch.bootstrap, cfg.gamma, p.gae_lambda)
    adv_flat = adv.reshape(-1)
    adv_norm = (adv_flat - adv_flat.mean()) / (adv_flat.std() + 1e-8)
    B = T * N
    hist = (batch.hist.reshape(B, policy.h_len, OBS_DIM) * OBS_SCALE)
    extra = batch.extra.reshape(B, -1)
    priv = batch.priv.reshape(B, -1)
    actions = batch.actions.reshape(B, -1)
    logp_old = batch.logp.reshape(B)
    returns_flat = returns.reshape(B)

    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_frac": 0.0}
    n_mb = 0
    for _ in range(p.epochs):
        order = rng.permutation(B)
        for mb in np.array_split(order, p.minibatches):
            m = len(mb)
            mean, (a_trunk, atape) = policy.actor_mean(hist[mb], extra[mb], want_tape=True)
            std = policy.std()
            z = (actions[mb] - mean) / std
            logp = -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(std)) \
                - 0.5 * 8 * np.log(2.0 * np.pi)
            ratio = np.exp(logp - logp_old[mb])
            a_mb = adv_norm[mb]
            clipped = np.clip(ratio, 1.0 - p.clip, 1.0 + p.clip)
            surr = np.minimum(ratio * a_mb, clipped * a_mb)
            if not np.all(np.isfinite(surr)):
                opt.skipped += 1
                continue
            value, (c_trunk, ctape) = policy.value(hist[mb], extra[mb], priv[mb],
                                                   want_tape=True)
            v_err = value - returns_flat[mb]

            # gradient of the scalar loss w.r.t. network outputs
            use_unclipped = (ratio * a_mb) <= (clipped * a_mb)
            dlogp = np.where(use_unclipped, ratio * a_mb, 0.0) * (-1.0 / m)
            dmean = dlogp[:, None] * (z / std)
            dlogstd_lp = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0)
            dlogstd_ent = -p.entropy_coef * np.ones(8)  # entropy bonus per dim
            dlogstd = dlogstd_lp + dlogstd_ent
            dlogstd = np.where((policy.log_std > LOGSTD_MIN) & (policy.log_std < LOGSTD_MAX),
                               dlogstd, 0.0)
            dvalue = p.value_coef * v_err / m

            grads = _policy_grads(policy, a_trunk, atape, dmean,
                                  c_trunk, ctape, dvalue[:, None], dlogstd)
            flat = net.adam_step(policy.param_groups(), grads, opt)
            policy.set_from_flat(flat)

            stats["policy_loss"] += -float(surr.mean())
            stats["value_loss"] += 0.5 * float(np.mean(v_err ** 2))
            stats["entropy"] += float(np.sum(np.log(std)) + 4.0 * np.log(2 * np.pi * np.e))
            stats["clip_frac"] += float(np.mean(~use_unclipped))
            n_mb += 1
    for k in stats:
        stats[k] /= max(n_mb, 1)
    stats["adv_std"] = float(adv_flat.std())
    return stats


def _policy_grads(policy, a_trunk, atape, dmean, c_trunk, ctape, dvalue, dlogstd):
    """Backprop both heads to a flat gradient list matching param_groups()."""
    merged_dim = policy.specs["mrg"].sizes[-1]
    da_params, da_in = net.backward(atape, dmean)
    d_merged = da_in[:, :merged_dim]
    etape_a, mtape_a = a_trunk
    dm_params, dm_in = net.backward(mtape_a, d_merged)
    b = dm_in.shape[0]
    de_params, _ = net.backward(etape_a, dm_in.reshape(b * policy.h_len, -1))

    dc_params, dc_in = net.backward(ctape, dvalue)
    d_merged_c = dc_in[:, :merged_dim]
    etape_c, mtape_c = c_trunk
    dmc_params, dmc_in = net.backward(mtape_c, d_merged_c)
    dec_params, _ = net.backward(etape_c, dmc_in.reshape(b * policy.h_len, -1))

    flat = []
    for group in (de_params, dm_params, da_params, dec_params, dmc_params, dc_params):
        for dw, db in group:
            flat.extend((dw, db))
    flat.append(dlogstd)
    return flat


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def assemble_extra(cfg: RunConfig, e_est: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Estimator-driven policy input block: e, frequency-encoded ZMP offset, latent."""
    from .stability import frequency_encode
    enc = frequency_encode(e_est[:, 2], cfg.freq_bands)
    return np.concatenate((e_est, enc, z), axis=1)


class Trainer:
    """Shared rollout/update machinery for the goal and recovery trainers."""

    def __init__(self, cfg: RunConfig, mode: str, out_dir=None, lamda=None,
                 n_envs=None, terrain_kinds=None, fixed_command=None,
                 fixed_level=None, noise_scale=None, seed=None):
        self.cfg = cfg
        self.mode = mode
        self.out_dir = out_dir
        self.seed = cfg.seed if seed is None else seed
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        self.model = BipedModel()
        self.env = VecEnv(cfg, mode=mode, n_envs=n_envs, seed=self.seed,
                          model=self.model, terrain_kinds=terrain_kinds,
                          fixed_command=fixed_command, fixed_level=fixed_level,
                          noise_scale=noise_scale)
        self.policy = PolicyHead.create(cfg, rng_stream(self.seed, "policy"))
        self.opt = net.OptimizerState.for_params(self.policy.param_groups(),
                                                 lr=cfg.ppo.lr,
                                                 max_grad_norm=cfg.ppo.max_grad_norm)
        self.vae = Vae.create(cfg, rng_stream(self.seed, "vae"))
        self.disc = Discriminator.create(cfg.disc, rng_stream(self.seed, "policy", 1))
        self.lamda = cfg.disc.lamda if lamda is None else lamda
        self.policy_rng = rng_stream(self.seed, "policy", 2)
        self.vae_rng = rng_stream(self.seed, "vae", 1)
        self.replay = FeatureBuffer(cfg.disc.replay_capacity)
        self.expert = FeatureBuffer(cfg.disc.expert_capacity)
        for clip in default_expert_library(self.model):
            self.expert.push(clip.frames)
        self.mu = cfg.rewards.mu_init
        self.metrics: list = []
        self._priv = self._static_priv()
        self._timing = []

    def _static_priv(self) -> np.ndarray:
        """Privileged vector for freshly reset states (zero acceleration)."""
        env = self.env
        n = env.n
        priv = np.zeros((n, PRIV_DIM))
        priv[:, 0:2] = env.qvel[:, 0:2]
        priv[:, 3] = self.model.foot_half_len
        return priv

    def rollout(self) -> TransitionBatch:
        cfg, env, policy = self.cfg, self.env, self.policy
        T, n = cfg.ppo.horizon, env.n
        extra_dim = extra_input_dim(cfg)
        batch = TransitionBatch(
            hist=np.zeros((T, n, cfg.h_len, OBS_DIM)),
            extra=np.zeros((T, n, extra_dim)),
            priv=np.zeros((T, n, PRIV_DIM)),
            actions=np.zeros((T, n, 8)),
            logp=np.zeros((T, n)),
            values=np.zeros((T, n)),
            rewards=np.zeros((T, n)),
            components={k: np.zeros((T, n)) for k in
                        ("task", "style", "safety", "stand", "zmp_pen")},
            dones=np.zeros((T, n)),
            timeouts=np.zeros((T, n)),
            features=np.zeros((T, n, 24)),
            margins=np.zeros((T, n)),
            bootstrap=np.zeros(n))
        self.episode_stats = []
        vae_rows = {"hist": [], "obs": [], "next_obs": [], "e_true": [], "keep": []}
        for t in range(T):
            hist = env.observe_history()
            z, _, _, e_est = self.vae.encode((hist * OBS_SCALE).reshape(n, -1),
                                             self.vae_rng, sample=True)
            extra = assemble_extra(cfg, e_est, z)
            action, logp, _ = policy.act(hist, extra, self.policy_rng)
            info = env.step(action)
            batch.hist[t] = hist
            batch.extra[t] = extra
            batch.priv[t] = self._priv
            batch.actions[t] = action
            batch.logp[t] = logp
            for k in ("task", "safety", "stand", "zmp_pen"):
                batch.components[k][t] = info[k]
            batch.dones[t] = info["done"]
            batch.timeouts[t] = info["timeout"]
            batch.features[t] = info["features"]
            batch.margins[t] = info["margin"]
            vae_rows["hist"].append(hist)
            vae_rows["obs"].append(hist[:, 0, :])
            vae_rows["next_obs"].append(env.history[:, 0, :].copy())
            vae_rows["e_true"].append(info["priv"][:, 0:4].copy())
            vae_rows["keep"].append(~info["done"])
            self._priv = info["priv"].copy()
            # reset rows need a fresh static privileged vector
            if info["done"].any():
                ids = np.where(info["done"])[0]
                self._priv[ids, 0:2] = env.qvel[ids, 0:2]
                self._priv[ids, 2] = 0.0
                self._priv[ids, 3] = self.model.foot_half_len
                self._priv[ids, 4:] = 0.0
            self.episode_stats.extend(info["episode_stats"])
        hist = env.observe_history()
        z, _, _, e_est = self.vae.encode((hist * OBS_SCALE).reshape(n, -1),
                                         self.vae_rng, sample=True)
        extra = assemble_extra(cfg, e_est, z)
        # one batched critic pass for every stored state plus the bootstrap state
        all_hist = np.concatenate((batch.hist.reshape(T * n, cfg.h_len, OBS_DIM),
                                   hist)) * OBS_SCALE
        all_extra = np.concatenate((batch.extra.reshape(T * n, -1), extra))
        all_priv = np.concatenate((batch.priv.reshape(T * n, -1), self._priv))
        values, _ = policy.value(all_hist, all_extra, all_priv)
        batch.values = values[:T * n].reshape(T, n)
        batch.bootstrap = values[T * n:]
        self._vae_rows = {k: np.concatenate(v) for k, v in vae_rows.items()}
        return batch

    def compose_rewards(self, batch: TransitionBatch):
        feats = batch.features.reshape(-1, 24)
        style = style_reward(self.disc, feats, self.lamda,
                             self.cfg.disc.reward_clamp).reshape(batch.rewards.shape)
        batch.components["style"] = style
        total = batch.components["task"] + style + batch.components["safety"]
        if self.mode == "recovery":
            total = total + batch.components["stand"] + batch.components["zmp_pen"]
        # timeout bootstrapping: dying of old age is not a failure
        total = total + self.cfg.gamma * batch.values * batch.timeouts
        batch.rewards = total

    def update_vae(self):
        rows = self._vae_rows
        keep = rows["keep"]
        if keep.sum() < 8:
            return {"vae_loss": float("nan")}
        hist = (rows["hist"][keep] * OBS_SCALE).reshape(int(keep.sum()), -1)
        obs = rows["obs"][keep] * OBS_SCALE
        next_obs = rows["next_obs"][keep] * OBS_SCALE
        e_true = rows["e_true"][keep]
        losses = []
        for _ in range(self.cfg.vae.updates_per_iter):
            idx = self.vae_rng.choice(len(hist), size=min(self.cfg.vae.batch_size,
                                                          len(hist)), replace=False)
            loss = self.vae.train_step(hist[idx], obs[idx], next_obs[idx],
                                       e_true[idx], self.vae_rng)
            losses.append(loss)
        return {"vae_loss": float(np.mean(losses))}

    def update_disc(self, batch: TransitionBatch):
        if self.lamda == 0.0:
            return {"wasserstein": 0.0, "grad_penalty": 0.0}
        self.replay.push(batch.features.reshape(-1, 24))
        policy_batch = self.replay.sample(self.cfg.disc.batch_size, self.policy_rng)
        expert_batch = self.expert.sample(self.cfg.disc.expert_fetch, self.policy_rng)
        return disc_update(self.disc, expert_batch, policy_batch,
                           beta=self.cfg.disc.grad_penalty, rng=self.policy_rng)

    def iteration(self, it: int) -> dict:
        t0 = time.perf_counter()
        batch = self.rollout()
        self.compose_rewards(batch)
        disc_stats = self.update_disc(batch)
        vae_stats = self.update_vae()
        ppo_stats = ppo_update(self.policy, batch, self.cfg, self.opt, self.policy_rng)
        mean_margin = float(batch.margins.mean())
        if self.mode == "recovery":
            r = self.cfg.rewards
            self.mu = max(0.0, self.mu + r.mu_eta * (r.eps_phi - mean_margin))
            self.env.mu = self.mu
        rec = {"iteration": it,
               "tracking_ratio": self.env.batch_tracking_ratio(),
               "reward_total": float(batch.rewards.mean()),
               "reward_task": float(batch.components["task"].mean()),
               "reward_style": float(batch.components["style"].mean()),
               "reward_safety": float(batch.components["safety"].mean()),
               "reward_stand": float(batch.components["stand"].mean()),
               "reward_zmp": float(batch.components["zmp_pen"].mean()),
               "mean_margin": mean_margin,
               "mu": self.mu,
               "curriculum_level": float(self.env.levels.mean()),
               "episodes_done": int(self.env.episodes_done),
               "wasserstein": disc_stats.get("wasserstein", 0.0),
               "vae_loss": vae_stats.get("vae_loss", 0.0),
               **{f"ppo_{k}": v for k, v in ppo_stats.items()}}
        self._timing.append(time.perf_counter() - t0)
        self.metrics.append(rec)
        return rec

    def w1_estimate(self, max_rows: int = 4096) -> float:
        if self.replay.size == 0:
            return float("nan")
        pol = self.replay.sample(min(max_rows, self.replay.size), self.policy_rng)
        exp = self.expert.sample(min(max_rows, self.expert.size), self.policy_rng)
        return human_likeness(pol, exp)

    def save_checkpoint(self, path):
        arrays: dict = {}
        self.policy.pack(arrays)
        self.vae.pack(arrays)
        net.pack_mlp("disc", self.disc.params, arrays)
        meta = {"kind": f"{self.mode}_policy", "seed": self.seed,
                "code_hash": code_hash(), "lamda": self.lamda, "mu": self.mu,
                "config": _cfg_text(self.cfg)}
        net.save_checkpoint(path, meta, arrays)
        return path

    def write_metrics(self, path):
        with open(path, "w") as fh:
            for rec in self.metrics:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _cfg_text(cfg: RunConfig) -> str:
    from .core import config_to_text
    return config_to_text(cfg)


def code_hash() -> str:
    """Hash of the package sources, stamped into checkpoints and manifests."""
    import hashlib
    import planarloco
    root = os.path.dirname(planarloco.__file__)
    h = hashlib.sha256()
    for name in sorted(os.listdir(root)):
        if name.endswith(".py"):
            with open(os.path.join(root, name), "rb") as fh:
                h.update(name.encode())
                h.update(fh.read())
    return h.hexdigest()[:16]


def load_policy_checkpoint(path, cfg: RunConfig | None = None):
    """(policy, vae, disc, meta) from a trainer checkpoint."""
    meta, arrays = net.load_checkpoint(path)
    from .core import config_from_text
    ck_cfg = config_from_text(meta["config"]) if cfg is None else cfg
    policy = PolicyHead.unpack(arrays, ck_cfg)
    vae = Vae.unpack(arrays, ck_cfg)
    disc_params = net.unpack_mlp("disc", arrays)
    return policy, vae, disc_params, meta, ck_cfg


def train_goal_policy(cfg: RunConfig, out_dir=None, iterations=None, lamda=None,
                      terrain_kinds=None, fixed_command=None, fixed_level=None,
                      noise_scale=None, stop_fn=None, seed=None, log_every: int = 10):
    """Adversarial goal-tracking training; returns the trainer (with metrics)."""
    trainer = Trainer(cfg, "goal", out_dir=out_dir, lamda=lamda,
                      terrain_kinds=terrain_kinds, fixed_command=fixed_command,
                      fixed_level=fixed_level, noise_scale=noise_scale, seed=seed)
    iters = iterations if iterations is not None else cfg.ppo.iterations
    _run_training(trainer, iters, stop_fn, log_every)
    return trainer


def train_recovery_policy(cfg: RunConfig, out_dir=None, iterations=None, lamda=None,
                          stop_fn=None, seed=None, log_every: int = 10):
    """Recovery training under the extreme-case uncertainty set + ZMP constraint."""
    trainer = Trainer(cfg, "recovery", out_dir=out_dir, lamda=lamda, seed=seed)
    iters = iterations if iterations is not None else cfg.ppo.iterations
    _run_training(trainer, iters, stop_fn, log_every)
    return trainer


def _run_training(trainer: Trainer, iterations: int, stop_fn, log_every: int):
    cfg = trainer.cfg
    for it in range(iterations):
        rec = trainer.iteration(it)
        if trainer.out_dir and (it % cfg.ppo.checkpoint_every == 0 or it == iterations - 1):
            trainer.save_checkpoint(os.path.join(trainer.out_dir, "checkpoint.npz"))
        if log_every and it % log_every == 0:
            print(f"[{trainer.mode}] it {it} track {rec['tracking_ratio']:.3f} "
                  f"reward {rec['reward_total']:.3f} level {rec['curriculum_level']:.2f}",
                  flush=True)
        if stop_fn is not None and stop_fn(rec):
            break
    if trainer.out_dir:
        trainer.save_checkpoint(os.path.join(trainer.out_dir, "checkpoint.npz"))
        trainer.write_metrics(os.path.join(trainer.out_dir, "metrics.jsonl"))
    return trainer
