"""High-level planning policy: Double-DQN choosing goal-tracking vs recovery.

The Q network sees the same inputs as the low-level policies (scaled history
plus estimator outputs); its two outputs rank the frozen controllers.  The
replay buffer is strict FIFO; the target net syncs every `target_update`
online updates; epsilon decays per completed episode.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import net
from .core import OBS_DIM, RunConfig, rng_stream
from .envs import OBS_SCALE, VecEnv
from .rl import assemble_extra, code_hash, extra_input_dim, load_policy_checkpoint

GOAL, RECOVERY = 0, 1


def high_level_reward(task_r: float, switched: bool, terminated: bool,
                      switch_coeff: float = 0.001, alpha: float = 50.0) -> float:
    """Task reward minus switch and termination penalties."""
    return task_r - switch_coeff * float(switched) - alpha * float(terminated)


def epsilon_schedule(episode: int, eps_init: float = 0.1, decay: float = 0.999,
                     eps_min: float = 0.001) -> float:
    """eps = max(eps_init * decay^episode, eps_min), decayed once per episode."""
    return max(eps_init * decay ** episode, eps_min)


def select_action(q_params, spec, x, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over the 2-dim Q output; ties break toward goal-tracking."""
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(0, 2))
    q, _ = net.forward(q_params, np.atleast_2d(x), spec)
    return GOAL if q[0, 0] >= q[0, 1] else RECOVERY


class ReplayBuffer:
    """FIFO ring of (s, a, r, s', done) transitions."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, dim), dtype=np.float32)
        self.sn = np.zeros((self.capacity, dim), dtype=np.float32)
        self.a = np.zeros(self.capacity, dtype=np.int8)
        self.r = np.zeros(self.capacity, dtype=np.float32)
        self.d = np.zeros(self.capacity, dtype=np.float32)
        self.size = 0
        self.head = 0

    def push(self, s, a, r, sn, d):
        i = self.head
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.sn[i] = sn
        self.d[i] = d
        self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=n)
        return (self.s[idx].astype(float), self.a[idx].astype(int),
                self.r[idx].astype(float), self.sn[idx].astype(float),
                self.d[idx].astype(float))


@dataclass
class QNet:
    params: list
    spec: net.MlpSpec
    opt: net.OptimizerState

    @staticmethod
    def create(cfg: RunConfig, rng: np.random.Generator, in_dim: int) -> "QNet":
        spec = net.MlpSpec.make(in_dim, tuple(cfg.dqn.hidden), 2,
                                activation="relu", dropout=cfg.dqn.dropout)
        params = net.init_params(spec, rng, out_gain=0.1)
        opt = net.OptimizerState.for_params(net.flatten_mlp(params), lr=cfg.dqn.lr,
                                            max_grad_norm=1.0)
        return QNet(params=params, spec=spec, opt=opt)


def dqn_update(qnet: QNet, target_params: list, batch, gamma: float = 0.99,
               dropout_rng: np.random.Generator | None = None) -> float:
    """Double-DQN MSE step: online net selects a', target net evaluates it."""
    s, a, r, sn, d = batch
    qn_online, _ = net.forward(qnet.params, sn, qnet.spec)
    a_next = np.where(qn_online[:, 0] >= qn_online[:, 1], 0, 1)
    qn_target, _ = net.forward(target_params, sn, qnet.spec)
    target = r + gamma * (1.0 - d) * qn_target[np.arange(len(a)), a_next]
    q, tape = net.forward(qnet.params, s, qnet.spec, train_mode=dropout_rng is not None,
                          rng=dropout_rng)
    sel = q[np.arange(len(a)), a]
    err = sel - target
    loss = float(np.mean(err ** 2))
    dq = np.zeros_like(q)
    dq[np.arange(len(a)), a] = 2.0 * err / len(a)
    grads_pairs, _ = net.backward(tape, dq)
    grads = []
    for dw, db in grads_pairs:
        grads.extend((dw, db))
    flat = net.adam_step(net.flatten_mlp(qnet.params), grads, qnet.opt)
    qnet.params = net.unflatten_mlp(flat)
    return loss


class FrozenController:
    """A loaded low-level checkpoint acting deterministically (mean action)."""

    def __init__(self, policy, vae, cfg: RunConfig):
        self.policy = policy
        self.vae = vae
        self.cfg = cfg

    def features(self, hist) -> np.ndarray:
        n = hist.shape[0]
        z, _, _, e = self.vae.encode((hist * OBS_SCALE).reshape(n, -1), sample=False)
        return assemble_extra(self.cfg, e, z)

    def act(self, hist) -> np.ndarray:
        extra = self.features(hist)
        mean, _ = self.policy.actor_mean(hist * OBS_SCALE, extra)
        return mean


def selector_input(hist, controller: FrozenController) -> np.ndarray:
    """Q input: flattened scaled history + the goal controller's estimator block."""
    n = hist.shape[0]
    flat = (hist * OBS_SCALE).reshape(n, -1)
    return np.concatenate((flat, controller.features(hist)), axis=1)


def selector_input_dim(cfg: RunConfig) -> int:
    return cfg.h_len * OBS_DIM + extra_input_dim(cfg)


@dataclass
class SelectorTrainer:
    qnet: QNet
    target_params: list
    replay: ReplayBuffer
    goal: FrozenController
    recovery: FrozenController
    cfg: RunConfig
    updates: int = 0
    episodes: int = 0


def make_selector_trainer(cfg: RunConfig, goal_ckpt, recovery_ckpt,
                          seed: int | None = None) -> SelectorTrainer:
    seed = cfg.seed if seed is None else seed
    gp, gv, _, _, _ = load_policy_checkpoint(goal_ckpt, cfg)
    rp, rv, _, _, _ = load_policy_checkpoint(recovery_ckpt, cfg)
    dim = selector_input_dim(cfg)
    qnet = QNet.create(cfg, rng_stream(seed, "selector"), dim)
    return SelectorTrainer(
        qnet=qnet, target_params=[(w.copy(), b.copy()) for w, b in qnet.params],
        replay=ReplayBuffer(cfg.dqn.replay_capacity, dim),
        goal=FrozenController(gp, gv, cfg), recovery=FrozenController(rp, rv, cfg),
        cfg=cfg)


def train_selector(cfg: RunConfig, goal_ckpt, recovery_ckpt, out_dir=None,
                   rounds: int | None = None, alpha: float | None = None,
                   switch_coeff: float | None = None, seed: int | None = None,
                   log_every: int = 5):
    """Algorithm-1-style Double-DQN training over the frozen low-level policies.

    One `round` rolls cfg.dqn.num_envs environments for a full episode length,
    doing one minibatch update per vector step.  Returns (trainer, metrics).
    """
    seed = cfg.seed if seed is None else seed
    alpha = cfg.dqn.term_penalty if alpha is None else alpha
    switch_coeff = cfg.dqn.switch_coeff if switch_coeff is None else switch_coeff
    st = make_selector_trainer(cfg, goal_ckpt, recovery_ckpt, seed)
    rounds = cfg.dqn.rounds if rounds is None else rounds
    act_rng = rng_stream(seed, "selector", 1)
    samp_rng = rng_stream(seed, "selector", 2)
    metrics = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for rnd in range(rounds):
        env = VecEnv(cfg, mode="recovery", n_envs=cfg.dqn.num_envs,
                     seed=seed * 7919 + rnd, seed_stream_tag="selector")
        n = env.n
        prev_sel = np.zeros(n, dtype=int)
        first = np.ones(n, dtype=bool)
        s = selector_input(env.observe_history(), st.goal)
        goal_steps = 0
        total_steps = 0
        switches = 0
        losses = []
        for t in range(cfg.episode_steps):
            eps = epsilon_schedule(st.episodes, cfg.dqn.eps_init,
                                   cfg.dqn.eps_decay, cfg.dqn.eps_min)
            q, _ = net.forward(st.qnet.params, s, st.qnet.spec)
            sel = np.where(q[:, 0] >= q[:, 1], GOAL, RECOVERY)
            explore = act_rng.random(n) < eps
            sel = np.where(explore, act_rng.integers(0, 2, size=n), sel)
            hist = env.observe_history()
            a_goal = st.goal.act(hist)
            a_rec = st.recovery.act(hist)
            actions = np.where(sel[:, None] == GOAL, a_goal, a_rec)
            info = env.step(actions)
            sn = selector_input(env.observe_history(), st.goal)
            switched = (sel != prev_sel) & ~first
            for i in range(n):
                r = high_level_reward(float(info["task"][i]), bool(switched[i]),
                                      bool(info["terminated"][i]), switch_coeff, alpha)
                st.replay.push(s[i], int(sel[i]), r, sn[i], float(info["done"][i]))
            goal_steps += int((sel == GOAL).sum())
            total_steps += n
            switches += int(switched.sum())
            prev_sel = sel
            first[:] = False
            done_ids = np.where(info["done"])[0]
            if len(done_ids):
                st.episodes += len(done_ids)
                first[done_ids] = True
                prev_sel[done_ids] = 0
            s = sn
            if st.replay.size >= cfg.dqn.batch_size:
                batch = st.replay.sample(cfg.dqn.batch_size, samp_rng)
                losses.append(dqn_update(st.qnet, st.target_params, batch, cfg.gamma,
                                         dropout_rng=samp_rng))
                st.updates += 1
                if st.updates % cfg.dqn.target_update == 0:
                    st.target_params = [(w.copy(), b.copy()) for w, b in st.qnet.params]
        rec = {"round": rnd, "episodes": st.episodes,
               "goal_proportion": goal_steps / max(total_steps, 1),
               "switch_rate": switches / max(total_steps, 1),
               "epsilon": epsilon_schedule(st.episodes, cfg.dqn.eps_init,
                                           cfg.dqn.eps_decay, cfg.dqn.eps_min),
               "loss": float(np.mean(losses)) if losses else float("nan"),
               "updates": st.updates}
        metrics.append(rec)
        if log_every and rnd % log_every == 0:
            print(f"[selector] round {rnd} goal% {rec['goal_proportion']:.3f} "
                  f"eps {rec['epsilon']:.4f}", flush=True)
    if out_dir:
        save_selector_checkpoint(os.path.join(out_dir, "selector.npz"), st, seed)
        with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
            for rec in metrics:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return st, metrics


def save_selector_checkpoint(path, st: SelectorTrainer, seed: int):
    arrays: dict = {}
    net.pack_mlp("qnet", st.qnet.params, arrays)
    net.save_checkpoint(path, {"kind": "selector", "seed": seed,
                               "code_hash": code_hash()}, arrays)
    return path


def load_selector_checkpoint(path, cfg: RunConfig) -> QNet:
    meta, arrays = net.load_checkpoint(path)
    qnet = QNet.create(cfg, rng_stream(0, "selector"), selector_input_dim(cfg))
    qnet.params = net.unpack_mlp("qnet", arrays)
    return qnet
