"""Numerical oracle suites: exact cross-checks of gradients, ZMP, GAE,
Double-DQN, VAE loss gradients, and integrated-gradients completeness.

Each check returns (ok, detail).  `run_all` is what `planarloco selfcheck`
executes; the acceptance tests call the same checks at their full budgets.
"""

from __future__ import annotations

import numpy as np

from . import net
from .core import rng_stream


def check_mlp_gradients(n_nets: int = 100, tol: float = 1e-4, seed: int = 0):
    """Params + input gradients vs central finite differences (h = 1e-5)."""
    rng = rng_stream(seed, "misc", 1)
    h = 1e-5
    worst = 0.0
    for k in range(n_nets):
        sizes = [int(rng.integers(2, 7)) for _ in range(int(rng.integers(2, 4)))]
        act = rng.choice(["elu", "relu", "tanh"])
        spec = net.MlpSpec.make(sizes[0], tuple(sizes[1:]), int(rng.integers(1, 4)),
                                activation=str(act))
        params = net.init_params(spec, rng)
        x = rng.standard_normal((3, spec.sizes[0]))
        w_out = rng.standard_normal(spec.sizes[-1])  # random linear readout

        def loss():
            y, _ = net.forward(params, x, spec)
            return float(np.sum(y @ w_out))

        y, tape = net.forward(params, x, spec)
        dparams, dx = net.backward(tape, np.broadcast_to(w_out, y.shape).copy())
        for li, (w, b) in enumerate(params):
            for arr, darr in ((w, dparams[li][0]), (b, dparams[li][1])):
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    orig = arr[idx]
                    arr[idx] = orig + h
                    lp = loss()
                    arr[idx] = orig - h
                    lm = loss()
                    arr[idx] = orig
                    fd = (lp - lm) / (2 * h)
                    worst = max(worst, abs(fd - darr[idx]) / max(1.0, abs(fd)))
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = x[idx]
            x[idx] = orig + h
            lp = loss()
            x[idx] = orig - h
            lm = loss()
            x[idx] = orig
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - dx[idx]) / max(1.0, abs(fd)))
    return worst < tol, f"max relative gradient error {worst:.3g} (tol {tol})"


def gae_bruteforce(rewards, values, dones, bootstrap, gamma, lam):
    """O(T^2) direct sum: A_t = sum_l (gamma*lam)^l * delta_{t+l} with done cut."""
    T = len(rewards)
    v_next = np.concatenate((values[1:], [bootstrap]))
    deltas = rewards + gamma * (1.0 - dones) * v_next - values
    adv = np.zeros(T)
    for t in range(T):
        acc = 0.0
        w = 1.0
        for l in range(t, T):
            acc += w * deltas[l]
            if dones[l]:
                break
            w *= gamma * lam
        adv[t] = acc
    return adv


def check_gae(tol: float = 1e-10, seed: int = 0, trials: int = 50):
    from .rl import compute_gae
    rng = rng_stream(seed, "misc", 2)
    worst = 0.0
    for _ in range(trials):
        T = int(rng.integers(2, 65))
        r = rng.standard_normal(T)
        v = rng.standard_normal(T)
        d = (rng.random(T) < 0.15).astype(float)
        bv = float(rng.standard_normal())
        adv, ret = compute_gae(r, v, d, bv, 0.99, 0.95)
        brute = gae_bruteforce(r, v, d, bv, 0.99, 0.95)
        worst = max(worst, float(np.abs(adv - brute).max()))
        worst = max(worst, float(np.abs(ret - (brute + v)).max()))
    return worst < tol, f"max |GAE - brute force| = {worst:.3g} (tol {tol})"


def _five_state_mdp():
    """Deterministic 5-state chain; action 1 moves right, 0 moves left.

    Reaching state 4 pays 1 and terminates; every left move pays 0.05.
    """
    n_s = 5

    def step(s, a):
        if a == 1:
            s2 = s + 1
            if s2 >= 4:
                return 4, 1.0, True
            return s2, 0.0, False
        s2 = max(s - 1, 0)
        return s2, 0.05, False

    return n_s, step


def value_iteration(gamma: float = 0.99, iters: int = 2000):
    n_s, step = _five_state_mdp()
    q = np.zeros((n_s, 2))
    for _ in range(iters):
        q_new = np.zeros_like(q)
        for s in range(4):
            for a in range(2):
                s2, r, done = step(s, a)
                q_new[s, a] = r + (0.0 if done else gamma * q[s2].max())
        q = q_new
    return q


def check_double_dqn(tol: float = 0.01, seed: int = 0, updates: int = 4000):
    """Double-DQN on the 5-state MDP converges to the value-iteration fixed point."""
    from .selector import ReplayBuffer, dqn_update

    n_s, step = _five_state_mdp()
    q_star = value_iteration()
    rng = rng_stream(seed, "misc", 3)
    spec = net.MlpSpec.make(n_s, (64, 64), 2, activation="relu")
    params = net.init_params(spec, rng, out_gain=0.1)
    opt = net.OptimizerState.for_params(net.flatten_mlp(params), lr=1e-3,
                                        max_grad_norm=1e9)

    class Q:
        pass

    qnet = Q()
    qnet.params, qnet.spec, qnet.opt = params, spec, opt
    replay = ReplayBuffer(10_000, n_s)
    eye = np.eye(n_s)
    for s in range(4):
        for a in range(2):
            s2, r, done = step(s, a)
            for _ in range(8):
                replay.push(eye[s], a, r, eye[s2], float(done))
    target = [(w.copy(), b.copy()) for w, b in qnet.params]
    for u in range(updates):
        batch = replay.sample(128, rng)
        dqn_update(qnet, target, batch, gamma=0.99)
        if (u + 1) % 50 == 0:
            target = [(w.copy(), b.copy()) for w, b in qnet.params]
    q_hat, _ = net.forward(qnet.params, eye, spec)
    err = float(np.abs(q_hat[:4] - q_star[:4]).max())
    return err < tol, f"Double-DQN sup-norm error vs value iteration {err:.4f} (tol {tol})"


def check_vae_gradients(tol: float = 1e-4, seed: int = 0):
    """Full VAE loss gradient (incl. learnable prior) vs finite differences."""
    from .core import RunConfig
    from .estimator import Vae

    cfg = RunConfig(seed=seed)
    cfg.h_len = 2
    cfg.vae.latent_dim = 3
    cfg.vae.encoder_hidden = (8,)
    cfg.vae.decoder_hidden = (8,)
    vae = Vae.create(cfg, rng_stream(seed, "misc", 4))
    rng = rng_stream(seed, "misc", 5)
    b = 3
    hist = rng.standard_normal((b, cfg.h_len * 29))
    obs = rng.standard_normal((b, 29))
    nxt = rng.standard_normal((b, 29))
    e_true = rng.standard_normal((b, 4))

    xi_rng_seed = 77

    def loss_of():
        r = np.random.Generator(np.random.PCG64(xi_rng_seed))
        loss, _, _ = vae.loss_and_grads(hist, obs, nxt, e_true, r)
        return loss

    r = np.random.Generator(np.random.PCG64(xi_rng_seed))
    _, grads, kl = vae.loss_and_grads(hist, obs, nxt, e_true, r)
    if kl < 0:
        return False, "negative KL"
    params = vae.param_list()
    h = 1e-6
    worst = 0.0
    for arr, darr in zip(params, grads):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            lp = loss_of()
            arr[idx] = orig - h
            lm = loss_of()
            arr[idx] = orig
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - darr[idx]) / max(1.0, abs(fd)))
    return worst < tol, f"max relative VAE gradient error {worst:.3g} (tol {tol})"


def check_ig_completeness(tol: float = 1e-3, steps: int = 200, seed: int = 0):
    """Sum of attributions equals f(x) - f(baseline)."""
    from .evalharness import integrated_gradients

    rng = rng_stream(seed, "misc", 6)
    spec = net.MlpSpec.make(12, (32, 16), 1, activation="elu")
    params = net.init_params(spec, rng)

    def grad_fn(batch):
        y, g = net.input_grad(params, batch, spec)
        return y[:, 0], g

    worst = 0.0
    for _ in range(10):
        x = rng.standard_normal(12)
        x0 = rng.standard_normal(12) * 0.1
        attr = integrated_gradients(grad_fn, x, x0, steps=steps)
        f1, _ = net.forward(params, x[None, :], spec)
        f0, _ = net.forward(params, x0[None, :], spec)
        worst = max(worst, abs(attr.sum() - float(f1[0, 0] - f0[0, 0])))
    return worst < tol, f"max |sum(IG) - (f(x)-f(x0))| = {worst:.3g} (tol {tol})"


def collect_grounded_states(n_states: int = 1000, seed: int = 0,
                            acc_limit: float = 0.3):
    """Quasi-static perturbed stances: (com, com_acc, contact list) samples."""
    from .core import GRAVITY, RunConfig
    from .envs import VecEnv

    cfg = RunConfig(seed=seed)
    env = VecEnv(cfg, mode="goal", n_envs=16, seed=seed, terrain_kinds=["flat"],
                 fixed_command=0.0, noise_scale=0.0, randomize=False)
    rng = rng_stream(seed, "misc", 7)
    samples = []
    t = 0
    while len(samples) < n_states and t < 3000:
        push = 18.0 * np.sin(0.8 * t * cfg.dt * 2 * np.pi + np.arange(env.n))
        env.active_force[:, 0, 0] = push
        actions = 0.15 * rng.standard_normal((env.n, 8)) * 0.0 \
            + 0.10 * np.sin(0.5 * t * cfg.dt * 2 * np.pi + np.arange(8))[None, :]
        info = env.step(actions)
        t += 1
        if t < 50:
            continue  # let the stance settle
        for i in range(env.n):
            acc = info["com_acc"][i]
            active = info["contact_active"][i]
            if (np.abs(acc) < acc_limit).all() and active[:4].any() \
                    and not info["done"][i]:
                contacts = [(info["contact_points"][i, j, 0],
                             info["contact_points"][i, j, 1],
                             info["contact_forces"][i, j, 0],
                             info["contact_forces"][i, j, 1])
                            for j in range(active.shape[0]) if active[j]]
                samples.append((info["com"][i].copy(), acc.copy(), contacts,
                                GRAVITY))
    return samples[:n_states]


def check_zmp(tol_mm: float = 5.0, n_states: int = 1000, seed: int = 0):
    """Analytic LIPM ZMP vs independent contact-moment balance."""
    from .stability import compute_zmp, moment_balance_zmp

    samples = collect_grounded_states(n_states, seed)
    if len(samples) < n_states // 2:
        return False, f"only {len(samples)} grounded states collected"
    worst = 0.0
    for com, acc, contacts, g in samples:
        z_lipm = compute_zmp(com[0], com[1], acc[0], g)
        z_mb = moment_balance_zmp(contacts)
        worst = max(worst, abs(z_lipm - z_mb))
    return worst * 1000.0 < tol_mm, \
        f"max |ZMP_lipm - ZMP_moment| = {worst * 1000:.2f} mm over {len(samples)} states"


def check_static_margin(seed: int = 0, seconds: float = 10.0, min_frac: float = 0.99):
    """PD-held default stance keeps the feasibility margin positive."""
    from .core import RunConfig
    from .envs import VecEnv

    cfg = RunConfig(seed=seed)
    env = VecEnv(cfg, mode="goal", n_envs=4, seed=seed, terrain_kinds=["flat"],
                 fixed_command=0.0, noise_scale=0.0, randomize=False)
    steps = int(seconds * cfg.control_hz)
    positive = 0
    total = 0
    for t in range(steps):
        info = env.step(np.zeros((env.n, 8)))
        positive += int((info["margin"] > 0).sum())
        total += env.n
        if info["done"].any():
            return False, "stance fell during the static margin check"
    frac = positive / total
    return frac >= min_frac, f"margin > 0 for {100 * frac:.2f}% of {seconds:.0f} s"


ALL_CHECKS = {
    "mlp_gradients": lambda: check_mlp_gradients(n_nets=20),
    "gae": check_gae,
    "double_dqn": check_double_dqn,
    "vae_gradients": check_vae_gradients,
    "ig_completeness": check_ig_completeness,
    "zmp": lambda: check_zmp(n_states=300),
    "static_margin": lambda: check_static_margin(seconds=4.0),
}


def run_all(verbose: bool = False) -> bool:
    ok_all = True
    for name, fn in ALL_CHECKS.items():
        ok, detail = fn()
        ok_all &= ok
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)
    return ok_all
