"""VAE estimator: observation history -> latent context + explicit estimates.

The encoder maps the flattened (scaled) history window to a diagonal Gaussian
over the latent plus an explicit estimate head e = (vx, vz, zmp_offset,
feasibility_margin); the decoder predicts the next observation from (z, o_t).
The prior is learnable (mu_p, log_sigma_p free parameters).  Gradients are
hand-derived and finite-difference checked; training never touches privileged
data at deployment time (estimates replace it).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net
from .core import OBS_DIM, RunConfig, rng_stream

E_DIM = 4
LOGSIG_MIN, LOGSIG_MAX = -6.0, 2.0


def gaussian_kl(mu_z, log_sig_z, mu_p, log_sig_p) -> np.ndarray:
    """Closed-form KL(N(mu_z, sig_z^2) || N(mu_p, sig_p^2)) per sample (summed over dims)."""
    var_z = np.exp(2.0 * log_sig_z)
    var_p = np.exp(2.0 * log_sig_p)
    per_dim = log_sig_p - log_sig_z + (var_z + (mu_z - mu_p) ** 2) / (2.0 * var_p) - 0.5
    return per_dim.sum(axis=-1)


@dataclass
class Vae:
    enc: list
    dec: list
    mu_p: np.ndarray
    log_sig_p: np.ndarray
    specs: dict
    latent: int
    opt: net.OptimizerState
    kl_coeff: float = 1.0

    @staticmethod
    def create(cfg: RunConfig, rng: np.random.Generator) -> "Vae":
        latent = cfg.vae.latent_dim
        in_dim = cfg.h_len * OBS_DIM
        enc_spec = net.MlpSpec.make(in_dim, tuple(cfg.vae.encoder_hidden),
                                    2 * latent + E_DIM)
        dec_spec = net.MlpSpec.make(latent + OBS_DIM, tuple(cfg.vae.decoder_hidden),
                                    OBS_DIM)
        vae = Vae(enc=net.init_params(enc_spec, rng),
                  dec=net.init_params(dec_spec, rng),
                  mu_p=np.zeros(latent), log_sig_p=np.zeros(latent),
                  specs={"enc": enc_spec, "dec": dec_spec},
                  latent=latent, opt=None, kl_coeff=cfg.vae.kl_coeff)
        vae.opt = net.OptimizerState.for_params(vae.param_list(), lr=cfg.vae.lr)
        return vae

    def param_list(self) -> list:
        return net.flatten_mlp(self.enc) + net.flatten_mlp(self.dec) \
            + [self.mu_p, self.log_sig_p]

    def set_from_flat(self, flat: list):
        ne = 2 * len(self.enc)
        nd = 2 * len(self.dec)
        self.enc = net.unflatten_mlp(flat[:ne])
        self.dec = net.unflatten_mlp(flat[ne:ne + nd])
        self.mu_p = flat[ne + nd]
        self.log_sig_p = np.clip(flat[ne + nd + 1], LOGSIG_MIN, LOGSIG_MAX)

    def _heads(self, hist_flat):
        out, tape = net.forward(self.enc, hist_flat, self.specs["enc"])
        L = self.latent
        mu = out[:, :L]
        log_sig = np.clip(out[:, L:2 * L], LOGSIG_MIN, LOGSIG_MAX)
        raw_log_sig = out[:, L:2 * L]
        e = out[:, 2 * L:]
        return mu, log_sig, raw_log_sig, e, tape

    def encode(self, hist_flat, rng: np.random.Generator | None = None,
               sample: bool = True):
        """(z, mu, sigma, e); z is a reparameterized draw in sample mode, mu otherwise."""
        mu, log_sig, _, e, _ = self._heads(np.atleast_2d(hist_flat))
        sig = np.exp(log_sig)
        if sample:
            if rng is None:
                raise ValueError("sampling needs an rng")
            z = mu + sig * rng.standard_normal(mu.shape)
        else:
            z = mu.copy()
        return z, mu, sig, e

    def decode(self, z, obs):
        x = np.concatenate((np.atleast_2d(z), np.atleast_2d(obs)), axis=1)
        y, _ = net.forward(self.dec, x, self.specs["dec"])
        return y

    def loss_and_grads(self, hist_flat, obs, next_obs, e_true,
                       rng: np.random.Generator):
        """Full VAE loss (recon + estimate + KL to the learnable prior) and
        exact gradients for every parameter including the prior."""
        hist_flat = np.atleast_2d(hist_flat)
        b = hist_flat.shape[0]
        mu, log_sig, raw_log_sig, e, enc_tape = self._heads(hist_flat)
        sig = np.exp(log_sig)
        xi = rng.standard_normal(mu.shape)
        z = mu + sig * xi

        dec_in = np.concatenate((z, np.atleast_2d(obs)), axis=1)
        pred, dec_tape = net.forward(self.dec, dec_in, self.specs["dec"])
        resid = pred - np.atleast_2d(next_obs)
        e_err = e - np.atleast_2d(e_true)
        log_sig_p = np.clip(self.log_sig_p, LOGSIG_MIN, LOGSIG_MAX)
        kl = gaussian_kl(mu, log_sig, self.mu_p, log_sig_p)
        loss = float(np.mean(np.sum(resid ** 2, axis=1)
                             + np.sum(e_err ** 2, axis=1)
                             + self.kl_coeff * kl))

        # reconstruction path
        dpred = 2.0 * resid / b
        ddec, ddec_in = net.backward(dec_tape, dpred)
        dz = ddec_in[:, :self.latent]
        dmu = dz.copy()
        dlog_sig = dz * xi * sig

        # estimate head and KL
        de = 2.0 * e_err / b
        var_p = np.exp(2.0 * log_sig_p)
        c = self.kl_coeff / b
        dmu += c * (mu - self.mu_p) / var_p
        dlog_sig += c * (np.exp(2.0 * log_sig) / var_p - 1.0)
        dmu_p = -c * ((mu - self.mu_p) / var_p).sum(axis=0)
        dlog_sig_p = c * (1.0 - (np.exp(2.0 * log_sig)
                                 + (mu - self.mu_p) ** 2) / var_p).sum(axis=0)
        dlog_sig_p = np.where((self.log_sig_p > LOGSIG_MIN) & (self.log_sig_p < LOGSIG_MAX),
                              dlog_sig_p, 0.0)
        # encoder log-sigma clamp kills the gradient outside the window
        clamped = (raw_log_sig <= LOGSIG_MIN) | (raw_log_sig >= LOGSIG_MAX)
        dlog_sig = np.where(clamped, 0.0, dlog_sig)
        denc_out = np.concatenate((dmu, dlog_sig, de), axis=1)
        denc, _ = net.backward(enc_tape, denc_out)

        grads = []
        for dw, db in denc:
            grads.extend((dw, db))
        for dw, db in ddec:
            grads.extend((dw, db))
        grads.extend((dmu_p, dlog_sig_p))
        return loss, grads, float(np.mean(kl))

    def train_step(self, hist_flat, obs, next_obs, e_true,
                   rng: np.random.Generator) -> float:
        loss, grads, kl = self.loss_and_grads(hist_flat, obs, next_obs, e_true, rng)
        if kl < -1e-9:
            raise AssertionError("negative KL")
        flat = net.adam_step(self.param_list(), grads, self.opt)
        self.set_from_flat(flat)
        return loss

    def pack(self, arrays: dict, prefix: str = "vae"):
        net.pack_mlp(f"{prefix}_enc", self.enc, arrays)
        net.pack_mlp(f"{prefix}_dec", self.dec, arrays)
        arrays[f"{prefix}_mu_p"] = self.mu_p
        arrays[f"{prefix}_log_sig_p"] = self.log_sig_p

    @staticmethod
    def unpack(arrays: dict, cfg: RunConfig, prefix: str = "vae") -> "Vae":
        vae = Vae.create(cfg, rng_stream(0, "vae"))
        vae.enc = net.unpack_mlp(f"{prefix}_enc", arrays)
        vae.dec = net.unpack_mlp(f"{prefix}_dec", arrays)
        vae.mu_p = arrays[f"{prefix}_mu_p"]
        vae.log_sig_p = arrays[f"{prefix}_log_sig_p"]
        return vae


def collect_supervised_rollouts(cfg: RunConfig, n_steps: int, seed: int,
                                policy=None, vae: Vae | None = None,
                                mode: str = "goal") -> dict:
    """Roll environments to build (history, obs, next_obs, e_true) training rows.

    With no policy, actions hold the default pose with small sinusoidal
    excitation so the histories carry informative dynamics.
    """
    from .envs import OBS_SCALE, VecEnv
    from .rl import assemble_extra

    env = VecEnv(cfg, mode=mode, seed=seed, seed_stream_tag="vae")
    rng = rng_stream(seed, "vae", 7)
    rows = {"hist": [], "obs": [], "next_obs": [], "e_true": [], "keep": []}
    n = env.n
    t = 0
    while t * n < n_steps:
        hist = env.observe_history()
        if policy is None:
            phase = 2.0 * np.pi * (0.8 * t * cfg.dt)
            action = 0.6 * np.sin(phase + np.arange(8))[None, :] \
                + 0.1 * rng.standard_normal((n, 8))
        else:
            if vae is not None:
                z, _, _, e = vae.encode((hist * OBS_SCALE).reshape(n, -1), rng)
                extra = assemble_extra(cfg, e, z)
            else:
                extra = np.zeros((n, 4 + 2 * cfg.freq_bands + cfg.vae.latent_dim))
            action, _, _ = policy.act(hist, extra, rng)
        info = env.step(action)
        rows["hist"].append(hist)
        rows["obs"].append(hist[:, 0, :])
        rows["next_obs"].append(env.history[:, 0, :].copy())
        rows["e_true"].append(info["priv"][:, 0:E_DIM].copy())
        rows["keep"].append(~info["done"])
        t += 1
    out = {k: np.concatenate(v) for k, v in rows.items()}
    keep = out.pop("keep")
    return {k: v[keep] for k, v in out.items()}


def velocity_rmse(vae: Vae, data: dict) -> float:
    from .envs import OBS_SCALE
    hist = (data["hist"] * OBS_SCALE).reshape(len(data["hist"]), -1)
    _, _, _, e = vae.encode(hist, sample=False)
    err = e[:, 0:2] - data["e_true"][:, 0:2]
    return float(np.sqrt(np.mean(err ** 2)))


def margin_rmse(vae: Vae, data: dict) -> float:
    from .envs import OBS_SCALE
    hist = (data["hist"] * OBS_SCALE).reshape(len(data["hist"]), -1)
    _, _, _, e = vae.encode(hist, sample=False)
    err = e[:, 3] - data["e_true"][:, 3]
    return float(np.sqrt(np.mean(err ** 2)))


def train_estimator(cfg: RunConfig, data: dict | None = None, seed: int | None = None,
                    iters: int = 400, eval_every: int = 20, holdout_frac: float = 0.2,
                    out_dir=None) -> tuple:
    """Supervised estimator training on rollout data; returns (vae, eval history).

    Eval history rows are (iteration, velocity_rmse, margin_rmse) on held-out
    rollouts.
    """
    import os

    seed = cfg.seed if seed is None else seed
    if data is None:
        data = collect_supervised_rollouts(cfg, 40_000, seed)
    n = len(data["hist"])
    n_hold = max(1, int(holdout_frac * n))
    order = rng_stream(seed, "vae", 3).permutation(n)
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    train = {k: v[train_idx] for k, v in data.items()}
    hold = {k: v[hold_idx] for k, v in data.items()}

    from .envs import OBS_SCALE
    vae = Vae.create(cfg, rng_stream(seed, "vae"))
    rng = rng_stream(seed, "vae", 4)
    hist_flat = (train["hist"] * OBS_SCALE).reshape(len(train["hist"]), -1)
    obs = train["obs"] * OBS_SCALE
    next_obs = train["next_obs"] * OBS_SCALE
    e_true = train["e_true"]
    history = []
    for it in range(iters):
        idx = rng.choice(len(hist_flat), size=min(cfg.vae.batch_size, len(hist_flat)),
                         replace=False)
        vae.train_step(hist_flat[idx], obs[idx], next_obs[idx], e_true[idx], rng)
        if it % eval_every == 0 or it == iters - 1:
            history.append((it, velocity_rmse(vae, hold), margin_rmse(vae, hold)))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        arrays: dict = {}
        vae.pack(arrays)
        from .rl import code_hash
        net.save_checkpoint(os.path.join(out_dir, "estimator.npz"),
                            {"kind": "estimator", "seed": seed,
                             "code_hash": code_hash()}, arrays)
    return vae, history
