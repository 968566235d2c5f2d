"""Minimal fully-connected network engine with exact analytic gradients.

Hand-rolled on purpose: float64 numpy forward/backward passes whose parameter
AND input gradients are verified against finite differences, plus a
forward-over-reverse pass (`directional_grad_params`) that differentiates the
input-gradient norm — needed for the discriminator's gradient penalty.

Parameters are plain lists of (W, b) arrays so composite networks (encoder +
merger + heads) can be optimized jointly with one global-norm-clipped Adam
step.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("elu", "relu", "tanh", "linear")


def _act(name, z):
    if name == "elu":
        out = z.copy()
        neg = z < 0
        out[neg] = np.expm1(z[neg])
        return out
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation: {name}")


def _act_d(name, z):
    if name == "elu":
        out = np.ones_like(z)
        neg = z < 0
        out[neg] = np.exp(z[neg])
        return out
    if name == "relu":
        return (z > 0).astype(float)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "linear":
        return np.ones_like(z)
    raise ValueError(name)


def _act_dd(name, z):
    if name == "elu":
        return np.where(z > 0, 0.0, np.exp(z))
    if name == "relu":
        return np.zeros_like(z)
    if name == "tanh":
        t = np.tanh(z)
        return -2.0 * t * (1.0 - t * t)
    if name == "linear":
        return np.zeros_like(z)
    raise ValueError(name)


@dataclass
class MlpSpec:
    """Layer sizes [in, h1, ..., out], per-layer activations, optional dropout."""

    sizes: tuple
    activations: tuple            # one per layer (len(sizes) - 1)
    dropout: tuple = ()           # per layer; empty = all zero

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.activations = tuple(self.activations)
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need one activation per layer")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ValueError(f"activations must be in {ACTIVATIONS}")
        if not self.dropout:
            self.dropout = tuple(0.0 for _ in self.activations)
        if any(not (0.0 <= d < 1.0) for d in self.dropout):
            raise ValueError("dropout must be in [0, 1)")
        if len(self.sizes) < 2 or any(s <= 0 for s in self.sizes):
            raise ValueError("bad layer sizes")

    @staticmethod
    def make(in_dim, hidden, out_dim, activation="elu", out_activation="linear",
             dropout=0.0) -> "MlpSpec":
        sizes = (in_dim, *hidden, out_dim)
        acts = tuple([activation] * len(hidden) + [out_activation])
        drops = tuple([dropout] * len(hidden) + [0.0])
        return MlpSpec(sizes=sizes, activations=acts, dropout=drops)


def _orthogonal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols]


def init_params(spec: MlpSpec, rng: np.random.Generator, out_gain: float = 1.0) -> list:
    """Orthogonal-ish scaled weights, zero biases."""
    params = []
    n_layers = len(spec.sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = spec.sizes[i], spec.sizes[i + 1]
        w = _orthogonal(fan_out, fan_in, rng)
        gain = np.sqrt(2.0) if spec.activations[i] in ("elu", "relu") else 1.0
        if i == n_layers - 1:
            gain = out_gain
        params.append((gain * w, np.zeros(fan_out)))
    return params


@dataclass
class Tape:
    spec: MlpSpec
    params: list
    inputs: list = field(default_factory=list)   # a_{l-1} per layer
    preacts: list = field(default_factory=list)  # z_l per layer
    masks: list = field(default_factory=list)    # dropout masks (or None)
    squeezed: bool = False


def forward(params: list, x, spec: MlpSpec, train_mode: bool = False,
            rng: np.random.Generator | None = None):
    """Run the MLP; returns (y, tape).  Dropout is drawn from rng in train mode."""
    x = np.asarray(x, dtype=float)
    squeezed = x.ndim == 1
    a = x[None, :] if squeezed else x
    if a.shape[1] != spec.sizes[0]:
        raise ValueError(f"input width {a.shape[1]} != {spec.sizes[0]}")
    tape = Tape(spec=spec, params=params, squeezed=squeezed)
    for i, (w, b) in enumerate(params):
        tape.inputs.append(a)
        z = a @ w.T + b
        tape.preacts.append(z)
        a = _act(spec.activations[i], z)
        p = spec.dropout[i]
        if train_mode and p > 0.0:
            if rng is None:
                raise ValueError("dropout in train mode needs an rng")
            mask = (rng.random(z.shape) >= p) / (1.0 - p)
            a = a * mask
            tape.masks.append(mask)
        else:
            tape.masks.append(None)
    y = a[0] if squeezed else a
    return y, tape


def backward(tape: Tape, dy):
    """Exact gradients of <dy, y> w.r.t. params and input: (dparams, dx)."""
    dy = np.asarray(dy, dtype=float)
    d = dy[None, :] if tape.squeezed else dy
    spec, params = tape.spec, tape.params
    dparams = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        w, _ = params[i]
        if tape.masks[i] is not None:
            d = d * tape.masks[i]
        if spec.activations[i] == "linear":
            e = d
        else:
            e = d * _act_d(spec.activations[i], tape.preacts[i])
        dparams[i] = (e.T @ tape.inputs[i], e.sum(axis=0))
        d = e @ w
    dx = d[0] if tape.squeezed else d
    return dparams, dx


def input_grad(params: list, x, spec: MlpSpec):
    """Gradient of a scalar-output MLP w.r.t. its input, per sample."""
    y, tape = forward(params, x, spec)
    ones = np.ones_like(np.atleast_2d(y))
    if tape.squeezed:
        ones = ones[0]
    _, dx = backward(tape, ones)
    return y, dx


def directional_grad_params(params: list, x, u, coeff, spec: MlpSpec) -> list:
    """d/dtheta of sum_b coeff_b * (u_b . grad_x f)(x_b) for a scalar-output MLP.

    Forward-tangent pass computes S_b = u_b . grad_x f(x_b); a reverse pass
    through the augmented graph yields exact parameter gradients of the
    weighted sum.  This is the second-order path behind the gradient penalty.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    coeff = np.asarray(coeff, dtype=float).reshape(-1, 1)
    a, t = x, u
    acts, tans, zs, zdots = [], [], [], []
    for i, (w, b) in enumerate(params):
        acts.append(a)
        tans.append(t)
        z = a @ w.T + b
        zdot = t @ w.T
        zs.append(z)
        zdots.append(zdot)
        a = _act(spec.activations[i], z)
        t = _act_d(spec.activations[i], z) * zdot
    # S = t[:, 0] for the scalar output; reverse pass with t_bar = coeff
    t_bar = np.broadcast_to(coeff, t.shape).copy()
    a_bar = np.zeros_like(a)
    dparams = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        w, _ = params[i]
        name = spec.activations[i]
        sd = _act_d(name, zs[i])
        sdd = _act_dd(name, zs[i])
        z_bar = a_bar * sd + t_bar * sdd * zdots[i]
        zdot_bar = t_bar * sd
        dparams[i] = (z_bar.T @ acts[i] + zdot_bar.T @ tans[i], z_bar.sum(axis=0))
        a_bar = z_bar @ w
        t_bar = zdot_bar @ w
    return dparams


# ---------------------------------------------------------------------------
# Adam over flat parameter lists
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float = 1.0
    step_count: int = 0
    skipped: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @staticmethod
    def for_params(flat_params: list, lr: float, max_grad_norm: float = 1.0) -> "OptimizerState":
        return OptimizerState(
            lr=lr, max_grad_norm=max_grad_norm,
            m=[np.zeros_like(p) for p in flat_params],
            v=[np.zeros_like(p) for p in flat_params])


def flatten_mlp(params: list) -> list:
    """[(W, b), ...] -> [W, b, W, b, ...] view list."""
    out = []
    for w, b in params:
        out.extend((w, b))
    return out


def unflatten_mlp(flat: list) -> list:
    return [(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)]


def global_norm(grads: list) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def adam_step(params: list, grads: list, opt: OptimizerState) -> list:
    """Bias-corrected Adam over a flat list of arrays, global-norm clipped.

    Non-finite gradients skip the update (logged via opt.skipped).
    """
    if any(not np.all(np.isfinite(g)) for g in grads):
        opt.skipped += 1
        return params
    norm = global_norm(grads)
    scale = opt.max_grad_norm / norm if norm > opt.max_grad_norm else 1.0
    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = opt.m[i], opt.v[i]
        m *= opt.beta1
        m += (1 - opt.beta1) * scale * g
        v *= opt.beta2
        v += (1 - opt.beta2) * (scale * scale) * (g * g)
        new_params.append(p - opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps))
    return new_params


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, meta: dict, arrays: dict):
    """Versioned npz checkpoint; float64 arrays round-trip bit-exactly."""
    payload = {"__meta__": np.frombuffer(
        json.dumps({"version": CHECKPOINT_VERSION, **meta}, sort_keys=True).encode(),
        dtype=np.uint8)}
    for k, v in arrays.items():
        payload[k] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple:
    """Returns (meta, arrays)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {meta.get('version')}")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return meta, arrays


def pack_mlp(prefix: str, params: list, arrays: dict):
    for i, (w, b) in enumerate(params):
        arrays[f"{prefix}_w{i}"] = w
        arrays[f"{prefix}_b{i}"] = b


def unpack_mlp(prefix: str, arrays: dict) -> list:
    params = []
    i = 0
    while f"{prefix}_w{i}" in arrays:
        params.append((arrays[f"{prefix}_w{i}"], arrays[f"{prefix}_b{i}"]))
        i += 1
    if not params:
        raise KeyError(f"no parameters under prefix '{prefix}'")
    return params
