"""Shared domain types, configuration, RNG streams, and observation assembly.

Everything downstream (simulator, policies, trainers, evaluation) exchanges
the plain value types defined here.  All randomness in the project flows
through :func:`rng_stream` so that a (config, seed) pair fully determines a
run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np

GRAVITY = 9.81

# Observation layout: (name, width).  The policy input assembly, the
# estimator and the checkpoint format all assume this exact ordering, so the
# checksum below is asserted whenever a RunConfig is built.
OBS_LAYOUT = (
    ("base_pitch_rate", 1),
    ("base_pitch", 1),
    ("joint_pos", 8),
    ("joint_vel", 8),
    ("prev_action", 8),
    ("projected_gravity", 2),
    ("command", 1),
)
OBS_DIM = sum(w for _, w in OBS_LAYOUT)


def obs_layout_checksum() -> str:
    """Checksum of the observation layout, pinned by tests and asserted at startup."""
    return hashlib.sha256(repr(OBS_LAYOUT).encode()).hexdigest()[:16]


OBS_LAYOUT_CHECKSUM = "1e2cf3a7d2330d7c"


class InvalidStateError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class RobotState:
    """Ground-truth simulator state of the planar biped.

    Positions are world frame (x forward, z up), pitch is the CCW torso angle
    in the x-z plane (0 = upright).  ``contact_points`` holds the active
    ground contacts of the last substep as (x, z, normal_force, link_id).
    """

    base_x: float = 0.0
    base_z: float = 0.0
    base_pitch: float = 0.0
    joint_pos: np.ndarray = field(default_factory=lambda: np.zeros(8))
    base_vx: float = 0.0
    base_vz: float = 0.0
    base_pitch_rate: float = 0.0
    joint_vel: np.ndarray = field(default_factory=lambda: np.zeros(8))
    contact_points: list = field(default_factory=list)
    time: float = 0.0

    def qpos(self) -> np.ndarray:
        return np.concatenate(([self.base_x, self.base_z, self.base_pitch], self.joint_pos))

    def qvel(self) -> np.ndarray:
        return np.concatenate(([self.base_vx, self.base_vz, self.base_pitch_rate], self.joint_vel))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.qpos())) and np.all(np.isfinite(self.qvel())))

    @staticmethod
    def from_qpos_qvel(qpos, qvel, contact_points=None, time=0.0) -> "RobotState":
        qpos = np.asarray(qpos, dtype=float)
        qvel = np.asarray(qvel, dtype=float)
        return RobotState(
            base_x=float(qpos[0]), base_z=float(qpos[1]), base_pitch=float(qpos[2]),
            joint_pos=qpos[3:].copy(),
            base_vx=float(qvel[0]), base_vz=float(qvel[1]), base_pitch_rate=float(qvel[2]),
            joint_vel=qvel[3:].copy(),
            contact_points=list(contact_points or []), time=float(time),
        )


@dataclass
class Command:
    """Forward-velocity command v_x in m/s."""

    vx_cmd: float = 0.0


@dataclass
class Observation:
    """One proprioceptive observation plus the command channel (29 dims)."""

    base_pitch_rate: float
    base_pitch: float
    joint_pos: np.ndarray
    joint_vel: np.ndarray
    prev_action: np.ndarray
    projected_gravity: np.ndarray
    command: float

    def vector(self) -> np.ndarray:
        v = np.concatenate((
            [self.base_pitch_rate, self.base_pitch],
            self.joint_pos, self.joint_vel, self.prev_action,
            self.projected_gravity, [self.command],
        ))
        assert v.shape == (OBS_DIM,)
        return v

    @staticmethod
    def from_vector(v) -> "Observation":
        v = np.asarray(v, dtype=float)
        return Observation(
            base_pitch_rate=float(v[0]), base_pitch=float(v[1]),
            joint_pos=v[2:10].copy(), joint_vel=v[10:18].copy(),
            prev_action=v[18:26].copy(), projected_gravity=v[26:28].copy(),
            command=float(v[28]),
        )


@dataclass
class ObservationHistory:
    """Fixed-length window of observations, newest first."""

    window: np.ndarray  # (H, OBS_DIM)

    @staticmethod
    def fresh(obs: Observation, h: int) -> "ObservationHistory":
        v = obs.vector()
        return ObservationHistory(window=np.tile(v, (h, 1)))

    def newest(self) -> np.ndarray:
        return self.window[0]


def push_history(hist: ObservationHistory, obs: Observation) -> ObservationHistory:
    """Shift the window: new observation in front, oldest dropped."""
    w = np.empty_like(hist.window)
    w[0] = obs.vector()
    w[1:] = hist.window[:-1]
    return ObservationHistory(window=w)


@dataclass
class PrivilegedInfo:
    """Simulator-only signals unavailable at deployment time."""

    base_lin_vel: np.ndarray = field(default_factory=lambda: np.zeros(2))
    zmp_offset: float = 0.0
    feasibility_margin: float = 0.0
    terrain_heights: np.ndarray = field(default_factory=lambda: np.zeros(5))
    ext_force: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def vector(self) -> np.ndarray:
        return np.concatenate((
            self.base_lin_vel, [self.zmp_offset, self.feasibility_margin],
            self.terrain_heights, self.ext_force,
        ))


PRIV_DIM = 11


class TaintGuard:
    """Wraps an array and records whether anyone read it.

    The evaluation path must never consume privileged data; suites wrap the
    privileged vectors with this guard and assert `read_count == 0` afterwards.
    """

    def __init__(self, values: np.ndarray):
        self._values = values
        self.read_count = 0

    @property
    def values(self) -> np.ndarray:
        self.read_count += 1
        return self._values


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

@dataclass
class NoiseModel:
    """Additive uniform observation noise; half-widths follow the intense-noise table."""

    enabled: bool = False
    scale: float = 1.0
    dof_pos: float = 0.04
    dof_vel: float = 0.30
    ang_vel: float = 1.00
    imu: float = 0.40          # mapped to base_pitch (planar IMU channel)
    gravity: float = 0.10
    pd_gains: float = 0.20     # fractional PD-gain fluctuation, applied by the simulator


def build_observation(state: RobotState, cmd: Command, prev_action, noise: NoiseModel,
                      rng: np.random.Generator) -> Observation:
    """Assemble the 29-dim observation from a state, with optional uniform noise.

    Projected gravity is the world gravity unit vector (0, -1) expressed in
    the base frame.
    """
    if not state.is_finite():
        raise InvalidStateError("invalid state")
    th = state.base_pitch
    proj_grav = np.array([-np.sin(th), -np.cos(th)])
    obs = Observation(
        base_pitch_rate=state.base_pitch_rate,
        base_pitch=state.base_pitch,
        joint_pos=np.asarray(state.joint_pos, dtype=float).copy(),
        joint_vel=np.asarray(state.joint_vel, dtype=float).copy(),
        prev_action=np.asarray(prev_action, dtype=float).copy(),
        projected_gravity=proj_grav,
        command=float(cmd.vx_cmd),
    )
    if noise.enabled and noise.scale > 0.0:
        s = noise.scale
        u = lambda width, n=1: rng.uniform(-width * s, width * s, size=n)
        obs.base_pitch_rate += float(u(noise.ang_vel)[0])
        obs.base_pitch += float(u(noise.imu)[0])
        obs.joint_pos = obs.joint_pos + u(noise.dof_pos, 8)
        obs.joint_vel = obs.joint_vel + u(noise.dof_vel, 8)
        obs.projected_gravity = obs.projected_gravity + u(noise.gravity, 2)
    return obs


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

_STREAM_TAGS = {
    "env": 1, "policy": 2, "terrain": 3, "domain": 4, "noise": 5,
    "dropout": 6, "vae": 7, "selector": 8, "eval": 9, "init": 10,
    "disturbance": 11, "command": 12, "expert": 13, "misc": 14,
}


def rng_stream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Deterministic, independent RNG stream for (seed, tag, index)."""
    if tag not in _STREAM_TAGS:
        raise ValueError(f"unknown rng stream tag: {tag}")
    ss = np.random.SeedSequence(entropy=[int(seed), _STREAM_TAGS[tag], int(index)])
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class PpoConfig:
    lr: float = 2e-4
    clip: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    entropy_coef: float = 0.005
    value_coef: float = 1.0
    gae_lambda: float = 0.95
    horizon: int = 24
    num_envs: int = 64
    iterations: int = 1000
    max_grad_norm: float = 1.0
    log_std_init: float = -1.0
    action_scale: float = 0.25
    actor_hidden: tuple = (256, 128, 64)
    critic_hidden: tuple = (256, 128, 64)
    encoder_hidden: tuple = (32,)
    encoder_out: int = 16
    merged_dim: int = 48
    checkpoint_every: int = 200


@dataclass
class DqnConfig:
    lr: float = 1e-4
    batch_size: int = 128
    replay_capacity: int = 2_000_000
    target_update: int = 50
    eps_init: float = 0.1
    eps_decay: float = 0.999
    eps_min: float = 0.001
    switch_coeff: float = 0.001
    term_penalty: float = 50.0
    hidden: tuple = (128, 64, 32)
    dropout: float = 0.1
    rounds: int = 30
    num_envs: int = 16
    select_every: int = 1      # selector acts every control step by default


@dataclass
class DiscConfig:
    lr: float = 2e-5
    hidden: tuple = (256, 128)
    grad_penalty: float = 1.0
    lamda: float = 1.0
    replay_capacity: int = 500_000
    expert_capacity: int = 200_000
    expert_fetch: int = 512
    batch_size: int = 4096
    reward_clamp: float = 10.0


@dataclass
class VaeConfig:
    latent_dim: int = 16
    encoder_hidden: tuple = (128, 64)
    decoder_hidden: tuple = (128, 64)
    lr: float = 1e-4
    kl_coeff: float = 1.0
    batch_size: int = 512
    updates_per_iter: int = 4
    mode: str = "joint"        # "joint": updated during policy training; "post": trained afterwards


@dataclass
class RandomizationConfig:
    enabled: bool = True
    friction: tuple = (0.6, 2.0)
    base_mass_delta: tuple = (-1.0, 5.0)
    base_com_shift: tuple = (-0.07, 0.07)
    motor_strength: tuple = (0.8, 1.2)
    action_delay: tuple = (0, 5)
    link_mass_scale: tuple = (0.7, 1.3)
    gravity_delta: tuple = (-0.1, 0.1)


@dataclass
class CurriculumConfig:
    enabled: bool = True
    up_threshold: float = 0.70
    down_threshold: float = 0.40
    max_level: int = 9


@dataclass
class CommandConfig:
    train_range: tuple = (-0.6, 2.5)
    malicious_hz: float = 5.0
    malicious_min_level: int = 5


@dataclass
class RewardConfig:
    alpha1: float = 1.0
    sigma_lin_sq: float = 0.25
    recovery_sigma_lin_sq: float = 1.0
    stand_weight: float = 0.5
    w_dof_limit: float = -1e2
    w_dof_acc: float = -1e-7
    w_dof_vel: float = -5e-4
    w_action_rate: float = -2e-3
    w_torque: float = -1e-5
    w_collision: float = -10.0
    collision_force_threshold: float = 1.0
    eps_phi: float = 0.01
    mu_eta: float = 0.01
    mu_init: float = 0.0


@dataclass
class RunConfig:
    """Every tunable of the pipeline; loads from / saves to flat `key = value` text."""

    seed: int = 0
    h_len: int = 10
    gamma: float = 0.99
    control_hz: int = 100
    substeps: int = 10
    episode_seconds: float = 12.0
    noise_scale: float = 1.0
    freq_bands: int = 4
    workers: int = 0           # 0 = auto
    ppo: PpoConfig = field(default_factory=PpoConfig)
    dqn: DqnConfig = field(default_factory=DqnConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    commands: CommandConfig = field(default_factory=CommandConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if obs_layout_checksum() != OBS_LAYOUT_CHECKSUM:
            raise AssertionError("observation layout changed; update dependent modules")

    @property
    def dt(self) -> float:
        return 1.0 / self.control_hz

    @property
    def episode_steps(self) -> int:
        return int(round(self.episode_seconds * self.control_hz))


def _flatten_config(obj, prefix="") -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(_flatten_config(v, prefix=key + "."))
        else:
            out[key] = v
    return out


def config_to_text(cfg: RunConfig) -> str:
    """Canonical text form: sorted dotted keys, one `key = value` per line."""
    flat = _flatten_config(cfg)
    lines = []
    for k in sorted(flat):
        v = flat[k]
        if isinstance(v, tuple):
            v = list(v)
        lines.append(f"{k} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"


def _assign(cfg, dotted: str, raw: str, line_no: int, col: int):
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not hasattr(obj, p) or not dataclasses.is_dataclass(getattr(obj, p)):
            raise ConfigError(f"line {line_no}, col {col}: unknown config section '{dotted}'")
        obj = getattr(obj, p)
    name = parts[-1]
    if not hasattr(obj, name):
        raise ConfigError(f"line {line_no}, col {col}: unknown config key '{dotted}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw.strip()
    current = getattr(obj, name)
    if isinstance(current, tuple) and isinstance(value, list):
        value = tuple(value)
    elif isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"line {line_no}, col {col}: expected true/false for '{dotted}'")
    elif isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"line {line_no}, col {col}: expected integer for '{dotted}'")
    elif isinstance(current, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"line {line_no}, col {col}: expected number for '{dotted}'")
        value = float(value)
    setattr(obj, name, value)


def config_from_text(text: str) -> RunConfig:
    """Parse `key = value` lines into a RunConfig; raises ConfigError with line/column."""
    cfg = RunConfig()
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            col = len(line) - len(line.lstrip()) + 1
            raise ConfigError(f"line {i}, col {col}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        col = line.index(key) + 1 if key in line else 1
        _assign(cfg, key, raw.strip(), i, col)
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return config_from_text(fh.read())
