"""Deterministic planar rigid-body simulator for the 9-link biped.

The robot is a sagittal-plane kinematic tree: torso (floating base at the
pelvis), two thigh-shank-foot legs, and two single-link arms.  Generalized
coordinates are ``q = [base_x, base_z, base_pitch, q_joint[8]]`` with all
angles CCW in the x-z plane.

Dynamics are assembled from point Jacobians (``M = sum m_k J_k^T J_k`` plus
rotational inertia) and integrated with semi-implicit Euler at
``control_hz * substeps``.  Ground contact is a spring-damper penalty at
discrete body points with a stick-slip tangential anchor.  Everything is
vectorized over a batch of independent environments; the single-environment
``step`` below is a thin wrapper around the batched kernel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import GRAVITY, Command, RobotState

# Link indexing
TORSO, THIGH_L, SHANK_L, FOOT_L, THIGH_R, SHANK_R, FOOT_R, ARM_L, ARM_R = range(9)
N_LINKS = 9
N_JOINTS = 8
NQ = 11  # base_x, base_z, base_pitch + 8 joints

JOINT_NAMES = ("hip_l", "knee_l", "ankle_l", "hip_r", "knee_r", "ankle_r",
               "shoulder_l", "shoulder_r")
LINK_NAMES = ("torso", "thigh_l", "shank_l", "foot_l", "thigh_r", "shank_r",
              "foot_r", "arm_l", "arm_r")

# joint j drives child link j+1
_JOINT_PARENT_LINK = np.array([TORSO, THIGH_L, SHANK_L, TORSO, THIGH_R, SHANK_R, TORSO, TORSO])
_LINK_PARENT_JOINT = np.array([-1, 0, 1, 2, 3, 4, 5, 6, 7])  # link -> joint that drives it

FOOT_LINKS = (FOOT_L, FOOT_R)


def _chain_matrix() -> np.ndarray:
    """(9, 8) membership matrix: chain[k, j] = 1 if joint j is an ancestor of link k."""
    chain = np.zeros((N_LINKS, N_JOINTS))
    for k in range(1, N_LINKS):
        j = _LINK_PARENT_JOINT[k]
        while j >= 0:
            chain[k, j] = 1.0
            parent = _JOINT_PARENT_LINK[j]
            j = _LINK_PARENT_JOINT[parent]
    return chain


CHAIN = _chain_matrix()


@dataclass
class BipedModel:
    """Geometry, mass, and actuation constants of the planar biped."""

    torso_len: float = 0.60
    thigh_len: float = 0.40
    shank_len: float = 0.40
    arm_len: float = 0.55
    foot_half_len: float = 0.09
    ankle_height: float = 0.05
    shoulder_height: float = 0.55  # along torso axis from pelvis

    link_masses: np.ndarray = field(default_factory=lambda: np.array(
        [20.0, 4.0, 3.0, 1.0, 4.0, 3.0, 1.0, 2.0, 2.0]))

    # PD gains / torque limits follow the hip/knee/ankle/shoulder deployment table
    kp: np.ndarray = field(default_factory=lambda: np.array(
        [200.0, 300.0, 40.0, 200.0, 300.0, 40.0, 30.0, 30.0]))
    kd: np.ndarray = field(default_factory=lambda: np.array(
        [5.0, 6.0, 2.0, 5.0, 6.0, 2.0, 1.0, 1.0]))
    torque_limits: np.ndarray = field(default_factory=lambda: np.array(
        [170.0, 255.0, 34.0, 170.0, 255.0, 34.0, 34.0, 34.0]))

    joint_limits: np.ndarray = field(default_factory=lambda: np.array([
        [-1.2, 2.2], [-2.3, 0.26], [-0.9, 0.9],    # left hip, knee, ankle
        [-1.2, 2.2], [-2.3, 0.26], [-0.9, 0.9],    # right leg
        [-2.5, 2.5], [-2.5, 2.5],                  # shoulders
    ]))

    # Fore-aft ankle split of the default stance.  With the deployment-table
    # ankle stiffness (kp = 40) a symmetric stance is an unstable inverted
    # pendulum; a staggered stance is statically stable.
    stance_split: float = 0.10
    stance_drop: float = 0.78   # pelvis-to-ankle vertical distance at stance

    # Contact penalty parameters.  Normal stiffness is sized so a static
    # stance (~100 N per point) penetrates < 2 mm.
    contact_kn: float = 1.0e5
    contact_dn: float = 300.0
    contact_kt: float = 2.0e4
    contact_dt: float = 200.0

    def leg_ik(self, ankle_dx: float, ankle_drop: float) -> tuple:
        """(hip, knee, ankle) angles placing the ankle at (dx, -drop) with a flat foot."""
        reach = float(np.hypot(ankle_dx, ankle_drop))
        if reach >= self.thigh_len + self.shank_len:
            raise ValueError("ankle target out of reach")
        gamma = float(np.arctan2(ankle_dx, ankle_drop))
        delta = float(np.arccos(reach / (self.thigh_len + self.shank_len)))
        hip = gamma + delta
        knee = -2.0 * delta
        ankle = -(gamma - delta)  # flat foot: hip + knee + ankle = 0
        return hip, knee, ankle

    def __post_init__(self):
        front = self.leg_ik(self.stance_split, self.stance_drop)
        rear = self.leg_ik(-self.stance_split, self.stance_drop)
        self.default_pose = np.array(list(front) + list(rear) + [0.0, 0.0])
        self.symmetric_pose = np.array(list(self.leg_ik(0.0, self.stance_drop)) * 2 + [0.0, 0.0])
        self.link_lengths = np.array([
            self.torso_len, self.thigh_len, self.shank_len, 2 * self.foot_half_len,
            self.thigh_len, self.shank_len, 2 * self.foot_half_len,
            self.arm_len, self.arm_len])
        # rod inertia about the CoM; feet as small plates
        m, L = self.link_masses, self.link_lengths
        self.link_inertias = m * L ** 2 / 12.0
        self.link_inertias[[FOOT_L, FOOT_R]] = (
            self.link_masses[[FOOT_L, FOOT_R]]
            * ((2 * self.foot_half_len) ** 2 + self.ankle_height ** 2) / 12.0)
        # joint anchor in the parent link frame
        self.joint_anchor_local = np.array([
            [0.0, 0.0], [0.0, -self.thigh_len], [0.0, -self.shank_len],
            [0.0, 0.0], [0.0, -self.thigh_len], [0.0, -self.shank_len],
            [0.0, self.shoulder_height], [0.0, self.shoulder_height]])
        # link CoM in the link's own frame
        self.com_local = np.array([
            [0.0, self.torso_len / 2],
            [0.0, -self.thigh_len / 2], [0.0, -self.shank_len / 2],
            [0.0, -self.ankle_height * 0.6],
            [0.0, -self.thigh_len / 2], [0.0, -self.shank_len / 2],
            [0.0, -self.ankle_height * 0.6],
            [0.0, -self.arm_len / 2], [0.0, -self.arm_len / 2]])
        # candidate ground-contact points: (link, local offset)
        fh, ah = self.foot_half_len, self.ankle_height
        self.contact_defs = [
            (FOOT_L, (-fh, -ah)), (FOOT_L, (fh, -ah)),
            (FOOT_R, (-fh, -ah)), (FOOT_R, (fh, -ah)),
            (ARM_L, (0.0, -self.arm_len)), (ARM_R, (0.0, -self.arm_len)),
            (SHANK_L, (0.0, 0.0)), (SHANK_R, (0.0, 0.0)),     # knees
            (TORSO, (0.0, 0.0)), (TORSO, (0.0, self.torso_len)),  # pelvis, head
        ]
        self.contact_links = np.array([c[0] for c in self.contact_defs])
        self.contact_local = np.array([c[1] for c in self.contact_defs])
        self.foot_contact_mask = np.isin(self.contact_links, FOOT_LINKS)
        self.total_mass = float(self.link_masses.sum())
        self.nominal_base_height = self.stance_drop + self.ankle_height

    @property
    def n_contacts(self) -> int:
        return len(self.contact_defs)

    def default_qpos(self, base_x: float = 0.0, terrain_height: float = 0.0) -> np.ndarray:
        q = np.zeros(NQ)
        q[0] = base_x
        q[1] = self.nominal_base_height + terrain_height
        q[3:] = self.default_pose
        return q


@dataclass
class TerrainMap:
    """Heightfield on a fixed 0.05 m grid."""

    kind: str
    difficulty_level: int
    x0: float
    dx: float
    heights: np.ndarray

    def height_at(self, x):
        xa = np.asarray(x, dtype=float)
        h = terrain_height_lookup(self.heights[None, :], self.x0, self.dx,
                                  xa.reshape(1, -1))[0]
        return float(h[0]) if xa.ndim == 0 else h.reshape(xa.shape)


TERRAIN_X0 = -12.0
TERRAIN_DX = 0.05
TERRAIN_N = 1201  # covers [-12, 48] m


def terrain_height_lookup(heights, x0, dx, x):
    """Linear-interp height lookup; `heights` (N, G), `x` (N, ...) broadcastable."""
    g = np.clip((x - x0) / dx, 0.0, heights.shape[1] - 1.001)
    i0 = g.astype(int)
    f = g - i0
    h0 = np.take_along_axis(heights, i0.reshape(heights.shape[0], -1), axis=1).reshape(g.shape)
    h1 = np.take_along_axis(heights, (i0 + 1).reshape(heights.shape[0], -1), axis=1).reshape(g.shape)
    return h0 * (1 - f) + h1 * f


def stair_riser(level: int) -> float:
    return 0.05 * (1.0 + 0.15 * level)


def generate_terrain(kind: str, level: int, rng: np.random.Generator) -> TerrainMap:
    """Deterministic heightfield for (kind, level, rng seed); flat pad around x=0."""
    if not 0 <= level <= 9:
        raise ValueError(f"terrain level out of range: {level}")
    x = TERRAIN_X0 + TERRAIN_DX * np.arange(TERRAIN_N)
    h = np.zeros(TERRAIN_N)
    pad = 2.5  # spawn pad stays flat
    if kind == "flat":
        pass
    elif kind == "obstacles":
        height_max = 0.02 + 0.012 * level
        xc = pad + rng.uniform(0.5, 1.5)
        while xc < x[-1]:
            length = rng.uniform(0.3, 0.8)
            height = rng.uniform(0.5 * height_max, height_max)
            h[(np.abs(x) >= xc) & (np.abs(x) <= xc + length)] = height
            xc += length + rng.uniform(1.0, 2.5)
    elif kind == "slope":
        grade = 0.05 * (1.0 + 0.35 * level)  # rise/run
        seg = 6.0  # up-down triangle wave, 6 m ramps
        d = np.maximum(np.abs(x) - pad, 0.0)
        tri = seg / 2 - np.abs(np.mod(d, seg) - seg / 2)
        h = grade * tri
    elif kind == "stairs":
        riser, tread = stair_riser(level), 0.30
        d = np.maximum(np.abs(x) - pad, 0.0)
        nsteps = 10
        cycle = 2 * nsteps * tread
        dc = np.mod(d, cycle)
        up = np.minimum(np.floor(dc / tread), nsteps)
        down = np.maximum(np.floor((dc - nsteps * tread) / tread), 0.0)
        h = riser * (up - down)
    else:
        raise ValueError(f"unknown terrain kind: {kind}")
    return TerrainMap(kind=kind, difficulty_level=level, x0=TERRAIN_X0, dx=TERRAIN_DX, heights=h)


@dataclass
class DomainParams:
    """One domain-randomization draw."""

    friction: float = 1.0
    base_mass_delta: float = 0.0
    base_com_shift: float = 0.0
    motor_strength_scale: float = 1.0
    action_delay: int = 0
    link_mass_scale: float = 1.0
    gravity_delta: float = 0.0


def sample_domain_params(rng: np.random.Generator, cfg=None) -> DomainParams:
    """Uniform draw inside the randomization table ranges."""
    from .core import RandomizationConfig
    c = cfg or RandomizationConfig()
    if not c.enabled:
        return DomainParams()
    return DomainParams(
        friction=float(rng.uniform(*c.friction)),
        base_mass_delta=float(rng.uniform(*c.base_mass_delta)),
        base_com_shift=float(rng.uniform(*c.base_com_shift)),
        motor_strength_scale=float(rng.uniform(*c.motor_strength)),
        action_delay=int(rng.integers(c.action_delay[0], c.action_delay[1] + 1)),
        link_mass_scale=float(rng.uniform(*c.link_mass_scale)),
        gravity_delta=float(rng.uniform(*c.gravity_delta)),
    )


@dataclass
class DisturbanceEvent:
    kind: str                  # force_torque | com_impulse | payload
    start: float = 0.0
    duration: float = 0.0
    target_link: int = TORSO
    force: tuple = (0.0, 0.0)
    torque: float = 0.0
    lin_delta: tuple = (0.0, 0.0)
    ang_delta: float = 0.0
    payload_kg: float = 0.0


DISTURBANCE_PROFILES = ("none", "low_freq", "constant", "low_impulse", "high_impulse",
                        "low_payload", "high_payload")


def sample_disturbance_schedule(profile: str, rng: np.random.Generator,
                                episode_seconds: float = 12.0) -> list:
    """Disturbance events for one episode under a named robustness profile."""
    events = []
    if profile == "none":
        return events
    if profile == "low_freq":
        t = 0.0
        while t < episode_seconds:
            events.append(DisturbanceEvent(
                kind="force_torque", start=t, duration=1.0,
                target_link=int(rng.integers(0, N_LINKS)),
                force=tuple(rng.uniform(-200.0, 200.0, size=2)),
                torque=float(rng.uniform(-200.0, 200.0))))
            t += 1.0
    elif profile == "constant":
        start = float(rng.uniform(1.0, episode_seconds - 1.0))
        events.append(DisturbanceEvent(
            kind="force_torque", start=start, duration=0.5,
            target_link=int(rng.integers(0, N_LINKS)),
            force=tuple(rng.uniform(-200.0, 200.0, size=2)),
            torque=float(rng.uniform(-200.0, 200.0))))
    elif profile in ("low_impulse", "high_impulse"):
        lin_rng = (0.0, 1.0) if profile == "low_impulse" else (1.0, 2.0)
        ang_rng = (0.0, 0.5) if profile == "low_impulse" else (0.5, 1.0)
        for _ in range(3):
            mag = rng.uniform(*lin_rng)
            ang = rng.uniform(0.0, 2.0 * np.pi)
            events.append(DisturbanceEvent(
                kind="com_impulse", start=float(rng.uniform(1.0, episode_seconds - 1.0)),
                lin_delta=(mag * np.cos(ang), mag * np.sin(ang)),
                ang_delta=float(rng.choice([-1.0, 1.0]) * rng.uniform(*ang_rng))))
    elif profile in ("low_payload", "high_payload"):
        hi = 5.0 if profile == "low_payload" else 10.0
        events.append(DisturbanceEvent(
            kind="payload", start=0.0, duration=episode_seconds,
            target_link=int(rng.choice([TORSO, ARM_L, ARM_R])),
            payload_kg=float(rng.uniform(0.0, hi))))
    else:
        raise ValueError(f"unknown disturbance profile: {profile}")
    events.sort(key=lambda e: e.start)
    return events


def sample_extreme_init(model: BipedModel, rng: np.random.Generator) -> RobotState:
    """Extreme-case initial state draw (planar subset of the randomization table)."""
    q = np.zeros(NQ)
    v = np.zeros(NQ)
    q[0] = rng.uniform(-2.0, 2.0)
    q[2] = rng.uniform(-0.25, 0.25)
    q[3:] = model.default_pose * rng.uniform(0.2, 1.8, size=N_JOINTS)
    q[3:] = np.clip(q[3:], model.joint_limits[:, 0], model.joint_limits[:, 1])
    v[0] = rng.uniform(-1.0, 2.5)
    v[1] = rng.uniform(-0.4, 0.4)
    v[2] = rng.uniform(-1.0, 1.0)
    v[3:] = rng.uniform(-0.2, 0.2, size=N_JOINTS)
    # drop the base so the lowest body point starts at ground level
    pts = body_points(model, q[None, :])["contacts"][0]
    q[1] = -pts[:, 1].min() + 0.01
    return RobotState.from_qpos_qvel(q, v)


def sample_default_init(model: BipedModel, rng: np.random.Generator) -> RobotState:
    """Nominal stance with small joint/velocity jitter."""
    q = model.default_qpos()
    q[3:] += rng.uniform(-0.05, 0.05, size=N_JOINTS)
    v = np.zeros(NQ)
    v[0] = rng.uniform(-0.1, 0.1)
    pts = body_points(model, q[None, :])["contacts"][0]
    q[1] += -pts[:, 1].min() + 0.002
    return RobotState.from_qpos_qvel(q, v)


def update_curriculum(level: int, tracking_ratio: float,
                      up: float = 0.70, down: float = 0.40, max_level: int = 9) -> int:
    """Promote/demote terrain difficulty from the goal-tracking ratio."""
    if tracking_ratio >= up:
        return min(level + 1, max_level)
    if tracking_ratio < down:
        return max(level - 1, 0)
    return level


def sample_command(cmd_range, rng: np.random.Generator, malicious: bool, t: float,
                   current: Command | None = None, control_hz: int = 100) -> Command:
    """Episode command draw; malicious mode resamples at 5 Hz."""
    step = int(round(t * control_hz))
    if current is None or step == 0:
        return Command(vx_cmd=float(rng.uniform(*cmd_range)))
    if malicious and step % int(control_hz / 5.0) == 0:
        return Command(vx_cmd=float(rng.uniform(*cmd_range)))
    return current


# ---------------------------------------------------------------------------
# Kinematics / dynamics kernel (batched over environments)
# ---------------------------------------------------------------------------

def _rot_apply(c, s, v):
    """Rotate local vectors v (..., 2) by angles with cos c, sin s (...)."""
    x, z = v[..., 0], v[..., 1]
    return np.stack((c * x - s * z, s * x + c * z), axis=-1)


def link_angles(qpos) -> np.ndarray:
    """(N, 9) absolute link angles."""
    return qpos[:, 2:3] + qpos[:, 3:] @ CHAIN.T


def link_rates(qvel) -> np.ndarray:
    return qvel[:, 2:3] + qvel[:, 3:] @ CHAIN.T


def body_points(model: BipedModel, qpos, com_shift=None) -> dict:
    """Forward kinematics: link origins, CoMs, contact points, joint anchors.

    Returns world positions; `com_shift` (N,) optionally displaces the torso
    CoM along the torso-local x axis.
    """
    n = qpos.shape[0]
    phi = link_angles(qpos)
    c, s = np.cos(phi), np.sin(phi)
    origins = np.zeros((n, N_LINKS, 2))
    base = qpos[:, 0:2]
    origins[:, TORSO] = base
    anchors = np.zeros((n, N_JOINTS, 2))
    for j in range(N_JOINTS):
        p = _JOINT_PARENT_LINK[j]
        anchors[:, j] = origins[:, p] + _rot_apply(c[:, p], s[:, p], model.joint_anchor_local[j])
        origins[:, j + 1] = anchors[:, j]
    com_local = np.broadcast_to(model.com_local, (n, N_LINKS, 2)).copy()
    if com_shift is not None:
        com_local[:, TORSO, 0] = com_local[:, TORSO, 0] + com_shift
    coms = origins + _rot_apply(c, s, com_local)
    cl = model.contact_links
    contacts = origins[:, cl] + _rot_apply(c[:, cl], s[:, cl], model.contact_local[None, :, :])
    return {"phi": phi, "cos": c, "sin": s, "origins": origins, "anchors": anchors,
            "coms": coms, "contacts": contacts, "base": base}


def point_jacobians(points, links, anchors, base) -> np.ndarray:
    """Planar point Jacobians, (N, P, 2, NQ).

    Columns: d/dx, d/dz identity; d/dtheta = S(p - base); d/dq_j = S(p - anchor_j)
    for ancestor joints j (S = CCW quarter turn).
    """
    n, p = points.shape[0], points.shape[1]
    J = np.zeros((n, p, 2, NQ))
    J[:, :, 0, 0] = 1.0
    J[:, :, 1, 1] = 1.0
    rel = points - base[:, None, :]
    J[:, :, 0, 2] = -rel[:, :, 1]
    J[:, :, 1, 2] = rel[:, :, 0]
    diff = points[:, :, None, :] - anchors[:, None, :, :]         # (N, P, 8, 2)
    mask = CHAIN[links]                                           # (P, 8)
    J[:, :, 0, 3:] = -diff[:, :, :, 1] * mask
    J[:, :, 1, 3:] = diff[:, :, :, 0] * mask
    return J


def _bias_accel(points_v, links, anchors_v, base_v, qvel) -> np.ndarray:
    """Velocity-product acceleration of points (the qddot = 0 part of d(Jv)/dt).

    a_bias(p) = sum_c qdot_c * S (v_p - v_anchor_c) over the angular columns.
    """
    th_dot = qvel[:, 2:3]
    dv = points_v - base_v[:, None, :]
    bias = th_dot[:, :, None] * np.stack((-dv[..., 1], dv[..., 0]), axis=-1)
    diffv = points_v[:, :, None, :] - anchors_v[:, None, :, :]    # (N, P, 8, 2)
    mask = CHAIN[links]
    w = qvel[:, None, 3:] * mask                                  # (N, P, 8)
    bias[..., 0] += np.sum(-diffv[..., 1] * w, axis=2)
    bias[..., 1] += np.sum(diffv[..., 0] * w, axis=2)
    return bias


def pd_torques(target_q, q, qdot, model: BipedModel, strength_scale=1.0,
               kp=None, kd=None) -> np.ndarray:
    """PD actuation toward target joint angles, clamped to torque limits."""
    kp = model.kp if kp is None else kp
    kd = model.kd if kd is None else kd
    tau = strength_scale * (kp * (target_q - q) - kd * qdot)
    return np.clip(tau, -model.torque_limits, model.torque_limits)


@dataclass
class StepDiag:
    """Per-control-step diagnostics from the batched kernel."""

    contact_forces: np.ndarray     # (N, C, 2), last substep, (fx, fz)
    contact_active: np.ndarray     # (N, C) bool
    contact_points: np.ndarray     # (N, C, 2) world positions
    com: np.ndarray                # (N, 2)
    com_vel: np.ndarray            # (N, 2)
    com_acc: np.ndarray            # (N, 2) exact, from total external force
    diverged: np.ndarray           # (N,) bool
    qacc: np.ndarray               # (N, NQ) last substep


def step_batch(model: BipedModel, qpos, qvel, torques, heights, friction,
               gravity=None, link_masses=None, link_inertias=None, com_shift=None,
               ext_force=None, ext_torque=None, stick_anchor=None,
               dt=0.001, substeps=10, pinned_base=False):
    """Advance a batch of environments by one control step.

    heights: (N, G) heightfields on the shared grid; friction: (N,).
    ext_force (N, 9, 2) / ext_torque (N, 9) apply at link CoMs.
    stick_anchor (N, C): tangential contact anchors, carried across steps.
    Returns (qpos', qvel', stick_anchor', StepDiag).
    """
    from . import physics_kernel as pk

    n = qpos.shape[0]
    nc = model.n_contacts
    qpos = np.ascontiguousarray(qpos, dtype=float).copy()
    qvel = np.ascontiguousarray(qvel, dtype=float).copy()
    torques = np.ascontiguousarray(torques, dtype=float)
    g = np.full(n, GRAVITY) if gravity is None else np.ascontiguousarray(gravity, dtype=float)
    lm = (np.broadcast_to(model.link_masses, (n, N_LINKS)).copy()
          if link_masses is None else np.ascontiguousarray(link_masses, dtype=float))
    li = (np.broadcast_to(model.link_inertias, (n, N_LINKS)).copy()
          if link_inertias is None else np.ascontiguousarray(link_inertias, dtype=float))
    cs = np.zeros(n) if com_shift is None else np.ascontiguousarray(com_shift, dtype=float)
    ef = np.zeros((n, N_LINKS, 2)) if ext_force is None else np.ascontiguousarray(ext_force, dtype=float)
    et = np.zeros((n, N_LINKS)) if ext_torque is None else np.ascontiguousarray(ext_torque, dtype=float)
    anchor = (np.full((n, nc), np.nan) if stick_anchor is None
              else np.ascontiguousarray(stick_anchor, dtype=float).copy())
    heights = np.ascontiguousarray(heights, dtype=float)
    friction = np.ascontiguousarray(friction, dtype=float)

    out_cf = np.zeros((n, nc, 2))
    out_ca = np.zeros((n, nc))
    out_cp = np.zeros((n, nc, 2))
    out_misc = np.zeros((n, 7))
    out_qacc = np.zeros((n, NQ))
    pk.step_kernel(qpos, qvel, torques, heights, TERRAIN_X0, TERRAIN_DX, friction, g,
                   lm, li, cs, ef, et, anchor, dt, substeps, pinned_base,
                   _JOINT_PARENT_LINK, model.joint_anchor_local, model.com_local,
                   CHAIN, model.contact_links, model.contact_local,
                   np.ascontiguousarray(model.joint_limits[:, 0]),
                   np.ascontiguousarray(model.joint_limits[:, 1]),
                   model.contact_kn, model.contact_dn, model.contact_kt, model.contact_dt,
                   out_cf, out_ca, out_cp, out_misc, out_qacc)

    diag = StepDiag(contact_forces=out_cf, contact_active=out_ca > 0.5,
                    contact_points=out_cp, com=out_misc[:, 0:2],
                    com_vel=out_misc[:, 2:4], com_acc=out_misc[:, 4:6],
                    diverged=out_misc[:, 6] > 0.5, qacc=out_qacc)
    return qpos, qvel, anchor, diag


def termination_check(state: RobotState, model: BipedModel,
                      terrain_height: float = 0.0) -> str:
    """running | fallen | diverged for a single environment state."""
    q = state.qpos()
    v = state.qvel()
    if np.abs(q).max() > 1e6 or np.abs(v).max() > 1e6 or not state.is_finite():
        return "diverged"
    if (state.base_z - terrain_height) < 0.5 * model.nominal_base_height:
        return "fallen"
    if abs(state.base_pitch) > 1.0:
        return "fallen"
    for cp in state.contact_points:
        if len(cp) >= 4 and int(cp[3]) not in FOOT_LINKS and cp[2] > 0.0:
            return "fallen"
    return "running"


def step(state: RobotState, torques, terrain: TerrainMap, domain: DomainParams,
         active_disturbances=(), model: BipedModel | None = None,
         control_hz: int = 100, substeps: int = 10, stick_anchor=None):
    """Single-environment control step (wraps the batched kernel).

    Returns (next_state, stick_anchor, diag).  Raises no errors on divergence;
    the caller checks ``diag.diverged`` / :func:`termination_check`.
    """
    model = model or BipedModel()
    qpos = state.qpos()[None, :]
    qvel = state.qvel()[None, :].copy()
    lm = model.link_masses.copy()
    lm *= domain.link_mass_scale
    lm[TORSO] += domain.base_mass_delta
    li = model.link_inertias * domain.link_mass_scale
    ef = np.zeros((1, N_LINKS, 2))
    et = np.zeros((1, N_LINKS))
    for ev in active_disturbances:
        if ev.kind == "force_torque":
            ef[0, ev.target_link] += ev.force
            et[0, ev.target_link] += ev.torque
        elif ev.kind == "com_impulse":
            qvel[0, 0:2] += ev.lin_delta
            qvel[0, 2] += ev.ang_delta
        elif ev.kind == "payload":
            lm[ev.target_link] += ev.payload_kg
    qp, qv, anc, diag = step_batch(
        model, qpos, qvel, np.asarray(torques, dtype=float)[None, :],
        terrain.heights[None, :], np.array([domain.friction]),
        gravity=np.array([GRAVITY + domain.gravity_delta]),
        link_masses=lm[None, :], link_inertias=li[None, :],
        com_shift=np.array([domain.base_com_shift]),
        ext_force=ef, ext_torque=et, stick_anchor=stick_anchor,
        dt=1.0 / (control_hz * substeps), substeps=substeps)
    contacts = []
    for i in range(model.n_contacts):
        if diag.contact_active[0, i]:
            contacts.append((float(diag.contact_points[0, i, 0]),
                             float(diag.contact_points[0, i, 1]),
                             float(diag.contact_forces[0, i, 1]),
                             int(model.contact_links[i])))
    nxt = RobotState.from_qpos_qvel(qp[0], qv[0], contact_points=contacts,
                                    time=state.time + 1.0 / control_hz)
    return nxt, anc, diag


# ---------------------------------------------------------------------------
# Trajectory CSV dump
# ---------------------------------------------------------------------------

TRAJECTORY_HEADER = (
    ["time", "base_x", "base_z", "base_pitch", "base_vx", "base_vz", "base_pitch_rate"]
    + [f"q_{n}" for n in JOINT_NAMES] + [f"qd_{n}" for n in JOINT_NAMES]
    + [f"tau_{n}" for n in JOINT_NAMES]
    + ["reward_total", "reward_task", "reward_style", "reward_safety", "reward_stand",
       "n_contacts", "event"]
)


def trajectory_row(state: RobotState, torques, rewards: dict, event: str = "") -> list:
    return ([state.time, state.base_x, state.base_z, state.base_pitch,
             state.base_vx, state.base_vz, state.base_pitch_rate]
            + list(state.joint_pos) + list(state.joint_vel) + list(torques)
            + [rewards.get("total", 0.0), rewards.get("task", 0.0),
               rewards.get("style", 0.0), rewards.get("safety", 0.0),
               rewards.get("stand", 0.0), len(state.contact_points), event])


def write_trajectory_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        w.writerows(rows)


def write_heightfield_csv(path, terrain: TerrainMap):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "height"])
        for i, h in enumerate(terrain.heights):
            w.writerow([terrain.x0 + i * terrain.dx, h])
