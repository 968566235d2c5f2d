"""Center-of-mass, zero-moment-point, support interval, and feasibility margin.

The planar support polygon is an x-interval spanned by the active ground
contacts.  The feasibility margin (half-width minus the ZMP distance to the
interval center) is positive exactly when the ZMP lies inside the support,
which is the signed quantity the recovery trainer constrains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GRAVITY
from .physics import BipedModel, body_points, point_jacobians


class ComBelowGroundError(ValueError):
    pass


@dataclass
class SupportInterval:
    x_min: float
    x_max: float
    aerial: bool = False

    @property
    def center(self) -> float:
        return 0.5 * (self.x_min + self.x_max)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.x_max - self.x_min)


@dataclass
class ZmpFeatures:
    p_zmp: float
    offset: float      # p_zmp - support center
    margin: float      # half_width - |offset|
    encoded: np.ndarray


class ComTracker:
    """Finite-difference CoM acceleration over the last three control steps."""

    def __init__(self, dt: float):
        self.dt = dt
        self.history: list[np.ndarray] = []

    def push(self, p_com: np.ndarray) -> np.ndarray:
        """Record a CoM sample, return the centered-difference acceleration."""
        self.history.append(np.asarray(p_com, dtype=float))
        if len(self.history) > 3:
            self.history.pop(0)
        if len(self.history) < 3:
            return np.zeros(2)
        a, b, c = self.history
        return (c - 2 * b + a) / self.dt ** 2


def compute_com(state, model: BipedModel, tracker: ComTracker | None = None):
    """Mass-weighted CoM of the biped: ((x, z), z_com, acceleration).

    Acceleration comes from the tracker's finite differences (zero until it
    has three samples); pass ``tracker=None`` for the static value.
    """
    qpos = state.qpos()[None, :]
    fk = body_points(model, qpos)
    com = np.einsum("k,ki->i", model.link_masses, fk["coms"][0]) / model.total_mass
    acc = tracker.push(com) if tracker is not None else np.zeros(2)
    return com, float(com[1]), acc


def com_velocity(state, model: BipedModel) -> np.ndarray:
    qpos = state.qpos()[None, :]
    fk = body_points(model, qpos)
    J = point_jacobians(fk["coms"], np.arange(9), fk["anchors"], fk["base"])
    return np.einsum("k,kiu,u->i", model.link_masses, J[0], state.qvel()) / model.total_mass


def compute_zmp(p_com: float, z_com: float, acc_com: float, g: float = GRAVITY) -> float:
    """Linear-inverted-pendulum ZMP: p_com - (z_com / g) * acc_com."""
    if g <= 0:
        raise ValueError("g must be positive")
    if z_com <= 0:
        raise ComBelowGroundError("CoM below ground")
    return p_com - (z_com / g) * acc_com


def support_interval(contacts, previous: SupportInterval | None = None) -> SupportInterval:
    """Interval spanned by active contact x-coordinates.

    With no contacts, returns the previous interval flagged aerial (or a
    degenerate interval at 0 if there was none).
    """
    xs = [c[0] for c in contacts]
    if not xs:
        if previous is not None:
            return SupportInterval(previous.x_min, previous.x_max, aerial=True)
        return SupportInterval(0.0, 0.0, aerial=True)
    return SupportInterval(float(min(xs)), float(max(xs)), aerial=False)


def feasibility(p_zmp: float, support: SupportInterval) -> tuple:
    """(distance to support center, signed margin = half_width - distance)."""
    dist = abs(p_zmp - support.center)
    return dist, support.half_width - dist


def frequency_encode(x: float, bands: int = 4) -> np.ndarray:
    """[sin(2^i pi x), cos(2^i pi x)] for i in 0..bands-1."""
    if bands < 1:
        raise ValueError("need at least one frequency band")
    freqs = np.pi * 2.0 ** np.arange(bands)
    ang = np.asarray(x, dtype=float)[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (2 * bands,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def zmp_features(p_zmp: float, support: SupportInterval, bands: int = 4) -> ZmpFeatures:
    dist, margin = feasibility(p_zmp, support)
    offset = p_zmp - support.center
    return ZmpFeatures(p_zmp=p_zmp, offset=offset, margin=margin,
                       encoded=frequency_encode(offset, bands))


def moment_balance_zmp(contacts) -> float:
    """Independent ZMP estimate: the point where contact forces have zero moment.

    contacts: iterable of (x, z, fx, fz).  Solves sum((x_i - x_zmp) fz_i
    - (z_i - z_ref) fx_i) = 0 with z_ref the force-weighted contact height.
    """
    contacts = list(contacts)
    fz_sum = sum(c[3] for c in contacts)
    if fz_sum <= 0:
        raise ValueError("no supporting normal force")
    z_ref = sum(c[1] * c[3] for c in contacts) / fz_sum
    moment = sum(c[0] * c[3] - (c[1] - z_ref) * c[2] for c in contacts)
    return moment / fz_sum
