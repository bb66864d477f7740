"""Per-agent force tracking layer between planner and surrogate plant.

Each 100 Hz sample the layer takes the desired stance forces, adds a PD
wrench toward a fixed hold reference (height, level attitude, zero yaw
rate) distributed over the stance feet, and projects the result into the
friction cone.  The same layer runs during data collection and in closed
loop, so the recorded desired forces see the same plant as the planner's
forces do.  Velocity channels are left to the planner (``kv = 0``).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .srb import N_LEGS, Swarm, matrix_to_rpy


@dataclass
class TrackingGains:
    """Gains per unit mass (forces) or absolute (torques, N m per rad)."""

    kp_z: float = 80.0
    kd_z: float = 8.0
    kv: float = 0.0
    kp_rp: float = 60.0
    kd_rp: float = 8.0
    kp_yaw: float = 20.0
    kd_yaw: float = 4.0

    @classmethod
    def off(cls) -> "TrackingGains":
        return cls(0, 0, 0, 0, 0, 0, 0)

    def is_off(self) -> bool:
        return not any(asdict(self).values())


def distribute_wrench(force, torque, feet, com, stance) -> np.ndarray:
    """Minimum-norm stance forces producing ``force`` and ``torque`` about ``com``."""
    idx = np.flatnonzero(stance)
    out = np.zeros((N_LEGS, 3))
    if idx.size == 0:
        return out
    M = np.zeros((6, 3 * idx.size))
    for c, leg in enumerate(idx):
        r = feet[leg] - com
        M[:3, 3 * c:3 * c + 3] = np.eye(3)
        M[3:, 3 * c:3 * c + 3] = np.array([[0, -r[2], r[1]], [r[2], 0, -r[0]],
                                           [-r[1], r[0], 0]])
    sol = np.linalg.lstsq(M, np.concatenate([force, torque]), rcond=None)[0]
    out[idx] = sol.reshape(-1, 3)
    return out


def clip_to_cone(forces, stance, mu: float, f_min: float = 1.0, f_max: float = 250.0):
    """Project per-leg forces into the linearized cone; swing legs are zeroed.

    Returns an array shaped ``(..., 4, 3)``.
    """
    f = np.array(forces, dtype=float).reshape(-1, N_LEGS, 3)
    s = np.broadcast_to(np.asarray(stance, dtype=bool).reshape(-1, N_LEGS), f.shape[:2])
    c = mu / np.sqrt(2.0)
    f[..., 2] = np.clip(f[..., 2], f_min, f_max)
    lim = c * f[..., 2]
    f[..., 0] = np.clip(f[..., 0], -lim, lim)
    f[..., 1] = np.clip(f[..., 1], -lim, lim)
    f[~s] = 0.0
    return f


HOLD_REFERENCE = (0.26, np.nan, np.nan, 0.0, 0.0, 0.0)


def hold_reference(n: int, height: float = 0.26) -> np.ndarray:
    """``(n, 6)`` hold reference: height and level attitude, velocities free."""
    ref = np.tile(np.asarray(HOLD_REFERENCE, dtype=float), (n, 1))
    ref[:, 0] = height
    return ref


class TrackingLayer:
    """PD output tracking on top of desired forces.

    Args:
        gains: Feedback gains; ``TrackingGains.off()`` passes the desired
            forces through (still projected into the cone).
        f_min, f_max: Vertical force bounds used by the projection.
    """

    def __init__(self, gains: TrackingGains | None = None, f_min: float = 1.0,
                 f_max: float = 250.0):
        self.gains = gains or TrackingGains()
        self.f_min, self.f_max = f_min, f_max

    def wrench(self, swarm: Swarm, i: int, y_ref) -> tuple[np.ndarray, np.ndarray]:
        """Corrective world force and torque for agent ``i``.

        ``y_ref`` is ``(z, vx, vy, roll, pitch, wz)``; NaN entries disable
        the corresponding term.
        """
        g = self.gains
        y_ref = np.asarray(y_ref, dtype=float)
        ok = np.isfinite(y_ref)
        e = np.where(ok, y_ref, 0.0)
        rpy = matrix_to_rpy(swarm.R[i])
        w = swarm.R[i] @ swarm.omega[i]
        v = swarm.v[i]
        m = swarm.mass[i]
        F = m * np.array([
            g.kv * (e[1] - v[0]) * ok[1],
            g.kv * (e[2] - v[1]) * ok[2],
            (g.kp_z * (e[0] - swarm.p[i, 2]) - g.kd_z * v[2]) * ok[0],
        ])
        T = np.array([
            (g.kp_rp * (e[3] - rpy[0])) * ok[3] - g.kd_rp * w[0],
            (g.kp_rp * (e[4] - rpy[1])) * ok[4] - g.kd_rp * w[1],
            -g.kp_yaw * rpy[2] + g.kd_yaw * ((e[5] if ok[5] else 0.0) - w[2]),
        ])
        return F, T

    def apply(self, swarm: Swarm, u_des, y_ref, mu: float | None = None) -> np.ndarray:
        """Forces to apply this sample, ``(n, 12)``.

        ``u_des`` is ``(n, 12)`` and ``y_ref`` ``(n, 6)`` (or ``None`` for no
        feedback).
        """
        mu = swarm.config.mu if mu is None else mu
        n = swarm.n
        stance = swarm.contacts()
        u = np.asarray(u_des, dtype=float).reshape(n, N_LEGS, 3).copy()
        if y_ref is not None and not self.gains.is_off():
            y_ref = np.asarray(y_ref, dtype=float).reshape(n, -1)
            for i in range(n):
                F, T = self.wrench(swarm, i, y_ref[i])
                u[i] += distribute_wrench(F, T, swarm.feet[i], swarm.p[i], stance)
        return clip_to_cone(u, stance, mu, self.f_min, self.f_max).reshape(n, -1)
