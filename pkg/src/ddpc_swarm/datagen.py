"""Excitation experiments on the swarm surrogate.

Inputs recorded at each 100 Hz sample are the desired forces: nominal
support forces, uniform noise on stance legs, and a proportional push toward
a slowly changing random velocity command (so the data covers the walking
speeds the planner will ask for).  The tracking layer then holds height and
attitude on top of these forces before they reach the plant, exactly as it
does in closed loop.  Recording the applied forces instead would fold the
layer's state feedback into the input and bias the fitted model.

With tracking disabled and ``velocity_gain = 0`` the applied forces are the
recorded ones: nominal plus noise, projected into the friction cone.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .behavioral import (TrajectoryData, build_hankel, check_data_length, persistency_order,
                         required_data_length)
from .errors import SimulationDivergence
from .planner import nominal_input
from .plant.srb import N_LEGS, Swarm
from .plant.tracking import (TrackingGains, TrackingLayer, clip_to_cone, distribute_wrench,
                             hold_reference)

log = logging.getLogger(__name__)


@dataclass
class ExcitationConfig:
    """Noise law and duration of a collection run.

    Noise is uniform on ``[-a, a]`` per force channel on stance legs, with
    ``amplitude_z`` for vertical and ``amplitude_xy`` for tangential
    channels.  ``velocity_range`` and ``lateral_range`` bound the random
    forward/lateral speed commands (resampled every ``command_period``);
    ``velocity_gain`` (1/s) scales the desired-force correction toward them.
    """

    amplitude_z: float = 30.0
    amplitude_xy: float = 10.0
    duration: float = 100.0
    seed: int = 0
    record_rate: float = 100.0
    tracking: TrackingGains = field(default_factory=TrackingGains)
    velocity_gain: float = 3.0
    velocity_range: tuple = (-0.2, 0.7)
    lateral_range: tuple = (-0.15, 0.15)
    command_period: float = 2.0
    z_des: float = 0.26

    def __post_init__(self):
        if self.amplitude_z < 0 or self.amplitude_xy < 0:
            raise ValueError("noise amplitude must be non-negative")
        if self.duration <= 0 or self.record_rate <= 0:
            raise ValueError("duration and record rate must be positive")
        if isinstance(self.tracking, dict):
            self.tracking = TrackingGains(**self.tracking)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.record_rate))


def collect(swarm: Swarm, excitation: ExcitationConfig, T_ini: int = 10, N: int = 25,
            n_hat: int = 12) -> TrajectoryData:
    """Record desired forces and measured outputs for every agent.

    Raises:
        SimulationDivergence: With ``partial`` set to the data recorded so far.
    """
    cfg = swarm.config
    if abs(excitation.record_rate - cfg.sample_rate) > 1e-9:
        raise ValueError("record rate must equal the swarm sample rate")
    rng = np.random.default_rng(excitation.seed)
    n, T = swarm.n, excitation.n_samples
    U = np.zeros((T, n * 3 * N_LEGS))
    Y = np.zeros((T, n * 6))
    layer = TrackingLayer(excitation.tracking)
    pure = excitation.tracking.is_off() and excitation.velocity_gain == 0
    hold = hold_reference(n, excitation.z_des)
    cmd_every = max(1, int(round(excitation.command_period * excitation.record_rate)))
    v_cmd = np.zeros(2)
    y = swarm.outputs()
    k = 0
    try:
        for k in range(T):
            if k % cmd_every == 0 and k > 0:
                v_cmd = np.array([rng.uniform(*excitation.velocity_range),
                                  rng.uniform(*excitation.lateral_range)])
            stance = swarm.contacts()
            u_nom = nominal_input(stance, cfg.mass, cfg.g0)[0].reshape(N_LEGS, 3)
            noise = rng.uniform(-1.0, 1.0, size=(n, N_LEGS, 3))
            noise *= np.array([excitation.amplitude_xy, excitation.amplitude_xy,
                               excitation.amplitude_z])
            u_des = u_nom + np.where(stance[:, None], noise, 0.0)
            if pure:
                u_des = clip_to_cone(u_des, stance, cfg.mu, layer.f_min, layer.f_max)
                applied = u_des.reshape(n, -1)
            else:
                for i in range(n):
                    F = excitation.velocity_gain * swarm.mass[i] * np.array(
                        [v_cmd[0] - swarm.v[i, 0], v_cmd[1] - swarm.v[i, 1], 0.0])
                    u_des[i] += distribute_wrench(F, np.zeros(3), swarm.feet[i], swarm.p[i],
                                                  stance)
                applied = layer.apply(swarm, u_des, hold)
            U[k] = u_des.ravel()
            Y[k] = y.ravel()
            y = swarm.step_sample(applied.ravel())
    except SimulationDivergence as exc:
        exc.partial = TrajectoryData(U[:k], Y[:k], cfg.sample_rate,
                                     [(3 * N_LEGS, 6)] * n) if k else None
        raise
    data = TrajectoryData(U, Y, sample_rate=cfg.sample_rate,
                          agent_dims=[(3 * N_LEGS, 6)] * n)
    data.meta["excitation"] = _excitation_meta(excitation)
    data.meta["audit"] = audit(data, T_ini, N, n_hat * n)
    if not data.meta["audit"]["pe_ok"]:
        log.warning("collected data is not persistently exciting of order %d",
                    data.meta["audit"]["pe_order_required"])
    data.meta["nominal_mass"] = cfg.mass
    return data


def _excitation_meta(ex: ExcitationConfig) -> dict:
    d = asdict(ex)
    d["velocity_range"] = list(ex.velocity_range)
    d["lateral_range"] = list(ex.lateral_range)
    return d


def audit(data: TrajectoryData, T_ini: int, N: int, n_hat: int,
          tolerance: float = 1e-10, max_svd_samples: int = 4000) -> dict:
    """Persistency-of-excitation and data-length report.

    ``n_hat`` is the assumed total state dimension.  The PE order achieved
    is found by bisection; the singular values reported are those of the
    depth ``T_ini + N + n_hat`` input Hankel matrix, computed on at most
    ``max_svd_samples`` samples to bound cost.
    """
    u = data.u_samples
    m = data.m_total
    L = T_ini + N
    order_req = L + n_hat
    bound = required_data_length(m, n_hat, T_ini, N)
    u_use = u[:max_svd_samples] if data.T > max_svd_samples else u
    achieved = persistency_order(u_use, order_req, tolerance)
    depth = min(order_req, u_use.shape[0])
    # Rough spectrum on a shallower Hankel when the full one would be huge.
    spec_depth = min(depth, max(1, 2000 // max(m, 1)))
    s = np.linalg.svd(build_hankel(u_use, spec_depth), compute_uv=False)
    return {
        "T": data.T,
        "m_total": m,
        "n_hat": n_hat,
        "pe_order_required": order_req,
        "pe_order_achieved": achieved,
        "pe_ok": achieved >= order_req,
        "length_bound": bound,
        "length_margin": data.T - bound,
        "length_ok": check_data_length(m, n_hat, T_ini, N, data.T),
        "spectrum_depth": spec_depth,
        "singular_values": s.tolist(),
    }


def write_audit(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2))
    return path
