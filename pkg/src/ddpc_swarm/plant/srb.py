"""Single-rigid-body quadruped swarm coupled through penalty ball joints.

Each agent is a rigid trunk with massless legs.  Stance feet are pinned
where they touch down and push on the trunk with the applied ground reaction
forces (world frame).  Pairs of agents are tied together at attachment
points by a spring-damper that transmits force only.

Leg order is FR, FL, RR, RL; each leg contributes ``(f_x, f_y, f_z)`` so an
agent has 12 input channels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import SimulationDivergence

N_LEGS = 4
LEG_NAMES = ("FR", "FL", "RR", "RL")
# Diagonal pairs: A = FR + RL, B = FL + RR.
PAIR_A = np.array([True, False, False, True])
G0 = 9.81
OUTPUT_NAMES = ("z", "vx", "vy", "roll", "pitch", "wz")
MAX_JOINT_SEPARATION = 0.2


@dataclass(frozen=True)
class GaitConfig:
    period: float = 0.4
    duty: float = 0.5
    kind: str = "trot"


def gait_contacts(t: float, gait: GaitConfig = GaitConfig()) -> np.ndarray:
    """Stance flags for the four legs at time ``t`` (trot).

    Pair A is in stance for the first ``duty`` fraction of each period and
    pair B is half a period behind.
    """
    if gait.duty >= 1.0:
        return np.ones(N_LEGS, dtype=bool)
    if gait.kind == "stand":
        return np.ones(N_LEGS, dtype=bool)
    # Small offset keeps sample instants that land on a phase boundary on the
    # side they belong to despite floating-point rounding of t.
    phase = (t / gait.period + 1e-9) % 1.0
    a = phase < gait.duty
    b = (phase + 0.5) % 1.0 < gait.duty
    return np.where(PAIR_A, a, b)


def contact_schedule(k0: int, steps: int, sample_rate: float,
                     gait: GaitConfig = GaitConfig()) -> np.ndarray:
    """``(steps, 4)`` stance flags for samples ``k0 .. k0 + steps - 1``."""
    return np.array([gait_contacts((k0 + k) / sample_rate, gait) for k in range(steps)])


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def rpy_to_matrix(rpy) -> np.ndarray:
    return rot_z(rpy[2]) @ rot_y(rpy[1]) @ rot_x(rpy[0])


def matrix_to_rpy(R) -> np.ndarray:
    pitch = -np.arcsin(np.clip(R[..., 2, 0], -1.0, 1.0))
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    return np.stack([roll, pitch, yaw], axis=-1)


def _expm_so3(w, dt):
    """Batched Rodrigues formula for ``exp(hat(w) dt)``; ``w`` is ``(n, 3)``."""
    th = np.linalg.norm(w, axis=1) * dt
    out = np.broadcast_to(np.eye(3), (w.shape[0], 3, 3)).copy()
    nz = th > 1e-12
    if np.any(nz):
        k = w[nz] * dt / th[nz, None]
        K = np.zeros((k.shape[0], 3, 3))
        K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
        K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
        K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
        s, c = np.sin(th[nz])[:, None, None], np.cos(th[nz])[:, None, None]
        out[nz] += s * K + (1 - c) * (K @ K)
    return out


@dataclass
class RigidBodyState:
    """Trunk state of one agent.

    ``omega`` is the body-frame angular velocity; ``R`` the body-to-world
    rotation.  Roll/pitch/yaw are derived from ``R`` (ZYX convention).
    """

    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    omega: np.ndarray
    mass: float
    inertia: np.ndarray

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        I = np.asarray(self.inertia, dtype=float)
        if not np.allclose(I, I.T) or np.linalg.eigvalsh(I)[0] <= 0:
            raise ValueError("inertia must be symmetric positive definite")

    @property
    def rpy(self) -> np.ndarray:
        return matrix_to_rpy(self.R)

    @classmethod
    def standing(cls, height=0.26, mass=12.45, inertia=None, position=(0.0, 0.0)):
        I = np.diag([0.07, 0.26, 0.25]) if inertia is None else np.asarray(inertia, float)
        return cls(p=np.array([position[0], position[1], height], dtype=float),
                   v=np.zeros(3), R=np.eye(3), omega=np.zeros(3),
                   mass=mass, inertia=I)


@dataclass
class SwarmConfig:
    """Swarm geometry, joint and gait parameters.

    ``formation`` holds the nominal planar COM position of each agent; each
    pair is attached at the midpoint of their nominal positions at
    ``attachment_height`` above the COM.
    """

    n_agents: int = 3
    mass: float = 12.45
    inertia: tuple = ((0.07, 0.0, 0.0), (0.0, 0.26, 0.0), (0.0, 0.0, 0.25))
    stand_height: float = 0.26
    spacing: float = 0.5
    formation: tuple | None = None
    attachment_height: float = 0.0
    k_joint: float = 2e4
    c_joint: float = 200.0
    gait: GaitConfig = field(default_factory=GaitConfig)
    foot_offsets: tuple = ((0.18, -0.13), (0.18, 0.13), (-0.18, -0.13), (-0.18, 0.13))
    mu: float = 0.6
    g0: float = G0
    payloads: tuple = ()
    touchdown_lead: float = 0.5
    dt: float = 1e-3
    sample_rate: float = 100.0
    sigma_y: float = 0.0

    def __post_init__(self):
        if self.k_joint <= 0 or self.c_joint <= 0:
            raise ValueError("joint stiffness and damping must be positive")
        if self.formation is None:
            ys = (np.arange(self.n_agents) - (self.n_agents - 1) / 2) * self.spacing
            self.formation = tuple((0.0, float(y)) for y in ys)
        if len(self.formation) != self.n_agents:
            raise ValueError("formation must list one position per agent")

    @property
    def substeps(self) -> int:
        n = round(1.0 / (self.sample_rate * self.dt))
        if abs(n * self.dt * self.sample_rate - 1.0) > 1e-9:
            raise ValueError("sample period must be a multiple of dt")
        return n

    def pairs(self):
        """Complete graph over the agents."""
        return [(i, j) for i in range(self.n_agents) for j in range(i + 1, self.n_agents)]

    def attachment_offsets(self):
        """Body-frame attachment offsets ``{(i, j): (r_i, r_j)}``."""
        out = {}
        h = self.attachment_height
        for i, j in self.pairs():
            d = (np.array(self.formation[j]) - np.array(self.formation[i])) / 2
            out[(i, j)] = (np.array([d[0], d[1], h]), np.array([-d[0], -d[1], h]))
        return out


@dataclass
class Payload:
    agent: int
    mass: float
    offset: tuple = (0.0, 0.0, 0.0)


def foot_positions(state: RigidBodyState, stance_flags, config: SwarmConfig,
                   previous=None, previous_flags=None, ground=None) -> np.ndarray:
    """World-frame foot points ``(4, 3)``.

    A leg that is in stance now and was in stance before keeps its pinned
    point.  A leg touching down lands under its hip, advanced along the COM
    velocity by ``touchdown_lead`` of the stance duration, on the ground
    height given by ``ground`` (per leg, default 0).  Swing legs report their
    hip projection.
    """
    stance_flags = np.asarray(stance_flags, dtype=bool)
    ground = np.zeros(N_LEGS) if ground is None else np.asarray(ground, dtype=float)
    yaw = matrix_to_rpy(state.R)[2]
    Rz = rot_z(yaw)
    t_stance = config.gait.period * config.gait.duty
    lead = config.touchdown_lead * t_stance * np.array([state.v[0], state.v[1], 0.0])
    out = np.empty((N_LEGS, 3))
    for leg in range(N_LEGS):
        off = np.array([*config.foot_offsets[leg], 0.0])
        hip = state.p + Rz @ off
        target = np.array([hip[0] + lead[0], hip[1] + lead[1], ground[leg]])
        keep = (previous is not None and previous_flags is not None
                and stance_flags[leg] and previous_flags[leg])
        out[leg] = previous[leg] if keep else target
    return out


def ball_joint_wrench(states, config: SwarmConfig):
    """Spring-damper joint forces.

    Returns ``(forces, points)``: ``forces[i]`` is the total world force on
    agent ``i`` and ``points`` maps ``(i, j)`` to the world attachment points
    and the force applied at agent ``i``'s point (agent ``j`` receives the
    negative at its own point).
    """
    n = len(states)
    forces = np.zeros((n, 3))
    contacts = {}
    for (i, j), (oi, oj) in config.attachment_offsets().items():
        si, sj = states[i], states[j]
        ri, rj = si.R @ oi, sj.R @ oj
        pi, pj = si.p + ri, sj.p + rj
        vi = si.v + si.R @ np.cross(si.omega, oi)
        vj = sj.v + sj.R @ np.cross(sj.omega, oj)
        dx, dv = pi - pj, vi - vj
        sep = np.linalg.norm(dx)
        if sep > MAX_JOINT_SEPARATION or not np.isfinite(sep):
            raise SimulationDivergence(
                f"joint ({i}, {j}) separation {sep:.3f} m exceeds {MAX_JOINT_SEPARATION} m")
        F = -config.k_joint * dx - config.c_joint * dv
        forces[i] += F
        forces[j] -= F
        contacts[(i, j)] = (pi, pj, F)
    return forces, contacts


def srb_step(state: RigidBodyState, grfs, foot_points, external_force=None,
             external_point=None, dt: float = 1e-3, g0: float = G0,
             extra_torque=None) -> RigidBodyState:
    """One semi-implicit Euler step of the Newton-Euler equations.

    ``grfs`` and ``foot_points`` are ``(k, 3)`` world-frame arrays for the
    legs that push.  ``external_force`` acts at ``external_point`` (world).
    """
    grfs = np.atleast_2d(np.asarray(grfs, dtype=float)).reshape(-1, 3)
    feet = np.atleast_2d(np.asarray(foot_points, dtype=float)).reshape(-1, 3)
    F = grfs.sum(axis=0) + np.array([0.0, 0.0, -state.mass * g0])
    tau_w = np.cross(feet - state.p, grfs).sum(axis=0)
    if external_force is not None:
        F = F + external_force
        if external_point is not None:
            tau_w = tau_w + np.cross(np.asarray(external_point) - state.p, external_force)
    if extra_torque is not None:
        tau_w = tau_w + extra_torque
    v = state.v + F / state.mass * dt
    p = state.p + v * dt
    tau_b = state.R.T @ tau_w
    Iw = state.inertia @ state.omega
    omega = state.omega + np.linalg.solve(state.inertia, tau_b - np.cross(state.omega, Iw)) * dt
    R = state.R @ _expm_so3(omega[None, :], dt)[0]
    nxt = RigidBodyState(p=p, v=v, R=R, omega=omega, mass=state.mass, inertia=state.inertia)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v)) and np.all(np.isfinite(omega))):
        raise SimulationDivergence("non-finite rigid-body state", last_state=state)
    return nxt


def measure_outputs(state: RigidBodyState, sigma_y: float = 0.0,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """``(z, vx, vy, roll, pitch, wz)``; ``wz`` is the body-frame yaw rate."""
    rpy = state.rpy
    y = np.array([state.p[2], state.v[0], state.v[1], rpy[0], rpy[1], state.omega[2]])
    if sigma_y > 0:
        y = y + (rng or np.random.default_rng()).normal(0.0, sigma_y, size=6)
    return y


def _cross(a, b):
    """Broadcasting cross product over the last axis (cheaper than ``np.cross``)."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


class Swarm:
    """Vectorized multi-agent SRB simulator.

    Inputs are applied per sample (zero-order hold over ``substeps`` plant
    steps).  Forces requested on legs the gait schedule marks as swing are
    not applied.
    """

    def __init__(self, config: SwarmConfig, seed: int = 0, terrain_max: float = 0.0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.terrain_max = terrain_max
        n = config.n_agents
        self.n = n
        self.k = 0
        self.p = np.array([[x, y, config.stand_height] for x, y in config.formation], float)
        self.v = np.zeros((n, 3))
        self.R = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        self.omega = np.zeros((n, 3))
        self.base_inertia = np.asarray(config.inertia, dtype=float)
        self.payloads: list[Payload] = [p if isinstance(p, Payload) else Payload(*p)
                                        for p in config.payloads]
        self._refresh_mass()
        self.flags = np.stack([gait_contacts(0.0, config.gait)] * n)
        self.feet = np.zeros((n, N_LEGS, 3))
        self.ground = np.zeros((n, N_LEGS))
        for i in range(n):
            self._touchdown(i, np.ones(N_LEGS, dtype=bool))
        offs = config.attachment_offsets()
        self._pairs = np.array(config.pairs(), dtype=int).reshape(-1, 2)
        self._off_i = np.array([offs[tuple(pq)][0] for pq in self._pairs]).reshape(-1, 3)
        self._off_j = np.array([offs[tuple(pq)][1] for pq in self._pairs]).reshape(-1, 3)
        self.last_joint_force = np.zeros((n, 3))
        self.last_grf = np.zeros((n, N_LEGS, 3))

    # -- properties ------------------------------------------------------

    @property
    def t(self) -> float:
        return self.k / self.config.sample_rate

    def _refresh_mass(self):
        n = self.n
        self.mass = np.full(n, self.config.mass)
        self.inertia = np.broadcast_to(self.base_inertia, (n, 3, 3)).copy()
        self.payload_torque_arm = np.zeros((n, 3))
        for pl in self.payloads:
            r = np.asarray(pl.offset, dtype=float)
            self.mass[pl.agent] += pl.mass
            self.inertia[pl.agent] += pl.mass * (r @ r * np.eye(3) - np.outer(r, r))
            self.payload_torque_arm[pl.agent] += pl.mass * r
        self.inertia_inv = np.linalg.inv(self.inertia)

    def add_payload(self, agent: int, mass: float, offset=(0.0, 0.0, 0.0)):
        self.payloads.append(Payload(agent, mass, tuple(offset)))
        self._refresh_mass()

    def push(self, agent: int, dv):
        """Impulsive COM velocity change (m/s, world frame)."""
        self.v[agent] += np.asarray(dv, dtype=float)

    def state(self, i: int) -> RigidBodyState:
        return RigidBodyState(p=self.p[i].copy(), v=self.v[i].copy(), R=self.R[i].copy(),
                              omega=self.omega[i].copy(), mass=float(self.mass[i]),
                              inertia=self.inertia[i].copy())

    def states(self):
        return [self.state(i) for i in range(self.n)]

    def outputs(self) -> np.ndarray:
        """``(n, 6)`` measured outputs."""
        rpy = matrix_to_rpy(self.R)
        y = np.column_stack([self.p[:, 2], self.v[:, 0], self.v[:, 1],
                             rpy[:, 0], rpy[:, 1], self.omega[:, 2]])
        if self.config.sigma_y > 0:
            y = y + self.rng.normal(0.0, self.config.sigma_y, size=y.shape)
        return y

    def contacts(self, k: int | None = None) -> np.ndarray:
        k = self.k if k is None else k
        return gait_contacts(k / self.config.sample_rate, self.config.gait)

    # -- dynamics --------------------------------------------------------

    def _touchdown(self, i: int, legs):
        st = self.state(i)
        if self.terrain_max > 0:
            self.ground[i, legs] = self.rng.uniform(0.0, self.terrain_max, size=int(np.sum(legs)))
        fp = foot_positions(st, np.ones(N_LEGS, bool), self.config, ground=self.ground[i])
        self.feet[i, legs] = fp[legs]

    def _joint_forces(self):
        """World forces and torques on each agent from all ball joints."""
        cfg = self.config
        n = self.n
        F = np.zeros((n, 3))
        T = np.zeros((n, 3))
        if len(self._pairs) == 0:
            return F, T
        I, J = self._pairs[:, 0], self._pairs[:, 1]
        ri = np.einsum("kab,kb->ka", self.R[I], self._off_i)
        rj = np.einsum("kab,kb->ka", self.R[J], self._off_j)
        wi = np.einsum("kab,kb->ka", self.R[I], self.omega[I])
        wj = np.einsum("kab,kb->ka", self.R[J], self.omega[J])
        dx = (self.p[I] + ri) - (self.p[J] + rj)
        dv = (self.v[I] + _cross(wi, ri)) - (self.v[J] + _cross(wj, rj))
        sep = np.linalg.norm(dx, axis=1)
        if np.any(~np.isfinite(sep)) or np.any(sep > MAX_JOINT_SEPARATION):
            bad = int(np.argmax(np.where(np.isfinite(sep), sep, np.inf)))
            raise SimulationDivergence(
                f"joint {tuple(self._pairs[bad])} separation {sep[bad]:.3f} m exceeds "
                f"{MAX_JOINT_SEPARATION} m", last_state=self.snapshot())
        Fp = -cfg.k_joint * dx - cfg.c_joint * dv
        np.add.at(F, I, Fp)
        np.add.at(F, J, -Fp)
        np.add.at(T, I, _cross(ri, Fp))
        np.add.at(T, J, _cross(rj, -Fp))
        return F, T

    def step_sample(self, u) -> np.ndarray:
        """Apply one sample of inputs ``(n, 12)`` and return the outputs
        measured at the end of the sample."""
        cfg = self.config
        u = np.asarray(u, dtype=float).reshape(self.n, N_LEGS, 3)
        flags = np.stack([self.contacts()] * self.n)
        for i in range(self.n):
            new = flags[i] & ~self.flags[i]
            if np.any(new):
                self._touchdown(i, new)
        self.flags = flags
        grf = np.where(flags[:, :, None], u, 0.0)
        self.last_grf = grf
        g = np.array([0.0, 0.0, -cfg.g0])
        dt = cfg.dt
        for _ in range(cfg.substeps):
            Fj, Tj = self._joint_forces()
            F = grf.sum(axis=1) + self.mass[:, None] * g + Fj
            arms = self.feet - self.p[:, None, :]
            Tw = _cross(arms, grf).sum(axis=1) + Tj
            Tw += _cross(np.einsum("kab,kb->ka", self.R, self.payload_torque_arm), g)
            self.v = self.v + F / self.mass[:, None] * dt
            self.p = self.p + self.v * dt
            Tb = np.einsum("kba,kb->ka", self.R, Tw)
            Iw = np.einsum("kab,kb->ka", self.inertia, self.omega)
            wdot = np.einsum("kab,kb->ka", self.inertia_inv, Tb - _cross(self.omega, Iw))
            self.omega = self.omega + wdot * dt
            self.R = self.R @ _expm_so3(self.omega, dt)
            self.last_joint_force = Fj
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.omega))):
            raise SimulationDivergence("non-finite swarm state", last_state=self.snapshot())
        rpy = matrix_to_rpy(self.R)
        if np.any(np.abs(rpy[:, :2]) >= np.pi / 2) or np.any(self.p[:, 2] <= 0.0):
            raise SimulationDivergence("agent tipped over or hit the ground",
                                       last_state=self.snapshot())
        self.k += 1
        return self.outputs()

    def snapshot(self) -> dict:
        return {"k": self.k, "p": self.p.copy(), "v": self.v.copy(),
                "rpy": matrix_to_rpy(self.R), "omega": self.omega.copy()}

    def trace_row(self, i: int) -> list[float]:
        rpy = matrix_to_rpy(self.R[i])
        return [self.t, *self.p[i], *self.v[i], *rpy, *self.omega[i],
                *self.last_grf[i].ravel(), *self.last_joint_force[i]]
