"""Data-driven predictive planners.

Three programs share one set of helpers:

* ``solve_deepc``: regularized DeePC over ``(u, y, g, sigma)``.
* ``solve_centralized``: one QP over every agent's inputs with the outputs
  substituted through the full transition matrix.
* ``solve_local``: one agent's QP using its own block of the transition
  matrix plus a frozen neighbor offset built from last round's packets.

All input trajectories are time-major.  For one agent that means
``u[k * m_i + 3 * leg + axis]``; globally agents are interleaved inside each
sample.
"""
from __future__ import annotations

import json
import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag

from .behavioral import HankelBlocks
from .bus import NeighborPacket, PacketBus
from .errors import DimensionError, ProtocolViolation, SolverFailure
from .predictor import BlockPartition, TransitionMatrix, agent_indices, partition_blocks
from .qpsolver import QpProblem, QpResult, QpSettings, QpSolver, Status

log = logging.getLogger(__name__)

DEFAULT_Q = (1e6, 1e5, 1e5, 2e5, 1e5, 1e4)
DEFAULT_R_LEG = (0.05, 0.05, 0.5)
LEGS = 4


@dataclass
class PlannerConfig:
    """Weights, horizons and feasible sets of a planner.

    ``Q`` and ``R`` are per-agent, per-step weights given as diagonals (or
    full matrices).  ``output_lb``/``output_ub`` bound each output channel
    (``None`` entries are unbounded).  With ``friction=False`` the input set
    is the box ``[input_lb, input_ub]`` instead of the friction cone.

    ``neighbor_alignment`` selects how last round's packets enter a local
    plan: ``"literal"`` uses them as received, ``"forward"`` first carries
    each neighbor context forward by ``n_apply`` samples (see
    ``build_neighbor_term``).  ``relaxation`` ``w < 1`` makes each agent
    adopt ``w`` times its new local plan plus ``1 - w`` times its previous
    plan carried forward; ``w = 1`` applies the local optimum as is.
    With ``soften_output_box`` a QP found infeasible is solved once more
    with the output box as a soft constraint (quadratic slack weight
    ``box_penalty``); input constraints stay hard.
    """

    T_ini: int = 10
    N: int = 25
    Q: list = field(default_factory=lambda: list(DEFAULT_Q))
    R: list = field(default_factory=lambda: list(DEFAULT_R_LEG) * LEGS)
    lambda_g: float = 10.0
    lambda_sigma: float = 1e5
    n_apply: int = 4
    sample_rate: float = 100.0
    mu: float = 0.6
    f_min: float = 1.0
    f_max: float = 250.0
    friction: bool = True
    input_lb: float | None = None
    input_ub: float | None = None
    output_lb: list = field(default_factory=lambda: [0.15, None, None, -0.3, -0.3, None])
    output_ub: list = field(default_factory=lambda: [0.35, None, None, 0.3, 0.3, None])
    mode: str = "distributed"
    centralized_cost: str = "absolute"
    distributed_cost: str = "deviation"
    g0: float = 9.81
    max_iterations: int = 4000
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    concurrent: bool = False
    neighbor_alignment: str = "forward"
    relaxation: float = 1.0
    soften_output_box: bool = True
    box_penalty: float = 1e7

    def __post_init__(self):
        if self.n_apply < 1 or self.n_apply > self.N:
            raise ValueError("n_apply must lie in [1, N]")
        for name in ("Q", "R"):
            W = self.weight(name)
            if not np.allclose(W, W.T) or np.linalg.eigvalsh(W)[0] <= 0:
                raise ValueError(f"{name} must be symmetric positive definite")
        if self.friction and self.mu <= 0:
            raise ValueError("friction coefficient must be positive")
        if self.mode not in ("distributed", "centralized", "deepc"):
            raise ValueError(f"unknown planner mode {self.mode!r}")
        if self.neighbor_alignment not in ("forward", "literal"):
            raise ValueError(f"unknown neighbor alignment {self.neighbor_alignment!r}")
        if not 0.0 < self.relaxation <= 1.0:
            raise ValueError("relaxation must lie in (0, 1]")
        if self.neighbor_alignment == "forward" and self.n_apply >= self.T_ini:
            raise ValueError("forward alignment needs n_apply < T_ini")

    @property
    def replan_period(self) -> float:
        return self.n_apply / self.sample_rate

    def weight(self, name: str) -> np.ndarray:
        W = np.asarray(getattr(self, name), dtype=float)
        return np.diag(W) if W.ndim == 1 else W

    def qp_settings(self) -> QpSettings:
        return QpSettings(feas_tol=self.feas_tol, opt_tol=self.opt_tol,
                          max_iterations=self.max_iterations)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "PlannerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown planner config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ReferenceCommand:
    v_x_des: float = 0.0
    v_y_des: float = 0.0
    omega_z_des: float = 0.0
    z_des: float = 0.26

    def __post_init__(self):
        vals = (self.v_x_des, self.v_y_des, self.omega_z_des, self.z_des)
        if not np.all(np.isfinite(vals)):
            raise ValueError("reference command must be finite")
        if self.z_des <= 0:
            raise ValueError("z_des must be positive")

    def output(self) -> np.ndarray:
        return np.array([self.z_des, self.v_x_des, self.v_y_des, 0.0, 0.0, self.omega_z_des])

    def expand(self, N: int) -> np.ndarray:
        """Zero-order-hold reference over the horizon, time-major ``(6 N,)``."""
        return np.tile(self.output(), N)


class AgentWindow:
    """Ring buffer with the last ``T_ini`` applied inputs and measured outputs."""

    def __init__(self, T_ini: int, m: int, p: int):
        self.T_ini, self.m, self.p = T_ini, m, p
        self._u: deque = deque(maxlen=T_ini)
        self._y: deque = deque(maxlen=T_ini)

    def push(self, u, y):
        u = np.asarray(u, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if u.size != self.m or y.size != self.p:
            raise DimensionError("window sample has wrong dimensions")
        self._u.append(u.copy())
        self._y.append(y.copy())

    @property
    def warm(self) -> bool:
        return len(self._u) == self.T_ini

    @property
    def u_ini(self) -> np.ndarray:
        if not self.warm:
            raise RuntimeError("window not yet filled")
        return np.concatenate(self._u)

    @property
    def y_ini(self) -> np.ndarray:
        if not self.warm:
            raise RuntimeError("window not yet filled")
        return np.concatenate(self._y)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.u_ini, self.y_ini])


@dataclass
class ContactPlan:
    """Stance flags per agent, ``flags[i]`` has shape ``(N, 4)``."""

    flags: list

    def counts(self, agent: int) -> np.ndarray:
        return np.asarray(self.flags[agent], dtype=bool).sum(axis=1)


# -- constraint assembly ----------------------------------------------------


@dataclass
class InputConstraints:
    """Linear constraints over one agent's input trajectory."""

    A_in: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    # (step, leg) for every equality row group, for error reporting
    eq_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def residual(self, u) -> float:
        u = np.asarray(u, dtype=float)
        Ai = self.A_in @ u
        r = np.maximum(self.lb - Ai, 0.0) + np.maximum(Ai - self.ub, 0.0)
        e = np.abs(self.A_eq @ u - self.b_eq)
        return float(max(np.max(r, initial=0.0), np.max(e, initial=0.0)))

    def is_feasible(self, u, tol: float = 1e-9) -> bool:
        return self.residual(u) <= tol

    def remap(self, columns: np.ndarray, n_total: int) -> "InputConstraints":
        """Embed into a larger variable vector at ``columns``."""
        def emb(M):
            out = np.zeros((M.shape[0], n_total))
            out[:, columns] = M
            return out
        return InputConstraints(emb(self.A_in), self.lb, self.ub, emb(self.A_eq),
                                self.b_eq, self.eq_steps)


def build_friction_constraints(contact_plan, mu: float, f_min: float = 1.0,
                               f_max: float = 250.0) -> InputConstraints:
    """Linearized friction cone on stance legs and zero force on swing legs.

    ``contact_plan`` is an ``(N, 4)`` array of stance flags for one agent.
    Stance rows: ``|f_x| <= mu/sqrt(2) f_z``, ``|f_y| <= mu/sqrt(2) f_z`` and
    ``f_min <= f_z <= f_max``.
    """
    if mu <= 0:
        raise ValueError("friction coefficient must be positive")
    flags = np.asarray(contact_plan, dtype=bool)
    if flags.ndim != 2 or flags.shape[1] != LEGS:
        raise DimensionError("contact plan must have shape (N, 4)")
    N = flags.shape[0]
    n = N * LEGS * 3
    c = mu / np.sqrt(2.0)
    stance = [(k, leg) for k in range(N) for leg in range(LEGS) if flags[k, leg]]
    swing = [(k, leg) for k in range(N) for leg in range(LEGS) if not flags[k, leg]]
    A_in = np.zeros((5 * len(stance), n))
    lb = np.empty(5 * len(stance))
    ub = np.empty(5 * len(stance))
    for r, (k, leg) in enumerate(stance):
        base = 3 * (k * LEGS + leg)
        ix, iy, iz = base, base + 1, base + 2
        rows = slice(5 * r, 5 * r + 5)
        blk = np.zeros((5, n))
        blk[0, ix], blk[0, iz] = 1.0, -c   # f_x - c f_z <= 0
        blk[1, ix], blk[1, iz] = 1.0, c    # f_x + c f_z >= 0
        blk[2, iy], blk[2, iz] = 1.0, -c
        blk[3, iy], blk[3, iz] = 1.0, c
        blk[4, iz] = 1.0
        A_in[rows] = blk
        lb[rows] = [-np.inf, 0.0, -np.inf, 0.0, f_min]
        ub[rows] = [0.0, np.inf, 0.0, np.inf, f_max]
    A_eq = np.zeros((3 * len(swing), n))
    for r, (k, leg) in enumerate(swing):
        base = 3 * (k * LEGS + leg)
        A_eq[3 * r:3 * r + 3, base:base + 3] = np.eye(3)
    return InputConstraints(A_in, lb, ub, A_eq, np.zeros(3 * len(swing)),
                            np.array([k for k, _ in swing], dtype=int))


def friction_margin(forces, stance, mu: float) -> float:
    """Smallest slack of the linearized cone over stance legs.

    ``forces`` is ``(..., 4, 3)`` and ``stance`` ``(..., 4)``.  Negative
    values mean a violation (in newtons).
    """
    f = np.asarray(forces, dtype=float).reshape(-1, LEGS, 3)
    s = np.asarray(stance, dtype=bool).reshape(-1, LEGS)
    c = mu / np.sqrt(2.0)
    fz = f[..., 2]
    slack = np.minimum(np.minimum(c * fz - np.abs(f[..., 0]), c * fz - np.abs(f[..., 1])), fz)
    return float(np.min(np.where(s, slack, np.inf), initial=np.inf))


def nominal_input(contact_plan, agent_mass: float, g0: float = 9.81):
    """Vertical support forces ``m g0 / N_c`` on each stance leg.

    Returns ``(u_des, flight)`` where ``u_des`` is time-major ``(12 N,)`` and
    ``flight`` marks steps with no stance legs (those steps are all zeros).
    """
    flags = np.asarray(contact_plan, dtype=bool)
    if flags.ndim == 1:
        flags = flags[None, :]
    counts = flags.sum(axis=1)
    u = np.zeros((flags.shape[0], LEGS, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        fz = np.where(counts > 0, agent_mass * g0 / np.maximum(counts, 1), 0.0)
    u[:, :, 2] = np.where(flags, fz[:, None], 0.0)
    return u.reshape(-1), counts == 0


# -- QP assembly ---------------------------------------------------------------


def _kron_weight(W: np.ndarray, N: int) -> np.ndarray:
    return np.kron(np.eye(N), W)


def _output_box_rows(Gu, c, lb, ub, p: int, N: int):
    """Rows bounding predicted outputs ``Gu u + c`` per step and channel."""
    lb = [None] * p if lb is None else list(lb)
    ub = [None] * p if ub is None else list(ub)
    chans = [j for j in range(p) if lb[j] is not None or ub[j] is not None]
    if not chans:
        return np.zeros((0, Gu.shape[1])), np.zeros(0), np.zeros(0)
    rows = np.array([k * p + j for k in range(N) for j in chans])
    lo = np.array([-np.inf if lb[j] is None else lb[j] for _ in range(N) for j in chans])
    hi = np.array([np.inf if ub[j] is None else ub[j] for _ in range(N) for j in chans])
    return Gu[rows], lo - c[rows], hi - c[rows]


def _tracking_qp(Gu, c, y_des, Qbar, Rbar, u_ref):
    """Cost ``||Gu u + c - y_des||_Q^2 + ||u - u_ref||_R^2`` as ``1/2 u'Hu + f'u``."""
    QG = Qbar @ Gu
    H = 2.0 * (Gu.T @ QG + Rbar)
    H = 0.5 * (H + H.T)
    f = 2.0 * (QG.T @ (c - y_des) - Rbar @ u_ref)
    return H, f


@dataclass
class PlanResult:
    u: np.ndarray
    y: np.ndarray
    qp: QpResult | None
    status: str
    g: np.ndarray | None = None
    sigma: np.ndarray | None = None
    n_variables: int = 0
    affine: tuple | None = None
    box_relaxed: bool = False

    @property
    def solved(self) -> bool:
        return self.status == Status.SOLVED.value


def _agent_input_constraints(config: PlannerConfig, flags, m: int, N: int):
    if config.friction:
        if flags is None:
            raise ValueError("friction constraints need a contact plan")
        if m != 3 * LEGS:
            raise DimensionError("friction cone assumes 12 force channels per agent")
        return build_friction_constraints(flags, config.mu, config.f_min, config.f_max)
    n = m * N
    if config.input_lb is None and config.input_ub is None:
        return InputConstraints(np.zeros((0, n)), np.zeros(0), np.zeros(0),
                                np.zeros((0, n)), np.zeros(0))
    lo = -np.inf if config.input_lb is None else config.input_lb
    hi = np.inf if config.input_ub is None else config.input_ub
    return InputConstraints(np.eye(n), np.full(n, lo), np.full(n, hi),
                            np.zeros((0, n)), np.zeros(0))


def _raise_on_failure(res: QpResult, what: str, step_of_row=None):
    """Raise ``SolverFailure``; ``step_of_row`` maps constraint rows to
    horizon steps so an infeasible plan reports where it breaks."""
    if res.status is Status.SOLVED:
        return
    step = None
    if step_of_row is not None:
        A, l, u, steps = step_of_row
        Az = A @ res.z
        viol = np.maximum(l - Az, 0.0) + np.maximum(Az - u, 0.0)
        if viol.size and viol.max() > 0:
            step = int(steps[int(np.argmax(viol))])
    where = "" if step is None else f" (worst violation at step {step})"
    raise SolverFailure(f"{what}: QP status {res.status.value}{where}",
                        result=res, step_index=step)


def _row_steps(A: np.ndarray, m: int, N: int) -> np.ndarray:
    """Horizon step of the first input each constraint row touches."""
    if A.shape[0] == 0:
        return np.zeros(0, dtype=int)
    nz = np.abs(A[:, :m * N]) > 0
    first = np.where(nz.any(axis=1), nz.argmax(axis=1), 0)
    return first // m


def _check_friction_bounds(config: PlannerConfig, flags):
    """An empty ``[f_min, f_max]`` makes every stance step infeasible."""
    if config.friction and config.f_min > config.f_max:
        stance = np.flatnonzero(np.asarray(flags, bool).any(axis=1))
        step = int(stance[0]) if stance.size else 0
        raise SolverFailure(f"friction set empty at step {step}: f_min > f_max",
                            step_index=step)


def _soft_box_problem(qp: QpProblem, n_hard_in: int, weight: float) -> QpProblem:
    """Copy of ``qp`` whose output-box rows (those after ``n_hard_in``) each
    get a free slack ``s`` with cost ``weight/2 * s^2``: ``lo <= A u + s <= hi``."""
    n = qp.n
    k = qp.A_in.shape[0] - n_hard_in
    H = block_diag(qp.H, weight * np.eye(k))
    f = np.concatenate([qp.f, np.zeros(k)])
    A_in = np.vstack([np.hstack([qp.A_in[:n_hard_in], np.zeros((n_hard_in, k))]),
                      np.hstack([qp.A_in[n_hard_in:], np.eye(k)])])
    A_eq = np.hstack([qp.A_eq, np.zeros((qp.A_eq.shape[0], k))])
    return QpProblem(H, f, A_eq, qp.b_eq, A_in, qp.lb, qp.ub)


def _solve_with_box(qp: QpProblem, n_hard_in: int, config: PlannerConfig,
                    solver: QpSolver, warm_start):
    """Solve ``qp``; on infeasibility optionally retry with a soft output box.

    Returns ``(result, u, relaxed)`` where ``u`` drops any slack entries.
    """
    res = solver.solve(qp, warm_start)
    if (res.status is not Status.INFEASIBLE or not config.soften_output_box
            or qp.A_in.shape[0] == n_hard_in):
        return res, res.z, False
    soft = _soft_box_problem(qp, n_hard_in, config.box_penalty)
    res2 = solver.solve(soft)
    if res2.status is not Status.SOLVED:
        return res, res.z, False
    log.info("output box softened after an infeasible plan")
    return res2, res2.z[:qp.n], True


def solve_local(partition: BlockPartition, i: int, window: AgentWindow, y_des, u_des,
                neighbor_term, config: PlannerConfig, contact_flags=None,
                solver: QpSolver | None = None, warm_start=None,
                dump_dir: str | Path | None = None) -> PlanResult:
    """One agent's QP with the neighbor effect frozen at ``neighbor_term``."""
    m, p = partition.agent_dims[i]
    N = partition.N
    Gw, Gu = partition.split_own(i)
    c = Gw @ window.stacked() + np.asarray(neighbor_term, dtype=float)
    y_des = np.asarray(y_des, dtype=float).ravel()
    u_des = np.zeros(m * N) if u_des is None else np.asarray(u_des, dtype=float).ravel()
    if y_des.size != p * N or u_des.size != m * N:
        raise DimensionError("reference sizes do not match the agent dims")
    Qbar = _kron_weight(config.weight("Q"), N)
    Rbar = _kron_weight(config.weight("R"), N)
    u_ref = u_des if config.distributed_cost == "deviation" else np.zeros(m * N)
    H, f = _tracking_qp(Gu, c, y_des, Qbar, Rbar, u_ref)
    _check_friction_bounds(config, contact_flags)
    cons = _agent_input_constraints(config, contact_flags, m, N)
    Ao, lo, hi = _output_box_rows(Gu, c, config.output_lb, config.output_ub, p, N)
    qp = QpProblem(H, f, cons.A_eq, cons.b_eq, np.vstack([cons.A_in, Ao]),
                   np.concatenate([cons.lb, lo]), np.concatenate([cons.ub, hi]))
    if dump_dir is not None:
        qp.dump(dump_dir, tag=f"local_{i}")
    res, u, relaxed = _solve_with_box(qp, cons.A_in.shape[0], config,
                                      solver or QpSolver(config.qp_settings()), warm_start)
    A_all, l_all, u_all = qp.stacked()
    _raise_on_failure(res, f"agent {i} local plan",
                      (A_all, l_all, u_all, _row_steps(A_all, m, N)))
    u = u.copy()
    if config.friction:
        _zero_swing(u, contact_flags)
    return PlanResult(u=u, y=Gu @ u + c, qp=res, status=res.status.value, n_variables=m * N,
                      affine=(Gu, c), box_relaxed=relaxed)


def _zero_swing(u, flags):
    """Swing-leg equality rows hold to solver precision; make them exact."""
    v = u.reshape(-1, LEGS, 3)
    v[~np.asarray(flags, dtype=bool)] = 0.0


def build_neighbor_term(partition: BlockPartition, i: int, packets, own_packet=None,
                        shift: int = 0, u_tail=None) -> np.ndarray:
    """Neighbor effect on agent ``i``'s predicted outputs from last round's packets.

    With ``shift == 0`` this is ``sum_{j != i} G_ij [u_ini^j; y_ini^j; u^j]``
    using the packet contents as they are.

    With ``shift > 0`` (samples elapsed since the packets were made) each
    neighbor context is first carried forward to the current sample: the
    input window takes the first ``shift`` planned inputs, the output window
    takes the outputs predicted by the full model from the same packets
    (which needs ``own_packet``, this agent's packet of that round), and the
    planned input sequence is shifted with ``u_tail[j]`` (``shift * m_j``
    values) appended.  Only the previous round's packets are read.
    """
    m, p = partition.agent_dims[i]
    n_ag = partition.n_agents
    for j in range(n_ag):
        if j != i and j not in packets:
            raise ProtocolViolation(f"agent {i} has no packet from agent {j}")

    def ctx_of(pkt, j):
        ctx = pkt.context() if isinstance(pkt, NeighborPacket) else np.asarray(pkt, float)
        if ctx.size != partition.context_size(j):
            raise DimensionError(f"packet from agent {j} has wrong size")
        return ctx

    ctxs = {j: ctx_of(packets[j], j) for j in range(n_ag) if j != i}
    if shift:
        if own_packet is None:
            raise ValueError("carrying contexts forward needs this agent's own packet")
        if not 0 < shift < partition.T_ini:
            raise ValueError("shift must lie in (0, T_ini)")
        ctxs[i] = ctx_of(own_packet, i)
        T_ini, N = partition.T_ini, partition.N
        for j in range(n_ag):
            if j == i:
                continue
            mj, pj = partition.agent_dims[j]
            rows = slice(0, shift * pj)
            y_new = sum(partition.block(j, k)[rows] @ ctxs[k] for k in range(n_ag))
            c = ctxs[j]
            u_ini, y_ini = c[:mj * T_ini], c[mj * T_ini:(mj + pj) * T_ini]
            u_plan = c[(mj + pj) * T_ini:]
            tail = (np.zeros(shift * mj) if u_tail is None
                    else np.asarray(u_tail[j], float).ravel()[:shift * mj])
            ctxs[j] = np.concatenate([u_ini[shift * mj:], u_plan[:shift * mj],
                                      y_ini[shift * pj:], y_new,
                                      u_plan[shift * mj:], tail])
    out = np.zeros(p * partition.N)
    for j in range(n_ag):
        if j != i:
            out += partition.block(i, j) @ ctxs[j]
    return out


def solve_centralized(tm: TransitionMatrix, windows, y_des, config: PlannerConfig,
                      contact_plan: ContactPlan | None = None, u_des=None,
                      solver: QpSolver | None = None, warm_start=None,
                      dump_dir: str | Path | None = None) -> PlanResult:
    """Joint QP over every agent's inputs with outputs eliminated via ``G``.

    ``windows`` is a list of per-agent ``AgentWindow``; ``y_des`` and
    ``u_des`` are global interleaved vectors.
    """
    dims = tm.agent_dims
    T_ini, N = tm.T_ini, tm.N
    u_ini = np.empty(tm.m_total * T_ini)
    y_ini = np.empty(tm.p_total * T_ini)
    for a, w in enumerate(windows):
        u_ini[agent_indices(dims, a, 0, T_ini)] = w.u_ini
        y_ini[agent_indices(dims, a, 1, T_ini)] = w.y_ini
    n_win = (tm.m_total + tm.p_total) * T_ini
    Gw, Gu = tm.G[:, :n_win], tm.G[:, n_win:]
    c = Gw @ np.concatenate([u_ini, y_ini])
    Qs = block_diag(*[config.weight("Q")] * len(dims)) if len(dims) > 1 else config.weight("Q")
    Rs = block_diag(*[config.weight("R")] * len(dims)) if len(dims) > 1 else config.weight("R")
    if Qs.shape[0] != tm.p_total or Rs.shape[0] != tm.m_total:
        raise DimensionError("weights do not match the agent dims")
    n = tm.m_total * N
    u_des = np.zeros(n) if u_des is None else np.asarray(u_des, float).ravel()
    u_ref = u_des if config.centralized_cost == "deviation" else np.zeros(n)
    H, f = _tracking_qp(Gu, c, np.asarray(y_des, float).ravel(),
                        _kron_weight(Qs, N), _kron_weight(Rs, N), u_ref)
    A_in, lb, ub, A_eq, b_eq = [], [], [], [], []
    box = []
    for a, (m_a, p_a) in enumerate(dims):
        flags = None if contact_plan is None else contact_plan.flags[a]
        cons = _agent_input_constraints(config, flags, m_a, N)
        cons = cons.remap(agent_indices(dims, a, 0, N), n)
        A_in.append(cons.A_in), lb.append(cons.lb), ub.append(cons.ub)
        A_eq.append(cons.A_eq), b_eq.append(cons.b_eq)
        rows = agent_indices(dims, a, 1, N)
        box.append(_output_box_rows(Gu[rows], c[rows], config.output_lb,
                                    config.output_ub, p_a, N))
    n_hard = sum(A.shape[0] for A in A_in)
    qp = QpProblem(H, f, np.vstack(A_eq), np.concatenate(b_eq),
                   np.vstack(A_in + [b[0] for b in box]),
                   np.concatenate(lb + [b[1] for b in box]),
                   np.concatenate(ub + [b[2] for b in box]))
    if dump_dir is not None:
        qp.dump(dump_dir, tag="centralized")
    res, u, relaxed = _solve_with_box(qp, n_hard, config,
                                      solver or QpSolver(config.qp_settings()), warm_start)
    _raise_on_failure(res, "centralized plan")
    u = u.copy()
    if config.friction and contact_plan is not None:
        for a in range(len(dims)):
            idx = agent_indices(dims, a, 0, N)
            ua = u[idx]
            _zero_swing(ua, contact_plan.flags[a])
            u[idx] = ua
    return PlanResult(u=u, y=Gu @ u + c, qp=res, status=res.status.value, n_variables=n,
                      box_relaxed=relaxed)


def solve_deepc(blocks: HankelBlocks, u_ini, y_ini, y_des, config: PlannerConfig,
                contact_plan: ContactPlan | None = None, u_des=None,
                solver: QpSolver | None = None) -> PlanResult:
    """Regularized DeePC with decision vector ``(u, y, g, sigma)``."""
    if config.lambda_g <= 0 or config.lambda_sigma <= 0:
        raise ValueError("lambda_g and lambda_sigma must be positive")
    m, p, T_ini, N = blocks.m_total, blocks.p_total, blocks.T_ini, blocks.N
    nc = blocks.n_cols
    nu, ny, ns = m * N, p * N, p * T_ini
    nv = nu + ny + nc + ns
    dims = blocks.agent_dims or ((m, p),)
    Qs = block_diag(*[config.weight("Q")] * len(dims))
    Rs = block_diag(*[config.weight("R")] * len(dims))
    Qbar, Rbar = _kron_weight(Qs, N), _kron_weight(Rs, N)
    u_des = np.zeros(nu) if u_des is None else np.asarray(u_des, float).ravel()
    u_ref = u_des if config.centralized_cost == "deviation" else np.zeros(nu)
    y_des = np.asarray(y_des, float).ravel()
    H = np.zeros((nv, nv))
    f = np.zeros(nv)
    su, sy = slice(0, nu), slice(nu, nu + ny)
    sg, ss = slice(nu + ny, nu + ny + nc), slice(nu + ny + nc, nv)
    H[su, su] = 2 * Rbar
    H[sy, sy] = 2 * Qbar
    H[sg, sg] = 2 * config.lambda_g * np.eye(nc)
    H[ss, ss] = 2 * config.lambda_sigma * np.eye(ns)
    f[su] = -2 * Rbar @ u_ref
    f[sy] = -2 * Qbar @ y_des
    # [U_p; Y_p; U_f; Y_f] g + [0; sigma; 0; 0] = [u_ini; y_ini; u; y]
    A_eq = np.zeros((m * T_ini + ns + nu + ny, nv))
    r = 0
    A_eq[r:r + m * T_ini, sg] = blocks.U_p
    r += m * T_ini
    A_eq[r:r + ns, sg] = blocks.Y_p
    A_eq[r:r + ns, ss] = np.eye(ns)
    r += ns
    A_eq[r:r + nu, sg] = blocks.U_f
    A_eq[r:r + nu, su] = -np.eye(nu)
    r += nu
    A_eq[r:r + ny, sg] = blocks.Y_f
    A_eq[r:r + ny, sy] = -np.eye(ny)
    b_eq = np.concatenate([np.ravel(u_ini), np.ravel(y_ini), np.zeros(nu + ny)])
    A_in, lb, ub = [], [], []
    for a, (m_a, p_a) in enumerate(dims):
        flags = None if contact_plan is None else contact_plan.flags[a]
        cons = _agent_input_constraints(config, flags, m_a, N)
        cols = agent_indices(dims, a, 0, N)
        cons = cons.remap(cols, nv)
        A_in.append(cons.A_in), lb.append(cons.lb), ub.append(cons.ub)
        A_eq = np.vstack([A_eq, cons.A_eq])
        b_eq = np.concatenate([b_eq, cons.b_eq])
        rows = agent_indices(dims, a, 1, N)
        sel = np.zeros((p_a * N, nv))
        sel[np.arange(p_a * N), nu + rows] = 1.0
        Ao, lo, hi = _output_box_rows(sel, np.zeros(p_a * N),
                                      config.output_lb, config.output_ub, p_a, N)
        A_in.append(Ao), lb.append(lo), ub.append(hi)
    qp = QpProblem(H, f, A_eq, b_eq, np.vstack(A_in) if A_in else None,
                   np.concatenate(lb) if lb else None, np.concatenate(ub) if ub else None)
    res = (solver or QpSolver(config.qp_settings())).solve(qp)
    _raise_on_failure(res, "DeePC plan")
    z = res.z
    return PlanResult(u=z[su].copy(), y=z[sy].copy(), qp=res, status=res.status.value,
                      g=z[sg].copy(), sigma=z[ss].copy(), n_variables=nv)


def decision_variable_count(m_i: int, p_i: int, N: int, eliminate_outputs: bool = False) -> int:
    """Per-agent decision variables: ``(m_i + p_i) N``, or ``m_i N`` with outputs
    substituted out."""
    return m_i * N if eliminate_outputs else (m_i + p_i) * N


# -- receding horizon ----------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    t: float
    agent: int
    status: str
    solve_ms: float
    iterations: int
    u: np.ndarray
    y_pred: np.ndarray
    y_meas: np.ndarray | None = None
    fallback: bool = False
    packet_rounds: tuple = ()
    box_relaxed: bool = False


class RecedingHorizonPlanner:
    """Round-by-round driver for centralized, distributed or DeePC planning.

    Args:
        model: ``TransitionMatrix`` (centralized/distributed) or
            ``HankelBlocks`` (DeePC; a transition matrix is still needed for
            the distributed mode).
        config: Planner configuration.
        agent_dims: ``(m_i, p_i)`` per agent.
        reference: Callable ``(t, agent) -> y_des`` over the horizon
            (``p_i N`` vector).
        contacts: Callable ``k0 -> list of (N, 4)`` stance flags per agent, or
            ``None`` when the input set is a box.
        u_des: Callable ``(k0, flags_per_agent) -> list of u_des`` per agent.
    """

    def __init__(self, config: PlannerConfig, tm: TransitionMatrix | None = None,
                 blocks: HankelBlocks | None = None, agent_dims=None,
                 reference=None, contacts=None, u_des=None, bus: PacketBus | None = None,
                 partition: BlockPartition | None = None, dump_dir=None):
        self.config = config
        self.tm = tm
        self.blocks = blocks
        dims = agent_dims or (tm.agent_dims if tm is not None else blocks.agent_dims)
        self.agent_dims = [tuple(d) for d in dims]
        self.n_agents = len(self.agent_dims)
        if config.mode in ("distributed", "centralized") and tm is None:
            raise ValueError(f"{config.mode} mode needs a transition matrix")
        if config.mode == "deepc" and blocks is None:
            raise ValueError("deepc mode needs Hankel blocks")
        self.partition = partition or (partition_blocks(tm) if tm is not None else None)
        self.windows = [AgentWindow(config.T_ini, m, p) for m, p in self.agent_dims]
        self.reference = reference
        self.contacts = contacts
        self.u_des_fn = u_des
        self.solvers = [QpSolver(config.qp_settings()) for _ in range(self.n_agents)]
        self.central_solver = QpSolver(config.qp_settings())
        self.round = 0
        self.k = 0
        self.records: list[RoundRecord] = []
        self.failures = 0
        self.dump_dir = dump_dir
        self._last_plans = [None] * self.n_agents
        self._last_qp = [None] * self.n_agents
        self._last_central = None
        self.bus = bus
        if config.mode == "distributed" and self.bus is None:
            self.bus = PacketBus(self.agent_dims, config.T_ini, config.N,
                                 bootstrap=self._bootstrap_packet)
        self._bootstrap_k = 0
        self._published: list[NeighborPacket | None] = [None] * self.n_agents

    # -- windows -----------------------------------------------------------

    def record(self, u_samples, y_samples):
        """Push applied inputs and measured outputs, ``(k, m_total)`` and
        ``(k, p_total)`` arrays, into every agent's window."""
        u_samples = np.atleast_2d(u_samples)
        y_samples = np.atleast_2d(y_samples)
        mo = np.concatenate([[0], np.cumsum([d[0] for d in self.agent_dims])])
        po = np.concatenate([[0], np.cumsum([d[1] for d in self.agent_dims])])
        for u, y in zip(u_samples, y_samples):
            for a, w in enumerate(self.windows):
                w.push(u[mo[a]:mo[a + 1]], y[po[a]:po[a + 1]])
        self.k += u_samples.shape[0]

    @property
    def warm(self) -> bool:
        return all(w.warm for w in self.windows)

    # -- references ----------------------------------------------------------

    def _flags(self, k0):
        if self.contacts is None:
            return [None] * self.n_agents
        return self.contacts(k0)

    def _u_des(self, k0, flags):
        N = self.config.N
        if self.u_des_fn is None:
            return [np.zeros(m * N) for m, _ in self.agent_dims]
        return self.u_des_fn(k0, flags)

    def _y_des(self, k0):
        t = k0 / self.config.sample_rate
        return [np.asarray(self.reference(t, a), dtype=float) for a in range(self.n_agents)]

    def _neighbor_term(self, a, packets, u_des):
        cfg = self.config
        if cfg.neighbor_alignment == "literal" or self.round == 0:
            # Round-0 packets are synthesized from the current windows.
            return build_neighbor_term(self.partition, a, packets)
        s = cfg.n_apply
        tail = {j: np.asarray(u_des[j], float)[(cfg.N - s) * m:]
                for j, (m, _) in enumerate(self.agent_dims)}
        return build_neighbor_term(self.partition, a, packets, own_packet=self._published[a],
                                   shift=s, u_tail=tail)

    def _bootstrap_packet(self, j: int) -> NeighborPacket:
        flags = self._flags(self._bootstrap_k)
        u_des = self._u_des(self._bootstrap_k, flags)
        w = self.windows[j]
        return NeighborPacket(j, -1, w.u_ini.copy(), w.y_ini.copy(), np.asarray(u_des[j], float))

    def _warm_start(self, prev, m):
        if prev is None:
            return None
        s = self.config.n_apply * m
        z = np.concatenate([prev[s:], prev[-s:]]) if s < prev.size else prev
        return (z, None, None)

    def _relax(self, a, res: PlanResult, u_des_a):
        """Blend the new local plan with the previous one carried forward."""
        w = self.config.relaxation
        prev = self._last_plans[a]
        if w >= 1.0 or prev is None:
            return res.u, res.y
        s = self.config.n_apply * self.agent_dims[a][0]
        base = np.concatenate([prev[s:], np.asarray(u_des_a, float)[prev.size - s:]])
        u = w * res.u + (1.0 - w) * base
        Gu, c = res.affine
        return u, Gu @ u + c

    # -- one round -----------------------------------------------------------

    def plan(self) -> np.ndarray:
        """Run one planning round at the current sample and return the
        ``(n_apply, m_total)`` inputs to apply."""
        if not self.warm:
            raise RuntimeError("windows are not warm; record T_ini samples first")
        cfg = self.config
        k0 = self.k
        t = k0 / cfg.sample_rate
        flags = self._flags(k0)
        u_des = self._u_des(k0, flags)
        y_des = self._y_des(k0)
        plans = [None] * self.n_agents
        if cfg.mode == "distributed":
            self._bootstrap_k = k0
            packets = [self.bus.collect(a, self.round) for a in range(self.n_agents)]

            def work(a):
                t0 = time.perf_counter()
                try:
                    nb = self._neighbor_term(a, packets[a], u_des)
                    m = self.agent_dims[a][0]
                    res = solve_local(self.partition, a, self.windows[a], y_des[a], u_des[a],
                                      nb, cfg, flags[a], solver=self.solvers[a],
                                      warm_start=self._warm_start(self._last_qp[a], m),
                                      dump_dir=self._dump_path())
                    return res, time.perf_counter() - t0, None
                except SolverFailure as exc:
                    return None, time.perf_counter() - t0, exc

            if cfg.concurrent and self.n_agents > 1:
                with ThreadPoolExecutor(max_workers=self.n_agents) as ex:
                    outs = list(ex.map(work, range(self.n_agents)))
            else:
                outs = [work(a) for a in range(self.n_agents)]
            for a, (res, dt, exc) in enumerate(outs):
                m, p = self.agent_dims[a]
                if res is None:
                    self.failures += 1
                    log.warning("round %d agent %d: %s; applying nominal input",
                                self.round, a, exc)
                    u_a = np.asarray(u_des[a], float)
                    y_a = np.full(p * cfg.N, np.nan)
                    status, iters, fb = (exc.result.status.value if exc.result else "failed"), \
                        (exc.result.iterations if exc.result else 0), True
                else:
                    u_a, y_a = self._relax(a, res, u_des[a])
                    status, iters, fb = res.status, res.qp.iterations, False
                relaxed = res is not None and res.box_relaxed
                plans[a] = u_a
                self._last_plans[a] = None if fb else u_a
                self._last_qp[a] = None if fb else res.u
                self.records.append(RoundRecord(
                    self.round, t, a, status, 1e3 * dt, iters,
                    u_a[:cfg.n_apply * m].copy(), y_a[:cfg.n_apply * p].copy(),
                    fallback=fb, packet_rounds=tuple(sorted(
                        (j, pk.round_index) for j, pk in packets[a].items())),
                    box_relaxed=relaxed))
            for a in range(self.n_agents):
                pkt = NeighborPacket(a, self.round, self.windows[a].u_ini.copy(),
                                     self.windows[a].y_ini.copy(), plans[a].copy())
                self.bus.publish(pkt)
                self._published[a] = pkt
            self.bus.advance()
        else:
            plans = self._plan_joint(k0, t, flags, u_des, y_des)
        self.round += 1
        return self._first_samples(plans)

    def _dump_path(self):
        if self.dump_dir is None:
            return None
        return Path(self.dump_dir) / f"round_{self.round:05d}"

    def _plan_joint(self, k0, t, flags, u_des, y_des):
        cfg = self.config
        dims = self.agent_dims
        N = cfg.N
        y_glob = np.empty(sum(p for _, p in dims) * N)
        u_glob = np.empty(sum(m for m, _ in dims) * N)
        for a in range(self.n_agents):
            y_glob[agent_indices(dims, a, 1, N)] = y_des[a]
            u_glob[agent_indices(dims, a, 0, N)] = u_des[a]
        cp = None if self.contacts is None else ContactPlan(flags)
        t0 = time.perf_counter()
        try:
            if cfg.mode == "centralized":
                m_tot = sum(m for m, _ in dims)
                ws = self._warm_start(self._last_central, m_tot)
                res = solve_centralized(self.tm, self.windows, y_glob, cfg, cp, u_glob,
                                        solver=self.central_solver, warm_start=ws,
                                        dump_dir=self._dump_path())
            else:
                u_ini = np.empty(sum(m for m, _ in dims) * cfg.T_ini)
                y_ini = np.empty(sum(p for _, p in dims) * cfg.T_ini)
                for a, w in enumerate(self.windows):
                    u_ini[agent_indices(dims, a, 0, cfg.T_ini)] = w.u_ini
                    y_ini[agent_indices(dims, a, 1, cfg.T_ini)] = w.y_ini
                res = solve_deepc(self.blocks, u_ini, y_ini, y_glob, cfg, cp, u_glob,
                                  solver=self.central_solver)
            u, y, status, iters, fb = res.u, res.y, res.status, res.qp.iterations, False
            relaxed = res.box_relaxed
            self._last_central = u
        except SolverFailure as exc:
            self.failures += 1
            log.warning("round %d: %s; applying nominal input", self.round, exc)
            u, y = u_glob, np.full(y_glob.shape, np.nan)
            status = exc.result.status.value if exc.result else "failed"
            iters = exc.result.iterations if exc.result else 0
            fb, relaxed = True, False
            self._last_central = None
        dt = time.perf_counter() - t0
        plans = []
        for a, (m, p) in enumerate(dims):
            ua = u[agent_indices(dims, a, 0, N)]
            ya = y[agent_indices(dims, a, 1, N)]
            plans.append(ua)
            self.records.append(RoundRecord(self.round, t, a, status, 1e3 * dt, iters,
                                            ua[:cfg.n_apply * m].copy(),
                                            ya[:cfg.n_apply * p].copy(), fallback=fb,
                                            box_relaxed=relaxed))
        return plans

    def _first_samples(self, plans) -> np.ndarray:
        n_apply = self.config.n_apply
        cols = [np.asarray(pl).reshape(self.config.N, -1)[:n_apply] for pl in plans]
        return np.hstack(cols)

    def attach_measurements(self, y_samples):
        """Store measured outputs for the records of the latest round."""
        y_samples = np.atleast_2d(y_samples)
        po = np.concatenate([[0], np.cumsum([d[1] for d in self.agent_dims])])
        for rec in self.records[-self.n_agents:]:
            rec.y_meas = y_samples[:, po[rec.agent]:po[rec.agent + 1]].ravel().copy()

    def write_logs(self, directory: str | Path) -> list[Path]:
        """One CSV per agent with the round log."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for a, (m, p) in enumerate(self.agent_dims):
            recs = [r for r in self.records if r.agent == a]
            n_u = self.config.n_apply * m
            n_y = self.config.n_apply * p
            header = (["round", "t", "solve_status", "solve_ms", "iterations"]
                      + [f"u{k}" for k in range(n_u)] + [f"y_pred{k}" for k in range(n_y)]
                      + [f"y_meas{k}" for k in range(n_y)])
            lines = [",".join(header)]
            for r in recs:
                ym = r.y_meas if r.y_meas is not None else np.full(n_y, np.nan)
                vals = [str(r.round), repr(r.t), r.status, f"{r.solve_ms:.3f}", str(r.iterations)]
                vals += [repr(float(v)) for v in np.concatenate([r.u, r.y_pred, ym])]
                lines.append(",".join(vals))
            path = directory / f"planner_agent{a}.csv"
            path.write_text("\n".join(lines) + "\n")
            paths.append(path)
        return paths


def step_receding_horizon(planner: RecedingHorizonPlanner, new_measurements=None) -> np.ndarray:
    """Fold in the last round's ``(u_applied, y_measured)`` and plan the next one."""
    if new_measurements is not None:
        u, y = new_measurements
        planner.attach_measurements(y)
        planner.record(u, y)
    return planner.plan()
