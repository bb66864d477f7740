"""Behavioral (Hankel) representations of recorded input-output data.

Signals are stored time-major: a signal of length ``T`` with ``q`` channels is
an array of shape ``(T, q)``.  For multi-agent data the channels of sample
``k`` are the agents' channels concatenated in agent order, so agent ``i``
occupies a contiguous slice inside every sample.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError

PE_RANK_TOL = 1e-10


@dataclass
class TrajectoryData:
    """Synchronized input/output time series.

    Attributes:
        u_samples: Inputs, shape ``(T, m_total)``.
        y_samples: Outputs, shape ``(T, p_total)``.
        sample_rate: Sampling rate in Hz.
        agent_dims: ``(m_i, p_i)`` for each agent.  Defaults to a single agent
            owning every channel.
        meta: Free-form metadata (audit results, provenance).
    """

    u_samples: np.ndarray
    y_samples: np.ndarray
    sample_rate: float = 1.0
    agent_dims: list[tuple[int, int]] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        u = np.asarray(self.u_samples, dtype=float)
        y = np.asarray(self.y_samples, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if u.ndim != 2 or y.ndim != 2:
            raise DimensionError("samples must be 1-D or 2-D arrays")
        if u.shape[0] != y.shape[0]:
            raise DimensionError(
                f"input length {u.shape[0]} != output length {y.shape[0]}")
        if u.shape[0] < 1:
            raise DimensionError("trajectory must contain at least one sample")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
            raise ValueError("trajectory contains non-finite samples")
        if self.agent_dims is None:
            self.agent_dims = [(u.shape[1], y.shape[1])]
        self.agent_dims = [(int(m), int(p)) for m, p in self.agent_dims]
        if sum(m for m, _ in self.agent_dims) != u.shape[1]:
            raise DimensionError("agent input dims do not sum to m_total")
        if sum(p for _, p in self.agent_dims) != y.shape[1]:
            raise DimensionError("agent output dims do not sum to p_total")
        self.u_samples = u
        self.y_samples = y

    @property
    def T(self) -> int:
        return self.u_samples.shape[0]

    @property
    def m_total(self) -> int:
        return self.u_samples.shape[1]

    @property
    def p_total(self) -> int:
        return self.y_samples.shape[1]

    @property
    def n_agents(self) -> int:
        return len(self.agent_dims)

    def save(self, csv_path: str | Path) -> Path:
        """Write ``<name>.csv`` plus a ``<name>.json`` sidecar.

        Returns the sidecar path.
        """
        csv_path = Path(csv_path)
        k = np.arange(self.T, dtype=float)[:, None]
        table = np.hstack([k, self.u_samples, self.y_samples])
        header = ",".join(
            ["k"]
            + [f"u_{i + 1}" for i in range(self.m_total)]
            + [f"y_{i + 1}" for i in range(self.p_total)])
        np.savetxt(csv_path, table, delimiter=",", header=header, comments="",
                   fmt="%.17g")
        sidecar = csv_path.with_suffix(".json")
        sidecar.write_text(json.dumps({
            "sample_rate": self.sample_rate,
            "agent_dims": [list(d) for d in self.agent_dims],
            "m_total": self.m_total,
            "p_total": self.p_total,
            "T": self.T,
            "meta": self.meta,
        }, indent=2, default=_json_default))
        return sidecar

    @classmethod
    def load(cls, csv_path: str | Path) -> "TrajectoryData":
        csv_path = Path(csv_path)
        info = json.loads(csv_path.with_suffix(".json").read_text())
        table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        m, p, T = int(info["m_total"]), int(info["p_total"]), int(info["T"])
        if table.shape != (T, 1 + m + p):
            raise DimensionError(
                f"{csv_path}: table shape {table.shape} does not match "
                f"sidecar (T={T}, m={m}, p={p})")
        if not np.array_equal(table[:, 0], np.arange(T)):
            raise DimensionError(f"{csv_path}: sample index column is not 0..T-1")
        return cls(table[:, 1:1 + m], table[:, 1 + m:],
                   sample_rate=float(info["sample_rate"]),
                   agent_dims=[tuple(d) for d in info["agent_dims"]],
                   meta=info.get("meta", {}))


@dataclass(frozen=True)
class HankelBlocks:
    """Past/future partition of depth ``T_ini + N`` Hankel matrices."""

    U_p: np.ndarray
    Y_p: np.ndarray
    U_f: np.ndarray
    Y_f: np.ndarray
    T_ini: int
    N: int
    agent_dims: tuple[tuple[int, int], ...] = ()

    @property
    def n_cols(self) -> int:
        return self.U_p.shape[1]

    @property
    def m_total(self) -> int:
        return self.U_p.shape[0] // self.T_ini

    @property
    def p_total(self) -> int:
        return self.Y_p.shape[0] // self.T_ini

    @property
    def L(self) -> int:
        return self.T_ini + self.N

    def context_stack(self) -> np.ndarray:
        """``[U_p; Y_p; U_f]``, the matrix whose pseudo-inverse defines g."""
        return np.vstack([self.U_p, self.Y_p, self.U_f])


def _as_signal(signal) -> np.ndarray:
    s = np.asarray(signal, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.ndim != 2 or s.shape[0] == 0:
        raise DimensionError("signal must be a non-empty sequence of vectors")
    return s


def build_hankel(signal, depth: int) -> np.ndarray:
    """Depth-``L`` block Hankel matrix of a ``(T, q)`` signal.

    Column ``c`` is the stacked window ``signal[c], ..., signal[c + L - 1]``,
    giving a ``(q * L, T - L + 1)`` matrix.

    Raises:
        DimensionError: If the signal is empty or ``depth`` is not in
            ``[1, T]``.
    """
    s = _as_signal(signal)
    T, q = s.shape
    if depth < 1 or depth > T:
        raise DimensionError(f"Hankel depth {depth} invalid for signal length {T}")
    n_cols = T - depth + 1
    # (n_cols, depth, q) strided view -> rows ordered (lag, channel)
    windows = np.lib.stride_tricks.sliding_window_view(s, depth, axis=0)
    return np.ascontiguousarray(windows.transpose(2, 1, 0).reshape(depth * q, n_cols))


def numerical_rank(matrix: np.ndarray, tolerance: float = PE_RANK_TOL) -> int:
    if matrix.size == 0:
        return 0
    s = np.linalg.svd(matrix, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tolerance * s[0]))


def is_persistently_exciting(signal, order: int,
                             tolerance: float = PE_RANK_TOL) -> bool:
    """True when the depth-``order`` Hankel matrix has full row rank.

    Rank counts singular values above ``tolerance * sigma_max``.
    """
    s = _as_signal(signal)
    T, q = s.shape
    if order < 1 or order > T:
        raise DimensionError(f"order {order} invalid for signal length {T}")
    if T - order + 1 < q * order:
        return False
    return numerical_rank(build_hankel(s, order), tolerance) == q * order


def persistency_order(signal, max_order: int,
                      tolerance: float = PE_RANK_TOL) -> int:
    """Largest ``L <= max_order`` for which the signal is PE of order ``L``.

    PE of order ``L`` implies PE of every lower order, so a bisection over
    ``L`` is valid.
    """
    s = _as_signal(signal)
    lo, hi = 0, min(max_order, s.shape[0])
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if is_persistently_exciting(s, mid, tolerance):
            lo = mid
        else:
            hi = mid - 1
    return lo


def required_data_length(m: int, n: int, T_ini: int, N: int) -> int:
    return (m + 1) * (T_ini + N + n) - 1


def check_data_length(m: int, n: int, T_ini: int, N: int, T: int) -> bool:
    """Whether ``T`` samples meet the ``(m + 1)(T_ini + N + n) - 1`` bound."""
    return T >= required_data_length(m, n, T_ini, N)


def split_past_future(trajectory: TrajectoryData, T_ini: int, N: int) -> HankelBlocks:
    L = T_ini + N
    if T_ini < 1 or N < 1:
        raise DimensionError("T_ini and N must be positive")
    if trajectory.T < L:
        raise DimensionError(
            f"need at least T_ini + N = {L} samples, got {trajectory.T}")
    m, p = trajectory.m_total, trajectory.p_total
    Hu = build_hankel(trajectory.u_samples, L)
    Hy = build_hankel(trajectory.y_samples, L)
    return HankelBlocks(
        U_p=Hu[:m * T_ini], Y_p=Hy[:p * T_ini],
        U_f=Hu[m * T_ini:], Y_f=Hy[p * T_ini:],
        T_ini=T_ini, N=N, agent_dims=tuple(trajectory.agent_dims))


def trajectory_residual(blocks: HankelBlocks, u_bar, y_bar) -> float:
    """Relative least-squares residual of ``[H_L(u); H_L(y)] g = [u_bar; y_bar]``."""
    u_bar = np.ravel(np.asarray(u_bar, dtype=float))
    y_bar = np.ravel(np.asarray(y_bar, dtype=float))
    L = blocks.L
    if u_bar.size != blocks.m_total * L or y_bar.size != blocks.p_total * L:
        raise DimensionError(
            f"expected u_bar of size {blocks.m_total * L} and y_bar of size "
            f"{blocks.p_total * L}, got {u_bar.size} and {y_bar.size}")
    stack = np.vstack([blocks.U_p, blocks.U_f, blocks.Y_p, blocks.Y_f])
    rhs = np.concatenate([u_bar, y_bar])
    g, *_ = np.linalg.lstsq(stack, rhs, rcond=None)
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    return float(np.linalg.norm(stack @ g - rhs) / scale)


def is_trajectory(blocks: HankelBlocks, u_bar, y_bar,
                  residual_tol: float = 1e-8) -> bool:
    """Membership test for the data-spanned behavior of length ``T_ini + N``.

    ``u_bar`` and ``y_bar`` are time-major stacked trajectories (or
    ``(L, q)`` arrays).
    """
    return trajectory_residual(blocks, u_bar, y_bar) <= residual_tol


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
