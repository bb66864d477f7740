"""N-step data-driven transition matrix and its per-agent block partition."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .behavioral import HankelBlocks
from .errors import DimensionError

SVD_CUTOFF = 1e-8


@dataclass(frozen=True)
class TransitionMatrix:
    """``G = Y_f pinv([U_p; Y_p; U_f])``.

    The context vector multiplied by ``G`` is ``[u_ini; y_ini; u]`` with each
    segment time-major and agents interleaved within a sample.
    """

    G: np.ndarray
    m_total: int
    p_total: int
    T_ini: int
    N: int
    agent_dims: tuple[tuple[int, int], ...]
    svd_cutoff: float = SVD_CUTOFF
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n_ctx = (self.m_total + self.p_total) * self.T_ini + self.m_total * self.N
        if self.G.shape != (self.p_total * self.N, n_ctx):
            raise DimensionError(
                f"G has shape {self.G.shape}, expected "
                f"{(self.p_total * self.N, n_ctx)}")
        if not np.all(np.isfinite(self.G)):
            raise ValueError("transition matrix has non-finite entries")
        self.G.setflags(write=False)

    @property
    def n_ctx(self) -> int:
        return self.G.shape[1]

    @property
    def n_agents(self) -> int:
        return len(self.agent_dims)

    def save(self, path: str | Path) -> Path:
        """Write ``<path>.bin`` (little-endian float64, row-major) and
        ``<path>.json`` header.  Returns the header path."""
        path = Path(path)
        bin_path = path.with_suffix(".bin")
        bin_path.write_bytes(self.G.astype("<f8").tobytes(order="C"))
        header = {
            "rows": self.G.shape[0], "cols": self.G.shape[1],
            "m_total": self.m_total, "p_total": self.p_total,
            "T_ini": self.T_ini, "N": self.N,
            "agent_dims": [list(d) for d in self.agent_dims],
            "svd_cutoff": self.svd_cutoff,
            "dtype": "<f8", "order": "C",
            "meta": self.meta,
        }
        head_path = path.with_suffix(".json")
        head_path.write_text(json.dumps(header, indent=2))
        return head_path

    @classmethod
    def load(cls, path: str | Path) -> "TransitionMatrix":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        rows, cols = header["rows"], header["cols"]
        if raw.size != rows * cols:
            raise DimensionError(f"{path}: expected {rows * cols} floats, got {raw.size}")
        return cls(raw.reshape(rows, cols).astype(float),
                   m_total=header["m_total"], p_total=header["p_total"],
                   T_ini=header["T_ini"], N=header["N"],
                   agent_dims=tuple(tuple(d) for d in header["agent_dims"]),
                   svd_cutoff=header["svd_cutoff"], meta=header.get("meta", {}))


def pinv_cutoff(matrix: np.ndarray, svd_cutoff: float = SVD_CUTOFF):
    """SVD pseudo-inverse zeroing singular values below ``svd_cutoff * s_max``.

    Returns ``(pinv, rank)``.
    """
    U, s, Vt = np.linalg.svd(matrix, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(matrix.T.shape), 0
    keep = s > svd_cutoff * s[0]
    rank = int(np.sum(keep))
    return (Vt[:rank].T / s[:rank]) @ U[:, :rank].T, rank


def fit_transition(blocks: HankelBlocks, svd_cutoff: float = SVD_CUTOFF,
                   provenance: str | None = None) -> TransitionMatrix:
    stack = blocks.context_stack()
    if not (np.all(np.isfinite(stack)) and np.all(np.isfinite(blocks.Y_f))):
        raise ValueError("Hankel blocks contain non-finite entries")
    if blocks.n_cols < 1:
        raise DimensionError("Hankel blocks have no columns")
    # Y_f @ pinv(S) through the thin SVD of S without forming pinv(S).
    U, s, Vt = np.linalg.svd(stack, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        rank = 0
        G = np.zeros((blocks.Y_f.shape[0], stack.shape[0]))
    else:
        rank = int(np.sum(s > svd_cutoff * s[0]))
        G = ((blocks.Y_f @ Vt[:rank].T) / s[:rank]) @ U[:, :rank].T
    meta = {
        "rank": rank,
        "n_rows": int(stack.shape[0]),
        "n_cols": int(blocks.n_cols),
        "rank_deficient": rank < stack.shape[0],
        "sigma_max": float(s[0]) if s.size else 0.0,
        "sigma_min_kept": float(s[rank - 1]) if rank else 0.0,
    }
    if provenance is not None:
        meta["data_sha256"] = provenance
    agent_dims = blocks.agent_dims or ((blocks.m_total, blocks.p_total),)
    return TransitionMatrix(G, m_total=blocks.m_total, p_total=blocks.p_total,
                            T_ini=blocks.T_ini, N=blocks.N,
                            agent_dims=tuple(tuple(d) for d in agent_dims),
                            svd_cutoff=svd_cutoff, meta=meta)


def data_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def stack_context(m: int, p: int, T_ini: int, N: int, u_ini, y_ini, u) -> np.ndarray:
    u_ini, y_ini, u = (np.ravel(np.asarray(v, dtype=float)) for v in (u_ini, y_ini, u))
    if u_ini.size != m * T_ini or y_ini.size != p * T_ini or u.size != m * N:
        raise DimensionError(
            f"context sizes ({u_ini.size}, {y_ini.size}, {u.size}) do not match "
            f"({m * T_ini}, {p * T_ini}, {m * N})")
    return np.concatenate([u_ini, y_ini, u])


def predict(tm: TransitionMatrix, u_ini, y_ini, u) -> np.ndarray:
    """Predicted outputs ``G [u_ini; y_ini; u]`` (length ``p_total * N``)."""
    return tm.G @ stack_context(tm.m_total, tm.p_total, tm.T_ini, tm.N, u_ini, y_ini, u)


def approximate_g(blocks: HankelBlocks, u_ini, y_ini, u,
                  svd_cutoff: float = SVD_CUTOFF) -> np.ndarray:
    """Minimum-norm ``g`` with ``[U_p; Y_p; U_f] g = [u_ini; y_ini; u]``."""
    ctx = stack_context(blocks.m_total, blocks.p_total, blocks.T_ini, blocks.N,
                        u_ini, y_ini, u)
    pinv, _ = pinv_cutoff(blocks.context_stack(), svd_cutoff)
    return pinv @ ctx


def agent_offsets(dims, which: int) -> np.ndarray:
    sizes = np.array([d[which] for d in dims], dtype=int)
    return np.concatenate([[0], np.cumsum(sizes)])


def agent_indices(dims, agent: int, which: int, steps: int, base: int = 0) -> np.ndarray:
    """Global indices of one agent's channels over ``steps`` interleaved samples.

    ``which`` selects input (0) or output (1) channels.
    """
    off = agent_offsets(dims, which)
    total = off[-1]
    local = np.arange(off[agent], off[agent + 1])
    return (base + (np.arange(steps)[:, None] * total + local[None, :])).ravel()


@dataclass(frozen=True)
class BlockPartition:
    """Per-agent-pair view of a transition matrix.

    ``row_maps[i]`` lists the rows of ``G`` holding agent ``i``'s predicted
    outputs; ``col_maps[j]`` lists the columns multiplying agent ``j``'s
    contiguous context ``[u_ini^j; y_ini^j; u^j]``.  ``blocks[i][j]`` is
    ``G[row_maps[i]][:, col_maps[j]]``.
    """

    blocks: tuple[tuple[np.ndarray, ...], ...]
    row_maps: tuple[np.ndarray, ...]
    col_maps: tuple[np.ndarray, ...]
    agent_dims: tuple[tuple[int, int], ...]
    T_ini: int
    N: int

    @property
    def n_agents(self) -> int:
        return len(self.agent_dims)

    def block(self, i: int, j: int) -> np.ndarray:
        return self.blocks[i][j]

    def context_size(self, j: int) -> int:
        m, p = self.agent_dims[j]
        return (m + p) * self.T_ini + m * self.N

    def split_own(self, i: int):
        """Split ``G_ii`` into the window part and the free-input part."""
        m, p = self.agent_dims[i]
        n_win = (m + p) * self.T_ini
        return self.blocks[i][i][:, :n_win], self.blocks[i][i][:, n_win:]

    def assemble(self, contexts) -> np.ndarray:
        """Full prediction in global interleaved order from per-agent contexts."""
        out = np.empty(sum(len(r) for r in self.row_maps))
        for i, rows in enumerate(self.row_maps):
            out[rows] = sum(self.blocks[i][j] @ np.asarray(contexts[j], dtype=float)
                            for j in range(self.n_agents))
        return out

    def zero_coupling(self) -> "BlockPartition":
        """Copy with every off-diagonal block replaced by zeros."""
        blocks = tuple(
            tuple(b if i == j else np.zeros_like(b) for j, b in enumerate(row))
            for i, row in enumerate(self.blocks))
        return BlockPartition(blocks, self.row_maps, self.col_maps,
                              self.agent_dims, self.T_ini, self.N)


def partition_blocks(tm: TransitionMatrix) -> BlockPartition:
    dims = tm.agent_dims
    if not dims:
        raise DimensionError("transition matrix carries no agent dims")
    if (sum(d[0] for d in dims) != tm.m_total
            or sum(d[1] for d in dims) != tm.p_total):
        raise DimensionError("agent dims inconsistent with the transition matrix")
    T_ini, N = tm.T_ini, tm.N
    base_y = tm.m_total * T_ini
    base_u = base_y + tm.p_total * T_ini
    row_maps, col_maps = [], []
    for a in range(len(dims)):
        row_maps.append(agent_indices(dims, a, 1, N))
        col_maps.append(np.concatenate([
            agent_indices(dims, a, 0, T_ini),
            agent_indices(dims, a, 1, T_ini, base=base_y),
            agent_indices(dims, a, 0, N, base=base_u),
        ]))
    blocks = tuple(
        tuple(np.ascontiguousarray(tm.G[np.ix_(r, c)]) for c in col_maps)
        for r in row_maps)
    for row in blocks:
        for b in row:
            b.setflags(write=False)
    return BlockPartition(blocks, tuple(row_maps), tuple(col_maps),
                          tuple(tuple(d) for d in dims), T_ini, N)


def split_agent_context(dims, T_ini: int, N: int, u_ini, y_ini, u):
    """Per-agent contiguous contexts from interleaved global segments."""
    u_ini, y_ini, u = (np.ravel(np.asarray(v, dtype=float)) for v in (u_ini, y_ini, u))
    out = []
    for a in range(len(dims)):
        out.append(np.concatenate([
            u_ini[agent_indices(dims, a, 0, T_ini)],
            y_ini[agent_indices(dims, a, 1, T_ini)],
            u[agent_indices(dims, a, 0, N)],
        ]))
    return out
