from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError


@dataclass
class LtiPlant:
    """Discrete-time ``x+ = Ax + Bu``, ``y = Cx + Du``.

    The matrices are private to the plant; planners only ever see (u, y).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    x: np.ndarray | None = None

    def __post_init__(self):
        self.A, self.B, self.C, self.D = (np.atleast_2d(np.asarray(M, dtype=float))
                                          for M in (self.A, self.B, self.C, self.D))
        n = self.A.shape[0]
        if (self.A.shape != (n, n) or self.B.shape[0] != n or self.C.shape[1] != n
                or self.D.shape != (self.C.shape[0], self.B.shape[1])):
            raise DimensionError("inconsistent state-space dimensions")
        self.x = np.zeros(n) if self.x is None else np.asarray(self.x, dtype=float).copy()
        if self.x.shape != (n,):
            raise DimensionError("state has wrong dimension")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def output(self, u) -> np.ndarray:
        return self.C @ self.x + self.D @ np.asarray(u, dtype=float)

    def simulate(self, u_seq, x0=None):
        """Run from ``x0`` (default: current state) and return ``(Y, x_final)``.

        Does not modify the plant state.
        """
        u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
        if u_seq.shape[1] != self.m:
            raise DimensionError(f"input has {u_seq.shape[1]} channels, plant has {self.m}")
        x = self.x.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
        Y = np.empty((u_seq.shape[0], self.p))
        for k, u in enumerate(u_seq):
            Y[k] = self.C @ x + self.D @ u
            x = self.A @ x + self.B @ u
        return Y, x


def lti_step(plant: LtiPlant, u):
    """Emit ``y = Cx + Du`` and advance ``x <- Ax + Bu`` in place.

    Returns ``(y, next_state)``.
    """
    u = np.asarray(u, dtype=float).ravel()
    if u.shape != (plant.m,):
        raise DimensionError(f"input has size {u.size}, plant expects {plant.m}")
    y = plant.C @ plant.x + plant.D @ u
    plant.x = plant.A @ plant.x + plant.B @ u
    return y, plant.x.copy()


def random_stable_plant(rng: np.random.Generator, n: int, m: int, p: int,
                        radius: float = 0.9, feedthrough: bool = False) -> LtiPlant:
    """Random stable plant with spectral radius ``radius`` (generically
    controllable and observable)."""
    A = rng.standard_normal((n, n))
    A *= radius / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((p, n))
    D = rng.standard_normal((p, m)) if feedthrough else np.zeros((p, m))
    return LtiPlant(A, B, C, D)


def block_diagonal_plant(plants) -> LtiPlant:
    """Side-by-side composition with interleaved (agent-contiguous) channels."""
    from scipy.linalg import block_diag

    return LtiPlant(block_diag(*[q.A for q in plants]),
                    block_diag(*[q.B for q in plants]),
                    block_diag(*[q.C for q in plants]),
                    block_diag(*[q.D for q in plants]))


def coupled_plant(plants, coupling: float, rng: np.random.Generator) -> LtiPlant:
    """Block-diagonal composition plus state coupling of size ``coupling``.

    The off-diagonal state blocks are random with unit spectral norm scaled by
    ``coupling``; the result is rescaled if needed to keep it stable.
    """
    base = block_diagonal_plant(plants)
    A = base.A.copy()
    sizes = [q.n for q in plants]
    off = np.concatenate([[0], np.cumsum(sizes)])
    for i in range(len(plants)):
        for j in range(len(plants)):
            if i == j:
                continue
            blk = rng.standard_normal((sizes[i], sizes[j]))
            A[off[i]:off[i + 1], off[j]:off[j + 1]] = coupling * blk / np.linalg.norm(blk, 2)
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    if rho >= 0.98:
        A *= 0.95 / rho
    return LtiPlant(A, base.B, base.C, base.D)
