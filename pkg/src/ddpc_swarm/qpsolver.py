"""Dense operator-splitting (ADMM) solver for convex quadratic programs.

Solves::

    minimize    1/2 z'Hz + f'z
    subject to  A_eq z = b_eq
                lb <= A_in z <= ub

The iteration follows the OSQP splitting: equilibrate the KKT data, run
relaxed ADMM on ``l <= Az <= u`` with a diagonal penalty (stiffer on equality
rows), adapt the penalty from the residual balance, and finish by polishing
on the detected active set.  Problems in this package are small and dense, so
the linear algebra is plain numpy/scipy.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .errors import DimensionError

INF = np.inf
RHO_MIN, RHO_MAX = 1e-6, 1e6
RHO_EQ_SCALE = 1e3


class Status(str, enum.Enum):
    SOLVED = "solved"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"
    NON_CONVEX = "non_convex"


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        self.f = np.asarray(self.f, dtype=float).ravel()
        if self.H.shape != (n, n) or self.f.shape != (n,):
            raise DimensionError("H must be square and match f")
        if not np.allclose(self.H, self.H.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(self.H).max())):
            raise ValueError("H is not symmetric")
        self.A_eq, self.b_eq = _rows(self.A_eq, n), _vec(self.b_eq, 0)
        if self.b_eq.size != self.A_eq.shape[0]:
            if self.b_eq.size == 0:
                self.b_eq = np.zeros(self.A_eq.shape[0])
            else:
                raise DimensionError("b_eq does not match A_eq")
        self.A_in = _rows(self.A_in, n)
        m = self.A_in.shape[0]
        self.lb = np.full(m, -INF) if self.lb is None else _vec(self.lb, m)
        self.ub = np.full(m, INF) if self.ub is None else _vec(self.ub, m)
        if self.lb.size != m or self.ub.size != m:
            raise DimensionError("bounds do not match A_in")
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub for some constraint")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def stacked(self):
        """``(A, l, u)`` with equalities first."""
        A = np.vstack([self.A_eq, self.A_in])
        l = np.concatenate([self.b_eq, self.lb])
        u = np.concatenate([self.b_eq, self.ub])
        return A, l, u

    def objective(self, z) -> float:
        return float(0.5 * z @ self.H @ z + self.f @ z)

    def dump(self, directory: str | Path, tag: str = "qp") -> list[Path]:
        """Write each matrix/vector in Matrix Market text format."""
        from scipy.io import mmwrite

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name in ("H", "f", "A_eq", "b_eq", "A_in", "lb", "ub"):
            value = np.atleast_2d(getattr(self, name))
            if name in ("f", "b_eq", "lb", "ub"):
                value = value.reshape(-1, 1)
            # Matrix Market has no infinity token; clamp to a large sentinel.
            value = np.clip(value, -1e30, 1e30)
            path = directory / f"{tag}_{name}.mtx"
            if value.size == 0:
                # scipy's writer never returns on empty arrays.
                path.write_text("%%MatrixMarket matrix array real general\n"
                                f"{value.shape[0]} {value.shape[1]}\n")
            else:
                mmwrite(str(path), value)
            paths.append(path)
        return paths


def _rows(M, n) -> np.ndarray:
    if M is None:
        return np.zeros((0, n))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return np.zeros((0, n))
    if M.shape[1] != n:
        raise DimensionError(f"constraint matrix has {M.shape[1]} columns, expected {n}")
    return M


def _vec(v, m) -> np.ndarray:
    if v is None:
        return np.zeros(m)
    return np.asarray(v, dtype=float).ravel()


@dataclass
class QpSettings:
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    max_iterations: int = 4000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = 5.0
    scaling_iterations: int = 10
    check_interval: int = 10
    admm_eps: float = 1e-4
    infeasibility_tol: float = 1e-6
    polish: bool = True
    polish_refine: int = 3
    nonconvex_tol: float = 1e-9
    presolve: bool = True


@dataclass
class QpResult:
    z: np.ndarray
    status: Status
    primal_residual: float
    dual_residual: float
    complementarity: float
    iterations: int
    solve_time: float
    y_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective: float = np.nan
    polished: bool = False
    rho: float = np.nan

    @property
    def solved(self) -> bool:
        return self.status is Status.SOLVED

    @property
    def kkt_residuals(self) -> dict:
        return {"primal": self.primal_residual, "dual": self.dual_residual,
                "complementarity": self.complementarity}


def kkt_residuals(problem: QpProblem, z, y_eq, y_in):
    """Unscaled ``(primal, stationarity, complementarity)`` residuals.

    Multiplier sign convention: ``y > 0`` pushes against an upper bound,
    ``y < 0`` against a lower bound.
    """
    A, l, u = problem.stacked()
    y = np.concatenate([y_eq, y_in])
    Az = A @ z
    prim = float(np.max(np.maximum(l - Az, 0.0) + np.maximum(Az - u, 0.0), initial=0.0))
    dual = float(np.max(np.abs(problem.H @ z + problem.f + A.T @ y), initial=0.0))
    with np.errstate(invalid="ignore"):
        gap_u = np.where(y > 0, y * np.where(np.isfinite(u), u - Az, INF), 0.0)
        gap_l = np.where(y < 0, -y * np.where(np.isfinite(l), Az - l, INF), 0.0)
    comp = float(np.max(np.abs(gap_u) + np.abs(gap_l), initial=0.0))
    return prim, dual, comp


def _is_convex(H: np.ndarray, tol: float) -> bool:
    """``H + tol I`` admits a Cholesky factor iff ``H`` has no eigenvalue below ``-tol``."""
    try:
        sla.cholesky(H + tol * np.eye(H.shape[0]), check_finite=False)
    except sla.LinAlgError:
        return False
    return True


def _singleton_equalities(problem: QpProblem):
    """Equality rows touching exactly one variable, as ``(rows, cols, values)``.

    Returns ``None`` when there are none, or when two such rows pin the same
    variable (left to the solver, which then reports consistency itself).
    """
    A = problem.A_eq
    if A.shape[0] == 0:
        return None
    nz = A != 0
    single = np.flatnonzero(nz.sum(axis=1) == 1)
    if single.size == 0:
        return None
    cols = nz[single].argmax(axis=1)
    if np.unique(cols).size != cols.size:
        return None
    vals = problem.b_eq[single] / A[single, cols]
    return single, cols, vals


def _stationarity_scale(problem: QpProblem, z, y) -> float:
    A, _, _ = problem.stacked()
    return max(1.0, np.max(np.abs(problem.H @ z), initial=0.0),
               np.max(np.abs(A.T @ y), initial=0.0),
               np.max(np.abs(problem.f), initial=0.0))


class QpSolver:
    """ADMM workspace for one problem at a time.

    Instances are not shared between threads; create one per concurrent
    caller.  ``solve`` accepts an optional warm start ``(z, y_eq, y_in)``.
    """

    def __init__(self, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        self._rho = None

    def solve(self, problem: QpProblem, warm_start=None) -> QpResult:
        """Solve ``problem``; a warm start also reuses the last penalty."""
        st = self.settings
        t0 = time.perf_counter()
        n = problem.n
        if n and not _is_convex(problem.H, st.nonconvex_tol):
            return QpResult(np.zeros(n), Status.NON_CONVEX, INF, INF, INF, 0,
                            time.perf_counter() - t0)
        rho0 = self._rho if (warm_start is not None and self._rho is not None) else st.rho
        fixed = _singleton_equalities(problem) if st.presolve else None
        if fixed is None:
            res = self._admm(problem, warm_start, rho0)
        else:
            res = self._solve_reduced(problem, fixed, warm_start, rho0)
        if np.isfinite(res.rho):
            self._rho = res.rho
        res.solve_time = time.perf_counter() - t0
        return res

    def _solve_reduced(self, problem: QpProblem, fixed, warm_start, rho0) -> QpResult:
        """Drop variables pinned by one-variable equality rows, solve, restore."""
        rows, cols, vals = fixed
        n = problem.n
        keep = np.ones(n, dtype=bool)
        keep[cols] = False
        eq_keep = np.ones(problem.A_eq.shape[0], dtype=bool)
        eq_keep[rows] = False
        zf = np.zeros(n)
        zf[cols] = vals
        H, f = problem.H, problem.f
        red = QpProblem(H[np.ix_(keep, keep)], f[keep] + H[np.ix_(keep, ~keep)] @ vals,
                        problem.A_eq[np.ix_(eq_keep, keep)],
                        problem.b_eq[eq_keep] - problem.A_eq[eq_keep][:, ~keep] @ vals,
                        problem.A_in[:, keep],
                        problem.lb - problem.A_in[:, ~keep] @ vals,
                        problem.ub - problem.A_in[:, ~keep] @ vals)
        ws = None
        if warm_start is not None and warm_start[0] is not None:
            wy_eq = None if warm_start[1] is None else np.asarray(warm_start[1])[eq_keep]
            ws = (np.asarray(warm_start[0], float)[keep], wy_eq, warm_start[2])
        r = self._admm(red, ws, rho0)
        z = zf.copy()
        z[keep] = r.z
        y_eq = np.zeros(problem.A_eq.shape[0])
        y_eq[eq_keep] = r.y_eq
        # Multipliers of the dropped rows close the stationarity gap exactly.
        grad = H @ z + f + problem.A_eq.T @ y_eq + problem.A_in.T @ r.y_in
        y_eq[rows] = -grad[cols] / problem.A_eq[rows, cols]
        prim, dual, comp = kkt_residuals(problem, z, y_eq, r.y_in)
        return QpResult(z=z, status=r.status, primal_residual=prim, dual_residual=dual,
                        complementarity=comp, iterations=r.iterations, solve_time=r.solve_time,
                        y_eq=y_eq, y_in=r.y_in, objective=problem.objective(z),
                        polished=r.polished, rho=r.rho)

    def _admm(self, problem: QpProblem, warm_start, rho0: float) -> QpResult:
        st = self.settings
        t0 = time.perf_counter()
        n = problem.n
        A, l, u = problem.stacked()
        m = A.shape[0]
        n_eq = problem.A_eq.shape[0]

        # Ruiz equilibration of [[H, A'], [A, 0]].
        P, q, As = problem.H.copy(), problem.f.copy(), A.copy()
        D, E = np.ones(n), np.ones(m)
        for _ in range(st.scaling_iterations):
            col = np.maximum(np.abs(P).max(axis=0, initial=0.0),
                             np.abs(As).max(axis=0, initial=0.0)) if n else np.ones(0)
            dcol = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
            drow = 1.0 / np.sqrt(np.clip(np.abs(As).max(axis=1, initial=0.0), 1e-4, 1e4))
            P = dcol[:, None] * P * dcol[None, :]
            As = drow[:, None] * As * dcol[None, :]
            q = dcol * q
            D *= dcol
            E *= drow
        c = 1.0 / np.clip(max(np.mean(np.abs(P).max(axis=0, initial=0.0)) if n else 1.0,
                              np.max(np.abs(q), initial=0.0)), 1e-4, 1e4)
        P *= c
        q *= c
        ls = np.where(np.isfinite(l), l * E, -INF)
        us = np.where(np.isfinite(u), u * E, INF)

        eq_rows = np.abs(us - ls) < 1e-12 * np.maximum(1.0, np.abs(us))
        free_rows = ~np.isfinite(ls) & ~np.isfinite(us)
        rho = float(rho0)

        def rho_vec(r):
            v = np.full(m, r)
            v[eq_rows] = min(RHO_EQ_SCALE * r, RHO_MAX)
            v[free_rows] = RHO_MIN
            return v

        def factor(rv):
            K = P + st.sigma * np.eye(n) + (As.T * rv) @ As
            return sla.cho_factor(K, lower=False, check_finite=False)

        rv = rho_vec(rho)
        kkt = factor(rv)

        # Scaled iterates: x = D^-1 z, y_scaled = c^-1 E^-1 y.
        x = np.zeros(n)
        y = np.zeros(m)
        if warm_start is not None:
            wz, wy_eq, wy_in = warm_start
            if wz is not None:
                x = np.asarray(wz, dtype=float) / D
            if wy_eq is not None and wy_in is not None:
                y = c * np.concatenate([wy_eq, wy_in]) / E
        zc = np.clip(As @ x, ls, us)

        eps = max(st.admm_eps, st.feas_tol)
        status = Status.MAX_ITERATIONS
        polished = False
        best = None
        it = 0
        x_prev, y_prev = x.copy(), y.copy()
        while it < st.max_iterations:
            it += 1
            rhs = st.sigma * x - q + As.T @ (rv * zc - y)
            xt = sla.cho_solve(kkt, rhs, check_finite=False)
            zt = As @ xt
            x_new = st.alpha * xt + (1.0 - st.alpha) * x
            zr = st.alpha * zt + (1.0 - st.alpha) * zc
            z_new = np.clip(zr + y / rv, ls, us)
            y = y + rv * (zr - z_new)
            x, zc = x_new, z_new

            if it % st.check_interval and it != st.max_iterations:
                continue

            # Unscaled residuals for termination.
            xu = D * x
            yu = E * y / c
            Ax = A @ xu
            zu = zc / E
            r_prim = np.max(np.abs(Ax - zu), initial=0.0)
            Hx = problem.H @ xu
            Aty = A.T @ yu
            r_dual = np.max(np.abs(Hx + problem.f + Aty), initial=0.0)
            prim_scale = max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(zu), initial=0.0))
            dual_scale = max(np.max(np.abs(Hx), initial=0.0), np.max(np.abs(Aty), initial=0.0),
                             np.max(np.abs(problem.f), initial=0.0))

            if r_prim <= eps * (1 + prim_scale) and r_dual <= eps * (1 + dual_scale):
                cand = self._finalize(problem, xu, yu[:n_eq], yu[n_eq:])
                if st.polish:
                    pol = self._polish(problem, xu, yu, n_eq)
                    if pol is not None and self._better(pol, cand, problem):
                        cand, polished = pol, True
                if self._accept(problem, cand):
                    best = cand
                    status = Status.SOLVED
                    break
                polished = False
                best = cand
                eps = max(eps * 0.1, 1e-12)

            if m and self._primal_infeasible(y - y_prev, A, l, u, E, c):
                status = Status.INFEASIBLE
                break
            if self._dual_infeasible(x - x_prev, problem, A, l, u, D):
                status = Status.DUAL_INFEASIBLE
                break
            x_prev, y_prev = x.copy(), y.copy()

            if st.adaptive_rho and r_prim > 0 and r_dual > 0:
                ratio = np.sqrt((r_prim / (prim_scale + 1e-10))
                                / (r_dual / (dual_scale + 1e-10)))
                new_rho = float(np.clip(rho * ratio, RHO_MIN, RHO_MAX))
                if (new_rho > st.adaptive_rho_tolerance * rho
                        or new_rho < rho / st.adaptive_rho_tolerance):
                    rho = new_rho
                    rv = rho_vec(rho)
                    kkt = factor(rv)

        if best is None or status is not Status.SOLVED:
            xu, yu = D * x, E * y / c
            best = self._finalize(problem, xu, yu[:n_eq], yu[n_eq:])
            if status is Status.MAX_ITERATIONS and st.polish:
                pol = self._polish(problem, xu, yu, n_eq)
                if pol is not None and self._accept(problem, pol):
                    best, polished, status = pol, True, Status.SOLVED
        z, y_eq, y_in, prim, dual, comp = best
        return QpResult(z=z, status=status, primal_residual=prim, dual_residual=dual,
                        complementarity=comp, iterations=it,
                        solve_time=time.perf_counter() - t0, y_eq=y_eq, y_in=y_in,
                        objective=problem.objective(z), polished=polished, rho=rho)

    # -- helpers ---------------------------------------------------------

    @staticmethod
    def _finalize(problem, z, y_eq, y_in):
        # A side with an infinite bound cannot carry a multiplier.
        y_in = np.where(np.isfinite(problem.ub), y_in, np.minimum(y_in, 0.0))
        y_in = np.where(np.isfinite(problem.lb), y_in, np.maximum(y_in, 0.0))
        prim, dual, comp = kkt_residuals(problem, z, y_eq, y_in)
        return z, y_eq, y_in, prim, dual, comp

    def _accept(self, problem, cand) -> bool:
        z, y_eq, y_in, prim, dual, comp = cand
        scale = _stationarity_scale(problem, z, np.concatenate([y_eq, y_in]))
        return (prim <= self.settings.feas_tol
                and dual <= self.settings.opt_tol * scale
                and comp <= self.settings.opt_tol * scale)

    @staticmethod
    def _better(a, b, problem) -> bool:
        return max(a[3], a[4], a[5]) <= max(b[3], b[4], b[5])

    def _polish(self, problem: QpProblem, z, y, n_eq):
        """Solve the equality-constrained KKT system on the guessed active set."""
        A, l, u = problem.stacked()
        Az = A @ z
        tol = 1e-8 * (1 + np.abs(Az))
        low = np.isfinite(l) & ((Az - l < -y) | (Az - l <= tol))
        upp = np.isfinite(u) & ((u - Az < y) | (u - Az <= tol))
        low[:n_eq] = False
        upp[:n_eq] = True
        active = low | upp
        Aa = A[active]
        ba = np.where(upp[active], u[active], l[active])
        n, k = problem.n, Aa.shape[0]
        delta = 1e-9 * max(1.0, np.abs(problem.H).max())
        K = np.block([[problem.H, Aa.T], [Aa, np.zeros((k, k))]])
        Kreg = K.copy()
        Kreg[:n, :n] += delta * np.eye(n)
        Kreg[n:, n:] -= delta * np.eye(k)
        rhs = np.concatenate([-problem.f, ba])
        try:
            lu = sla.lu_factor(Kreg, check_finite=False)
        except (sla.LinAlgError, ValueError):
            return None
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        for _ in range(self.settings.polish_refine):
            sol = sol + sla.lu_solve(lu, rhs - K @ sol, check_finite=False)
        if not np.all(np.isfinite(sol)):
            return None
        zp = sol[:n]
        ya = sol[n:]
        # Active multipliers must have the side-consistent sign.
        side = np.where(upp[active], 1.0, -1.0)
        side[: int(np.sum(active[:n_eq]))] = 0.0
        if np.any(side * ya < -1e-7 * (1 + np.abs(ya).max(initial=0.0))):
            return None
        yfull = np.zeros(A.shape[0])
        yfull[active] = ya
        return self._finalize(problem, zp, yfull[:n_eq], yfull[n_eq:])

    def _primal_infeasible(self, dy_s, A, l, u, E, c) -> bool:
        dy = E * dy_s / c
        norm = np.max(np.abs(dy), initial=0.0)
        if norm < 1e-12:
            return False
        tol = self.settings.infeasibility_tol * norm
        if np.max(np.abs(A.T @ dy), initial=0.0) > tol:
            return False
        up = np.where(np.isfinite(u), u, 0.0) @ np.maximum(dy, 0.0)
        lo = np.where(np.isfinite(l), l, 0.0) @ np.minimum(dy, 0.0)
        if np.any(~np.isfinite(u) & (dy > tol)) or np.any(~np.isfinite(l) & (dy < -tol)):
            return False
        return up + lo < -tol

    def _dual_infeasible(self, dx_s, problem, A, l, u, D) -> bool:
        dx = D * dx_s
        norm = np.max(np.abs(dx), initial=0.0)
        if norm < 1e-12:
            return False
        tol = self.settings.infeasibility_tol * norm
        if np.max(np.abs(problem.H @ dx), initial=0.0) > tol or problem.f @ dx > -tol:
            return False
        Adx = A @ dx
        ok_u = np.where(np.isfinite(u), Adx <= tol, True)
        ok_l = np.where(np.isfinite(l), Adx >= -tol, True)
        return bool(np.all(ok_u & ok_l))


def solve(problem: QpProblem, settings: QpSettings | None = None,
          warm_start=None) -> QpResult:
    return QpSolver(settings).solve(problem, warm_start)
