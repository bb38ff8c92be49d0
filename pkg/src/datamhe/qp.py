"""Dense convex QP: minimum-norm equality-constrained solves and a primal
active-set method for box constraints on a linear image S z.

Problem form::

    minimize    1/2 z'Hz + f'z
    subject to  Aeq z = beq,   lower <= S z <= upper
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"
UNBOUNDED = "unbounded"

PSD_RTOL = 1e-8
PINV_RTOL = 1e-10
KKT_TOL = 1e-8
BOX_TOL = 1e-10


class QpError(ValueError):
    pass


@dataclass(frozen=True)
class DenseQp:
    H: np.ndarray
    f: np.ndarray
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    S: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.array(self.H, dtype=float))
        d = H.shape[0]
        if H.shape != (d, d):
            raise QpError(f"H must be square, got {H.shape}")
        if not np.allclose(H, H.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(H).max())):
            raise QpError("H is not symmetric")
        H = 0.5 * (H + H.T)
        f = np.array(self.f, dtype=float).reshape(-1)
        if f.shape != (d,):
            raise QpError(f"f must have length {d}")
        if self.Aeq is None:
            Aeq, beq = np.zeros((0, d)), np.zeros(0)
        else:
            Aeq = np.array(self.Aeq, dtype=float).reshape(-1, d)
            beq = np.array(self.beq, dtype=float).reshape(-1)
            if beq.shape != (Aeq.shape[0],):
                raise QpError(f"beq must have length {Aeq.shape[0]}")
        has_box = self.lower is not None or self.upper is not None
        if has_box:
            S = np.eye(d) if self.S is None else np.array(self.S, dtype=float).reshape(-1, d)
            k = S.shape[0]
            lo = np.full(k, -np.inf) if self.lower is None else np.array(self.lower, dtype=float).reshape(-1)
            hi = np.full(k, np.inf) if self.upper is None else np.array(self.upper, dtype=float).reshape(-1)
            if lo.shape != (k,) or hi.shape != (k,):
                raise QpError(f"bounds must have length {k}")
            if np.any(lo > hi):
                raise QpError("lower bound exceeds upper bound")
        else:
            S, lo, hi = np.zeros((0, d)), np.zeros(0), np.zeros(0)
        for name, val in (("H", H), ("f", f), ("Aeq", Aeq), ("beq", beq), ("S", S),
                          ("lower", lo), ("upper", hi)):
            object.__setattr__(self, name, val)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def has_boxes(self) -> bool:
        return self.S.shape[0] > 0

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.H @ z + self.f @ z)

    def without_boxes(self) -> "DenseQp":
        return DenseQp(self.H, self.f, self.Aeq, self.beq)


@dataclass
class QpSolution:
    z: np.ndarray
    multipliers_eq: np.ndarray
    multipliers_box: np.ndarray
    active_set: tuple[int, ...]
    objective: float
    kkt_residual: float
    status: str
    iterations: int = 0
    infeasibility: float = 0.0
    # directions along which the objective and all active constraints are flat
    null_directions: np.ndarray = field(default=None, repr=False)


def _null_space(M: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray, int]:
    """(row-space pseudo-inverse, null-space basis, rank) of M via SVD."""
    if M.shape[0] == 0:
        return np.zeros((d, 0)), np.eye(d), 0
    U, s, Vt = np.linalg.svd(M, full_matrices=True)
    tol = s[0] * max(M.shape) * 1e-12 if s.size else 0.0
    r = int(np.sum(s > tol))
    pinv = Vt[:r].T @ (U[:, :r].T / s[:r, None])
    return pinv, Vt[r:].T, r


def _psd_eigh(Hr: np.ndarray, total_max: float) -> tuple[np.ndarray, np.ndarray]:
    mu, W = np.linalg.eigh(Hr)
    scale = max(total_max, float(np.max(np.abs(mu))) if mu.size else 0.0)
    if mu.size and mu[0] < -PSD_RTOL * scale:
        raise QpError(f"Hessian is not positive semidefinite (eigenvalue {mu[0]:.3g})")
    mu = np.maximum(mu, 0.0)
    return mu, W


def kkt_residual(qp: DenseQp, z, multipliers_eq=None, multipliers_box=None, relative: bool = True) -> float:
    """Largest stationarity, feasibility or complementarity violation.

    ``multipliers_box`` is signed per row of S: positive at an active upper
    bound, negative at an active lower bound. With ``relative`` each term is
    divided by one plus the magnitude of the quantities it compares.
    """
    z = np.asarray(z, dtype=float)
    lam = np.zeros(qp.Aeq.shape[0]) if multipliers_eq is None else np.asarray(multipliers_eq, float)
    nu = np.zeros(qp.S.shape[0]) if multipliers_box is None else np.asarray(multipliers_box, float)

    def term(value, magnitude):
        return value / (1.0 + magnitude) if relative else value

    Hz = qp.H @ z
    grad = Hz + qp.f + qp.Aeq.T @ lam + qp.S.T @ nu
    g_mag = max(np.abs(Hz).max(initial=0.0), np.abs(qp.f).max(initial=0.0))
    worst = term(np.abs(grad).max(initial=0.0), g_mag)
    if qp.Aeq.shape[0]:
        worst = max(worst, term(np.abs(qp.Aeq @ z - qp.beq).max(), np.abs(qp.beq).max()))
    if qp.has_boxes:
        sz = qp.S @ z
        bound_mag = np.maximum(np.where(np.isfinite(qp.upper), np.abs(qp.upper), 0.0),
                               np.where(np.isfinite(qp.lower), np.abs(qp.lower), 0.0))
        viol = np.maximum(np.maximum(sz - qp.upper, qp.lower - sz), 0.0)
        slack = np.where(nu > 0, qp.upper - sz, sz - qp.lower)
        slack = np.where(nu == 0, 0.0, np.maximum(slack, 0.0))
        comp = np.minimum(term(np.abs(nu), g_mag), term(slack, bound_mag))
        worst = max(worst, term(viol, bound_mag).max(), comp.max())
    return float(worst)


class EqualityQpSolver:
    """Factorization of an equality-constrained QP for repeated right-hand sides.

    The particular solution lies in the row space of Aeq and the free part is
    solved in an orthonormal null-space basis with a pseudo-inverse of the
    reduced Hessian, so among all minimizers the one of least norm is
    returned even when H is singular or Aeq has redundant rows.
    """

    def __init__(self, H: np.ndarray, Aeq: np.ndarray):
        self.H = H
        self.Aeq = Aeq
        d = H.shape[0]
        self.hmax = float(np.abs(H).max(initial=0.0))
        self._pinv, Z, self.rank = _null_space(Aeq, d)
        Hr = Z.T @ H @ Z
        mu, W = _psd_eigh(0.5 * (Hr + Hr.T), self.hmax)
        pos = mu > PINV_RTOL * max(self.hmax, mu[-1] if mu.size else 0.0)
        self._Z = Z
        self._range = Z @ W[:, pos]
        self._inv_mu = 1.0 / mu[pos]
        self._flat_basis = W[:, ~pos]
        # directions that change neither the objective nor the constraints
        self.null_directions = Z @ W[:, ~pos]

    def minimizer(self, f: np.ndarray, beq: np.ndarray) -> tuple[np.ndarray, str, float]:
        zp = self._pinv @ beq
        infeas = float(np.abs(self.Aeq @ zp - beq).max(initial=0.0))
        if infeas > 1e-9 * (1.0 + np.abs(beq).max(initial=0.0)):
            return zp, INFEASIBLE, infeas
        g = self.H @ zp + f
        g_flat = self._flat_basis.T @ (self._Z.T @ g)
        if np.abs(g_flat).max(initial=0.0) > 1e-9 * (1.0 + np.abs(g).max(initial=0.0)):
            return zp, UNBOUNDED, infeas
        return zp - self._range @ (self._inv_mu * (self._range.T @ g)), OPTIMAL, infeas

    def solve(self, f, beq) -> QpSolution:
        f = np.asarray(f, dtype=float)
        beq = np.asarray(beq, dtype=float)
        z, status, infeas = self.minimizer(f, beq)
        lam = -self._pinv.T @ (self.H @ z + f) if self.Aeq.shape[0] else np.zeros(0)
        qp = DenseQp(self.H, f, self.Aeq, beq)
        return QpSolution(
            z=z, multipliers_eq=lam, multipliers_box=np.zeros(0), active_set=(),
            objective=qp.objective(z), kkt_residual=kkt_residual(qp, z, lam), status=status,
            infeasibility=infeas, null_directions=self.null_directions,
        )


def solve_eq_qp(qp: DenseQp) -> QpSolution:
    """Minimum-norm minimizer subject to the equality constraints only."""
    sol = EqualityQpSolver(qp.H, qp.Aeq).solve(qp.f, qp.beq)
    sol.multipliers_box = np.zeros(qp.S.shape[0])
    return sol


def _box_rows(qp: DenseQp) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Finite bounds as rows G z <= h, with source row index and sign."""
    idx_up = np.flatnonzero(np.isfinite(qp.upper))
    idx_lo = np.flatnonzero(np.isfinite(qp.lower))
    G = np.vstack([qp.S[idx_up], -qp.S[idx_lo]])
    h = np.concatenate([qp.upper[idx_up], -qp.lower[idx_lo]])
    src = np.concatenate([idx_up, idx_lo])
    sign = np.concatenate([np.ones(len(idx_up)), -np.ones(len(idx_lo))])
    return G, h, src, sign


def _phase_one(qp: DenseQp, G: np.ndarray, h: np.ndarray) -> np.ndarray | None:
    res = scipy.optimize.linprog(
        np.zeros(qp.dim),
        A_ub=G if G.shape[0] else None, b_ub=h if G.shape[0] else None,
        A_eq=qp.Aeq if qp.Aeq.shape[0] else None, b_eq=qp.beq if qp.Aeq.shape[0] else None,
        bounds=[(None, None)] * qp.dim, method="highs",
    )
    return res.x if res.status == 0 else None


def _tol_rows(h: np.ndarray) -> np.ndarray:
    return BOX_TOL * (1.0 + np.abs(h))


def solve_qp_active_set(qp: DenseQp, max_iter: int | None = None, debug: bool = False) -> QpSolution:
    """Primal active-set method; every subproblem is a minimum-norm equality solve.

    Starts with all bounds inactive: if the equality-only optimizer already
    satisfies the boxes it is returned unchanged.
    """
    d = qp.dim
    max_iter = 50 * d if max_iter is None else max_iter
    first = solve_eq_qp(qp)
    if not qp.has_boxes or first.status == INFEASIBLE:
        first.multipliers_box = np.zeros(qp.S.shape[0])
        if qp.has_boxes:
            first.kkt_residual = kkt_residual(qp, first.z, first.multipliers_eq, first.multipliers_box)
        return first
    G, h, src, sign = _box_rows(qp)
    tol_h = _tol_rows(h)
    if first.status == OPTIMAL and np.all(G @ first.z <= h + tol_h):
        first.kkt_residual = kkt_residual(qp, first.z, first.multipliers_eq, first.multipliers_box)
        return first

    z = _phase_one(qp, G, h)
    if z is None:
        return QpSolution(
            z=first.z, multipliers_eq=first.multipliers_eq, multipliers_box=np.zeros(qp.S.shape[0]),
            active_set=(), objective=first.objective, kkt_residual=np.inf, status=INFEASIBLE,
            infeasibility=float(np.max(G @ first.z - h)),
        )
    hmax = float(np.abs(qp.H).max(initial=0.0))
    # start from the bounds the LP point sits on, keeping rows independent
    working: list[int] = []
    rank = np.linalg.matrix_rank(qp.Aeq) if qp.Aeq.shape[0] else 0
    for j in np.flatnonzero(h - G @ z <= 1e-6 * (1.0 + np.abs(h))):
        r = np.linalg.matrix_rank(np.vstack([qp.Aeq, G[working + [j]]]))
        if r > rank:
            working.append(int(j))
            rank = r
    M = np.vstack([qp.Aeq, G[working]])
    rhs = np.concatenate([qp.beq, h[working]])
    z = z + np.linalg.lstsq(M, rhs - M @ z, rcond=None)[0]

    status = MAX_ITER
    obj = qp.objective(z)
    it = 0
    for it in range(1, max_iter + 1):
        M = np.vstack([qp.Aeq, G[working]])
        _, Z, _ = _null_space(M, d)
        g = qp.H @ z + qp.f
        unbounded_dir = False
        if Z.shape[1] == 0:
            p = np.zeros(d)
        else:
            Hr = Z.T @ qp.H @ Z
            gr = Z.T @ g
            mu, W = _psd_eigh(0.5 * (Hr + Hr.T), hmax)
            pos = mu > PINV_RTOL * max(hmax, mu[-1])
            g_flat = W[:, ~pos].T @ gr
            if np.abs(g_flat).max(initial=0.0) > 1e-9 * (1.0 + np.abs(g).max()):
                p = -Z @ (W[:, ~pos] @ g_flat)
                unbounded_dir = True
            else:
                p = -Z @ (W[:, pos] @ ((W[:, pos].T @ gr) / mu[pos]))

        if not unbounded_dir and np.abs(p).max(initial=0.0) <= 1e-12 * (1.0 + np.abs(z).max()):
            mult = np.linalg.lstsq(M.T, -g, rcond=None)[0] if M.shape[0] else np.zeros(0)
            mu_w = mult[qp.Aeq.shape[0]:]
            scale = 1.0 + np.abs(g).max()
            if mu_w.size == 0 or mu_w.min() >= -1e-10 * scale:
                status = OPTIMAL
                break
            working.pop(int(np.argmin(mu_w)))
            continue

        Gp = G @ p
        step, block = (np.inf if unbounded_dir else 1.0), None
        pnorm = np.linalg.norm(p)
        for j in range(G.shape[0]):
            if j in working or Gp[j] <= 1e-12 * np.linalg.norm(G[j]) * pnorm:
                continue
            s = max(0.0, (h[j] - G[j] @ z) / Gp[j])
            if s < step:
                step, block = s, j
        if not np.isfinite(step):
            status = UNBOUNDED
            break
        z = z + step * p
        if block is not None:
            working.append(block)
        if debug:
            new_obj = qp.objective(z)
            assert new_obj <= obj + 1e-9 * (1.0 + abs(obj)), "active-set objective increased"
            obj = new_obj

    if status == OPTIMAL:
        # minimum-norm representative on the optimal face
        M = np.vstack([qp.Aeq, G[working]])
        rhs = np.concatenate([qp.beq, h[working]])
        z_mn, st, _ = EqualityQpSolver(qp.H, M).minimizer(qp.f, rhs)
        if (st == OPTIMAL and np.all(G @ z_mn <= h + tol_h)
                and qp.objective(z_mn) <= qp.objective(z) + 1e-10 * (1.0 + abs(qp.objective(z)))):
            z = z_mn

    M = np.vstack([qp.Aeq, G[working]])
    g = qp.H @ z + qp.f
    mult = np.linalg.lstsq(M.T, -g, rcond=None)[0] if M.shape[0] else np.zeros(0)
    lam = mult[:qp.Aeq.shape[0]]
    nu = np.zeros(qp.S.shape[0])
    for j, m in zip(working, mult[qp.Aeq.shape[0]:]):
        nu[src[j]] += sign[j] * m
    active = tuple(sorted({int(src[j]) for j in working}))
    return QpSolution(
        z=z, multipliers_eq=lam, multipliers_box=nu, active_set=active,
        objective=qp.objective(z), kkt_residual=kkt_residual(qp, z, lam, nu),
        status=status, iterations=it,
        infeasibility=float(max(0.0, np.max(G @ z - h))),
    )


def solve_qp(qp: DenseQp, **kwargs) -> QpSolution:
    if qp.has_boxes:
        return solve_qp_active_set(qp, **kwargs)
    return solve_eq_qp(qp)
