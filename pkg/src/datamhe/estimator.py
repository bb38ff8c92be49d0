"""Data-based moving horizon estimation.

The estimator never uses a model. Window states and outputs are linear
combinations ``H alpha`` of offline Hankel columns, with ``alpha`` chosen to
trade a quadratic prior on the first window state against quadratic output
fitting errors, subject to reproducing the measured input window exactly.

The state window and fitting errors are eliminated (both are affine in
``alpha``), so each step solves a QP in ``alpha`` alone.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .hankel import HankelMatrix, OfflineDataset, hankel_rank
from .qp import INFEASIBLE, MAX_ITER, DenseQp, EqualityQpSolver, solve_qp_active_set


class SetupError(ValueError):
    pass


class EstimationError(RuntimeError):
    def __init__(self, message: str, violation: float):
        super().__init__(message)
        self.violation = violation


def _pd_matrix(M, dim: int, name: str) -> np.ndarray:
    M = np.array(M, dtype=float)
    if M.ndim == 0:
        M = float(M) * np.eye(dim)
    if M.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}, got {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M)[0] <= 0:
        raise ValueError(f"{name} must be positive definite")
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class StateBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(-1)
        hi = np.array(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("state box bounds differ in length")
        if np.any(lo > hi):
            raise ValueError("state box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def contains(self, x: np.ndarray, tol: float = 1e-10) -> bool:
        x = np.atleast_2d(x)
        return bool(np.all(x >= self.lower - tol * (1 + np.abs(self.lower)))
                    and np.all(x <= self.upper + tol * (1 + np.abs(self.upper))))


@dataclass(frozen=True)
class MheConfig:
    """Horizon ``L``, prior scaling ``rho``, weights ``P`` (prior) and ``R`` (stage)."""

    L: int
    rho: float
    P: np.ndarray
    R: np.ndarray
    x_hat_0: np.ndarray
    state_box: StateBox | None = None

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 1:
            raise ValueError(f"L must be a positive integer, got {self.L}")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        x0 = np.array(self.x_hat_0, dtype=float).reshape(-1)
        n = x0.size
        P = _pd_matrix(self.P, n, "P")
        R = np.array(self.R, dtype=float)
        if R.ndim == 0:
            if not R > 0:
                raise ValueError("R must be positive definite")
        else:
            R = _pd_matrix(R, R.shape[0], "R")
        object.__setattr__(self, "L", int(self.L))
        object.__setattr__(self, "x_hat_0", x0)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        if self.state_box is not None and self.state_box.lower.size != n:
            raise ValueError(f"state box must have {n} components")

    def stage_weight(self, p: int) -> np.ndarray:
        """R as a p x p matrix (a scalar R means R * I)."""
        if self.R.ndim == 0:
            return _pd_matrix(self.R, p, "R")
        if self.R.shape != (p, p):
            raise ValueError(f"R must be {p}x{p}, got {self.R.shape}")
        return self.R

    @property
    def p1(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[0])

    @property
    def p2(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[-1])

    @property
    def r1(self) -> float:
        return float(np.linalg.eigvalsh(np.atleast_2d(self.R))[0])

    @property
    def r2(self) -> float:
        return float(np.linalg.eigvalsh(np.atleast_2d(self.R))[-1])


@dataclass(frozen=True)
class Estimate:
    t: int
    x_hat: np.ndarray
    window_states: np.ndarray
    sigma_hat: np.ndarray
    alpha_hat: np.ndarray
    cost: float
    qp_status: str
    active_constraints: tuple[int, ...] = ()
    degraded: bool = False
    nonunique: bool = False


@dataclass(frozen=True)
class WindowProblem:
    """A formulated QP together with the data needed to read its solution."""

    qp: DenseQp
    depth: int
    prior: np.ndarray
    y_window: np.ndarray


class MheEstimator:
    """Sequential estimator: startup (full information) for t <= L-1, then
    a moving window of the last L samples with a filtering prior."""

    def __init__(self, dataset: OfflineDataset, config: MheConfig):
        L, n = config.L, dataset.n
        if config.x_hat_0.size != n:
            raise SetupError(f"x_hat_0 has {config.x_hat_0.size} entries, dataset has n={n}")
        order = L + n
        if dataset.N < order or dataset.N - order + 1 < dataset.m * order:
            raise SetupError(
                f"dataset length N={dataset.N} too short for PE of order L+n={order} "
                f"(need N >= {(dataset.m + 1) * order - 1})"
            )
        if dataset.pe_order_certified < order:
            raise SetupError(
                f"input data not persistently exciting of order {order}: "
                f"Hankel rank {hankel_rank(dataset.inputs, order)} < {dataset.m * order}"
            )
        self.dataset = dataset
        self.config = config
        self.R = config.stage_weight(dataset.p)
        self.t = -1
        self.input_buffer: deque = deque(maxlen=L)
        self.output_buffer: deque = deque(maxlen=L)
        self.prior_buffer: list[np.ndarray] = []
        self._views: dict[int, tuple[HankelMatrix, HankelMatrix, HankelMatrix]] = {
            depth: dataset.hankels(depth) for depth in range(1, L + 1)
        }
        self._hessians: dict[int, np.ndarray] = {}
        self._solvers: dict[int, EqualityQpSolver] = {}

    @property
    def L(self) -> int:
        return self.config.L

    def reset(self, x_hat_0=None) -> None:
        """Rewind to t = -1, keeping the per-depth factorizations."""
        if x_hat_0 is not None:
            x_hat_0 = np.asarray(x_hat_0, dtype=float).reshape(self.dataset.n)
            self.config = MheConfig(self.config.L, self.config.rho, self.config.P, self.config.R,
                                    x_hat_0, self.config.state_box)
        self.t = -1
        self.input_buffer.clear()
        self.output_buffer.clear()
        self.prior_buffer = []

    def hankel_views(self, depth: int) -> tuple[HankelMatrix, HankelMatrix, HankelMatrix]:
        return self._views[depth]

    def _hessian(self, depth: int) -> np.ndarray:
        if depth not in self._hessians:
            _, Hy, Hx = self._views[depth]
            Gx0 = Hx.block(0)
            Rbar = np.kron(np.eye(depth), self.R)
            H = 2.0 * (self.config.rho * Gx0.T @ self.config.P @ Gx0 + Hy.data.T @ Rbar @ Hy.data)
            self._hessians[depth] = 0.5 * (H + H.T)
        return self._hessians[depth]

    def _problem(self, depth: int, u_win: np.ndarray, y_win: np.ndarray, prior: np.ndarray) -> WindowProblem:
        Hu, Hy, Hx = self._views[depth]
        Gx0 = Hx.block(0)
        Rbar = np.kron(np.eye(depth), self.R)
        y_flat = y_win.reshape(-1)
        f = -2.0 * (self.config.rho * Gx0.T @ self.config.P @ prior + Hy.data.T @ Rbar @ y_flat)
        box = self.config.state_box
        if box is None:
            qp = DenseQp(self._hessian(depth), f, Hu.data, u_win.reshape(-1))
        else:
            qp = DenseQp(self._hessian(depth), f, Hu.data, u_win.reshape(-1), S=Hx.data,
                         lower=np.tile(box.lower, depth), upper=np.tile(box.upper, depth))
        return WindowProblem(qp=qp, depth=depth, prior=np.array(prior, dtype=float), y_window=y_win)

    def formulate_startup_qp(self, t: int | None = None) -> WindowProblem:
        """Full-information problem at time t <= L-1 with prior x_hat_0."""
        t = self.t if t is None else t
        if not 0 <= t <= self.L - 1 or len(self.output_buffer) != t + 1:
            raise ValueError(f"startup problem needs t in [0, L-1] with t+1 buffered samples, t={t}")
        u_win = np.array(self.input_buffer)
        y_win = np.array(self.output_buffer)
        return self._problem(t + 1, u_win, y_win, self.config.x_hat_0)

    def formulate_window_qp(self, prior: np.ndarray | None = None) -> WindowProblem:
        """Moving-window problem over the last L samples.

        The default prior is the estimate emitted at time t-L+1.
        """
        if len(self.output_buffer) != self.L:
            raise ValueError("window problem needs L buffered samples")
        if prior is None:
            k = self.t - self.L + 1
            if not 0 <= k < len(self.prior_buffer):
                raise AssertionError(f"filtering prior x_hat({k}) not available at t={self.t}")
            prior = self.prior_buffer[k]
        return self._problem(self.L, np.array(self.input_buffer), np.array(self.output_buffer), prior)

    def reconstruct_window(self, alpha, depth: int, y_window=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(states, fitted outputs, fitting errors) for coefficients ``alpha``."""
        _, Hy, Hx = self._views[depth]
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape != (Hx.columns,):
            raise ValueError(f"alpha must have {Hx.columns} entries for depth {depth}, got {alpha.shape}")
        states = (Hx.data @ alpha).reshape(depth, self.dataset.n)
        outputs = (Hy.data @ alpha).reshape(depth, self.dataset.p)
        sigma = None
        if y_window is not None:
            sigma = np.asarray(y_window, dtype=float).reshape(depth, self.dataset.p) - outputs
        return states, outputs, sigma

    def solve(self, problem: WindowProblem) -> Estimate:
        """Solve a formulated problem and read off the estimate at its last sample."""
        depth = problem.depth
        qp = problem.qp
        if qp.has_boxes:
            sol = solve_qp_active_set(qp)
        else:
            if depth not in self._solvers:
                self._solvers[depth] = EqualityQpSolver(qp.H, qp.Aeq)
            sol = self._solvers[depth].solve(qp.f, qp.beq)
        if sol.status == INFEASIBLE:
            raise EstimationError(
                f"estimation QP infeasible at t={self.t} (violation {sol.infeasibility:.3g})",
                sol.infeasibility,
            )
        alpha = sol.z
        states, _, sigma = self.reconstruct_window(alpha, depth, problem.y_window)
        dx = states[0] - problem.prior
        cost = self.config.rho * float(dx @ self.config.P @ dx) + float(
            np.einsum("ki,ij,kj->", sigma, self.R, sigma))
        nonunique = False
        flat = sol.null_directions
        if flat is not None and flat.size:
            Hx = self._views[depth][2].data
            nonunique = bool(np.abs(Hx @ flat).max() > 1e-10 * max(1.0, np.abs(Hx).max()))
        return Estimate(
            t=self.t, x_hat=states[-1].copy(), window_states=states, sigma_hat=sigma,
            alpha_hat=alpha, cost=cost, qp_status=sol.status,
            active_constraints=sol.active_set, degraded=sol.status == MAX_ITER,
            nonunique=nonunique,
        )

    def step(self, u_t, y_tilde_t, t: int | None = None) -> Estimate:
        """Advance the clock by one sample and return x_hat(t)."""
        if t is not None and t != self.t + 1:
            raise ValueError(f"expected t={self.t + 1}, got {t}")
        u_t = np.asarray(u_t, dtype=float).reshape(self.dataset.m)
        y_t = np.asarray(y_tilde_t, dtype=float).reshape(self.dataset.p)
        self.t += 1
        self.input_buffer.append(u_t)
        self.output_buffer.append(y_t)
        if self.t <= self.L - 1:
            problem = self.formulate_startup_qp()
        else:
            problem = self.formulate_window_qp()
        est = self.solve(problem)
        self.prior_buffer.append(est.x_hat)
        return est


def new_estimator(dataset: OfflineDataset, config: MheConfig) -> MheEstimator:
    return MheEstimator(dataset, config)


def run_estimator(est: MheEstimator, inputs, outputs) -> list[Estimate]:
    inputs = np.asarray(inputs, dtype=float).reshape(len(inputs), -1)
    outputs = np.asarray(outputs, dtype=float).reshape(len(outputs), -1)
    return [est.step(u, y) for u, y in zip(inputs, outputs)]
