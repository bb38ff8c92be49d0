"""Linear time-invariant discrete-time systems.

Simulation, structural checks (controllability, detectability) and a
constructive route to incremental output-to-state stability constants via a
Luenberger observer and a discrete Lyapunov equation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.signal

RANK_RTOL = 1e-12
LAMBDA_BETA_FLOOR = 1e-6


class ShapeError(ValueError):
    """Array dimensions are inconsistent with the system."""


class CapabilityError(ValueError):
    """The system lacks a structural property an operation needs."""


class NumericalError(RuntimeError):
    pass


def numerical_rank(M: np.ndarray) -> int:
    """Rank of ``M`` counting singular values above ``smax * max(shape) * 1e-12``."""
    M = np.atleast_2d(M)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    tol = s[0] * max(M.shape) * RANK_RTOL
    return int(np.sum(s > tol))


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.array(M, dtype=float)
    if M.ndim == 1:
        M = M.reshape(1, -1)
    if M.ndim != 2:
        raise ShapeError(f"{name} must be a matrix, got ndim={M.ndim}")
    return M


@dataclass(frozen=True)
class LtiSystem:
    """x(t+1) = A x(t) + B u(t),  y(t) = C x(t) + D u(t)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray = None

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ShapeError(f"A must be square, got {A.shape}")
        B = np.array(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(n, -1)
        C = _as_matrix(self.C, "C")
        if B.ndim != 2 or B.shape[0] != n:
            raise ShapeError(f"B must have {n} rows, got {B.shape}")
        if C.shape[1] != n:
            raise ShapeError(f"C must have {n} columns, got {C.shape}")
        m, p = B.shape[1], C.shape[0]
        D = np.zeros((p, m)) if self.D is None else _as_matrix(self.D, "D")
        if D.shape != (p, m):
            raise ShapeError(f"D must be {(p, m)}, got {D.shape}")
        if min(n, m, p) < 1:
            raise ShapeError("n, m, p must all be >= 1")
        for name, M in zip("ABCD", (A, B, C, D)):
            if not np.all(np.isfinite(M)):
                raise ValueError(f"{name} has non-finite entries")
            M.setflags(write=False)
            object.__setattr__(self, name, M)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def transformed(self, T: np.ndarray) -> "LtiSystem":
        """Similarity transform with state z = T x."""
        Ti = np.linalg.inv(T)
        return LtiSystem(T @ self.A @ Ti, T @ self.B, self.C @ Ti, self.D)


def paper_example_system() -> LtiSystem:
    """Two-state oscillator with a scalar input and first-state measurement."""
    return LtiSystem(
        A=[[0.9950, 0.0998], [-0.0998, 0.9950]],
        B=[[0.1], [0.1]],
        C=[[1.0, 0.0]],
        D=[[0.0]],
    )


@dataclass(frozen=True)
class Trajectory:
    inputs: np.ndarray
    states: np.ndarray
    outputs_clean: np.ndarray
    outputs_noisy: np.ndarray
    noise: np.ndarray

    @property
    def length(self) -> int:
        return self.inputs.shape[0]


def _as_sequence(seq, dim: int, name: str) -> np.ndarray:
    arr = np.array(seq, dtype=float)
    if arr.ndim == 1 and dim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ShapeError(f"{name} must be a sequence of {dim}-vectors, got shape {arr.shape}")
    return arr


def simulate(sys: LtiSystem, x0, inputs, noise=None) -> Trajectory:
    """Simulate ``sys`` from ``x0``; ``noise`` is added to the outputs.

    ``states`` holds x(0..T-1), one per input sample.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (sys.n,):
        raise ShapeError(f"x0 must have length {sys.n}, got {x0.shape[0]}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    u = _as_sequence(inputs, sys.m, "inputs")
    T = u.shape[0]
    if T < 1:
        raise ShapeError("inputs must have at least one sample")
    if noise is None:
        v = np.zeros((T, sys.p))
    else:
        v = _as_sequence(noise, sys.p, "noise")
        if v.shape[0] != T:
            raise ShapeError(f"noise has length {v.shape[0]}, inputs have length {T}")

    x = np.empty((T, sys.n))
    x[0] = x0
    for k in range(T - 1):
        x[k + 1] = sys.A @ x[k] + sys.B @ u[k]
    y = x @ sys.C.T + u @ sys.D.T
    return Trajectory(inputs=u, states=x, outputs_clean=y, outputs_noisy=y + v, noise=v)


def controllability_matrix(sys: LtiSystem) -> np.ndarray:
    blocks = [sys.B]
    for _ in range(sys.n - 1):
        blocks.append(sys.A @ blocks[-1])
    return np.hstack(blocks)


def check_controllability(sys: LtiSystem) -> bool:
    return numerical_rank(controllability_matrix(sys)) == sys.n


def check_detectability(sys: LtiSystem) -> bool:
    """PBH test on every eigenvalue with modulus >= 1."""
    n = sys.n
    for lam in np.linalg.eigvals(sys.A):
        if abs(lam) < 1.0:
            continue
        M = np.vstack([sys.A - lam * np.eye(n), sys.C.astype(complex)])
        if numerical_rank(M) < n:
            return False
    return True


@dataclass(frozen=True)
class ObserverDesign:
    gain: np.ndarray
    lyapunov_Q: np.ndarray
    closed_loop_radius: float
    method: str = "given"


def _spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def _placement_gain(sys: LtiSystem, poles: np.ndarray) -> np.ndarray | None:
    try:
        res = scipy.signal.place_poles(sys.A.T, sys.C.T, poles)
    except (ValueError, np.linalg.LinAlgError):
        return None
    K = res.gain_matrix.T
    if not np.all(np.isfinite(K)) or _spectral_radius(sys.A - K @ sys.C) >= 1.0:
        return None
    # badly conditioned eigenvector assignment shows up as large gains
    if np.linalg.norm(K, 2) > 1e8 * max(1.0, np.linalg.norm(sys.A, 2)):
        return None
    return K


def _dare_gain(sys: LtiSystem) -> np.ndarray:
    n, p = sys.n, sys.p
    X = scipy.linalg.solve_discrete_are(sys.A.T, sys.C.T, np.eye(n), np.eye(p))
    return sys.A @ X @ sys.C.T @ np.linalg.inv(sys.C @ X @ sys.C.T + np.eye(p))


def design_observer(sys: LtiSystem, gain=None) -> ObserverDesign:
    """Stabilizing observer gain K and Lyapunov matrix Q of A - K C.

    Without an explicit ``gain`` the observer poles are placed at half the
    eigenvalues of A (after clipping them into the unit disk); when that
    fails, all poles go to 0.5, and as a last resort the gain comes from the
    filter Riccati equation with identity weights.
    """
    if not check_detectability(sys):
        raise CapabilityError("(A, C) is not detectable")
    method = "given"
    if gain is not None:
        K = np.array(gain, dtype=float).reshape(sys.n, sys.p)
    else:
        eig = np.linalg.eigvals(sys.A)
        mod = np.abs(eig)
        clipped = np.where(mod > 1.0, eig / np.where(mod > 0, mod, 1.0), eig)
        K = _placement_gain(sys, 0.5 * clipped)
        method = "placement"
        if K is None:
            K = _placement_gain(sys, np.full(sys.n, 0.5))
            method = "placement-0.5"
        if K is None:
            K = _dare_gain(sys)
            method = "riccati"

    Acl = sys.A - K @ sys.C
    radius = _spectral_radius(Acl)
    if radius >= 1.0:
        raise CapabilityError(f"observer gain is not stabilizing (spectral radius {radius:.6g})")
    Q = scipy.linalg.solve_discrete_lyapunov(Acl.T, np.eye(sys.n))
    Q = 0.5 * (Q + Q.T)
    resid = np.linalg.norm(Acl.T @ Q @ Acl - Q + np.eye(sys.n))
    if not np.all(np.isfinite(Q)) or resid > 1e-9 * max(1.0, np.linalg.norm(Q)):
        raise NumericalError(f"Lyapunov solve inaccurate (residual {resid:.3g})")
    return ObserverDesign(gain=K, lyapunov_Q=Q, closed_loop_radius=radius, method=method)


@dataclass(frozen=True)
class EuossConstants:
    c_beta: float
    lambda_beta: float
    c_gamma_d: float

    def __post_init__(self):
        if not self.c_beta >= 1.0:
            raise ValueError(f"c_beta must be >= 1, got {self.c_beta}")
        if not 0.0 < self.lambda_beta < 1.0:
            raise ValueError(f"lambda_beta must lie in (0, 1), got {self.lambda_beta}")
        if not self.c_gamma_d > 0.0:
            raise ValueError(f"c_gamma_d must be positive, got {self.c_gamma_d}")


def compute_euoss_constants(sys: LtiSystem, gain=None) -> EuossConstants:
    """Constants (c_beta, lambda_beta, c_gamma_d) from an observer design.

    For two trajectories driven by the same input the state difference obeys
    d+ = (A - K C) d + K dy. Since V(d) = d'Qd drops by |d|^2 per step,
    ||(A - K C)^k|| <= s * lambda_beta^k with s = sqrt(qmax / qmin) and
    lambda_beta = sqrt(1 - 1/qmax). Summing the driven part geometrically
    bounds |d(k)| by a decay term plus a linear output gain; the factor 2
    turns that sum into the max form.
    """
    obs = design_observer(sys, gain)
    w = np.linalg.eigvalsh(obs.lyapunov_Q)
    qmin, qmax = float(w[0]), float(w[-1])
    s = float(np.sqrt(qmax / qmin))
    lambda_beta = max(LAMBDA_BETA_FLOOR, float(np.sqrt(max(0.0, 1.0 - 1.0 / qmax))))
    gain_norm = float(np.linalg.norm(obs.gain, 2))
    c_beta = max(1.0, 2.0 * s)
    # zero gain only happens for a stable A; keep the gain strictly positive
    c_gamma_d = max(2.0 * s * gain_norm / (1.0 - lambda_beta), np.finfo(float).tiny)
    return EuossConstants(c_beta=c_beta, lambda_beta=lambda_beta, c_gamma_d=c_gamma_d)
