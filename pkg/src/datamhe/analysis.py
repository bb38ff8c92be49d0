"""Robust global exponential stability constants, bound evaluation and
empirical verification, error metrics and a Kalman-filter baseline."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .estimator import Estimate, MheConfig
from .lti import CapabilityError, EuossConstants, LtiSystem, Trajectory, check_detectability

DEFAULT_LAMBDA = 0.9
# roundoff allowance when the bound itself is (near) zero
VERIFY_ATOL = 1e-8


class CertificateWarning(UserWarning):
    """The configuration does not meet the sufficient stability conditions."""


def min_horizon(euoss: EuossConstants, p1: float, p2: float, lam: float) -> int:
    """Smallest horizon for which the prior contribution contracts by ``lam``."""
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    ratio = lam / (euoss.c_beta * 2.0 * math.sqrt(2.0 * p2 / p1))
    return int(math.ceil(math.log(ratio) / math.log(euoss.lambda_beta) + 1.0))


def max_rho(euoss: EuossConstants, p2: float, r1: float, lam: float) -> float:
    """Largest rho with 2 c_gamma_d sqrt(2 rho p2 / r1) <= lam."""
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    return lam**2 * r1 / (8.0 * euoss.c_gamma_d**2 * p2)


@dataclass(frozen=True)
class RgesConstants:
    euoss: EuossConstants
    lam: float
    p1: float
    p2: float
    r1: float
    r2: float
    L: int
    rho: float
    T_min: int
    rho_max: float
    c_gamma_e: float
    c3: float
    c1: float
    c2: float
    lambda1: float
    lambda2: float

    @property
    def horizon_ok(self) -> bool:
        return self.L >= self.T_min

    @property
    def rho_ok(self) -> bool:
        return self.rho <= self.rho_max

    @property
    def certificate_valid(self) -> bool:
        return self.horizon_ok and self.rho_ok


def noise_gain(euoss: EuossConstants, L: int, rho: float, p1: float, r1: float, r2: float) -> float:
    return max(
        2.0 * euoss.c_beta * math.sqrt(2.0 * L * r2 / (rho * p1)),
        2.0 * euoss.c_gamma_d * math.sqrt(2.0 * L * r2 / r1),
    )


def compute_rges_constants(euoss: EuossConstants, config: MheConfig, lam: float = DEFAULT_LAMBDA) -> RgesConstants:
    """Gains and rates of the error bound for horizon ``config.L``.

    The constants are reported even when L < T_min or rho > rho_max; the
    ``certificate_valid`` flag says whether they are guaranteed.
    """
    L = config.L
    if L < 2:
        raise ValueError(f"horizon L={L} is degenerate, the rate exponent needs L >= 2")
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    p1, p2, r1, r2 = config.p1, config.p2, config.r1, config.r2
    rho = float(config.rho)
    c_gamma_e = noise_gain(euoss, L, rho, p1, r1, r2)
    c3 = 2.0 * euoss.c_beta * math.sqrt(2.0 * p2 / p1)
    c1 = c3 / lam ** ((L - 2) / (2.0 * (L - 1)))
    c2 = c_gamma_e / lam
    rate = lam ** (1.0 / (2.0 * (L - 1)))
    out = RgesConstants(
        euoss=euoss, lam=lam, p1=p1, p2=p2, r1=r1, r2=r2, L=L, rho=rho,
        T_min=min_horizon(euoss, p1, p2, lam), rho_max=max_rho(euoss, p2, r1, lam),
        c_gamma_e=c_gamma_e, c3=c3, c1=c1, c2=c2, lambda1=rate, lambda2=rate,
    )
    if not out.horizon_ok:
        warnings.warn(f"L={L} is below the minimal horizon T_min={out.T_min}", CertificateWarning, stacklevel=2)
    if not out.rho_ok:
        warnings.warn(f"rho={rho:g} exceeds rho_max={out.rho_max:.6g}", CertificateWarning, stacklevel=2)
    return out


def rges_bound(constants: RgesConstants, e0_norm: float, noise, t: int) -> float:
    """max(c1 |e0| l1^t, max over tau <= t of c2 |v(t - tau)| l2^tau)."""
    v = np.asarray(noise, dtype=float).reshape(-1)
    if t < 0 or v.size < t + 1:
        raise ValueError(f"noise must cover 0..{t}, got {v.size} samples")
    tau = np.arange(t + 1)
    disc = constants.c2 * v[t - tau] * constants.lambda2 ** tau
    return float(max(constants.c1 * e0_norm * constants.lambda1 ** t, disc.max()))


def rges_envelope(constants: RgesConstants, e0_norm: float, noise) -> np.ndarray:
    """rges_bound for every t at once via the recursion D(t) = max(c2 |v(t)|, l2 D(t-1))."""
    v = np.asarray(noise, dtype=float).reshape(-1)
    out = np.empty(v.size)
    disc = 0.0
    for t, vt in enumerate(v):
        disc = max(constants.c2 * vt, constants.lambda2 * disc)
        out[t] = max(constants.c1 * e0_norm * constants.lambda1 ** t, disc)
    return out


@dataclass
class RunRecord:
    trajectory: Trajectory
    estimates: list[Estimate]
    x_hat_0: np.ndarray
    config: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def x_hat(self) -> np.ndarray:
        return np.array([e.x_hat for e in self.estimates])

    @property
    def errors(self) -> np.ndarray:
        return self.x_hat - self.trajectory.states[: len(self.estimates)]

    @property
    def error_norms(self) -> np.ndarray:
        return np.linalg.norm(self.errors, axis=1)

    @property
    def noise_magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.trajectory.noise[: len(self.estimates)], axis=1)

    @property
    def e0_norm(self) -> float:
        return float(np.linalg.norm(self.trajectory.states[0] - self.x_hat_0))


@dataclass(frozen=True)
class RgesReport:
    holds: bool
    bound: np.ndarray
    error: np.ndarray
    first_violation: int | None
    guaranteed: bool

    @property
    def margin(self) -> np.ndarray:
        return self.bound - self.error

    @property
    def min_ratio(self) -> float:
        """Smallest bound / |e(t)|; infinite when the error is identically zero."""
        nz = self.error > 0
        return float(np.min(self.bound[nz] / self.error[nz])) if nz.any() else math.inf


def verify_errors(error_norms, noise_magnitudes, e0_norm: float, constants: RgesConstants,
                  atol: float = VERIFY_ATOL) -> RgesReport:
    err = np.asarray(error_norms, dtype=float)
    bound = rges_envelope(constants, e0_norm, noise_magnitudes)
    bad = np.flatnonzero(err > bound + atol)
    return RgesReport(
        holds=bad.size == 0, bound=bound, error=err,
        first_violation=int(bad[0]) if bad.size else None,
        guaranteed=constants.certificate_valid,
    )


def verify_rges(run: RunRecord, constants: RgesConstants, atol: float = VERIFY_ATOL) -> RgesReport:
    """Check |e(t)| <= bound(t) + atol at every step of a run."""
    return verify_errors(run.error_norms, run.noise_magnitudes, run.e0_norm, constants, atol)


@dataclass(frozen=True)
class ErrorMetrics:
    rmse: np.ndarray
    max_error: float
    variance: np.ndarray


def error_metrics(errors, L: int) -> ErrorMetrics:
    """RMSE per state over the run, largest error norm, and the sample
    variance of each error component over t >= 2L (the transient excluded)."""
    e = np.asarray(errors, dtype=float)
    if e.ndim == 1:
        e = e[:, None]
    if e.shape[0] - 2 * L < 2:
        raise ValueError(f"run of length {e.shape[0]} leaves fewer than 2 samples after t >= 2L={2 * L}")
    return ErrorMetrics(
        rmse=np.sqrt(np.mean(e**2, axis=0)),
        max_error=float(np.max(np.linalg.norm(e, axis=1))),
        variance=np.var(e[2 * L:], axis=0, ddof=1),
    )


def kalman_baseline(sys: LtiSystem, inputs, outputs, noise_variance: float, x_hat_0,
                    process_variance: float = 1e-4) -> np.ndarray:
    """Steady-state Kalman filter estimates x_hat(t|t) using the true model.

    The plant has no process noise; ``process_variance`` is a small
    regularization that keeps the filter gain away from zero.
    """
    if not check_detectability(sys):
        raise CapabilityError("(A, C) is not detectable")
    n, p = sys.n, sys.p
    Rv = max(noise_variance, 1e-12) * np.eye(p)
    Pm = scipy.linalg.solve_discrete_are(sys.A.T, sys.C.T, process_variance * np.eye(n), Rv)
    K = Pm @ sys.C.T @ np.linalg.inv(sys.C @ Pm @ sys.C.T + Rv)
    u = np.asarray(inputs, dtype=float).reshape(len(inputs), -1)
    y = np.asarray(outputs, dtype=float).reshape(len(outputs), -1)
    x_pred = np.asarray(x_hat_0, dtype=float).reshape(n)
    out = np.empty((len(u), n))
    for t in range(len(u)):
        x_filt = x_pred + K @ (y[t] - sys.C @ x_pred - sys.D @ u[t])
        out[t] = x_filt
        x_pred = sys.A @ x_filt + sys.B @ u[t]
    return out
