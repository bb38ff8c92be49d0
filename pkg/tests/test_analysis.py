import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datamhe import (
    CertificateWarning,
    EuossConstants,
    LtiSystem,
    MheConfig,
    MheEstimator,
    RunRecord,
    compute_euoss_constants,
    compute_rges_constants,
    error_metrics,
    kalman_baseline,
    max_rho,
    min_horizon,
    rges_bound,
    rges_envelope,
    run_estimator,
    simulate,
    verify_rges,
)
from datamhe.analysis import verify_errors
from datamhe.lti import CapabilityError

from conftest import paper_config


def cfg(L=5, rho=0.1, p=1.0, r=1.0, n=2):
    return MheConfig(L=L, rho=rho, P=p * np.eye(n), R=r * np.eye(1), x_hat_0=np.zeros(n))


def quiet(euoss, config, lam=0.9):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CertificateWarning)
        return compute_rges_constants(euoss, config, lam)


def test_min_horizon_examples():
    assert min_horizon(EuossConstants(1.0, 0.5, 1.0), 1.0, 1.0, 0.9) == 3
    assert min_horizon(EuossConstants(1.0, 0.9, 1.0), 1.0, 4.0, 0.5) == 25


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 50.0), st.floats(0.01, 0.99), st.floats(0.05, 0.9), st.floats(0.0, 0.09))
def test_min_horizon_monotone_in_lambda(c_beta, lam_b, lam, dl):
    e = EuossConstants(c_beta, lam_b, 1.0)
    assert min_horizon(e, 1.0, 2.0, lam + dl) <= min_horizon(e, 1.0, 2.0, lam)


def test_max_rho_example_and_inverse():
    e = EuossConstants(1.0, 0.5, 1.0)
    rho = max_rho(e, 1.0, 1.0, 0.9)
    assert abs(rho - 0.10125) <= 1e-12
    e2 = EuossConstants(3.0, 0.7, 12.5)
    r = max_rho(e2, 2.5, 0.3, 0.8)
    assert abs(2 * e2.c_gamma_d * math.sqrt(2 * r * 2.5 / 0.3) - 0.8) <= 1e-12


def test_rges_constants_example():
    c = quiet(EuossConstants(1.0, 0.5, 1.0), cfg())
    assert abs(c.c_gamma_e - 20.0) <= 1e-12
    assert abs(c.c3 - 2 * math.sqrt(2)) <= 1e-12
    assert abs(c.c2 - 20.0 / 0.9) <= 1e-12
    assert abs(c.lambda1 - 0.9 ** (1 / 8)) <= 1e-12 and c.lambda1 == c.lambda2
    assert abs(c.c1 - 2 * math.sqrt(2) / 0.9 ** (3 / 8)) <= 1e-12
    assert c.T_min == 3 and c.horizon_ok and c.rho_ok and c.certificate_valid


def test_rges_constants_errors_and_warnings():
    with pytest.raises(ValueError, match="degenerate"):
        quiet(EuossConstants(1.0, 0.5, 1.0), cfg(L=1))
    with pytest.raises(ValueError):
        quiet(EuossConstants(1.0, 0.5, 1.0), cfg(), lam=1.0)
    with pytest.warns(CertificateWarning, match="rho"):
        compute_rges_constants(EuossConstants(1.0, 0.5, 1.0), cfg(rho=1.0))
    with pytest.warns(CertificateWarning, match="T_min"):
        compute_rges_constants(EuossConstants(1.0, 0.5, 1.0), cfg(L=2))


def test_paper_preset_not_certified(paper_sys):
    c = quiet(compute_euoss_constants(paper_sys), paper_config())
    assert not c.horizon_ok and not c.rho_ok and not c.certificate_valid
    assert c.T_min == 140 and c.rho_max == pytest.approx(1.0563e-7, rel=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 20.0), st.floats(0.05, 0.99), st.floats(0.1, 100.0), st.integers(2, 60),
       st.floats(1e-4, 10.0), st.floats(0.5, 10.0), st.floats(1.0, 4.0), st.floats(0.5, 10.0),
       st.floats(1.0, 4.0), st.floats(0.05, 0.95))
def test_constants_against_recomputation(cb, lb, cg, L, rho, p1, pk, r1, rk, lam):
    p2, r2 = p1 * pk, r1 * rk
    config = MheConfig(L=L, rho=rho, P=np.diag([p1, p2]), R=np.diag([r1, r2]), x_hat_0=np.zeros(2))
    c = quiet(EuossConstants(cb, lb, cg), config, lam)
    # straight transcription of the closed forms, evaluated in a different order
    T = math.ceil(math.log(lam / (2 * cb * (2 * p2 / p1) ** 0.5)) / math.log(lb) + 1)
    cge = max(2 * cb * (2 * L * r2 / (rho * p1)) ** 0.5, 2 * cg * (2 * L * r2 / r1) ** 0.5)
    c3 = 2 * cb * (2 * p2 / p1) ** 0.5
    rel = lambda a, b: abs(a - b) <= 1e-12 * max(1.0, abs(b))
    assert c.T_min == T
    assert rel(c.rho_max, lam * lam * r1 / (8 * cg * cg * p2))
    assert rel(c.c_gamma_e, cge) and rel(c.c3, c3)
    assert rel(c.c1, c3 * lam ** (-(L - 2) / (2 * (L - 1))))
    assert rel(c.c2, cge / lam)
    assert rel(c.lambda1, math.exp(math.log(lam) / (2 * (L - 1))))
    assert 0 < c.lambda1 == c.lambda2 < 1 and c.c1 >= c.c3 and c.c1 >= 1 and c.c2 >= 1


def test_noise_gain_increases_with_horizon(paper_sys):
    e = compute_euoss_constants(paper_sys)
    gains = [quiet(e, cfg(L=L)).c_gamma_e for L in range(140, 151)]
    assert all(b > a for a, b in zip(gains, gains[1:]))


@pytest.fixture
def consts():
    return quiet(EuossConstants(1.0, 0.5, 1.0), cfg())


def test_bound_special_cases(consts):
    v = np.zeros(10)
    for t in range(10):
        assert rges_bound(consts, 2.0, v, t) == pytest.approx(consts.c1 * 2.0 * consts.lambda1**t)
    assert rges_bound(consts, 2.0, [3.0], 0) == pytest.approx(max(consts.c1 * 2.0, consts.c2 * 3.0))
    w = np.full(400, 0.7)
    assert rges_bound(consts, 2.0, w, 399) == pytest.approx(consts.c2 * 0.7)
    with pytest.raises(ValueError):
        rges_bound(consts, 1.0, [1.0, 2.0], 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=40), st.floats(0, 100))
def test_envelope_equals_direct_formula(v, e0):
    c = quiet(EuossConstants(2.0, 0.6, 3.0), cfg())
    env = rges_envelope(c, e0, v)
    direct = [rges_bound(c, e0, v, t) for t in range(len(v))]
    assert np.allclose(env, direct, rtol=1e-12, atol=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=20), st.floats(0, 10), st.floats(0, 5), st.data())
def test_bound_monotone(v, e0, bump, data):
    c = quiet(EuossConstants(2.0, 0.6, 3.0), cfg())
    k = data.draw(st.integers(0, len(v) - 1))
    w = list(v)
    w[k] += bump
    t = len(v) - 1
    assert rges_bound(c, e0, w, t) >= rges_bound(c, e0, v, t)
    assert rges_bound(c, e0 + bump, v, t) >= rges_bound(c, e0, v, t)


def test_verify_zero_error_infinite_margin(consts):
    rep = verify_errors(np.zeros(10), np.zeros(10), 0.0, consts)
    assert rep.holds and rep.first_violation is None and rep.min_ratio == math.inf


def test_verify_injected_violation(consts):
    err = 0.1 * np.ones(20)
    err[7] = 1e6
    rep = verify_errors(err, np.ones(20), 1.0, consts)
    assert not rep.holds and rep.first_violation == 7
    assert rep.margin[7] < 0 and rep.guaranteed


def test_compliant_zero_noise_run_holds(paper_sys):
    e = compute_euoss_constants(paper_sys)
    c0 = quiet(e, cfg(L=2, rho=1.0))
    L, rho = c0.T_min, c0.rho_max
    from datamhe import collect_dataset, generate_pe_input
    ds = collect_dataset(paper_sys, generate_pe_input(1, 2 * (L + 2) + 19, seed=2))
    config = MheConfig(L=L, rho=rho, P=np.eye(2), R=np.eye(1), x_hat_0=np.array([1.0, 2.0]))
    consts = compute_rges_constants(e, config)
    assert consts.certificate_valid
    rng = np.random.default_rng(0)
    tr = simulate(paper_sys, [7.0, 7.0], rng.uniform(-5, 5, (L + 10, 1)))
    run = RunRecord(tr, run_estimator(MheEstimator(ds, config), tr.inputs, tr.outputs_clean), config.x_hat_0)
    rep = verify_rges(run, consts)
    assert rep.holds and rep.guaranteed


def test_run_record_consistency(paper_sys, paper_data):
    rng = np.random.default_rng(1)
    tr = simulate(paper_sys, [7.0, 7.0], rng.uniform(-5, 5, (15, 1)), rng.standard_normal((15, 1)))
    config = paper_config()
    est = run_estimator(MheEstimator(paper_data, config), tr.inputs, tr.outputs_noisy)
    run = RunRecord(tr, est, config.x_hat_0, seed=1)
    assert run.errors.shape == (15, 2)
    assert np.allclose(run.errors, np.array([e.x_hat for e in est]) - tr.states)
    assert np.allclose(run.noise_magnitudes, np.abs(tr.noise[:, 0]))
    assert run.e0_norm == pytest.approx(math.hypot(6.0, 5.0))


def test_error_metrics_examples():
    m = error_metrics(np.zeros((20, 2)), 5)
    assert not m.rmse.any() and m.max_error == 0 and not m.variance.any()
    e = np.array([[(-1.0) ** t, 0.0] for t in range(20)])
    m = error_metrics(e, 5)
    assert np.allclose(m.rmse, [1.0, 0.0])
    assert m.variance[0] == pytest.approx(np.var(e[10:, 0], ddof=1))
    with pytest.raises(ValueError, match="2L"):
        error_metrics(np.zeros((11, 2)), 5)


def test_kalman_zero_noise_tracks(paper_sys):
    rng = np.random.default_rng(0)
    tr = simulate(paper_sys, [7.0, 7.0], rng.uniform(-5, 5, (200, 1)))
    xk = kalman_baseline(paper_sys, tr.inputs, tr.outputs_clean, 0.0, [1.0, 2.0], process_variance=1.0)
    err = np.abs(xk - tr.states).max(axis=1)
    assert err[0] > 0.1 and err[180:].max() < 1e-6


def test_kalman_full_state_perfect_measurement():
    sys = LtiSystem([[0.9, 0.2], [0.0, 0.7]], [[1.0], [0.5]], np.eye(2))
    rng = np.random.default_rng(2)
    tr = simulate(sys, [3.0, -1.0], rng.uniform(-1, 1, (10, 1)))
    xk = kalman_baseline(sys, tr.inputs, tr.outputs_clean, 1e-14, [0.0, 0.0])
    assert np.allclose(xk, tr.states, atol=1e-6)


def test_kalman_rejects_undetectable():
    sys = LtiSystem(np.diag([2.0, 0.5]), np.ones((2, 1)), [[0.0, 1.0]])
    with pytest.raises(CapabilityError):
        kalman_baseline(sys, np.zeros((5, 1)), np.zeros((5, 1)), 1.0, [0.0, 0.0])


def test_kalman_noisy_rmse_frozen(paper_sys):
    rng = np.random.default_rng(4)
    tr = simulate(paper_sys, [7.0, 7.0], rng.uniform(-5, 5, (60, 1)), 2 * rng.standard_normal((60, 1)))
    xk = kalman_baseline(paper_sys, tr.inputs, tr.outputs_noisy, 4.0, [1.0, 2.0])
    rmse = np.sqrt(np.mean((xk - tr.states) ** 2, axis=0))
    assert np.all(np.isfinite(rmse)) and np.all(rmse > 0)
