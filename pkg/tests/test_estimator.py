import numpy as np
import pytest

from datamhe import (
    EstimationError,
    MheConfig,
    MheEstimator,
    SetupError,
    StateBox,
    collect_dataset,
    compute_euoss_constants,
    compute_rges_constants,
    generate_pe_input,
    make_dataset,
    run_estimator,
    simulate,
)
from datamhe.qp import OPTIMAL

from conftest import dataset_for, paper_config, random_system


@pytest.fixture(scope="module")
def online(paper_sys):
    rng = np.random.default_rng(0)
    return simulate(paper_sys, [7.0, 7.0], rng.uniform(-5, 5, (60, 1)))


def errors(estimates, traj):
    return np.linalg.norm(np.array([e.x_hat for e in estimates]) - traj.states[: len(estimates)], axis=1)


def test_setup_shapes(paper_data):
    est = MheEstimator(paper_data, paper_config())
    Hu, Hy, Hx = est.hankel_views(5)
    assert Hu.data.shape == (5, 26) and Hx.data.shape == (10, 26)
    assert est.t == -1


def test_setup_rejects_zero_inputs(paper_sys):
    ds = collect_dataset(paper_sys, np.zeros((30, 1)), x0=[1.0, 0.0])
    with pytest.raises(SetupError, match="rank 0"):
        MheEstimator(ds, paper_config())


def test_setup_rejects_short_data(paper_sys):
    ds = collect_dataset(paper_sys, generate_pe_input(1, 6, seed=0))
    with pytest.raises(SetupError, match="too short"):
        MheEstimator(ds, paper_config())


def test_config_validation():
    with pytest.raises(ValueError):
        MheConfig(L=0, rho=1.0, P=np.eye(2), R=np.eye(1), x_hat_0=np.zeros(2))
    with pytest.raises(ValueError):
        MheConfig(L=3, rho=-1.0, P=np.eye(2), R=np.eye(1), x_hat_0=np.zeros(2))
    with pytest.raises(ValueError):
        MheConfig(L=3, rho=1.0, P=np.diag([1.0, 0.0]), R=np.eye(1), x_hat_0=np.zeros(2))
    with pytest.raises(ValueError):
        MheConfig(L=3, rho=1.0, P=np.eye(2), R=-np.eye(1), x_hat_0=np.zeros(2))


def test_startup_and_window_problem_shapes(paper_data, online):
    est = MheEstimator(paper_data, paper_config(state_box=StateBox([-50, -50], [50, 50])))
    est.step(online.inputs[0], online.outputs_clean[0])
    prob = est.formulate_startup_qp()
    assert prob.qp.dim == 30 and prob.qp.Aeq.shape == (1, 30) and prob.depth == 1
    for t in range(1, 6):
        est.step(online.inputs[t], online.outputs_clean[t])
    prob = est.formulate_window_qp()
    assert prob.qp.dim == 26 and prob.qp.Aeq.shape == (5, 26) and prob.qp.S.shape == (10, 26)


def test_hessian_gram_form(paper_data, online):
    est = MheEstimator(paper_data, paper_config())
    est.step(online.inputs[0], online.outputs_clean[0])
    H = est.formulate_startup_qp().qp.H
    assert np.allclose(H, H.T)
    assert np.linalg.eigvalsh(H)[0] >= -1e-9 * np.abs(H).max()


def test_exact_prior_zero_noise(paper_data, online):
    est = MheEstimator(paper_data, paper_config(x_hat_0=(7.0, 7.0)))
    out = run_estimator(est, online.inputs, online.outputs_clean)
    assert np.all(np.array([e.cost for e in out]) <= 1e-16)
    assert errors(out, online).max() <= 1e-8
    assert np.array_equal(out[0].x_hat.round(10), [7.0, 7.0])


def test_exactness_random_systems():
    rng = np.random.default_rng(21)
    for _ in range(5):
        sys = random_system(rng)
        L = 4
        ds = dataset_for(sys, L, rng)
        x0 = rng.standard_normal(sys.n)
        tr = simulate(sys, x0, rng.uniform(-1, 1, (30, sys.m)))
        cfg = MheConfig(L=L, rho=1.0, P=np.eye(sys.n), R=np.eye(sys.p), x_hat_0=x0)
        out = run_estimator(MheEstimator(ds, cfg), tr.inputs, tr.outputs_clean)
        assert errors(out, tr).max() <= 1e-8


def test_estimate_consistency(paper_data, paper_sys):
    rng = np.random.default_rng(3)
    tr = simulate(paper_sys, [7.0, 7.0], rng.uniform(-5, 5, (20, 1)), 2 * rng.standard_normal((20, 1)))
    est = MheEstimator(paper_data, paper_config())
    for t in range(20):
        e = est.step(tr.inputs[t], tr.outputs_noisy[t], t=t)
        depth = min(t + 1, 5)
        _, Hy, Hx = est.hankel_views(depth)
        assert e.window_states.shape == (depth, 2)
        assert np.allclose(e.window_states.reshape(-1), Hx.data @ e.alpha_hat, atol=1e-10)
        y_win = tr.outputs_noisy[t - depth + 1: t + 1].reshape(-1)
        assert np.allclose(e.sigma_hat.reshape(-1), y_win - Hy.data @ e.alpha_hat, atol=1e-10)
        assert np.array_equal(e.x_hat, e.window_states[-1])
        assert e.qp_status == OPTIMAL and not e.nonunique


def test_filtering_prior_discipline(paper_data, online):
    est = MheEstimator(paper_data, paper_config())
    emitted = []
    for t in range(12):
        emitted.append(est.step(online.inputs[t], online.outputs_clean[t]).x_hat)
        if t >= 5:
            prob = est.formulate_window_qp()
            assert np.array_equal(prob.prior, emitted[t - 4])
    assert all(np.array_equal(a, b) for a, b in zip(est.prior_buffer, emitted))
    assert len(est.input_buffer) == 5


def test_startup_window_seam(paper_data, paper_sys):
    rng = np.random.default_rng(9)
    tr = simulate(paper_sys, [7.0, 7.0], rng.uniform(-5, 5, (5, 1)), 2 * rng.standard_normal((5, 1)))
    est = MheEstimator(paper_data, paper_config())
    for t in range(4):
        est.step(tr.inputs[t], tr.outputs_noisy[t])
    emitted = est.step(tr.inputs[4], tr.outputs_noisy[4])
    via_window = est.solve(est.formulate_window_qp(prior=est.config.x_hat_0))
    via_startup = est.solve(est.formulate_startup_qp())
    assert np.allclose(emitted.x_hat, via_window.x_hat, atol=1e-12)
    assert np.allclose(via_startup.alpha_hat, via_window.alpha_hat, atol=1e-12)


def test_argmin_invariance_under_weight_scaling(paper_data, paper_sys):
    rng = np.random.default_rng(5)
    tr = simulate(paper_sys, [7.0, 7.0], rng.uniform(-5, 5, (25, 1)), 2 * rng.standard_normal((25, 1)))
    base = run_estimator(MheEstimator(paper_data, paper_config()), tr.inputs, tr.outputs_noisy)
    for s in (2.0, 37.0):
        sc = run_estimator(MheEstimator(paper_data, paper_config(R=10 * s, P=10 * s)), tr.inputs, tr.outputs_noisy)
        for a, b in zip(base, sc):
            assert np.allclose(a.alpha_hat, b.alpha_hat, atol=1e-9 * max(1.0, np.abs(a.alpha_hat).max()))
            assert np.allclose(a.x_hat, b.x_hat, atol=1e-9)
            assert b.cost == pytest.approx(s * a.cost, rel=1e-8, abs=1e-12)


def test_reconstruct_window(paper_data):
    est = MheEstimator(paper_data, paper_config())
    e = np.zeros(26)
    e[4] = 1.0
    states, outputs, _ = est.reconstruct_window(e, 5)
    assert np.array_equal(states, paper_data.states[4:9]) and np.array_equal(outputs, paper_data.outputs[4:9])
    y = np.arange(5.0)
    states, outputs, sigma = est.reconstruct_window(np.zeros(26), 5, y)
    assert not states.any() and np.array_equal(sigma.reshape(-1), y)
    with pytest.raises(ValueError):
        est.reconstruct_window(np.zeros(25), 5)


def test_wrong_prior_converges(paper_sys, paper_data, online):
    """Zero noise, prior [1, 2]: error decays log-linearly at a rate below lambda1."""
    cfg = paper_config(R=100.0)
    out = run_estimator(MheEstimator(paper_data, cfg), online.inputs, online.outputs_clean)
    e = errors(out, online)
    assert e[50] / e[0] < 1e-3
    slope = np.polyfit(np.arange(51), np.log(e[:51]), 1)[0]
    with pytest.warns(UserWarning):
        c = compute_rges_constants(compute_euoss_constants(paper_sys), cfg)
    assert np.exp(slope) <= c.lambda1


def test_setting_a_slower_convergence(paper_data, online):
    out = run_estimator(MheEstimator(paper_data, paper_config(R=10.0)), online.inputs, online.outputs_clean)
    e = errors(out, online)
    # frozen reference from this data/input realization
    assert e[50] / e[0] == pytest.approx(0.04893, rel=1e-3)


def test_state_box_honored(paper_data, paper_sys):
    rng = np.random.default_rng(6)
    tr = simulate(paper_sys, [7.0, 7.0], rng.uniform(-5, 5, (30, 1)), 6 * rng.standard_normal((30, 1)))
    box = StateBox([-12.0, -12.0], [12.0, 12.0])
    assert box.contains(tr.states)
    out = run_estimator(MheEstimator(paper_data, paper_config(state_box=box)), tr.inputs, tr.outputs_noisy)
    assert any(e.active_constraints for e in out)
    for e in out:
        assert e.qp_status == OPTIMAL
        assert box.contains(e.window_states, tol=1e-10)


def test_infeasible_box_raises(paper_data, online):
    box = StateBox([100.0, 100.0], [101.0, 101.0])
    est = MheEstimator(paper_data, paper_config(state_box=box))
    with pytest.raises(EstimationError) as info:
        for t in range(10):
            est.step(online.inputs[t], online.outputs_clean[t])
    assert info.value.violation > 0


def test_step_clock_enforced(paper_data, online):
    est = MheEstimator(paper_data, paper_config())
    est.step(online.inputs[0], online.outputs_clean[0], t=0)
    with pytest.raises(ValueError):
        est.step(online.inputs[1], online.outputs_clean[1], t=5)


def test_reset_reproduces_run(paper_data, paper_sys):
    rng = np.random.default_rng(12)
    tr = simulate(paper_sys, [7.0, 7.0], rng.uniform(-5, 5, (15, 1)), rng.standard_normal((15, 1)))
    est = MheEstimator(paper_data, paper_config())
    a = run_estimator(est, tr.inputs, tr.outputs_noisy)
    est.reset()
    b = run_estimator(est, tr.inputs, tr.outputs_noisy)
    assert all(np.array_equal(x.x_hat, y.x_hat) for x, y in zip(a, b))


def test_mimo_dataset_from_arrays():
    rng = np.random.default_rng(30)
    sys = random_system(rng, n=3, m=2, p=2)
    ds = dataset_for(sys, 3, rng)
    ds2 = make_dataset(ds.inputs, ds.states, ds.outputs)
    tr = simulate(sys, np.ones(3), rng.uniform(-1, 1, (12, 2)))
    cfg = MheConfig(L=3, rho=1.0, P=np.eye(3), R=np.eye(2), x_hat_0=np.zeros(3))
    out = run_estimator(MheEstimator(ds2, cfg), tr.inputs, tr.outputs_clean)
    assert errors(out, tr)[-1] < errors(out, tr)[0]
