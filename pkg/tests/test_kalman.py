import logging
import math

import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given, settings
from hypothesis import strategies as st
from mobilesensors.kalman import (
    KF_RUN_COLUMNS,
    KfRun,
    KfState,
    dare_iterate,
    dare_trace_bounds,
    kf_step,
    kf_update,
    lift_system,
    lifted_process_noise,
    limiting_trace,
    run_filter,
    steady_state_trace,
)
from mobilesensors.model import (
    NoiseSpec,
    RealBlockModel,
    SnapshotMatrix,
    simulate,
    to_complex_coefficients,
    to_real_blocks,
)
from mobilesensors.observability import Trajectory, assemble
from mobilesensors.planner import place_stationary
from mobilesensors.utils import ConditioningError, NonConvergenceError

from .util import random_real_model, random_reduced_model, scalar_model

SCALAR_DARE = (0.25 + math.sqrt(4.0625)) / 2


def zero_truth(n, steps):
    return SnapshotMatrix(data=np.zeros((n, steps)))


def random_orthogonal(m, rng):
    Q, R = np.linalg.qr(rng.standard_normal((m, m)))
    return Q * np.sign(np.diag(R))


def test_scalar_step():
    state = kf_step(scalar_model(), KfState.initial(1, 1.0), [0], [0.0], NoiseSpec(q=1.0, rho=1.0))
    assert state.covariance[0, 0] == pytest.approx(1.125)


def test_empty_selection_is_prediction():
    model = random_real_model(6, 4, seed=0)
    state = KfState.initial(4, 2.0)
    stepped = kf_step(model, state, [], [], NoiseSpec(q=0.3, rho=1.0))
    A = model.dynamics
    assert np.allclose(stepped.covariance, 2.0 * A @ A.T + 0.3 * np.eye(4))


def test_huge_measurement_noise_is_prediction():
    model = random_real_model(6, 4, seed=1)
    state = KfState.initial(4, 1.0)
    updated = kf_update(model, state, [0, 1], np.zeros(2), 1e12)
    assert np.allclose(updated.covariance, state.covariance, atol=1e-6)


def test_joseph_form_matches_standard_update():
    model = random_real_model(8, 4, seed=2)
    state = KfState.initial(4, 1.0)
    updated = kf_update(model, state, [0, 3], np.zeros(2), 1e-7)
    C = model.modes[[0, 3]]
    gain = C.T @ np.linalg.inv(C @ C.T + 1e-7 * np.eye(2))
    expected = np.eye(4) - gain @ C
    assert np.allclose(updated.covariance, updated.covariance.T)
    assert np.allclose(updated.covariance, expected, atol=1e-8)


def test_singular_innovation():
    modes = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 1.0]])
    model = RealBlockModel(dynamics=np.eye(2) * 0.9, modes=modes)
    with pytest.raises(ConditioningError):
        kf_update(model, KfState.initial(2, 1.0), [0, 1], np.zeros(2), 1e-20)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10000))
def test_update_preserves_psd(seed):
    model = random_real_model(10, 6, seed)
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((6, 6))
    state = KfState(estimate=np.zeros(6), covariance=B @ B.T + 1e-3 * np.eye(6))
    sel = rng.choice(10, size=3, replace=False)
    for _ in range(5):
        state = kf_step(model, state, sel, rng.standard_normal(3), NoiseSpec(q=0.1, rho=0.5))
        assert np.min(la.eigvalsh(state.covariance)) >= -1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10000))
def test_more_measurements_never_hurt(seed):
    model = random_real_model(10, 4, seed)
    state = KfState.initial(4, 5.0)
    subset = kf_update(model, state, [1, 4], np.zeros(2), 0.1)
    superset = kf_update(model, state, [1, 4, 7], np.zeros(3), 0.1)
    assert superset.trace <= subset.trace + 1e-10


def test_initial_state_shape():
    with pytest.raises(ValueError):
        KfState.initial(3, np.eye(2))


def test_stationary_filter_converges():
    model = random_real_model(12, 4, seed=3, modulus=(0.5, 0.95))
    traj = place_stationary(model, 2)
    run = run_filter(model, traj, zero_truth(12, 300), NoiseSpec(q=0.1, rho=0.1), 300)
    assert abs(run.trace_series[-1] - run.trace_series[-2]) < 1e-8


@pytest.mark.parametrize('seed', range(20))
def test_filter_matches_dare(seed):
    q, rho = 0.05 + 0.01 * seed, 0.1
    model = random_real_model(12, 4, seed, modulus=(0.5, 0.95))
    traj = place_stationary(model, 2)
    run = run_filter(model, traj, zero_truth(12, 400), NoiseSpec(q=q, rho=rho), 400)
    C = model.modes[traj.locations[0]]
    solution = dare_iterate(model.dynamics, C, q * np.eye(4), rho * np.eye(2))
    expected = np.trace(solution.covariance)
    assert run.trace_series[-1] == pytest.approx(expected, rel=1e-6)


def test_unobservable_neutral_mode_grows():
    angle = 0.4
    dynamics = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    modes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    model = RealBlockModel(dynamics=dynamics, modes=modes, block_map=((0, 1),))
    run = run_filter(model, Trajectory(np.array([[0]])), zero_truth(3, 50), NoiseSpec(q=0.1, rho=0.1), 50)
    assert np.all(np.diff(run.trace_series) > 0)


def test_periodic_schedule_reaches_limit_cycle():
    model = random_real_model(10, 4, seed=5, modulus=(0.5, 0.95))
    traj = Trajectory(np.array([[0, 1], [5, 6]]))
    run = run_filter(model, traj, zero_truth(10, 600), NoiseSpec(q=0.1, rho=0.1), 600)
    assert run.trace_series[-1] == pytest.approx(run.trace_series[-3], rel=1e-8)
    assert steady_state_trace(run, 2) == pytest.approx(np.mean(run.trace_series[-2:]))


def test_filter_tracks_simulated_field():
    complex_model = random_reduced_model(15, 4, seed=6, modulus=(0.8, 0.95))
    model = to_real_blocks(complex_model)
    noise = NoiseSpec(q=0.01, rho=0.01)
    z0 = to_complex_coefficients(complex_model, np.ones(4))
    truth = simulate(complex_model, z0, 200, noise, seed=1)
    run = run_filter(model, place_stationary(model, 4), truth, noise, 200, seed=2, store_estimates=True)
    assert run.estimate_series.shape == (200, 4)
    assert np.mean(run.recon_error_series[-50:]) < 0.5 * np.mean(truth.data[:, -50:] ** 2)


def test_run_frame(tmp_path):
    run = KfRun(trace_series=np.array([3.0, 2.0]), posterior_trace_series=np.array([1.0, 1.0]), dt=0.5)
    frame = run.to_frame()
    assert list(frame.columns) == KF_RUN_COLUMNS
    assert frame['time'].tolist() == [0.0, 0.5]
    assert frame['recon_mse'].isna().all()
    run.write_csv(tmp_path / 'kf_run.csv')
    assert (tmp_path / 'kf_run.csv').read_text().splitlines()[0] == ','.join(KF_RUN_COLUMNS)


def test_truth_too_short():
    model = random_real_model(5, 2, seed=0)
    with pytest.raises(ValueError):
        run_filter(model, Trajectory(np.array([[0]])), zero_truth(5, 3), NoiseSpec(), 4)


def test_scalar_dare():
    solution = dare_iterate([[0.5]], [[1.0]], [[1.0]], [[1.0]])
    assert solution.covariance[0, 0] == pytest.approx(SCALAR_DARE, abs=1e-9)
    assert solution.iterations > 0


def test_dare_without_measurements_is_lyapunov():
    solution = dare_iterate([[0.5]], [[0.0]], [[1.0]], [[1.0]])
    assert solution.covariance[0, 0] == pytest.approx(4.0 / 3.0, abs=1e-8)


def test_dare_with_exact_measurements():
    A = random_orthogonal(3, np.random.default_rng(0))
    solution = dare_iterate(A, np.eye(3), np.eye(3), 1e-10 * np.eye(3))
    assert np.allclose(solution.covariance, np.eye(3), atol=1e-6)


def test_dare_iteration_limit():
    with pytest.raises(NonConvergenceError) as e:
        dare_iterate([[0.5]], [[1.0]], [[1.0]], [[1.0]], max_iter=2)
    assert e.value.residual > 0


def test_scalar_bounds_are_tight():
    bounds = dare_trace_bounds([[0.5]], [[1.0]], [[1.0]], [[1.0]])
    assert bounds.applicable
    assert bounds.lower == pytest.approx(SCALAR_DARE, abs=1e-9)
    assert bounds.upper == pytest.approx(SCALAR_DARE, abs=1e-9)
    assert bounds.monotone_precondition


def test_bounds_need_full_information():
    bounds = dare_trace_bounds(0.5 * np.eye(2), [[1.0, 0.0]], np.eye(2), [[1.0]])
    assert not bounds.applicable
    assert math.isnan(bounds.lower) and math.isnan(bounds.upper)
    assert bounds.to_dict()['upper'] is None


def test_bounds_sandwich_dare_trace():
    rng = np.random.default_rng(11)
    for _ in range(100):
        m = int(rng.integers(2, 9))
        k = int(rng.integers(m, m + 4))
        A = rng.uniform(0.1, 0.95) * random_orthogonal(m, rng)
        C = rng.standard_normal((k, m))
        Q = rng.uniform(0.1, 2.0) * np.eye(m)
        R = rng.uniform(0.1, 2.0) * np.eye(k)
        trace = np.trace(dare_iterate(A, C, Q, R).covariance)
        bounds = dare_trace_bounds(A, C, Q, R)
        assert bounds.applicable
        assert bounds.lower <= trace * (1 + 1e-7)
        assert trace <= bounds.upper * (1 + 1e-7)


def test_lift_single_step():
    model = random_real_model(9, 4, seed=7)
    traj = Trajectory(np.array([[2, 5]]))
    A_hat, C_hat = lift_system(model, traj)
    assert np.array_equal(A_hat, model.dynamics)
    assert np.array_equal(C_hat, model.modes[[2, 5]])


@pytest.mark.parametrize('seed', range(50))
def test_lift_matches_observability_and_powers(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(8, 40)), int(rng.integers(1, 9))
    complex_model = random_reduced_model(n, m, seed=seed)
    model = to_real_blocks(complex_model)
    l, k = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    traj = Trajectory(np.array([rng.choice(n, size=k, replace=False) for _ in range(l)]))
    A_hat, C_hat = lift_system(model, traj)
    assert np.max(np.abs(C_hat - assemble(model, traj).matrix)) < 1e-12
    powers = complex_model.eigenvalues ** l
    for eig in la.eigvals(A_hat):
        assert np.min(np.abs(powers - eig)) < 1e-10


def test_lifted_process_noise():
    model = random_real_model(9, 4, seed=9)
    A = model.dynamics
    assert np.allclose(lifted_process_noise(model, 1, 0.3), 0.3 * np.eye(4))
    assert np.allclose(lifted_process_noise(model, 2, 0.3), 0.3 * (np.eye(4) + A @ A.T))
    with pytest.raises(ValueError):
        lifted_process_noise(model, 0, 0.3)


def test_limiting_trace_of_stationary_sensors_is_dare_trace():
    model = random_real_model(12, 4, seed=10, modulus=(0.5, 0.95))
    traj = place_stationary(model, 2)
    noise = NoiseSpec(q=0.1, rho=0.1)
    C = model.modes[traj.locations[0]]
    expected = np.trace(dare_iterate(model.dynamics, C, 0.1 * np.eye(4), 0.1 * np.eye(2)).covariance)
    assert limiting_trace(model, traj, noise) == pytest.approx(expected, rel=1e-6)


def test_limiting_trace_matches_long_filter_run():
    model = random_real_model(10, 4, seed=5, modulus=(0.5, 0.95))
    traj = Trajectory(np.array([[0, 1], [5, 6]]))
    noise = NoiseSpec(q=0.1, rho=0.1)
    run = run_filter(model, traj, zero_truth(10, 600), noise, 600)
    assert limiting_trace(model, traj, noise) == pytest.approx(steady_state_trace(run, 2), rel=1e-6)


def test_limiting_trace_of_unseen_neutral_mode(caplog):
    angle = 0.4
    dynamics = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    modes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    model = RealBlockModel(dynamics=dynamics, modes=modes, block_map=((0, 1),))
    with caplog.at_level(logging.WARNING, logger='mobilesensors.kalman'):
        trace = limiting_trace(model, Trajectory(np.array([[0]])), NoiseSpec(q=0.1, rho=0.1))
    assert math.isinf(trace)
    assert 'never observed' in caplog.text


def test_limiting_trace_step_limit():
    model = random_real_model(10, 4, seed=5, modulus=(0.5, 0.95))
    with pytest.raises(NonConvergenceError):
        limiting_trace(model, Trajectory(np.array([[0, 1], [5, 6]])), NoiseSpec(q=0.1, rho=0.1), max_steps=4)
