import logging
import math

import numpy as np
import pandas as pd
import pytest
import scipy.linalg as la
from mobilesensors import planner
from mobilesensors.experiment import TORUS_FIXTURE, default_period
from mobilesensors.geometry import Geometry, MotionConstraint
from mobilesensors.model import to_real_blocks
from mobilesensors.observability import (
    Trajectory,
    assemble,
    condition_number,
    is_observable,
    motion_violations,
)
from mobilesensors.planner import (
    GAPPY_E,
    PLAN_REPORT_COLUMNS,
    QRCP,
    PlanConfig,
    PlanReport,
    candidate_set,
    multiscale_refine,
    place_stationary,
    plan,
    random_trajectory,
    selection_score,
)
from mobilesensors.scenarios import TorusSpec, load_gridded, make_torus, mask_geometry
from mobilesensors.utils import DegenerateRankError, InfeasiblePlanError

from .util import data_file_path, random_real_model


def test_candidate_set_on_line():
    geom = Geometry.line(10)
    mc = MotionConstraint(1.0)
    assert candidate_set(geom, mc, 4, 2, 10, 4).tolist() == [3, 4, 5]
    assert candidate_set(geom, mc, 4, 2, 10, 4, occupied=[5]).tolist() == [3, 4]


def test_candidate_set_first_step_is_everything_free():
    geom = Geometry.grid2d(8, 8, periodic=True)
    assert candidate_set(geom, MotionConstraint(1.0), 0, 1, 5, 0).size == 64
    assert candidate_set(geom, MotionConstraint.unconstrained(), 9, 3, 5, 0, occupied=[1, 2]).size == 62


def test_candidate_set_cycle_budget():
    geom = Geometry.line(20)
    assert candidate_set(geom, MotionConstraint(1.0), 1, 4, 4, 0).tolist() == [0, 1]
    assert candidate_set(geom, MotionConstraint(1.0), 1, 4, 4, 0, enforce_cycle=False).tolist() == [0, 1, 2]


def test_candidate_set_never_crosses_components():
    geom = Geometry.graph([[1], [0, 2], [1], [4], [3]])
    for mc in (MotionConstraint(10.0), MotionConstraint.unconstrained()):
        assert candidate_set(geom, mc, 1, 2, 3, 0).tolist() == [0, 1, 2]


def test_candidate_set_empty():
    with pytest.raises(InfeasiblePlanError):
        candidate_set(Geometry.line(5), MotionConstraint(0.0), 2, 2, 3, 2, occupied=[2])


def test_qrcp_score_examples():
    assert np.allclose(selection_score(np.eye(3), np.zeros((0, 3)), QRCP), [1, 1, 1])
    assert np.allclose(selection_score(np.eye(3), np.eye(3)[:1], QRCP), [0, 1, 1])


def test_gappy_e_score_example():
    scores = selection_score(np.eye(3), np.diag([3.0, 2.0, 1.0]), GAPPY_E)
    assert np.allclose(scores, [0.0, 0.0, 2.0])


def test_gappy_e_falls_back_to_residual_score(monkeypatch, caplog):
    rng = np.random.default_rng(4)
    X, current = rng.standard_normal((6, 3)), rng.standard_normal((4, 3))
    monkeypatch.setattr(planner, '_gap_radicand', lambda r, gap, weakest: -np.ones_like(r))
    with caplog.at_level(logging.WARNING, logger='mobilesensors.planner'):
        scores = selection_score(X, current, GAPPY_E)
    assert np.allclose(scores, selection_score(X, current, QRCP))
    assert 'gap score radicand went negative; falling back to the residual score' in caplog.text


def test_gappy_e_needs_full_rank():
    with pytest.raises(DegenerateRankError):
        selection_score(np.eye(3), np.eye(3)[:2], GAPPY_E)


def test_unknown_score_mode():
    with pytest.raises(ValueError):
        selection_score(np.eye(2), np.zeros((0, 2)), 'best')


def test_gappy_e_prefers_rows_that_grow_smallest_singular_value():
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        current = rng.standard_normal((3, 3))
        X = rng.standard_normal((12, 3))
        scores = selection_score(X, current, GAPPY_E)
        exact = [la.svdvals(np.vstack([current, row]))[-1] for row in X]
        top = np.argsort(exact)[::-1][:3]
        hits += int(np.argmax(scores)) in top
    assert hits >= 45


@pytest.mark.parametrize('seed', range(50))
def test_stationary_plan_matches_pivoted_qr(seed):
    m = 2 + seed % 7
    model = random_real_model(15 + seed, m, seed)
    traj = plan(model, Geometry.line(model.n), MotionConstraint.unconstrained(), PlanConfig(k=model.m, period_l=1))
    pivots = la.qr(model.modes.T, pivoting=True)[2][: model.m]
    assert traj.locations[0].tolist() == pivots.tolist()


def test_place_stationary():
    model = random_real_model(20, 4, seed=1)
    traj = place_stationary(model, 3)
    assert traj.period_l == 1
    assert traj.k == 3


def test_zero_speed_stays_put():
    model = random_real_model(25, 6, seed=2)
    traj = plan(model, Geometry.line(25), MotionConstraint(0.0), PlanConfig(k=2, period_l=4))
    assert np.all(traj.locations == traj.locations[0])
    assert traj.locations[0].tolist() == place_stationary(model, 2).locations[0].tolist()


@pytest.mark.parametrize('seed', range(5))
def test_planned_cycle_respects_speed(seed):
    model = random_real_model(30, 6, seed)
    geom = Geometry.line(30)
    traj = plan(model, geom, MotionConstraint(2.0), PlanConfig(k=1, period_l=6))
    assert motion_violations(traj, geom, 2.0) == []


@pytest.mark.parametrize('seed', range(5))
def test_unconstrained_plan_reaches_full_rank(seed):
    model = random_real_model(40, 8, seed)
    traj = plan(model, Geometry.line(40), MotionConstraint.unconstrained(), PlanConfig(k=2, period_l=3))
    assert is_observable(model, traj).rank == 6


def test_plan_report():
    model = random_real_model(20, 4, seed=3)
    report = PlanReport()
    plan(model, Geometry.line(20), MotionConstraint(3.0), PlanConfig(k=2, period_l=3), report=report)
    frame = report.to_frame()
    assert list(frame.columns) == PLAN_REPORT_COLUMNS
    assert len(frame) == 6
    assert set(frame['mode']) <= {QRCP, GAPPY_E}
    assert frame['mode'].iloc[-1] == GAPPY_E
    assert pd.isna(frame['condition'].iloc[0])


def test_exact_row_budget_never_uses_gap_score():
    assert not PlanConfig(k=2, period_l=2).oversampling(4)
    assert PlanConfig(k=2, period_l=3).oversampling(4)
    model = random_real_model(20, 4, seed=3)
    report = PlanReport()
    plan(model, Geometry.line(20), MotionConstraint(3.0), PlanConfig(k=2, period_l=2), report=report)
    assert set(report.to_frame()['mode']) == {QRCP}


def test_too_many_sensors():
    model = random_real_model(5, 2, seed=0)
    with pytest.raises(InfeasiblePlanError):
        plan(model, Geometry.line(5), MotionConstraint(1.0), PlanConfig(k=6, period_l=2))


def test_geometry_size_mismatch():
    model = random_real_model(5, 2, seed=0)
    with pytest.raises(ValueError):
        plan(model, Geometry.line(6), MotionConstraint(1.0), PlanConfig(k=1, period_l=2))


def test_multiscale_refine_fills_gaps():
    model = random_real_model(10, 4, seed=4)
    coarse = Trajectory(np.array([0, 2, 4, 2]))
    fine = multiscale_refine(model, coarse, 2, Geometry.line(10), MotionConstraint(1.0))
    assert fine.sensor_path(0).tolist() == [0, 1, 2, 3, 4, 3, 2, 1]


def test_multiscale_refine_pins_waypoints():
    model = random_real_model(40, 6, seed=5)
    geom = Geometry.line(40)
    coarse = plan(model, geom, MotionConstraint(6.0), PlanConfig(k=1, period_l=3))
    fine = multiscale_refine(model, coarse, 3, geom, MotionConstraint(2.0))
    assert fine.period_l == 9
    assert np.array_equal(fine.locations[::3], coarse.locations)
    assert motion_violations(fine, geom, 2.0) == []


def test_multiscale_refine_gap_too_long():
    model = random_real_model(10, 4, seed=4)
    with pytest.raises(InfeasiblePlanError):
        multiscale_refine(model, Trajectory(np.array([0, 5])), 2, Geometry.line(10), MotionConstraint(1.0))


def test_multiscale_refine_factor():
    model = random_real_model(10, 4, seed=4)
    with pytest.raises(ValueError):
        multiscale_refine(model, Trajectory(np.array([0, 1])), 1, Geometry.line(10), MotionConstraint(1.0))


def test_random_trajectory_respects_speed():
    geom = Geometry.line(30)
    rng = np.random.default_rng(0)
    for _ in range(20):
        traj = random_trajectory(geom, MotionConstraint(2.0), 1, 5, rng)
        assert motion_violations(traj, geom, 2.0) == []


def test_sensors_stay_in_their_basin():
    geom = mask_geometry(load_gridded(data_file_path('two_basins.csv')))
    model = random_real_model(geom.n, 4, seed=6)
    traj = plan(model, geom, MotionConstraint(2.0), PlanConfig(k=2, period_l=4))
    for sensor in range(traj.k):
        path = traj.sensor_path(sensor)
        basins = {geom.grid_coords(int(i))[1] < 4 for i in path}
        assert len(basins) == 1
        hops = [geom.distance(int(a), int(b)) for a, b in zip(path, np.roll(path, -1))]
        assert max(hops) <= 2


def test_torus_plan_beats_random_trajectories():
    wins = 0
    seeds = range(1, 21)
    for seed in seeds:
        model, geom = make_torus(TorusSpec(**{**TORUS_FIXTURE, 'seed': seed}))
        real = to_real_blocks(model)
        assert real.m == 10
        mc = MotionConstraint(24.0)
        l = default_period(model, 1)
        planned = condition_number(assemble(real, plan(real, geom, mc, PlanConfig(k=1, period_l=l))))
        rng = np.random.default_rng(seed)
        chance = [
            condition_number(assemble(real, random_trajectory(geom, mc, 1, l, rng)))
            for _ in range(100)
        ]
        wins += math.isfinite(planned) and planned < np.median(chance)
    assert wins >= 18
