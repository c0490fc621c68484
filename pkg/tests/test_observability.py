import math

import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given, settings
from hypothesis import strategies as st
from mobilesensors.geometry import Geometry, MotionConstraint
from mobilesensors.model import RealBlockModel, to_real_blocks
from mobilesensors.observability import (
    TRAJECTORY_CSV_COLUMNS,
    Trajectory,
    assemble,
    condition_number,
    is_observable,
    load_trajectory,
    motion_violations,
    projected_block,
    save_trajectory,
    trajectory_frame,
)

from .util import random_real_model, random_reduced_model


def random_trajectory_indices(n, k, l, seed):
    rng = np.random.default_rng(seed)
    return Trajectory(np.array([rng.choice(n, size=k, replace=False) for _ in range(l)]))


def realified(matrix, model):
    columns = []
    for i, kind in enumerate(model.pair_map):
        if kind == 'real':
            columns.append(matrix[:, i].real)
        elif kind == 'lead':
            columns += [matrix[:, i].real, -matrix[:, i].imag]
    return np.column_stack(columns)


def test_line_distances():
    geom = Geometry.line(10)
    assert geom.distance(2, 7) == 5
    assert Geometry.line(10, periodic=True).distance(1, 9) == 2


def test_periodic_grid_distances():
    geom = Geometry.grid2d(8, 8, periodic=True)
    assert geom.distance(0, 7) == 1
    assert geom.distance(0, 63) == pytest.approx(math.sqrt(2))
    assert Geometry.grid2d(8, 8).distance(0, 7) == 7


def test_graph_hops_between_components():
    geom = Geometry.graph([[1], [0, 2], [1], [4], [3]])
    assert geom.distance(0, 2) == 2
    assert math.isinf(geom.distance(0, 3))


def test_asymmetric_adjacency():
    with pytest.raises(ValueError):
        Geometry.graph([[1], []])


def test_motion_constraint_budget():
    assert MotionConstraint(2.0).budget(3) == pytest.approx(6.0)
    assert math.isinf(MotionConstraint.unconstrained().budget(3))
    with pytest.raises(ValueError):
        MotionConstraint(-1.0)


def test_trajectory_rejects_collisions():
    with pytest.raises(ValueError):
        Trajectory(np.array([[1, 2], [3, 3]]))


def test_trajectory_single_column():
    traj = Trajectory(np.array([4, 5, 6]))
    assert traj.period_l == 3
    assert traj.k == 1
    assert traj.sensor_path(0).tolist() == [4, 5, 6]


def test_projected_block_identity():
    model = random_real_model(7, 4, seed=0)
    assert np.array_equal(projected_block(model, 0), model.modes)


def test_projected_block_matches_complex_powers():
    complex_model = random_reduced_model(9, 5, seed=1)
    model = to_real_blocks(complex_model)
    expected = realified(complex_model.modes * complex_model.eigenvalues ** 3, complex_model)
    assert np.allclose(projected_block(model, 3), expected)


def test_assemble_single_step():
    model = random_real_model(10, 4, seed=2)
    traj = Trajectory(np.array([[3, 1, 7]]))
    assert np.array_equal(assemble(model, traj).matrix, model.modes[[3, 1, 7]])


def test_assemble_matches_selection_operator():
    model = random_real_model(12, 6, seed=3)
    traj = random_trajectory_indices(12, 2, 4, seed=3)
    selections = [np.eye(12)[row] for row in traj.locations]
    stacked = np.vstack([np.linalg.matrix_power(model.dynamics, t) for t in range(4)])
    expected = la.block_diag(*selections) @ la.block_diag(*[model.modes] * 4) @ stacked
    assert np.allclose(assemble(model, traj).matrix, expected, atol=1e-12)


def test_assemble_out_of_range():
    model = random_real_model(5, 2, seed=0)
    with pytest.raises(ValueError):
        assemble(model, Trajectory(np.array([[5]])))


def test_condition_number_examples():
    assert condition_number(np.eye(3)) == pytest.approx(1.0)
    assert condition_number(np.diag([2.0, 1.0])) == pytest.approx(2.0)
    assert math.isinf(condition_number(np.ones((1, 2))))
    assert math.isinf(condition_number(np.array([[1.0, 0.0], [0.0, 0.0]])))


def test_unobservable_zero_row():
    modes = np.ones((3, 2))
    modes[0] = 0.0
    model = RealBlockModel(dynamics=np.diag([0.9, 0.5]), modes=modes)
    report = is_observable(model, Trajectory(np.array([[0]])))
    assert not report
    assert report.rank == 0


def test_full_measurement_observable():
    model = random_real_model(8, 4, seed=5)
    report = is_observable(model, Trajectory(np.arange(8)[None, :]))
    assert report
    assert report.rank == 4


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10000))
def test_condition_invariant_to_row_order(seed):
    model = random_real_model(15, 4, seed)
    traj = random_trajectory_indices(15, 3, 3, seed)
    rng = np.random.default_rng(seed)
    shuffled = Trajectory(np.array([rng.permutation(row) for row in traj.locations]))
    a = condition_number(assemble(model, traj))
    b = condition_number(assemble(model, shuffled))
    assert a == pytest.approx(b, rel=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10000), st.floats(min_value=0.01, max_value=100.0))
def test_condition_invariant_to_mode_scaling(seed, scale):
    model = random_real_model(15, 4, seed)
    scaled = RealBlockModel(
        dynamics=model.dynamics, modes=scale * model.modes, block_map=model.block_map
    )
    traj = random_trajectory_indices(15, 3, 2, seed)
    a = condition_number(assemble(model, traj))
    b = condition_number(assemble(scaled, traj))
    assert a == pytest.approx(b, rel=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10000))
def test_rank_never_decreases_with_more_steps(seed):
    model = random_real_model(12, 6, seed)
    traj = random_trajectory_indices(12, 1, 8, seed)
    ranks = [
        is_observable(model, Trajectory(traj.locations[:l])).rank for l in range(1, 9)
    ]
    assert ranks == sorted(ranks)


def test_motion_violations_include_wrap():
    geom = Geometry.line(10)
    traj = Trajectory(np.array([0, 1, 2]))
    assert motion_violations(traj, geom, 1.0) == [(0, 3, 2.0)]
    assert motion_violations(traj, geom, 1.0, include_wrap=False) == []
    assert motion_violations(Trajectory(np.array([[4]])), geom, 0.0) == []


def test_trajectory_json(tmp_path):
    traj = Trajectory(np.array([[1, 2], [3, 4], [5, 6]]))
    path = tmp_path / 'trajectory.json'
    save_trajectory(traj, path)
    assert np.array_equal(load_trajectory(path).locations, traj.locations)


def test_trajectory_frame_grid_coordinates():
    geom = Geometry.grid2d(4, 5)
    frame = trajectory_frame(Trajectory(np.array([[7, 0], [8, 19]])), geom)
    assert list(frame.columns) == TRAJECTORY_CSV_COLUMNS
    assert frame.iloc[0].tolist() == [1, 0, 7, 1, 2]
    assert frame.iloc[3].tolist() == [2, 1, 19, 3, 4]
