import json
import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Union

import numpy as np
import pandas as pd
import scipy.linalg as la

from .geometry import DISTANCE_EPS, Geometry
from .model import RealBlockModel
from .utils import COND_TOL, RANK_TOL, PathLike, atomic_write, numerical_rank

logger = logging.getLogger(__name__)

TRAJECTORY_CSV_COLUMNS = ["t", "sensor_id", "index", "grid_row", "grid_col"]


@dataclass(frozen=True)
class Trajectory:
    """
    Periodic sensor schedule: row t holds the k sensor locations at step t + 1 of the cycle.
    Sensor identity is positional.
    """

    locations: np.ndarray

    def __post_init__(self):
        locations = np.asarray(self.locations)
        if locations.ndim == 1:
            locations = locations[:, None]
        if locations.ndim != 2 or locations.shape[0] < 1 or locations.shape[1] < 1:
            raise ValueError("trajectory needs at least one step and one sensor")
        if not np.issubdtype(locations.dtype, np.integer):
            if not np.all(np.equal(np.mod(locations, 1), 0)):
                raise ValueError("trajectory locations must be integers")
        locations = locations.astype(int)
        if np.any(locations < 0):
            raise ValueError("trajectory locations must be nonnegative")
        for t, row in enumerate(locations):
            if len(set(row.tolist())) != row.size:
                raise ValueError("sensors collide at step %d: %s" % (t + 1, row.tolist()))
        locations.setflags(write=False)
        object.__setattr__(self, "locations", locations)

    @property
    def period_l(self) -> int:
        return self.locations.shape[0]

    @property
    def k(self) -> int:
        return self.locations.shape[1]

    def check_range(self, n: int) -> None:
        if self.locations.max() >= n:
            raise ValueError(
                "trajectory index %d out of range for n=%d" % (self.locations.max(), n)
            )

    def sensor_path(self, sensor: int) -> np.ndarray:
        return self.locations[:, sensor]


@dataclass(frozen=True)
class ObservabilityMatrix:
    matrix: np.ndarray
    trajectory: Trajectory
    model: RealBlockModel


class RankReport(NamedTuple):
    observable: bool
    rank: int
    singular_values: np.ndarray

    def __bool__(self):
        return self.observable


def projected_block(model: RealBlockModel, t: int) -> np.ndarray:
    """
    Psi Lambda^t in real-block coordinates
    """
    if t < 0:
        raise ValueError("power index must be nonnegative, got %d" % t)
    block = model.modes
    for _ in range(t):
        block = block @ model.dynamics
    return block


def assemble(model: RealBlockModel, traj: Trajectory) -> ObservabilityMatrix:
    """
    Stack the rows of Psi Lambda^(t-1) selected by sigma_t for t = 1..l.

    Raises:
        ValueError: a trajectory index is out of range for the model
    """
    traj.check_range(model.n)
    blocks = []
    block = model.modes
    for t in range(traj.period_l):
        if t > 0:
            block = block @ model.dynamics
        blocks.append(block[traj.locations[t]])
    return ObservabilityMatrix(matrix=np.vstack(blocks), trajectory=traj, model=model)


def condition_number(obs: Union[ObservabilityMatrix, np.ndarray]) -> float:
    """
    Ratio of extreme singular values, inf when the matrix has fewer rows than columns or its
    smallest singular value is negligible
    """
    matrix = obs.matrix if isinstance(obs, ObservabilityMatrix) else np.atleast_2d(obs)
    rows, m = matrix.shape
    if rows < m or rows == 0:
        return math.inf
    s = la.svdvals(matrix)
    if s[0] == 0 or s[-1] < COND_TOL * s[0]:
        return math.inf
    return float(s[0] / s[-1])


def is_observable(model: RealBlockModel, traj: Trajectory) -> RankReport:
    s = la.svdvals(assemble(model, traj).matrix)
    rank = numerical_rank(s, RANK_TOL)
    return RankReport(observable=rank == model.m, rank=rank, singular_values=s)


def motion_violations(
    traj: Trajectory, geom: Geometry, speed: float, include_wrap: bool = True
) -> List[tuple]:
    """
    List (sensor, step, distance) for every move longer than speed; step is the 1-based step the
    sensor leaves from, and the wrap from sigma_l back to sigma_1 is included by default
    """
    violations = []
    steps = traj.period_l if include_wrap else traj.period_l - 1
    if traj.period_l == 1:
        return violations
    for sensor in range(traj.k):
        path = traj.sensor_path(sensor)
        for t in range(steps):
            d = geom.distance(int(path[t]), int(path[(t + 1) % traj.period_l]))
            if d > speed + DISTANCE_EPS:
                violations.append((sensor, t + 1, d))
    return violations


def trajectory_to_dict(traj: Trajectory) -> dict:
    return {
        "l": traj.period_l,
        "k": traj.k,
        "locations": traj.locations.reshape(-1).tolist(),
    }


def trajectory_from_dict(doc: dict) -> Trajectory:
    l, k = int(doc["l"]), int(doc["k"])
    locations = np.asarray(doc["locations"], dtype=int)
    if locations.size != l * k:
        raise ValueError("trajectory has %d locations, expected l*k = %d" % (locations.size, l * k))
    return Trajectory(locations.reshape(l, k))


def save_trajectory(traj: Trajectory, path: PathLike) -> None:
    atomic_write(path, json.dumps(trajectory_to_dict(traj)))


def load_trajectory(path: PathLike) -> Trajectory:
    with open(path, encoding="utf-8") as f:
        return trajectory_from_dict(json.load(f))


def trajectory_frame(traj: Trajectory, geom: Optional[Geometry] = None) -> pd.DataFrame:
    records = []
    for t in range(traj.period_l):
        for sensor in range(traj.k):
            index = int(traj.locations[t, sensor])
            row, col = geom.grid_coords(index) if geom is not None else (0, index)
            records.append((t + 1, sensor, index, row, col))
    return pd.DataFrame.from_records(records, columns=TRAJECTORY_CSV_COLUMNS)


def write_trajectory_csv(traj: Trajectory, path: PathLike, geom: Optional[Geometry] = None) -> None:
    atomic_write(path, trajectory_frame(traj, geom).to_csv(index=False))
