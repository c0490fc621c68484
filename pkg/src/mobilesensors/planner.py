"""
Greedy time-forwarding path planning on the projected observability matrix
"""
import logging
import math
from dataclasses import dataclass
from typing import Collection, Dict, List, Optional

import numpy as np
import pandas as pd
import scipy.linalg as la

from .geometry import Geometry, MotionConstraint
from .model import RealBlockModel
from .observability import Trajectory, condition_number, motion_violations
from .utils import (
    DegenerateRankError,
    InfeasiblePlanError,
    PathLike,
    atomic_write,
    numerical_rank,
)

logger = logging.getLogger(__name__)

QRCP = "qrcp"
GAPPY_E = "gappy_e"

PLAN_REPORT_COLUMNS = ["step", "sensor", "index", "score", "candidates", "condition", "mode"]


@dataclass(frozen=True)
class PlanConfig:
    k: int
    period_l: int
    enforce_cycle: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("need at least one sensor, got k=%d" % self.k)
        if self.period_l < 1:
            raise ValueError("period must be at least 1, got %d" % self.period_l)

    def oversampling(self, m: int) -> bool:
        """
        True when the full cycle collects more rows than the model rank; only then does the
        gap score take over from the residual score once the rows reach rank m
        """
        return self.k * self.period_l > m


class PlanReport:
    """
    Per-selection diagnostics: the chosen index, its score, the candidate count and the running
    condition number of the stacked rows
    """

    def __init__(self):
        self.rows: List[tuple] = []

    def add(self, step, sensor, index, score, candidates, condition, mode):
        if not math.isfinite(condition):
            condition = None
        self.rows.append((step, sensor, index, score, candidates, condition, mode))

    def __len__(self):
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self.rows, columns=PLAN_REPORT_COLUMNS)

    def write_csv(self, path: PathLike) -> None:
        atomic_write(path, self.to_frame().to_csv(index=False))


def candidate_set(
    geom: Geometry,
    mc: MotionConstraint,
    current: int,
    t: int,
    l: int,
    start: int,
    occupied: Collection[int] = (),
    enforce_cycle: bool = True,
    sensor: int = -1,
) -> np.ndarray:
    """
    Indices a sensor may occupy at (1-based) step t of an l-step cycle.

    At t = 1 every valid unoccupied index is allowed. Later steps must lie within one move of
    the current location and, when the cycle is enforced, within (l - t + 1) moves of the start.

    Raises:
        InfeasiblePlanError: no index satisfies the constraints
    """
    mask = geom.valid.copy()
    if t > 1:
        from_current = geom.distances_from(current)
        mask &= np.isfinite(from_current)
        mask &= from_current <= mc.budget(1)
        if enforce_cycle:
            from_start = geom.distances_from(start)
            mask &= np.isfinite(from_start)
            mask &= from_start <= mc.budget(l - t + 1)
    for index in occupied:
        mask[index] = False
    candidates = np.flatnonzero(mask)
    if candidates.size == 0:
        raise InfeasiblePlanError(
            "sensor %d has no feasible location at step %d" % (sensor, t), sensor=sensor, step=t
        )
    return candidates


def _qrcp_score(X: np.ndarray, O_cur: np.ndarray) -> np.ndarray:
    energy = np.sum(X ** 2, axis=1)
    if O_cur.shape[0] == 0:
        return energy
    Q, R, _ = la.qr(O_cur.T, mode="economic", pivoting=True)
    rank = numerical_rank(np.abs(np.diag(R)))
    if rank == 0:
        return energy
    projected = X @ Q[:, :rank]
    return np.maximum(energy - np.sum(projected ** 2, axis=1), 0.0)


def _gap_radicand(r: np.ndarray, gap: float, weakest: np.ndarray) -> np.ndarray:
    # nonnegative in exact arithmetic; rounding can push it below zero
    return r ** 2 - 4 * gap * weakest ** 2


def _gappy_e_score(X: np.ndarray, O_cur: np.ndarray) -> np.ndarray:
    m = X.shape[1]
    _, s, Vh = la.svd(O_cur, full_matrices=False)
    if O_cur.shape[0] < m or numerical_rank(s) < m:
        raise DegenerateRankError(
            "current rows have rank %d, need %d for the gap score" % (numerical_rank(s), m),
            numerical_rank(s),
        )
    if m == 1:
        return np.sum(X ** 2, axis=1)
    gap = s[m - 2] ** 2 - s[m - 1] ** 2
    U = Vh @ X.T
    r = gap + np.sum(U ** 2, axis=0)
    radicand = _gap_radicand(r, gap, U[m - 1])
    if np.any(radicand < -1e-12 * np.maximum(r ** 2, 1e-300)):
        logger.warning("gap score radicand went negative; falling back to the residual score")
        return _qrcp_score(X, O_cur)
    return r - np.sqrt(np.maximum(radicand, 0.0))


def selection_score(X: np.ndarray, O_cur: np.ndarray, mode: str) -> np.ndarray:
    """
    Score every row of X as the next measurement; larger is better.

    Args:
        X: candidate rows of the projected observability block at the current step
        O_cur: rows already selected (p x m, possibly empty)
        mode: 'qrcp' (residual energy orthogonal to the current row space) or 'gappy_e'
            (lower bound on the growth of the smallest singular value)

    Raises:
        DegenerateRankError: gappy_e mode with rank-deficient current rows
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    O_cur = np.asarray(O_cur, dtype=float).reshape(-1, X.shape[1])
    if mode == QRCP:
        return _qrcp_score(X, O_cur)
    elif mode == GAPPY_E:
        return _gappy_e_score(X, O_cur)
    else:
        raise ValueError("Unknown selection mode: %s" % mode)


def _selection_mode(rows: np.ndarray, m: int) -> str:
    if rows.shape[0] >= m and numerical_rank(la.svdvals(rows)) == m:
        return GAPPY_E
    return QRCP


def _feasible_sets(
    geom, mc, locations, t, l, unassigned, occupied, enforce_cycle, waypoints=None, remaining=0
) -> Dict[int, np.ndarray]:
    """
    Candidate sets for each unassigned sensor, injecting the current location when a set is
    empty and the location is free
    """
    sets = {}
    for sensor in unassigned:
        current = int(locations[t - 2, sensor])
        try:
            candidates = candidate_set(
                geom,
                mc,
                current,
                t,
                l,
                int(locations[0, sensor]),
                occupied,
                enforce_cycle=enforce_cycle and waypoints is None,
                sensor=sensor,
            )
            if waypoints is not None:
                to_waypoint = geom.distances_from(int(waypoints[sensor]))[candidates]
                reachable = np.isfinite(to_waypoint) & (to_waypoint <= mc.budget(remaining))
                candidates = candidates[reachable]
        except InfeasiblePlanError:
            candidates = np.array([], dtype=int)
        if candidates.size == 0:
            if waypoints is not None:
                raise InfeasiblePlanError(
                    "sensor %d cannot reach waypoint %d from %d at step %d"
                    % (sensor, waypoints[sensor], current, t),
                    sensor=sensor,
                    step=t,
                )
            if current in occupied:
                raise InfeasiblePlanError(
                    "sensor %d has no feasible location at step %d" % (sensor, t),
                    sensor=sensor,
                    step=t,
                )
            logger.info("sensor %d stays at %d at step %d", sensor, current, t)
            candidates = np.array([current])
        sets[sensor] = candidates
    return sets


def _closest_sensor(geom, locations, t, sets, index) -> int:
    holders = [sensor for sensor in sorted(sets) if index in sets[sensor]]
    distances = [geom.distance(int(locations[t - 2, sensor]), index) for sensor in holders]
    return holders[int(np.argmin(distances))]


def _greedy_pick(X, rows, union, m, oversampling):
    mode = _selection_mode(rows, m) if oversampling else QRCP
    scores = selection_score(X[union], rows, mode)
    best = int(np.argmax(scores))
    return int(union[best]), float(scores[best]), mode


def plan(
    model: RealBlockModel,
    geom: Geometry,
    mc: MotionConstraint,
    cfg: PlanConfig,
    report: Optional[PlanReport] = None,
) -> Trajectory:
    """
    Greedy time-forwarding plan of a periodic trajectory.

    At each step k rows are chosen one at a time from the candidate sets of the unassigned
    sensors, each scored against all rows chosen so far; the chosen location goes to the
    closest unassigned sensor that can reach it (selection order at the first step). The
    projected block is advanced by the dynamics after every step.

    Raises:
        InfeasiblePlanError: a sensor has no admissible location; carries the partial plan
    """
    if geom.n != model.n:
        raise ValueError("geometry has %d indices but the model has n=%d" % (geom.n, model.n))
    k, l, m = cfg.k, cfg.period_l, model.m
    oversampling = cfg.oversampling(m)
    if k > int(geom.valid.sum()):
        raise InfeasiblePlanError("%d sensors do not fit on %d valid indices" % (k, geom.valid.sum()))

    X = model.modes.copy()
    rows = np.zeros((0, m))
    locations = np.full((l, k), -1, dtype=int)
    for t in range(1, l + 1):
        occupied: List[int] = []
        unassigned = list(range(k))
        while unassigned:
            try:
                if t == 1:
                    common = candidate_set(geom, mc, 0, 1, l, 0, occupied)
                    sets = {sensor: common for sensor in unassigned}
                else:
                    sets = _feasible_sets(
                        geom, mc, locations, t, l, unassigned, occupied, cfg.enforce_cycle
                    )
            except InfeasiblePlanError as e:
                e.partial = locations[: t - 1].copy()
                raise
            union = np.unique(np.concatenate(list(sets.values())))
            index, score, mode = _greedy_pick(X, rows, union, m, oversampling)
            sensor = unassigned[0] if t == 1 else _closest_sensor(geom, locations, t, sets, index)

            locations[t - 1, sensor] = index
            occupied.append(index)
            unassigned.remove(sensor)
            rows = np.vstack([rows, X[index]])
            if report is not None:
                report.add(t, sensor, index, score, int(union.size), condition_number(rows), mode)
        X = X @ model.dynamics

    trajectory = Trajectory(locations)
    if cfg.enforce_cycle and not mc.is_unconstrained:
        violations = motion_violations(trajectory, geom, mc.speed)
        if violations:
            logger.warning("planned trajectory breaks the motion limit: %s", violations)
    logger.debug(
        "planned %d sensors over %d steps, condition %.3e", k, l, condition_number(rows)
    )
    return trajectory


def multiscale_refine(
    model_fine: RealBlockModel,
    coarse: Trajectory,
    refine_factor: int,
    geom: Geometry,
    mc_fine: MotionConstraint,
    cfg_fine: Optional[PlanConfig] = None,
    report: Optional[PlanReport] = None,
) -> Trajectory:
    """
    Fill a coarse-rate trajectory in at refine_factor times the sampling rate.

    Coarse waypoint i is pinned at fine step i * refine_factor + 1; the steps in between are
    chosen greedily from locations that keep the next waypoint reachable at the fine speed.

    Raises:
        InfeasiblePlanError: a waypoint gap is longer than the fine speed can cover
    """
    if refine_factor < 2:
        raise ValueError("refine factor must be at least 2, got %d" % refine_factor)
    coarse.check_range(model_fine.n)
    lc, k, m = coarse.period_l, coarse.k, model_fine.m
    l = lc * refine_factor
    if cfg_fine is not None and (cfg_fine.period_l != l or cfg_fine.k != k):
        raise ValueError(
            "fine config (k=%d, l=%d) does not match the refined coarse plan (k=%d, l=%d)"
            % (cfg_fine.k, cfg_fine.period_l, k, l)
        )

    oversampling = (cfg_fine or PlanConfig(k, l)).oversampling(m)
    gap_budget = mc_fine.budget(refine_factor)
    for i in range(lc):
        for sensor in range(k):
            a = int(coarse.locations[i, sensor])
            b = int(coarse.locations[(i + 1) % lc, sensor])
            d = geom.distance(a, b)
            if not d <= gap_budget:
                raise InfeasiblePlanError(
                    "gap %d -> %d of sensor %d (%d to %d, distance %.3g) exceeds %d fine moves"
                    % (i + 1, (i + 1) % lc + 1, sensor, a, b, d, refine_factor),
                    sensor=sensor,
                    step=i * refine_factor + 1,
                )

    X = model_fine.modes.copy()
    rows = np.zeros((0, m))
    locations = np.full((l, k), -1, dtype=int)
    for t in range(1, l + 1):
        offset = (t - 1) % refine_factor
        if offset == 0:
            locations[t - 1] = coarse.locations[(t - 1) // refine_factor]
            rows = np.vstack([rows, X[locations[t - 1]]])
        else:
            waypoints = coarse.locations[((t - 1) // refine_factor + 1) % lc]
            occupied: List[int] = []
            unassigned = list(range(k))
            while unassigned:
                try:
                    sets = _feasible_sets(
                        geom,
                        mc_fine,
                        locations,
                        t,
                        l,
                        unassigned,
                        occupied,
                        False,
                        waypoints=waypoints,
                        remaining=refine_factor - offset,
                    )
                except InfeasiblePlanError as e:
                    e.partial = locations[: t - 1].copy()
                    raise
                union = np.unique(np.concatenate(list(sets.values())))
                index, score, mode = _greedy_pick(X, rows, union, m, oversampling)
                sensor = _closest_sensor(geom, locations, t, sets, index)
                locations[t - 1, sensor] = index
                occupied.append(index)
                unassigned.remove(sensor)
                rows = np.vstack([rows, X[index]])
                if report is not None:
                    report.add(
                        t, sensor, index, score, int(union.size), condition_number(rows), mode
                    )
        X = X @ model_fine.dynamics
    return Trajectory(locations)


def random_trajectory(
    geom: Geometry,
    mc: MotionConstraint,
    k: int,
    l: int,
    rng: np.random.Generator,
    enforce_cycle: bool = True,
) -> Trajectory:
    """
    Random periodic trajectory under the same candidate rules as the planner
    """
    valid = np.flatnonzero(geom.valid)
    if k > valid.size:
        raise InfeasiblePlanError("%d sensors do not fit on %d valid indices" % (k, valid.size))
    locations = np.full((l, k), -1, dtype=int)
    locations[0] = rng.choice(valid, size=k, replace=False)
    for t in range(2, l + 1):
        occupied: List[int] = []
        for sensor in range(k):
            sets = _feasible_sets(
                geom, mc, locations, t, l, [sensor], occupied, enforce_cycle
            )
            index = int(rng.choice(sets[sensor]))
            locations[t - 1, sensor] = index
            occupied.append(index)
    return Trajectory(locations)


def place_stationary(model: RealBlockModel, k: int, geom: Optional[Geometry] = None) -> Trajectory:
    """
    Single-step plan: QRcp sensor placement on the mode matrix
    """
    if geom is None:
        geom = Geometry.line(model.n)
    return plan(model, geom, MotionConstraint(math.inf), PlanConfig(k=k, period_l=1))
