import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg as la

from .model import NoiseSpec, RealBlockModel, SnapshotMatrix
from .observability import Trajectory, assemble
from .utils import (
    ConditioningError,
    NonConvergenceError,
    PathLike,
    atomic_write,
    numerical_rank,
    symmetrize,
)

logger = logging.getLogger(__name__)

INNOVATION_COND_LIMIT = 1e14
JOSEPH_RHO = 1e-6
DEFAULT_SIGMA0 = 10.0

KF_RUN_COLUMNS = ["step", "time", "trace_sigma", "recon_mse"]


@dataclass(frozen=True)
class KfState:
    estimate: np.ndarray
    covariance: np.ndarray

    @classmethod
    def initial(cls, m: int, sigma0: Union[float, np.ndarray] = DEFAULT_SIGMA0) -> "KfState":
        covariance = np.asarray(sigma0, dtype=float)
        if covariance.ndim == 0:
            covariance = float(covariance) * np.eye(m)
        if covariance.shape != (m, m):
            raise ValueError("initial covariance must be %dx%d" % (m, m))
        return cls(estimate=np.zeros(m), covariance=symmetrize(covariance))

    @property
    def trace(self) -> float:
        return float(np.trace(self.covariance))


@dataclass
class KfRun:
    """
    Filter history: trace_series holds tr(Sigma_{t+1|t}) after each step, posterior_trace_series
    holds tr(Sigma_{t|t}) and recon_error_series the per-cell squared reconstruction error
    """

    trace_series: np.ndarray
    posterior_trace_series: np.ndarray
    recon_error_series: Optional[np.ndarray] = None
    estimate_series: Optional[np.ndarray] = None
    dt: float = 1.0
    final_state: Optional[KfState] = None

    @property
    def steps(self) -> int:
        return self.trace_series.size

    def to_frame(self) -> pd.DataFrame:
        recon = self.recon_error_series
        if recon is None:
            recon = np.full(self.steps, np.nan)
        return pd.DataFrame(
            {
                "step": np.arange(self.steps),
                "time": np.arange(self.steps) * self.dt,
                "trace_sigma": self.trace_series,
                "recon_mse": recon,
            },
            columns=KF_RUN_COLUMNS,
        )

    def write_csv(self, path: PathLike) -> None:
        atomic_write(path, self.to_frame().to_csv(index=False))


@dataclass(frozen=True)
class DareSolution:
    covariance: np.ndarray
    iterations: int
    residual: float


@dataclass(frozen=True)
class DareBounds:
    lower: float
    upper: float
    a1: float
    a2: float
    applicable_upper: bool
    applicable_lower: bool
    monotone_precondition: bool

    @property
    def applicable(self) -> bool:
        return self.applicable_upper and self.applicable_lower

    def to_dict(self) -> dict:
        doc = asdict(self)
        for key in ("lower", "upper", "a1", "a2"):
            if not math.isfinite(doc[key]):
                doc[key] = None
        return doc


def kf_update(
    model: RealBlockModel, state: KfState, sel: Sequence[int], y: np.ndarray, rho: float
) -> KfState:
    """
    Measurement update with C = rows sel of the real modes and R = rho I.

    Raises:
        ConditioningError: the innovation covariance is numerically singular
    """
    sel = np.asarray(sel, dtype=int).reshape(-1)
    if sel.size == 0:
        return state
    C = model.modes[sel]
    sigma = state.covariance
    S = symmetrize(C @ sigma @ C.T + rho * np.eye(sel.size))
    cond = np.linalg.cond(S)
    if not cond <= INNOVATION_COND_LIMIT:
        raise ConditioningError("innovation covariance condition number %.3e" % cond)
    factor = la.cho_factor(S)
    gain = la.cho_solve(factor, C @ sigma).T
    innovation = np.asarray(y, dtype=float).reshape(-1) - C @ state.estimate
    estimate = state.estimate + gain @ innovation
    if rho < JOSEPH_RHO:
        I_KC = np.eye(model.m) - gain @ C
        covariance = I_KC @ sigma @ I_KC.T + rho * gain @ gain.T
    else:
        covariance = sigma - gain @ C @ sigma
    return KfState(estimate=estimate, covariance=symmetrize(covariance))


def kf_predict(model: RealBlockModel, state: KfState, q: float) -> KfState:
    A = model.dynamics
    covariance = A @ state.covariance @ A.T + q * np.eye(model.m)
    return KfState(estimate=A @ state.estimate, covariance=symmetrize(covariance))


def kf_step(
    model: RealBlockModel, state: KfState, sel: Sequence[int], y: np.ndarray, noise: NoiseSpec
) -> KfState:
    """
    Measurement update followed by the time update; an empty selection is a pure prediction
    """
    return kf_predict(model, kf_update(model, state, sel, y, noise.rho), noise.q)


def run_filter(
    model: RealBlockModel,
    traj: Trajectory,
    truth: SnapshotMatrix,
    noise: NoiseSpec,
    steps: int,
    sigma0: Union[float, np.ndarray] = DEFAULT_SIGMA0,
    seed: int = 0,
    measurement_noise: bool = True,
    store_estimates: bool = False,
) -> KfRun:
    """
    Filter along a periodic schedule, measuring truth rows sel = sigma_{(t mod l) + 1}.

    Args:
        truth: fields to measure and reconstruct, one column per step
        measurement_noise: add seeded N(0, rho) noise to the measurements (False for real data)
        store_estimates: keep the posterior coefficient estimate of every step
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if truth.T < steps:
        raise ValueError("truth has %d snapshots, %d steps requested" % (truth.T, steps))
    if truth.n != model.n:
        raise ValueError("truth has n=%d but the model has n=%d" % (truth.n, model.n))
    traj.check_range(model.n)

    rng = np.random.default_rng(seed)
    state = KfState.initial(model.m, sigma0)
    trace_series = np.empty(steps)
    posterior_series = np.empty(steps)
    recon = np.empty(steps)
    estimates = np.empty((steps, model.m)) if store_estimates else None
    std = math.sqrt(noise.rho)
    for t in range(steps):
        sel = traj.locations[t % traj.period_l]
        y = truth.data[sel, t]
        if measurement_noise:
            y = y + rng.normal(0.0, std, sel.size)
        try:
            state = kf_update(model, state, sel, y, noise.rho)
        except ConditioningError as e:
            raise ConditioningError("step %d: %s" % (t, e)) from e
        posterior_series[t] = state.trace
        field = model.modes @ state.estimate
        recon[t] = float(np.sum((field - truth.data[:, t]) ** 2)) / model.n
        if estimates is not None:
            estimates[t] = state.estimate
        state = kf_predict(model, state, noise.q)
        trace_series[t] = state.trace

    return KfRun(
        trace_series=trace_series,
        posterior_trace_series=posterior_series,
        recon_error_series=recon,
        estimate_series=estimates,
        dt=truth.dt,
        final_state=state,
    )


def _is_observable_pair(A: np.ndarray, C: np.ndarray) -> bool:
    m = A.shape[0]
    blocks, block = [], C
    for _ in range(m):
        blocks.append(block)
        block = block @ A
    return numerical_rank(la.svdvals(np.vstack(blocks))) == m


def _riccati_map(A, C, Q, R, sigma):
    S = C @ sigma @ C.T + R
    gain = A @ sigma @ C.T @ la.solve(S, np.eye(S.shape[0]), assume_a="pos")
    return symmetrize(A @ sigma @ A.T - gain @ C @ sigma @ A.T + Q)


def dare_iterate(
    A: np.ndarray,
    C: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100000,
) -> DareSolution:
    """
    Fixed point of Sigma = A Sigma A' - A Sigma C'(C Sigma C' + R)^-1 C Sigma A' + Q from Sigma = Q

    Raises:
        NonConvergenceError: max_iter reached before the relative step fell below tol
    """
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    A, C, Q, R = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (A, C, Q, R))
    if not _is_observable_pair(A, C):
        logger.warning("(A, C) is not observable; the fixed point may not exist")

    sigma = symmetrize(Q)
    step = math.inf
    for iteration in range(1, max_iter + 1):
        updated = _riccati_map(A, C, Q, R, sigma)
        step = la.norm(updated - sigma)
        scale = la.norm(sigma)
        sigma = updated
        if not np.all(np.isfinite(sigma)):
            raise NonConvergenceError("Riccati iteration diverged at step %d" % iteration, math.inf)
        if step < tol * scale:
            residual = float(la.norm(_riccati_map(A, C, Q, R, sigma) - sigma))
            logger.debug("DARE converged in %d iterations, residual %.3e", iteration, residual)
            return DareSolution(covariance=sigma, iterations=iteration, residual=residual)
    raise NonConvergenceError(
        "Riccati iteration did not converge in %d iterations (last step %.3e)" % (max_iter, step),
        float(step),
    )


def dare_trace_bounds(A: np.ndarray, C: np.ndarray, Q: np.ndarray, R: np.ndarray) -> DareBounds:
    """
    Upper and lower bounds on the trace of the DARE solution in terms of eigenvalues of A'A,
    Q and the information matrix C'R^-1C.

    A bound whose preconditions fail (information matrix or Q not positive definite) is nan
    and flagged inapplicable.
    """
    A, C, Q, R = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (A, C, Q, R))
    n = A.shape[0]
    info = symmetrize(C.T @ la.solve(R, C, assume_a="pos"))
    info_eigs = la.eigvalsh(info)
    q_eigs = la.eigvalsh(symmetrize(Q))
    ata_max = float(la.eigvalsh(symmetrize(A.T @ A))[-1])
    info_max, info_min = float(info_eigs[-1]), float(info_eigs[0])
    positive = info_min > 1e-12 * max(info_max, 1e-300) and q_eigs[0] > 0

    trace_q = float(np.sum(q_eigs))
    sqrt_trace_sq = float(np.sum(np.sqrt(np.maximum(q_eigs, 0.0)))) ** 2
    a1 = 1 - ata_max - float(q_eigs[-1]) * info_min
    a2 = n - float(np.sum(np.abs(la.eigvals(A)) ** 2)) - sqrt_trace_sq * info_max

    upper = lower = math.nan
    if positive:
        upper = 2 * trace_q / (a1 + math.sqrt(a1 ** 2 + 4 * info_min * trace_q / n))
        lower = 2 * sqrt_trace_sq / (a2 + math.sqrt(a2 ** 2 + 4 * n * info_max * sqrt_trace_sq))
    monotone = ata_max >= 1 - trace_q / (n * float(q_eigs[-1])) - 1e-12 if q_eigs[-1] > 0 else False
    return DareBounds(
        lower=lower,
        upper=upper,
        a1=a1,
        a2=a2,
        applicable_upper=bool(positive),
        applicable_lower=bool(positive),
        monotone_precondition=bool(monotone),
    )


def lift_system(model: RealBlockModel, traj: Trajectory) -> Tuple[np.ndarray, np.ndarray]:
    """
    Time-invariant lifting of a periodic schedule: (Lambda^l, observability matrix)
    """
    lifted = np.eye(model.m)
    for _ in range(traj.period_l):
        lifted = lifted @ model.dynamics
    return lifted, assemble(model, traj).matrix


def lifted_process_noise(model: RealBlockModel, period_l: int, q: float) -> np.ndarray:
    """
    Process noise accumulated over one cycle: sum over j < l of Lambda^j (qI) Lambda^j'
    """
    if period_l < 1:
        raise ValueError("period must be at least 1, got %d" % period_l)
    A = model.dynamics
    power = np.eye(model.m)
    total = np.zeros((model.m, model.m))
    for _ in range(period_l):
        total += q * power @ power.T
        power = A @ power
    return symmetrize(total)


def _undetectable_modes(model: RealBlockModel, traj: Trajectory) -> int:
    lifted, obs = lift_system(model, traj)
    count = 0
    for mu in la.eigvals(lifted):
        if abs(mu) < 1 - 1e-9:
            continue
        pencil = np.vstack([mu * np.eye(model.m) - lifted, obs.astype(complex)])
        if numerical_rank(la.svdvals(pencil)) < model.m:
            count += 1
    return count


def limiting_trace(
    model: RealBlockModel,
    traj: Trajectory,
    noise: NoiseSpec,
    sigma0: Union[float, np.ndarray] = DEFAULT_SIGMA0,
    tol: float = 1e-9,
    max_steps: int = 200000,
) -> float:
    """
    Mean predicted-covariance trace over one cycle of the periodic Riccati limit cycle.

    Only the covariance recursion runs, so the result does not depend on the length of any
    simulated record. Returns inf when a mode on or outside the unit circle is never seen.

    Raises:
        NonConvergenceError: max_steps reached before the cycle-start covariance settled
    """
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    traj.check_range(model.n)
    undetectable = _undetectable_modes(model, traj)
    if undetectable:
        logger.warning("%d non-decaying modes are never observed; the trace grows without bound", undetectable)
        return math.inf

    A = model.dynamics
    Q = noise.q * np.eye(model.m)
    rows = [model.modes[sel] for sel in traj.locations]
    sigma = KfState.initial(model.m, sigma0).covariance
    traces = np.empty(traj.period_l)
    change = math.inf
    steps = 0
    while steps < max_steps:
        start = sigma
        for t, C in enumerate(rows):
            if C.shape[0]:
                S = symmetrize(C @ sigma @ C.T + noise.rho * np.eye(C.shape[0]))
                gain = la.cho_solve(la.cho_factor(S), C @ sigma).T
                I_KC = np.eye(model.m) - gain @ C
                sigma = I_KC @ sigma @ I_KC.T + noise.rho * gain @ gain.T
            sigma = symmetrize(A @ sigma @ A.T + Q)
            traces[t] = np.trace(sigma)
        steps += traj.period_l
        if not np.all(np.isfinite(sigma)):
            raise NonConvergenceError("periodic Riccati recursion diverged at step %d" % steps, math.inf)
        change = la.norm(sigma - start)
        if change < tol * la.norm(sigma):
            logger.debug("limit cycle reached after %d steps", steps)
            return float(np.mean(traces))
    raise NonConvergenceError(
        "periodic Riccati recursion did not settle in %d steps (last change %.3e)" % (max_steps, change),
        float(change),
    )


def steady_state_trace(run: KfRun, period: int = 1) -> float:
    """
    Mean predicted-covariance trace over the last schedule period
    """
    period = max(1, min(period, run.steps))
    return float(np.mean(run.trace_series[-period:]))
