import json
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la

from .utils import (
    DegenerateRankError,
    NumericalError,
    PathLike,
    StructureError,
    atomic_write,
    numerical_rank,
)

logger = logging.getLogger(__name__)

# conjugate structure markers, one per column of a reduced model
REAL = "real"
LEAD = "lead"
FOLLOW = "follow"
PAIR_MARKERS = (REAL, LEAD, FOLLOW)

PAIR_TOL = 1e-10
REALNESS_TOL = 1e-8
EIGVEC_COND_LIMIT = 1e12
DMD_RANK_TOL = 1e-12


@dataclass(frozen=True)
class NoiseSpec:
    """
    Disturbance covariance Q = qI (reduced coordinates) and measurement covariance R = rho I
    """

    q: float = 0.0
    rho: float = 1.0

    def __post_init__(self):
        if not self.q >= 0:
            raise ValueError("disturbance variance q must be nonnegative, got %r" % self.q)
        if not self.rho > 0:
            raise ValueError("measurement variance rho must be positive, got %r" % self.rho)


@dataclass(frozen=True)
class FullModel:
    A: np.ndarray
    q: float = 0.0
    rho: float = 1.0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise ValueError("A must be a nonempty square matrix, got shape %s" % (A.shape,))
        object.__setattr__(self, "A", A)
        NoiseSpec(self.q, self.rho)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.q, self.rho)


def check_pair_map(eigenvalues: np.ndarray, modes: np.ndarray, pair_map: Sequence[str]) -> None:
    """
    Verify that columns marked as conjugate pairs are adjacent conjugates and that real
    columns are real

    Raises:
        StructureError: on any inconsistency
    """
    m = len(eigenvalues)
    if len(pair_map) != m:
        raise StructureError("pair map has %d entries for %d eigenvalues" % (len(pair_map), m))
    i = 0
    while i < m:
        marker = pair_map[i]
        lam = eigenvalues[i]
        column = modes[:, i]
        scale = max(1.0, abs(lam))
        if marker == REAL:
            if abs(lam.imag) > PAIR_TOL * scale:
                raise StructureError("column %d is marked real but eigenvalue is %r" % (i, lam))
            if np.linalg.norm(column.imag) > REALNESS_TOL * max(np.linalg.norm(column), 1e-300):
                raise StructureError("column %d is marked real but its mode is complex" % i)
            i += 1
        elif marker == LEAD:
            if i + 1 >= m or pair_map[i + 1] != FOLLOW:
                raise StructureError("pair lead at column %d has no adjacent follower" % i)
            partner = eigenvalues[i + 1]
            if abs(partner - np.conj(lam)) > PAIR_TOL * scale:
                raise StructureError(
                    "columns %d and %d are not a conjugate eigenvalue pair" % (i, i + 1)
                )
            if lam.imag <= 0:
                raise StructureError("pair lead at column %d must have positive imaginary part" % i)
            mismatch = np.linalg.norm(modes[:, i + 1] - np.conj(column))
            if mismatch > PAIR_TOL * max(np.linalg.norm(column), 1e-300):
                raise StructureError("mode columns %d and %d are not conjugates" % (i, i + 1))
            i += 2
        else:
            raise StructureError("unexpected marker %r at column %d" % (marker, i))


@dataclass(frozen=True)
class ReducedModel:
    """
    Diagonal complex dynamics (eigenvalues) with a complex mode basis

    Args:
        eigenvalues: length-m complex dynamics diagonal
        modes: n x m complex mode matrix
        pair_map: one of 'real', 'lead', 'follow' per column
        amplitudes: optional initial coefficients (DMD amplitudes)
    """

    eigenvalues: np.ndarray
    modes: np.ndarray
    pair_map: Tuple[str, ...]
    amplitudes: Optional[np.ndarray] = None

    def __post_init__(self):
        eigenvalues = np.asarray(self.eigenvalues, dtype=complex).reshape(-1)
        modes = np.asarray(self.modes, dtype=complex)
        if modes.ndim == 1:
            modes = modes[:, None]
        if modes.ndim != 2 or modes.shape[1] != eigenvalues.size:
            raise ValueError(
                "modes shape %s does not match %d eigenvalues" % (modes.shape, eigenvalues.size)
            )
        if eigenvalues.size < 1 or eigenvalues.size > modes.shape[0]:
            raise ValueError("rank %d is not in [1, n=%d]" % (eigenvalues.size, modes.shape[0]))
        object.__setattr__(self, "eigenvalues", eigenvalues)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "pair_map", tuple(self.pair_map))
        if self.amplitudes is not None:
            amplitudes = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
            if amplitudes.size != eigenvalues.size:
                raise ValueError("amplitudes must have one entry per mode")
            object.__setattr__(self, "amplitudes", amplitudes)
        check_pair_map(self.eigenvalues, self.modes, self.pair_map)

    @property
    def n(self) -> int:
        return self.modes.shape[0]

    @property
    def m(self) -> int:
        return self.eigenvalues.size


@dataclass(frozen=True)
class RealBlockModel:
    """
    Real block-diagonal form of a reduced model.

    A conjugate pair lam = a + ib with lead mode psi becomes the block [[a, -b], [b, a]] acting
    on coefficients (2 Re c, 2 Im c), with real mode columns (Re psi, -Im psi).
    """

    dynamics: np.ndarray
    modes: np.ndarray
    block_map: Tuple[Tuple[int, ...], ...] = ()
    eigenvalues: Optional[np.ndarray] = None

    def __post_init__(self):
        dynamics = np.atleast_2d(np.asarray(self.dynamics, dtype=float))
        modes = np.asarray(self.modes, dtype=float)
        if modes.ndim == 1:
            modes = modes[:, None]
        m = dynamics.shape[0]
        if dynamics.shape != (m, m) or modes.shape[1] != m:
            raise ValueError(
                "dynamics %s and modes %s are inconsistent" % (dynamics.shape, modes.shape)
            )
        object.__setattr__(self, "dynamics", dynamics)
        object.__setattr__(self, "modes", modes)
        if not self.block_map:
            object.__setattr__(self, "block_map", tuple((i,) for i in range(m)))
        if self.eigenvalues is None:
            object.__setattr__(self, "eigenvalues", la.eigvals(dynamics))

    @property
    def n(self) -> int:
        return self.modes.shape[0]

    @property
    def m(self) -> int:
        return self.dynamics.shape[0]


@dataclass(frozen=True)
class SnapshotMatrix:
    """
    Field snapshots as columns, optionally with the coefficient trajectory that generated them
    """

    data: np.ndarray
    dt: float = 1.0
    geometry: Optional[object] = None
    states: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2 or data.shape[1] < 1:
            raise ValueError("snapshot data must be an n x T matrix")
        if not np.all(np.isfinite(data)):
            raise ValueError("snapshot data contains non-finite entries")
        if not self.dt > 0:
            raise ValueError("sampling interval must be positive")
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]


def _normalize_column(column: np.ndarray) -> Tuple[np.ndarray, complex]:
    """
    Scale a column to unit norm with its largest entry real and positive; returns the scale used
    """
    norm = np.linalg.norm(column)
    if norm == 0:
        raise NumericalError("zero mode column cannot be normalized")
    pivot = column[int(np.argmax(np.abs(column)))]
    scale = norm * pivot / abs(pivot)
    normalized = column / scale
    return normalized, scale


def _spectral_units(eigenvalues: np.ndarray) -> List[Tuple[int, ...]]:
    """
    Group eigenvalue indices into real singletons and (positive-imag, negative-imag) pairs
    """
    units: List[Tuple[int, ...]] = []
    negatives = []
    positives = []
    for i, lam in enumerate(eigenvalues):
        if abs(lam.imag) <= PAIR_TOL * max(1.0, abs(lam)):
            units.append((i,))
        elif lam.imag > 0:
            positives.append(i)
        else:
            negatives.append(i)

    if len(positives) != len(negatives):
        raise NumericalError("spectrum is not closed under conjugation")
    for i in positives:
        target = np.conj(eigenvalues[i])
        distances = [abs(eigenvalues[j] - target) for j in negatives]
        best = int(np.argmin(distances))
        if distances[best] > 1e-8 * max(1.0, abs(target)):
            raise NumericalError("eigenvalue %r has no conjugate partner" % eigenvalues[i])
        units.append((i, negatives.pop(best)))
    return units


def build_reduced_model(
    eigenvalues: np.ndarray,
    modes: np.ndarray,
    amplitudes: Optional[np.ndarray] = None,
    rank: Optional[int] = None,
) -> ReducedModel:
    """
    Order a real-conjugate spectrum canonically and build a ReducedModel from it.

    Ordering is descending modulus, ties by descending argument, with each conjugate pair
    adjacent and its positive-imaginary member first. Columns are normalized to unit norm with
    the scaling folded into the amplitudes. When rank is given the leading units are kept
    without splitting a conjugate pair.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=complex)
    modes = np.asarray(modes, dtype=complex)
    units = _spectral_units(eigenvalues)
    units.sort(key=lambda u: (-abs(eigenvalues[u[0]]), -np.angle(eigenvalues[u[0]])))

    if rank is not None:
        kept, count = [], 0
        for unit in units:
            if count + len(unit) > rank:
                if len(unit) == 2 and count + 1 == rank:
                    logger.warning(
                        "rank %d would split a conjugate pair; truncating to rank %d",
                        rank,
                        count,
                    )
                break
            kept.append(unit)
            count += len(unit)
        if count == 0:
            raise ValueError(
                "rank %d cannot be met without splitting the leading conjugate pair" % rank
            )
        units = kept

    new_eigs, new_modes, new_amps, pair_map = [], [], [], []
    for unit in units:
        lam = eigenvalues[unit[0]]
        column, scale = _normalize_column(modes[:, unit[0]])
        amp = None if amplitudes is None else amplitudes[unit[0]] * scale
        if len(unit) == 1:
            new_eigs.append(complex(lam.real, 0.0))
            new_modes.append(column.real.astype(complex))
            new_amps.append(0j if amp is None else complex(amp.real, 0.0))
            pair_map.append(REAL)
        else:
            new_eigs.extend([lam, np.conj(lam)])
            new_modes.extend([column, np.conj(column)])
            amp = 0j if amp is None else amp
            new_amps.extend([amp, np.conj(amp)])
            pair_map.extend([LEAD, FOLLOW])

    return ReducedModel(
        eigenvalues=np.array(new_eigs),
        modes=np.column_stack(new_modes),
        pair_map=tuple(pair_map),
        amplitudes=None if amplitudes is None else np.array(new_amps),
    )


def spectral_truncate(full: FullModel, m: int) -> ReducedModel:
    """
    Keep the m eigenvalues of largest modulus of a known dynamics matrix and their eigenvectors

    Raises:
        ValueError: m outside [1, n]
        NumericalError: A is not (numerically) diagonalizable
    """
    if m < 1 or m > full.n:
        raise ValueError("rank must lie in [1, %d], got %d" % (full.n, m))
    eigenvalues, vectors = la.eig(full.A)
    cond = np.linalg.cond(vectors)
    if not np.isfinite(cond) or cond >= EIGVEC_COND_LIMIT:
        raise NumericalError(
            "A is not diagonalizable: eigenvector matrix condition number %.3e" % cond
        )
    return build_reduced_model(eigenvalues, vectors, rank=m)


def fit_dmd(snaps: SnapshotMatrix, m: int) -> ReducedModel:
    """
    Exact DMD at SVD rank m with unit-norm modes and amplitudes fit to the first snapshot

    Raises:
        DegenerateRankError: the shifted snapshot matrix has rank below m
    """
    if m < 1:
        raise ValueError("rank must be at least 1, got %d" % m)
    if snaps.T < 2:
        raise ValueError("DMD needs at least two snapshots")
    X1 = snaps.data[:, :-1]
    X2 = snaps.data[:, 1:]
    U, s, Vh = la.svd(X1, full_matrices=False)
    achievable = numerical_rank(s, DMD_RANK_TOL)
    if achievable < m:
        raise DegenerateRankError(
            "snapshot data supports rank %d, requested %d" % (achievable, m), achievable
        )
    U, s, V = U[:, :m], s[:m], Vh[:m].conj().T

    B = X2 @ V / s
    a_tilde = U.T @ B
    eigenvalues, W = la.eig(a_tilde)
    modes = B @ W

    # exact modes vanish for zero eigenvalues; use the projected mode there
    norms = np.linalg.norm(modes, axis=0)
    vanishing = norms <= 1e-12 * max(norms.max(), 1e-300)
    if np.any(vanishing):
        modes[:, vanishing] = (U @ W)[:, vanishing]

    amplitudes = np.linalg.lstsq(modes, snaps.data[:, 0].astype(complex), rcond=None)[0]
    return build_reduced_model(eigenvalues, modes, amplitudes=amplitudes)


def to_real_blocks(model: ReducedModel) -> RealBlockModel:
    """
    Real block-diagonal form with rotation-scaling blocks [[a, -b], [b, a]] for pairs a +/- ib

    Raises:
        StructureError: the pair map is inconsistent
    """
    check_pair_map(model.eigenvalues, model.modes, model.pair_map)
    m = model.m
    dynamics = np.zeros((m, m))
    modes = np.zeros((model.n, m))
    block_map = []
    i = 0
    while i < m:
        lam = model.eigenvalues[i]
        column = model.modes[:, i]
        if model.pair_map[i] == REAL:
            dynamics[i, i] = lam.real
            modes[:, i] = column.real
            block_map.append((i,))
            i += 1
        else:
            a, b = lam.real, lam.imag
            dynamics[i : i + 2, i : i + 2] = [[a, -b], [b, a]]
            modes[:, i] = column.real
            modes[:, i + 1] = -column.imag
            block_map.append((i, i + 1))
            i += 2
    return RealBlockModel(
        dynamics=dynamics,
        modes=modes,
        block_map=tuple(block_map),
        eigenvalues=model.eigenvalues.copy(),
    )


def to_real_coefficients(model: ReducedModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    xi = np.empty(model.m)
    for i, marker in enumerate(model.pair_map):
        if marker == REAL:
            xi[i] = z[i].real
        elif marker == LEAD:
            xi[i] = 2 * z[i].real
            xi[i + 1] = 2 * z[i].imag
    return xi


def to_complex_coefficients(model: ReducedModel, xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    z = np.empty(model.m, dtype=complex)
    for i, marker in enumerate(model.pair_map):
        if marker == REAL:
            z[i] = xi[i]
        elif marker == LEAD:
            z[i] = 0.5 * (xi[i] + 1j * xi[i + 1])
            z[i + 1] = np.conj(z[i])
    return z


def is_conjugate_symmetric(model: ReducedModel, z: np.ndarray, tol: float = 1e-10) -> bool:
    z = np.asarray(z, dtype=complex)
    scale = max(np.linalg.norm(z), 1e-300)
    for i, marker in enumerate(model.pair_map):
        if marker == REAL and abs(z[i].imag) > tol * scale:
            return False
        if marker == LEAD and abs(z[i + 1] - np.conj(z[i])) > tol * scale:
            return False
    return True


def simulate(
    model: ReducedModel,
    z0: np.ndarray,
    steps: int,
    noise: NoiseSpec,
    seed: int,
    dt: float = 1.0,
) -> SnapshotMatrix:
    """
    Iterate z_{t+1} = Lambda z_t + w_t and emit the fields x_t = Re(Psi z_t) for t < steps.

    The disturbance is drawn as N(0, qI) in real-block coordinates and mapped to its
    conjugate-symmetric complex form.
    """
    z = np.asarray(z0, dtype=complex).reshape(-1)
    if z.size != model.m:
        raise ValueError("initial coefficients have length %d, model rank is %d" % (z.size, model.m))
    if not is_conjugate_symmetric(model, z):
        raise ValueError("initial coefficients are not conjugate-symmetric")
    if steps < 1:
        raise ValueError("steps must be at least 1")

    rng = np.random.default_rng(seed)
    states = np.empty((model.m, steps), dtype=complex)
    data = np.empty((model.n, steps))
    std = np.sqrt(noise.q)
    for t in range(steps):
        states[:, t] = z
        data[:, t] = (model.modes @ z).real
        z = model.eigenvalues * z
        if noise.q > 0:
            z = z + to_complex_coefficients(model, rng.normal(0.0, std, model.m))
    return SnapshotMatrix(data=data, dt=dt, states=states)


def reconstruct(model: RealBlockModel, sel: Sequence[int], y: np.ndarray) -> np.ndarray:
    """
    Least-squares field estimate x = Psi (C Psi)^+ y from point measurements at sel
    """
    C_psi = model.modes[np.asarray(sel, dtype=int)]
    return model.modes @ (la.pinv(C_psi) @ np.asarray(y, dtype=float))


def nyquist_period(model: ReducedModel) -> float:
    """
    Sampling steps in half a period of the fastest oscillating mode (inf if nothing oscillates)
    """
    fastest = float(np.max(np.abs(np.angle(model.eigenvalues))))
    if fastest == 0:
        return float("inf")
    return float(np.pi / fastest)


def model_to_dict(model: ReducedModel) -> dict:
    doc = {
        "n": model.n,
        "m": model.m,
        "eigenvalues": [[float(v.real), float(v.imag)] for v in model.eigenvalues],
        "modes": [[float(v.real), float(v.imag)] for v in model.modes.reshape(-1)],
        "pair_map": list(model.pair_map),
    }
    if model.amplitudes is not None:
        doc["amplitudes"] = [[float(v.real), float(v.imag)] for v in model.amplitudes]
    return doc


def model_from_dict(doc: dict) -> ReducedModel:
    def as_complex(pairs):
        values = np.array(pairs, dtype=float).reshape(-1, 2)
        return values[:, 0] + 1j * values[:, 1]

    n, m = int(doc["n"]), int(doc["m"])
    amplitudes = doc.get("amplitudes")
    return ReducedModel(
        eigenvalues=as_complex(doc["eigenvalues"]),
        modes=as_complex(doc["modes"]).reshape(n, m),
        pair_map=tuple(doc["pair_map"]),
        amplitudes=None if amplitudes is None else as_complex(amplitudes),
    )


def save_model(model: ReducedModel, path: PathLike) -> None:
    atomic_write(path, json.dumps(model_to_dict(model)))


def load_model(path: PathLike) -> ReducedModel:
    with open(path, encoding="utf-8") as f:
        return model_from_dict(json.load(f))
