import os

import numpy as np
from mobilesensors.model import RealBlockModel, ReducedModel, build_reduced_model, to_real_blocks


def data_file_path(filepath):
    return os.path.join(os.path.dirname(__file__), 'data', filepath)


def random_reduced_model(n: int, m: int, seed: int, modulus=(0.5, 0.99)) -> ReducedModel:
    """
    Generic random model: m // 2 conjugate pairs (plus one real mode when m is odd) with random
    complex modes and eigenvalue moduli drawn from the given interval
    """
    rng = np.random.default_rng(seed)
    eigenvalues, modes = [], []
    for _ in range(m // 2):
        lam = rng.uniform(*modulus) * np.exp(1j * rng.uniform(0.1, 3.0))
        column = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        eigenvalues += [lam, np.conj(lam)]
        modes += [column, np.conj(column)]
    if m % 2:
        eigenvalues.append(rng.uniform(*modulus) * rng.choice([-1.0, 1.0]))
        modes.append(rng.standard_normal(n).astype(complex))
    return build_reduced_model(np.array(eigenvalues), np.column_stack(modes))


def random_real_model(n: int, m: int, seed: int, modulus=(0.5, 0.99)) -> RealBlockModel:
    return to_real_blocks(random_reduced_model(n, m, seed, modulus))


def scalar_model(a: float = 0.5, c: float = 1.0) -> RealBlockModel:
    return RealBlockModel(dynamics=np.array([[a]]), modes=np.array([[c]]))
