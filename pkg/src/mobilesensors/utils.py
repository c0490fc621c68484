import hashlib
import json
import os
import tempfile
from typing import Any, Optional, Union

import numpy as np

# relative singular value cutoff used for every numerical rank decision
RANK_TOL = 1e-10

# below this relative size the smallest singular value counts as zero for conditioning
COND_TOL = 1e-12

PathLike = Union[str, os.PathLike]


class MobileSensorsError(RuntimeError):
    """
    Base class for every failure raised by the package
    """

    exit_code = 1


class ConfigError(MobileSensorsError):
    exit_code = 2


class NumericalError(MobileSensorsError):
    exit_code = 3


class DegenerateRankError(NumericalError):
    def __init__(self, message: str, achievable_rank: int):
        super().__init__(message)
        self.achievable_rank = achievable_rank


class ConditioningError(NumericalError):
    pass


class NonConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class BlowUpError(NumericalError):
    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class StructureError(NumericalError):
    pass


class InfeasiblePlanError(MobileSensorsError):
    exit_code = 4

    def __init__(self, message: str, sensor: int = -1, step: int = -1, partial: Any = None):
        super().__init__(message)
        self.sensor = sensor
        self.step = step
        self.partial = partial


class FormatError(MobileSensorsError):
    exit_code = 2

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = "%s (at offset %d)" % (message, offset)
        super().__init__(message)
        self.offset = offset


def numerical_rank(singular_values: np.ndarray, tol: float = RANK_TOL) -> int:
    """
    Count singular values above a relative cutoff of the largest one
    """
    if singular_values.size == 0 or singular_values[0] <= 0:
        return 0
    return int(np.sum(singular_values > tol * singular_values[0]))


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def derive_seed(seed: int, key: str) -> int:
    """
    Combine a base seed with a hash of a sweep point key (seed XOR hash)
    """
    digest = hashlib.sha256(key.encode("utf-8")).hexdigest()
    return (int(seed) ^ int(digest[:8], 16)) & 0x7FFFFFFF


def sha256_file(path: PathLike) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            sha.update(block)
    return sha.hexdigest()


def atomic_write(path: PathLike, data: Union[bytes, str]) -> None:
    """
    Write to a temporary file in the destination directory then rename over the target
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
