import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

LINE = "line"
GRID2D = "grid2d"
GRAPH = "graph"

# slack on distance comparisons so that exact lattice moves are never rejected by rounding
DISTANCE_EPS = 1e-9


class Geometry:
    """
    Spatial layout of the n field indices, used for motion constraints and output coordinates.

    Grid indices are row-major. Line and grid distances are Euclidean in grid units with
    optional periodic wrap; graph distances are unweighted shortest-path hop counts, infinite
    between components.
    """

    def __init__(
        self,
        kind: str,
        n: int,
        coords: np.ndarray,
        shape: Optional[Tuple[int, int]] = None,
        periodic: Tuple[bool, bool] = (False, False),
        adjacency: Optional[Sequence[Sequence[int]]] = None,
    ):
        if kind not in (LINE, GRID2D, GRAPH):
            raise ValueError("Unknown geometry kind: %s" % kind)
        if n < 1:
            raise ValueError("geometry needs at least one index")
        self.kind = kind
        self.n = n
        self.coords = np.asarray(coords, dtype=float).reshape(n, -1)
        self.shape = shape
        self.periodic = tuple(bool(p) for p in periodic)
        self.adjacency = None if adjacency is None else [sorted(set(a)) for a in adjacency]
        self._cache: Dict[int, np.ndarray] = {}

        if self.adjacency is not None:
            if len(self.adjacency) != n:
                raise ValueError("adjacency has %d entries for %d nodes" % (len(self.adjacency), n))
            for i, neighbors in enumerate(self.adjacency):
                for j in neighbors:
                    if not 0 <= j < n or j == i:
                        raise ValueError("invalid neighbor %d of node %d" % (j, i))
                    if i not in self.adjacency[j]:
                        raise ValueError("adjacency is not symmetric between %d and %d" % (i, j))
            self.valid = np.array([len(a) > 0 for a in self.adjacency])
            if n == 1:
                self.valid[:] = True
        else:
            self.valid = np.ones(n, dtype=bool)

    @classmethod
    def line(cls, n: int, periodic: bool = False) -> "Geometry":
        return cls(LINE, n, np.arange(n, dtype=float), shape=(1, n), periodic=(False, periodic))

    @classmethod
    def grid2d(
        cls, rows: int, cols: int, periodic: Union[bool, Tuple[bool, bool]] = False
    ) -> "Geometry":
        if isinstance(periodic, bool):
            periodic = (periodic, periodic)
        r, c = np.divmod(np.arange(rows * cols), cols)
        coords = np.column_stack([r, c]).astype(float)
        return cls(GRID2D, rows * cols, coords, shape=(rows, cols), periodic=periodic)

    @classmethod
    def graph(
        cls,
        adjacency: Sequence[Sequence[int]],
        coords: Optional[np.ndarray] = None,
        shape: Optional[Tuple[int, int]] = None,
    ) -> "Geometry":
        n = len(adjacency)
        if coords is None:
            coords = np.column_stack([np.zeros(n), np.arange(n)])
        return cls(GRAPH, n, coords, shape=shape, adjacency=adjacency)

    def _euclidean_from(self, i: int) -> np.ndarray:
        if self.kind == LINE:
            delta = np.abs(self.coords[:, 0] - self.coords[i, 0])
            if self.periodic[1]:
                delta = np.minimum(delta, self.n - delta)
            return delta
        rows, cols = self.shape
        delta = np.abs(self.coords - self.coords[i])
        if self.periodic[0]:
            delta[:, 0] = np.minimum(delta[:, 0], rows - delta[:, 0])
        if self.periodic[1]:
            delta[:, 1] = np.minimum(delta[:, 1], cols - delta[:, 1])
        return np.sqrt(np.sum(delta ** 2, axis=1))

    def _hops_from(self, i: int) -> np.ndarray:
        heads = [j for neighbors in self.adjacency for j in neighbors]
        tails = [i for i, neighbors in enumerate(self.adjacency) for _ in neighbors]
        graph = csr_matrix((np.ones(len(heads)), (tails, heads)), shape=(self.n, self.n))
        return shortest_path(graph, directed=False, unweighted=True, indices=i)

    def distances_from(self, i: int) -> np.ndarray:
        """
        Distances from index i to every index (inf where unreachable)
        """
        if not 0 <= i < self.n:
            raise ValueError("index %d out of range for n=%d" % (i, self.n))
        if i not in self._cache:
            if self.kind == GRAPH:
                dist = self._hops_from(i)
            else:
                dist = self._euclidean_from(i)
            self._cache[i] = np.asarray(dist, dtype=float)
        return self._cache[i]

    def distance(self, i: int, j: int) -> float:
        return float(self.distances_from(i)[j])

    def grid_coords(self, i: int) -> Tuple[int, int]:
        row, col = self.coords[i][-2:] if self.coords.shape[1] >= 2 else (0, self.coords[i][0])
        return int(row), int(col)

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "n": self.n, "periodic": list(self.periodic)}
        if self.shape is not None:
            doc["shape"] = list(self.shape)
        if self.adjacency is not None:
            doc["valid"] = int(self.valid.sum())
            doc["edges"] = sum(len(a) for a in self.adjacency) // 2
        return doc


@dataclass(frozen=True)
class MotionConstraint:
    """
    Maximum distance a sensor moves in one sampling step (inf means unconstrained)
    """

    speed: float = math.inf

    def __post_init__(self):
        if not self.speed >= 0:
            raise ValueError("speed must be nonnegative, got %r" % self.speed)

    @classmethod
    def unconstrained(cls) -> "MotionConstraint":
        return cls(math.inf)

    @property
    def is_unconstrained(self) -> bool:
        return math.isinf(self.speed)

    def budget(self, steps: int) -> float:
        if self.is_unconstrained:
            return math.inf
        return steps * self.speed + DISTANCE_EPS
