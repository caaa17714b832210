"""Quaternion algebra, cubic crystal symmetry and near-uniform orientation grids.

Quaternions are stored scalar-first ``(w, x, y, z)`` as float arrays of shape
``(..., 4)``. An orientation ``q`` maps crystal coordinates to sample
coordinates, so crystal symmetry acts by right-composition ``q * g`` and a
sample rotation ``r`` acts by left-composition ``r * q``.
"""

import itertools
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from app.exceptions import InvalidArgumentException

logger = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-6
TIE_TOL = 1e-12
POOL_FACTOR = 64
POOL_CAP = 2**17
RELAXATION_SWEEPS = 50


def normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InvalidArgumentException("Zero quaternion cannot be normalized")
    return q / norm


def check_unit(q: np.ndarray, name: str = "q") -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != 4:
        raise InvalidArgumentException(
            f"{name} must have 4 components", shape=list(q.shape)
        )
    deviation = np.abs(np.linalg.norm(q, axis=-1) - 1.0)
    if np.any(deviation > UNIT_NORM_TOL):
        raise InvalidArgumentException(
            f"{name} is not a unit quaternion", max_deviation=float(np.max(deviation))
        )
    return q


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def to_matrix(q: np.ndarray) -> np.ndarray:
    """Active rotation matrices, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    flat = q.reshape(-1, 4)
    matrices = Rotation.from_quat(flat[:, [1, 2, 3, 0]]).as_matrix()
    return matrices.reshape(q.shape[:-1] + (3, 3))


def from_matrix(matrices: np.ndarray) -> np.ndarray:
    """Quaternions (w >= 0) of rotation matrices, shape (..., 4)."""
    matrices = np.asarray(matrices, dtype=float)
    flat = matrices.reshape(-1, 3, 3)
    xyzw = Rotation.from_matrix(flat).as_quat()
    q = xyzw[:, [3, 0, 1, 2]]
    q = np.where(q[:, :1] < 0, -q, q)
    return q.reshape(matrices.shape[:-2] + (4,))


def random_quaternions(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed unit quaternions (normalized 4-D Gaussian samples)."""
    return normalize(rng.standard_normal((n, 4)))


@lru_cache(maxsize=1)
def _symmetry_elements() -> np.ndarray:
    matrices = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for row, (col, sign) in enumerate(zip(perm, signs)):
                m[row, col] = sign
            if np.linalg.det(m) > 0:
                matrices.append(m)
    quats = from_matrix(np.array(matrices))
    # snap to the exact component values 0, 1/2, 1/sqrt(2), 1
    for exact in (0.0, 0.5, np.sqrt(0.5), 1.0):
        hit = np.isclose(np.abs(quats), exact, atol=1e-9)
        quats[hit] = np.sign(quats[hit]) * exact
    quats.setflags(write=False)
    return quats


def cubic_symmetry() -> np.ndarray:
    """The 24 proper rotations of the octahedral group, identity first."""
    return _symmetry_elements()


def quat_metric(q1: np.ndarray, q2: np.ndarray) -> np.ndarray | float:
    """Sign-invariant chordal distance min(|q1 - q2|, |q1 + q2|)."""
    q1 = check_unit(q1, "q1")
    q2 = check_unit(q2, "q2")
    return _chordal(q1, q2)


def _chordal(q1: np.ndarray, q2: np.ndarray) -> np.ndarray | float:
    minus = np.linalg.norm(q1 - q2, axis=-1)
    plus = np.linalg.norm(q1 + q2, axis=-1)
    result = np.minimum(minus, plus)
    return float(result) if np.ndim(result) == 0 else result


def cubic_metric(q1: np.ndarray, q2: np.ndarray) -> np.ndarray | float:
    """Symmetrized distance: minimum of the chordal metric over q2 * g."""
    q1 = check_unit(q1, "q1")
    q2 = check_unit(q2, "q2")
    return _cubic(q1, q2)


def _cubic(q1: np.ndarray, q2: np.ndarray) -> np.ndarray | float:
    equivalents = multiply(np.asarray(q2)[..., None, :], cubic_symmetry())
    distances = _chordal(np.asarray(q1)[..., None, :], equivalents)
    result = np.min(distances, axis=-1)
    return float(result) if np.ndim(result) == 0 else result


def to_fundamental_zone(q: np.ndarray) -> np.ndarray:
    """Symmetry-equivalent representative with maximal |w| and w >= 0.

    Ties within 1e-12 are broken by the lexicographically largest (w, x, y, z).
    Accepts a single quaternion or a stack of shape (n, 4).
    """
    q = check_unit(q)
    single = q.ndim == 1
    batch = q.reshape(-1, 4)
    candidates = multiply(batch[:, None, :], cubic_symmetry())
    candidates = np.where(candidates[..., :1] < 0, -candidates, candidates)

    mask = np.ones(candidates.shape[:2], dtype=bool)
    for component in range(4):
        values = np.where(mask, candidates[..., component], -np.inf)
        best = values.max(axis=1, keepdims=True)
        mask &= candidates[..., component] >= best - TIE_TOL
    choice = np.argmax(mask, axis=1)
    result = candidates[np.arange(len(batch)), choice]
    return result[0] if single else result


def expand_by_symmetry(orientations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All 48 symmetry-and-sign copies of each orientation with their owner ids."""
    orientations = np.asarray(orientations, dtype=float)
    copies = multiply(orientations[:, None, :], cubic_symmetry())
    copies = np.concatenate([copies, -copies], axis=1)
    owners = np.repeat(np.arange(len(orientations)), copies.shape[1])
    return copies.reshape(-1, 4), owners


@dataclass(frozen=True, eq=False)
class OrientationGrid:
    orientations: np.ndarray
    seed: int
    nn_distances: np.ndarray = field(repr=False)
    _tree: cKDTree = field(repr=False)
    _owners: np.ndarray = field(repr=False)

    @classmethod
    def from_orientations(cls, orientations: np.ndarray, seed: int) -> "OrientationGrid":
        orientations = to_fundamental_zone(normalize(np.atleast_2d(orientations)))
        orientations.setflags(write=False)
        tree, owners = _build_index(orientations)
        nn = _nearest_other_distances(tree, owners, orientations)
        return cls(orientations, seed, nn, tree, owners)

    @property
    def size(self) -> int:
        return len(self.orientations)

    @property
    def grid_id(self) -> str:
        return f"J{self.size}-seed{self.seed}"

    @property
    def cv(self) -> float:
        """Coefficient of variation of nearest-neighbor distances (0 for J = 1)."""
        if len(self.nn_distances) == 0:
            return 0.0
        return float(np.std(self.nn_distances) / np.mean(self.nn_distances))

    def query(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest bins for each row of q, sorted by (distance, bin id)."""
        if not 1 <= k <= self.size:
            raise InvalidArgumentException(
                "k out of range", k=k, grid_size=self.size
            )
        q = check_unit(np.atleast_2d(q))
        n_points = len(self._owners)
        fetch = min(n_points, 2 * k + 6)
        ids = np.empty((len(q), k), dtype=np.int64)
        while True:
            _, index = self._tree.query(q, k=fetch)
            index = np.asarray(index).reshape(len(q), fetch)
            owners = self._owners[index]
            complete = True
            for row in range(len(q)):
                _, first = np.unique(owners[row], return_index=True)
                if len(first) < k:
                    complete = False
                    break
                ids[row] = owners[row][np.sort(first)][:k]
            if complete or fetch == n_points:
                break
            fetch = min(n_points, fetch * 2)

        distances = _cubic(q[:, None, :], self.orientations[ids])
        distances = np.asarray(distances).reshape(len(q), k)
        order = np.lexsort((ids, distances), axis=-1)
        rows = np.arange(len(q))[:, None]
        return ids[rows, order], distances[rows, order]


def _build_index(orientations: np.ndarray) -> tuple[cKDTree, np.ndarray]:
    points, owners = expand_by_symmetry(orientations)
    return cKDTree(points), owners


def _nearest_other_distances(
    tree: cKDTree, owners: np.ndarray, orientations: np.ndarray
) -> np.ndarray:
    n = len(orientations)
    if n < 2:
        return np.empty(0)
    # every orientation has 48 copies; the nearest foreign copy sits within the first 96
    fetch = min(len(owners), 96)
    distances, index = tree.query(orientations, k=fetch)
    foreign = owners[index] != np.arange(n)[:, None]
    first = np.argmax(foreign, axis=1)
    return distances[np.arange(n), first]


def nearest_neighbors(
    grid: OrientationGrid, q: np.ndarray, k: int
) -> list[tuple[int, float]]:
    ids, distances = grid.query(np.asarray(q, dtype=float)[None, :], k)
    return [(int(i), float(d)) for i, d in zip(ids[0], distances[0])]


def _farthest_point_selection(pool: np.ndarray, count: int) -> np.ndarray:
    symmetry = cubic_symmetry()
    chosen = [0]
    # similarity = max |<p, c * g>| over chosen c; distance is monotone decreasing in it
    similarity = np.abs(pool @ multiply(pool[0], symmetry).T).max(axis=1)
    for _ in range(1, count):
        nxt = int(np.argmin(similarity))
        chosen.append(nxt)
        update = np.abs(pool @ multiply(pool[nxt], symmetry).T).max(axis=1)
        np.maximum(similarity, update, out=similarity)
    return pool[np.array(chosen)]


def _relax(points: np.ndarray, sweeps: int) -> tuple[np.ndarray, float]:
    """Neighbor repulsion; a sweep is kept only if the NN-distance CV does not grow."""
    n = len(points)
    tree, owners = _build_index(points)
    nn = _nearest_other_distances(tree, owners, points)
    cv = float(np.std(nn) / np.mean(nn))
    step = 0.25
    neighbors = min(len(owners), 12)
    for _ in range(sweeps):
        distances, index = tree.query(points, k=neighbors)
        foreign = owners[index] != np.arange(n)[:, None]
        spacing = float(np.mean(nn))
        copies = tree.data[index]
        offset = points[:, None, :] - copies
        safe = np.maximum(distances, 1e-15)
        scale = np.where(
            foreign & (distances > 0), (spacing / safe) ** 2 / safe, 0.0
        )
        push = np.sum(offset * scale[..., None], axis=1) / np.maximum(
            foreign.sum(axis=1), 1
        )[:, None]
        push -= np.sum(push * points, axis=1, keepdims=True) * points
        push_norm = np.linalg.norm(push, axis=1, keepdims=True)
        push = np.where(
            push_norm > 0, push / np.maximum(push_norm, 1e-15), 0.0
        ) * np.minimum(push_norm, 1.0)
        candidate = to_fundamental_zone(normalize(points + step * spacing * push))

        cand_tree, cand_owners = _build_index(candidate)
        cand_nn = _nearest_other_distances(cand_tree, cand_owners, candidate)
        cand_cv = float(np.std(cand_nn) / np.mean(cand_nn))
        if cand_cv <= cv:
            points, tree, owners, nn, cv = (
                candidate,
                cand_tree,
                cand_owners,
                cand_nn,
                cand_cv,
            )
        else:
            step *= 0.5
    return points, cv


def sample_uniform_grid(J: int, seed: int) -> OrientationGrid:
    """Near-uniform fundamental-zone grid: Haar oversample, farthest point, repulsion."""
    pool_size = min(POOL_FACTOR * J, POOL_CAP)
    if J < 1 or J > pool_size:
        raise InvalidArgumentException(
            "Grid size outside supported range", J=J, pool_size=pool_size
        )
    rng = np.random.default_rng(seed)
    pool = to_fundamental_zone(random_quaternions(pool_size, rng))
    points = _farthest_point_selection(pool, J)
    if J > 1:
        points, cv = _relax(points, RELAXATION_SWEEPS)
        logger.info(
            "Orientation grid generated J=%s seed=%s cv=%.4f",
            J,
            seed,
            cv,
            extra={"J": J, "seed": seed, "cv": cv},
        )
    return OrientationGrid.from_orientations(points, seed)


@lru_cache(maxsize=16)
def cached_uniform_grid(J: int, seed: int) -> OrientationGrid:
    return sample_uniform_grid(J, seed)
