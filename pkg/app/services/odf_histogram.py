import logging
from dataclasses import dataclass

import numpy as np

from app.core.enums import AssignmentWeighting
from app.exceptions import InvalidArgumentException
from app.services.orientation_space import (
    OrientationGrid,
    check_unit,
    multiply,
    normalize,
)

logger = logging.getLogger(__name__)

COINCIDENCE_TOL = 1e-12
WEIGHT_EPS = 1e-12
SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class WeightedOrientationSet:
    """A texture: crystal orientations with positive volumes."""

    orientations: np.ndarray
    volumes: np.ndarray

    def __post_init__(self) -> None:
        orientations = check_unit(np.atleast_2d(np.asarray(self.orientations, float)))
        volumes = np.atleast_1d(np.asarray(self.volumes, dtype=float))
        if len(orientations) == 0:
            raise InvalidArgumentException("Texture must contain at least one crystal")
        if volumes.shape != (len(orientations),):
            raise InvalidArgumentException(
                "One volume per orientation required",
                orientations=len(orientations),
                volumes=int(volumes.size),
            )
        if np.any(volumes <= 0) or not np.all(np.isfinite(volumes)):
            raise InvalidArgumentException("Volumes must be positive and finite")
        object.__setattr__(self, "orientations", orientations)
        object.__setattr__(self, "volumes", volumes)

    @classmethod
    def equal_volumes(cls, orientations: np.ndarray) -> "WeightedOrientationSet":
        orientations = np.atleast_2d(orientations)
        return cls(orientations, np.full(len(orientations), 1.0 / len(orientations)))

    @property
    def size(self) -> int:
        return len(self.orientations)

    @property
    def total_volume(self) -> float:
        return float(self.volumes.sum())

    @property
    def fractions(self) -> np.ndarray:
        return self.volumes / self.total_volume

    def crystal_symmetric(self, g: np.ndarray) -> "WeightedOrientationSet":
        """Right-compose every orientation with g (same texture, other representatives)."""
        return WeightedOrientationSet(
            normalize(multiply(self.orientations, g)), self.volumes
        )

    def rotated(self, r: np.ndarray) -> "WeightedOrientationSet":
        """Rigidly rotate the sample by r (left-composition)."""
        return WeightedOrientationSet(
            normalize(multiply(r, self.orientations)), self.volumes
        )


@dataclass(frozen=True, eq=False)
class Histogram:
    bins: np.ndarray
    grid_id: str

    def __post_init__(self) -> None:
        bins = np.asarray(self.bins, dtype=float)
        if np.any(bins < 0):
            raise InvalidArgumentException("Histogram bins must be nonnegative")
        if abs(bins.sum() - 1.0) > SUM_TOL:
            raise InvalidArgumentException(
                "Histogram must sum to 1", total=float(bins.sum())
            )
        object.__setattr__(self, "bins", bins)

    @property
    def size(self) -> int:
        return len(self.bins)


def assignment_weights(
    distances: np.ndarray,
    weighting: AssignmentWeighting = AssignmentWeighting.INVERSE_DISTANCE,
) -> np.ndarray:
    """Normalized neighbor weights for rows of sorted neighbor distances."""
    distances = np.atleast_2d(distances)
    if weighting == AssignmentWeighting.INVERSE_DISTANCE:
        raw = 1.0 / (distances + WEIGHT_EPS)
    else:
        raw = distances.copy()
    weights = raw / raw.sum(axis=1, keepdims=True)

    coincident = distances[:, 0] < COINCIDENCE_TOL
    if np.any(coincident):
        weights[coincident] = 0.0
        weights[coincident, 0] = 1.0
    return weights


def soft_assign_many(
    grid: OrientationGrid,
    orientations: np.ndarray,
    k: int,
    weighting: AssignmentWeighting = AssignmentWeighting.INVERSE_DISTANCE,
) -> tuple[np.ndarray, np.ndarray]:
    ids, distances = grid.query(orientations, k)
    return ids, assignment_weights(distances, weighting)


def soft_assign(
    grid: OrientationGrid,
    h: np.ndarray,
    k: int,
    weighting: AssignmentWeighting = AssignmentWeighting.INVERSE_DISTANCE,
) -> dict[int, float]:
    """Sparse assignment of one orientation to its k nearest bins."""
    ids, weights = soft_assign_many(grid, np.asarray(h)[None, :], k, weighting)
    return {int(i): float(w) for i, w in zip(ids[0], weights[0]) if w > 0}


def build_histogram(
    grid: OrientationGrid,
    texture: WeightedOrientationSet,
    k: int,
    weighting: AssignmentWeighting = AssignmentWeighting.INVERSE_DISTANCE,
) -> Histogram:
    ids, weights = soft_assign_many(grid, texture.orientations, k, weighting)
    mass = weights * texture.fractions[:, None]
    bins = np.bincount(ids.ravel(), weights=mass.ravel(), minlength=grid.size)
    return Histogram(bins / bins.sum(), grid.grid_id)


def chi_square_distance(a: Histogram, b: Histogram) -> float:
    if a.grid_id != b.grid_id or a.size != b.size:
        raise InvalidArgumentException(
            "Histograms belong to different grids", left=a.grid_id, right=b.grid_id
        )
    total = a.bins + b.bins
    occupied = total > 0
    diff = a.bins[occupied] - b.bins[occupied]
    return float(np.sum(diff * diff / total[occupied]))


def histogram_texture(grid: OrientationGrid, histogram: Histogram) -> WeightedOrientationSet:
    """Bin centers weighted by bin mass; the texture a histogram stands for."""
    occupied = histogram.bins > 0
    return WeightedOrientationSet(
        grid.orientations[occupied], histogram.bins[occupied]
    )


class HistogramDistance:
    """Texture distance d(σ, σ') on a fixed grid and soft-assignment setting."""

    def __init__(
        self,
        grid: OrientationGrid,
        k: int,
        weighting: AssignmentWeighting = AssignmentWeighting.INVERSE_DISTANCE,
    ) -> None:
        if not 1 <= k <= grid.size:
            raise InvalidArgumentException("k out of range", k=k, grid_size=grid.size)
        self.grid = grid
        self.k = k
        self.weighting = weighting

    def histogram(self, texture: WeightedOrientationSet) -> Histogram:
        return build_histogram(self.grid, texture, self.k, self.weighting)

    def distance(self, a: WeightedOrientationSet, b: WeightedOrientationSet) -> float:
        return chi_square_distance(self.histogram(a), self.histogram(b))
