import numpy as np
import pytest

from app.core.enums import AssignmentWeighting
from app.exceptions import InvalidArgumentException
from app.services.odf_histogram import (
    Histogram,
    HistogramDistance,
    WeightedOrientationSet,
    assignment_weights,
    build_histogram,
    chi_square_distance,
    histogram_texture,
    soft_assign,
)
from app.services.orientation_space import (
    OrientationGrid,
    cubic_symmetry,
    random_quaternions,
)
from tests.utils import TextureFactory


def axis_rotation(axis: int, angle: float) -> np.ndarray:
    q = np.zeros(4)
    q[0] = np.cos(angle / 2)
    q[1 + axis] = np.sin(angle / 2)
    return q


@pytest.mark.unit
class TestWeightedOrientationSet:
    def test_fractions_and_total_volume(self) -> None:
        texture = WeightedOrientationSet(
            np.tile([1.0, 0.0, 0.0, 0.0], (2, 1)), np.array([1.0, 3.0])
        )

        assert texture.total_volume == 4.0
        np.testing.assert_allclose(texture.fractions, [0.25, 0.75])

    def test_nonpositive_volume_rejected(self) -> None:
        with pytest.raises(InvalidArgumentException):
            WeightedOrientationSet(np.array([[1.0, 0.0, 0.0, 0.0]]), np.array([0.0]))

    def test_volume_count_must_match(self) -> None:
        with pytest.raises(InvalidArgumentException):
            WeightedOrientationSet(np.array([[1.0, 0.0, 0.0, 0.0]]), np.array([1.0, 1.0]))

    def test_empty_texture_rejected(self) -> None:
        with pytest.raises(InvalidArgumentException):
            WeightedOrientationSet(np.zeros((0, 4)), np.zeros(0))


@pytest.mark.unit
class TestSoftAssignment:
    def test_grid_point_gets_full_weight(self, small_grid: OrientationGrid) -> None:
        for k in (1, 3, 10):
            assert soft_assign(small_grid, small_grid.orientations[5], k) == {5: 1.0}

    def test_hard_assignment_picks_nearest_bin(
        self, small_grid: OrientationGrid, rng: np.random.Generator
    ) -> None:
        q = random_quaternions(1, rng)[0]
        nearest = int(small_grid.query(q, 1)[0][0, 0])

        assert soft_assign(small_grid, q, 1) == {nearest: 1.0}

    def test_equidistant_bins_share_weight_equally(self) -> None:
        angle = np.radians(20.0)
        grid = OrientationGrid.from_orientations(
            np.array([axis_rotation(axis, angle) for axis in range(3)]), seed=0
        )

        weights = soft_assign(grid, np.array([1.0, 0.0, 0.0, 0.0]), 3)

        assert sorted(weights) == [0, 1, 2]
        np.testing.assert_allclose(list(weights.values()), [1 / 3] * 3, atol=1e-12)

    def test_inverse_distance_weights_favor_near_bins(self) -> None:
        weights = assignment_weights(np.array([[0.1, 0.2, 0.4]]))

        np.testing.assert_allclose(weights.sum(), 1.0)
        np.testing.assert_allclose(weights[0], np.array([4.0, 2.0, 1.0]) / 7.0, rtol=1e-9)

    def test_proportional_variant_weights_by_distance(self) -> None:
        weights = assignment_weights(
            np.array([[0.1, 0.2, 0.3]]), AssignmentWeighting.PROPORTIONAL
        )

        np.testing.assert_allclose(weights[0], [1 / 6, 2 / 6, 3 / 6])


@pytest.mark.unit
class TestBuildHistogram:
    def test_single_orientation_at_bin_center_is_one_hot(
        self, small_grid: OrientationGrid
    ) -> None:
        texture = TextureFactory.create_single(small_grid.orientations[9])

        histogram = build_histogram(small_grid, texture, 3)

        expected = np.zeros(small_grid.size)
        expected[9] = 1.0
        np.testing.assert_allclose(histogram.bins, expected, atol=1e-12)
        assert histogram.grid_id == small_grid.grid_id

    def test_volume_weighted_average_of_assignments(
        self, small_grid: OrientationGrid
    ) -> None:
        texture = WeightedOrientationSet(
            small_grid.orientations[[2, 7]], np.array([1.0, 3.0])
        )

        bins = build_histogram(small_grid, texture, 3).bins

        assert bins[2] == pytest.approx(0.25)
        assert bins[7] == pytest.approx(0.75)

    @pytest.mark.parametrize("k", [1, 3, 25])
    def test_sums_to_one(self, small_grid: OrientationGrid, k: int) -> None:
        texture = TextureFactory.create_weighted(n=40, seed=k)

        histogram = build_histogram(small_grid, texture, k)

        assert histogram.bins.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(histogram.bins >= 0)
        assert histogram.size == small_grid.size

    def test_uniform_texture_spreads_mass(self, small_grid: OrientationGrid) -> None:
        texture = TextureFactory.create_random(n=2000, seed=3)

        histogram = build_histogram(small_grid, texture, 3)

        assert histogram.bins.max() < 10.0 / small_grid.size

    def test_invariant_under_crystal_symmetry(
        self, small_grid: OrientationGrid, rng: np.random.Generator
    ) -> None:
        texture = TextureFactory.create_weighted(n=30, seed=8)
        g = cubic_symmetry()[rng.integers(1, 24)]

        reference = build_histogram(small_grid, texture, 3)
        symmetric = build_histogram(small_grid, texture.crystal_symmetric(g), 3)

        np.testing.assert_allclose(symmetric.bins, reference.bins, atol=1e-10)

    def test_histogram_texture_places_mass_on_bin_centers(
        self, small_grid: OrientationGrid
    ) -> None:
        texture = TextureFactory.create_random(n=10, seed=4)
        histogram = build_histogram(small_grid, texture, 3)

        represented = histogram_texture(small_grid, histogram)

        np.testing.assert_allclose(represented.fractions.sum(), 1.0)
        rebuilt = build_histogram(small_grid, represented, 1)
        np.testing.assert_allclose(rebuilt.bins, histogram.bins, atol=1e-12)


@pytest.mark.unit
class TestChiSquareDistance:
    def test_disjoint_histograms(self) -> None:
        a = Histogram(np.array([1.0, 0.0]), "g")
        b = Histogram(np.array([0.0, 1.0]), "g")

        assert chi_square_distance(a, b) == pytest.approx(2.0)

    def test_direct_formula(self) -> None:
        a = Histogram(np.array([0.5, 0.5]), "g")
        b = Histogram(np.array([0.25, 0.75]), "g")

        assert chi_square_distance(a, b) == pytest.approx(0.0625 / 0.75 + 0.0625 / 1.25)
        assert chi_square_distance(b, a) == chi_square_distance(a, b)

    def test_empty_bins_contribute_nothing(self) -> None:
        a = Histogram(np.array([0.5, 0.5, 0.0]), "g")

        assert chi_square_distance(a, a) == 0.0

    def test_mismatched_grids_rejected(self) -> None:
        a = Histogram(np.array([1.0, 0.0]), "J2-seed0")
        b = Histogram(np.array([1.0, 0.0]), "J2-seed1")

        with pytest.raises(InvalidArgumentException):
            chi_square_distance(a, b)

    def test_histogram_must_be_normalized(self) -> None:
        with pytest.raises(InvalidArgumentException):
            Histogram(np.array([0.5, 0.4]), "g")


@pytest.mark.unit
class TestHistogramDistance:
    def test_distance_to_self_is_zero(self, small_grid: OrientationGrid) -> None:
        metric = HistogramDistance(small_grid, 3)
        texture = TextureFactory.create_random(n=12, seed=1)

        assert metric.distance(texture, texture) == 0.0

    def test_distinct_textures_are_apart(self, small_grid: OrientationGrid) -> None:
        metric = HistogramDistance(small_grid, 3)
        a = TextureFactory.create_random(n=12, seed=1)
        b = TextureFactory.create_random(n=12, seed=2)

        d = metric.distance(a, b)
        assert 0.0 < d <= 2.0
        assert d == pytest.approx(metric.distance(b, a))

    def test_neighbors_limited_by_grid(self, small_grid: OrientationGrid) -> None:
        with pytest.raises(InvalidArgumentException):
            HistogramDistance(small_grid, small_grid.size + 1)
