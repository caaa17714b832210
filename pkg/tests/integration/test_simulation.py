import numpy as np
import pytest

from app.exceptions import IntegrationFailureException, InvalidArgumentException
from app.schemas.config import MaterialParams
from app.services.odf_histogram import WeightedOrientationSet
from app.services.orientation_space import conjugate, cubic_metric, to_matrix
from app.services.taylor_model import (
    GPA_TO_MPA,
    CrystalAggregate,
    CrystalState,
    TaylorModel,
    cauchy_from_pk,
    cubic_stress,
    young_modulus,
)
from tests.utils import ConfigFactory, TextureFactory, haar_quadrature

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])
TILTED = np.array([np.cos(0.35), 0.0, np.sin(0.35) * np.sqrt(0.5), np.sin(0.35) * np.sqrt(0.5)])


def tight_model(material: MaterialParams, **solver) -> TaylorModel:
    values = {"balance_tol_mpa": 1e-6, "balance_rel_tol": 0.0}
    values.update(solver)
    return TaylorModel(material, ConfigFactory.solver_config(**values))


@pytest.mark.integration
class TestCrystalIntegration:
    def test_plastic_gradient_stays_isochoric(self, material: MaterialParams) -> None:
        model = TaylorModel(material)
        stretch = 1.02
        F_new = np.diag([stretch, stretch**-0.5, stretch**-0.5])
        q = TextureFactory.create_random(n=1, seed=3).orientations[0]

        state, stress = model.integrate_crystal(CrystalState(q), F_new, duration=20.0)

        assert np.linalg.det(state.Fp) == pytest.approx(1.0, abs=1e-10)
        assert state.accumulated_shear > 0
        assert np.all(state.resistance > material.tau0)
        np.testing.assert_allclose(stress, stress.T, atol=1e-9)
        np.testing.assert_array_equal(state.F, F_new)

    def test_elastic_increment_leaves_plastic_state(self, material: MaterialParams) -> None:
        model = TaylorModel(material)
        F_new = np.diag([1.0 + 1e-6, 1.0, 1.0])

        state, stress = model.integrate_crystal(CrystalState(IDENTITY_Q), F_new, duration=1e-3)

        np.testing.assert_allclose(state.Fp, np.eye(3), atol=1e-12)
        assert stress[0, 0] == pytest.approx(material.c11 * 1000 * 1e-6, rel=1e-4)

    def test_negative_duration_rejected(self, material: MaterialParams) -> None:
        with pytest.raises(InvalidArgumentException):
            TaylorModel(material).integrate_crystal(CrystalState(IDENTITY_Q), np.eye(3), -1.0)

    def test_substep_cap_raises(self, material: MaterialParams) -> None:
        model = TaylorModel(material, ConfigFactory.solver_config(max_substeps=1))

        with pytest.raises(IntegrationFailureException) as exc_info:
            model.integrate_crystal(CrystalState(IDENTITY_Q), np.diag([1.01, 1.0, 1.0]), 10.0)

        assert exc_info.value.exit_code == 3


@pytest.mark.integration
class TestProcessStep:
    def test_zero_magnitude_is_a_copy(self, material: MaterialParams) -> None:
        aggregate = CrystalAggregate.from_texture(TextureFactory.create_random(4, seed=1), material)

        result = TaylorModel(material).apply_process_step(aggregate, 0.0, IDENTITY_Q)

        assert result.aggregate is not aggregate
        np.testing.assert_array_equal(result.aggregate.Fp, aggregate.Fp)
        assert result.aggregate.eq_strain == 0.0

    def test_magnitude_above_one_rejected(self, material: MaterialParams) -> None:
        aggregate = CrystalAggregate.from_texture(TextureFactory.create_random(2, seed=1), material)

        with pytest.raises(InvalidArgumentException):
            TaylorModel(material).apply_process_step(aggregate, 1.5, IDENTITY_Q)

    def test_elastic_micro_step_gives_isotropic_poisson_ratio(
        self, material: MaterialParams
    ) -> None:
        q, weights = haar_quadrature(n_angle=6, n_beta=4)
        aggregate = CrystalAggregate.from_texture(WeightedOrientationSet(q, weights), material)

        result = tight_model(material).apply_process_step(aggregate, 1e-5, IDENTITY_Q)

        axial, lateral_y, lateral_z = np.log(result.stretches)
        assert -lateral_y / axial == pytest.approx(0.2804, abs=0.005)
        assert -lateral_z / axial == pytest.approx(0.2804, abs=0.005)
        assert abs(result.rotated_stress[1, 1]) < 1e-6
        assert result.rotated_stress[0, 0] / axial == pytest.approx(222.3e3, rel=0.01)

    def test_lateral_stresses_balanced_and_strain_accumulates(
        self, material: MaterialParams
    ) -> None:
        aggregate = CrystalAggregate.from_texture(TextureFactory.create_random(6, seed=2), material)
        model = TaylorModel(material)

        result = model.apply_process_step(aggregate, 0.02, TILTED)

        tolerance = max(0.5, 1e-3 * abs(result.rotated_stress[0, 0]))
        assert abs(result.rotated_stress[1, 1]) < tolerance
        assert abs(result.rotated_stress[2, 2]) < tolerance
        assert result.rotated_stress[0, 0] > 0
        assert result.aggregate.eq_strain == pytest.approx(np.log(1.02), rel=0.1)
        np.testing.assert_allclose(np.linalg.det(result.aggregate.Fp), 1.0, atol=1e-10)
        assert aggregate.eq_strain == 0.0

    def test_loading_frame_equals_rotating_the_sample(self, material: MaterialParams) -> None:
        texture = TextureFactory.create_random(4, seed=7)
        model = tight_model(material, balance_tol_mpa=1e-4)

        in_frame = model.apply_process_step(
            CrystalAggregate.from_texture(texture, material), 0.01, TILTED
        ).aggregate.texture()
        turned = texture.rotated(conjugate(TILTED))
        in_sample = model.apply_process_step(
            CrystalAggregate.from_texture(turned, material), 0.01, IDENTITY_Q
        ).aggregate.texture().rotated(TILTED)

        np.testing.assert_allclose(
            cubic_metric(in_frame.orientations, in_sample.orientations), 0.0, atol=1e-6
        )

    @pytest.mark.slow
    def test_halving_substeps_changes_little(self, material: MaterialParams) -> None:
        texture = TextureFactory.create_random(4, seed=9)
        coarse = TaylorModel(material).apply_process_step(
            CrystalAggregate.from_texture(texture, material), 0.02, TILTED
        )
        fine = TaylorModel(
            material, ConfigFactory.solver_config(substep_scale=0.5)
        ).apply_process_step(CrystalAggregate.from_texture(texture, material), 0.02, TILTED)

        drift = cubic_metric(coarse.aggregate.orientations(), fine.aggregate.orientations())
        assert np.max(drift) < 1e-3
        assert fine.substeps >= coarse.substeps
        np.testing.assert_allclose(
            fine.rotated_stress[0, 0], coarse.rotated_stress[0, 0], rtol=0.02
        )

    @pytest.mark.slow
    def test_repeated_tension_hardens_and_rotates(self, material: MaterialParams) -> None:
        texture = TextureFactory.create_random(8, seed=4)
        model = TaylorModel(material)
        aggregate = CrystalAggregate.from_texture(texture, material)
        axial_stress = []
        guess = None

        for _ in range(30):
            result = model.apply_process_step(aggregate, 0.02, IDENTITY_Q, guess)
            aggregate, guess = result.aggregate, result.stretches[1:]
            axial_stress.append(result.rotated_stress[0, 0])

        assert aggregate.eq_strain == pytest.approx(30 * np.log(1.02), rel=0.1)
        assert axial_stress[-1] > axial_stress[0]
        assert np.max(cubic_metric(aggregate.orientations(), texture.orientations)) > 0.05


SUPPRESSED = 1e6


@pytest.mark.integration
class TestSuppressedSlip:
    def test_crystal_stress_is_the_elastic_response(
        self, material: MaterialParams, rng: np.random.Generator
    ) -> None:
        q = TextureFactory.create_random(n=1, seed=11).orientations[0]
        F_new = np.eye(3) + 1e-4 * rng.standard_normal((3, 3))
        state = CrystalState(q, resistance=np.full(24, SUPPRESSED))

        new_state, stress = TaylorModel(material).integrate_crystal(state, F_new, duration=20.0)

        Q = to_matrix(q)
        green = 0.5 * (F_new.T @ F_new - np.eye(3))
        elastic = Q @ cubic_stress(Q.T @ green @ Q, material) @ Q.T
        np.testing.assert_allclose(new_state.Fp, np.eye(3), atol=1e-14)
        assert new_state.accumulated_shear == pytest.approx(0.0, abs=1e-14)
        np.testing.assert_allclose(stress, cauchy_from_pk(elastic, F_new), rtol=1e-9, atol=1e-9)

    @pytest.mark.parametrize("strain", [1e-5, 1e-4])
    def test_aggregate_matches_voigt_modulus(
        self, material: MaterialParams, strain: float
    ) -> None:
        texture = TextureFactory.create_random(n=20, seed=5)
        aggregate = CrystalAggregate.from_texture(texture, material)
        aggregate.resistance[:] = SUPPRESSED

        result = tight_model(material).apply_process_step(aggregate, strain, IDENTITY_Q)

        axial = np.log(result.stretches[0])
        expected = young_modulus(texture, 1, material) * GPA_TO_MPA
        np.testing.assert_allclose(result.aggregate.Fp, np.tile(np.eye(3), (20, 1, 1)), atol=1e-14)
        assert result.rotated_stress[0, 0] / axial == pytest.approx(expected, rel=0.01)
