"""Rate-dependent Taylor-type crystal plasticity for bcc polycrystals.

Every crystal sees the aggregate deformation gradient ``F = Fe Fp``. Stresses
are in MPa, stiffness constants are given in GPa. Slip systems, plastic
deformation gradients and second Piola-Kirchhoff stresses of a crystal live in
its reference frame, which is the crystal lattice rotated by the crystal's
initial orientation.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np
from scipy.linalg import expm, logm

from app import metrics
from app.exceptions import (
    BalancingFailureException,
    IntegrationFailureException,
    InvalidArgumentException,
)
from app.schemas.config import MaterialParams, SolverConfig
from app.services.odf_histogram import WeightedOrientationSet
from app.services.orientation_space import from_matrix, normalize, to_matrix

logger = logging.getLogger(__name__)

GPA_TO_MPA = 1000.0
COPLANAR_TOL = 1e-9
IDENTITY = np.eye(3)
VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))

_FAMILY_110_NORMALS = ((1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1))
_DIRECTIONS_111 = ((1, 1, 1), (-1, 1, 1), (1, -1, 1), (1, 1, -1))


@dataclass(frozen=True, eq=False)
class SlipSystemSet:
    """Slip directions m and plane normals n, unit length, crystal frame.

    Ordering: the twelve {110}<111> systems first (normals (110), (1-10),
    (101), (10-1), (011), (01-1), two directions each in the order (111),
    (-111), (1-11), (11-1)), then the twelve {112}<111> systems grouped by
    direction in that same order, the "2" entry moving from x to z.
    """

    directions: np.ndarray
    normals: np.ndarray
    families: tuple[str, ...]

    @property
    def count(self) -> int:
        return len(self.directions)

    @cached_property
    def schmid(self) -> np.ndarray:
        return np.einsum("ai,aj->aij", self.directions, self.normals)

    @cached_property
    def coplanar(self) -> np.ndarray:
        return np.abs(self.normals @ self.normals.T) > 1.0 - COPLANAR_TOL


@lru_cache(maxsize=1)
def slip_systems_bcc() -> SlipSystemSet:
    directions, normals, families = [], [], []
    for normal in _FAMILY_110_NORMALS:
        for direction in _DIRECTIONS_111:
            if np.dot(normal, direction) == 0:
                directions.append(direction)
                normals.append(normal)
                families.append("{110}<111>")
    for direction in _DIRECTIONS_111:
        for position in range(3):
            normal = list(direction)
            normal[position] = -2 * direction[position]
            directions.append(direction)
            normals.append(tuple(normal))
            families.append("{112}<111>")

    m = np.array(directions, dtype=float)
    n = np.array(normals, dtype=float)
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return SlipSystemSet(m, n, tuple(families))


def stiffness_tensor(material: MaterialParams) -> np.ndarray:
    """Fourth-order cubic stiffness in the crystal frame (GPa)."""
    delta = IDENTITY
    c = (
        material.c12 * np.einsum("ij,kl->ijkl", delta, delta)
        + material.c44
        * (np.einsum("ik,jl->ijkl", delta, delta) + np.einsum("il,jk->ijkl", delta, delta))
    )
    anisotropy = material.c11 - material.c12 - 2.0 * material.c44
    for p in range(3):
        c[p, p, p, p] += anisotropy
    return c


def cubic_stress(strain: np.ndarray, material: MaterialParams) -> np.ndarray:
    """C : E for crystal-frame strains of shape (..., 3, 3); result in MPa."""
    c11 = material.c11 * GPA_TO_MPA
    c12 = material.c12 * GPA_TO_MPA
    c44 = material.c44 * GPA_TO_MPA
    diagonal = np.diagonal(strain, axis1=-2, axis2=-1)
    trace = diagonal.sum(axis=-1)
    stress = 2.0 * c44 * strain
    stress = stress + np.asarray(c12 * trace)[..., None, None] * IDENTITY
    stress = stress + np.einsum("...i,ij->...ij", (c11 - c12 - 2.0 * c44) * diagonal, IDENTITY)
    return stress


def _check_gradient(F: np.ndarray, name: str) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    det = np.linalg.det(F)
    if np.any(~np.isfinite(det)) or np.any(det <= 0):
        raise InvalidArgumentException(
            f"{name} must have a positive determinant", det=np.atleast_1d(det).tolist()
        )
    return F


def second_pk_stress(
    Fe: np.ndarray, material: MaterialParams, rotation: Optional[np.ndarray] = None
) -> np.ndarray:
    """T* = C : E with E = (Fe^T Fe - I) / 2; rotation maps crystal to the Fe frame."""
    Fe = _check_gradient(Fe, "Fe")
    strain = 0.5 * (np.swapaxes(Fe, -1, -2) @ Fe - IDENTITY)
    if rotation is None:
        return cubic_stress(strain, material)
    Q = np.asarray(rotation, dtype=float)
    crystal_strain = np.swapaxes(Q, -1, -2) @ strain @ Q
    return Q @ cubic_stress(crystal_strain, material) @ np.swapaxes(Q, -1, -2)


def cauchy_from_pk(Tstar: np.ndarray, Fe: np.ndarray) -> np.ndarray:
    Fe = _check_gradient(Fe, "Fe")
    det = np.linalg.det(Fe)
    T = Fe @ Tstar @ np.swapaxes(Fe, -1, -2) / np.asarray(det)[..., None, None]
    return 0.5 * (T + np.swapaxes(T, -1, -2))


def pk_from_cauchy(T: np.ndarray, Fe: np.ndarray) -> np.ndarray:
    Fe = _check_gradient(Fe, "Fe")
    det = np.linalg.det(Fe)
    Fe_inv = np.linalg.inv(Fe)
    return np.asarray(det)[..., None, None] * Fe_inv @ T @ np.swapaxes(Fe_inv, -1, -2)


def resolved_shear(
    Fe: np.ndarray, Tstar: np.ndarray, direction: np.ndarray, normal: np.ndarray
) -> np.ndarray | float:
    """Schmid law: tau = ((Fe^T Fe) T*) : (m x n)."""
    driving = np.swapaxes(Fe, -1, -2) @ Fe @ Tstar
    tau = np.einsum("...i,...ij,...j->...", direction, driving, normal)
    return float(tau) if np.ndim(tau) == 0 else tau


def shear_rates(tau: np.ndarray, resistance: np.ndarray, material: MaterialParams) -> np.ndarray:
    ratio = np.asarray(tau, dtype=float) / np.asarray(resistance, dtype=float)
    return material.gamma_dot0 * np.abs(ratio) ** (1.0 / material.rate_sensitivity) * np.sign(ratio)


def _rate_tangent(tau: np.ndarray, resistance: np.ndarray, material: MaterialParams) -> np.ndarray:
    """d(gamma_dot)/d(tau) of the power law."""
    exponent = 1.0 / material.rate_sensitivity
    ratio = np.abs(tau) / resistance
    return material.gamma_dot0 * exponent / resistance * ratio ** (exponent - 1.0)


def voce_resistance(accumulated: np.ndarray, material: MaterialParams) -> np.ndarray:
    g = np.asarray(accumulated, dtype=float)
    saturation = 1.0 - np.exp(-g * material.theta0 / material.tau1)
    return material.tau0 + (material.tau1 + material.theta1 * g) * saturation


def hardening_modulus(accumulated: np.ndarray, material: MaterialParams) -> np.ndarray:
    g = np.asarray(accumulated, dtype=float)
    decay = np.exp(-g * material.theta0 / material.tau1)
    return material.theta1 * (1.0 - decay) + (
        material.tau1 + material.theta1 * g
    ) * (material.theta0 / material.tau1) * decay


def latent_hardening_matrix(
    material: MaterialParams, systems: Optional[SlipSystemSet] = None
) -> np.ndarray:
    systems = systems or slip_systems_bcc()
    q = np.where(systems.coplanar, material.q_coplanar, material.q_noncoplanar)
    np.fill_diagonal(q, 1.0)
    return q


def hardening_rates(
    gamma_dot: np.ndarray,
    accumulated: np.ndarray,
    resistance: np.ndarray,
    material: MaterialParams,
    systems: Optional[SlipSystemSet] = None,
) -> np.ndarray:
    """r_dot = h(Gamma) * q . |gamma_dot|; resistance only fixes the output shape."""
    q = latent_hardening_matrix(material, systems)
    modulus = np.asarray(hardening_modulus(accumulated, material))
    rates = np.abs(np.asarray(gamma_dot, dtype=float)) @ q.T
    return np.broadcast_to(modulus[..., None] * rates, np.shape(resistance)).copy()


@dataclass
class CrystalState:
    orientation: np.ndarray
    Fp: np.ndarray = field(default_factory=lambda: np.eye(3))
    resistance: Optional[np.ndarray] = None
    accumulated_shear: float = 0.0
    F: np.ndarray = field(default_factory=lambda: np.eye(3))


@dataclass
class CrystalAggregate:
    orientations0: np.ndarray
    volumes: np.ndarray
    Fp: np.ndarray
    resistance: np.ndarray
    accumulated_shear: np.ndarray
    F: np.ndarray = field(default_factory=lambda: np.eye(3))
    eq_strain: float = 0.0
    stress: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    @classmethod
    def from_texture(
        cls, texture: WeightedOrientationSet, material: MaterialParams
    ) -> "CrystalAggregate":
        n = texture.size
        return cls(
            orientations0=texture.orientations.copy(),
            volumes=texture.fractions.copy(),
            Fp=np.tile(np.eye(3), (n, 1, 1)),
            resistance=np.full((n, slip_systems_bcc().count), material.tau0),
            accumulated_shear=np.zeros(n),
        )

    @property
    def size(self) -> int:
        return len(self.volumes)

    @property
    def rotation0(self) -> np.ndarray:
        return to_matrix(self.orientations0)

    def elastic_gradient(self) -> np.ndarray:
        return self.F @ np.linalg.inv(self.Fp)

    def orientations(self) -> np.ndarray:
        """Current lattice orientations from the rigid rotation of Fe."""
        u, _, vt = np.linalg.svd(self.elastic_gradient())
        return normalize(from_matrix(u @ vt @ self.rotation0))

    def texture(self) -> WeightedOrientationSet:
        return WeightedOrientationSet(self.orientations(), self.volumes)

    def copy(self) -> "CrystalAggregate":
        return replace(
            self,
            orientations0=self.orientations0.copy(),
            volumes=self.volumes.copy(),
            Fp=self.Fp.copy(),
            resistance=self.resistance.copy(),
            accumulated_shear=self.accumulated_shear.copy(),
            F=self.F.copy(),
            stress=self.stress.copy(),
        )


class DeformationPath:
    """F(s) = exp(s log dF) F0 for s in [0, 1]; spectral form for symmetric dF."""

    def __init__(
        self,
        start: np.ndarray,
        increment: np.ndarray,
        rotation: Optional[np.ndarray] = None,
        stretches: Optional[np.ndarray] = None,
    ) -> None:
        self.start = np.asarray(start, dtype=float)
        self.increment = np.asarray(increment, dtype=float)
        self.rotation = rotation
        self.log_stretches = None if stretches is None else np.log(stretches)
        self.log_increment = None
        if rotation is None:
            if np.array_equal(self.increment, IDENTITY):
                self.log_increment = np.zeros((3, 3))
            else:
                self.log_increment = np.real(logm(self.increment))

    @classmethod
    def principal(
        cls, start: np.ndarray, rotation: np.ndarray, stretches: np.ndarray
    ) -> "DeformationPath":
        stretches = np.asarray(stretches, dtype=float)
        increment = rotation @ np.diag(stretches) @ rotation.T
        return cls(start, increment, rotation, stretches)

    def at(self, s: float) -> np.ndarray:
        if s >= 1.0:
            return self.increment @ self.start
        if self.log_stretches is not None:
            R = self.rotation
            step = R @ np.diag(np.exp(s * self.log_stretches)) @ R.T
        else:
            step = expm(s * self.log_increment)
        return step @ self.start

    @property
    def end(self) -> np.ndarray:
        return self.increment @ self.start


@dataclass
class IntegrationResult:
    Fp: np.ndarray
    resistance: np.ndarray
    accumulated_shear: np.ndarray
    Fe: np.ndarray
    stress: np.ndarray
    schedule: list[float]
    attempts: int


@dataclass
class BalanceResult:
    aggregate: CrystalAggregate
    stretches: np.ndarray
    rotated_stress: np.ndarray
    iterations: int
    substeps: int


class TaylorModel:
    def __init__(
        self, material: Optional[MaterialParams] = None, solver: Optional[SolverConfig] = None
    ) -> None:
        self.material = material or MaterialParams()
        self.solver = solver or SolverConfig()
        self.systems = slip_systems_bcc()
        self.latent = latent_hardening_matrix(self.material, self.systems)
        sym = 0.5 * (self.systems.schmid + np.swapaxes(self.systems.schmid, -1, -2))
        # plastic coupling between systems, invariant under the crystal rotation
        self.coupling = np.einsum(
            "aij,bij->ab", sym, cubic_stress(sym, self.material)
        )

    def _reference_schmid(self, rotation0: np.ndarray) -> np.ndarray:
        return np.einsum(
            "nik,akl,njl->naij", rotation0, self.systems.schmid, rotation0
        )

    def _driving_stress(
        self, Fe: np.ndarray, rotation0: np.ndarray, schmid0: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        right_cauchy_green = np.swapaxes(Fe, -1, -2) @ Fe
        Tstar = second_pk_stress(Fe, self.material, rotation0)
        tau = np.einsum("naij,nij->na", schmid0, right_cauchy_green @ Tstar)
        return Tstar, tau

    def integrate(
        self,
        Fp: np.ndarray,
        resistance: np.ndarray,
        accumulated: np.ndarray,
        rotation0: np.ndarray,
        path: DeformationPath,
        duration: float,
        schedule: Optional[list[float]] = None,
    ) -> IntegrationResult:
        """Advance all crystals along the path with a shared adaptive substep schedule.

        With ``schedule`` given the substeps are replayed as-is without acceptance checks.
        """
        solver = self.solver
        material = self.material
        scale = solver.substep_scale
        max_fraction = scale / solver.min_substeps
        shear_limit = solver.max_shear_increment * scale
        stress_limit = solver.max_stress_change * scale
        theta = solver.tangent_theta

        Fp = Fp.copy()
        resistance = resistance.copy()
        accumulated = accumulated.copy()
        schmid0 = self._reference_schmid(rotation0)
        Fp_inv = np.linalg.inv(Fp)
        _, tau = self._driving_stress(path.start @ Fp_inv, rotation0, schmid0)

        taken: list[float] = []
        attempts = 0
        progress = 0.0
        h = max_fraction
        identity = np.eye(self.systems.count)
        while duration > 0 and progress < 1.0 - 1e-12:
            if schedule is not None:
                if len(taken) >= len(schedule):
                    break
                h = schedule[len(taken)]
            h = min(h, 1.0 - progress)
            attempts += 1
            if attempts > solver.max_substeps:
                metrics.simulation_failures_total.labels(kind="integration").inc()
                raise IntegrationFailureException(
                    attempts - 1, solver.max_substeps, progress=progress
                )

            target = path.end if progress + h >= 1.0 - 1e-12 else path.at(progress + h)
            _, tau_trial = self._driving_stress(target @ Fp_inv, rotation0, schmid0)
            elastic_change = tau_trial - tau
            dt = h * duration
            rate = shear_rates(tau, resistance, material)
            tangent = _rate_tangent(tau, resistance, material)
            system = identity + theta * dt * tangent[:, :, None] * self.coupling[None]
            rhs = dt * (rate + theta * tangent * elastic_change)
            dgamma = np.linalg.solve(system, rhs[..., None])[..., 0]
            dtau = elastic_change - dgamma @ self.coupling.T

            if schedule is None:
                active = np.abs(tau) >= solver.active_ratio * resistance
                too_much_shear = np.max(np.abs(dgamma)) > shear_limit
                too_much_stress = np.any(active & (np.abs(dtau) > stress_limit * resistance))
                if too_much_shear or too_much_stress or not np.all(np.isfinite(dgamma)):
                    h *= 0.5
                    continue

            plastic = np.einsum("na,naij->nij", dgamma, schmid0)
            Fp = expm(plastic) @ Fp
            Fp /= np.cbrt(np.linalg.det(Fp))[:, None, None]
            resistance = resistance + hardening_modulus(accumulated, material)[
                :, None
            ] * (np.abs(dgamma) @ self.latent.T)
            accumulated = accumulated + np.abs(dgamma).sum(axis=1)

            progress += h
            taken.append(h)
            Fp_inv = np.linalg.inv(Fp)
            current = path.end if progress >= 1.0 - 1e-12 else path.at(progress)
            _, tau = self._driving_stress(current @ Fp_inv, rotation0, schmid0)
            if schedule is None:
                h = min(h * solver.growth_factor, max_fraction)

        Fe = path.end @ Fp_inv
        Tstar = second_pk_stress(Fe, material, rotation0)
        return IntegrationResult(
            Fp=Fp,
            resistance=resistance,
            accumulated_shear=accumulated,
            Fe=Fe,
            stress=cauchy_from_pk(Tstar, Fe),
            schedule=taken,
            attempts=attempts,
        )

    def integrate_crystal(
        self, state: CrystalState, F_new: np.ndarray, duration: float
    ) -> tuple[CrystalState, np.ndarray]:
        F_new = _check_gradient(F_new, "F_new")
        if duration < 0:
            raise InvalidArgumentException("Duration must be nonnegative", duration=duration)
        resistance = (
            np.full(self.systems.count, self.material.tau0)
            if state.resistance is None
            else np.asarray(state.resistance, dtype=float)
        )
        path = DeformationPath(state.F, F_new @ np.linalg.inv(state.F))
        result = self.integrate(
            np.asarray(state.Fp, dtype=float)[None],
            resistance[None],
            np.array([state.accumulated_shear]),
            to_matrix(state.orientation)[None],
            path,
            duration,
        )
        new_state = CrystalState(
            orientation=np.asarray(state.orientation, dtype=float).copy(),
            Fp=result.Fp[0],
            resistance=result.resistance[0],
            accumulated_shear=float(result.accumulated_shear[0]),
            F=F_new.copy(),
        )
        return new_state, result.stress[0]

    def _aggregate_response(
        self,
        aggregate: CrystalAggregate,
        rotation: np.ndarray,
        stretches: np.ndarray,
        duration: float,
        schedule: Optional[list[float]] = None,
    ) -> tuple[IntegrationResult, np.ndarray, np.ndarray]:
        path = DeformationPath.principal(aggregate.F, rotation, stretches)
        result = self.integrate(
            aggregate.Fp,
            aggregate.resistance,
            aggregate.accumulated_shear,
            aggregate.rotation0,
            path,
            duration,
            schedule,
        )
        # fixed crystal order in the reduction keeps results reproducible
        mean_stress = np.einsum("n,nij->ij", aggregate.volumes, result.stress)
        mean_stress = 0.5 * (mean_stress + mean_stress.T)
        return result, mean_stress, rotation.T @ mean_stress @ rotation

    def balance_lateral(
        self,
        aggregate: CrystalAggregate,
        stretch11: float,
        rotation: np.ndarray,
        duration: float,
        guess: Optional[np.ndarray] = None,
    ) -> BalanceResult:
        """Newton iteration on (F22, F33) until the lateral stresses of the rotated frame vanish."""
        solver = self.solver
        R = to_matrix(rotation) if np.shape(rotation) == (4,) else np.asarray(rotation)
        lateral = (
            np.array(guess, dtype=float)
            if guess is not None
            else np.full(2, stretch11**-0.5)
        )
        residual_norm = np.inf
        substeps = 0
        for iteration in range(solver.balance_max_iter + 1):
            stretches = np.array([stretch11, lateral[0], lateral[1]])
            result, mean_stress, rotated = self._aggregate_response(
                aggregate, R, stretches, duration
            )
            substeps = len(result.schedule)
            residual = np.array([rotated[1, 1], rotated[2, 2]])
            residual_norm = float(np.max(np.abs(residual)))
            tolerance = max(
                solver.balance_tol_mpa, solver.balance_rel_tol * abs(rotated[0, 0])
            )
            logger.debug(
                "Lateral balance iteration=%s residual_mpa=%.3e tolerance=%.3e substeps=%s",
                iteration,
                residual_norm,
                tolerance,
                substeps,
            )
            if residual_norm < tolerance:
                new = aggregate.copy()
                new.Fp = result.Fp
                new.resistance = result.resistance
                new.accumulated_shear = result.accumulated_shear
                new.F = DeformationPath.principal(aggregate.F, R, stretches).end
                new.stress = mean_stress
                metrics.substeps.observe(substeps)
                return BalanceResult(new, stretches, rotated, iteration, substeps)
            if iteration == solver.balance_max_iter:
                break

            jacobian = np.empty((2, 2))
            for j in range(2):
                delta = solver.fd_rel_step * abs(lateral[j])
                perturbed = stretches.copy()
                perturbed[j + 1] += delta
                _, _, rotated_p = self._aggregate_response(
                    aggregate, R, perturbed, duration, result.schedule
                )
                jacobian[:, j] = (
                    np.array([rotated_p[1, 1], rotated_p[2, 2]]) - residual
                ) / delta
            try:
                update = np.linalg.solve(jacobian, -residual)
            except np.linalg.LinAlgError:
                break
            largest = float(np.max(np.abs(update)))
            if largest > solver.balance_max_update:
                update *= solver.balance_max_update / largest
            lateral = lateral + update

        metrics.simulation_failures_total.labels(kind="balancing").inc()
        raise BalancingFailureException(
            solver.balance_max_iter, residual_norm, stretch11=stretch11
        )

    def apply_process_step(
        self,
        aggregate: CrystalAggregate,
        magnitude: float,
        rotation: np.ndarray,
        guess: Optional[np.ndarray] = None,
    ) -> BalanceResult:
        """Uniaxial step F11 = 1 + f in the frame of rotation, lateral stresses balanced."""
        if abs(magnitude) > 1.0:
            raise InvalidArgumentException("Magnitude out of range", magnitude=magnitude)
        if magnitude == 0:
            return BalanceResult(
                aggregate.copy(), np.ones(3), np.zeros((3, 3)), 0, 0
            )
        duration = abs(magnitude) / self.solver.ref_strain_rate
        balanced = self.balance_lateral(
            aggregate, 1.0 + magnitude, rotation, duration, guess
        )
        balanced.aggregate.eq_strain = aggregate.eq_strain + equivalent_strain_increment(
            balanced.stretches
        )
        return balanced


def young_moduli(texture: WeightedOrientationSet, material: MaterialParams) -> np.ndarray:
    """Voigt-averaged Young's moduli (E11, E22, E33) in GPa."""
    R = to_matrix(texture.orientations)
    rotated = np.einsum(
        "nia,njb,nkc,nld,abcd->nijkl",
        R,
        R,
        R,
        R,
        stiffness_tensor(material),
        optimize=True,
    )
    mean = np.einsum("n,nijkl->ijkl", texture.fractions, rotated)
    voigt = np.array(
        [[mean[i, j, k, l] for (k, l) in VOIGT_PAIRS] for (i, j) in VOIGT_PAIRS]
    )
    try:
        compliance = np.linalg.inv(voigt)
    except np.linalg.LinAlgError as exc:
        raise InvalidArgumentException("Average stiffness is singular") from exc
    return 1.0 / np.diag(compliance)[:3]


def young_modulus(
    texture: WeightedOrientationSet, axis: int, material: MaterialParams
) -> float:
    if axis not in (1, 2, 3):
        raise InvalidArgumentException("Axis must be 1, 2 or 3", axis=axis)
    return float(young_moduli(texture, material)[axis - 1])


def equivalent_strain_increment(stretches: np.ndarray) -> float:
    log_stretch = np.log(np.asarray(stretches, dtype=float))
    return float(np.sqrt(2.0 / 3.0 * np.sum(log_stretch**2)))


def predicted_strain_increment(magnitude: float) -> float:
    """Isochoric estimate |ln(1 + f)| used before a step is attempted."""
    return abs(float(np.log1p(magnitude)))
