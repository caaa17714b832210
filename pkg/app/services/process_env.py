import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from app import metrics
from app.core.enums import TerminalReason
from app.exceptions import InvalidArgumentException, SimulationException, StateException
from app.schemas.config import EnvConfig, MaterialParams, SolverConfig
from app.services.gsh_features import GSHBasis, compute_features, get_cubic_basis
from app.services.odf_histogram import (
    Histogram,
    HistogramDistance,
    WeightedOrientationSet,
    chi_square_distance,
)
from app.services.orientation_space import (
    OrientationGrid,
    cached_uniform_grid,
    check_unit,
)
from app.services.taylor_model import (
    CrystalAggregate,
    TaylorModel,
    predicted_strain_increment,
)

logger = logging.getLogger(__name__)

IDENTITY_QUATERNION = np.array([1.0, 0.0, 0.0, 0.0])
STATE_EXTRA_FEATURES = 2


@dataclass(frozen=True, eq=False)
class ProcessAction:
    magnitude: float
    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUATERNION.copy())

    @property
    def is_noop(self) -> bool:
        return self.magnitude == 0.0


class ActionSpace:
    """Ids 0..n-1 stretch by +f, n..2n-1 compress by -f (rotation i mod n), 2n is the no-op."""

    def __init__(self, rotations: np.ndarray, magnitude: float) -> None:
        self.rotations = check_unit(np.atleast_2d(rotations))
        self.magnitude = float(magnitude)

    @property
    def n_rotations(self) -> int:
        return len(self.rotations)

    @property
    def n(self) -> int:
        return 2 * self.n_rotations + 1

    @property
    def noop_id(self) -> int:
        return 2 * self.n_rotations

    def decode(self, action_id: int) -> ProcessAction:
        if not 0 <= int(action_id) < self.n:
            raise InvalidArgumentException(
                "Action id out of range", action_id=int(action_id), n_actions=self.n
            )
        action_id = int(action_id)
        if action_id == self.noop_id:
            return ProcessAction(0.0)
        sign = 1.0 if action_id < self.n_rotations else -1.0
        rotation = self.rotations[action_id % self.n_rotations]
        return ProcessAction(sign * self.magnitude, rotation.copy())

    def kind(self, action_id: int) -> str:
        if action_id == self.noop_id:
            return "noop"
        return "tension" if action_id < self.n_rotations else "compression"

    def table(self) -> list[dict[str, Any]]:
        rows = []
        for action_id in range(self.n):
            action = self.decode(action_id)
            w, x, y, z = action.rotation
            rows.append(
                {"action_id": action_id, "f": action.magnitude, "qw": w, "qx": x, "qy": y, "qz": z}
            )
        return rows


@dataclass(frozen=True, eq=False)
class GoalSpec:
    texture: WeightedOrientationSet
    features: np.ndarray
    histogram: Histogram


@dataclass(frozen=True, eq=False)
class EnvState:
    features: np.ndarray
    t: int
    eq_strain: float
    texture: WeightedOrientationSet
    histogram: Histogram
    distance: float
    done: bool = False


class TextureProcessEnv:
    """Deformation-process MDP over polycrystal textures.

    The reset/step surface follows the usual ``(state, reward, done, info)``
    contract; one instance owns one mutable episode.
    """

    def __init__(
        self,
        config: Optional[EnvConfig] = None,
        material: Optional[MaterialParams] = None,
        solver: Optional[SolverConfig] = None,
        target: Optional[WeightedOrientationSet] = None,
        grid: Optional[OrientationGrid] = None,
        basis: Optional[GSHBasis] = None,
        initial_texture: Optional[WeightedOrientationSet] = None,
    ) -> None:
        self.config = config or EnvConfig()
        self.material = material or MaterialParams()
        self.model = TaylorModel(self.material, solver)
        self.grid = grid or cached_uniform_grid(self.config.grid_size, self.config.grid_seed)
        self.metric = HistogramDistance(
            self.grid, self.config.neighbors, self.config.weighting
        )
        self.basis = basis or get_cubic_basis()
        self.action_space = ActionSpace(
            cached_uniform_grid(
                self.config.n_rotations, self.config.action_grid_seed
            ).orientations,
            self.config.magnitude,
        )
        self.initial_texture = initial_texture or WeightedOrientationSet.equal_volumes(
            cached_uniform_grid(
                self.config.n_crystals, self.config.initial_texture_seed
            ).orientations
        )
        self.goal: Optional[GoalSpec] = None
        if target is not None:
            self.set_target(target)

        self._aggregate: Optional[CrystalAggregate] = None
        self._state: Optional[EnvState] = None
        self._lateral_guess: Optional[np.ndarray] = None
        self._last_sign = 0.0
        self.terminal_reason = TerminalReason.NONE

    @property
    def aggregate(self) -> CrystalAggregate:
        if self._aggregate is None:
            raise StateException("Environment has not been reset")
        return self._aggregate

    @property
    def state(self) -> EnvState:
        if self._state is None:
            raise StateException("Environment has not been reset")
        return self._state

    @property
    def state_dim(self) -> int:
        return len(self.feature_vector(self.initial_texture, 0, 0.0))

    def encode_goal(self, texture: WeightedOrientationSet) -> GoalSpec:
        features = compute_features(self.basis, texture).real
        return GoalSpec(texture, features, self.metric.histogram(texture))

    def set_target(self, target: WeightedOrientationSet | GoalSpec) -> GoalSpec:
        self.goal = target if isinstance(target, GoalSpec) else self.encode_goal(target)
        return self.goal

    def potential(self, distance: float) -> float:
        return 1.0 / max(distance, self.config.distance_floor)

    def goal_distance(self, histogram: Histogram, goal: Optional[GoalSpec] = None) -> float:
        goal = goal or self.goal
        if goal is None:
            return float("nan")
        return chi_square_distance(histogram, goal.histogram)

    def shaped_reward(self, distance: float, next_distance: float, done: bool) -> float:
        """R + gamma * Phi(s') - Phi(s) with Phi = 0 on terminal states."""
        raw = self.potential(next_distance) if done else 0.0
        if not self.config.shaping:
            return raw
        next_potential = 0.0 if done else self.potential(next_distance)
        return raw + self.config.gamma * next_potential - self.potential(distance)

    def feature_vector(
        self, texture: WeightedOrientationSet, t: int, eq_strain: float
    ) -> np.ndarray:
        gsh = compute_features(self.basis, texture).real
        return np.concatenate([gsh, [t / self.config.horizon, eq_strain]])

    def _make_state(
        self,
        texture: WeightedOrientationSet,
        t: int,
        eq_strain: float,
        done: bool,
        histogram: Optional[Histogram] = None,
        gsh: Optional[np.ndarray] = None,
    ) -> EnvState:
        histogram = histogram or self.metric.histogram(texture)
        if gsh is None:
            gsh = compute_features(self.basis, texture).real
        features = np.concatenate([gsh, [t / self.config.horizon, eq_strain]])
        return EnvState(
            features=features,
            t=t,
            eq_strain=eq_strain,
            texture=texture,
            histogram=histogram,
            distance=self.goal_distance(histogram),
            done=done,
        )

    def reset(self, seed: Optional[int] = None) -> EnvState:
        """Fresh aggregate from the fixed initial texture; seed is only recorded."""
        self._aggregate = CrystalAggregate.from_texture(self.initial_texture, self.material)
        self._lateral_guess = None
        self._last_sign = 0.0
        self.terminal_reason = TerminalReason.NONE
        self._state = self._make_state(self.initial_texture, 0, 0.0, done=False)
        logger.debug("Environment reset seed=%s", seed, extra={"seed": seed})
        return self._state

    def step(self, action_id: int) -> tuple[EnvState, float, bool, dict[str, Any]]:
        """Apply one action; returns ``(state, reward, done, info)``.

        Every call consumes one time slot of the horizon, including a step rejected at
        the strain cap or lost to a simulator failure. Such a step keeps the previous
        texture but still advances ``t``, and the episode ends with it.
        """
        action = self.action_space.decode(action_id)
        kind = self.action_space.kind(int(action_id))
        return self._advance(action, kind)

    def step_action(self, action: ProcessAction) -> tuple[EnvState, float, bool, dict[str, Any]]:
        kind = "noop" if action.is_noop else ("tension" if action.magnitude > 0 else "compression")
        return self._advance(action, kind)

    def _advance(
        self, action: ProcessAction, kind: str
    ) -> tuple[EnvState, float, bool, dict[str, Any]]:
        previous = self.state
        if previous.done:
            raise StateException(
                "Episode is finished; call reset", details={"t": previous.t}
            )

        reason = TerminalReason.NONE
        aggregate = self.aggregate
        accepted: Optional[CrystalAggregate] = None
        substeps = 0
        if not action.is_noop:
            cap = self.config.strain_cap
            predicted = aggregate.eq_strain + predicted_strain_increment(action.magnitude)
            if predicted > cap + 1e-12:
                reason = TerminalReason.STRAIN_CAP
            else:
                sign = float(np.sign(action.magnitude))
                guess = self._lateral_guess if sign == self._last_sign else None
                try:
                    result = self.model.apply_process_step(
                        aggregate, action.magnitude, action.rotation, guess
                    )
                except SimulationException as exc:
                    logger.warning(
                        "Simulation failure t=%s error_code=%s details=%s",
                        previous.t,
                        exc.error_code,
                        exc.details,
                        extra={"t": previous.t, "error_code": exc.error_code},
                    )
                    reason = TerminalReason.SIM_FAILURE
                else:
                    substeps = result.substeps
                    if result.aggregate.eq_strain > cap:
                        reason = TerminalReason.STRAIN_CAP
                    else:
                        accepted = result.aggregate
                        self._lateral_guess = result.stretches[1:].copy()
                        self._last_sign = sign
            if reason == TerminalReason.STRAIN_CAP:
                logger.warning(
                    "Step rejected at strain cap t=%s eq_strain=%.4f",
                    previous.t,
                    aggregate.eq_strain,
                    extra={"t": previous.t, "eq_strain": aggregate.eq_strain},
                )

        t = previous.t + 1
        if reason == TerminalReason.NONE and t >= self.config.horizon:
            reason = TerminalReason.HORIZON
        done = reason != TerminalReason.NONE

        if accepted is not None:
            self._aggregate = accepted
            state = self._make_state(accepted.texture(), t, accepted.eq_strain, done)
        else:
            state = self._make_state(
                previous.texture,
                t,
                aggregate.eq_strain,
                done,
                histogram=previous.histogram,
                gsh=previous.features[:-STATE_EXTRA_FEATURES],
            )
        self._state = state
        self.terminal_reason = reason

        if self.goal is None:
            reward = 0.0
            raw_reward = 0.0
        else:
            reward = self.shaped_reward(previous.distance, state.distance, done)
            raw_reward = self.potential(state.distance) if done else 0.0

        metrics.env_steps_total.labels(action_kind=kind).inc()
        info = {
            "raw_distance": state.distance,
            "raw_reward": raw_reward,
            "potential": 0.0 if done or self.goal is None else self.potential(state.distance),
            "terminal_reason": reason.value,
            "substeps": substeps,
            "magnitude": action.magnitude if accepted is not None else 0.0,
        }
        return state, reward, done, info
