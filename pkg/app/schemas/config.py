import copy
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.core.config import settings
from app.core.enums import (
    Ablation,
    AssignmentWeighting,
    GoalValueKind,
    LossKind,
    Preset,
    RunMode,
)
from app.exceptions import ConfigException


class MaterialParams(BaseModel):
    """Single-crystal constants of the bcc steel model (stiffness in GPa, stresses in MPa)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    c11: float = Field(default=226.0, gt=0)
    c12: float = Field(default=140.0, gt=0)
    c44: float = Field(default=116.0, gt=0)
    gamma_dot0: float = Field(default=0.001, gt=0)
    rate_sensitivity: float = Field(default=0.02, gt=0)
    tau0: float = Field(default=90.0, gt=0)
    tau1: float = Field(default=32.0, gt=0)
    theta0: float = Field(default=250.0, gt=0)
    theta1: float = Field(default=60.0, gt=0)
    q_coplanar: float = Field(default=1.4, gt=0)
    q_noncoplanar: float = Field(default=1.4, gt=0)


class SolverConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    ref_strain_rate: float = Field(default=0.001, gt=0)
    min_substeps: int = Field(default=20, ge=1)
    max_substeps: int = Field(default=2**14, ge=1)
    max_shear_increment: float = Field(default=2e-3, gt=0)
    max_stress_change: float = Field(default=0.01, gt=0)
    active_ratio: float = Field(default=0.9, gt=0)
    growth_factor: float = Field(default=1.5, gt=1)
    tangent_theta: float = Field(default=0.5, ge=0, le=1)
    substep_scale: float = Field(default=1.0, gt=0, le=1)
    balance_tol_mpa: float = Field(default=0.5, gt=0)
    balance_rel_tol: float = Field(default=1e-3, ge=0)
    balance_max_iter: int = Field(default=25, ge=1)
    balance_max_update: float = Field(default=0.01, gt=0)
    fd_rel_step: float = Field(default=1e-7, gt=0)


class EnvConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_crystals: int = Field(default=250, ge=1)
    horizon: int = Field(default=100, ge=1, description="K, episode length")
    grid_size: int = Field(default=512, ge=1, description="J, histogram bins")
    neighbors: int = Field(default=3, ge=1, description="k, soft assignment")
    weighting: AssignmentWeighting = AssignmentWeighting.INVERSE_DISTANCE
    gamma: float = Field(default=1.0, gt=0, le=1)
    grid_seed: int = Field(default=3, ge=0)
    action_grid_seed: int = Field(default_factory=lambda: settings.action_grid_seed)
    initial_texture_seed: int = Field(
        default_factory=lambda: settings.initial_texture_seed
    )
    n_rotations: int = Field(default=100, ge=1)
    magnitude: float = Field(default=0.02, gt=0, le=1.0)
    strain_cap: float = Field(default=0.70, gt=0)
    shaping: bool = True
    distance_floor: float = Field(default=1e-6, gt=0)

    @model_validator(mode="after")
    def _neighbors_within_grid(self) -> "EnvConfig":
        if self.neighbors > self.grid_size:
            raise ValueError("neighbors must not exceed grid_size")
        return self


class ReplayConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    capacity: int = Field(default=100_000, ge=1)
    alpha: float = Field(default=0.6, ge=0)
    beta0: float = Field(default=0.4, ge=0, le=1)
    priority_eps: float = Field(default=1e-6, gt=0)
    prioritized: bool = True
    rebuild_interval: int = Field(default=10_000, ge=1)


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_sizes: list[int] = Field(default_factory=lambda: [128, 64, 32], min_length=1)
    dueling: bool = True
    learning_rate: float = Field(default=5e-4, gt=0)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    loss: LossKind = LossKind.HUBER
    huber_delta: float = Field(default=1.0, gt=0)
    layer_norm_eps: float = Field(default=1e-8, gt=0)


class AgentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    episodes: int = Field(default=100, ge=1)
    gamma: float = Field(default=1.0, gt=0, le=1)
    target_sync_steps: int = Field(default=250, ge=1)
    eps0: float = Field(default=0.5, ge=0, le=1)
    eps_final: float = Field(default=0.1, ge=0, le=1)
    eps_episodes: int = Field(default=50, ge=1)
    goal_eps0: float = Field(default=1.0, ge=0, le=1)
    goal_eps_final: float = Field(default=0.0, ge=0, le=1)
    goal_eps_episodes: int = Field(default=190, ge=1)
    batch_size: int = Field(default=32, ge=1)
    batches_per_step: int = Field(default=1, ge=1)
    warmup_steps: int = Field(default=100, ge=0)
    double_q: bool = True
    augmentation: bool = True
    goal_value: GoalValueKind = GoalValueKind.DUELING_VALUE
    checkpoint_every: int = Field(default=25, ge=1)


class DistanceStudyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(default=30, ge=1)
    magnitude: float = Field(default=0.02, gt=0, le=1.0)
    grid_sizes: list[int] = Field(default_factory=lambda: [256, 512, 8192])
    neighbors: list[int] = Field(default_factory=lambda: [1, 3, 25])


class MaterialTestConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_rollouts: int = Field(default=20, ge=1)
    rollout_length: int = Field(default=10, ge=1)
    grid_sizes: list[int] = Field(default_factory=lambda: [256, 512, 8192])
    neighbors: list[int] = Field(default_factory=lambda: [1, 25])


class GoalSamplingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_goals: int = Field(default=4, ge=1)
    min_pairwise_distance: float = Field(default=1.2, ge=0)
    min_grey_distance: float = Field(default=0.75, ge=0)
    min_rollout_length: int = Field(default=10, ge=1)
    max_rollout_length: int = Field(default=30, ge=1)
    max_attempts: int = Field(default=200, ge=1)
    reference_path: Optional[Path] = None
    modulus_window_gpa: float = Field(default=0.5, gt=0)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: RunMode = RunMode.SINGLE
    preset: Preset = Preset.PAPER
    seed: int = Field(default=0, ge=0)
    out_dir: Path = Field(default_factory=lambda: settings.runs_dir)
    target_path: Optional[Path] = None
    goal_paths: list[Path] = Field(default_factory=list)
    ablations: list[Ablation] = Field(default_factory=list)
    env: EnvConfig = Field(default_factory=EnvConfig)
    agent: AgentConfig = Field(default_factory=AgentConfig)
    replay: ReplayConfig = Field(default_factory=ReplayConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    material: MaterialParams = Field(default_factory=MaterialParams)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    distance_study: DistanceStudyConfig = Field(default_factory=DistanceStudyConfig)
    material_test: MaterialTestConfig = Field(default_factory=MaterialTestConfig)
    goal_sampling: GoalSamplingConfig = Field(default_factory=GoalSamplingConfig)

    @model_validator(mode="before")
    @classmethod
    def _share_discount(cls, data: Any) -> Any:
        """A gamma given for only one of env/agent applies to both."""
        if not isinstance(data, dict):
            return data
        env, agent = data.get("env", {}), data.get("agent", {})
        if not isinstance(env, dict) or not isinstance(agent, dict):
            return data
        if "gamma" in agent and "gamma" not in env:
            return {**data, "env": {**env, "gamma": agent["gamma"]}}
        if "gamma" in env and "gamma" not in agent:
            return {**data, "agent": {**agent, "gamma": env["gamma"]}}
        return data

    @model_validator(mode="after")
    def _single_discount(self) -> "RunConfig":
        # Shaping and the learning target must discount with the same gamma.
        if self.env.gamma != self.agent.gamma:
            raise ValueError("env.gamma and agent.gamma must be equal")
        return self


PAPER_SINGLE: dict[str, Any] = {
    "agent": {
        "episodes": 100,
        "target_sync_steps": 250,
        "eps_final": 0.1,
        "eps_episodes": 50,
        "batches_per_step": 1,
    },
    "network": {"hidden_sizes": [128, 64, 32]},
    "replay": {"capacity": 100_000},
}

PAPER_MULTI: dict[str, Any] = {
    "agent": {
        "episodes": 200,
        "target_sync_steps": 500,
        "eps_final": 0.0,
        "eps_episodes": 190,
        "goal_eps_episodes": 190,
        "batches_per_step": 4,
    },
    "network": {"hidden_sizes": [128, 256, 256, 128]},
    "replay": {"capacity": 250_000},
}

DESK_OVERRIDES: dict[str, Any] = {
    "env": {"n_crystals": 50, "horizon": 30, "grid_size": 256},
    "agent": {"episodes": 30, "target_sync_steps": 100},
    "distance_study": {"grid_sizes": [256, 512], "neighbors": [1, 3]},
    "material_test": {"n_rollouts": 10, "grid_sizes": [256, 512, 8192]},
}

DESK_EPSILON: dict[RunMode, dict[str, Any]] = {
    RunMode.SINGLE: {"eps_episodes": 15},
    RunMode.MULTI: {"eps_episodes": 28, "goal_eps_episodes": 28},
}


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def preset_values(preset: Preset, mode: RunMode) -> dict[str, Any]:
    values = copy.deepcopy(PAPER_MULTI if mode == RunMode.MULTI else PAPER_SINGLE)
    if preset == Preset.DESK:
        values = deep_merge(values, DESK_OVERRIDES)
        values = deep_merge(
            values, {"agent": DESK_EPSILON.get(mode, DESK_EPSILON[RunMode.SINGLE])}
        )
    return values


def ablation_values(ablations: list[Ablation]) -> dict[str, Any]:
    values: dict[str, Any] = {}
    names = set(ablations)
    if Ablation.PURE_DQN in names:
        names |= {Ablation.NO_PER, Ablation.NO_DOUBLE, Ablation.NO_DUELING}
    if Ablation.NO_SHAPING in names:
        values = deep_merge(values, {"env": {"shaping": False}})
    if Ablation.NO_AUGMENTATION in names:
        values = deep_merge(values, {"agent": {"augmentation": False}})
    if Ablation.NO_PER in names:
        values = deep_merge(values, {"replay": {"prioritized": False}})
    if Ablation.NO_DOUBLE in names:
        values = deep_merge(values, {"agent": {"double_q": False}})
    if Ablation.NO_DUELING in names:
        values = deep_merge(
            values,
            {
                "network": {"dueling": False},
                "agent": {"goal_value": GoalValueKind.MAX_Q.value},
            },
        )
    return values


def build_run_config(
    overrides: Optional[dict[str, Any]] = None,
    preset: Optional[Preset | str] = None,
    mode: Optional[RunMode | str] = None,
) -> RunConfig:
    """Resolve preset, file/CLI overrides and ablations into a validated RunConfig.

    Precedence (lowest first): preset values, overrides, ablation switches.
    """
    overrides = copy.deepcopy(overrides or {})
    try:
        resolved_preset = Preset(preset or overrides.get("preset", Preset.PAPER))
        resolved_mode = RunMode(mode or overrides.get("mode", RunMode.SINGLE))
        ablations = [Ablation(a) for a in overrides.get("ablations", [])]
    except ValueError as exc:
        raise ConfigException(
            "Invalid run configuration",
            errors=[{"field": "preset/mode/ablations", "message": str(exc)}],
        ) from exc

    values = preset_values(resolved_preset, resolved_mode)
    values = deep_merge(values, overrides)
    values = deep_merge(values, ablation_values(ablations))
    values["preset"] = resolved_preset.value
    values["mode"] = resolved_mode.value

    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        errors = [
            {
                "field": ".".join(str(part) for part in error["loc"]),
                "message": error["msg"],
            }
            for error in exc.errors()
        ]
        raise ConfigException("Invalid run configuration", errors=errors) from exc
