from app.schemas.config import (
    AgentConfig,
    EnvConfig,
    MaterialParams,
    NetworkConfig,
    ReplayConfig,
    RunConfig,
    SolverConfig,
    build_run_config,
)
from app.schemas.records import EpisodeRecord, GoalStatistics, RunSummary, StepRecord

__all__ = [
    "AgentConfig",
    "EnvConfig",
    "MaterialParams",
    "NetworkConfig",
    "ReplayConfig",
    "RunConfig",
    "SolverConfig",
    "build_run_config",
    "EpisodeRecord",
    "GoalStatistics",
    "RunSummary",
    "StepRecord",
]
