from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from app.core.enums import SelectionType, TerminalReason


class StepRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    episode: int
    t: int
    goal_id: int = 0
    action_id: int
    magnitude: float
    qw: float = 1.0
    qx: float = 0.0
    qy: float = 0.0
    qz: float = 0.0
    reward: float
    raw_reward: float
    distance: float
    eq_strain: float
    epsilon: float
    explored: bool = False
    substeps: int = 0
    done: bool = False
    terminal_reason: TerminalReason = TerminalReason.NONE


class EpisodeRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    episode: int
    goal_id: int = 0
    selection_type: SelectionType = SelectionType.GREEDY
    initial_distance: float
    best_distance: float
    best_t: int
    running_best_distance: float
    steps: int
    terminal_reason: TerminalReason
    epsilon: float
    goal_epsilon: Optional[float] = None
    mean_loss: Optional[float] = None


class GoalStatistics(BaseModel):
    goal_id: int
    selections_greedy: int = 0
    selections_explore: int = 0
    best_distance: float = float("inf")


class RunSummary(BaseModel):
    mode: str
    seed: int
    episodes: int
    best_distance: float
    best_episode: int
    best_path_length: int
    committed_goal: Optional[int] = None
    wall_time_s: float = Field(ge=0)
    replay_inserts: int = 0
    stale_priority_updates: int = 0
