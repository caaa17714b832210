import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
from prometheus_client import write_to_textfile
from pydantic import BaseModel

from app import metrics
from app.core.config import settings
from app.exceptions import ArtifactNotFoundException
from app.schemas.config import RunConfig
from app.schemas.records import EpisodeRecord, GoalStatistics, RunSummary, StepRecord
from app.services.process_env import ProcessAction
from app.services.q_network import QNetwork
from app.storage.texture_repository import TextureRepository

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.17g"

STEP_COLUMNS = {
    "episode": "episode",
    "t": "t",
    "action_id": "action_id",
    "magnitude": "f",
    "qw": "qw",
    "qx": "qx",
    "qy": "qy",
    "qz": "qz",
    "distance": "raw_distance",
    "reward": "shaped_reward",
    "eq_strain": "eq_strain",
    "terminal_reason": "terminal_reason",
    "goal_id": "goal_id",
    "raw_reward": "raw_reward",
    "epsilon": "epsilon",
    "explored": "explored",
    "substeps": "substeps",
    "done": "done",
}


def records_frame(records: Sequence[BaseModel]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump(mode="json") for r in records])


class ArtifactRepository:
    """One run's artifact directory."""

    def __init__(self, run_dir: Path | str) -> None:
        self.run_dir = Path(run_dir)
        self.textures = TextureRepository(self.run_dir)

    @property
    def checkpoint_dir(self) -> Path:
        return self.run_dir / "checkpoints"

    def ensure(self) -> "ArtifactRepository":
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        return self

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def write_json(self, name: str, payload: dict[str, Any]) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return target

    def read_json(self, name: str) -> dict[str, Any]:
        target = self.path(name)
        if not target.exists():
            raise ArtifactNotFoundException(str(target))
        return json.loads(target.read_text())

    def write_config(self, config: RunConfig) -> Path:
        payload = config.model_dump(mode="json")
        payload["resolved"] = {
            "weighting": config.env.weighting.value,
            "ref_strain_rate": config.solver.ref_strain_rate,
        }
        return self.write_json("config.json", payload)

    def load_config(self) -> RunConfig:
        payload = self.read_json("config.json")
        payload.pop("resolved", None)
        return RunConfig.model_validate(payload)

    def write_table(self, name: str, frame: pd.DataFrame) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(target, index=False, float_format=CSV_FLOAT_FORMAT)
        logger.info(
            "Artifact written path=%s rows=%s",
            target,
            len(frame),
            extra={"path": str(target), "rows": len(frame)},
        )
        return target

    def read_table(self, name: str) -> pd.DataFrame:
        target = self.path(name)
        if not target.exists():
            raise ArtifactNotFoundException(str(target))
        return pd.read_csv(target, keep_default_na=False, na_values=[""])

    def write_episodes(self, records: Sequence[EpisodeRecord]) -> Path:
        return self.write_table("episodes.csv", records_frame(records))

    def write_steps(self, records: Sequence[StepRecord]) -> Path:
        frame = records_frame(records)
        if frame.empty:
            frame = pd.DataFrame(columns=list(STEP_COLUMNS))
        frame = frame[list(STEP_COLUMNS)].rename(columns=STEP_COLUMNS)
        return self.write_table("steps.csv", frame)

    def write_goals(self, stats: Sequence[GoalStatistics]) -> Path:
        return self.write_table("goals.csv", records_frame(stats))

    def write_summary(self, summary: RunSummary) -> Path:
        return self.write_json("summary.json", summary.model_dump(mode="json"))

    def write_best_path(self, actions: Sequence[ProcessAction]) -> Path:
        return self.textures.save_path(actions, "best_path.txt")

    def save_checkpoint(
        self, episode: int, network: QNetwork, rng: Optional[np.random.Generator] = None
    ) -> Path:
        rng_state = None if rng is None else rng.bit_generator.state
        target = network.save(
            self.checkpoint_dir / f"episode-{episode:05d}.npz", rng_state=rng_state
        )
        logger.info(
            "Checkpoint saved episode=%s path=%s",
            episode,
            target,
            extra={"episode": episode, "path": str(target)},
        )
        return target

    def write_lines(self, name: str, lines: Sequence[str]) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("".join(line + "\n" for line in lines))
        return target

    def write_metrics(self) -> Optional[Path]:
        if not settings.metrics_textfile:
            return None
        target = self.path("metrics.prom")
        target.parent.mkdir(parents=True, exist_ok=True)
        write_to_textfile(str(target), metrics.registry)
        return target
