"""Orchestration behind the CLI subcommands: studies, runs, exports and seed fan-out."""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from app import metrics
from app.core.enums import RunMode
from app.exceptions import ConfigException, StateException
from app.schemas.config import EnvConfig, RunConfig
from app.services.gsh_features import compute_features, feature_labels
from app.services.odf_histogram import (
    HistogramDistance,
    WeightedOrientationSet,
    chi_square_distance,
    histogram_texture,
)
from app.services.orientation_space import (
    OrientationGrid,
    cached_uniform_grid,
    sample_uniform_grid,
    to_matrix,
)
from app.services.process_env import EnvState, ProcessAction, TextureProcessEnv
from app.services.rl_agents import RunResult, replay_path, run_multi_goal, run_single_goal
from app.services.taylor_model import young_moduli
from app.storage.artifact_repository import ArtifactRepository
from app.storage.texture_repository import TextureRepository

logger = logging.getLogger(__name__)

POLE_FAMILIES: dict[str, np.ndarray] = {
    "100": np.eye(3),
    "110": np.array(
        [[1, 1, 0], [1, -1, 0], [1, 0, 1], [1, 0, -1], [0, 1, 1], [0, 1, -1]]
    )
    / np.sqrt(2.0),
    "111": np.array([[1, 1, 1], [1, 1, -1], [1, -1, 1], [-1, 1, 1]]) / np.sqrt(3.0),
}


def build_env(
    config: RunConfig,
    env_config: Optional[EnvConfig] = None,
    grid: Optional[OrientationGrid] = None,
) -> TextureProcessEnv:
    return TextureProcessEnv(
        env_config or config.env,
        config.material,
        config.solver,
        grid=grid,
    )


def grid_gen(J: int, seed: int, out: Path | str) -> Path:
    grid = sample_uniform_grid(J, seed)
    return TextureRepository().save_grid(grid, out)


def rollout_textures(
    env: TextureProcessEnv, actions: Sequence[int | ProcessAction]
) -> list[EnvState]:
    """States s_0..s_N of one episode driven by a fixed action sequence."""
    states = [env.reset()]
    for action in actions:
        if states[-1].done:
            break
        if isinstance(action, ProcessAction):
            state, _, _, _ = env.step_action(action)
        else:
            state, _, _, _ = env.step(action)
        states.append(state)
    return states


def rollout_texture(
    env: TextureProcessEnv, actions: Sequence[int | ProcessAction]
) -> WeightedOrientationSet:
    return rollout_textures(env, actions)[-1].texture


def random_rollouts(
    env: TextureProcessEnv,
    n_rollouts: int,
    length: int,
    rng: np.random.Generator,
) -> list[WeightedOrientationSet]:
    """Texture snapshots after every step of uniformly random action sequences."""
    textures = []
    for _ in range(n_rollouts):
        actions = rng.integers(env.action_space.n, size=length)
        textures.extend(s.texture for s in rollout_textures(env, actions)[1:])
    return textures


def distance_study(config: RunConfig) -> pd.DataFrame:
    """Relative distance d(s_t, s_K) / d(s_0, s_K) along a constant uniaxial path."""
    study = config.distance_study
    env_config = config.env.model_copy(
        update={"horizon": study.steps, "magnitude": study.magnitude}
    )
    env = build_env(config, env_config)
    action = ProcessAction(study.magnitude)
    textures = [s.texture for s in rollout_textures(env, [action] * study.steps)]

    rows: list[dict[str, Any]] = []
    for J in study.grid_sizes:
        grid = cached_uniform_grid(J, config.env.grid_seed)
        for k in study.neighbors:
            if k > J:
                continue
            metric = HistogramDistance(grid, k, config.env.weighting)
            histograms = [metric.histogram(t) for t in textures]
            final = histograms[-1]
            scale = chi_square_distance(histograms[0], final)
            for t, histogram in enumerate(histograms):
                d = chi_square_distance(histogram, final)
                rows.append(
                    {
                        "J": J,
                        "k": k,
                        "t": t,
                        "distance": d,
                        "relative_distance": d / scale if scale > 0 else float("nan"),
                    }
                )
            logger.info(
                "Distance study setting done J=%s k=%s scale=%.6g",
                J,
                k,
                scale,
                extra={"J": J, "k": k, "distance": scale},
            )
    return pd.DataFrame(rows)


def material_test(
    config: RunConfig, textures: Optional[Sequence[WeightedOrientationSet]] = None
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Young's moduli of textures and of their histogram representations.

    Returns the per-texture table and the mean absolute error per (J, k) in GPa.
    """
    test = config.material_test
    if textures is None:
        env = build_env(config)
        rng = np.random.default_rng(config.seed)
        textures = random_rollouts(env, test.n_rollouts, test.rollout_length, rng)

    rows: list[dict[str, Any]] = []
    originals = [young_moduli(t, config.material) for t in textures]
    for J in test.grid_sizes:
        grid = cached_uniform_grid(J, config.env.grid_seed)
        for k in test.neighbors:
            if k > J:
                continue
            metric = HistogramDistance(grid, k, config.env.weighting)
            for index, (texture, E) in enumerate(zip(textures, originals)):
                represented = histogram_texture(grid, metric.histogram(texture))
                E_hist = young_moduli(represented, config.material)
                rows.append(
                    {
                        "texture": index,
                        "J": J,
                        "k": k,
                        "E11": E[0],
                        "E22": E[1],
                        "E33": E[2],
                        "E11_hist": E_hist[0],
                        "E22_hist": E_hist[1],
                        "E33_hist": E_hist[2],
                        "abs_error": float(np.mean(np.abs(E_hist - E))),
                    }
                )

    table = pd.DataFrame(rows)
    if table.empty:
        return table, pd.DataFrame(columns=["J", "k", "mae_gpa", "mae_mpa", "n_textures"])
    mae = (
        table.groupby(["J", "k"], sort=True)["abs_error"]
        .agg(["mean", "count"])
        .reset_index()
        .rename(columns={"mean": "mae_gpa", "count": "n_textures"})
    )
    mae["mae_mpa"] = 1000.0 * mae["mae_gpa"]
    return table, mae[["J", "k", "mae_gpa", "mae_mpa", "n_textures"]]


def sample_goals(
    config: RunConfig,
    reference: Optional[WeightedOrientationSet] = None,
) -> list[WeightedOrientationSet]:
    """Reachable, mutually distinct goal textures from random rollouts.

    With a reference texture, only goals whose E11/E22/E33 lie within the
    configured window around the reference moduli are kept.
    """
    cfg = config.goal_sampling
    env_config = config.env.model_copy(
        update={"horizon": max(cfg.max_rollout_length, config.env.horizon)}
    )
    env = build_env(config, env_config)
    rng = np.random.default_rng(config.seed)
    grey = env.metric.histogram(env.initial_texture)
    target_E = None if reference is None else young_moduli(reference, config.material)

    goals: list[WeightedOrientationSet] = []
    histograms = []
    for attempt in range(cfg.max_attempts):
        if len(goals) >= cfg.n_goals:
            break
        length = int(rng.integers(cfg.min_rollout_length, cfg.max_rollout_length + 1))
        actions = rng.integers(env.action_space.n - 1, size=length)
        candidate = rollout_texture(env, actions)
        histogram = env.metric.histogram(candidate)
        if chi_square_distance(histogram, grey) <= cfg.min_grey_distance:
            continue
        if any(chi_square_distance(histogram, h) <= cfg.min_pairwise_distance for h in histograms):
            continue
        if target_E is not None:
            E = young_moduli(candidate, config.material)
            if np.any(np.abs(E - target_E) > cfg.modulus_window_gpa):
                continue
        goals.append(candidate)
        histograms.append(histogram)
        logger.info(
            "Goal accepted goal_id=%s attempt=%s steps=%s",
            len(goals) - 1,
            attempt,
            length,
            extra={"goal_id": len(goals) - 1, "attempt": attempt},
        )

    if len(goals) < cfg.n_goals:
        raise StateException(
            "Could not sample enough distinct goals",
            details={"found": len(goals), "requested": cfg.n_goals},
        )
    return goals


def write_goals(
    config: RunConfig, goals: Sequence[WeightedOrientationSet], out_dir: Path | str
) -> pd.DataFrame:
    repo = TextureRepository(out_dir)
    rows = []
    for goal_id, goal in enumerate(goals):
        path = repo.save_texture(goal, f"goal-{goal_id}.txt")
        E = young_moduli(goal, config.material)
        rows.append(
            {"goal_id": goal_id, "path": path.name, "E11": E[0], "E22": E[1], "E33": E[2]}
        )
    frame = pd.DataFrame(rows)
    ArtifactRepository(out_dir).write_table("goals.csv", frame)
    return frame


def pole_figure_points(texture: WeightedOrientationSet, family: str) -> pd.DataFrame:
    """Stereographic upper-hemisphere projections of one pole family, volume weighted."""
    poles = POLE_FAMILIES[family]
    directions = np.einsum("nij,pj->npi", to_matrix(texture.orientations), poles)
    directions = np.where(directions[..., 2:3] < 0, -directions, directions)
    scale = 1.0 + directions[..., 2]
    n_poles = len(poles)
    return pd.DataFrame(
        {
            "family": family,
            "crystal": np.repeat(np.arange(texture.size), n_poles),
            "x": (directions[..., 0] / scale).ravel(),
            "y": (directions[..., 1] / scale).ravel(),
            "weight": np.repeat(texture.fractions / n_poles, n_poles),
        }
    )


def export_texture(
    config: RunConfig, texture: WeightedOrientationSet, out_dir: Path | str
) -> list[Path]:
    env = build_env(config)
    artifacts = ArtifactRepository(out_dir)
    histogram = env.metric.histogram(texture)
    features = compute_features(env.basis, texture).real
    E = young_moduli(texture, config.material)
    return [
        artifacts.write_table(
            "histogram.csv",
            pd.DataFrame({"bin_id": np.arange(histogram.size), "mass": histogram.bins}),
        ),
        artifacts.write_table(
            "features.csv", pd.DataFrame([features], columns=feature_labels())
        ),
        artifacts.write_table(
            "moduli.csv", pd.DataFrame([{"E11": E[0], "E22": E[1], "E33": E[2]}])
        ),
        artifacts.write_table(
            "pole_figures.csv",
            pd.concat([pole_figure_points(texture, f) for f in POLE_FAMILIES], ignore_index=True),
        ),
    ]


def _require(paths: Sequence[Path], field: str, mode: RunMode) -> None:
    if not paths:
        raise ConfigException(
            "Run configuration lacks goal textures",
            errors=[{"field": field, "message": f"required for mode {mode.value}"}],
        )


def run_experiment(
    config: RunConfig,
    run_dir: Optional[Path] = None,
    dump_replay: bool = False,
) -> RunResult:
    """Train one seeded run and write its artifact directory."""
    metrics.reset()
    run_dir = Path(run_dir or config.out_dir)
    artifacts = ArtifactRepository(run_dir).ensure()
    textures = TextureRepository()
    env = build_env(config)

    artifacts.write_config(config)
    artifacts.write_table("actions.csv", pd.DataFrame(env.action_space.table()))
    if config.mode == RunMode.SINGLE:
        _require([config.target_path] if config.target_path else [], "target_path", config.mode)
        assert config.target_path is not None
        result = run_single_goal(
            env,
            textures.load_texture(config.target_path),
            config.agent,
            config.replay,
            config.network,
            config.seed,
            snapshot_dir=artifacts.checkpoint_dir,
            on_checkpoint=artifacts.save_checkpoint,
        )
    elif config.mode == RunMode.MULTI:
        _require(config.goal_paths, "goal_paths", config.mode)
        result = run_multi_goal(
            env,
            [textures.load_texture(p) for p in config.goal_paths],
            config.agent,
            config.replay,
            config.network,
            config.seed,
            snapshot_dir=artifacts.checkpoint_dir,
            on_checkpoint=artifacts.save_checkpoint,
        )
        artifacts.write_goals(result.goal_set.stats)
    else:
        raise ConfigException(
            "Mode is not a training mode",
            errors=[{"field": "mode", "message": f"{config.mode.value} cannot be run"}],
        )

    artifacts.write_episodes(result.episodes)
    artifacts.write_steps(result.steps)
    artifacts.write_best_path(result.best_path)
    artifacts.save_checkpoint(len(result.episodes) - 1, result.network)
    artifacts.write_summary(result.summary())
    if dump_replay:
        artifacts.write_lines("replay.txt", result.replay.dump_lines())
    artifacts.write_metrics()
    return result


def replay_best_path(
    config: RunConfig, path_file: Path | str, aggregate_out: Optional[Path | str] = None
) -> EnvState:
    """Re-execute a stored processing path towards the configured target.

    With ``aggregate_out`` the final crystal state (orientations, Fp, slip resistances)
    is written as an aggregate snapshot.
    """
    env = build_env(config)
    if config.target_path is not None:
        env.set_target(TextureRepository().load_texture(config.target_path))
    actions = TextureRepository().load_path(path_file)
    state = replay_path(env, actions)
    if aggregate_out is not None:
        TextureRepository().save_aggregate(env.aggregate, aggregate_out)
    logger.info(
        "Path replayed steps=%s distance=%.6g eq_strain=%.4f",
        len(actions),
        state.distance,
        state.eq_strain,
        extra={"steps": len(actions), "distance": state.distance},
    )
    return state


def _run_seed(payload: dict[str, Any]) -> list[float]:
    config = RunConfig.model_validate(payload["config"])
    result = run_experiment(config, Path(payload["run_dir"]), payload["dump_replay"])
    return [e.running_best_distance for e in result.episodes]


def confidence_interval(values: np.ndarray, level: float = 0.95) -> float:
    """Half-width of the Student-t interval of the mean; 0 for fewer than two values."""
    n = len(values)
    if n < 2:
        return 0.0
    return float(
        stats.t.ppf(0.5 + level / 2.0, n - 1) * np.std(values, ddof=1) / np.sqrt(n)
    )


def run_seeds(
    config: RunConfig,
    seeds: Sequence[int],
    workers: int = 1,
    dump_replay: bool = False,
) -> pd.DataFrame:
    """Independent seeded runs, one artifact directory each, plus aggregate.csv."""
    out_dir = Path(config.out_dir)
    payloads = [
        {
            "config": config.model_copy(update={"seed": s}).model_dump(mode="json"),
            "run_dir": str(out_dir / f"seed-{s}"),
            "dump_replay": dump_replay,
        }
        for s in seeds
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            curves = list(pool.map(_run_seed, payloads))
    else:
        curves = [_run_seed(p) for p in payloads]

    matrix = np.array(curves)
    frame = pd.DataFrame(
        {
            "episode": np.arange(matrix.shape[1]),
            "mean_best_distance": matrix.mean(axis=0),
            "ci95": [confidence_interval(matrix[:, e]) for e in range(matrix.shape[1])],
            "n_seeds": len(seeds),
        }
    )
    ArtifactRepository(out_dir).write_table("aggregate.csv", frame)
    return frame
