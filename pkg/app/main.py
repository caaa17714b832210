import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from app.core.config import settings
from app.core.enums import Ablation, Preset, RunMode
from app.exceptions import ArtifactNotFoundException, BaseAppException, ConfigException
from app.schemas.config import RunConfig, build_run_config
from app.services import experiments
from app.storage.artifact_repository import ArtifactRepository
from app.storage.texture_repository import TextureRepository

logger = logging.getLogger(__name__)


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format=settings.log_format,
        handlers=[logging.StreamHandler()],
        force=True,
    )


def handle_exception(exc: BaseException) -> int:
    """Log an error and map it to the process exit code."""
    if isinstance(exc, BaseAppException):
        logger.error(
            f"{exc.error_code} - {exc.message}",
            extra={"error_code": exc.error_code, "details": exc.details},
        )
        if exc.details:
            print(json.dumps({"error": exc.error_code, "details": exc.details}, default=str),
                  file=sys.stderr)
        return exc.exit_code
    logger.exception("Unexpected error", extra={"error_code": "INTERNAL_ERROR"})
    return 1


def _emit(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON file overriding preset values")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--preset", choices=[p.value for p in Preset])
    parser.add_argument("--out", type=Path, help="output directory or file")
    parser.add_argument(
        "--ablation",
        action="append",
        default=[],
        choices=[a.value for a in Ablation],
        help="may be repeated",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="texture-rl",
        description="Texture path optimization with a Taylor-model simulator and DQN agents",
    )
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    grid = sub.add_parser("grid-gen", help="write a uniform orientation grid")
    _common_flags(grid)
    grid.add_argument("--size", "-J", type=int, required=True)

    study = sub.add_parser("distance-study", help="relative distances on a constant path")
    _common_flags(study)

    material = sub.add_parser("material-test", help="Young's moduli of histogram representations")
    _common_flags(material)

    run = sub.add_parser("run", help="train a single- or multi-goal agent")
    _common_flags(run)
    run.add_argument("--mode", choices=[RunMode.SINGLE.value, RunMode.MULTI.value])
    run.add_argument("--target", type=Path)
    run.add_argument("--goal", type=Path, action="append", default=[])
    run.add_argument("--seeds", type=int, nargs="+")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--dump-replay", action="store_true")

    replay = sub.add_parser("replay", help="re-execute a best_path.txt")
    _common_flags(replay)
    replay.add_argument("--run-dir", type=Path)
    replay.add_argument("--path", type=Path)
    replay.add_argument("--target", type=Path)
    replay.add_argument(
        "--aggregate-out",
        type=Path,
        help="final crystal state (default: <run-dir>/best_aggregate.txt)",
    )

    goals = sub.add_parser("sample-goals", help="sample reachable, distinct goal textures")
    _common_flags(goals)
    goals.add_argument("--n-goals", type=int)
    goals.add_argument("--reference", type=Path)

    export = sub.add_parser("export-texture", help="histogram, features, moduli, pole figures")
    _common_flags(export)
    export.add_argument("--texture", type=Path, required=True)
    return parser


def _load_overrides(path: Optional[Path]) -> dict[str, Any]:
    if path is None:
        return {}
    if not path.exists():
        raise ArtifactNotFoundException(str(path))
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigException(
            "Config file is not valid JSON",
            errors=[{"field": str(path), "message": exc.msg}],
        ) from exc
    if not isinstance(payload, dict):
        raise ConfigException(
            "Config file must hold a JSON object",
            errors=[{"field": str(path), "message": "expected an object"}],
        )
    return payload


def resolve_config(args: argparse.Namespace, mode: Optional[RunMode] = None) -> RunConfig:
    overrides = _load_overrides(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None and args.command != "grid-gen":
        overrides["out_dir"] = str(args.out)
    if args.ablation:
        overrides["ablations"] = list(overrides.get("ablations", [])) + args.ablation
    if getattr(args, "target", None) is not None:
        overrides["target_path"] = str(args.target)
    if getattr(args, "goal", None):
        overrides["goal_paths"] = [str(g) for g in args.goal]
    if getattr(args, "n_goals", None) is not None:
        overrides.setdefault("goal_sampling", {})["n_goals"] = args.n_goals
    if getattr(args, "reference", None) is not None:
        overrides.setdefault("goal_sampling", {})["reference_path"] = str(args.reference)
    return build_run_config(overrides, preset=args.preset, mode=mode)


def cmd_grid_gen(args: argparse.Namespace) -> dict[str, Any]:
    config = resolve_config(args, RunMode.GRID_GEN)
    out = args.out or Path(config.out_dir) / f"grid-J{args.size}-seed{config.seed}.txt"
    path = experiments.grid_gen(args.size, config.seed, out)
    return {"grid": str(path), "J": args.size, "seed": config.seed}


def cmd_distance_study(args: argparse.Namespace) -> dict[str, Any]:
    config = resolve_config(args, RunMode.DISTANCE_STUDY)
    artifacts = ArtifactRepository(config.out_dir)
    artifacts.write_config(config)
    frame = experiments.distance_study(config)
    path = artifacts.write_table("distance_study.csv", frame)
    return {"table": str(path), "rows": len(frame)}


def cmd_material_test(args: argparse.Namespace) -> dict[str, Any]:
    config = resolve_config(args, RunMode.MATERIAL_TEST)
    artifacts = ArtifactRepository(config.out_dir)
    artifacts.write_config(config)
    table, mae = experiments.material_test(config)
    artifacts.write_table("material_test.csv", table)
    path = artifacts.write_table("material_test_mae.csv", mae)
    return {"table": str(path), "mae": mae.to_dict(orient="records")}


def cmd_run(args: argparse.Namespace) -> dict[str, Any]:
    config = resolve_config(args, RunMode(args.mode) if args.mode else None)
    if args.seeds:
        frame = experiments.run_seeds(config, args.seeds, args.workers, args.dump_replay)
        return {
            "seeds": args.seeds,
            "final_mean_best_distance": float(frame["mean_best_distance"].iloc[-1]),
            "aggregate": str(Path(config.out_dir) / "aggregate.csv"),
        }
    result = experiments.run_experiment(config, dump_replay=args.dump_replay)
    return result.summary().model_dump(mode="json")


def cmd_replay(args: argparse.Namespace) -> dict[str, Any]:
    if args.run_dir is not None:
        artifacts = ArtifactRepository(args.run_dir)
        config = artifacts.load_config()
        if args.target is not None:
            config = config.model_copy(update={"target_path": args.target})
        path = args.path or artifacts.path("best_path.txt")
        aggregate_out: Optional[Path] = args.aggregate_out or artifacts.path(
            "best_aggregate.txt"
        )
    else:
        config = resolve_config(args)
        if args.path is None:
            raise ConfigException(
                "replay needs --path or --run-dir",
                errors=[{"field": "path", "message": "missing"}],
            )
        path = args.path
        aggregate_out = args.aggregate_out
    state = experiments.replay_best_path(config, path, aggregate_out)
    return {
        "t": state.t,
        "distance": state.distance,
        "eq_strain": state.eq_strain,
        "aggregate": None if aggregate_out is None else str(aggregate_out),
    }


def cmd_sample_goals(args: argparse.Namespace) -> dict[str, Any]:
    config = resolve_config(args)
    reference_path = config.goal_sampling.reference_path
    reference = (
        None if reference_path is None else TextureRepository().load_texture(reference_path)
    )
    goals = experiments.sample_goals(config, reference)
    frame = experiments.write_goals(config, goals, config.out_dir)
    return {"goals": frame.to_dict(orient="records")}


def cmd_export_texture(args: argparse.Namespace) -> dict[str, Any]:
    config = resolve_config(args)
    texture = TextureRepository().load_texture(args.texture)
    paths = experiments.export_texture(config, texture, config.out_dir)
    return {"files": [str(p) for p in paths]}


COMMANDS = {
    "grid-gen": cmd_grid_gen,
    "distance-study": cmd_distance_study,
    "material-test": cmd_material_test,
    "run": cmd_run,
    "replay": cmd_replay,
    "sample-goals": cmd_sample_goals,
    "export-texture": cmd_export_texture,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    logger.info("Command started command=%s", args.command, extra={"command": args.command})
    try:
        _emit(COMMANDS[args.command](args))
    except Exception as exc:  # noqa: BLE001
        return handle_exception(exc)
    return 0
