import argparse
import json
from pathlib import Path

from app.core.enums import Preset, RunMode
from app.exceptions import BaseAppException
from app.main import configure_logging, handle_exception
from app.schemas.config import build_run_config
from app.services.experiments import run_seeds


def main() -> int:
    """Independent seeded training runs in parallel processes, then aggregate.csv."""
    parser = argparse.ArgumentParser(description="Fan out seeded training runs")
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--seeds", type=int, nargs="+", required=True)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--preset", choices=[p.value for p in Preset], default=None)
    parser.add_argument("--mode", choices=[RunMode.SINGLE.value, RunMode.MULTI.value])
    parser.add_argument("--out", type=Path, required=True)
    args = parser.parse_args()

    configure_logging()
    overrides = json.loads(args.config.read_text()) if args.config else {}
    overrides["out_dir"] = str(args.out)

    print("\nConfiguration:")
    print(f"  Seeds:    {args.seeds}")
    print(f"  Workers:  {args.workers}")
    print(f"  Output:   {args.out}")

    try:
        config = build_run_config(overrides, preset=args.preset, mode=args.mode)
        frame = run_seeds(config, args.seeds, args.workers)
    except BaseAppException as exc:
        return handle_exception(exc)

    print("\n" + "=" * 60)
    print("AGGREGATE")
    print("=" * 60)
    print(frame.tail(5).to_string(index=False))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
