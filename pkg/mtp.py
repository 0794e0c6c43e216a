"""
Command-line entry point.

    python mtp.py gen-data --config configs/sim.json --episodes 200 --out runs/data
    python mtp.py train --config configs/train.json --data runs/data --out runs/model
    python mtp.py eval-offline --data runs/data --checkpoint runs/model/final.mtp --out runs/offline
    python mtp.py eval-online --config configs/sim.json --checkpoint runs/model/final.mtp --out runs/online
    python mtp.py export-traj runs/online --out runs/online/traj.csv
    python mtp.py experiments --config configs/train.json --variants configs/ablations.json --data runs/data \\
        --sim-config configs/sim.json --online-episodes 100 --out runs/ablations

Exit codes: 0 on success, 2 for bad usage or configuration, 1 for any other failure.
"""

import argparse
import json
import logging
import sys
from typing import List, Optional

from mtp_core import MtpCore
from util.configuration import ConfigError


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="no progress bars")
    common.add_argument("--workers", type=int, default=1, help="episode/scene worker threads")

    parser = argparse.ArgumentParser(prog="mtp", description="Intention-conditioned multi-vehicle trajectory prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="roll out the rule-based expert and slice scenes")
    p.add_argument("--config", help="simulation config JSON")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--tracks", nargs="+", help="slice recorded track CSVs instead of simulating")
    p.add_argument("--heading-unit", choices=["degrees", "radians"], default="degrees")
    p.add_argument("--frame-step", type=int, default=1, help="track frames per prediction step")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train the prediction network")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--data", required=True, help="dataset directory or scenes file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--collision-weight", type=float)
    p.add_argument("--no-aggregation", action="store_true")
    p.add_argument("--no-augmentation", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-offline", parents=[common], help="ADE/FDE/MR/CR on recorded scenes")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictor", choices=["net", "oracle"], default="net")
    p.add_argument("--miss-threshold", type=float, default=2.0)
    p.add_argument("--safety-distance", type=float, default=2.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-online", parents=[common], help="closed-loop MPC evaluation in the simulator")
    p.add_argument("--config", help="simulation config JSON")
    p.add_argument("--scenario", help="scenario JSON merged over the config's scenario section")
    p.add_argument("--checkpoint")
    p.add_argument("--predictor", choices=["net", "oracle", "zero"], default="net")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--export-traj", help="also write the executed trajectories as CSV")
    p.add_argument("--out", required=True)

    p = sub.add_parser("experiments", parents=[common], help="train and compare ablation variants")
    p.add_argument("--config", help="base training config JSON")
    p.add_argument("--variants", help="variants JSON (default: full, no collision cost, no aggregation, no augmentation)")
    p.add_argument("--data", required=True, help="dataset directory or scenes file")
    p.add_argument("--test-data", help="held-out scenes; default splits --data by episode")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--sim-config", help="simulation config JSON for the closed-loop runs")
    p.add_argument("--online-episodes", type=int, default=0, help="closed-loop episodes per variant")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--require-orderings", action="store_true", help="exit 1 when an expected ranking does not hold")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-traj", parents=[common], help="episode log to trajectory CSV")
    p.add_argument("episodes_log", help="episode log file or run directory")
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "episodes", 0) is not None and getattr(args, "episodes", 0) < 0:
        print("Error: --episodes must be >= 0", file=sys.stderr)
        return 2
    if getattr(args, "online_episodes", 0) < 0:
        print("Error: --online-episodes must be >= 0", file=sys.stderr)
        return 2
    if not 0.0 < getattr(args, "test_fraction", 0.5) < 1.0:
        print("Error: --test-fraction must be in (0, 1)", file=sys.stderr)
        return 2
    if args.workers < 1:
        print("Error: --workers must be >= 1", file=sys.stderr)
        return 2

    core = MtpCore(argv, workers=args.workers, progress=not args.quiet and sys.stderr.isatty())
    handler = {
        "gen-data": core.gen_data,
        "train": core.train,
        "eval-offline": core.eval_offline,
        "eval-online": core.eval_online,
        "export-traj": core.export_traj,
        "experiments": core.experiments,
    }[args.command]

    try:
        summary = handler(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"Error in {args.command}: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        print(f"Error in {args.command}: {e}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
