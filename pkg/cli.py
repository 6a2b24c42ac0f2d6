"""
Quasi-serial manipulator design pipeline - command line entry point

    python cli.py --config config/pipeline.yaml --out runs/desk generate
    python cli.py --out runs/desk label
    ...
    python cli.py --out runs/desk report
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import pipeline
from config.config import load_pipeline_config, settings
from errors import PipelineError
from services.run_logger import log_event

logging.basicConfig(level=settings.LOG_LEVEL)
logger = logging.getLogger(__name__)

# stage -> (function, takes workers, help)
COMMANDS: Dict[str, Tuple[Callable, bool, str]] = {
    "generate": (pipeline.cmd_generate, True, "Sample, filter and kinematically label unit designs"),
    "label": (pipeline.cmd_label, True, "Append peak joint torques"),
    "train": (pipeline.cmd_train, False, "Fit the surrogate network"),
    "optimize": (pipeline.cmd_optimize, True, "Constrained NSGA-II on the surrogate"),
    "mine": (pipeline.cmd_mine, True, "Sensitivity, trees, correlations and derivative statistics"),
    "report": (pipeline.cmd_report, False, "Markdown summary of a complete run"),
    "run": (pipeline.run_all, True, "All stages in order"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cli.py",
        description="Generative design of task-covering quasi-serial manipulators",
    )
    parser.add_argument("--config", type=Path, default=None, help="Pipeline YAML; defaults apply when omitted")
    parser.add_argument("--out", type=Path, default=None, help="Run directory")
    parser.add_argument("--seed", type=int, default=None, help="Override the seed of the stage being run")
    parser.add_argument("--workers", type=int, default=None, help="Worker processes (default: WORKERS env)")
    subparsers = parser.add_subparsers(dest="stage", required=True, metavar="stage")
    for name, (_, _, text) in COMMANDS.items():
        subparsers.add_parser(name, help=text, description=text)
    return parser


def run_stage(stage: str, config_path: Optional[Path], out: Optional[Path], seed: Optional[int], workers: Optional[int]):
    cfg = load_pipeline_config(config_path).with_seed(stage, seed)
    if out is None:
        out = Path(cfg.output_dir or settings.OUTPUT_DIR)
    fn, takes_workers, _ = COMMANDS[stage]
    return fn(cfg, out, workers) if takes_workers else fn(cfg, out)


def main(argv: Optional[List[str]] = None) -> int:
    """Run one stage, turning pipeline errors into their exit codes"""
    args = build_parser().parse_args(argv)
    try:
        result = run_stage(args.stage, args.config, args.out, args.seed, args.workers)
    except PipelineError as exc:
        logger.error(f"{args.stage} failed: {exc}")
        log_event("stage_failed", stage=args.stage, error=type(exc).__name__, message=str(exc), exit_code=exc.exit_code)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(f"{args.stage}: {result}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
