#!/usr/bin/env python3
"""
Experiment runner for the miniature GuiDG pipeline.

Commands:
    python scripts/guidg.py toy         - Universal vs expert-ensemble toy table
    python scripts/guidg.py dg          - Leave-one-domain-out benchmark + weight analysis
    python scripts/guidg.py ablate      - Single prompt vs experts, disjoint vs shared data
    python scripts/guidg.py bounds      - Generalization bound audit (key=value + bounds table)
    python scripts/guidg.py gradcheck   - Backprop vs central differences

Every command accepts:
    --config FILE   dotted-key config (toy.h1 = 60,80,100)
    --seed N        base seed; repeat k uses seed + k
    --repeats N     number of repeats
    --out DIR       report directory
    --format FMT    csv | jsonl
    --verbose       DEBUG logging

Exit codes: 0 ok, 1 failed gradient check, 2 rejected config or input,
3 report directory not writable.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from dotenv import load_dotenv
from pydantic import ValidationError

from src.lib.errors import ConfigError, GuidgError, ReportWriteError
from src.lib.harness import (
    ABLATION_VARIANTS,
    REFERENCE_TOY_ROWS,
    WEIGHT_SANITY_RATE,
    emit_report,
    mean_accuracy_by_method,
    run_ablation,
    run_bounds,
    run_dg_benchmark,
    run_grad_checks,
    run_toy_experiment,
    toy_acceptance,
)
from src.models import DataMode, ExperimentConfig, ExperimentKind, ReportFormat
from src.store.settings import Settings, build_experiment_config, load_config_file

logger = logging.getLogger("guidg")


def configure_logging(level: str, verbose: bool):
    if verbose:
        level = "DEBUG"
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"unknown log level {level!r}")
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def mark(ok: bool) -> str:
    return "✓" if ok else "✗"


def print_written(paths: List[Path]):
    print("\nReports:")
    for path in paths:
        print(f"  {path}")


def format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# =============================================================================
# Commands
# =============================================================================

def cmd_toy(cfg: ExperimentConfig, args) -> int:
    """Toy regression table next to the reference rows."""
    result = run_toy_experiment(cfg)

    print(f"\n📊 Toy table ({len(result.seeds)} repeats, noise sd {cfg.toy.noise_sd})")
    print("=" * 72)
    print(f"{'h1':>5} {'R_B':>8} {'R_O':>8} {'E_B':>8} {'E_O':>8} {'R':>8} {'r':>8}")
    for row in result.rows:
        print(f"{row.h1:>5} {row.R_B:8.3f} {row.R_O:8.3f} {row.E_B:8.3f} {row.E_O:8.3f} {row.R:8.3f} {row.r:8.3f}")
        reference = REFERENCE_TOY_ROWS.get(row.h1)
        if reference:
            print(f"{'ref':>5} " + " ".join(f"{v:8.3f}" for v in reference))

    print("\nAcceptance:")
    for name, ok in toy_acceptance(result.rows).items():
        print(f"  {mark(ok)} {name}")

    print_written(emit_report(result))
    return 0


def cmd_dg(cfg: ExperimentConfig, args) -> int:
    """Leave-one-domain-out accuracies and per-target expert weights."""
    result = run_dg_benchmark(cfg)

    print(f"\n📊 Leave-one-domain-out ({len(result.seeds)} seeds, {cfg.dg.n_domains} domains)")
    print("=" * 60)
    means = mean_accuracy_by_method(result.rows)
    for method, acc in means.items():
        print(f"  {method:<14} {acc:.4f}")

    print("\nExpert weights by held-out domain:")
    for report in result.weights:
        weights = " ".join(f"{d}:{w:.3f}" for d, w in zip(report.expert_domains, report.mean_weights))
        solo = " ".join(f"{d}:{a:.3f}" for d, a in zip(report.expert_domains, report.solo_accuracy))
        print(f"  target {report.target_domain}: weights [{weights}] solo [{solo}]")
        print(f"    ensemble {report.ensemble_accuracy:.4f}  best solo {report.best_solo_accuracy:.4f}  "
              f"erm {report.erm_accuracy:.4f}  worst-expert-min-weight {report.worst_expert_min_weight_rate:.2f}")

    sanity = result.manifest_extra()["weight_sanity_rate"]
    print("\nAcceptance:")
    print(f"  {mark(means['guidg'] >= means['best_solo'])} guidg_at_least_best_solo")
    print(f"  {mark(sanity >= WEIGHT_SANITY_RATE)} worst_expert_min_weight ({sanity:.2f})")

    print_written(emit_report(result))
    return 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    """{single, experts_uniform, experts_learnable} x {disjoint, shared}."""
    result = run_ablation(cfg)

    print(f"\n📊 Ablation ({len(result.seeds)} seeds)")
    print("=" * 60)
    for cell in result.cells:
        print(f"  {cell.data_mode.value:<9} {cell.variant:<18} {cell.mean_accuracy:.4f}  (n={cell.n_evaluations})")

    print("\nAcceptance:")
    for mode in DataMode:
        single, uniform, learnable = (result.cell(mode, v).mean_accuracy for v in ABLATION_VARIANTS)
        print(f"  {mark(learnable >= uniform >= single)} {mode.value}: learnable >= uniform >= single")

    print_written(emit_report(result))
    return 0


def cmd_bounds(cfg: ExperimentConfig, args) -> int:
    """Every input echoed and every term itemized, one key=value per line."""
    result = run_bounds(cfg)
    for name, report in result.reports:
        print(f"[{name}]")
        for key, value in report.items():
            print(f"{key}={format_value(value)}")
        print()
    print_written(emit_report(result))
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    """Randomized architectures plus the joint Step-2 objective."""
    result = run_grad_checks(seed=cfg.seed, config=cfg)

    print(f"\n🔍 Gradient checks (seed {cfg.seed})")
    print("=" * 60)
    for report in result.reports:
        print(f"  {mark(report.passed)} {report.label:<32} max rel err {report.max_rel_error:.2e} "
              f"({report.n_checked} params)")

    failed = sum(1 for r in result.reports if not r.passed)
    print(f"\n{len(result.reports) - failed}/{len(result.reports)} passed")
    print_written(emit_report(result))
    return 0 if result.passed else 1


COMMANDS = {
    "toy": cmd_toy,
    "dg": cmd_dg,
    "ablate": cmd_ablate,
    "bounds": cmd_bounds,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Dotted-key config file")
    common.add_argument("--seed", type=int, help="Base seed")
    common.add_argument("--repeats", type=int, help="Number of repeats")
    common.add_argument("--out", dest="out_dir", help="Report directory")
    common.add_argument("--format", choices=[f.value for f in ReportFormat], help="Report format")
    common.add_argument("--verbose", "-v", action="store_true", help="DEBUG logging")

    parser = argparse.ArgumentParser(description="Miniature GuiDG experiment runner")
    subparsers = parser.add_subparsers(dest="command", help="Command to run")
    subparsers.add_parser("toy", parents=[common], help="Toy regression table")
    subparsers.add_parser("dg", parents=[common], help="Leave-one-domain-out benchmark")
    subparsers.add_parser("ablate", parents=[common], help="Expert/weighting/data ablation")
    subparsers.add_parser("bounds", parents=[common], help="Generalization bound report")
    subparsers.add_parser("gradcheck", parents=[common], help="Gradient checks")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 0

    load_dotenv()
    try:
        settings = Settings.from_env()
        configure_logging(settings.log_level, args.verbose)
        file_values: Dict[str, str] = load_config_file(args.config) if args.config else {}
        cli_values = {
            "seed": args.seed,
            "repeats": args.repeats,
            "out_dir": args.out_dir,
            "format": args.format,
        }
        cfg = build_experiment_config(ExperimentKind(args.command), settings, file_values, cli_values)
        logger.debug("config: %s", cfg.model_dump_json())
        return COMMANDS[args.command](cfg, args)
    except ReportWriteError as e:
        print(f"✗ {e}", file=sys.stderr)
        return 3
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        print(f"✗ invalid config: {location}: {first['msg']} ({e.error_count()} error(s))", file=sys.stderr)
        return 2
    except GuidgError as e:
        print(f"✗ {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
