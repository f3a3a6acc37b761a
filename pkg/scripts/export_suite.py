#!/usr/bin/env python3
"""
Export a seeded multi-domain suite to one dataset CSV.

Usage:
    python scripts/export_suite.py --seed 3

Or with a config file and a per-class cap:
    python scripts/export_suite.py --config dg.conf --k-shot 16 --output suite.csv --dry-run
"""

import argparse
import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from dotenv import load_dotenv
from pydantic import ValidationError

from src.lib.datagen import few_shot_subsample, gen_domain_suite, renormalize_pi
from src.lib.errors import GuidgError
from src.models import ExperimentKind
from src.store.datasets import export_datasets
from src.store.settings import Settings, build_experiment_config, load_config_file


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Export a domain suite as CSV")
    parser.add_argument("--config", type=Path, help="Dotted-key config file (dg.* keys)")
    parser.add_argument("--seed", type=int, help="Suite seed")
    parser.add_argument("--k-shot", type=int, default=0, help="Keep at most k samples per class (0 keeps all)")
    parser.add_argument("--output", type=Path, help="CSV path (default <out dir>/suite_seed<seed>.csv)")
    parser.add_argument(
        "--dry-run",
        action="store_true",
        help="Show what would be exported without writing"
    )

    args = parser.parse_args(argv)
    load_dotenv()

    try:
        settings = Settings.from_env()
        file_values = load_config_file(args.config) if args.config else {}
        cfg = build_experiment_config(ExperimentKind.DG, settings, file_values, {"seed": args.seed})
        section = cfg.dg
        suite = gen_domain_suite(
            section.n_domains, section.n_classes, section.feature_dim, section.domain_sizes(),
            section.domain_shift_strength, cfg.seed,
        )
        if args.k_shot:
            suite = renormalize_pi([few_shot_subsample(d, args.k_shot, cfg.seed) for d in suite])
    except ValidationError as e:
        print(f"✗ invalid config: {e.error_count()} error(s)\n{e}", file=sys.stderr)
        return 2
    except GuidgError as e:
        print(f"✗ {e}", file=sys.stderr)
        return 2

    print(f"Suite seed {cfg.seed}: {len(suite)} domains, {section.n_classes} classes, D={section.feature_dim}")
    for d in suite:
        print(f"  domain {d.domain_id}: {d.n_samples} samples (pi {d.pi:.3f})")

    output = args.output or Path(cfg.out_dir) / f"suite_seed{cfg.seed}.csv"
    if args.dry_run:
        print(f"\n[DRY RUN] Would write {sum(d.n_samples for d in suite)} rows to {output}")
        return 0

    try:
        output.parent.mkdir(parents=True, exist_ok=True)
        export_datasets(suite, output)
    except OSError as e:
        print(f"✗ cannot write {output}: {e}", file=sys.stderr)
        return 3

    print(f"\nDone! Wrote {output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
