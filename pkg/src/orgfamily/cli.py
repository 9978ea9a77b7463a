"""Command-line entry point: ``orgfamily <stage> --config pipeline.yaml``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import ConfigError, ConfigMismatchError, OrgFamilyError, StageOrderError
from .pipeline import STAGES, Pipeline, compare_files, validate_config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_STAGE_ORDER = 3
EXIT_PARTIAL = 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline YAML config")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--force", action="store_true", help="re-run stages already marked complete")
    common.add_argument("--jaccard-threshold", type=float, help="name-similarity threshold in (0, 1]")
    common.add_argument("--top-k", type=int, help="search results kept per query")
    common.add_argument("--min-interval-ms", type=float, help="minimum delay between requests to one host")
    common.add_argument("--offline-fixtures", help="serve search and fetch from a fixture directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="orgfamily", description="Infer AS organization families.")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
        if stage == "compare":
            p.add_argument("--ours", help="families.jsonl to compare (default: the run's output)")
            p.add_argument("--baseline", help="baseline grouping file")
            p.add_argument("--format", choices=("ca2o", "csv"), help="baseline file format")
    run = sub.add_parser("run", parents=[common], help="run one stage or all of them")
    run.add_argument("stage", choices=(*STAGES, "all"))
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    mapping = {
        "jaccard_threshold": "cluster.jaccard_threshold",
        "top_k": "harvest.top_k",
        "min_interval_ms": "harvest.min_interval_ms",
        "offline_fixtures": "harvest.offline_fixtures",
        "baseline": "compare.baseline",
        "format": "compare.format",
    }
    out = {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}
    if args.out:
        out["output_dir"] = args.out
    # paths given on the command line are relative to the working directory
    for key in ("output_dir", "harvest.offline_fixtures", "compare.baseline"):
        if key in out:
            out[key] = os.path.abspath(out[key])
    return out


def _standalone_compare(args: argparse.Namespace) -> int:
    if not args.baseline:
        print("error: compare needs --baseline", file=sys.stderr)
        return EXIT_CONFIG
    report = compare_files(args.ours, args.baseline, args.format or "ca2o")
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    print()
    print(report.table())
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.stage if args.command == "run" else args.command
    try:
        if args.command == "compare" and args.ours:
            return _standalone_compare(args)
        if not args.config:
            raise ConfigError("--config is required")
        config = validate_config(args.config, _overrides(args))
        pipeline = Pipeline(config)
        pipeline.run(stage, force=args.force)
    except ConfigMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_CONFIG
    except StageOrderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE_ORDER
    except (OrgFamilyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    m = pipeline.manifest
    print(json.dumps({"stages": m.stages, "counters": m.counters}, sort_keys=True))
    if m.partial_records and stage in ("infer", "all"):
        print(f"{len(m.partial_records)} record(s) partially inferred", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
