"""Command-line entry point.

Subcommands: synth (phantom cohort), extract (feature cache),
cv (cross-validation), report (summarize a stored CV report).
Exit codes: 0 success, 1 validation/config error, 2 runtime/data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .errors import ConfigError, PipelineError
from .pipeline import (
    cross_validate,
    extract_features,
    load_config,
    report_text,
    synthesize,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vox2p1d",
        description="2+1D decomposition pipeline for 3D volume classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a phantom cohort")
    p_synth.add_argument("--spec", required=True, help="phantom spec JSON file")
    p_synth.add_argument("--out", required=True, help="output directory")

    p_extract = sub.add_parser("extract", help="build the feature-map cache")
    p_extract.add_argument("--config", required=True, help="pipeline config JSON")
    p_extract.add_argument("--jobs", type=int, default=None)

    p_cv = sub.add_parser("cv", help="run repeated cross-validation")
    p_cv.add_argument("--config", required=True, help="pipeline config JSON")
    p_cv.add_argument("--jobs", type=int, default=None)

    p_report = sub.add_parser("report", help="print a stored CV report")
    p_report.add_argument("--report", required=True, help="cv_report.json path")
    return parser


def _config_with_jobs(path: str, jobs: int | None):
    config = load_config(path)
    if jobs is not None:
        if jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        config = dataclasses.replace(config, jobs=jobs)
    return config


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "synth":
        manifest_path = synthesize(args.spec, args.out)
        print(f"wrote {manifest_path}")
    elif args.command == "extract":
        feat_dir = extract_features(_config_with_jobs(args.config, args.jobs))
        print(f"feature cache ready: {feat_dir}")
    elif args.command == "cv":
        report, report_path, summary_path = cross_validate(
            _config_with_jobs(args.config, args.jobs)
        )
        print(open(summary_path).read(), end="")
        print(f"report: {report_path}")
    elif args.command == "report":
        print(report_text(args.report), end="")
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
