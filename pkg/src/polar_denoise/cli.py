"""Command-line entry point.

    polar-denoise run <spec-file> [--out DIR] [--seed N] [--jobs K]
    polar-denoise audit-specfun [--out DIR]
    polar-denoise version

Exit codes: 0 success, 1 usage error, 2 failed internal assertion.  The
``POLAR_DENOISE_JOBS`` environment variable provides the default for
``--jobs``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import __version__
from ._backend import active_backend
from .errors import PolarDenoiseError
from .experiments import (
    ExperimentAssertionError,
    UsageError,
    _run_specfun_audit,
    parse_experiment_spec,
    run_experiment,
)


def _default_jobs() -> int:
    env = os.environ.get("POLAR_DENOISE_JOBS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polar-denoise",
        description="Reproducible experiments for reverse-diffusion denoising over atom priors.",
    )
    sub = parser.add_subparsers(dest="command")

    run_p = sub.add_parser("run", help="run an experiment spec file")
    run_p.add_argument("spec_file", type=Path)
    run_p.add_argument("--out", type=Path, default=None, help="output base directory")
    run_p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    run_p.add_argument("--jobs", type=int, default=None, help="worker count (default $POLAR_DENOISE_JOBS or 1)")

    audit_p = sub.add_parser("audit-specfun", help="verify the Bessel layer against bundled oracles")
    audit_p.add_argument("--out", type=Path, default=None, help="also write audit artifacts here")

    sub.add_parser("version", help="print version and active backend")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    if args.command == "version":
        print(f"polar-denoise {__version__} (backend: {active_backend()})")
        return 0

    if args.command == "audit-specfun":
        outdir = args.out
        if outdir is not None:
            outdir.mkdir(parents=True, exist_ok=True)
        try:
            _, summary = _run_specfun_audit(None, outdir)
        except ExperimentAssertionError as exc:
            print(f"audit FAILED: {exc}", file=sys.stderr)
            return 2
        print(
            "specfun audit PASS: "
            f"{summary['points']} oracle points, "
            f"max rel err log K {summary['max_rel_err_log_k']:.3e} (tol 1e-10), "
            f"ratio {summary['max_rel_err_ratio']:.3e} (tol 1e-8), "
            f"closed forms {summary['max_rel_err_closed_form']:.3e} (tol 1e-12)"
        )
        return 0

    if args.command == "run":
        jobs = args.jobs if args.jobs is not None else _default_jobs()
        if jobs < 1:
            print("error: --jobs must be >= 1", file=sys.stderr)
            return 1
        try:
            spec = parse_experiment_spec(
                args.spec_file, out_override=args.out, seed_override=args.seed
            )
            outdir = run_experiment(spec, jobs=jobs)
        except UsageError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        except ExperimentAssertionError as exc:
            print(f"assertion failed: {exc}", file=sys.stderr)
            return 2
        except PolarDenoiseError as exc:
            print(f"assertion failed: {exc}", file=sys.stderr)
            return 2
        print(f"wrote {outdir}")
        return 0

    parser.print_help(sys.stderr)
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
