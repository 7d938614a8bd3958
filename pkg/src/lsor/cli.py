"""Command-line interface.

Subcommands: reduce (ROM/BLM descriptor), assess (assessment report),
simulate (one variant, one solver), bench (timing table), compare (full
bundle). Exit codes: 0 success, 2 assessment failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys as _sys

import numpy as np

from . import harness
from .errors import (
    AssessmentFailed,
    EvaluationError,
    InfeasibleConstants,
    LsorError,
    MaxStepsExceeded,
    NewtonDivergence,
    NoFeasibleEpsilon,
    NoTimeScaleSeparation,
    SingularFastBlock,
    SingularJacobian,
    SingularNetwork,
    StepSizeUnderflow,
)

EXIT_OK = 0
EXIT_ASSESSMENT = 2
EXIT_NUMERICAL = 3

_ASSESSMENT_ERRORS = (AssessmentFailed, NoTimeScaleSeparation, InfeasibleConstants,
                      NoFeasibleEpsilon)
_NUMERICAL_ERRORS = (NewtonDivergence, SingularJacobian, StepSizeUnderflow,
                     MaxStepsExceeded, SingularNetwork, SingularFastBlock,
                     EvaluationError)


def _add_common(p):
    p.add_argument("config", help="microgrid config JSON")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--rtol", type=float, default=None)
    p.add_argument("--atol", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--grid", type=int, default=harness.COMPARISON_GRID,
                   help="comparison grid points")


def build_parser():
    ap = argparse.ArgumentParser(prog="lsor",
                                 description="large-signal order reduction toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("reduce", "assess", "simulate", "bench", "compare"):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "simulate":
            p.add_argument("--variant", default="full",
                           choices=["full", "rom", "rom-blm", "smallsig"])
            p.add_argument("--solver", default="stiff",
                           choices=["explicit", "stiff"])
    return ap


def _overrides(args):
    ov = {}
    if args.rtol is not None:
        ov["rtol"] = args.rtol
    if args.atol is not None:
        ov["atol"] = args.atol
    return ov or None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except _ASSESSMENT_ERRORS as exc:
        print(f"assessment failure: {exc}", file=_sys.stderr)
        return EXIT_ASSESSMENT
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=_sys.stderr)
        return EXIT_NUMERICAL
    except LsorError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_NUMERICAL


def _dispatch(args) -> int:
    os.makedirs(args.out, exist_ok=True)

    if args.command == "reduce":
        desc = harness.reduce_descriptor(args.config)
        path = os.path.join(args.out, "rom_descriptor.json")
        with open(path, "w") as fh:
            json.dump(desc, fh, indent=2)
        print(path)
        return EXIT_OK

    if args.command == "assess":
        bundle = harness.run_scenario(args.config, grid_points=64, seed=args.seed,
                                      solver_overrides=_overrides(args), bench=False)
        path = os.path.join(args.out, "report.json")
        if bundle.report is not None:
            bundle.report.to_json(path)
        else:
            with open(path, "w") as fh:
                json.dump({"accepted": False, "error": bundle.report_error}, fh,
                          indent=2)
        print(path)
        return EXIT_OK if bundle.report is not None else EXIT_ASSESSMENT

    if args.command == "simulate":
        bundle = harness.run_scenario(args.config, grid_points=args.grid,
                                      seed=args.seed,
                                      solver_overrides=_overrides(args), bench=False)
        variant = args.variant.replace("-", "_")
        mat = bundle.series[variant]
        path = os.path.join(args.out, f"{variant}.csv")
        header = ",".join(["t", *bundle.labels])
        np.savetxt(path, np.column_stack([bundle.grid, mat]), delimiter=",",
                   header=header, comments="", fmt="%.17g")
        print(path)
        return EXIT_OK

    if args.command == "bench":
        bundle = harness.run_scenario(args.config, grid_points=64, seed=args.seed,
                                      solver_overrides=_overrides(args), bench=True)
        path = os.path.join(args.out, "timing.csv")
        with open(path, "w") as fh:
            fh.write("solver,model,wall_s,steps,rhs_evals\n")
            for row in bundle.timing:
                fh.write(f"{row['solver']},{row['model']},{row['wall_s']:.6f},"
                         f"{row['steps']},{row['rhs_evals']}\n")
        print(path)
        return EXIT_OK

    if args.command == "compare":
        bundle = harness.run_scenario(args.config, grid_points=args.grid,
                                      seed=args.seed,
                                      solver_overrides=_overrides(args), bench=True)
        for path in harness.emit(bundle, args.out):
            print(path)
        return EXIT_OK

    raise AssertionError("unknown command")


if __name__ == "__main__":
    raise SystemExit(main())
