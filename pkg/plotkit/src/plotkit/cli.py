"""lsor-plot: render overlay figures from a completed run directory."""

from __future__ import annotations

import argparse
import sys

from .render import MissingColumnError, PlotSpec, render


def build_parser():
    ap = argparse.ArgumentParser(prog="lsor-plot")
    ap.add_argument("run_dir", help="directory produced by the solver harness")
    ap.add_argument("--quantities", required=True,
                    help="comma-separated state names, e.g. P,Q,V_od")
    ap.add_argument("--format", default="png", choices=["png", "svg"])
    ap.add_argument("--out", default=None, help="output directory (default: run dir)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = PlotSpec(
        run_dir=args.run_dir,
        quantities=[q.strip() for q in args.quantities.split(",") if q.strip()],
        out_dir=args.out,
        fmt=args.format,
    )
    try:
        records = render(spec)
    except MissingColumnError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"run output not found: {exc}", file=sys.stderr)
        return 1
    for path, quantity, n in records:
        print(f"{path} ({quantity}: {n} series)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
