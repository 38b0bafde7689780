"""pcnclaws-viz command line: render trajectories, plot logs."""

from __future__ import annotations

import argparse
import sys

from .format import BadFile
from .plots import ParseError, plot_logs
from .render import ColorBy, EmptyRange, RenderSpec, render_trajectory


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcnclaws-viz")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render trajectory frames to PNGs")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--gt", default=None, help="ground-truth file for side-by-side panels")
    p.add_argument("--axis", default="y", choices=("x", "y", "z"))
    p.add_argument("--frames", default=None,
                   help="frame range start:end (end exclusive)")
    p.add_argument("--point-size", type=float, default=4.0)
    p.add_argument("--color-by", default="uniform",
                   choices=[c.value for c in ColorBy])

    p = sub.add_parser("plot", help="plot a training or estimation log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        if args.command == "render":
            frame_range = None
            if args.frames:
                lo, hi = args.frames.split(":")
                frame_range = (int(lo), int(hi))
            spec = RenderSpec(input_path=args.input, out_dir=args.out,
                              gt_path=args.gt, axis=args.axis,
                              frame_range=frame_range,
                              point_size=args.point_size,
                              color_by=ColorBy(args.color_by))
            written = render_trajectory(spec)
            print(f"wrote {len(written)} frames to {args.out}")
        else:
            data = plot_logs(args.log, args.out)
            print(f"plotted {len(data.steps)} {data.kind} iterations to {args.out}")
        return 0
    except (BadFile, EmptyRange, ParseError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
