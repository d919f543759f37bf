"""Command line front end: generate / fit / eval / animate / export.

Flags mirror RunConfig keys one-to-one (underscores become dashes); a
JSON config file can seed the run and individual flags override it.
Failures print a machine-readable error record to stderr and exit
nonzero.  BODYFIT_WORKERS caps the rasterizer's thread count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .pipeline import (PipelineError, RunConfig, cmd_animate, cmd_eval,
                       cmd_export, cmd_fit, cmd_generate)


def _parse_flag_value(field: dataclasses.Field, text: str):
    if field.name in ("weights", "stage1", "stage2"):
        return json.loads(text)
    if field.name == "gt_beta":
        return tuple(float(v) for v in text.split(",") if v.strip())
    default = field.default if field.default is not dataclasses.MISSING \
        else field.default_factory()
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "0", "1"):
            raise argparse.ArgumentTypeError(f"{field.name} wants a boolean")
        return text.lower() in ("true", "1")
    return type(default)(text)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="JSON",
                        help="config file; explicit flags override its keys")
    for f in dataclasses.fields(RunConfig):
        parser.add_argument("--" + f.name.replace("_", "-"),
                            dest=f.name, default=None, metavar="V",
                            help=f"RunConfig.{f.name}")


def _build_config(args: argparse.Namespace) -> RunConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
        if not isinstance(base, dict):
            raise PipelineError("config file must hold a JSON object")
    for f in dataclasses.fields(RunConfig):
        raw = getattr(args, f.name)
        if raw is not None:
            base[f.name] = _parse_flag_value(f, raw)
    return RunConfig.from_dict(base)


def _run_generate(args) -> int:
    path = cmd_generate(_build_config(args))
    print(json.dumps({"bundle": str(path)}))
    return 0


def _run_fit(args) -> int:
    summary = cmd_fit(_build_config(args))
    print(json.dumps(summary, indent=2))
    return 0


def _run_eval(args) -> int:
    report = cmd_eval(args.fit_dir, args.bundle_dir,
                      with_iou=not args.no_iou,
                      iou_resolution=args.iou_resolution,
                      chamfer_samples=args.chamfer_samples, seed=args.seed)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _run_animate(args) -> int:
    paths = cmd_animate(args.checkpoint, args.poses, args.output)
    print(json.dumps({"frames": len(paths), "output": args.output}))
    return 0


def _run_export(args) -> int:
    paths = cmd_export(args.checkpoint, args.output)
    print(json.dumps({"frames": len(paths), "output": args.output}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="bodyfit",
        description="Fit a rigged body plus pose-conditioned offset surface "
                    "to a depth/silhouette/landmark capture.")
    sub = top.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="render a synthetic capture bundle")
    _add_config_flags(gen)
    gen.set_defaults(run=_run_generate)

    fit = sub.add_parser("fit", help="two-stage fit of a bundle")
    _add_config_flags(fit)
    fit.set_defaults(run=_run_fit)

    ev = sub.add_parser("eval", help="score a fit against ground truth")
    ev.add_argument("fit_dir")
    ev.add_argument("bundle_dir")
    ev.add_argument("--no-iou", action="store_true",
                    help="skip the (slow) volumetric IoU")
    ev.add_argument("--iou-resolution", type=int, default=128)
    ev.add_argument("--chamfer-samples", type=int, default=10000)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(run=_run_eval)

    ani = sub.add_parser("animate", help="drive a fitted model with new poses")
    ani.add_argument("checkpoint")
    ani.add_argument("poses", help="JSON file with a \"poses\" (N, J, 3) array")
    ani.add_argument("output")
    ani.set_defaults(run=_run_animate)

    exp = sub.add_parser("export", help="re-export meshes from a checkpoint")
    exp.add_argument("checkpoint")
    exp.add_argument("output")
    exp.set_defaults(run=_run_export)
    return top


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
