"""Command-line driver.

Exit codes: 0 success, 2 invalid arguments or config, 3 I/O failure,
4 training diverged, 5 degenerate calibration system (coefficients are still
written).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io as cio
from . import pipeline
from .core import CalensError
from .models import DivergedTraining

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_DIVERGED, EXIT_DEGENERATE = 0, 2, 3, 4, 5

logger = logging.getLogger("calens")

DEMO_SIZES = {"gaussian1d": 10000, "blob2d": 20}

DEMO_CONFIG = """\
train_dir: train
test_dir: test
output_dir: run
ensemble:
  w_dsc: 0.0
  offsets: [-3, -2, -1, 0, 1, 2, 3]
  folds: 5
  seed: 0
trainer:
  kind: logistic
  epochs: 500
  learning_rate: 0.1
  momentum: 0.9
  hidden: 16
  eps: 1.0
baselines:
  uncalibrated_seeds: [0, 1, 2, 3, 4, 5, 6]
  dropout:
    drop_probability: 0.1
    passes: 7
    seed: 0
evaluation:
  bandwidth: 0.05
  bins: 10
"""


def _pairs(values, flag):
    out = {}
    for v in values or []:
        name, sep, path = v.partition("=")
        if not sep or not name or not path:
            raise argparse.ArgumentTypeError(f"{flag} expects NAME=DIR, got {v!r}")
        out[name] = path
    return out


def cmd_synth(args):
    summary = pipeline.synth(args.task, args.n, args.seed, args.out, chunk=args.chunk, size=args.size)
    print(
        f"{summary['task']}: {summary['images']} images, {summary['voxels']} voxels, "
        f"foreground prevalence {summary['foreground_prevalence']:.4f}"
    )
    return EXIT_OK


def cmd_train(args):
    cfg = cio.load_config(args.config)
    result = pipeline.train(cfg, threads=args.threads)
    m = result.manifest
    print(f"trained {len(m['members'])} calibrated members and {len(m['baselines'])} baseline models")
    print(f"outputs in {cfg.output_dir}")
    return EXIT_OK


def cmd_calibrate(args):
    coeffs, extra, _ = pipeline.calibrate(
        args.preds,
        args.gt,
        args.out,
        weighting=args.weighting,
        nonnegative=args.nonnegative,
        apply_dir=args.apply,
        heatmaps_out=args.heatmaps_out,
    )
    print("coefficients: " + " ".join(f"{a:.6g}" for a in coeffs.a))
    print(f"residual {coeffs.residual_norm:.6g}, zero-pattern fg rate {coeffs.zero_pattern_fg_rate:.6g}, "
          f"clipped {extra['train_clip_count']}")
    if coeffs.degenerate:
        print("warning: degenerate system, minimum-norm solution written", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_evaluate(args):
    heatmaps = _pairs(args.heatmaps, "--heatmaps")
    members = _pairs(args.members, "--members")
    rows = pipeline.evaluate(
        heatmaps,
        args.gt,
        args.report,
        pred_dir=args.pred,
        annotation_dir=args.annotation,
        members=members,
        prob_dir=args.prob,
        bandwidth=args.bandwidth,
        bins=args.bins,
    )
    print(cio.format_table(pipeline.SUMMARY_HEADER, rows), end="")
    return EXIT_OK


def cmd_demo(args):
    """synth -> train -> calibrate -> evaluate on one task, in one folder."""
    root = Path(args.out)
    n = args.n if args.n is not None else DEMO_SIZES[args.task]
    pipeline.synth(args.task, n, args.seed, root / "train")
    pipeline.synth(args.task, n, args.seed + 1, root / "test")
    (root / "run.yaml").write_text(DEMO_CONFIG, encoding="utf-8")
    cfg = cio.load_config(root / "run.yaml")
    result = pipeline.train(cfg, threads=args.threads)
    run = Path(cfg.output_dir)
    coeffs, _, _ = pipeline.calibrate(
        run / "preds",
        root / "train" / "gt",
        run / "coefficients.txt",
        apply_dir=run / "test" / "members" / "calibrated",
        heatmaps_out=run / "test" / "heatmaps" / "calibrated",
    )
    heatmaps = {k: str(run / "test" / "heatmaps" / k) for k in ("calibrated", "uncalibrated", "dropout")}
    members = {k: str(run / "test" / "members" / k) for k in heatmaps}
    ann = root / "test" / "annotation"
    rows = pipeline.evaluate(
        heatmaps,
        root / "test" / "gt",
        run / "report",
        pred_dir=run / "test" / "prediction",
        annotation_dir=ann if ann.is_dir() else None,
        members=members,
        prob_dir=root / "test" / "prob",
        bandwidth=cfg.evaluation.bandwidth,
        bins=cfg.evaluation.bins,
    )
    if args.task == "gaussian1d":
        cio.write_report(run / "report" / "heatmap_vs_feature.csv", *pipeline.feature_sweep_table(result, coeffs, cfg.dropout_spec()))
    print(cio.format_table(pipeline.SUMMARY_HEADER, rows), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="calens", description="Calibrated ensembles for probabilistic segmentation.")
    parser.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--task", choices=pipeline.TASKS, required=True)
    p.add_argument("--n", type=int, required=True, help="samples (gaussian1d) or images (blob2d)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--chunk", type=int, default=100, help="gaussian1d samples per file")
    p.add_argument("--size", type=int, default=32, help="blob2d image extent")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train calibrated ensemble and baselines")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", parents=[common], help="fit ensemble coefficients")
    p.add_argument("--preds", required=True, help="folder of <loss weight>/<stem>.calb masks")
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="coefficient record to write")
    p.add_argument("--weighting", choices=("count", "pattern"), default="count")
    p.add_argument("--nonnegative", action="store_true")
    p.add_argument("--apply", help="member masks to compose into heatmaps (same layout as --preds)")
    p.add_argument("--heatmaps-out", help="where composed heatmaps go")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", parents=[common], help="write evaluation tables")
    p.add_argument("--heatmaps", nargs="+", required=True, metavar="NAME=DIR")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", help="binary predictions for DSC estimation and prevalence curves")
    p.add_argument("--annotation", help="annotator masks to check against the heatmaps")
    p.add_argument("--members", nargs="+", metavar="NAME=DIR", help="member masks for union/intersection metrics")
    p.add_argument("--prob", help="reference probabilities (synthetic data)")
    p.add_argument("--bandwidth", type=float, default=0.05)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("demo", parents=[common], help="run the whole pipeline on synthetic data")
    p.add_argument("--task", choices=pipeline.TASKS, default="gaussian1d")
    p.add_argument("--n", type=int, help="samples or images per split (default 10000 / 20)")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except cio.IoFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergedTraining as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CalensError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
