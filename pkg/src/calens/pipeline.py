"""File-level steps behind the command line: synth, train, calibrate, evaluate.

Each step reads and writes the directory layout described in ``calens.io``
and is deterministic for fixed inputs and seeds.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import io as cio
from .calibration import compose_heatmap, count_patterns, mean_heatmap, solve_coefficients
from .core import BinaryMask, SampleGrid
from .evaluation import (
    EmptyReference,
    calibration_curve,
    dsc,
    estimated_dsc,
    expected_calibration_error,
    flag_disagreements,
    pooled_intersection_precision,
    pooled_union_sensitivity,
    prevalence_consistency,
)
from .models import (
    dropout_masks,
    majority_vote,
    predict_mask,
    train_calibrated_ensemble,
    train_dropout_model,
    uncalibrated_ensemble,
)
from .synthdata import (
    analytic_probability,
    generate_blob2d,
    generate_gaussian1d,
    simulate_annotation,
)

logger = logging.getLogger(__name__)

TASKS = ("gaussian1d", "blob2d")


def _seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _write_json(path: Path, obj) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise cio.IoFailure(f"cannot write {path}: {exc}") from exc


# -- synth --------------------------------------------------------------------


def synth(task: str, n: int, seed: int, out, chunk: int = 100, size: int = 32) -> dict:
    """Write a synthetic dataset; returns a summary.

    gaussian1d writes ``n`` samples split into 1D "images" of ``chunk``
    samples; blob2d writes ``n`` images of ``size`` x ``size`` pixels plus a
    simulated annotator's masks.
    """
    out = Path(out)
    if task == "gaussian1d":
        if chunk < 1:
            raise ValueError("chunk must be positive")
        ds = generate_gaussian1d(n, seed)
        images, gts, probs = [], [], []
        for start in range(0, n, chunk):
            images.append(ds.xs[start : start + chunk])
            gts.append(ds.labels[start : start + chunk])
            probs.append(ds.probabilities[start : start + chunk])
        annotations = None
    elif task == "blob2d":
        ds = generate_blob2d(n, (size, size), seed)
        images = ds.images
        gts = [g.to_array() for g in ds.ground_truth]
        probs = ds.probability_maps()
        annotations = [a.to_array() for a in simulate_annotation(ds, _seed(seed, 1))]
    else:
        raise ValueError(f"unknown task {task!r}")

    for i, (img, gt, prob) in enumerate(zip(images, gts, probs)):
        stem = f"s{i:04d}"
        cio.write_array(out / "images" / f"{stem}.calb", np.asarray(img, dtype=np.float64))
        cio.write_array(out / "gt" / f"{stem}.calb", np.asarray(gt, dtype=np.uint8))
        cio.write_array(out / "prob" / f"{stem}.calb", np.asarray(prob, dtype=np.float64))
        if annotations is not None:
            cio.write_array(out / "annotation" / f"{stem}.calb", annotations[i].astype(np.uint8))
    voxels = int(sum(np.size(g) for g in gts))
    fg = int(sum(int(np.sum(g)) for g in gts))
    summary = {
        "task": task,
        "n": int(n),
        "seed": int(seed),
        "images": len(images),
        "voxels": voxels,
        "foreground_voxels": fg,
        "foreground_prevalence": fg / voxels,
    }
    _write_json(out / "meta.json", summary)
    return summary


# -- train --------------------------------------------------------------------


@dataclass
class LoadedSet:
    stems: List[str]
    images: List[np.ndarray]
    gts: List[np.ndarray]

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([im.reshape(-1) for im in self.images])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1) for g in self.gts])

    @property
    def groups(self) -> np.ndarray:
        return np.concatenate([np.full(im.size, i) for i, im in enumerate(self.images)])

    def split(self, flat: np.ndarray) -> List[np.ndarray]:
        out, pos = [], 0
        for im in self.images:
            out.append(flat[pos : pos + im.size].reshape(im.shape))
            pos += im.size
        return out


def load_set(root, with_gt: bool = True) -> LoadedSet:
    root = Path(root)
    stems = cio.match_stems(root / "images", root / "gt") if with_gt else cio.list_stems(root / "images")
    images = [cio.read_array(root / "images" / f"{s}.calb").astype(np.float64) for s in stems]
    gts = [cio.read_array(root / "gt" / f"{s}.calb").astype(np.uint8) for s in stems] if with_gt else []
    return LoadedSet(stems, images, gts)


@dataclass
class TrainResult:
    manifest: dict
    ensemble: object
    uncalibrated: list
    dropout_model: object


def _model_record(model, role: str, path: Path, root: Path, **extra) -> dict:
    cio.write_array(path, model.parameters)
    rec = {
        "role": role,
        "kind": model.kind,
        "loss_weight": model.loss_weight,
        "seed": model.seed,
        "hidden": model.hidden,
        "file": path.relative_to(root).as_posix(),
    }
    rec.update(extra)
    return rec


def train(cfg: cio.RunConfig, threads: int = 1) -> TrainResult:
    """Train the calibrated ensemble and both baselines; write masks and models."""
    out = Path(cfg.output_dir)
    data = load_set(cfg.train_dir)
    x, y, groups = data.features, data.labels, data.groups
    spec = cfg.ensemble_spec()
    hp = cfg.trainer_config()
    dspec = cfg.dropout_spec()

    ens = train_calibrated_ensemble(x, y, spec, groups=groups, threads=threads)
    for w, masks in zip(ens.weights, ens.cv_masks):
        for stem, m in zip(data.stems, data.split(masks)):
            cio.write_array(out / "preds" / cio.weight_dirname(w) / f"{stem}.calb", m.astype(np.uint8))

    uncal = uncalibrated_ensemble(x, y, spec.w_dsc, cfg.baselines.uncalibrated_seeds, hp, threads=threads)
    drop_seed = cfg.baselines.dropout.seed
    drop_model = train_dropout_model(x, y, spec.w_dsc, drop_seed, dspec, hp)

    members = []
    for w, fold_models in zip(ens.weights, ens.members):
        for f, m in enumerate(fold_models):
            path = out / "models" / "calibrated" / f"w{cio.weight_dirname(w)}_f{f}.calb"
            members.append(_model_record(m, "calibrated", path, out, fold=f))
    baselines = [
        _model_record(m, "uncalibrated", out / "models" / "uncalibrated" / f"s{s}.calb", out)
        for s, m in zip(cfg.baselines.uncalibrated_seeds, uncal)
    ]
    baselines.append(
        _model_record(
            drop_model,
            "dropout",
            out / "models" / "dropout.calb",
            out,
            drop_probability=dspec.drop_probability,
            passes=dspec.passes,
        )
    )
    manifest = {
        "loss_weights": ens.weights,
        "folds": spec.folds,
        "fold_of_image": {s: int(ens.fold_of[groups == i][0]) for i, s in enumerate(data.stems)},
        "members": members,
        "baselines": baselines,
        "train_images": len(data.stems),
    }

    if cfg.test_dir:
        test = load_set(cfg.test_dir, with_gt=False)
        manifest["test_images"] = len(test.stems)
        t = out / "test"
        for i, (stem, img) in enumerate(zip(test.stems, test.images)):
            cal = ens.predict_masks(img)
            for w, m in zip(ens.weights, cal):
                cio.write_array(t / "members" / "calibrated" / cio.weight_dirname(w) / f"{stem}.calb",
                                m.reshape(img.shape))
            un = [predict_mask(m, img) for m in uncal]
            for s, m in zip(cfg.baselines.uncalibrated_seeds, un):
                cio.write_array(t / "members" / "uncalibrated" / str(s) / f"{stem}.calb", m.to_array())
            dm = dropout_masks(drop_model, img, dspec, _seed(drop_seed, i))
            for k, m in enumerate(dm):
                cio.write_array(t / "members" / "dropout" / str(k) / f"{stem}.calb", m.to_array())
            cio.write_array(t / "heatmaps" / "uncalibrated" / f"{stem}.calb", mean_heatmap(un).to_array())
            cio.write_array(t / "heatmaps" / "dropout" / f"{stem}.calb", mean_heatmap(dm).to_array())
            cio.write_array(t / "prediction" / f"{stem}.calb", majority_vote(un).to_array())

    _write_json(out / "manifest.json", manifest)
    (out / "config.yaml").write_text(cio.dump_config(cfg), encoding="utf-8")
    return TrainResult(manifest, ens, uncal, drop_model)


# -- calibrate ----------------------------------------------------------------


def _load_member_stack(weight_paths, stems) -> Dict[str, List[BinaryMask]]:
    return {s: [cio.read_mask(p / f"{s}.calb") for _, p in weight_paths] for s in stems}


def calibrate(
    preds_dir,
    gt_dir,
    out,
    weighting: str = "count",
    nonnegative: bool = False,
    apply_dir=None,
    heatmaps_out=None,
):
    """Fit coefficients from cross-validation masks and write the record.

    With ``apply_dir`` (same ``<weight>/<stem>`` layout) the fitted heatmaps
    are composed and written to ``heatmaps_out``.
    """
    wdirs = cio.weight_dirs(preds_dir)
    stems = cio.match_stems(gt_dir, *[p for _, p in wdirs])
    stacks = _load_member_stack(wdirs, stems)
    hist = None
    gts = {}
    for s in stems:
        gts[s] = cio.read_mask(Path(gt_dir) / f"{s}.calb")
        h = count_patterns(stacks[s], gts[s])
        hist = h if hist is None else hist.merge(h)
    coeffs = solve_coefficients(hist, weighting=weighting, nonnegative=nonnegative)
    clipped = sum(compose_heatmap(stacks[s], coeffs).clipped for s in stems)
    extra = {"train_voxels": hist.total_voxels, "train_clip_count": clipped}

    applied = {}
    if apply_dir is not None:
        awdirs = cio.weight_dirs(apply_dir)
        if [w for w, _ in awdirs] != [w for w, _ in wdirs]:
            raise cio.StemMismatch(f"{apply_dir} holds different loss weights than {preds_dir}")
        astems = cio.match_stems(*[p for _, p in awdirs])
        astacks = _load_member_stack(awdirs, astems)
        total_clip = 0
        for s in astems:
            comp = compose_heatmap(astacks[s], coeffs)
            total_clip += comp.clipped
            if heatmaps_out is not None:
                cio.write_array(Path(heatmaps_out) / f"{s}.calb", comp.heatmap.to_array())
            applied[s] = comp.heatmap
        extra["apply_clip_count"] = total_clip
    cio.write_coefficients(out, coeffs, [w for w, _ in wdirs], extra)
    return coeffs, extra, applied


# -- evaluate -----------------------------------------------------------------


SUMMARY_HEADER = [
    "source",
    "ece",
    "ece_vs_analytic",
    "calibration_max_deviation",
    "mean_abs_dsc_error",
    "union_sensitivity",
    "intersection_precision",
    "fp_median",
    "fn_median",
]


def _metric(fn, *args):
    try:
        return fn(*args)
    except EmptyReference:
        return None


def evaluate(
    heatmaps: Dict[str, str],
    gt_dir,
    report_dir,
    pred_dir=None,
    annotation_dir=None,
    members: Optional[Dict[str, str]] = None,
    prob_dir=None,
    bandwidth: float = 0.05,
    bins: int = 10,
) -> List[list]:
    """Write every report table; returns the summary rows."""
    report = Path(report_dir)
    members = members or {}
    summary = []
    for name in sorted(heatmaps):
        hdir = heatmaps[name]
        dirs = [gt_dir, hdir] + [d for d in (pred_dir, annotation_dir, prob_dir) if d]
        stems = cio.match_stems(*dirs)
        hs = [cio.read_heatmap(Path(hdir) / f"{s}.calb") for s in stems]
        gts = [cio.read_mask(Path(gt_dir) / f"{s}.calb") for s in stems]

        curve = calibration_curve(hs, gts, bandwidth)
        cio.write_report(report / f"calibration_{name}.csv", *cio.curve_table(curve))
        row = {"source": name, "ece": expected_calibration_error(hs, gts, bins)}
        row["calibration_max_deviation"] = curve.max_deviation()

        if prob_dir:
            probs = [cio.read_heatmap(Path(prob_dir) / f"{s}.calb") for s in stems]
            row["ece_vs_analytic"] = expected_calibration_error(hs, probs, bins)

        if pred_dir:
            preds = [cio.read_mask(Path(pred_dir) / f"{s}.calb") for s in stems]
            rows = []
            for s, h, g, p in zip(stems, hs, gts, preds):
                true, est = dsc(g, p), estimated_dsc(h, p)
                rows.append([s, true, est, abs(est - true)])
            cio.write_report(report / f"dsc_{name}.csv", ["stem", "true_dsc", "estimated_dsc", "abs_error"], rows)
            row["mean_abs_dsc_error"] = float(np.mean([r[3] for r in rows]))
            curves = prevalence_consistency(hs, preds, gts, bandwidth)
            cio.write_report(report / f"prevalence_{name}.csv", *cio.prevalence_table(curves))

        if annotation_dir:
            ann = [cio.read_mask(Path(annotation_dir) / f"{s}.calb") for s in stems]
            flags = flag_disagreements(hs, ann, gts)
            cio.write_report(report / f"flags_{name}.csv", *cio.flag_table(flags))
            qrows = []
            for kind, vals, q in (
                ("false_positive", flags.fp_probabilities, flags.fp_quartiles),
                ("false_negative", flags.fn_probabilities, flags.fn_quartiles),
            ):
                qrows.append([kind, vals.size] + (list(q) if q else [None, None, None]))
            cio.write_report(report / f"flag_quartiles_{name}.csv", ["kind", "count", "q25", "median", "q75"], qrows)
            row["fp_median"] = flags.fp_quartiles[1] if flags.fp_quartiles else None
            row["fn_median"] = flags.fn_quartiles[1] if flags.fn_quartiles else None

        if name in members:
            mdirs = cio.member_dirs(members[name])
            cio.match_stems(gt_dir, *mdirs)
            mask_sets = [[cio.read_mask(d / f"{s}.calb") for d in mdirs] for s in stems]
            row["union_sensitivity"] = _metric(pooled_union_sensitivity, mask_sets, gts)
            row["intersection_precision"] = _metric(pooled_intersection_precision, mask_sets, gts)

        summary.append([row.get(k) for k in SUMMARY_HEADER])
    cio.write_report(report / "summary.csv", SUMMARY_HEADER, summary)
    return summary


def feature_sweep_table(result: TrainResult, coeffs, dspec, points=None):
    """Heatmap value versus feature for the 1D task, next to the true probability."""
    xs = np.linspace(-4.0, 4.0, 161) if points is None else np.asarray(points, dtype=np.float64)
    grid = SampleGrid(xs.shape)
    cal = compose_heatmap([BinaryMask(grid, m) for m in result.ensemble.predict_masks(xs)], coeffs).heatmap
    un = mean_heatmap([predict_mask(m, xs) for m in result.uncalibrated])
    dm = mean_heatmap(dropout_masks(result.dropout_model, xs, dspec, 0))
    header = ["x", "analytic_probability", "calibrated", "uncalibrated", "dropout"]
    rows = [list(r) for r in zip(xs, analytic_probability(xs), cal.values, un.values, dm.values)]
    return header, rows
