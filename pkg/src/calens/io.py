"""Serialization: array container, report tables, coefficient records, run config.

Array container layout (all integers little-endian)::

    offset  size       field
    0       4          magic b"CALB"
    4       1          version (1)
    5       1          dtype code: 0 = uint8, 1 = float64
    6       1          ndim (>= 1)
    7       4 * ndim   extents, uint32
    ...     payload    row-major values, prod(extents) * itemsize bytes

Dataset directories hold ``images/``, ``gt/`` and optional ``prob/`` and
``annotation/`` folders of ``<stem>.calb`` files; member predictions live in
``preds/<loss weight>/<stem>.calb``.
"""
from __future__ import annotations

import csv
import dataclasses
import io as _stdio
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import yaml

from .core import BinaryMask, CalensError, Heatmap, LengthMismatch

MAGIC = b"CALB"
VERSION = 1
SUFFIX = ".calb"
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<f8")}
_CODES = {np.dtype("uint8"): 0, np.dtype("float64"): 1}


class IoFailure(CalensError, OSError):
    pass


class CorruptHeader(IoFailure):
    pass


class UnsupportedVersion(IoFailure):
    pass


class ArrayLengthMismatch(IoFailure, LengthMismatch):
    pass


class StemMismatch(IoFailure):
    pass


class ConfigError(CalensError, ValueError):
    pass


def encode_array(array) -> bytes:
    if isinstance(array, (BinaryMask, Heatmap)):
        array = array.to_array()
    arr = np.asarray(array)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}; use uint8 or float64")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 255 or any(s >= 2**32 for s in arr.shape):
        raise ValueError(f"shape {arr.shape} does not fit the header")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_array(data: bytes) -> np.ndarray:
    if len(data) < 7:
        raise CorruptHeader(f"{len(data)} bytes is shorter than the fixed header")
    if data[:4] != MAGIC:
        raise CorruptHeader(f"bad magic {data[:4]!r}")
    version, code, ndim = struct.unpack_from("<BBB", data, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"container version {version}")
    if code not in _DTYPES:
        raise CorruptHeader(f"unknown dtype code {code}")
    if ndim == 0:
        raise CorruptHeader("ndim must be at least 1")
    head = 7 + 4 * ndim
    if len(data) < head:
        raise CorruptHeader("header truncated inside the extents")
    shape = struct.unpack_from(f"<{ndim}I", data, 7)
    dtype = _DTYPES[code]
    expected = math.prod(shape) * dtype.itemsize
    if len(data) - head != expected:
        raise ArrayLengthMismatch(f"payload has {len(data) - head} bytes, header implies {expected}")
    out = np.frombuffer(data, dtype=dtype, offset=head).reshape(shape)
    return out.astype(dtype.newbyteorder("="), copy=True)


def write_array(path, array) -> None:
    data = encode_array(array)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_array(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_array(data)


def read_mask(path) -> BinaryMask:
    arr = read_array(path)
    if arr.dtype != np.uint8:
        raise IoFailure(f"{path} does not hold a uint8 mask")
    return BinaryMask.from_array(arr)


def read_heatmap(path) -> Heatmap:
    return Heatmap.from_array(read_array(path).astype(np.float64))


# -- dataset layout ---------------------------------------------------------


def list_stems(directory) -> List[str]:
    d = Path(directory)
    if not d.is_dir():
        raise IoFailure(f"{d} is not a directory")
    return sorted(p.stem for p in d.glob(f"*{SUFFIX}"))


def read_dir(directory, reader=read_array) -> Dict[str, object]:
    d = Path(directory)
    return {stem: reader(d / f"{stem}{SUFFIX}") for stem in list_stems(d)}


def match_stems(*dirs) -> List[str]:
    """Stems shared by every directory; any difference is an error."""
    stems = [list_stems(d) for d in dirs]
    for d, s in zip(dirs[1:], stems[1:]):
        if s != stems[0]:
            missing = sorted(set(stems[0]) ^ set(s))
            raise StemMismatch(f"{dirs[0]} and {d} differ in stems: {missing[:5]}")
    if not stems[0]:
        raise IoFailure(f"no {SUFFIX} files in {dirs[0]}")
    return stems[0]


def weight_dirname(w: float) -> str:
    return f"{w:g}"


def weight_dirs(preds_dir) -> List[tuple]:
    """(weight, path) for every numeric subfolder, highest weight first."""
    root = Path(preds_dir)
    if not root.is_dir():
        raise IoFailure(f"{root} is not a directory")
    out = []
    for p in root.iterdir():
        if p.is_dir():
            try:
                out.append((float(p.name), p))
            except ValueError:
                continue
    if not out:
        raise IoFailure(f"no weight folders under {root}")
    return sorted(out, key=lambda t: -t[0])


def member_dirs(root) -> List[Path]:
    """Subfolders of a member directory in a stable order (numeric when possible)."""
    root = Path(root)
    if not root.is_dir():
        raise IoFailure(f"{root} is not a directory")
    subs = [p for p in root.iterdir() if p.is_dir()]

    def key(p):
        try:
            return (0, -float(p.name), p.name)
        except ValueError:
            return (1, 0.0, p.name)

    return sorted(subs, key=key)


# -- report tables ------------------------------------------------------------


def format_value(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    return str(v)


def format_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_report(path, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Write a comma-delimited table with a header row; returns the text."""
    text = format_table(header, rows)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return text


def curve_table(curve):
    header = ["t", "observed_fg_rate", "effective_weight", "valid"]
    rows = zip(curve.eval_points, curve.observed_fg_rate, curve.effective_weight, curve.valid)
    return header, [list(r) for r in rows]


def prevalence_table(curves):
    header = ["t", "gt_fg_rate", "pred_fg_rate", "effective_weight", "valid"]
    rows = zip(curves.eval_points, curves.gt_rate, curves.pred_rate, curves.effective_weight, curves.valid)
    return header, [list(r) for r in rows]


def flag_table(report):
    rows = [["false_positive", v] for v in report.fp_probabilities]
    rows += [["false_negative", v] for v in report.fn_probabilities]
    return ["kind", "probability"], rows


# -- coefficient records -----------------------------------------------------


def write_coefficients(path, coeffs, loss_weights: Sequence[float], extra: Optional[dict] = None) -> str:
    """Plain-text record: ``key,value`` diagnostics, a blank line, then the
    per-member table. Coefficients use round-trip (17 digit) precision."""
    if len(loss_weights) != coeffs.a.size:
        raise LengthMismatch("one loss weight per coefficient required")
    lines = [
        "# calibrated ensemble coefficients",
        f"n_models,{coeffs.a.size}",
        f"weighting,{coeffs.weighting}",
        f"residual_norm,{coeffs.residual_norm!r}",
        f"zero_pattern_fg_rate,{coeffs.zero_pattern_fg_rate!r}",
        f"degenerate,{int(coeffs.degenerate)}",
        "dropped_patterns," + ";".join("".join(map(str, b)) for b in coeffs.dropped_patterns),
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k},{v}")
    lines += ["", "index,loss_weight,coefficient"]
    lines += [f"{k},{float(w)!r},{float(a)!r}" for k, (w, a) in enumerate(zip(loss_weights, coeffs.a))]
    text = "\n".join(lines) + "\n"
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return text


def read_coefficients(path):
    """Returns ``(loss_weights, a, diagnostics)``."""
    from .calibration import CalibrationCoefficients

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    head, _, table = text.partition("\n\n")
    meta = {}
    for line in head.splitlines():
        if line and not line.startswith("#"):
            k, _, v = line.partition(",")
            meta[k] = v
    rows = list(csv.reader(table.splitlines()))[1:]
    weights = [float(r[1]) for r in rows]
    a = np.array([float(r[2]) for r in rows])
    dropped = [tuple(int(c) for c in s) for s in meta.get("dropped_patterns", "").split(";") if s]
    coeffs = CalibrationCoefficients(
        a=a,
        residual_norm=float(meta.get("residual_norm", "nan")),
        dropped_patterns=dropped,
        zero_pattern_fg_rate=float(meta.get("zero_pattern_fg_rate", "nan")),
        degenerate=meta.get("degenerate", "0") == "1",
        weighting=meta.get("weighting", "count"),
    )
    return weights, coeffs, meta


# -- run configuration ---------------------------------------------------------


@dataclass
class TrainerSection:
    kind: str = "logistic"
    epochs: int = 500
    learning_rate: float = 0.1
    momentum: float = 0.9
    hidden: int = 16
    eps: float = 1.0


@dataclass
class EnsembleSection:
    w_dsc: float = 0.0
    offsets: List[int] = field(default_factory=lambda: [-3, -2, -1, 0, 1, 2, 3])
    folds: int = 5
    seed: int = 0


@dataclass
class DropoutSection:
    drop_probability: float = 0.1
    passes: int = 7
    seed: int = 0


@dataclass
class BaselineSection:
    uncalibrated_seeds: List[int] = field(default_factory=lambda: list(range(7)))
    dropout: DropoutSection = field(default_factory=DropoutSection)


@dataclass
class EvaluationSection:
    bandwidth: float = 0.05
    bins: int = 10


@dataclass
class RunConfig:
    """Run configuration, read from YAML. Unknown keys are rejected.

    ``train_dir`` is required. ``test_dir`` (optional) gets member masks and
    baseline heatmaps written for it. Relative paths resolve against the
    config file's folder.
    """

    train_dir: str = ""
    test_dir: Optional[str] = None
    output_dir: str = "run"
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def ensemble_spec(self):
        from .models import EnsembleSpec

        return EnsembleSpec(
            w_dsc=self.ensemble.w_dsc,
            offsets=tuple(self.ensemble.offsets),
            folds=self.ensemble.folds,
            seed=self.ensemble.seed,
            trainer=self.trainer_config(),
        )

    def trainer_config(self):
        from .models import TrainerConfig

        return TrainerConfig(**dataclasses.asdict(self.trainer))

    def dropout_spec(self):
        from .models import DropoutSpec

        d = self.baselines.dropout
        return DropoutSpec(drop_probability=d.drop_probability, passes=d.passes)


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        sub = _SECTIONS.get(ftype)
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    return cls(**kwargs)


_SECTIONS = {
    "EnsembleSection": EnsembleSection,
    "TrainerSection": TrainerSection,
    "BaselineSection": BaselineSection,
    "DropoutSection": DropoutSection,
    "EvaluationSection": EvaluationSection,
}


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = _build(RunConfig, data or {}, "config")
    if not cfg.train_dir:
        raise ConfigError("config: train_dir is required")
    base = path.resolve().parent
    cfg.train_dir = str(base / cfg.train_dir)
    cfg.output_dir = str(base / cfg.output_dir)
    if cfg.test_dir:
        cfg.test_dir = str(base / cfg.test_dir)
    try:
        cfg.ensemble_spec()
        cfg.dropout_spec()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from exc
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=False)
