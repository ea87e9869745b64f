"""Reconstruction (PSNR, NMSE) and segmentation (DC, HD95, AVD) metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import LabelError, ParameterError, ShapeError, UndefinedMetricError
from .phantom import CLASS_NAMES, NUM_CLASSES

FOREGROUND_CLASSES = (1, 2, 3)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shapes {a.shape} and {b.shape} disagree")


def psnr(x, ref, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _same_shape(x, ref)
    mse = np.mean((x - ref) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(max_value**2 / mse))


def nmse(x, ref) -> float:
    """``||x - ref||^2 / ||ref||^2``."""
    x = np.asarray(x)
    ref = np.asarray(ref)
    _same_shape(x, ref)
    denom = float(np.sum(np.abs(ref) ** 2))
    if denom == 0:
        raise UndefinedMetricError("NMSE is undefined for an all-zero reference")
    return float(np.sum(np.abs(x - ref) ** 2) / denom)


def _class_mask(labels: np.ndarray, class_id: int) -> np.ndarray:
    if not 0 <= class_id < NUM_CLASSES:
        raise LabelError(f"class id {class_id} outside 0..{NUM_CLASSES - 1}")
    return np.asarray(labels) == class_id


def dice(seg, ref, class_id: int) -> float:
    """Dice coefficient in percent; 100 when the class is absent from both maps."""
    seg, ref = np.asarray(seg), np.asarray(ref)
    _same_shape(seg, ref)
    a, b = _class_mask(seg, class_id), _class_mask(ref, class_id)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 100.0
    return 200.0 * int(np.logical_and(a, b).sum()) / total


def avd(seg, ref, class_id: int) -> float:
    """Absolute volume difference in percent of the reference volume."""
    seg, ref = np.asarray(seg), np.asarray(ref)
    _same_shape(seg, ref)
    a, b = _class_mask(seg, class_id), _class_mask(ref, class_id)
    nb = int(b.sum())
    if nb == 0:
        raise UndefinedMetricError(f"AVD undefined: class {class_id} absent from reference")
    return 100.0 * abs(int(a.sum()) - nb) / nb


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` that are 4-adjacent to a non-mask pixel or the image border."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def hd95(seg, ref, class_id: int, spacing: float = 1.0) -> float:
    """Symmetric 95th-percentile Hausdorff distance between class boundaries.

    Percentiles use linear interpolation; the result is the larger of the
    two directed percentiles, scaled by ``spacing``.
    """
    seg, ref = np.asarray(seg), np.asarray(ref)
    _same_shape(seg, ref)
    a, b = _class_mask(seg, class_id), _class_mask(ref, class_id)
    if not a.any() or not b.any():
        raise UndefinedMetricError(f"HD95 undefined: class {class_id} empty in a mask")
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return spacing * float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


@dataclass
class SamplePrediction:
    """Model output for one sample; either field may be absent."""

    labels: np.ndarray | None = None
    image: np.ndarray | None = None


@dataclass
class MetricsReport:
    per_class: dict[int, dict[str, float]]
    psnr: float | None
    nmse: float | None
    n_samples: int
    undefined: dict[int, dict[str, int]] = field(default_factory=dict)

    def mean_dice(self, classes: Sequence[int] = FOREGROUND_CLASSES) -> float:
        return float(np.mean([self.per_class[c]["dc"] for c in classes]))


def sample_metrics(pred: SamplePrediction, ref, spacing: float = 1.0) -> dict:
    """Metrics for one (prediction, LabeledSample) pair; undefined entries are None."""
    out: dict = {"per_class": {}, "psnr": None, "nmse": None}
    if pred.labels is not None:
        for c in FOREGROUND_CLASSES:
            entry = {"dc": dice(pred.labels, ref.labels, c)}
            for name, fn in (("hd95", lambda s, r, k: hd95(s, r, k, spacing)), ("avd", avd)):
                try:
                    entry[name] = fn(pred.labels, ref.labels, c)
                except UndefinedMetricError:
                    entry[name] = None
            out["per_class"][c] = entry
    if pred.image is not None:
        target = np.abs(ref.image)
        recon = np.abs(pred.image)
        out["psnr"] = psnr(recon, target)
        out["nmse"] = nmse(recon, target)
    return out


def evaluate_dataset(outputs: Sequence[SamplePrediction], references, spacing: float = 1.0) -> MetricsReport:
    """Arithmetic mean of per-sample metrics; undefined entries are skipped and counted."""
    if len(outputs) == 0:
        raise ParameterError("cannot evaluate an empty dataset")
    if len(outputs) != len(references):
        raise ShapeError(f"{len(outputs)} predictions for {len(references)} references")
    rows = [sample_metrics(p, r, spacing) for p, r in zip(outputs, references)]

    per_class: dict[int, dict[str, float]] = {}
    undefined: dict[int, dict[str, int]] = {}
    if rows[0]["per_class"]:
        for c in FOREGROUND_CLASSES:
            per_class[c], undefined[c] = {}, {}
            for name in ("dc", "hd95", "avd"):
                vals = [r["per_class"][c][name] for r in rows if r["per_class"][c][name] is not None]
                undefined[c][name] = len(rows) - len(vals)
                per_class[c][name] = float(np.mean(vals)) if vals else math.nan

    def mean_of(key):
        vals = [r[key] for r in rows if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    return MetricsReport(per_class, mean_of("psnr"), mean_of("nmse"), len(rows), undefined)


def rank_methods(reports: dict[str, MetricsReport]) -> list[str]:
    """Order methods best-first: larger mean DC, then smaller mean HD95, then smaller mean AVD."""

    def key(name):
        r = reports[name]
        hd = np.nanmean([r.per_class[c]["hd95"] for c in FOREGROUND_CLASSES])
        av = np.nanmean([r.per_class[c]["avd"] for c in FOREGROUND_CLASSES])
        return (-r.mean_dice(), hd, av)

    return sorted(reports, key=key)


def reports_to_csv(reports: dict[str, MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "class", "dc", "hd95", "avd", "psnr", "nmse", "n_samples"])
    for name, r in reports.items():
        for c, entry in r.per_class.items():
            writer.writerow([name, CLASS_NAMES[c], entry["dc"], entry["hd95"], entry["avd"], r.psnr, r.nmse, r.n_samples])
        if not r.per_class:
            writer.writerow([name, "", "", "", "", r.psnr, r.nmse, r.n_samples])
    return buf.getvalue()


def _fmt(v, digits=2) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if math.isinf(v):
        return "inf"
    return f"{v:.{digits}f}"


def format_segmentation_table(reports: dict[str, MetricsReport]) -> str:
    """Rows = methods; columns = GM/WM/CSF x DC/HD/AVD."""
    header1 = f"{'Methods':<22}" + "".join(f"| {CLASS_NAMES[c]:^22}" for c in FOREGROUND_CLASSES)
    header2 = f"{'':<22}" + "| DC     HD     AVD    " * len(FOREGROUND_CLASSES)
    lines = [header1, header2, "-" * len(header2)]
    for name, r in reports.items():
        cells = ""
        for c in FOREGROUND_CLASSES:
            e = r.per_class.get(c, {})
            cells += f"| {_fmt(e.get('dc')):<6} {_fmt(e.get('hd95')):<6} {_fmt(e.get('avd')):<7}"
        lines.append(f"{name:<22}" + cells)
    return "\n".join(lines) + "\n"


def format_reconstruction_table(reports: dict[str, MetricsReport]) -> str:
    """Columns = methods; rows = PSNR (dB) and NMSE."""
    names = [n for n, r in reports.items() if r.psnr is not None]
    width = max([10] + [len(n) + 2 for n in names])
    lines = [f"{'':<6}" + "".join(f"{n:>{width}}" for n in names)]
    lines.append(f"{'PSNR':<6}" + "".join(f"{_fmt(reports[n].psnr):>{width}}" for n in names))
    lines.append(f"{'NMSE':<6}" + "".join(f"{_fmt(reports[n].nmse, 4):>{width}}" for n in names))
    return "\n".join(lines) + "\n"
