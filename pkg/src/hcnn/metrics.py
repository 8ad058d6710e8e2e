"""Pixel-level F-score against ground truth and the unsupervised Q-measure."""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DegenerateInputError, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class EvalReport:
    precision: float
    recall: float
    f_score: float
    q_value: float = math.nan


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be strictly binary")
    return a.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    """Per-pixel counts with crack (1) as the positive class."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    p = _binary(pred, "prediction")
    g = _binary(gt, "ground truth")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def f_score(c: ConfusionCounts) -> Tuple[float, float, float]:
    """``(precision, recall, F)``; empty denominators give 0."""
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


def q_measure(original, segmented, classes: Optional[Sequence] = (0, 1), log_base: float = 10.0) -> float:
    """Q-evaluation of a segmentation of a grayscale ``[0, 255]`` image; lower is better.

    ``classes`` lists the labels that make up the segmentation (all must be
    present); ``None`` takes the labels found in ``segmented``.  The region
    error of a class is its summed squared deviation from the class mean
    intensity.
    """
    img = np.asarray(original, dtype=np.float64)
    seg = np.asarray(segmented)
    if img.shape != seg.shape:
        raise ShapeError(f"image shape {img.shape} != segmentation shape {seg.shape}")
    if img.ndim != 2:
        raise ShapeError(f"expected 2-D planes, got {img.ndim}-D")
    labels = np.unique(seg) if classes is None else list(classes)
    if classes is not None:
        extra = set(np.unique(seg).tolist()) - set(labels)
        if extra:
            raise ValueError(f"segmentation contains labels {sorted(extra)} outside {labels}")
    areas = []
    errors = []
    for label in labels:
        values = img[seg == label]
        if values.size == 0:
            raise DegenerateInputError(f"class {label!r} is empty")
        areas.append(values.size)
        errors.append(float(((values - values.mean()) ** 2).sum()))
    same_size = Counter(areas)
    j, k = img.shape
    total = 0.0
    for area, e2 in zip(areas, errors):
        total += e2 / (1.0 + math.log(area, log_base)) + (same_size[area] / area) ** 2
    return math.sqrt(len(labels)) * total / (10000.0 * j * k)


# -- directory evaluation ----------------------------------------------------


@dataclass
class ImageResult:
    stem: str
    counts: ConfusionCounts
    report: EvalReport


def evaluate_pair(pred, gt, original=None) -> Tuple[ConfusionCounts, EvalReport]:
    counts = confusion(pred, gt)
    p, r, f = f_score(counts)
    q = math.nan
    if original is not None:
        try:
            q = q_measure(original, pred)
        except DegenerateInputError:
            q = math.nan
    return counts, EvalReport(p, r, f, q)


def aggregate(results: Sequence[ImageResult]) -> EvalReport:
    """Micro-averaged F over summed counts; Q as the mean over images where it is defined."""
    total = ConfusionCounts(0, 0, 0, 0)
    for res in results:
        total = total + res.counts
    p, r, f = f_score(total)
    qs = [res.report.q_value for res in results if not math.isnan(res.report.q_value)]
    return EvalReport(p, r, f, float(np.mean(qs)) if qs else math.nan)


def evaluate_dir(pred_dir, gt_dir, original_dir=None) -> Tuple[List[ImageResult], EvalReport]:
    """Score every prediction mask against the ground-truth mask with the same stem."""
    from .data import pair_stems, read_gray, read_mask

    dirs = [pred_dir, gt_dir] + ([original_dir] if original_dir is not None else [])
    results = []
    for stem, paths in pair_stems(*dirs):
        pred = read_mask(paths[0])[0, 0]
        gt = read_mask(paths[1])[0, 0]
        original = read_gray(paths[2]) if original_dir is not None else None
        if original is not None and original.shape != pred.shape:
            raise ShapeError(f"{stem!r}: original {original.shape} and prediction {pred.shape} differ in size")
        counts, report = evaluate_pair(pred, gt, original)
        results.append(ImageResult(stem, counts, report))
    return results, aggregate(results)


CSV_COLUMNS = ("stem", "precision", "recall", "f", "q")
AGGREGATE_STEM = "aggregate"


def eval_csv(results: Sequence[ImageResult], overall: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for res in results:
        r = res.report
        writer.writerow([res.stem, repr(r.precision), repr(r.recall), repr(r.f_score), repr(r.q_value)])
    writer.writerow([AGGREGATE_STEM, repr(overall.precision), repr(overall.recall),
                     repr(overall.f_score), repr(overall.q_value)])
    return buf.getvalue()


def write_eval_csv(path: str | Path, results: Sequence[ImageResult], overall: EvalReport) -> None:
    from .checkpoint import atomic_write_bytes

    atomic_write_bytes(path, eval_csv(results, overall).encode("utf-8"))
