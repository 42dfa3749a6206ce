"""Detection evaluation: greedy matching, all-point AP, mAP by partition, paired t-test."""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from lsda.boxes import Box, boxes_to_array, iou, iou_matrix  # noqa: F401  (iou re-exported)
from lsda.detect import Detection, read_detections
from lsda.exceptions import UndefinedStatisticError, ValidationError
from lsda.model import CategoryPartition
from lsda.synth import DatasetManifest


def _score_order(detections: Sequence[Detection]) -> list[int]:
    return sorted(range(len(detections)),
                  key=lambda i: (-detections[i].score, detections[i].image_id, detections[i].box.as_tuple()))


def match_detections(detections: Sequence[Detection], gt: Mapping[str, Sequence[Box]],
                     iou_threshold: float = 0.5):
    """Greedy matching of one category's detections to its ground truth.

    Detections are visited by descending score; each takes the unmatched
    ground-truth box of its image with the highest IoU at or above the
    threshold.  Returns ``(ordered, tp, matched)``: detections in visiting
    order, a boolean TP flag per ordered detection, and per image a boolean
    array marking matched ground truth.
    """
    order = _score_order(detections)
    ordered = [detections[i] for i in order]
    gt_arr = {k: boxes_to_array(v) for k, v in gt.items()}
    matched = {k: np.zeros(len(v), dtype=bool) for k, v in gt.items()}
    tp = np.zeros(len(ordered), dtype=bool)
    for n, det in enumerate(ordered):
        boxes = gt_arr.get(det.image_id)
        if boxes is None or len(boxes) == 0:
            continue
        overlaps = iou_matrix(boxes_to_array([det.box]), boxes)[0]
        overlaps[matched[det.image_id]] = -1.0
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold:
            tp[n] = True
            matched[det.image_id][best] = True
    return ordered, tp, matched


def average_precision(tp_flags, n_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP list."""
    if n_gt < 0:
        raise ValidationError("ground-truth count must be non-negative")
    tp = np.asarray(tp_flags, dtype=bool)
    if n_gt == 0:
        warnings.warn("category has no ground truth; AP defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # envelope: precision made non-increasing from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


@dataclass(frozen=True)
class EvalReport:
    partition: CategoryPartition
    ap: tuple[float, ...]
    n_images: int
    n_gt: int
    n_detections: int

    @property
    def per_category(self) -> dict[str, float]:
        return dict(zip(self.partition.names, self.ap))

    @property
    def map_trained(self) -> float:
        return float(np.mean([self.ap[i] for i in self.partition.B]))

    @property
    def map_heldout(self) -> float:
        return float(np.mean([self.ap[i] for i in self.partition.A]))

    @property
    def map_all(self) -> float:
        return float(np.mean(self.ap))

    def to_tsv(self) -> str:
        p = self.partition
        lines = ["category\tset\tap\n"]
        for i, name in enumerate(p.names):
            lines.append(f"{name}\t{'B' if i < p.m else 'A'}\t{self.ap[i]!r}\n")
        lines.append(f"mAP_trained\tB\t{self.map_trained!r}\n")
        lines.append(f"mAP_heldout\tA\t{self.map_heldout!r}\n")
        lines.append(f"mAP_all\tall\t{self.map_all!r}\n")
        lines.append(f"# images={self.n_images} gt_boxes={self.n_gt} detections={self.n_detections}\n")
        return "".join(lines)

    def table(self) -> str:
        p = self.partition
        return (
            f"{'mAP Trained':>12} {'mAP Held-out':>13} {'mAP All':>8}\n"
            f"{'(' + str(p.m) + ' cats)':>12} {'(' + str(len(p.A)) + ' cats)':>13} "
            f"{'(' + str(p.K) + ')':>8}\n"
            f"{100 * self.map_trained:12.2f} {100 * self.map_heldout:13.2f} {100 * self.map_all:8.2f}\n"
        )


def ground_truth(manifest: DatasetManifest) -> dict[int, dict[str, list[Box]]]:
    """Per category, per image, the ground-truth boxes of an eval manifest."""
    gt: dict[int, dict[str, list[Box]]] = defaultdict(dict)
    for c in range(manifest.partition.K):
        for rec in manifest.records:
            gt[c][rec.id] = [b for b, cat in rec.boxes if cat == c]
    return gt


def match_all(detections: Sequence[Detection], manifest: DatasetManifest, iou_threshold: float = 0.5):
    """Match every category; returns ``{category: (ordered, tp, matched)}``."""
    known = {rec.id for rec in manifest.records}
    unknown = {d.image_id for d in detections} - known
    if unknown:
        raise ValidationError(f"detections reference images missing from the manifest: {sorted(unknown)[:3]}")
    by_cat: dict[int, list[Detection]] = defaultdict(list)
    for d in detections:
        by_cat[d.category].append(d)
    gt = ground_truth(manifest)
    return {c: match_detections(by_cat[c], gt[c], iou_threshold) for c in range(manifest.partition.K)}


def evaluate(detections, manifest: DatasetManifest, partition: CategoryPartition | None = None,
             iou_threshold: float = 0.5) -> EvalReport:
    """Per-category AP and the trained / held-out / all mAP columns.

    ``detections`` is a sequence of :class:`Detection` or a path to a
    detection TSV file.
    """
    partition = partition or manifest.partition
    if partition != manifest.partition:
        raise ValidationError("partition does not match the eval manifest")
    if isinstance(detections, (str, Path)):
        detections = read_detections(detections, partition.names)
    matches = match_all(detections, manifest, iou_threshold)
    aps = []
    for c in range(partition.K):
        _, tp, matched = matches[c]
        n_gt = int(sum(len(v) for v in matched.values()))
        aps.append(average_precision(tp, n_gt))
    n_gt = sum(len(rec.boxes) for rec in manifest.records)
    return EvalReport(partition, tuple(aps), len(manifest.records), n_gt, len(detections))


# --- paired t-test -------------------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularised incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) of Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return regularized_beta(df / (df + t * t), df / 2.0, 0.5)


def student_t_cdf(t: float, df: float) -> float:
    tail = 0.5 * student_t_sf2(t, df)
    return 1.0 - tail if t >= 0 else tail


def paired_t_test(ap_method1: Sequence[float], ap_method2: Sequence[float]) -> tuple[float, float]:
    """Paired-sample t statistic (method2 - method1) and two-sided p value."""
    a = np.asarray(ap_method1, dtype=np.float64)
    b = np.asarray(ap_method2, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("paired t-test needs two equal-length 1-D samples")
    n = a.size
    if n < 2:
        raise ValidationError("paired t-test needs at least two pairs")
    d = b - a
    sd = float(np.std(d, ddof=1))
    if sd == 0.0 or sd <= 1e-14 * max(1.0, float(np.max(np.abs(d)))):
        raise UndefinedStatisticError("differences have zero variance; t statistic undefined")
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    return t, student_t_sf2(t, n - 1)
