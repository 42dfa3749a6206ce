"""False-positive taxonomy (Loc / BG / Oth) and top-N breakdown curves."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from lsda.boxes import Box, iou
from lsda.detect import Detection
from lsda.evaluation import match_all
from lsda.synth import DatasetManifest

LOC, BG, OTH = "Loc", "BG", "Oth"
KINDS = (LOC, BG, OTH)
DEFAULT_CUTOFFS = (25, 50, 100, 200, 400)


@dataclass(frozen=True)
class FPRecord:
    detection: Detection
    kind: str
    same_iou: float
    other_iou: float


def classify_fp(detection: Detection, gt: Sequence[tuple[Box, int]], low: float = 0.1) -> FPRecord:
    """Kind of an already-established false positive.

    Loc: overlaps a same-category object by at least ``low``.  Below the
    eval IoU threshold this is a mislocalisation; at or above it the FP can
    only be a duplicate of an already-claimed object, also counted as Loc.
    Oth: otherwise overlaps another category's object by at least ``low``.
    BG: everything else.
    """
    same = max((iou(detection.box, b) for b, c in gt if c == detection.category), default=0.0)
    other = max((iou(detection.box, b) for b, c in gt if c != detection.category), default=0.0)
    if same >= low:
        kind = LOC
    elif other >= low:
        kind = OTH
    else:
        kind = BG
    return FPRecord(detection, kind, same, other)


def false_positives(detections: Sequence[Detection], manifest: DatasetManifest,
                    categories: Iterable[int] | None = None, iou_threshold: float = 0.5,
                    low: float = 0.1) -> list[FPRecord]:
    """Every FP of the chosen categories, classified, highest score first."""
    wanted = set(range(manifest.partition.K) if categories is None else categories)
    gt = manifest.gt_by_image()
    out = []
    for c, (ordered, tp, _) in match_all(detections, manifest, iou_threshold).items():
        if c not in wanted:
            continue
        out += [classify_fp(d, gt[d.image_id], low) for d, hit in zip(ordered, tp) if not hit]
    out.sort(key=lambda r: (-r.detection.score, r.detection.image_id, r.detection.category,
                            r.detection.box.as_tuple()))
    return out


@dataclass(frozen=True)
class BreakdownCurve:
    cutoffs: tuple[int, ...]
    counts: np.ndarray  # (len(cutoffs), 3): Loc, BG, Oth
    n_fp: int

    @property
    def fractions(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, totals, out=np.zeros(self.counts.shape), where=totals > 0)

    def at(self, cutoff: int) -> dict[str, float]:
        row = self.fractions[self.cutoffs.index(cutoff)]
        return dict(zip(KINDS, row.tolist()))

    def to_tsv(self) -> str:
        lines = ["cutoff\tloc\tbg\toth\n"]
        for n, (loc, bg, oth) in zip(self.cutoffs, self.fractions.tolist()):
            lines.append(f"{n}\t{loc!r}\t{bg!r}\t{oth!r}\n")
        return "".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


def breakdown(fps: Sequence[FPRecord], cutoffs: Sequence[int] = DEFAULT_CUTOFFS) -> BreakdownCurve:
    """Kind fractions among the top-N scoring false positives for each cutoff N.

    ``fps`` must already be sorted by descending score (as returned by
    :func:`false_positives`).  Cutoffs past the FP count see every FP.
    """
    cutoffs = tuple(int(c) for c in cutoffs)
    if list(cutoffs) != sorted(cutoffs):
        raise ValueError("cutoffs must be ascending")
    if not fps:
        warnings.warn("no false positives; breakdown is all zero", RuntimeWarning, stacklevel=2)
    elif cutoffs and cutoffs[-1] > len(fps):
        warnings.warn(f"cutoffs above {len(fps)} false positives are clipped", RuntimeWarning, stacklevel=2)
    kinds = np.array([KINDS.index(r.kind) for r in fps], dtype=np.int64)
    counts = np.zeros((len(cutoffs), 3), dtype=np.int64)
    for row, n in enumerate(cutoffs):
        counts[row] = np.bincount(kinds[:n], minlength=3)
    return BreakdownCurve(cutoffs, counts, len(fps))


def scaled_cutoffs(n_images: int, reference_images: int = 80) -> tuple[int, ...]:
    """Default cutoffs scaled linearly with corpus size (at least 1 each, deduplicated)."""
    scale = n_images / reference_images
    return tuple(sorted({max(1, int(round(c * scale))) for c in DEFAULT_CUTOFFS}))


def comparison_table(curves: dict[str, BreakdownCurve]) -> str:
    """Side-by-side Loc/BG/Oth percentages for several methods."""
    names = list(curves)
    header = "top-N FP".ljust(10) + "".join(f"{n:>24}" for n in names) + "\n"
    sub = " " * 10 + "".join(f"{'Loc':>8}{'BG':>8}{'Oth':>8}" for _ in names) + "\n"
    lines = [header, sub]
    cutoffs = curves[names[0]].cutoffs
    for i, n in enumerate(cutoffs):
        row = f"{n:<10}"
        for name in names:
            loc, bg, oth = 100 * curves[name].fractions[i]
            row += f"{loc:8.1f}{bg:8.1f}{oth:8.1f}"
        lines.append(row + "\n")
    return "".join(lines)
