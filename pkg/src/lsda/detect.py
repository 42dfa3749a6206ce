"""Region proposals, region scoring against the background row, and NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from lsda.boxes import Box, boxes_to_array, iou_matrix
from lsda.exceptions import ParseError, ValidationError
from lsda.model import DETECTOR, NetworkParams, forward
from lsda.synth import warp_regions


@dataclass(frozen=True)
class Detection:
    image_id: str
    category: int
    score: float
    box: Box


@dataclass(frozen=True)
class ProposalConfig:
    scales: tuple[int, ...] = (16, 20, 24, 28, 32, 40, 48, 64)
    stride_fraction: float = 0.25
    aspect_ratios: tuple[float, ...] = (1.0,)
    external: str | None = None

    def __post_init__(self):
        if not self.scales or min(self.scales) <= 0:
            raise ValidationError("proposal scales must be positive")
        if not 0.0 < self.stride_fraction <= 1.0:
            raise ValidationError("stride_fraction must lie in (0, 1]")
        if not self.aspect_ratios or min(self.aspect_ratios) <= 0:
            raise ValidationError("aspect ratios must be positive")


def _positions(extent: int, side: int, stride: int) -> list[int]:
    last = extent - side
    out = list(range(0, last + 1, stride))
    if out[-1] != last:
        out.append(last)
    return out


def grid_proposals(shape, config: ProposalConfig) -> list[Box]:
    """Multi-scale sliding windows; the last window on each axis is flush with the edge."""
    h, w = shape
    if h <= 0 or w <= 0:
        raise ValidationError("image dimensions must be positive")
    if max(config.scales) > min(h, w):
        raise ValidationError(f"proposal scale {max(config.scales)} exceeds image size {w}x{h}")
    boxes = set()
    for scale in config.scales:
        for ratio in config.aspect_ratios:
            bw = min(w, max(1, int(round(scale * math.sqrt(ratio)))))
            bh = min(h, max(1, int(round(scale / math.sqrt(ratio)))))
            sx = max(1, int(round(config.stride_fraction * bw)))
            sy = max(1, int(round(config.stride_fraction * bh)))
            for y in _positions(h, bh, sy):
                for x in _positions(w, bw, sx):
                    boxes.add(Box(x, y, x + bw, y + bh))
    return sorted(boxes)


def read_proposals(path) -> dict[str, list[Box]]:
    """Parse an external proposal file: ``image_id<TAB>x1,y1,x2,y2`` per line."""
    out: dict[str, list[Box]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise ParseError(f"{path}:{lineno}: expected image_id<TAB>x1,y1,x2,y2")
        try:
            box = Box.parse(cols[1])
        except ValidationError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        out.setdefault(cols[0], []).append(box)
    return out


def write_proposals(proposals: dict[str, Sequence[Box]], path) -> None:
    lines = [f"{image_id}\t{b.format()}\n" for image_id in proposals for b in proposals[image_id]]
    Path(path).write_text("".join(lines), encoding="utf-8")


def propose_regions(shape, config: ProposalConfig = ProposalConfig(), image_id: str | None = None,
                    external: dict[str, list[Box]] | None = None) -> list[Box]:
    """Grid proposals, or the image's boxes from an external proposal set.

    ``external`` may be passed pre-parsed; otherwise ``config.external`` is read.
    """
    if external is None and config.external is None:
        return grid_proposals(shape, config)
    if external is None:
        external = read_proposals(config.external)
    h, w = shape
    boxes = external.get(image_id, [])
    for b in boxes:
        if b.x2 > w or b.y2 > h:
            raise ValidationError(f"external proposal {b.as_tuple()} for {image_id} exceeds image {w}x{h}")
    return sorted(set(boxes))


_CHUNK = 64


def score_regions(network: NetworkParams, image: np.ndarray, boxes: Sequence[Box],
                  context_pad: int = 2, softmax: bool = False) -> np.ndarray:
    """Per-box detection scores, shape ``(len(boxes), K)``: category output minus background output."""
    if network.state != DETECTOR:
        raise ValidationError("score_regions needs a detector-state network")
    size = int(round(math.sqrt(network.input_dim)))
    if len(boxes) == 0:
        return np.zeros((0, network.partition.K))
    # fixed-size chunks keep the working set cache-sized, so cost stays linear in boxes
    raw = np.concatenate([
        forward(network, warp_regions(image, boxes[i:i + _CHUNK], context_pad, size))
        for i in range(0, len(boxes), _CHUNK)
    ])
    if softmax:
        z = raw - raw.max(axis=1, keepdims=True)
        raw = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return raw[:, :-1] - raw[:, -1:]


def _sort_key(d: Detection):
    return (-d.score, d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.category)


def _greedy(ious: np.ndarray, threshold: float) -> list[int]:
    # rows/cols of ``ious`` are already in priority order
    keep = []
    suppressed = np.zeros(len(ious), dtype=bool)
    for i in range(len(ious)):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] >= threshold
    return keep


def cross_category_nms(detections: Sequence[Detection], threshold: float = 0.5) -> list[Detection]:
    """Greedy suppression by descending score, ignoring category."""
    ordered = sorted(detections, key=_sort_key)
    if not ordered:
        return []
    arr = boxes_to_array([d.box for d in ordered])
    return [ordered[i] for i in _greedy(iou_matrix(arr, arr), threshold)]


def nms(detections: Sequence[Detection], threshold: float = 0.3) -> list[Detection]:
    """Per-category greedy NMS; every detection must share one category."""
    if len({d.category for d in detections}) > 1:
        raise ValidationError("nms expects detections of a single category")
    return cross_category_nms(detections, threshold)


def detect_image(network: NetworkParams, image: np.ndarray, image_id: str,
                 config: ProposalConfig = ProposalConfig(), nms_threshold: float = 0.3,
                 score_floor: float = -math.inf, context_pad: int = 2, softmax: bool = False,
                 external: dict[str, list[Box]] | None = None) -> list[Detection]:
    """Propose, score, per-category NMS, floor; sorted by descending score."""
    boxes = propose_regions(image.shape, config, image_id, external)
    scores = score_regions(network, image, boxes, context_pad, softmax)
    if not boxes:
        return []
    arr = boxes_to_array(boxes)
    ious = iou_matrix(arr, arr)
    # ties in score resolve by (x1, y1, x2, y2), which is the proposal order
    lex = np.lexsort((arr[:, 3], arr[:, 2], arr[:, 1], arr[:, 0]))
    rank = np.empty(len(boxes), dtype=np.int64)
    rank[lex] = np.arange(len(boxes))
    out = []
    for c in range(scores.shape[1]):
        order = np.lexsort((rank, -scores[:, c]))
        kept = _greedy(ious[np.ix_(order, order)], nms_threshold)
        for i in order[kept]:
            s = float(scores[i, c])
            if s >= score_floor:
                out.append(Detection(image_id, c, s, boxes[i]))
    out.sort(key=lambda d: (-d.score, d.category, d.box.as_tuple()))
    return out


def write_detections(detections: Sequence[Detection], names: Sequence[str], path) -> None:
    lines = [f"{d.image_id}\t{names[d.category]}\t{d.score!r}\t{d.box.format()}\n" for d in detections]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_detections(path, names: Sequence[str]) -> list[Detection]:
    index = {n: i for i, n in enumerate(names)}
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise ParseError(f"{path}:{lineno}: expected 4 tab-separated fields")
        if cols[1] not in index:
            raise ParseError(f"{path}:{lineno}: unknown category {cols[1]!r}")
        try:
            out.append(Detection(cols[0], index[cols[1]], float(cols[2]), Box.parse(cols[3])))
        except (ValueError, ValidationError) as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    return out
