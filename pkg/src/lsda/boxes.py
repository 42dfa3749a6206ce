"""Axis-aligned boxes, half-open on both axes: [x1, x2) x [y1, y2)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lsda.exceptions import ValidationError


@dataclass(frozen=True, order=True)
class Box:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (0 <= self.x1 < self.x2 and 0 <= self.y1 < self.y2):
            raise ValidationError(f"invalid box {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)

    def format(self) -> str:
        return f"{self.x1},{self.y1},{self.x2},{self.y2}"

    @classmethod
    def parse(cls, text: str) -> "Box":
        parts = text.strip().split(",")
        if len(parts) != 4:
            raise ValidationError(f"expected x1,y1,x2,y2, got {text!r}")
        try:
            return cls(*(int(p) for p in parts))
        except ValueError as exc:
            raise ValidationError(f"non-integer box coordinate in {text!r}") from exc


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.int64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) coordinate arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union
