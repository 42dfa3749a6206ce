"""Transfer of the classifier-to-detector change to categories without boxes.

Each image-label-only category ``j`` (set A) borrows the average fine-tuning
delta of its ``k`` nearest box-annotated categories (set B)::

    W^d_j = W^c_j + (1/k) * sum_{i=1..k} deltaB[N_B(j, i)]

Neighbours are ranked by Euclidean distance between unit-normalised
classifier rows of the classification network; the deltas themselves are
applied unnormalised.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lsda.exceptions import ShapeError, ValidationError
from lsda.model import (
    CLASSIFICATION,
    DETECTOR,
    CategoryPartition,
    OutputHead,
    WeightMatrix,
    l2_normalize_rows,
)

FULL = "FULL"


@dataclass(frozen=True)
class AdaptConfig:
    k: int | str = FULL
    include_bias: bool = False
    adapt_bias: bool = True

    def __post_init__(self):
        if isinstance(self.k, str):
            if self.k.upper() != FULL:
                raise ValidationError(f"k must be a positive integer or {FULL!r}, got {self.k!r}")
            object.__setattr__(self, "k", FULL)
        elif int(self.k) < 1:
            raise ValidationError(f"k must be at least 1, got {self.k}")

    @property
    def label(self) -> str:
        return f"Avg NN (k={self.k})"

    def resolve_k(self, n_b: int) -> int:
        if self.k == FULL:
            return n_b
        if self.k > n_b:
            raise ValidationError(f"k={self.k} exceeds |B|={n_b}")
        return int(self.k)


@dataclass(frozen=True, eq=False)
class NeighborMap:
    """Row ``r`` lists the B neighbours of category ``a_categories[r]``, nearest first."""

    a_categories: tuple[int, ...]
    indices: np.ndarray
    distances: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def neighbors(self, j: int) -> list[tuple[int, float]]:
        r = self.a_categories.index(j)
        return list(zip(self.indices[r].tolist(), self.distances[r].tolist()))

    def to_tsv(self, partition: CategoryPartition) -> str:
        lines = ["a_category\trank\tb_category\tdistance\n"]
        for r, j in enumerate(self.a_categories):
            for rank, (i, d) in enumerate(zip(self.indices[r], self.distances[r]), 1):
                lines.append(f"{partition.names[j]}\t{rank}\t{partition.names[i]}\t{float(d)!r}\n")
        return "".join(lines)

    def write(self, partition: CategoryPartition, path) -> None:
        Path(path).write_text(self.to_tsv(partition), encoding="utf-8")


def _distance_rows(Wc: WeightMatrix, include_bias: bool) -> WeightMatrix:
    if not include_bias:
        return Wc
    return WeightMatrix(np.hstack([Wc.values, Wc.bias[:, None]]), Wc.bias)


def nearest_neighbors(Wc: WeightMatrix, partition: CategoryPartition,
                      config: AdaptConfig = AdaptConfig()) -> NeighborMap:
    """k nearest B categories of every A category in normalised classifier space.

    Ties in distance go to the lower B index.
    """
    if Wc.rows != partition.K:
        raise ShapeError(f"classifier has {Wc.rows} rows, partition has K={partition.K}")
    k = config.resolve_k(partition.m)
    unit = l2_normalize_rows(_distance_rows(Wc, config.include_bias)).values
    b_rows, a_rows = unit[: partition.m], unit[partition.m:]
    # per-pair differences so each distance is independent of row order
    dist = np.sqrt(np.sum((a_rows[:, None, :] - b_rows[None, :, :]) ** 2, axis=2))
    b_idx = np.arange(partition.m)
    order = np.stack([np.lexsort((b_idx, row))[:k] for row in dist]) if len(dist) else np.zeros((0, k), int)
    picked = np.take_along_axis(dist, order, axis=1) if len(dist) else np.zeros((0, k))
    return NeighborMap(tuple(partition.A), order, picked)


def transfer_deltas(deltaB: WeightMatrix, nmap: NeighborMap, config: AdaptConfig = AdaptConfig()) -> WeightMatrix:
    """Average neighbour delta for every A category (one row per A category)."""
    values = deltaB.values[nmap.indices].mean(axis=1) if nmap.a_categories else np.zeros((0, deltaB.cols))
    if config.adapt_bias and nmap.a_categories:
        bias = deltaB.bias[nmap.indices].mean(axis=1)
    else:
        bias = np.zeros(len(nmap.a_categories))
    return WeightMatrix(values, bias)


def adapt_weights(Wc: WeightMatrix, deltaB: WeightMatrix, nmap: NeighborMap,
                  config: AdaptConfig = AdaptConfig()) -> WeightMatrix:
    """Detector weights W^d for all K categories; ``Wc`` is left untouched."""
    m = deltaB.rows
    if deltaB.cols != Wc.cols:
        raise ShapeError(f"deltaB has {deltaB.cols} columns, classifier has {Wc.cols}")
    if Wc.rows - m != len(nmap.a_categories) or m > Wc.rows:
        raise ShapeError("neighbour map does not cover every A category")
    moved = transfer_deltas(deltaB, nmap, config)
    values = Wc.values.copy()
    bias = Wc.bias.copy()
    values[:m] += deltaB.values
    bias[:m] += deltaB.bias
    values[m:] += moved.values
    bias[m:] += moved.bias
    return WeightMatrix(values, bias)


def assemble_lsda(pretrained: OutputHead, finetuned: OutputHead, deltaB: WeightMatrix,
                  partition: CategoryPartition, config: AdaptConfig = AdaptConfig()) -> OutputHead:
    """Detector head: fine-tuned B rows, transferred A rows, fine-tuned background."""
    if pretrained.state != CLASSIFICATION or finetuned.state != DETECTOR:
        raise ValidationError("assemble_lsda needs a classification head and a detector head")
    if (pretrained.fcB.rows, pretrained.fcA.rows) != (finetuned.fcB.rows, finetuned.fcA.rows) \
            or pretrained.fcB.rows != partition.m or pretrained.num_categories != partition.K:
        raise ValidationError("category partition differs between the two heads")
    if pretrained.feature_dim != finetuned.feature_dim:
        raise ShapeError("heads come from different architectures")
    if not (pretrained.fcA.bit_equal(finetuned.fcA) and pretrained.fcB.bit_equal(finetuned.fcB)):
        raise ValidationError("fine-tuned head does not share the pretrained classifier rows")
    if deltaB.rows != partition.m or deltaB.cols != pretrained.feature_dim:
        raise ShapeError("deltaB shape does not match the head")
    nmap = nearest_neighbors(pretrained.classifier(), partition, config)
    return finetuned.replace(deltaB=deltaB, deltaA=transfer_deltas(deltaB, nmap, config))


def disassemble(head: OutputHead) -> tuple[WeightMatrix, WeightMatrix, WeightMatrix, WeightMatrix | None]:
    """``(fcA, fcB, deltaB, background)`` of a head."""
    return head.fcA, head.fcB, head.deltaB, head.background
