"""Large scale detection through adaptation, at desk scale.

Train a classifier, fine-tune it into a detector on the categories that have
box labels, and transfer the learned change to categories that only have
image-level labels.
"""

from lsda.boxes import Box, iou
from lsda.model import (
    CategoryPartition,
    NetworkParams,
    OutputHead,
    WeightMatrix,
    forward,
    l2_normalize_rows,
    load_weights,
    save_weights,
)

__version__ = "0.1.0"

__all__ = [
    "Box",
    "CategoryPartition",
    "NetworkParams",
    "OutputHead",
    "WeightMatrix",
    "forward",
    "iou",
    "l2_normalize_rows",
    "load_weights",
    "save_weights",
]
