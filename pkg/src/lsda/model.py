"""Network weights, forward pass, row normalization and weight files.

The network is a stack of affine+ReLU feature layers (named ``layer_1`` ..
``layer_H``; the last two are also reachable as ``fc6`` and ``fc7``) followed
by an output head.  The head keeps the parts of the category-specific layer
separate so every lifecycle state can be reconstructed:

* ``fcB``: classifier rows of the box-annotated categories (set B)
* ``fcA``: classifier rows of the image-label-only categories (set A)
* ``deltaB``: change learned for set B during detection fine-tuning
* ``deltaA``: change transferred to set A from nearest neighbours in B
* ``background``: the background row, present only in detector state

Effective output rows are ``fcB + deltaB`` followed by ``fcA + deltaA`` and,
in detector state, the background row last.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from lsda.exceptions import (
    ChecksumError,
    ShapeError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
    WeightFileError,
)

CLASSIFICATION = "classification"
DETECTOR = "detector"


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Dense affine map; row ``i`` is output unit ``i``."""

    values: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        bias = np.array(self.bias, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"weight values must be 2-D, got shape {values.shape}")
        if bias.shape != (values.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {values.shape[0]} rows")
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(bias))):
            raise ValidationError("weight matrix contains non-finite entries")
        values.flags.writeable = False
        bias.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "bias", bias)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "WeightMatrix":
        return cls(np.zeros((rows, cols)), np.zeros(rows))

    def bit_equal(self, other: "WeightMatrix") -> bool:
        return (
            self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
            and self.bias.tobytes() == other.bias.tobytes()
        )

    def __add__(self, other: "WeightMatrix") -> "WeightMatrix":
        if self.values.shape != other.values.shape:
            raise ShapeError(f"cannot add {self.values.shape} and {other.values.shape}")
        return WeightMatrix(self.values + other.values, self.bias + other.bias)

    def __repr__(self):
        return f"WeightMatrix(rows={self.rows}, cols={self.cols})"


@dataclass(frozen=True)
class CategoryPartition:
    """K ordered category names; the first ``m`` (set B) carry box labels."""

    names: tuple[str, ...]
    m: int

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate category names in {names}")
        if list(names) != sorted(names):
            raise ValidationError("category names must be sorted; use CategoryPartition.create")
        if not 0 < self.m < len(names):
            raise ValidationError(f"need 0 < m < K, got m={self.m}, K={len(names)}")

    @classmethod
    def create(cls, names: Sequence[str], m: int) -> "CategoryPartition":
        """Sort ``names`` lexicographically; set B is the first ``m`` of them."""
        return cls(tuple(sorted(names)), m)

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def B(self) -> range:
        return range(0, self.m)

    @property
    def A(self) -> range:
        return range(self.m, self.K)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown category {name!r}") from None


@dataclass(frozen=True, eq=False)
class OutputHead:
    fcA: WeightMatrix
    fcB: WeightMatrix
    deltaB: WeightMatrix
    background: WeightMatrix | None = None
    deltaA: WeightMatrix | None = None

    def __post_init__(self):
        if self.deltaA is None:
            object.__setattr__(self, "deltaA", WeightMatrix.zeros(self.fcA.rows, self.fcA.cols))
        d = self.fcB.cols
        for name in ("fcA", "fcB", "deltaB", "deltaA", "background"):
            part = getattr(self, name)
            if part is not None and part.cols != d:
                raise ShapeError(f"head part {name} has {part.cols} columns, expected {d}")
        if self.deltaB.rows != self.fcB.rows:
            raise ShapeError("deltaB must have one row per fcB row")
        if self.deltaA.rows != self.fcA.rows:
            raise ShapeError("deltaA must have one row per fcA row")
        if self.background is None:
            if np.any(self.deltaB.values) or np.any(self.deltaB.bias):
                raise ValidationError("classification-state head must have zero deltaB")
            if np.any(self.deltaA.values) or np.any(self.deltaA.bias):
                raise ValidationError("classification-state head must have zero deltaA")
        elif self.background.rows != 1:
            raise ShapeError("background must be a single row")

    @classmethod
    def classification(cls, fc8: WeightMatrix, m: int) -> "OutputHead":
        """Split a K-row classifier into its B and A parts."""
        fcB = WeightMatrix(fc8.values[:m], fc8.bias[:m])
        fcA = WeightMatrix(fc8.values[m:], fc8.bias[m:])
        return cls(fcA=fcA, fcB=fcB, deltaB=WeightMatrix.zeros(fcB.rows, fcB.cols))

    @property
    def state(self) -> str:
        return CLASSIFICATION if self.background is None else DETECTOR

    @property
    def feature_dim(self) -> int:
        return self.fcB.cols

    @property
    def num_categories(self) -> int:
        return self.fcA.rows + self.fcB.rows

    def classifier(self) -> WeightMatrix:
        """The original K-row classifier W^c (fcB rows, then fcA rows)."""
        return WeightMatrix(
            np.vstack([self.fcB.values, self.fcA.values]),
            np.concatenate([self.fcB.bias, self.fcA.bias]),
        )

    def category_weights(self) -> WeightMatrix:
        """Effective K-row category weights (W^d in detector state)."""
        eff_b = self.fcB + self.deltaB
        eff_a = self.fcA + self.deltaA
        return WeightMatrix(
            np.vstack([eff_b.values, eff_a.values]),
            np.concatenate([eff_b.bias, eff_a.bias]),
        )

    def effective(self) -> WeightMatrix:
        """All output rows, background last when present."""
        cats = self.category_weights()
        if self.background is None:
            return cats
        return WeightMatrix(
            np.vstack([cats.values, self.background.values]),
            np.concatenate([cats.bias, self.background.bias]),
        )

    def to_detector(self, background: WeightMatrix | None = None) -> "OutputHead":
        """The one permitted state change: add a background row, fcA untouched."""
        if self.background is not None:
            raise ValidationError("head is already in detector state")
        if background is None:
            background = WeightMatrix.zeros(1, self.feature_dim)
        return OutputHead(fcA=self.fcA, fcB=self.fcB, deltaB=self.deltaB, background=background)

    def replace(self, **changes) -> "OutputHead":
        parts = dict(
            fcA=self.fcA, fcB=self.fcB, deltaB=self.deltaB,
            background=self.background, deltaA=self.deltaA,
        )
        parts.update(changes)
        if parts["background"] is None and self.background is not None:
            raise ValidationError("cannot drop the background row of a detector head")
        return OutputHead(**parts)

    def bit_equal(self, other: "OutputHead") -> bool:
        if self.state != other.state:
            return False
        same = all(
            getattr(self, n).bit_equal(getattr(other, n))
            for n in ("fcA", "fcB", "deltaB", "deltaA")
        )
        if self.background is not None:
            same = same and self.background.bit_equal(other.background)
        return same


@dataclass(frozen=True, eq=False)
class NetworkParams:
    layers: tuple[WeightMatrix, ...]
    head: OutputHead
    partition: CategoryPartition
    layer_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValidationError("network needs at least one feature layer")
        for i in range(1, len(layers)):
            if layers[i].cols != layers[i - 1].rows:
                raise ShapeError(
                    f"layer_{i + 1} expects {layers[i].cols} inputs but layer_{i} "
                    f"produces {layers[i - 1].rows}"
                )
        if self.head.feature_dim != layers[-1].rows:
            raise ShapeError("output head width does not match the last feature layer")
        if self.head.fcB.rows != self.partition.m or self.head.fcA.rows != len(self.partition.A):
            raise ShapeError("output head rows do not match the category partition")
        if not self.layer_names:
            names = tuple(f"layer_{i + 1}" for i in range(len(layers)))
            object.__setattr__(self, "layer_names", names)
        elif len(self.layer_names) != len(layers):
            raise ShapeError("one name per feature layer required")

    @property
    def input_dim(self) -> int:
        return self.layers[0].cols

    @property
    def state(self) -> str:
        return self.head.state

    def layer_index(self, name: str) -> int:
        """Resolve ``layer_i``, ``fc6`` or ``fc7`` to a 0-based layer index."""
        H = len(self.layers)
        aliases = {}
        if H >= 2:
            aliases = {"fc6": H - 2, "fc7": H - 1}
        if name in aliases:
            return aliases[name]
        if name in self.layer_names:
            return self.layer_names.index(name)
        raise ValidationError(f"no layer named {name!r} in a {H}-layer network")

    def replace(self, **changes) -> "NetworkParams":
        parts = dict(
            layers=self.layers, head=self.head,
            partition=self.partition, layer_names=self.layer_names,
        )
        parts.update(changes)
        return NetworkParams(**parts)

    def bit_equal(self, other: "NetworkParams") -> bool:
        return (
            self.partition == other.partition
            and self.layer_names == other.layer_names
            and len(self.layers) == len(other.layers)
            and all(a.bit_equal(b) for a, b in zip(self.layers, other.layers))
            and self.head.bit_equal(other.head)
        )


def init_network(
    partition: CategoryPartition,
    input_dim: int = 1024,
    hidden: Sequence[int] = (256, 64, 64),
    seed: int = 0,
) -> NetworkParams:
    """He-initialised classification-state network."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden]
    layers = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
        layers.append(WeightMatrix(w, np.zeros(n_out)))
    d = dims[-1]
    fc8 = WeightMatrix(rng.normal(0.0, np.sqrt(1.0 / d), size=(partition.K, d)), np.zeros(partition.K))
    return NetworkParams(tuple(layers), OutputHead.classification(fc8, partition.m), partition)


def features(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """ReLU activations of the last feature layer."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != params.input_dim:
        raise ShapeError(f"input length {h.shape[-1]} does not match input_dim {params.input_dim}")
    for layer in params.layers:
        h = np.maximum(h @ layer.values.T + layer.bias, 0.0)
    return h


def forward(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Pre-softmax scores: K in classification state, K+1 (background last) as a detector.

    Accepts one input vector or a 2-D batch with one input per row.
    """
    head = params.head.effective()
    return features(params, x) @ head.values.T + head.bias


def l2_normalize_rows(w: WeightMatrix) -> WeightMatrix:
    """Scale each weight row to unit Euclidean norm; the bias is carried unchanged."""
    norms = np.sqrt(np.sum(w.values**2, axis=1))
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValidationError(f"cannot normalize zero row {int(zero[0])}")
    return WeightMatrix(w.values / norms[:, None], w.bias.copy())


# --- weight files -----------------------------------------------------------

MAGIC = b"LSDAWTS\x00"
FORMAT_VERSION = 1
_KIND_NETWORK = 0
_KIND_MATRIX = 1
_STATE_TAGS = {CLASSIFICATION: 0, DETECTOR: 1}
_HEADER = struct.Struct("<8sHBQ")
_DIGEST_LEN = 32


def _write_str(buf, s: str):
    data = s.encode("utf-8")
    buf.write(struct.pack("<H", len(data)))
    buf.write(data)


def _write_matrix(buf, w: WeightMatrix):
    buf.write(struct.pack("<II", w.rows, w.cols))
    buf.write(w.values.astype("<f8").tobytes(order="C"))
    buf.write(w.bias.astype("<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError("weight file payload ends early")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def matrix(self) -> WeightMatrix:
        rows, cols = self.unpack("<II")
        values = np.frombuffer(self.take(8 * rows * cols), dtype="<f8").reshape(rows, cols)
        bias = np.frombuffer(self.take(8 * rows), dtype="<f8")
        return WeightMatrix(values.astype(np.float64), bias.astype(np.float64))


def _frame(kind: int, payload: bytes) -> bytes:
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, kind, len(payload)) + payload
    return body + hashlib.sha256(body).digest()


def _unframe(data: bytes, kind: int) -> _Reader:
    if len(data) < _HEADER.size:
        raise TruncatedFileError("weight file shorter than its header")
    magic, version, file_kind, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise WeightFileError("not an LSDA weight file (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"weight file version {version}, expected {FORMAT_VERSION}")
    end = _HEADER.size + length
    if len(data) < end + _DIGEST_LEN:
        raise TruncatedFileError(f"weight file has {len(data)} bytes, header promises {end + _DIGEST_LEN}")
    if hashlib.sha256(data[:end]).digest() != data[end:end + _DIGEST_LEN]:
        raise ChecksumError("weight file checksum mismatch")
    if file_kind != kind:
        raise WeightFileError(f"weight file holds kind {file_kind}, expected {kind}")
    return _Reader(data[_HEADER.size:end])


def encode_network(params: NetworkParams) -> bytes:
    buf = io.BytesIO()
    head = params.head
    buf.write(struct.pack("<BIII", _STATE_TAGS[head.state], params.input_dim,
                          params.partition.K, params.partition.m))
    for name in params.partition.names:
        _write_str(buf, name)
    buf.write(struct.pack("<I", len(params.layers)))
    for name, layer in zip(params.layer_names, params.layers):
        _write_str(buf, name)
        _write_matrix(buf, layer)
    for part in (head.fcA, head.fcB, head.deltaB, head.deltaA):
        _write_matrix(buf, part)
    if head.background is not None:
        _write_matrix(buf, head.background)
    return _frame(_KIND_NETWORK, buf.getvalue())


def decode_network(data: bytes) -> NetworkParams:
    r = _unframe(data, _KIND_NETWORK)
    state_tag, input_dim, K, m = r.unpack("<BIII")
    names = tuple(r.string() for _ in range(K))
    (H,) = r.unpack("<I")
    layer_names, layers = [], []
    for _ in range(H):
        layer_names.append(r.string())
        layers.append(r.matrix())
    fcA, fcB, deltaB, deltaA = (r.matrix() for _ in range(4))
    background = r.matrix() if state_tag == _STATE_TAGS[DETECTOR] else None
    head = OutputHead(fcA=fcA, fcB=fcB, deltaB=deltaB, background=background, deltaA=deltaA)
    params = NetworkParams(tuple(layers), head, CategoryPartition(names, m), tuple(layer_names))
    if params.input_dim != input_dim:
        raise WeightFileError("stored input_dim disagrees with layer_1")
    return params


def save_weights(params: NetworkParams, path) -> None:
    Path(path).write_bytes(encode_network(params))


def load_weights(path) -> NetworkParams:
    return decode_network(Path(path).read_bytes())


def save_matrix(w: WeightMatrix, path) -> None:
    """Standalone matrix file (the deltaB sidecar) in the same framing."""
    buf = io.BytesIO()
    _write_matrix(buf, w)
    Path(path).write_bytes(_frame(_KIND_MATRIX, buf.getvalue()))


def load_matrix(path) -> WeightMatrix:
    return _unframe(Path(path).read_bytes(), _KIND_MATRIX).matrix()
