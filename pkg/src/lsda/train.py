"""SGD training for classification pre-training and detection fine-tuning.

Both phases minimise softmax cross-entropy with momentum SGD.  Fine-tuning
rebuilds the head as frozen classifier rows plus a zero-initialised delta and
a zero-initialised background row, and only the blocks named in the freeze
mask move.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from lsda.boxes import Box, boxes_to_array, iou_matrix
from lsda.exceptions import ConfigError, DivergenceError, ValidationError
from lsda.model import (
    CLASSIFICATION,
    CategoryPartition,
    NetworkParams,
    OutputHead,
    WeightMatrix,
    init_network,
)
from lsda.synth import DatasetManifest, read_pgm, warp_region

log = logging.getLogger(__name__)

BACKGROUND = -1


@dataclass(frozen=True)
class ArchConfig:
    hidden: tuple[int, ...] = (256, 64, 64)
    input_size: int = 32
    context_pad: int = 2

    @property
    def input_dim(self) -> int:
        return self.input_size * self.input_size


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    pos_fraction: float = 0.25
    pos_iou: float = 0.5
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.pos_fraction < 1.0:
            raise ConfigError(f"pos_fraction must lie in (0, 1), got {self.pos_fraction}")
        if not 0.0 < self.pos_iou <= 1.0:
            raise ConfigError(f"pos_iou must lie in (0, 1], got {self.pos_iou}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def replace(self, **changes) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return TrainConfig(**values)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


def write_log(history: Sequence[EpochRecord], path) -> None:
    lines = ["epoch\tloss\taccuracy\n"]
    lines += [f"{r.epoch}\t{r.loss!r}\t{r.accuracy!r}\n" for r in history]
    Path(path).write_text("".join(lines), encoding="utf-8")


# --- freeze masks ----------------------------------------------------------------

_ALIASES = {"bgrnd": "background", "fc_bgrnd": "background", "deltaB": "fcB"}


@dataclass(frozen=True)
class FreezeMask:
    """Blocks that may change during fine-tuning.

    Block names are ``layer_1`` .. ``layer_H``, ``fc6``, ``fc7``, ``layers``
    (every feature layer), ``fcB`` and ``background`` (alias ``bgrnd``).
    """

    trainable: frozenset

    def __post_init__(self):
        names = frozenset(_ALIASES.get(n, n) for n in self.trainable)
        object.__setattr__(self, "trainable", names)
        if "background" not in names:
            raise ConfigError("the background row is always trainable during fine-tuning")
        if "fcA" in names:
            raise ConfigError("fcA is never trainable during detection fine-tuning")

    @classmethod
    def parse(cls, text: str) -> "FreezeMask":
        return cls(frozenset(p.strip() for p in text.replace(",", "+").split("+") if p.strip()))

    @property
    def label(self) -> str:
        def rank(name):
            fixed = {"background": 0, "layers": 1, "fc6": 3, "fc7": 4, "fcB": 5}
            return (fixed.get(name, 2), name)

        return "+".join("bgrnd" if n == "background" else n for n in sorted(self.trainable, key=rank))

    @property
    def trains_delta(self) -> bool:
        return "fcB" in self.trainable

    def layer_indices(self, params: NetworkParams) -> set[int]:
        out = set()
        for name in self.trainable:
            if name in ("background", "fcB"):
                continue
            if name == "layers":
                out.update(range(len(params.layers)))
            else:
                try:
                    out.add(params.layer_index(name))
                except ValidationError:
                    raise ConfigError(f"freeze mask enables {name!r}, which this network lacks") from None
        return out


# --- dense MLP maths -----------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(Ws, bs, Wh, bh, X, y, weight_decay=0.0, lowest_layer=0):
    """Mean softmax cross-entropy of an affine+ReLU stack and its gradients.

    Returns ``(loss, accuracy, dWs, dbs, dWh, dbh)``.  Weight decay adds
    ``wd/2 * ||W||^2`` for every weight matrix (biases are not decayed).
    Layer gradients below ``lowest_layer`` are returned as ``None``.
    """
    n = X.shape[0]
    acts = [X]
    for W, b in zip(Ws, bs):
        acts.append(np.maximum(acts[-1] @ W.T + b, 0.0))
    logits = acts[-1] @ Wh.T + bh
    p = _softmax(logits)
    picked = p[np.arange(n), y]
    loss = -np.mean(np.log(np.maximum(picked, 1e-300)))
    if weight_decay:
        loss += 0.5 * weight_decay * (sum(np.sum(W * W) for W in Ws) + np.sum(Wh * Wh))
    accuracy = float(np.mean(np.argmax(logits, axis=1) == y))

    dlogits = p
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dWh = dlogits.T @ acts[-1] + weight_decay * Wh
    dbh = dlogits.sum(axis=0)
    dWs: list = [None] * len(Ws)
    dbs: list = [None] * len(Ws)
    da = dlogits @ Wh
    for i in range(len(Ws) - 1, lowest_layer - 1, -1):
        dz = da * (acts[i + 1] > 0)
        dWs[i] = dz.T @ acts[i] + weight_decay * Ws[i]
        dbs[i] = dz.sum(axis=0)
        if i > lowest_layer:
            da = dz @ Ws[i]
    return float(loss), accuracy, dWs, dbs, dWh, dbh


class _Momentum:
    def __init__(self, lr, momentum):
        self.lr, self.mu = lr, momentum
        self.v: dict = {}

    def step(self, key, param, grad):
        v = self.v.get(key)
        v = -self.lr * grad if v is None else self.mu * v - self.lr * grad
        self.v[key] = v
        param += v


def _check_finite(loss, epoch):
    if not math.isfinite(loss):
        raise DivergenceError(f"training loss became non-finite in epoch {epoch}")


# --- classification pre-training --------------------------------------------------------

def full_image_inputs(manifest: DatasetManifest, root, arch: ArchConfig = ArchConfig()):
    """Warp every classification image whole; returns ``(X, labels)``."""
    X, y = [], []
    for rec in manifest.records:
        img = read_pgm(Path(root) / rec.path)
        h, w = img.shape
        X.append(warp_region(img, Box(0, 0, w, h), 0, arch.input_size))
        y.append(rec.label)
    return np.stack(X), np.asarray(y, dtype=np.int64)


def pretrain_arrays(X, y, partition: CategoryPartition, config: TrainConfig,
                    arch: ArchConfig = ArchConfig(), history: list | None = None) -> NetworkParams:
    """K-way classification training from the seeded initialisation."""
    params = init_network(partition, X.shape[1], arch.hidden, seed=config.seed)
    if config.epochs == 0:
        return params
    missing = set(range(partition.K)) - set(np.unique(y).tolist())
    if missing:
        raise ValidationError(f"classification labels miss categories {sorted(missing)}")
    Ws = [np.array(l.values) for l in params.layers]
    bs = [np.array(l.bias) for l in params.layers]
    fc8 = params.head.classifier()
    Wh, bh = np.array(fc8.values), np.array(fc8.bias)
    opt = _Momentum(config.lr, config.momentum)
    rng = np.random.default_rng(config.seed + 1)
    n = X.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses, correct = [], 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, acc, dWs, dbs, dWh, dbh = loss_and_grads(Ws, bs, Wh, bh, X[idx], y[idx], config.weight_decay)
            _check_finite(loss, epoch)
            for i in range(len(Ws)):
                opt.step(("W", i), Ws[i], dWs[i])
                opt.step(("b", i), bs[i], dbs[i])
            opt.step("Wh", Wh, dWh)
            opt.step("bh", bh, dbh)
            losses.append(loss * len(idx))
            correct += acc * len(idx)
        record = EpochRecord(epoch, sum(losses) / n, correct / n)
        log.debug("pretrain epoch %d loss %.4f acc %.3f", epoch, record.loss, record.accuracy)
        if history is not None:
            history.append(record)
    layers = tuple(WeightMatrix(W, b) for W, b in zip(Ws, bs))
    head = OutputHead.classification(WeightMatrix(Wh, bh), partition.m)
    return params.replace(layers=layers, head=head)


def pretrain(manifest: DatasetManifest, root, config: TrainConfig, arch: ArchConfig = ArchConfig(),
             history: list | None = None) -> NetworkParams:
    X, y = full_image_inputs(manifest, root, arch)
    return pretrain_arrays(X, y, manifest.partition, config, arch, history)


def training_accuracy(params: NetworkParams, X, y) -> float:
    from lsda.model import forward
    return float(np.mean(np.argmax(forward(params, X), axis=1) == y))


# --- detection region pool ----------------------------------------------------------------

def label_regions(boxes: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray, pos_iou: float):
    """Category of the best-overlapping ground truth if IoU >= ``pos_iou``, else BACKGROUND."""
    labels = np.full(len(boxes), BACKGROUND, dtype=np.int64)
    if len(boxes) == 0 or len(gt_boxes) == 0:
        return labels
    overlaps = iou_matrix(boxes, gt_boxes)
    best = np.argmax(overlaps, axis=1)
    hit = overlaps[np.arange(len(boxes)), best] >= pos_iou
    labels[hit] = gt_labels[best[hit]]
    return labels


def jitter_boxes(rng, box: Box, n: int, shape) -> list[Box]:
    h, w = shape
    out = []
    for _ in range(n):
        s = box.width * rng.uniform(0.8, 1.25)
        t = box.height * rng.uniform(0.8, 1.25)
        cx = (box.x1 + box.x2) / 2 + rng.uniform(-0.2, 0.2) * box.width
        cy = (box.y1 + box.y2) / 2 + rng.uniform(-0.2, 0.2) * box.height
        x1, x2 = max(0, int(round(cx - s / 2))), min(w, int(round(cx + s / 2)))
        y1, y2 = max(0, int(round(cy - t / 2))), min(h, int(round(cy + t / 2)))
        if x2 > x1 and y2 > y1:
            out.append(Box(x1, y1, x2, y2))
    return out


@dataclass
class RegionPool:
    """Warped candidate regions of a detection manifest with their labels."""

    X: np.ndarray
    labels: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels != BACKGROUND)

    @property
    def backgrounds(self) -> np.ndarray:
        return np.flatnonzero(self.labels == BACKGROUND)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, root, config: TrainConfig,
                      arch: ArchConfig = ArchConfig(), proposal_config=None,
                      n_jitter: int = 8, max_background: int = 48) -> "RegionPool":
        """Ground truth, jittered ground truth and grid proposals for every image.

        All positives are kept; at most ``max_background`` background regions
        per image are kept, chosen with a seeded generator.
        """
        from lsda.detect import ProposalConfig, propose_regions

        proposal_config = proposal_config or ProposalConfig()
        rng = np.random.default_rng(config.seed + 2)
        Xs, ys = [], []
        for rec in manifest.records:
            img = read_pgm(Path(root) / rec.path)
            gt = [b for b, _ in rec.boxes]
            gt_arr = boxes_to_array(gt)
            gt_lab = np.array([c for _, c in rec.boxes], dtype=np.int64)
            cands = list(gt)
            for b in gt:
                cands += jitter_boxes(rng, b, n_jitter, img.shape)
            cands += propose_regions(img.shape, proposal_config)
            cands = sorted(set(cands))
            labels = label_regions(boxes_to_array(cands), gt_arr, gt_lab, config.pos_iou)
            pos = np.flatnonzero(labels != BACKGROUND)
            bg = np.flatnonzero(labels == BACKGROUND)
            if len(bg) > max_background:
                bg = np.sort(rng.choice(bg, max_background, replace=False))
            keep = np.concatenate([pos, bg])
            Xs.append(np.stack([warp_region(img, cands[i], arch.context_pad, arch.input_size) for i in keep]))
            ys.append(labels[keep])
        return cls(np.concatenate(Xs), np.concatenate(ys))


def _compose_batch(pool: RegionPool, pos_idx: np.ndarray, config: TrainConfig, rng):
    n_pos = int(round(config.pos_fraction * config.batch_size))
    chosen = list(pos_idx[:n_pos])
    if 0 < len(chosen) < n_pos:
        # top up with second copies only; never more than two of any positive
        chosen += chosen[: n_pos - len(chosen)]
    bg = pool.backgrounds
    if len(bg) == 0:
        raise ValidationError("no background regions available in the detection data")
    n_bg = config.batch_size - len(chosen)
    picks = rng.choice(bg, n_bg, replace=len(bg) < n_bg)
    idx = np.concatenate([np.asarray(chosen, dtype=np.int64), picks])
    return pool.X[idx], pool.labels[idx]


def sample_detection_batch(pool: RegionPool, config: TrainConfig, rng):
    """One fine-tuning batch: ``round(pos_fraction * batch_size)`` positives, rest background.

    Returns ``(X, labels)`` with ``labels == BACKGROUND`` for background regions.
    """
    pos = pool.positives
    if len(pos) == 0:
        return _compose_batch(pool, pos, config, rng)
    return _compose_batch(pool, rng.permutation(pos), config, rng)


def _epoch_batches(pool: RegionPool, config: TrainConfig, rng):
    n_pos = max(1, int(round(config.pos_fraction * config.batch_size)))
    order = rng.permutation(pool.positives)
    n_batches = max(1, -(-len(order) // n_pos))
    for b in range(n_batches):
        yield _compose_batch(pool, order[b * n_pos:(b + 1) * n_pos], config, rng)


# --- detection fine-tuning ----------------------------------------------------------------

def finetune(pretrained: NetworkParams, pool: RegionPool, mask: FreezeMask, config: TrainConfig,
             trained_categories: Sequence[int] | None = None, parameterization: str = "delta",
             history: list | None = None) -> tuple[NetworkParams, WeightMatrix]:
    """Fine-tune a classification network into a detector.

    The loss is a softmax over the trained categories (set B by default)
    plus the background row.  ``parameterization="direct"`` trains the
    classifier rows themselves instead of a zero-initialised delta; the
    returned delta is then the difference to the starting rows.

    Passing every category index as ``trained_categories`` gives the
    full-detection upper bound; the returned delta then covers all K rows
    and the head's ``deltaA`` is trained as well.
    """
    if pretrained.state != CLASSIFICATION:
        raise ValidationError("finetune expects a classification-state network")
    if parameterization not in ("delta", "direct"):
        raise ConfigError(f"unknown parameterization {parameterization!r}")
    partition = pretrained.partition
    cats = np.asarray(list(partition.B) if trained_categories is None else sorted(trained_categories))
    trained_layers = mask.layer_indices(pretrained)
    lowest = min(trained_layers) if trained_layers else len(pretrained.layers)

    # map category labels to loss rows; background is the last row
    row_of = np.full(partition.K, -1, dtype=np.int64)
    row_of[cats] = np.arange(len(cats))
    if np.any(row_of[pool.labels[pool.labels != BACKGROUND]] < 0):
        raise ValidationError("detection data has boxes for categories that are not being trained")

    Ws = [np.array(l.values) for l in pretrained.layers]
    bs = [np.array(l.bias) for l in pretrained.layers]
    Wc = pretrained.head.classifier()
    base_W, base_b = Wc.values[cats], Wc.bias[cats]
    dW, db = np.zeros_like(base_W), np.zeros_like(base_b)
    direct_W, direct_b = base_W.copy(), base_b.copy()
    bg_W = np.zeros((1, Wc.cols))
    bg_b = np.zeros(1)

    opt = _Momentum(config.lr, config.momentum)
    rng = np.random.default_rng(config.seed + 3)
    for epoch in range(1, config.epochs + 1):
        total, correct, count = 0.0, 0.0, 0
        for X, labels in _epoch_batches(pool, config, rng):
            y = np.where(labels == BACKGROUND, len(cats), row_of[np.maximum(labels, 0)])
            if parameterization == "delta":
                rows_W, rows_b = base_W + dW, base_b + db
            else:
                rows_W, rows_b = direct_W, direct_b
            Wh = np.vstack([rows_W, bg_W])
            bh = np.concatenate([rows_b, bg_b])
            loss, acc, dWs, dbs, dWh, dbh = loss_and_grads(
                Ws, bs, Wh, bh, X, y, config.weight_decay, lowest_layer=lowest)
            _check_finite(loss, epoch)
            for i in trained_layers:
                opt.step(("W", i), Ws[i], dWs[i])
                opt.step(("b", i), bs[i], dbs[i])
            if mask.trains_delta:
                # d loss / d delta equals d loss / d row: the delta enters additively
                if parameterization == "delta":
                    opt.step("dW", dW, dWh[:-1])
                    opt.step("db", db, dbh[:-1])
                else:
                    opt.step("dW", direct_W, dWh[:-1])
                    opt.step("db", direct_b, dbh[:-1])
            opt.step("bgW", bg_W, dWh[-1:])
            opt.step("bgb", bg_b, dbh[-1:])
            total += loss * len(y)
            correct += acc * len(y)
            count += len(y)
        record = EpochRecord(epoch, total / count, correct / count)
        log.debug("finetune epoch %d loss %.4f acc %.3f", epoch, record.loss, record.accuracy)
        if history is not None:
            history.append(record)

    if parameterization == "direct":
        dW, db = direct_W - base_W, direct_b - base_b
    full_dW = np.zeros_like(Wc.values)
    full_db = np.zeros_like(Wc.bias)
    full_dW[cats], full_db[cats] = dW, db
    m = partition.m
    deltaB = WeightMatrix(full_dW[:m], full_db[:m])
    deltaA = WeightMatrix(full_dW[m:], full_db[m:])
    head = pretrained.head.to_detector(WeightMatrix(bg_W, bg_b)).replace(deltaB=deltaB, deltaA=deltaA)
    layers = tuple(
        WeightMatrix(W, b) if i in trained_layers else pretrained.layers[i]
        for i, (W, b) in enumerate(zip(Ws, bs))
    )
    return pretrained.replace(layers=layers, head=head), deltaB


# --- gradient check ------------------------------------------------------------------------

def gradient_check(params: NetworkParams, X, y, n_coords: int = 200, h: float = 1e-5,
                   weight_decay: float = 0.0, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The objective is softmax cross-entropy over every output row of the
    network in its current state; ``y`` indexes those rows.  Coordinates are
    sampled uniformly over all weights and biases.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(X) == 0:
        raise ValidationError("gradient check needs a nonempty batch")
    head = params.head.effective()
    arrays = [np.array(l.values) for l in params.layers] + [np.array(l.bias) for l in params.layers]
    arrays += [np.array(head.values), np.array(head.bias)]
    H = len(params.layers)

    def run():
        return loss_and_grads(arrays[:H], arrays[H:2 * H], arrays[-2], arrays[-1], X, y, weight_decay)

    _, _, dWs, dbs, dWh, dbh = run()
    grads = dWs + dbs + [dWh, dbh]
    sizes = np.array([a.size for a in arrays])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for f in flat:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        pos = np.unravel_index(int(f - offsets[k]), arrays[k].shape)
        old = arrays[k][pos]
        arrays[k][pos] = old + h
        up = run()[0]
        arrays[k][pos] = old - h
        down = run()[0]
        arrays[k][pos] = old
        numeric = (up - down) / (2 * h)
        analytic = grads[k][pos]
        # floor keeps rounding noise on near-zero gradients from dominating
        scale = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst
