"""Procedural glyph images with weak image labels and box annotations.

Three manifests come out of :func:`generate`:

* ``classification``: one dominant labelled glyph per image plus a few small
  unlabelled distractors, so the single image label is a weak annotation.
* ``detection``: boxes for set-B categories only.
* ``eval``: every object boxed, all K categories.

A fourth manifest, ``oracle_detection``, holds the detection images plus an
equal number of boxed images for set A.  It exists only to train the
full-detection upper bound.

Images are stored as binary PGM files; manifests are tab separated.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from lsda.boxes import Box
from lsda.exceptions import ParseError, ValidationError
from lsda.model import CategoryPartition

SPLITS = ("classification", "detection", "eval", "oracle_detection")


# --- glyphs ------------------------------------------------------------------
# Each glyph is a boolean mask over the unit square that touches all four
# edges, so its tight bounding box is the full square it was drawn into.

def _disc(u, v):
    return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25


def _ring(u, v):
    r2 = (u - 0.5) ** 2 + (v - 0.5) ** 2
    return (r2 <= 0.25) & (r2 >= 0.09)


def _square(u, v):
    return np.ones_like(u, dtype=bool)


def _frame(u, v):
    return (u < 0.2) | (u > 0.8) | (v < 0.2) | (v > 0.8)


def _triangle(u, v):
    return np.abs(u - 0.5) <= v / 2


def _cross(u, v):
    return (np.abs(u - 0.5) < 1 / 6) | (np.abs(v - 0.5) < 1 / 6)


def _diamond(u, v):
    return np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5


def _xshape(u, v):
    return (np.abs(u - v) < 0.18) | (np.abs(u + v - 1) < 0.18)


def _stripes(u, v):
    return (np.floor(v * 5) % 2) == 0


def _lshape(u, v):
    return (u < 0.35) | (v > 0.65)


def _tshape(u, v):
    return (v < 0.35) | (np.abs(u - 0.5) < 0.175)


def _checker(u, v):
    return (np.floor(u * 4) + np.floor(v * 4)) % 2 == 0


# Order matters: the first K entries are the categories of a K-category run.
# Filled shapes come last; crops of other glyphs easily look like them.
GLYPHS = {
    "ring": _ring,
    "cross": _cross,
    "triangle": _triangle,
    "checker": _checker,
    "bar": _stripes,
    "lshape": _lshape,
    "diamond": _diamond,
    "frame": _frame,
    "xshape": _xshape,
    "tshape": _tshape,
    "disc": _disc,
    "square": _square,
}
MAX_K = len(GLYPHS)


def glyph_mask(name: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` mask of a glyph sampled at pixel centres."""
    c = (np.arange(size) + 0.5) / size
    v, u = np.meshgrid(c, c, indexing="ij")
    return GLYPHS[name](u, v)


def category_names(K: int) -> tuple[str, ...]:
    if K > MAX_K:
        raise ValidationError(f"K={K} exceeds the glyph vocabulary; maximum supported K is {MAX_K}")
    return tuple(list(GLYPHS)[:K])


# --- config ------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    K: int = 8
    m: int | None = None
    cls_per_class: int = 50
    det_per_class: int = 30
    eval_images: int = 160
    image_size: int = 64
    objects_per_eval_image: float = 2.0
    clutter: int = 3
    crop: float = 0.15
    jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.m is None:
            object.__setattr__(self, "m", self.K // 2)
        if self.K < 4:
            raise ValidationError(f"need K >= 4, got {self.K}")
        category_names(self.K)
        if min(self.cls_per_class, self.det_per_class) < 20:
            raise ValidationError("need at least 20 images per class")
        if self.image_size < 32:
            raise ValidationError("image_size must be at least 32")
        if not 0.0 <= self.crop < 0.5:
            raise ValidationError("crop must lie in [0, 0.5)")
        if not 0.0 <= self.jitter <= 0.25:
            raise ValidationError("jitter must lie in [0, 0.25]")
        if not 1.0 <= self.objects_per_eval_image <= 3.0:
            raise ValidationError("objects_per_eval_image must lie in [1, 3]")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SynthConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in known:
                raise ValidationError(f"unknown data config key {key!r}")
            if value in (None, "None", ""):
                kwargs[key] = None
            else:
                kind = float if key in ("objects_per_eval_image", "crop", "jitter") else int
                try:
                    kwargs[key] = kind(value)
                except ValueError:
                    raise ValidationError(f"bad value for data config key {key!r}: {value!r}") from None
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


# --- records and manifests ---------------------------------------------------

@dataclass(frozen=True)
class SynthImage:
    id: str
    pixels: np.ndarray
    objects: tuple[tuple[Box, int], ...]


@dataclass(frozen=True)
class Record:
    id: str
    path: str
    label: int | None = None
    boxes: tuple[tuple[Box, int], ...] = ()


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    records: tuple[Record, ...]
    partition: CategoryPartition
    seed: int

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        for rec in self.records:
            if self.split == "classification":
                if rec.label is None or rec.boxes:
                    raise ValidationError(f"classification record {rec.id} needs exactly one label")
            elif rec.label is not None or not rec.boxes:
                raise ValidationError(f"{self.split} record {rec.id} needs boxes and no label")
            if self.split == "detection" and any(c >= self.partition.m for _, c in rec.boxes):
                raise ValidationError(f"detection record {rec.id} has a box outside set B")

    def to_text(self) -> str:
        p = self.partition
        lines = [
            f"# split={self.split}\n",
            f"# names={','.join(p.names)}\n",
            f"# m={p.m}\n",
            f"# seed={self.seed}\n",
        ]
        for rec in self.records:
            if self.split == "classification":
                field3 = p.names[rec.label]
            else:
                field3 = ";".join(f"{p.names[c]}:{b.format()}" for b, c in rec.boxes)
            lines.append(f"{rec.id}\t{rec.path}\t{field3}\n")
        return "".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def resolve(self, rec: Record, root) -> Path:
        return Path(root) / rec.path

    def gt_by_image(self) -> dict[str, tuple[tuple[Box, int], ...]]:
        return {rec.id: rec.boxes for rec in self.records}


def read_manifest(path) -> DatasetManifest:
    meta = {}
    body = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        else:
            body.append((lineno, line))
    try:
        partition = CategoryPartition(tuple(meta["names"].split(",")), int(meta["m"]))
        split, seed = meta["split"], int(meta["seed"])
    except KeyError as exc:
        raise ParseError(f"{path}: manifest header lacks {exc.args[0]!r}") from None
    records = []
    for lineno, line in body:
        cols = line.split("\t")
        if len(cols) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
        rid, rpath, payload = cols
        try:
            if split == "classification":
                records.append(Record(rid, rpath, label=partition.index(payload)))
            else:
                boxes = []
                for item in payload.split(";"):
                    name, _, coords = item.partition(":")
                    boxes.append((Box.parse(coords), partition.index(name)))
                records.append(Record(rid, rpath, boxes=tuple(boxes)))
        except ValidationError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    return DatasetManifest(split, tuple(records), partition, seed)


# --- image I/O -----------------------------------------------------------------

def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    Image.fromarray(quantize(pixels), mode="L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


# --- rendering -----------------------------------------------------------------

def _background(rng, size):
    """Noise plus a few unlabelled line segments, so background is not featureless."""
    level = rng.uniform(0.05, 0.3)
    img = level + rng.normal(0.0, 0.06, size=(size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(2, 6))):
        x0, y0 = rng.uniform(0, size, 2)
        angle = rng.uniform(0, np.pi)
        length = rng.uniform(size / 6, size / 2)
        dx, dy = np.cos(angle), np.sin(angle)
        t = np.clip((xx - x0) * dx + (yy - y0) * dy, 0, length)
        dist = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
        img[dist < rng.uniform(0.6, 1.5)] = rng.uniform(0.35, 0.7)
    return img


def _paint(img, rng, name, box: Box):
    _paint_at(img, rng, name, box.x1, box.y1, box.width)


def _paint_at(img, rng, name, x, y, s):
    """Draw a glyph of side ``s`` at (x, y); parts outside the image are cut off."""
    mask = glyph_mask(name, s)
    h, w = img.shape
    x1, y1, x2, y2 = max(x, 0), max(y, 0), min(x + s, w), min(y + s, h)
    mask = mask[y1 - y:y2 - y, x1 - x:x2 - x]
    region = img[y1:y2, x1:x2]
    region[mask] = rng.uniform(0.6, 1.0) + rng.normal(0.0, 0.03, size=int(mask.sum()))


def _overlaps(box: Box, placed, margin=1):
    for other in placed:
        if (box.x1 < other.x2 + margin and other.x1 < box.x2 + margin
                and box.y1 < other.y2 + margin and other.y1 < box.y2 + margin):
            return True
    return False


def _place(rng, size, lo, hi, placed, tries=50):
    for _ in range(tries):
        s = int(rng.integers(lo, hi + 1))
        x = int(rng.integers(0, size - s + 1))
        y = int(rng.integers(0, size - s + 1))
        box = Box(x, y, x + s, y + s)
        if not _overlaps(box, placed):
            return box
    return None


def _balanced_labels(rng, categories, n):
    reps = -(-n // len(categories))
    labels = np.tile(np.asarray(categories), reps)[:n]
    return [int(c) for c in rng.permutation(labels)]


def _classification_image(rng, cfg, names, label):
    # One large, roughly centred glyph that may run off the border by up to
    # ``crop`` of its side, drawn over a few small distractors.
    size = cfg.image_size
    img = _background(rng, size)
    s = int(rng.integers(int(size * 0.5), int(size * 0.9) + 1))
    cut = int(s * cfg.crop)
    j = int(size * cfg.jitter)
    centre = (size - s) // 2
    x = int(np.clip(centre + rng.integers(-j, j + 1), -cut, size - s + cut))
    y = int(np.clip(centre + rng.integers(-j, j + 1), -cut, size - s + cut))
    main = Box(max(x, 0), max(y, 0), min(x + s, size), min(y + s, size))
    for _ in range(int(rng.integers(0, cfg.clutter + 1))):
        box = _place(rng, size, max(4, size // 8), max(5, size // 5), [])
        _paint(img, rng, names[int(rng.integers(0, len(names)))], box)
    _paint_at(img, rng, names[label], x, y, s)
    return np.clip(img, 0.0, 1.0), main


def _boxed_image(rng, cfg, names, labels):
    size = cfg.image_size
    img = _background(rng, size)
    lo, hi = int(size * 0.22), int(size * 0.47)
    objects, placed = [], []
    for c in labels:
        box = _place(rng, size, lo, hi, placed)
        if box is None:
            continue
        _paint(img, rng, names[c], box)
        objects.append((box, c))
        placed.append(box)
    return np.clip(img, 0.0, 1.0), tuple(objects)


def _eval_counts(rng, n_images, target):
    # mixture of neighbouring integers whose mean is the target
    lo = int(np.floor(target))
    frac = target - lo
    counts = np.full(n_images, lo)
    counts[: int(round(frac * n_images))] += 1
    return [int(c) for c in rng.permutation(counts)]


def _boxed_split(rng, cfg, names, categories, n_images, counts):
    labels = _balanced_labels(rng, categories, sum(counts))
    out, pos = [], 0
    for i in range(n_images):
        img, objects = _boxed_image(rng, cfg, names, labels[pos:pos + counts[i]])
        pos += counts[i]
        if not objects:
            img, objects = _boxed_image(rng, cfg, names, [labels[pos - 1]])
        out.append((img, objects))
    return out


def generate_images(cfg: SynthConfig) -> dict[str, list[SynthImage]]:
    """Render every split in memory.  Splits use independent sub-seeds."""
    names = category_names(cfg.K)
    partition = CategoryPartition.create(names, cfg.m)
    names = partition.names
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    out: dict[str, list[SynthImage]] = {}

    rng = np.random.default_rng(seeds[0])
    labels = _balanced_labels(rng, range(cfg.K), cfg.K * cfg.cls_per_class)
    out["classification"] = []
    for i, label in enumerate(labels):
        img, main = _classification_image(rng, cfg, names, label)
        out["classification"].append(SynthImage(f"cls{i:05d}", img, ((main, label),)))

    def boxed(prefix, seed, categories, n):
        rng = np.random.default_rng(seed)
        counts = [int(c) for c in rng.integers(1, 3, size=n)]
        return [
            SynthImage(f"{prefix}{i:05d}", img, objects)
            for i, (img, objects) in enumerate(_boxed_split(rng, cfg, names, categories, n, counts))
        ]

    out["detection"] = boxed("det", seeds[1], list(partition.B), cfg.m * cfg.det_per_class)
    extra = boxed("detA", seeds[2], list(partition.A), len(partition.A) * cfg.det_per_class)

    rng = np.random.default_rng(seeds[3])
    counts = _eval_counts(rng, cfg.eval_images, cfg.objects_per_eval_image)
    out["eval"] = [
        SynthImage(f"val{i:05d}", img, objects)
        for i, (img, objects) in enumerate(
            _boxed_split(rng, cfg, names, list(range(cfg.K)), cfg.eval_images, counts))
    ]
    out["oracle_detection"] = out["detection"] + extra
    return out


def generate(cfg: SynthConfig, root) -> dict[str, DatasetManifest]:
    """Write PGM images and TSV manifests under ``root``; return the manifests."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    partition = CategoryPartition.create(category_names(cfg.K), cfg.m)
    images = generate_images(cfg)
    manifests = {}
    written = set()
    for split in SPLITS:
        records = []
        for im in images[split]:
            rel = f"images/{im.id}.pgm"
            if im.id not in written:
                write_pgm(root / rel, im.pixels)
                written.add(im.id)
            if split == "classification":
                records.append(Record(im.id, rel, label=im.objects[0][1]))
            else:
                records.append(Record(im.id, rel, boxes=im.objects))
        manifests[split] = DatasetManifest(split, tuple(records), partition, cfg.seed)
        manifests[split].write(root / f"{split}.tsv")
    (root / "data_config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return manifests


def load_images(manifest: DatasetManifest, root) -> dict[str, np.ndarray]:
    return {rec.id: read_pgm(Path(root) / rec.path) for rec in manifest.records}


def digest_tree(root) -> str:
    """SHA-256 over every file under ``root`` (paths and bytes)."""
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# --- region warping --------------------------------------------------------------

@lru_cache(maxsize=512)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear resampling weights, pixel-centre aligned, edge clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    m.flags.writeable = False
    return m


def padded_crop(shape, box: Box, context_pad: int = 0) -> tuple[int, int, int, int]:
    if context_pad < 0:
        raise ValidationError("context_pad must be non-negative")
    h, w = shape
    x1 = max(0, box.x1 - context_pad)
    y1 = max(0, box.y1 - context_pad)
    x2 = min(w, box.x2 + context_pad)
    y2 = min(h, box.y2 + context_pad)
    if x2 <= x1 or y2 <= y1:
        raise ValidationError(f"region {box.as_tuple()} is empty after clipping to {w}x{h}")
    return x1, y1, x2, y2


def warp_region(image: np.ndarray, box: Box, context_pad: int = 0, out_size: int = 32) -> np.ndarray:
    """Pad, clip, bilinearly resize to ``out_size`` squared and flatten row-major."""
    x1, y1, x2, y2 = padded_crop(image.shape, box, context_pad)
    crop = image[y1:y2, x1:x2]
    out = _interp_matrix(y2 - y1, out_size) @ crop @ _interp_matrix(x2 - x1, out_size).T
    return np.clip(out, 0.0, 1.0).ravel()


def warp_regions(image: np.ndarray, boxes, context_pad: int = 0, out_size: int = 32) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, out_size * out_size))
    return np.stack([warp_region(image, b, context_pad, out_size) for b in boxes])
