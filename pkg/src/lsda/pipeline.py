"""Experiment configuration, workdir layout, stage functions and the ablation grid.

The command-line front end in :mod:`lsda.cli` is a thin layer over this
module; the acceptance tests call it directly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

import lsda
from lsda.adapt import FULL, AdaptConfig, assemble_lsda, nearest_neighbors
from lsda.detect import Detection, ProposalConfig, detect_image, read_proposals
from lsda.evaluation import EvalReport, evaluate, paired_t_test
from lsda.exceptions import ConfigError, LSDAError, MissingArtifactError, UndefinedStatisticError
from lsda.fp_analysis import breakdown, false_positives, scaled_cutoffs
from lsda.model import NetworkParams, load_matrix, load_weights, save_matrix, save_weights
from lsda.synth import DatasetManifest, SynthConfig, load_images, read_manifest
from lsda.train import (
    ArchConfig,
    FreezeMask,
    RegionPool,
    TrainConfig,
    finetune,
    full_image_inputs,
    pretrain,
    training_accuracy,
    write_log,
)

log = logging.getLogger(__name__)

FINETUNE_DEFAULTS = TrainConfig(lr=0.003, epochs=5, batch_size=128)
LSDA_MASK = "bgrnd+layers+fcB"


# --- configuration --------------------------------------------------------------------

def _convert(text: str, default):
    """Parse ``text`` into the type of ``default``."""
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in text.split(",") if p.strip())
    if text in ("", "None", "none"):
        return None
    return text


def _section_text(prefix: str, obj) -> list[str]:
    out = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        out.append(f"{prefix}{f.name}={v}")
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run depends on.  ``seed`` is copied into every stochastic stage."""

    seed: int = 0
    data: SynthConfig = field(default_factory=SynthConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = FINETUNE_DEFAULTS
    mask: str = LSDA_MASK
    k: str = "auto"
    include_bias: bool = False
    adapt_bias: bool = True
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    nms_iou: float = 0.3
    eval_iou: float = 0.5
    fp_low: float = 0.1
    softmax_scores: bool = False

    def __post_init__(self):
        object.__setattr__(self, "data", replace(self.data, seed=self.seed))
        object.__setattr__(self, "pretrain", self.pretrain.replace(seed=self.seed))
        object.__setattr__(self, "finetune", self.finetune.replace(seed=self.seed))
        FreezeMask.parse(self.mask)
        if self.k != "auto":
            self.adapt_config()
        for name in ("nms_iou", "eval_iou"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1]")

    _SECTIONS = ("data", "arch", "pretrain", "finetune", "proposals")
    _TOP = ("seed", "mask", "k", "include_bias", "adapt_bias", "nms_iou", "eval_iou", "fp_low", "softmax_scores")

    def adapt_config(self, k: str | int | None = None) -> AdaptConfig:
        """Output-adaptation settings; ``auto`` means k=10, or every B category when |B| < 10."""
        k = self.k if k is None else k
        if k == "auto":
            k = 10 if self.data.m >= 10 else FULL
        elif str(k).upper() != FULL:
            k = int(k)
        return AdaptConfig(k=k, include_bias=self.include_bias, adapt_bias=self.adapt_bias)

    def with_overrides(self, mapping: dict[str, str]) -> "ExperimentConfig":
        """Apply ``section.key=value`` (or top-level ``key=value``) string overrides."""
        changes: dict = {}
        sections: dict[str, dict] = {}
        for key, value in mapping.items():
            section, dot, name = key.partition(".")
            if not dot:
                if key not in self._TOP:
                    raise ConfigError(f"unknown config key {key!r}")
                try:
                    changes[key] = value.strip() if key in ("mask", "k") else _convert(value, getattr(self, key))
                except ValueError:
                    raise ConfigError(f"bad value for {key}: {value!r}") from None
            elif section in self._SECTIONS:
                sections.setdefault(section, {})[name] = value.strip()
            else:
                raise ConfigError(f"unknown config section in {key!r}")
        for section, values in sections.items():
            sub = getattr(self, section)
            if section == "data":
                current = {f.name: str(getattr(sub, f.name)) for f in fields(sub)}
                if "K" in values and "m" not in values:
                    current["m"] = "None"
                changes[section] = SynthConfig.from_mapping({**current, **values})
                continue
            parsed = {}
            for name, value in values.items():
                if name not in {f.name for f in fields(sub)}:
                    raise ConfigError(f"unknown config key {section}.{name!r}")
                try:
                    parsed[name] = _convert(value, getattr(sub, name))
                except ValueError:
                    raise ConfigError(f"bad value for {section}.{name}: {value!r}") from None
            changes[section] = sub.replace(**parsed) if isinstance(sub, TrainConfig) else replace(sub, **parsed)
        return replace(self, **changes)

    @classmethod
    def from_text(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        mapping = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key=value")
            key, _, value = line.partition("=")
            mapping[key.strip()] = value.strip()
        return (base or cls()).with_overrides(mapping)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise MissingArtifactError(f"config file {p} does not exist")
        return cls.from_text(p.read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = [f"seed={self.seed}"]
        for name in ("data", "arch", "pretrain", "finetune", "proposals"):
            lines += _section_text(f"{name}.", getattr(self, name))
        for name in self._TOP[1:]:
            lines.append(f"{name}={getattr(self, name)}")
        return "\n".join(lines) + "\n"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


# --- workdir layout -------------------------------------------------------------------------

@dataclass(frozen=True)
class Workdir:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    @property
    def data(self) -> Path:
        return self.root / "data"

    def manifest(self, split: str) -> Path:
        return self.data / f"{split}.tsv"

    @property
    def pretrained(self) -> Path:
        return self.root / "pretrain.lsdaw"

    @property
    def finetuned(self) -> Path:
        return self.root / "finetune.lsdaw"

    @property
    def delta(self) -> Path:
        return self.root / "deltaB.lsdaw"

    @property
    def detector(self) -> Path:
        return self.root / "lsda.lsdaw"

    @property
    def neighbors(self) -> Path:
        return self.root / "neighbors.tsv"

    def log(self, stage: str) -> Path:
        return self.root / "logs" / f"{stage}.tsv"

    def detections(self, name: str) -> Path:
        return self.root / "detections" / f"{name}.tsv"

    def report(self, name: str) -> Path:
        return self.root / "reports" / f"{name}.tsv"

    @property
    def analysis(self) -> Path:
        return self.root / "analysis"

    @property
    def ablation(self) -> Path:
        return self.root / "ablation"

    def provenance(self, command: str) -> Path:
        return self.root / "provenance" / f"{command}.json"

    def require(self, path: Path, what: str, command: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"missing {what} file {path}; run `lsda {command}` first")
        return path

    def load_manifest(self, split: str) -> DatasetManifest:
        return read_manifest(self.require(self.manifest(split), f"{split} manifest", "gen-data"))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_provenance(wd: Workdir, command: str, cfg: ExperimentConfig, inputs: Sequence[Path],
                     outputs: Sequence[Path], extra: dict | None = None) -> Path:
    """JSON record of what produced a command's outputs; no timestamps, so reruns are byte-identical."""
    record = {
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_text().splitlines(),
        "config_sha256": cfg.digest,
        "versions": {"lsda": lsda.__version__, "numpy": np.__version__, "python": platform.python_version()},
        "inputs": {str(Path(p).relative_to(wd.root)): file_digest(p) for p in inputs},
        "outputs": {str(Path(p).relative_to(wd.root)): file_digest(p) for p in outputs if Path(p).is_file()},
    }
    if extra:
        record.update(extra)
    path = wd.provenance(command)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --- building blocks ---------------------------------------------------------------------------

def baseline_detector(pretrained: NetworkParams) -> NetworkParams:
    """Classification network used directly as a detector: zero background score."""
    return pretrained.replace(head=pretrained.head.to_detector())


def detection_pool(cfg: ExperimentConfig, manifest: DatasetManifest, root) -> RegionPool:
    return RegionPool.from_manifest(manifest, root, cfg.finetune, cfg.arch, cfg.proposals)


def lsda_detector(pretrained: NetworkParams, finetuned: NetworkParams, deltaB, adapt: AdaptConfig) -> NetworkParams:
    head = assemble_lsda(pretrained.head, finetuned.head, deltaB, pretrained.partition, adapt)
    return finetuned.replace(head=head)


def detect_corpus(network: NetworkParams, manifest: DatasetManifest, images: dict[str, np.ndarray],
                  cfg: ExperimentConfig, score_floor: float = -math.inf) -> list[Detection]:
    external = read_proposals(cfg.proposals.external) if cfg.proposals.external else None
    out = []
    for rec in manifest.records:
        out += detect_image(network, images[rec.id], rec.id, cfg.proposals, cfg.nms_iou, score_floor,
                            cfg.arch.context_pad, cfg.softmax_scores, external)
    return out


def heldout_breakdown(detections, manifest: DatasetManifest, cfg: ExperimentConfig):
    fps = false_positives(detections, manifest, manifest.partition.A, cfg.eval_iou, cfg.fp_low)
    return breakdown(fps, scaled_cutoffs(len(manifest.records)))


# --- ablation grid ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class GridRow:
    layers: str              # freeze-mask label
    output: str              # output-adaptation label, "-" for none
    mask: str | None = None
    k: str | int | None = None
    oracle: bool = False

    @property
    def key(self) -> str:
        return f"{self.layers} | {self.output}"


ABLATION_MASKS = ("bgrnd", "bgrnd+fc6", "bgrnd+fc7", "bgrnd+fcB", "bgrnd+fc6+fc7",
                  "bgrnd+fc6+fc7+fcB", LSDA_MASK)
NO_ADAPT = "no-adapt (classification only)"
ORACLE_LABEL = "Oracle: full detection network"


@dataclass(frozen=True)
class AblationGrid:
    rows: tuple[GridRow, ...]

    def __post_init__(self):
        keys = [r.key for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ConfigError("ablation grid labels must be unique")

    @classmethod
    def default(cls, m: int) -> "AblationGrid":
        rows = [GridRow(NO_ADAPT, "-")]
        rows += [GridRow(mask, "-", mask) for mask in ABLATION_MASKS]
        for k in [k for k in (5, 10) if k < m] + [FULL]:
            rows.append(GridRow(LSDA_MASK, AdaptConfig(k=k).label, LSDA_MASK, k))
        rows.append(GridRow(ORACLE_LABEL, "-", LSDA_MASK, oracle=True))
        return cls(tuple(rows))

    @classmethod
    def headline(cls, k: str | int) -> "AblationGrid":
        """The rows the headline comparisons need."""
        return cls((
            GridRow(NO_ADAPT, "-"),
            GridRow("bgrnd", "-", "bgrnd"),
            GridRow(LSDA_MASK, "-", LSDA_MASK),
            GridRow(LSDA_MASK, AdaptConfig(k=k).label, LSDA_MASK, k),
            GridRow(ORACLE_LABEL, "-", LSDA_MASK, oracle=True),
        ))

    def cells(self) -> list[tuple[str | None, bool]]:
        """Distinct (mask, oracle) fine-tuning runs, in first-use order."""
        out = []
        for r in self.rows:
            if (r.mask, r.oracle) not in out:
                out.append((r.mask, r.oracle))
        return out


@dataclass
class RowResult:
    row: GridRow
    report: EvalReport | None
    status: str
    eval_digest: str
    detections: list | None = None
    p_value: str = ""


class _Context:
    """Read-only state shared by every grid cell: data, pretrained net, eval images."""

    def __init__(self, cfg: ExperimentConfig, root):
        self.cfg = cfg
        self.wd = Workdir(root)
        self.eval_manifest = self.wd.load_manifest("eval")
        self.eval_digest = file_digest(self.wd.manifest("eval"))
        self.images = load_images(self.eval_manifest, self.wd.data)
        self.pretrained = load_weights(self.wd.require(self.wd.pretrained, "pretrained weights", "pretrain"))
        self._pools: dict[bool, RegionPool] = {}

    def pool(self, oracle: bool) -> RegionPool:
        if oracle not in self._pools:
            split = "oracle_detection" if oracle else "detection"
            self._pools[oracle] = detection_pool(self.cfg, self.wd.load_manifest(split), self.wd.data)
        return self._pools[oracle]

    def evaluate(self, network):
        dets = detect_corpus(network, self.eval_manifest, self.images, self.cfg)
        return evaluate(dets, self.eval_manifest, iou_threshold=self.cfg.eval_iou), dets

    def run_cell(self, mask: str | None, oracle: bool, rows: Sequence[GridRow], keep: bool) -> list[RowResult]:
        try:
            if mask is None:
                base, dB = baseline_detector(self.pretrained), None
            else:
                cats = range(self.pretrained.partition.K) if oracle else None
                base, dB = finetune(self.pretrained, self.pool(oracle), FreezeMask.parse(mask), self.cfg.finetune,
                                    trained_categories=cats)
        except (LSDAError, ArithmeticError) as exc:
            return [RowResult(r, None, f"failed: {exc}", self.eval_digest) for r in rows]
        out = []
        for r in rows:
            try:
                net = base if r.k is None else lsda_detector(self.pretrained, base, dB, self.cfg.adapt_config(r.k))
                rep, dets = self.evaluate(net)
                out.append(RowResult(r, rep, "ok", self.eval_digest, dets if keep else None))
            except (LSDAError, ArithmeticError) as exc:
                out.append(RowResult(r, None, f"failed: {exc}", self.eval_digest))
        return out


_WORKER: _Context | None = None


def _init_worker(cfg, root):
    global _WORKER
    _WORKER = _Context(cfg, root)


def _run_remote(mask, oracle, rows, keep):
    return _WORKER.run_cell(mask, oracle, rows, keep)


def run_grid(cfg: ExperimentConfig, root, grid: AblationGrid, jobs: int = 1,
             keep_detections: bool = False) -> list[RowResult]:
    """Evaluate every grid row from one shared pretrained checkpoint.

    Rows sharing a freeze mask share one fine-tuning run.  Failed cells are
    reported with their error; the remaining cells still run.
    """
    groups = [(mask, oracle, [r for r in grid.rows if (r.mask, r.oracle) == (mask, oracle)])
              for mask, oracle in grid.cells()]
    if jobs <= 1:
        ctx = _Context(cfg, root)
        chunks = [ctx.run_cell(mask, oracle, rows, keep_detections) for mask, oracle, rows in groups]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(cfg, str(root))) as pool:
            futures = [pool.submit(_run_remote, mask, oracle, rows, keep_detections) for mask, oracle, rows in groups]
            chunks = [f.result() for f in futures]
    by_key = {res.row.key: res for chunk in chunks for res in chunk}
    results = [by_key[r.key] for r in grid.rows]
    _attach_t_tests(results)
    return results


def _attach_t_tests(results: list[RowResult]) -> None:
    # each output-adapted row against the same layers without output adaptation, on held-out APs
    plain = {r.row.layers: r for r in results if r.row.output == "-" and not r.row.oracle and r.report}
    for res in results:
        ref = plain.get(res.row.layers)
        if res.row.k is None or res.report is None or ref is None:
            continue
        a = [ref.report.ap[i] for i in ref.report.partition.A]
        b = [res.report.ap[i] for i in res.report.partition.A]
        try:
            _, p = paired_t_test(a, b)
            res.p_value = f"{p:.4g}"
        except (UndefinedStatisticError, LSDAError):
            res.p_value = "undefined"


def grid_tsv(results: Sequence[RowResult]) -> str:
    lines = ["adaptation_layers\toutput_adaptation\tmAP_trained\tmAP_heldout\tmAP_all\tp_vs_no_output\tstatus\n"]
    for res in results:
        if res.report:
            cols = [f"{res.report.map_trained!r}", f"{res.report.map_heldout!r}", f"{res.report.map_all!r}"]
        else:
            cols = ["", "", ""]
        lines.append("\t".join([res.row.layers, res.row.output, *cols, res.p_value, res.status]) + "\n")
    return "".join(lines)


def per_category_tsv(results: Sequence[RowResult]) -> str:
    ok = [r for r in results if r.report]
    if not ok:
        return ""
    names = ok[0].report.partition.names
    lines = ["row\t" + "\t".join(names) + "\n"]
    for res in ok:
        lines.append(res.row.key + "\t" + "\t".join(f"{a!r}" for a in res.report.ap) + "\n")
    return "".join(lines)


def grid_table(results: Sequence[RowResult]) -> str:
    """Fixed-width table: adaptation layers, output adaptation, then the three mAP columns."""
    part = next((r.report.partition for r in results if r.report), None)
    head_b = f"Trained ({part.m})" if part else "Trained"
    head_a = f"Held-out ({len(part.A)})" if part else "Held-out"
    lines = [f"{'Adaptation layers':<34}{'Output adaptation':<20}{head_b:>13}{head_a:>14}{'All':>8}{'p':>10}\n"]
    lines.append("-" * 99 + "\n")
    for res in results:
        if res.report:
            nums = (f"{100 * res.report.map_trained:13.2f}{100 * res.report.map_heldout:14.2f}"
                    f"{100 * res.report.map_all:8.2f}")
        else:
            nums = f"{res.status:>35}"
        lines.append(f"{res.row.layers:<34}{res.row.output:<20}{nums}{res.p_value:>10}\n")
    return "".join(lines)


def write_grid(results: Sequence[RowResult], wd: Workdir) -> list[Path]:
    wd.ablation.mkdir(parents=True, exist_ok=True)
    outs = [wd.ablation / "grid.tsv", wd.ablation / "per_category.tsv", wd.ablation / "table.txt"]
    outs[0].write_text(grid_tsv(results), encoding="utf-8")
    outs[1].write_text(per_category_tsv(results), encoding="utf-8")
    outs[2].write_text(grid_table(results), encoding="utf-8")
    return outs


# --- stages ------------------------------------------------------------------------------------------

def stage_pretrain(cfg: ExperimentConfig, wd: Workdir) -> tuple[NetworkParams, float]:
    manifest = wd.load_manifest("classification")
    history: list = []
    net = pretrain(manifest, wd.data, cfg.pretrain, cfg.arch, history)
    save_weights(net, wd.pretrained)
    wd.log("pretrain").parent.mkdir(parents=True, exist_ok=True)
    write_log(history, wd.log("pretrain"))
    X, y = full_image_inputs(manifest, wd.data, cfg.arch)
    return net, training_accuracy(net, X, y)


def stage_finetune(cfg: ExperimentConfig, wd: Workdir, mask: str | None = None):
    pre = load_weights(wd.require(wd.pretrained, "pretrained weights", "pretrain"))
    pool = detection_pool(cfg, wd.load_manifest("detection"), wd.data)
    history: list = []
    ft, dB = finetune(pre, pool, FreezeMask.parse(mask or cfg.mask), cfg.finetune, history=history)
    save_weights(ft, wd.finetuned)
    save_matrix(dB, wd.delta)
    wd.log("finetune").parent.mkdir(parents=True, exist_ok=True)
    write_log(history, wd.log("finetune"))
    return ft, dB


def stage_adapt(cfg: ExperimentConfig, wd: Workdir, adapt: AdaptConfig | None = None):
    adapt = adapt or cfg.adapt_config()
    pre = load_weights(wd.require(wd.pretrained, "pretrained weights", "pretrain"))
    ft = load_weights(wd.require(wd.finetuned, "fine-tuned weights", "finetune"))
    dB = load_matrix(wd.require(wd.delta, "deltaB sidecar", "finetune"))
    nmap = nearest_neighbors(pre.head.classifier(), pre.partition, adapt)
    det = lsda_detector(pre, ft, dB, adapt)
    save_weights(det, wd.detector)
    nmap.write(pre.partition, wd.neighbors)
    return det, nmap


def resolve_model(wd: Workdir, model: str) -> NetworkParams:
    """Named detector (``lsda``, ``finetuned``, ``baseline``) or a weight-file path."""
    if model == "lsda":
        return load_weights(wd.require(wd.detector, "adapted detector weights", "adapt"))
    if model == "finetuned":
        return load_weights(wd.require(wd.finetuned, "fine-tuned weights", "finetune"))
    if model == "baseline":
        return baseline_detector(load_weights(wd.require(wd.pretrained, "pretrained weights", "pretrain")))
    path = Path(model)
    if not path.exists():
        raise MissingArtifactError(f"missing weight file {path}")
    net = load_weights(path)
    return net if net.state == "detector" else baseline_detector(net)
