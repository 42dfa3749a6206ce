"""The ``lsda`` command: one subcommand per pipeline stage, plus the ablation grid.

Configuration is layered: built-in defaults, then ``<workdir>/config.txt``
(written by ``gen-data``), then ``--config FILE``, then flags.  Flags win.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from lsda.detect import read_detections, write_detections
from lsda.evaluation import evaluate
from lsda.exceptions import (
    DivergenceError,
    LSDAError,
    MissingArtifactError,
    UndefinedStatisticError,
    ValidationError,
    WeightFileError,
)
from lsda.fp_analysis import comparison_table
from lsda.pipeline import (
    AblationGrid,
    ExperimentConfig,
    Workdir,
    detect_corpus,
    heldout_breakdown,
    resolve_model,
    run_grid,
    stage_adapt,
    stage_finetune,
    stage_pretrain,
    write_grid,
    write_provenance,
)
from lsda.synth import generate, load_images

log = logging.getLogger("lsda")

EXIT_OK, EXIT_VALIDATION, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_NAME = "config.txt"


def _split_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, _, value = text.partition("=")
    return key.strip(), value.strip()


def load_config(args, wd: Workdir) -> ExperimentConfig:
    cfg = ExperimentConfig()
    stored = wd.root / CONFIG_NAME
    if stored.exists() and args.command != "gen-data":
        cfg = ExperimentConfig.from_text(stored.read_text(encoding="utf-8"))
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifactError(f"config file {path} does not exist")
        cfg = ExperimentConfig.from_text(path.read_text(encoding="utf-8"), base=cfg)
    overrides = dict(args.set or [])
    for flag, key in (("seed", "seed"), ("k", "k"), ("mask", "mask")):
        if getattr(args, flag, None) is not None:
            overrides[key] = str(getattr(args, flag))
    if getattr(args, "nn_include_bias", False):
        overrides["include_bias"] = "true"
    if getattr(args, "no_bias_adapt", False):
        overrides["adapt_bias"] = "false"
    if getattr(args, "softmax_scores", False):
        overrides["softmax_scores"] = "true"
    return cfg.with_overrides(overrides) if overrides else cfg


# --- commands ---------------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, wd: Workdir, args) -> None:
    wd.root.mkdir(parents=True, exist_ok=True)
    (wd.root / CONFIG_NAME).write_text(cfg.to_text(), encoding="utf-8")
    manifests = generate(cfg.data, wd.data)
    outs = [wd.manifest(split) for split in manifests]
    write_provenance(wd, "gen-data", cfg, [], outs + [wd.root / CONFIG_NAME])
    for split, man in manifests.items():
        print(f"{split}: {len(man.records)} images -> {wd.manifest(split)}")


def cmd_pretrain(cfg: ExperimentConfig, wd: Workdir, args) -> None:
    _, accuracy = stage_pretrain(cfg, wd)
    write_provenance(wd, "pretrain", cfg, [wd.manifest("classification")], [wd.pretrained, wd.log("pretrain")],
                     {"training_accuracy": accuracy})
    print(f"pretrained -> {wd.pretrained} (training accuracy {accuracy:.4f})")


def cmd_finetune(cfg: ExperimentConfig, wd: Workdir, args) -> None:
    stage_finetune(cfg, wd)
    write_provenance(wd, "finetune", cfg, [wd.pretrained, wd.manifest("detection")],
                     [wd.finetuned, wd.delta, wd.log("finetune")])
    print(f"fine-tuned ({cfg.mask}) -> {wd.finetuned}, {wd.delta}")


def cmd_adapt(cfg: ExperimentConfig, wd: Workdir, args) -> None:
    adapt = cfg.adapt_config()
    stage_adapt(cfg, wd, adapt)
    write_provenance(wd, "adapt", cfg, [wd.pretrained, wd.finetuned, wd.delta], [wd.detector, wd.neighbors],
                     {"adapt": adapt.label})
    print(f"adapted ({adapt.label}) -> {wd.detector}; neighbours -> {wd.neighbors}")


def cmd_detect(cfg: ExperimentConfig, wd: Workdir, args) -> None:
    network = resolve_model(wd, args.model)
    name = args.name or Path(args.model).stem
    manifest = wd.load_manifest(args.split)
    dets = detect_corpus(network, manifest, load_images(manifest, wd.data), cfg)
    out = wd.detections(name)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_detections(dets, manifest.partition.names, out)
    model_path = {"lsda": wd.detector, "finetuned": wd.finetuned, "baseline": wd.pretrained}.get(args.model, args.model)
    write_provenance(wd, f"detect-{name}", cfg, [Path(model_path), wd.manifest(args.split)], [out])
    print(f"{len(dets)} detections -> {out}")


def cmd_eval(cfg: ExperimentConfig, wd: Workdir, args) -> None:
    manifest = wd.load_manifest(args.split)
    path = wd.require(wd.detections(args.name), "detections", "detect")
    report = evaluate(read_detections(path, manifest.partition.names), manifest, iou_threshold=cfg.eval_iou)
    tsv, txt = wd.report(args.name), wd.report(args.name).with_suffix(".txt")
    tsv.parent.mkdir(parents=True, exist_ok=True)
    tsv.write_text(report.to_tsv(), encoding="utf-8")
    txt.write_text(report.table(), encoding="utf-8")
    write_provenance(wd, f"eval-{args.name}", cfg, [path, wd.manifest(args.split)], [tsv, txt])
    print(report.table(), end="")


def cmd_analyze(cfg: ExperimentConfig, wd: Workdir, args) -> None:
    manifest = wd.load_manifest(args.split)
    curves, inputs = {}, []
    for name in args.names:
        path = wd.require(wd.detections(name), f"{name} detections", f"detect --model {name}")
        inputs.append(path)
        curves[name] = heldout_breakdown(read_detections(path, manifest.partition.names), manifest, cfg)
    wd.analysis.mkdir(parents=True, exist_ok=True)
    outs = []
    for name, curve in curves.items():
        outs.append(wd.analysis / f"{name}.tsv")
        curve.write(outs[-1])
    outs.append(wd.analysis / "comparison.txt")
    outs[-1].write_text(comparison_table(curves), encoding="utf-8")
    write_provenance(wd, "analyze", cfg, inputs + [wd.manifest(args.split)], outs)
    print(outs[-1].read_text(encoding="utf-8"), end="")


def cmd_ablate(cfg: ExperimentConfig, wd: Workdir, args) -> None:
    grid = AblationGrid.default(cfg.data.m) if args.rows == "full" else AblationGrid.headline(cfg.adapt_config().k)
    results = run_grid(cfg, wd.root, grid, jobs=args.jobs)
    outs = write_grid(results, wd)
    eval_hashes = sorted({r.eval_digest for r in results})
    write_provenance(wd, "ablate", cfg, [wd.pretrained, wd.manifest("eval"), wd.manifest("detection"),
                                         wd.manifest("oracle_detection")], outs,
                     {"eval_manifest_sha256": eval_hashes, "rows": [r.row.key for r in results]})
    print(outs[2].read_text(encoding="utf-8"), end="")
    failed = [r for r in results if r.status != "ok"]
    if failed:
        raise DivergenceError(f"{len(failed)} grid cell(s) failed; see {outs[0]}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "adapt": cmd_adapt,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=os.environ.get("LSDA_WORKDIR", "lsda_work"),
                        help="experiment directory (default: $LSDA_WORKDIR or ./lsda_work)")
    common.add_argument("--config", help="key=value config file; overrides the workdir config")
    common.add_argument("--set", action="append", type=_split_assignment, metavar="KEY=VALUE",
                        help="override one config key, e.g. finetune.lr=0.01; repeatable")
    common.add_argument("--seed", type=int, help="master seed for every stochastic stage")
    common.add_argument("-v", "--verbose", action="store_true")

    adapt = argparse.ArgumentParser(add_help=False)
    adapt.add_argument("--k", help="neighbours per held-out category: an integer or FULL")
    adapt.add_argument("--nn-include-bias", action="store_true", help="include the bias in neighbour distances")
    adapt.add_argument("--no-bias-adapt", action="store_true", help="copy held-out biases unchanged")

    scoring = argparse.ArgumentParser(add_help=False)
    scoring.add_argument("--softmax-scores", action="store_true",
                         help="subtract softmax probabilities instead of raw scores")

    parser = argparse.ArgumentParser(prog="lsda", description="Detection through adaptation on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("pretrain", parents=[common], help="train the classification network")
    p = sub.add_parser("finetune", parents=[common], help="fine-tune into a detector on set B")
    p.add_argument("--mask", help="trainable blocks, e.g. bgrnd+layers+fcB")
    sub.add_parser("adapt", parents=[common, adapt], help="transfer the set-B change to set A")
    p = sub.add_parser("detect", parents=[common, scoring], help="run a detector over a split")
    p.add_argument("--model", default="lsda", help="lsda, finetuned, baseline, or a weight-file path")
    p.add_argument("--name", help="output name (default: model name)")
    p.add_argument("--split", default="eval")
    p = sub.add_parser("eval", parents=[common], help="score a detections file")
    p.add_argument("--name", default="lsda")
    p.add_argument("--split", default="eval")
    p = sub.add_parser("analyze", parents=[common], help="false-positive breakdown on held-out categories")
    p.add_argument("--names", nargs="+", default=["baseline", "lsda"])
    p.add_argument("--split", default="eval")
    p = sub.add_parser("ablate", parents=[common, adapt, scoring], help="run the ablation grid")
    p.add_argument("--jobs", type=int, default=1, help="grid cells to run in parallel")
    p.add_argument("--rows", choices=("full", "headline"), default="full")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    wd = Workdir(Path(args.workdir))
    try:
        cfg = load_config(args, wd)
        COMMANDS[args.command](cfg, wd, args)
    except MissingArtifactError as exc:
        print(f"lsda: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValidationError, WeightFileError) as exc:
        print(f"lsda: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, UndefinedStatisticError) as exc:
        print(f"lsda: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LSDAError as exc:
        print(f"lsda: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
