"""Small end-to-end run: train a classifier, turn it into a detector, adapt the unboxed half.

Uses a reduced corpus so it finishes in well under a minute.  The full-size
numbers come from ``lsda ablate`` with the default configuration.

Run: python3 demos/end_to_end.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

from lsda.detect import detect_image
from lsda.pipeline import (
    ExperimentConfig,
    Workdir,
    baseline_detector,
    detect_corpus,
    heldout_breakdown,
    stage_adapt,
    stage_finetune,
    stage_pretrain,
)
from lsda.evaluation import evaluate
from lsda.fp_analysis import comparison_table
from lsda.synth import generate, load_images

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="lsda_demo_"))
cfg = ExperimentConfig.from_text("""
seed=3
data.cls_per_class=30
data.det_per_class=20
data.eval_images=40
pretrain.epochs=15
finetune.epochs=3
""")
wd = Workdir(root)
manifests = generate(cfg.data, wd.data)
part = manifests["eval"].partition
print("boxed (B):", [part.names[i] for i in part.B])
print("unboxed (A):", [part.names[i] for i in part.A])

pre, acc = stage_pretrain(cfg, wd)
print(f"classifier training accuracy {acc:.3f}")
stage_finetune(cfg, wd)
lsda, nmap = stage_adapt(cfg, wd)
print(nmap.to_tsv(part))

eval_man = manifests["eval"]
images = load_images(eval_man, wd.data)
detections = {}
for name, net in (("baseline", baseline_detector(pre)), ("lsda", lsda)):
    detections[name] = detect_corpus(net, eval_man, images, cfg)
    rep = evaluate(detections[name], eval_man)
    print(f"{name:<8} mAP trained {rep.map_trained:.3f}  held-out {rep.map_heldout:.3f}  all {rep.map_all:.3f}")

# where the held-out false positives come from
print(comparison_table({n: heldout_breakdown(d, eval_man, cfg) for n, d in detections.items()}))

# one image, keeping only positive scores (detection beats background)
rec = eval_man.records[0]
print("ground truth:", [(part.names[c], b.format()) for b, c in rec.boxes])
for d in detect_image(lsda, images[rec.id], rec.id, cfg.proposals, score_floor=0.0)[:5]:
    print(f"  {part.names[d.category]:<9} {d.score:7.3f}  {d.box.format()}")
print("artifacts in", root)
