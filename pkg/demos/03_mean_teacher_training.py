"""
Mean-teacher training on a small synthetic set
==============================================

A short run on four sequences with 10% labelled frames.  Labelled windows
drive the focal loss, unlabelled ones the consistency loss against the EMA
teacher.  The teacher is evaluated on a held-out sequence and an error map
is written next to this script.
"""
import sys
from pathlib import Path

from hilots.data import SplitSpec, SyntheticSceneSpec, generate_synthetic_dataset, make_split
from hilots.evaluate import evaluate, format_iou_table, miou, render_error_map
from hilots.model import ModelConfig, predict
from hilots.trainer import TrainConfig, WindowCache, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 150

ds = generate_synthetic_dataset(5, SyntheticSceneSpec(n_points=2048, n_frames=20))
tr, va = ds.subset(range(4)), ds.subset([4])
labeled, unlabeled = make_split(tr, SplitSpec(0.1, seed=0))
print(f"{len(labeled)} labelled and {len(unlabeled)} unlabelled training frames")

cfg = ModelConfig.desk()
res = train(tr, labeled, unlabeled, cfg, TrainConfig(iterations=iters, seed=0, log_every=25))
for rec in res.records[:: max(1, len(res.records) // 6)]:
    print(rec.line())

# the teacher is the model used for inference
cache = WindowCache(va, cfg)
ev = evaluate(res.state.teacher, va, va.frame_keys(), cfg, cache=cache)
iou, mean = miou(ev.overall)
print(format_iou_table(iou, mean, list(ds.class_names)))
print(f"far mIoU {100 * ev.far_miou:.1f}  near mIoU {100 * ev.near_miou:.1f}")

pw = cache.window((0, 10), with_labels=True)
path = Path(__file__).with_name("error_map.ppm")
render_error_map(pw.frame, predict(res.state.teacher, pw, cfg), pw.labels, path)
print(f"error map (blue correct, red wrong) written to {path}")
