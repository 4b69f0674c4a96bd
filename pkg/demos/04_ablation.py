"""
Embedding-unit and mean-teacher ablation
========================================

Trains three variants on the fixed benchmark over three seeds: the full
model with mean teacher, the same without the embedding unit, and the full
model trained on labelled frames only.  Pass the iteration count as the
first argument (default 600; each run then takes 0.5 to 1.5 minutes).
"""
import sys

from hilots.benchmark import run_benchmark

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 600
res = run_benchmark(iters, seeds=(0, 1, 2), variants=("heu_mt", "none_mt", "heu_sup"), log=print)
print()
print(res.table())
print(f"embedding unit gain: {100 * (res.mean('heu_mt') - res.mean('none_mt')):+.2f} mIoU "
      f"(far {100 * (res.mean('heu_mt', 'far_miou') - res.mean('none_mt', 'far_miou')):+.2f}, "
      f"near {100 * (res.mean('heu_mt', 'near_miou') - res.mean('none_mt', 'near_miou')):+.2f})")
print(f"mean teacher vs labelled only: {100 * (res.mean('heu_mt') - res.mean('heu_sup')):+.2f} mIoU")
