"""
The temporal embedding unit on one window
=========================================

Five frames are voxelized, the union voxels are grouped into far and near
super-voxels, and both attention flows run once.  Every attention map is a
row-stochastic matrix.
"""
import numpy as np

from hilots import tensor as T
from hilots.data import SyntheticSceneSpec, generate_synthetic_sequence, window_indices
from hilots.model import ModelConfig, forward, init_params, prepare_window

cfg = ModelConfig.desk()
seq = generate_synthetic_sequence(SyntheticSceneSpec(n_frames=8, seed=1)).sequences[0]
idx = window_indices(len(seq), center=0, t=cfg.t)
print(f"window around frame 0 with t={cfg.t}: frames {idx}")

pw = prepare_window([seq.frames[i].load() for i in idx], cfg)
plan = pw.plan
print(f"union voxels {len(plan.voxels)}; present in all frames: {int(plan.present.all(axis=1).sum())}")
print(f"far super-voxels {plan.high.m}, near super-voxels {plan.low.m}")

params = init_params(cfg, seed=0)
with T.no_grad():
    out = forward(params, pw, cfg)
heu = out.heu
print(f"embedding {heu.embedding.shape}: {heu.n_high} high tokens then {heu.n_low} low tokens")
print(f"logits {out.logits.shape} for {len(pw.frame)} central points")

for n, w in enumerate(heu.attention):
    print(f"attention map {n}: {w.shape}, max |row sum - 1| = {np.abs(w.sum(axis=1) - 1).max():.1e}")
