"""The fixed synthetic ablation benchmark.

Eight sequences of twenty 2048-point frames (churn 0.5, four classes).
Sequences 0-5 train with a 10% labelled split; sequences 6-7 are held out
and scored with the teacher.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SplitSpec, SyntheticSceneSpec, generate_synthetic_dataset, make_split
from .evaluate import EvalResult, evaluate
from .model import ModelConfig
from .trainer import LossWeights, TrainConfig, WindowCache, train

# name -> (embedding unit mode, consistency weight)
VARIANTS = {
    "heu_mt": ("full", 1.0),
    "none_mt": ("none", 1.0),
    "heu_sup": ("full", 0.0),
    "none_sup": ("none", 0.0),
}
TRAIN_SEQUENCES = range(6)
VAL_SEQUENCES = (6, 7)


@dataclass
class RunResult:
    variant: str
    seed: int
    eval: EvalResult
    seconds: float

    @property
    def miou(self) -> float:
        return self.eval.miou

    @property
    def far_miou(self) -> float:
        return self.eval.far_miou

    @property
    def near_miou(self) -> float:
        return self.eval.near_miou


@dataclass
class BenchmarkResult:
    iterations: int
    runs: list[RunResult] = field(default_factory=list)

    def of(self, variant: str) -> list[RunResult]:
        return [r for r in self.runs if r.variant == variant]

    def mean(self, variant: str, metric: str = "miou") -> float:
        return float(np.mean([getattr(r, metric) for r in self.of(variant)]))

    def table(self) -> str:
        lines = [f"{'variant':<9} {'seed':>4} {'mIoU':>6} {'far':>6} {'near':>6} {'sec':>6}"]
        for r in self.runs:
            lines.append(f"{r.variant:<9} {r.seed:>4} {100 * r.miou:6.2f} {100 * r.far_miou:6.2f} "
                         f"{100 * r.near_miou:6.2f} {r.seconds:6.0f}")
        for v in dict.fromkeys(r.variant for r in self.runs):
            lines.append(f"{v:<9} {'mean':>4} {100 * self.mean(v):6.2f} {100 * self.mean(v, 'far_miou'):6.2f} "
                         f"{100 * self.mean(v, 'near_miou'):6.2f}")
        return "\n".join(lines)


def run_benchmark(iterations: int = 600, seeds=(0, 1, 2), variants=("heu_mt", "none_mt", "heu_sup"),
                  ratio: float = 0.1, log=None) -> BenchmarkResult:
    ds = generate_synthetic_dataset(8, SyntheticSceneSpec(n_points=2048, n_frames=20, churn=0.5, seed=0))
    tr, va = ds.subset(TRAIN_SEQUENCES), ds.subset(VAL_SEQUENCES)
    keys = va.frame_keys()
    out = BenchmarkResult(iterations)
    for name in variants:
        mode, beta = VARIANTS[name]
        mcfg = ModelConfig.desk(mode=mode)
        tr_cache, va_cache = WindowCache(tr, mcfg), WindowCache(va, mcfg)
        for seed in seeds:
            labeled, unlabeled = make_split(tr, SplitSpec(ratio, seed))
            t0 = time.perf_counter()
            cfg = TrainConfig(iterations=iterations, seed=seed, loss=LossWeights(1.0, beta))
            res = train(tr, labeled, unlabeled, mcfg, cfg, cache=tr_cache)
            ev = evaluate(res.state.teacher, va, keys, mcfg, cache=va_cache)
            out.runs.append(RunResult(name, seed, ev, time.perf_counter() - t0))
            if log:
                log(f"{name} seed {seed}: mIoU {100 * ev.miou:.2f}  far {100 * ev.far_miou:.2f}  "
                    f"near {100 * ev.near_miou:.2f}")
    return out


__all__ = ["VARIANTS", "RunResult", "BenchmarkResult", "run_benchmark"]
