"""Finite-difference gradient suite over every differentiable stage.

Each case builds a tiny random instance (a handful of tokens, width 8,
two frames, at most 30 points per frame) and compares taped gradients with
central differences.  Instances whose forward passes within ``min_margin``
of a ramp or max kink are re-drawn, since a probe that straddles a kink
measures the kink, not the gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .geom import CylGridConfig, PointCloudFrame, range_threshold, voxelize_frame
from .heu import (HeuConfig, heu_forward, htsf_layer, init_heu_params, ltsf_layer, make_grouping,
                  mva_spatial, mva_temporal, plan_heu, scatter_to_grid)
from .model import ModelConfig, forward, init_params, prepare_window
from .segnet import BackboneConfig, fuse, init_segnet_params, refine
from .tensor import ParameterSet, Tensor
from .trainer import consistency_loss, focal_loss

D = 8
K = 3

Builder = Callable[[np.random.Generator], tuple[Callable[[ParameterSet], Tensor], ParameterSet]]


def _jitter_all(params: ParameterSet, rng: np.random.Generator, scale: float = 0.5) -> ParameterSet:
    """Move every value off its structured initialisation (zero biases, unit gains)."""
    for _, t in params.items():
        t.data = t.data + rng.normal(0.0, scale, t.data.shape)
    return params


def tiny_heu_config(**kw) -> HeuConfig:
    return HeuConfig(**{"d": D, "m_high": 3, "m_low": 3, "t": 2, "layers": 1, "d_in": D, **kw})


def tiny_model_config(**heu_kw) -> ModelConfig:
    grid = CylGridConfig(rho_range=(0.0, 10.0), z_range=(-2.0, 2.0), resolution=(8, 8, 4))
    bb = BackboneConfig(widths=(D, D), factors=((2, 2, 2),), n_classes=K, refine_hidden=D)
    return ModelConfig(grid=grid, backbone=bb, heu=tiny_heu_config(**heu_kw))


def case_mva(rng):
    cfg = tiny_heu_config()
    params = ParameterSet()
    init_heu_params(params, cfg, rng)
    n = 9
    xyz = rng.uniform(-3, 3, (n, 3))
    g = make_grouping(xyz, np.arange(n), 3)
    present = rng.random((n, cfg.t)) < 0.8
    present[:, 0] = True
    params.add("input/F", rng.normal(size=(n * cfg.t, D)))
    _jitter_all(params, rng)
    w = rng.normal(size=(3, D))

    def f(p):
        out = mva_temporal(mva_spatial(p["input/F"], present, g, p, cfg), cfg.t, p)
        return T.sum_all(T.mul(out, w))
    return f, params


def case_htsf(rng):
    cfg = tiny_heu_config()
    params = ParameterSet()
    init_heu_params(params, cfg, rng)
    params.add("input/V", rng.normal(size=(4, D)))
    _jitter_all(params, rng)
    w = rng.normal(size=(4, D))
    return (lambda p: T.sum_all(T.mul(htsf_layer(p["input/V"], p, 0, cfg)[0], w))), params


def case_ltsf(rng):
    cfg = tiny_heu_config()
    params = ParameterSet()
    init_heu_params(params, cfg, rng)
    params.add("input/U", rng.normal(size=(3, D)))
    params.add("input/H", rng.normal(size=(4, D)))
    _jitter_all(params, rng)
    w = rng.normal(size=(3, D))
    return (lambda p: T.sum_all(T.mul(ltsf_layer(p["input/U"], p["input/H"], p, 0, cfg)[0], w))), params


def case_fuse(rng):
    params = ParameterSet()
    init_segnet_params(params, BackboneConfig(widths=(D, D), factors=((2, 2, 2),), n_classes=K), rng)
    params.add("input/B", rng.normal(size=(6, D)))
    params.add("input/E", rng.normal(size=(6, D)))
    _jitter_all(params, rng)
    w = rng.normal(size=(6, D))
    names = ["segnet/fusion/alpha1", "segnet/fusion/alpha2", "input/B", "input/E"]
    f = lambda p: T.sum_all(T.mul(fuse(p["input/B"], p["input/E"], p), w))  # noqa: E731
    return f, ParameterSet({n: params[n] for n in names})


def case_refine(rng):
    grid = CylGridConfig(rho_range=(0.0, 10.0), z_range=(-2.0, 2.0), resolution=(8, 8, 4))
    params = ParameterSet()
    init_segnet_params(params, BackboneConfig(widths=(D, D), factors=((2, 2, 2),), n_classes=K), rng)
    n = 12
    pts = np.c_[rng.uniform(-9, 9, (n, 2)), rng.uniform(-2, 2, n), rng.random(n)]
    frame = PointCloudFrame(pts)
    sub = ParameterSet({k: params[k] for k in params.with_prefix("refine/")})
    sub.add("input/feats", rng.normal(size=(n, D)))
    _jitter_all(sub, rng)
    w = rng.normal(size=(n, K))
    return (lambda p: T.sum_all(T.mul(refine(p["input/feats"], frame, p, grid), w))), sub


def case_focal(rng):
    n = 10
    labels = rng.integers(0, K, n)
    labels[0] = -1
    params = ParameterSet()
    params.add("input/logits", rng.normal(size=(n, K)))
    return (lambda p: focal_loss(p["input/logits"], labels, gamma=2.0)), params


def case_consistency(rng):
    n = 10
    params = ParameterSet()
    params.add("input/student", rng.normal(size=(n, K)))
    teacher = Tensor(rng.normal(size=(n, K)))
    return (lambda p: consistency_loss(p["input/student"], teacher)), params


def _tiny_frame(rng, n_near: int = 22, n_far: int = 8) -> PointCloudFrame:
    rho = np.r_[rng.uniform(0.5, 6.5, n_near), rng.uniform(7.5, 9.8, n_far)]
    th = rng.uniform(-np.pi, np.pi, n_near + n_far)
    z = rng.uniform(-1.9, 1.9, n_near + n_far)
    return PointCloudFrame(np.c_[rho * np.cos(th), rho * np.sin(th), z, rng.random(n_near + n_far)])


def case_heu_unit(rng):
    """Whole embedding unit on 12 union voxels (6 far, 6 near) over two frames."""
    cfg = tiny_model_config()
    grid = cfg.grid
    thr = range_threshold(grid, cfg.heu.far_fraction)
    centers = grid.cell_centers(np.arange(grid.n_cells))
    far_cells = np.flatnonzero(centers[:, 0] >= thr)
    near_cells = np.flatnonzero(centers[:, 0] < thr)
    cells = np.r_[rng.choice(far_cells, 6, replace=False), rng.choice(near_cells, 6, replace=False)]
    xyz = grid.cell_centers_xyz(cells)
    frames = [PointCloudFrame(np.c_[xyz[idx], rng.random(len(idx))])
              for idx in (np.r_[0:4, 6:10], np.r_[2:6, 8:12])]
    grids = [voxelize_frame(f, grid)[0] for f in frames]
    plan = plan_heu(grids, cfg.heu)
    params = ParameterSet()
    init_heu_params(params, cfg.heu, rng)
    params.add("input/F", rng.normal(size=(len(plan.voxels) * cfg.t, D)))
    _jitter_all(params, rng)
    w = rng.normal(size=(grid.n_cells, D))

    def f(p):
        out = heu_forward(p["input/F"], plan, p, cfg.heu)
        return T.sum_all(T.mul(scatter_to_grid(out.embedding, out.recipe, grid.n_cells, D), w))
    return f, params


def case_end_to_end(rng):
    cfg = tiny_model_config()
    frames = [_tiny_frame(rng) for _ in range(cfg.t)]
    labels = rng.integers(0, K, len(frames[0]))
    pw = prepare_window(frames, cfg, center=0, labels=labels)
    params = _jitter_all(init_params(cfg, int(rng.integers(1 << 31))), rng, 0.3)
    return (lambda p: focal_loss(forward(p, pw, cfg).logits, labels)), params


CASES: dict[str, Builder] = {
    "mva": case_mva,
    "htsf_layer": case_htsf,
    "ltsf_layer": case_ltsf,
    "heu_unit": case_heu_unit,
    "fuse": case_fuse,
    "refine": case_refine,
    "focal_loss": case_focal,
    "consistency_loss": case_consistency,
    "end_to_end": case_end_to_end,
}


@dataclass
class GradResult:
    name: str
    max_rel_err: float
    margin: float
    draws: int
    n_values: int


def draw_smooth(build: Builder, rng: np.random.Generator, min_margin: float = 1e-3,
                max_draws: int = 200):
    """Re-draw an instance until its forward pass stays ``min_margin`` away from every kink."""
    for draw in range(1, max_draws + 1):
        f, params = build(rng)
        margin = T.kink_margin(f, params)
        if margin >= min_margin:
            return f, params, margin, draw
    raise RuntimeError(f"no kink-free instance in {max_draws} draws")


def run_case(name: str, seed: int = 0, min_margin: float = 1e-3) -> GradResult:
    rng = np.random.default_rng(seed)
    f, params, margin, draws = draw_smooth(CASES[name], rng, min_margin)
    err = T.finite_diff_check(f, params)
    return GradResult(name, err, margin, draws, params.num_values())


def run_suite(seed: int = 0, names=None) -> list[GradResult]:
    return [run_case(n, seed) for n in (names or CASES)]


__all__ = ["CASES", "GradResult", "run_case", "run_suite", "draw_smooth", "tiny_model_config",
           "tiny_heu_config"]
