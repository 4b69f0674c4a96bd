"""End-to-end network: voxelize a temporal window, embed, segment the central frame."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .geom import CylGridConfig, CylindricalGrid, PointCloudFrame, VoxelMapping, devoxelize, voxelize_frame
from .heu import HeuConfig, HeuOutput, HeuPlan, heu_forward, init_heu_params, plan_heu, scatter_to_grid
from .segnet import (BackboneConfig, coarsen_to_bottleneck, decode, encode_bottleneck, fuse,
                     grid_inputs, init_segnet_params, refine, stem)
from .tensor import ParameterSet, Tensor


@dataclass(frozen=True)
class ModelConfig:
    grid: CylGridConfig = field(default_factory=CylGridConfig.desk)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heu: HeuConfig = field(default_factory=HeuConfig.desk)

    def __post_init__(self):
        self.backbone.level_shapes(self.grid.shape)
        if self.heu.mode != "none" and self.heu.d != self.backbone.bottleneck_width:
            raise ValueError(f"HEU width {self.heu.d} must match bottleneck width "
                             f"{self.backbone.bottleneck_width}")

    @property
    def t(self) -> int:
        return self.heu.t

    @property
    def heu_enabled(self) -> bool:
        return self.heu.mode != "none"

    @classmethod
    def desk(cls, **heu_kw) -> "ModelConfig":
        return cls(grid=CylGridConfig.desk(), backbone=BackboneConfig(),
                   heu=HeuConfig.desk(d_in=32, **heu_kw))

    @classmethod
    def paper(cls) -> "ModelConfig":
        bb = BackboneConfig(widths=(64, 128, 256), factors=((2, 2, 2), (2, 2, 2)),
                            n_classes=19, refine_hidden=64)
        return cls(grid=CylGridConfig.paper(), backbone=bb, heu=HeuConfig.paper(d_in=64))

    def with_heu(self, **kw) -> "ModelConfig":
        return replace(self, heu=replace(self.heu, **kw))


def init_params(cfg: ModelConfig, seed: int = 0) -> ParameterSet:
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    init_segnet_params(params, cfg.backbone, rng)
    if cfg.heu_enabled:
        init_heu_params(params, replace(cfg.heu, d_in=cfg.backbone.widths[0]), rng)
    return params


@dataclass
class PreparedWindow:
    """Everything about a window that does not depend on parameters."""

    frames: list[PointCloudFrame]
    grids: list[CylindricalGrid]
    mappings: list[VoxelMapping]
    center: int
    plan: HeuPlan | None
    inputs: list[tuple[np.ndarray, np.ndarray]]
    labels: np.ndarray | None = None

    @property
    def frame(self) -> PointCloudFrame:
        return self.frames[self.center]

    @property
    def mapping(self) -> VoxelMapping:
        return self.mappings[self.center]


def prepare_window(frames: list[PointCloudFrame], cfg: ModelConfig, center: int | None = None,
                   labels: np.ndarray | None = None, seed: int = 0) -> PreparedWindow:
    if center is None:
        center = (len(frames) - 1) // 2
    vox = [voxelize_frame(f, cfg.grid) for f in frames]
    return assemble_window(frames, [g for g, _ in vox], [m for _, m in vox], center, cfg, labels, seed)


def assemble_window(frames: list[PointCloudFrame], grids: list[CylindricalGrid],
                    mappings: list[VoxelMapping], center: int, cfg: ModelConfig,
                    labels: np.ndarray | None = None, seed: int = 0) -> PreparedWindow:
    """Build a window from frames that were already voxelized."""
    if labels is not None and len(labels) != len(frames[center]):
        raise ValueError(f"{len(labels)} labels for {len(frames[center])} central points")
    plan = None
    if cfg.heu_enabled:
        counts = None
        if cfg.heu.sampling == "density":
            counts = []
            for m in mappings:
                c = np.zeros(cfg.grid.n_cells)
                c[m.cells] = m.counts
                counts.append(c)
        plan = plan_heu(grids, cfg.heu, counts, seed)
    return PreparedWindow(frames=list(frames), grids=grids, mappings=mappings, center=center,
                          plan=plan, inputs=[grid_inputs(g) for g in grids], labels=labels)


@dataclass
class ForwardResult:
    logits: Tensor
    heu: HeuOutput | None = None


def window_features(stems: list[Tensor], pw: PreparedWindow) -> Tensor:
    """Stack per-frame stem features into one row per (union voxel, frame)."""
    plan = pw.plan
    t = plan.t
    rows = []
    for tau, (_, cells) in enumerate(pw.inputs):
        pos = np.searchsorted(plan.voxels, cells)
        rows.append(pos * t + tau)
    return T.scatter_rows(T.concat(stems, axis=0), np.concatenate(rows), len(plan.voxels) * t)


def forward(params: ParameterSet, pw: PreparedWindow, cfg: ModelConfig) -> ForwardResult:
    """Class scores for every point of the central frame (P x K)."""
    heu_out = None
    if cfg.heu_enabled:
        stems = [stem(x, params) for x, _ in pw.inputs]
        central_stem = stems[pw.center]
    else:
        central_stem = stem(pw.inputs[pw.center][0], params)
    bn = encode_bottleneck(pw.grids[pw.center], cfg.backbone, params, stem_features=central_stem)
    heu_coarse = None
    if cfg.heu_enabled:
        F = window_features(stems, pw)
        heu_out = heu_forward(F, pw.plan, params, cfg.heu)
        scattered = scatter_to_grid(heu_out.embedding, heu_out.recipe, cfg.grid.n_cells, cfg.heu.d)
        heu_coarse = coarsen_to_bottleneck(scattered, bn)
    S = fuse(bn.features, heu_coarse, params)
    voxel_feats = decode(S, bn, params)
    point_feats = devoxelize(voxel_feats, pw.mapping)
    return ForwardResult(refine(point_feats, pw.frame, params, cfg.grid), heu_out)


def predict(params: ParameterSet, pw: PreparedWindow, cfg: ModelConfig) -> np.ndarray:
    with T.no_grad():
        return np.argmax(forward(params, pw, cfg).logits.data, axis=1)
