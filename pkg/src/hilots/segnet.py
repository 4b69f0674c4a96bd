"""Compact sparse encoder-decoder over the cylindrical grid, fusion and refinement.

Every stage only evaluates its MLP on active cells (cells with at least
one occupied descendant), so empty space stays exactly zero, mimicking a
sparse-convolution backbone.  Coarsening is a block mean over
(radial, azimuth, height) blocks; decoding is nearest-neighbour
un-coarsening plus the skip of the same level.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geom import CylGridConfig, CylindricalGrid, PointCloudFrame
from .tensor import ParameterSet, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (32, 32, 32)
    factors: tuple[tuple[int, int, int], ...] = ((2, 2, 2), (2, 2, 2))
    n_classes: int = 4
    theta_shift: int = 0
    refine_hidden: int = 32
    alpha1_init: float = 1.0
    alpha2_init: float = 0.1

    def __post_init__(self):
        if len(self.widths) != len(self.factors) + 1:
            raise ValueError("need one width per level: stem plus one per coarsening stage")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    def level_shapes(self, grid_shape) -> list[tuple[int, int, int]]:
        shapes = [tuple(grid_shape)]
        for f in self.factors:
            prev = shapes[-1]
            if any(s % k for s, k in zip(prev, f)):
                raise ValueError(f"coarsening {f} does not divide level shape {prev}")
            shapes.append(tuple(s // k for s, k in zip(prev, f)))
        return shapes

    @property
    def bottleneck_width(self) -> int:
        return self.widths[-1]


def init_segnet_params(params: ParameterSet, cfg: BackboneConfig, rng: np.random.Generator) -> None:
    w = cfg.widths
    T.init_mlp(params, "segnet/stem", [4, w[0], w[0]], rng)
    for s in range(1, len(w)):
        T.init_mlp(params, f"segnet/enc{s}", [w[s - 1], w[s], w[s]], rng)
        T.init_mlp(params, f"segnet/dec{s}", [w[s], w[s - 1], w[s - 1]], rng)
    T.init_mlp(params, "segnet/head", [w[0], w[0], w[0]], rng)
    params.add("segnet/fusion/alpha1", np.array(cfg.alpha1_init))
    params.add("segnet/fusion/alpha2", np.array(cfg.alpha2_init))
    T.init_mlp(params, "refine/mlp", [w[0] + 4, cfg.refine_hidden, cfg.n_classes], rng)


def coarsen_cells(cells: np.ndarray, shape, factors, theta_shift: int = 0) -> np.ndarray:
    """Sorted unique coarse cells containing the given fine cells."""
    i, j, k = np.unravel_index(np.asarray(cells, dtype=np.int64), shape)
    j = (j - theta_shift) % shape[1]
    coarse = tuple(s // f for s, f in zip(shape, factors))
    return np.unique(np.ravel_multi_index((i // factors[0], j // factors[1], k // factors[2]), coarse))


def grid_inputs(grid: CylindricalGrid) -> tuple[np.ndarray, np.ndarray]:
    """Normalised (rho, theta, z, r) rows of the occupied cells, plus those cells."""
    cells = grid.occupied_cells
    raw = grid.flat_features()[cells]
    x = np.concatenate([grid.cfg.normalize(raw[:, :3]), raw[:, 3:4]], axis=1)
    return x, cells


def stem(x: np.ndarray, params: ParameterSet) -> Tensor:
    return T.mlp_apply(Tensor(x), params.mlp("segnet/stem"))


@dataclass
class Bottleneck:
    features: Tensor
    skips: list[Tensor]
    active: list[np.ndarray]
    shapes: list[tuple[int, int, int]]
    cfg: BackboneConfig = field(repr=False)


def encode_bottleneck(x_f, cfg: BackboneConfig, params: ParameterSet,
                      stem_features: Tensor | None = None) -> Bottleneck:
    """Stem MLP on occupied cells, then block-mean coarsening with one MLP per stage.

    ``x_f`` is a :class:`CylindricalGrid`.  ``stem_features`` lets a caller
    that already ran the stem on this grid reuse it.
    """
    shapes = cfg.level_shapes(x_f.cfg.shape)
    x, cells = grid_inputs(x_f)
    h = stem_features if stem_features is not None else stem(x, params)
    level = T.scatter_rows(h, cells, int(np.prod(shapes[0])))
    skips, active = [level], [cells]
    for s, f in enumerate(cfg.factors, start=1):
        pooled = T.block_mean(level, shapes[s - 1], f, cfg.theta_shift)
        act = coarsen_cells(active[-1], shapes[s - 1], f, cfg.theta_shift)
        out = T.mlp_apply(T.gather_rows(pooled, act), params.mlp(f"segnet/enc{s}"))
        level = T.scatter_rows(out, act, int(np.prod(shapes[s])))
        skips.append(level)
        active.append(act)
    return Bottleneck(level, skips[:-1], active, shapes, cfg)


def coarsen_to_bottleneck(x: Tensor, bn: Bottleneck) -> Tensor:
    for s, f in enumerate(bn.cfg.factors, start=1):
        x = T.block_mean(x, bn.shapes[s - 1], f, bn.cfg.theta_shift)
    return x


def fuse(bottleneck: Tensor, heu_coarse: Tensor | None, params: ParameterSet) -> Tensor:
    """``alpha1 * bottleneck + alpha2 * heu_coarse`` (HEU term dropped when absent)."""
    a1, a2 = params["segnet/fusion/alpha1"], params["segnet/fusion/alpha2"]
    if heu_coarse is not None and heu_coarse.shape != bottleneck.shape:
        raise ValueError(f"fusion shape mismatch: {bottleneck.shape} vs {heu_coarse.shape}")
    s = T.mul(a1, bottleneck)
    if heu_coarse is not None:
        s = T.add(s, T.mul(a2, heu_coarse))
    return s


def decode(S: Tensor, bn: Bottleneck, params: ParameterSet) -> Tensor:
    """Back to full grid resolution: per-stage MLP, un-coarsen, add skip; then a head MLP."""
    x = S
    for s in range(len(bn.cfg.factors), 0, -1):
        act = bn.active[s]
        h = T.mlp_apply(T.gather_rows(x, act), params.mlp(f"segnet/dec{s}"))
        x = T.scatter_rows(h, act, int(np.prod(bn.shapes[s])))
        x = T.block_upsample(x, bn.shapes[s], bn.cfg.factors[s - 1], bn.cfg.theta_shift)
        x = T.add(x, bn.skips[s - 1])
    act = bn.active[0]
    h = T.mlp_apply(T.gather_rows(x, act), params.mlp("segnet/head"))
    return T.scatter_rows(h, act, int(np.prod(bn.shapes[0])))


def point_inputs(frame: PointCloudFrame, grid_cfg: CylGridConfig) -> np.ndarray:
    """Point coordinates scaled to roughly unit range, plus intensity."""
    pts = frame.points
    scale = grid_cfg.rho_max
    zlo, zhi = grid_cfg.z_range
    z = 2.0 * (pts[:, 2] - zlo) / (zhi - zlo) - 1.0
    return np.stack([pts[:, 0] / scale, pts[:, 1] / scale, z, pts[:, 3]], axis=1)


def refine(point_feats: Tensor, frame: PointCloudFrame, params: ParameterSet,
           grid_cfg: CylGridConfig) -> Tensor:
    """Per-point MLP over (voxel feature || x, y, z, r) giving class scores."""
    coords = Tensor(point_inputs(frame, grid_cfg))
    return T.mlp_apply(T.concat([point_feats, coords], axis=1), params.mlp("refine/mlp"))


__all__ = [
    "BackboneConfig", "Bottleneck", "init_segnet_params", "encode_bottleneck", "fuse",
    "decode", "refine", "coarsen_to_bottleneck", "coarsen_cells", "grid_inputs",
    "point_inputs", "stem",
]
