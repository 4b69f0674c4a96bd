"""Embedding unit with high/low temporal-sensitivity attention flows.

Voxels beyond the range threshold feed the high-sensitivity flow, the rest
the low-sensitivity flow.  Each side first shrinks its voxels to a few
super-voxel tokens (farthest-point centres, nearest-centre grouping, a
shared offset-aware MLP and a max over members, then a mean over the
temporal window).  The low flow attends to itself and then, via
cross-attention, to the output of the high flow at the same depth.

Parameter paths::

    heu/mva_spatial/l{j}/{w,b}     shared by both flows
    heu/mva_temporal/l{j}/{w,b}
    heu/htsf/layer{i}/{wq,wk,wv}   heu/htsf/layer{i}/mlp/l{j}/{w,b}
    heu/htsf/layer{i}/ln{1,2}/{g,b}
    heu/ltsf/layer{i}/{wq,wk,wv,cq,ck,cv}   heu/ltsf/layer{i}/mlp/...
    heu/ltsf/layer{i}/ln{1,2,3}/{g,b}      (+ wcat for fusion="concat")
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geom import CylGridConfig, CylindricalGrid, range_threshold
from .tensor import ParameterSet, Tensor

MODES = ("none", "htsf", "ltsf", "full")
FUSIONS = ("low_q", "high_q", "add", "concat")
SAMPLINGS = ("aggregate", "random", "density")


@dataclass(frozen=True)
class HeuConfig:
    d: int = 32
    m_high: int = 64
    m_low: int = 64
    t: int = 5
    layers: int = 2
    far_fraction: float = 0.7
    heads: int = 1
    mode: str = "full"
    fusion: str = "low_q"
    sampling: str = "aggregate"
    residual: bool = True
    d_in: int | None = None
    mlp_ratio: int = 2
    offset_scale: float = 10.0

    def __post_init__(self):
        if self.t < 1 or self.layers < 1:
            raise ValueError("t and layers must be >= 1")
        if not 0.0 < self.far_fraction < 1.0:
            raise ValueError("far_fraction must lie in (0, 1)")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.sampling not in SAMPLINGS:
            raise ValueError(f"sampling must be one of {SAMPLINGS}")

    @property
    def input_width(self) -> int:
        return self.d if self.d_in is None else self.d_in

    @classmethod
    def desk(cls, **kw) -> "HeuConfig":
        return cls(**{"d": 32, "m_high": 64, "m_low": 64, "t": 5, "layers": 2, **kw})

    @classmethod
    def paper(cls, **kw) -> "HeuConfig":
        return cls(**{"d": 256, "m_high": 64, "m_low": 64, "t": 5, "layers": 6, **kw})


def init_heu_params(params: ParameterSet, cfg: HeuConfig, rng: np.random.Generator) -> None:
    d, hidden = cfg.d, cfg.mlp_ratio * cfg.d
    T.init_mlp(params, "heu/mva_spatial", [cfg.input_width + 3, d, d], rng)
    T.init_mlp(params, "heu/mva_temporal", [d, d, d], rng)
    scale = 1.0 / np.sqrt(d)
    for flow in ("htsf", "ltsf"):
        for i in range(cfg.layers):
            p = f"heu/{flow}/layer{i}"
            names = ["wq", "wk", "wv"] + (["cq", "ck", "cv"] if flow == "ltsf" else [])
            for n in names:
                params.add(f"{p}/{n}", rng.normal(0.0, scale, (d, d)))
            if flow == "ltsf" and cfg.fusion == "concat":
                params.add(f"{p}/wcat", rng.normal(0.0, 1.0 / np.sqrt(2 * d), (2 * d, d)))
            T.init_mlp(params, f"{p}/mlp", [d, hidden, d], rng)
            for j in range(1, 4 if flow == "ltsf" else 3):
                params.add(f"{p}/ln{j}/g", np.ones(d))
                params.add(f"{p}/ln{j}/b", np.zeros(d))


# ---------------------------------------------------------------------------
# grouping
# ---------------------------------------------------------------------------

def farthest_point_sample(xyz: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Indices of ``m`` farthest-point-sampled rows of ``xyz``; ties pick the lowest index."""
    n = len(xyz)
    if m > n:
        raise ValueError(f"cannot sample {m} centres from {n} points")
    chosen = np.empty(m, dtype=np.int64)
    if m == 0:
        return chosen
    chosen[0] = start
    dist = np.sum((xyz - xyz[start]) ** 2, axis=1)
    for k in range(1, m):
        nxt = int(np.argmax(dist))
        chosen[k] = nxt
        dist = np.minimum(dist, np.sum((xyz - xyz[nxt]) ** 2, axis=1))
    return chosen


@dataclass
class Grouping:
    """Super-voxel membership for one flow.

    ``voxels`` are positions into the window's union voxel list, ``assign``
    gives each one its group (or -1 when a sampling ablation drops it) and
    ``offsets`` is the Cartesian displacement from the group centre.
    """

    voxels: np.ndarray
    centers: np.ndarray
    assign: np.ndarray
    offsets: np.ndarray

    @property
    def m(self) -> int:
        return len(self.centers)

    def members(self) -> list[np.ndarray]:
        return [self.voxels[self.assign == g] for g in range(self.m)]


def nn_group(xyz: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Farthest-point centres, then every point to its nearest centre.

    Returns (centre row indices, group id per row).
    """
    n = len(xyz)
    if m > n:
        raise ValueError(f"m={m} exceeds the {n} available voxels")
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    centers = farthest_point_sample(xyz, m)
    d2 = np.sum((xyz[:, None, :] - xyz[centers][None, :, :]) ** 2, axis=-1)
    return centers, np.argmin(d2, axis=1)


def make_grouping(xyz: np.ndarray, voxels: np.ndarray, m: int, sampling: str = "aggregate",
                  counts: np.ndarray | None = None, seed: int = 0) -> Grouping:
    m = min(m, len(voxels))
    if sampling == "aggregate":
        centers, assign = nn_group(xyz, m)
    else:
        if sampling == "random":
            centers = np.sort(np.random.default_rng(seed).choice(len(voxels), m, replace=False))
        else:
            c = np.zeros(len(voxels)) if counts is None else counts
            centers = np.sort(np.argsort(-c, kind="stable")[:m])
        assign = np.full(len(voxels), -1, dtype=np.int64)
        assign[centers] = np.arange(m)
    offsets = np.zeros((len(voxels), 3))
    kept = assign >= 0
    offsets[kept] = xyz[kept] - xyz[centers][assign[kept]]
    return Grouping(voxels=np.asarray(voxels, dtype=np.int64), centers=centers,
                    assign=assign, offsets=offsets)


# ---------------------------------------------------------------------------
# multi-voxel aggregation
# ---------------------------------------------------------------------------

def mva_spatial(F: Tensor, present: np.ndarray, grouping: Grouping, params: ParameterSet,
                cfg: HeuConfig) -> Tensor:
    """Group voxel features into super-voxels, frame by frame.

    ``F`` holds one row per (voxel, frame) of the grouping's voxels, frame
    index fastest; ``present`` (n_voxels x t) marks which rows are real
    observations.  Output rows are (group, frame), frame fastest; a group
    with no observed member in a frame gets a zero row.
    """
    t = present.shape[1]
    m = grouping.m
    keep = present & (grouping.assign >= 0)[:, None]
    rows = np.flatnonzero(keep.reshape(-1))
    vox, frame = np.divmod(rows, t)
    x = T.gather_rows(F, rows)
    off = Tensor(grouping.offsets[vox] / cfg.offset_scale)
    h = T.mlp_apply(T.concat([x, off], axis=1), params.mlp("heu/mva_spatial"))
    return T.segment_max(h, grouping.assign[vox] * t + frame, m * t)


def mva_temporal(Fp: Tensor, t: int, params: ParameterSet) -> Tensor:
    """Average super-voxel features over the window, then an MLP."""
    m = Fp.shape[0] // t
    pooled = T.mean_axis(T.reshape(Fp, (m, t, Fp.shape[1])), axis=1)
    return T.mlp_apply(pooled, params.mlp("heu/mva_temporal"))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q_in: Tensor, kv_in: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
              heads: int = 1) -> tuple[Tensor, list[np.ndarray]]:
    """Scaled dot-product attention; returns the output and one weight map per head."""
    q, k, v = T.matmul(q_in, wq), T.matmul(kv_in, wk), T.matmul(kv_in, wv)
    dk = q.shape[1] // heads
    dv = v.shape[1] // heads
    outs, maps = [], []
    for h in range(heads):
        qh = q if heads == 1 else T.slice_cols(q, h * dk, (h + 1) * dk)
        kh = k if heads == 1 else T.slice_cols(k, h * dk, (h + 1) * dk)
        vh = v if heads == 1 else T.slice_cols(v, h * dv, (h + 1) * dv)
        w = T.softmax_rows(T.mul(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dk)))
        maps.append(w.data)
        outs.append(T.matmul(w, vh))
    return (outs[0] if heads == 1 else T.concat(outs, axis=1)), maps


def _ln(x: Tensor, params: ParameterSet, p: str) -> Tensor:
    return T.layer_norm(x, params[f"{p}/g"], params[f"{p}/b"])


def htsf_layer(V: Tensor, params: ParameterSet, i: int, cfg: HeuConfig) -> tuple[Tensor, list[np.ndarray]]:
    p = f"heu/htsf/layer{i}"
    a, maps = attention(V, V, params[f"{p}/wq"], params[f"{p}/wk"], params[f"{p}/wv"], cfg.heads)
    mlp = params.mlp(f"{p}/mlp")
    if not cfg.residual:
        return T.mlp_apply(a, mlp), maps
    x = _ln(T.add(V, a), params, f"{p}/ln1")
    return _ln(T.add(x, T.mlp_apply(x, mlp)), params, f"{p}/ln2"), maps


def ltsf_layer(U: Tensor, H: Tensor | None, params: ParameterSet, i: int,
               cfg: HeuConfig) -> tuple[Tensor, list[np.ndarray]]:
    """Low-flow layer; ``H`` is the high flow's output at the same depth (or None)."""
    p = f"heu/ltsf/layer{i}"
    a, maps = attention(U, U, params[f"{p}/wq"], params[f"{p}/wk"], params[f"{p}/wv"], cfg.heads)
    mlp = params.mlp(f"{p}/mlp")
    if not cfg.residual:
        y = a
        if H is not None:
            y, cmaps = attention(a, H, params[f"{p}/cq"], params[f"{p}/ck"], params[f"{p}/cv"], cfg.heads)
            maps = maps + cmaps
        return T.mlp_apply(y, mlp), maps
    x = _ln(T.add(U, a), params, f"{p}/ln1")
    y = x
    if H is not None and cfg.fusion == "low_q":
        c, cmaps = attention(x, H, params[f"{p}/cq"], params[f"{p}/ck"], params[f"{p}/cv"], cfg.heads)
        maps = maps + cmaps
        y = _ln(T.add(x, c), params, f"{p}/ln3")
    elif H is not None and cfg.fusion == "add":
        y = _ln(T.add(x, T.mean_axis(H, 0)), params, f"{p}/ln3")
    elif H is not None and cfg.fusion == "concat":
        ctx = T.add(Tensor(np.zeros(x.shape)), T.mean_axis(H, 0))
        y = _ln(T.add(x, T.matmul(T.concat([x, ctx], axis=1), params[f"{p}/wcat"])), params, f"{p}/ln3")
    return _ln(T.add(y, T.mlp_apply(y, mlp)), params, f"{p}/ln2"), maps


def high_query_update(H: Tensor, U: Tensor, params: ParameterSet, i: int,
                      cfg: HeuConfig) -> tuple[Tensor, list[np.ndarray]]:
    """``fusion="high_q"``: the high tokens query the low tokens instead."""
    p = f"heu/ltsf/layer{i}"
    c, maps = attention(H, U, params[f"{p}/cq"], params[f"{p}/ck"], params[f"{p}/cv"], cfg.heads)
    return _ln(T.add(H, c), params, f"{p}/ln3"), maps


# ---------------------------------------------------------------------------
# full unit
# ---------------------------------------------------------------------------

@dataclass
class HeuPlan:
    """Geometry-only recipe for one temporal window (cacheable across steps)."""

    voxels: np.ndarray            # union of occupied flat cells over the window
    present: np.ndarray           # n_voxels x t occupancy
    high: Grouping | None
    low: Grouping | None
    n_cells: int

    @property
    def t(self) -> int:
        return self.present.shape[1]


@dataclass
class ScatterRecipe:
    cells: np.ndarray   # flat grid cell per member voxel
    token: np.ndarray   # embedding row of that voxel

    @classmethod
    def empty(cls) -> "ScatterRecipe":
        return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))


@dataclass
class HeuOutput:
    embedding: Tensor | None
    recipe: ScatterRecipe
    attention: list[np.ndarray] = field(default_factory=list)
    n_high: int = 0
    n_low: int = 0


def plan_heu(grids: list[CylindricalGrid], cfg: HeuConfig, counts: list[np.ndarray] | None = None,
             seed: int = 0) -> HeuPlan:
    """Union voxels of the window, the range partition, and the per-flow groupings."""
    gcfg: CylGridConfig = grids[0].cfg
    occ = np.stack([g.occupancy.reshape(-1) for g in grids], axis=1)
    voxels = np.flatnonzero(occ.any(axis=1))
    present = occ[voxels]
    rho = gcfg.cell_centers(voxels)[:, 0]
    far = rho >= range_threshold(gcfg, cfg.far_fraction)
    xyz = gcfg.cell_centers_xyz(voxels)
    density = None
    if counts is not None:
        density = np.stack([c.reshape(-1) for c in counts], axis=1)[voxels].sum(axis=1)

    def group(mask, m):
        pos = np.flatnonzero(mask)
        if len(pos) == 0:
            return None
        dens = None if density is None else density[pos]
        return make_grouping(xyz[pos], pos, m, cfg.sampling, dens, seed)

    use_high = cfg.mode in ("htsf", "full")
    use_low = cfg.mode in ("ltsf", "full")
    return HeuPlan(voxels=voxels, present=present,
                   high=group(far, cfg.m_high) if use_high else None,
                   low=group(~far, cfg.m_low) if use_low else None,
                   n_cells=gcfg.n_cells)


def heu_forward(F: Tensor, plan: HeuPlan, params: ParameterSet, cfg: HeuConfig) -> HeuOutput:
    """Run both flows on window features ``F`` (one row per (union voxel, frame)).

    Returns the high tokens followed by the low tokens, the member cells of
    every token for scattering back onto the grid, and all attention maps.
    """
    t = plan.t

    def tokens(g: Grouping):
        rows = (g.voxels[:, None] * t + np.arange(t)[None, :]).reshape(-1)
        Fg = T.gather_rows(F, rows)
        return mva_temporal(mva_spatial(Fg, plan.present[g.voxels], g, params, cfg), t, params)

    H = tokens(plan.high) if plan.high is not None else None
    U = tokens(plan.low) if plan.low is not None else None
    maps: list[np.ndarray] = []
    for i in range(cfg.layers):
        if H is not None:
            H, hm = htsf_layer(H, params, i, cfg)
            maps += hm
        if U is not None:
            cross = H if cfg.fusion != "high_q" else None
            U, lm = ltsf_layer(U, cross, params, i, cfg)
            maps += lm
            if H is not None and cfg.fusion == "high_q":
                H, qm = high_query_update(H, U, params, i, cfg)
                maps += qm

    parts, cells, token = [], [], []
    offset = 0
    for X, g in ((H, plan.high), (U, plan.low)):
        if X is None:
            continue
        kept = g.assign >= 0
        cells.append(plan.voxels[g.voxels[kept]])
        token.append(g.assign[kept] + offset)
        parts.append(X)
        offset += g.m
    if not parts:
        return HeuOutput(None, ScatterRecipe.empty(), maps)
    emb = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    recipe = ScatterRecipe(np.concatenate(cells), np.concatenate(token))
    return HeuOutput(emb, recipe, maps,
                     n_high=plan.high.m if H is not None else 0,
                     n_low=plan.low.m if U is not None else 0)


def scatter_to_grid(embedding: Tensor | None, recipe: ScatterRecipe, n_cells: int, d: int | None = None) -> Tensor:
    """Copy each token's embedding to its member cells; every other cell is zero."""
    if embedding is None or len(recipe.cells) == 0:
        width = d if embedding is None else embedding.shape[1]
        return Tensor(np.zeros((n_cells, width)))
    if recipe.token.max() >= embedding.shape[0] or recipe.token.min() < 0:
        raise IndexError("recipe refers to a token outside the embedding")
    return T.scatter_rows(T.gather_rows(embedding, recipe.token), recipe.cells, n_cells)
