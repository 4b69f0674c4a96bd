"""Cylindrical voxelization and the exact point <-> cell mapping.

Cells are uniform in (rho, theta, z), so their Cartesian footprint grows
with distance from the sensor.  When several points land in one cell the
one with the smallest radial distance is kept (lowest point index on ties).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .tensor import Tensor, gather_rows, scatter_rows

OUT_OF_RANGE = -1


@dataclass
class PointCloudFrame:
    """``points`` is P x 4: x, y, z in metres and intensity in [0, 1]."""

    points: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must be P x 4, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point coordinates")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class CylGridConfig:
    rho_range: tuple[float, float] = (0.0, 50.0)
    theta_range: tuple[float, float] = (-np.pi, np.pi)
    z_range: tuple[float, float] = (-4.0, 2.0)
    resolution: tuple[int, int, int] = (240, 180, 20)

    def __post_init__(self):
        for name in ("rho_range", "theta_range", "z_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: min {lo} must be below max {hi}")
        if len(self.resolution) != 3 or min(self.resolution) < 1:
            raise ValueError(f"resolution must be three counts >= 1, got {self.resolution}")

    @classmethod
    def paper(cls) -> "CylGridConfig":
        return cls()

    @classmethod
    def desk(cls) -> "CylGridConfig":
        return cls(resolution=(40, 48, 8))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(r) for r in self.resolution)

    @property
    def n_cells(self) -> int:
        r, t, h = self.shape
        return r * t * h

    @property
    def lows(self) -> np.ndarray:
        return np.array([self.rho_range[0], self.theta_range[0], self.z_range[0]])

    @property
    def highs(self) -> np.ndarray:
        return np.array([self.rho_range[1], self.theta_range[1], self.z_range[1]])

    @property
    def rho_max(self) -> float:
        return float(self.rho_range[1])

    def cell_centers(self, cells: np.ndarray | None = None) -> np.ndarray:
        """Cylindrical (rho, theta, z) centres of flat cell indices (all cells by default)."""
        if cells is None:
            cells = np.arange(self.n_cells)
        ijk = np.stack(np.unravel_index(np.asarray(cells, dtype=np.int64), self.shape), axis=-1)
        size = (self.highs - self.lows) / np.array(self.shape)
        return self.lows + (ijk + 0.5) * size

    def cell_centers_xyz(self, cells: np.ndarray | None = None) -> np.ndarray:
        cyl = self.cell_centers(cells)
        return np.stack([cyl[:, 0] * np.cos(cyl[:, 1]), cyl[:, 0] * np.sin(cyl[:, 1]), cyl[:, 2]], axis=-1)

    def normalize(self, cyl: np.ndarray) -> np.ndarray:
        """Map (rho, theta, z) onto roughly [-1, 1] for network inputs."""
        return 2.0 * (cyl - self.lows) / (self.highs - self.lows) - 1.0


def cartesian_to_cylindrical(xyz) -> np.ndarray:
    """(x, y, z) -> (rho, theta, z) with theta in (-pi, pi] and theta = 0 at the origin.

    Accepts a single triple or an N x 3 (or N x 4) array.
    """
    arr = np.asarray(xyz, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    x, y, z = arr[:, 0], arr[:, 1], arr[:, 2]
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    theta = np.where(theta <= -np.pi, np.pi, theta)
    theta = np.where(rho == 0.0, 0.0, theta)
    out = np.stack([rho, theta, z], axis=-1)
    return out[0] if single else out


def voxel_index(cyl, cfg: CylGridConfig) -> np.ndarray:
    """Per-dimension cell index; rows with any coordinate outside the grid become -1.

    The upper bound of each range is closed and lands in the last cell.
    """
    arr = np.asarray(cyl, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)[:, :3]
    lows, highs = cfg.lows, cfg.highs
    res = np.array(cfg.shape)
    inside = np.all((arr >= lows) & (arr <= highs), axis=1)
    idx = np.floor((arr - lows) / (highs - lows) * res).astype(np.int64)
    idx = np.minimum(idx, res - 1)
    idx[~inside] = OUT_OF_RANGE
    return idx[0] if single else idx


def flat_cell_index(cyl: np.ndarray, cfg: CylGridConfig) -> np.ndarray:
    ijk = voxel_index(np.atleast_2d(cyl), cfg)
    flat = np.full(len(ijk), OUT_OF_RANGE, dtype=np.int64)
    ok = ijk[:, 0] >= 0
    if ok.any():
        flat[ok] = np.ravel_multi_index(tuple(ijk[ok].T), cfg.shape)
    return flat


@dataclass
class VoxelMapping:
    """Point <-> cell correspondence of one voxelized frame.

    ``cells`` lists the occupied flat cell indices in ascending order;
    ``survivor[k]`` is the point kept for ``cells[k]``.  Members of each cell
    are stored CSR-style in ``member_points`` / ``member_offsets``.
    """

    point_to_cell: np.ndarray
    cells: np.ndarray
    survivor: np.ndarray
    member_points: np.ndarray
    member_offsets: np.ndarray
    n_cells: int

    @property
    def n_points(self) -> int:
        return len(self.point_to_cell)

    @property
    def in_range(self) -> np.ndarray:
        return self.point_to_cell != OUT_OF_RANGE

    def members(self, cell: int) -> np.ndarray:
        k = np.searchsorted(self.cells, cell)
        if k >= len(self.cells) or self.cells[k] != cell:
            return np.empty(0, dtype=np.int64)
        return self.member_points[self.member_offsets[k]:self.member_offsets[k + 1]]

    @cached_property
    def cell_to_points(self) -> dict[int, np.ndarray]:
        return {int(c): self.member_points[self.member_offsets[k]:self.member_offsets[k + 1]]
                for k, c in enumerate(self.cells)}

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.member_offsets)


@dataclass
class CylindricalGrid:
    """Dense R x Theta x H x 4 grid of (rho, theta, z, intensity); empty cells are zero."""

    features: np.ndarray
    occupancy: np.ndarray
    cfg: CylGridConfig = field(repr=False)

    @property
    def occupied_cells(self) -> np.ndarray:
        return np.flatnonzero(self.occupancy.reshape(-1))

    def flat_features(self) -> np.ndarray:
        return self.features.reshape(-1, self.features.shape[-1])


def voxelize_frame(frame: PointCloudFrame, cfg: CylGridConfig) -> tuple[CylindricalGrid, VoxelMapping]:
    pts = frame.points
    n = len(pts)
    cyl = cartesian_to_cylindrical(pts[:, :3]) if n else np.zeros((0, 3))
    flat = flat_cell_index(cyl, cfg) if n else np.zeros(0, dtype=np.int64)

    valid = np.flatnonzero(flat != OUT_OF_RANGE)
    # sort by cell, then radial distance, then point index
    order = valid[np.lexsort((valid, cyl[valid, 0], flat[valid]))] if len(valid) else valid
    sorted_cells = flat[order]
    starts = np.flatnonzero(np.r_[True, sorted_cells[1:] != sorted_cells[:-1]]) if len(order) else np.zeros(0, dtype=np.int64)
    cells = sorted_cells[starts]
    survivor = order[starts]
    # member lists in ascending point order within each cell
    member_order = valid[np.lexsort((valid, flat[valid]))] if len(valid) else valid
    offsets = np.r_[starts, len(order)].astype(np.int64)

    features = np.zeros(cfg.shape + (4,))
    occupancy = np.zeros(cfg.shape, dtype=bool)
    fview = features.reshape(-1, 4)
    if len(cells):
        fview[cells, :3] = cyl[survivor]
        fview[cells, 3] = pts[survivor, 3]
        occupancy.reshape(-1)[cells] = True
    mapping = VoxelMapping(point_to_cell=flat, cells=cells, survivor=survivor,
                           member_points=member_order, member_offsets=offsets,
                           n_cells=cfg.n_cells)
    return CylindricalGrid(features, occupancy, cfg), mapping


def range_threshold(cfg: CylGridConfig, far_fraction: float = 0.7) -> float:
    """Radial distance at which the farthest ``far_fraction`` of the range begins."""
    lo, hi = cfg.rho_range
    return hi - far_fraction * (hi - lo)


def partition_by_range(voxels, cfg: CylGridConfig, far_fraction: float = 0.7) -> tuple[np.ndarray, np.ndarray]:
    """Split voxels into (far, near) index arrays by the radial distance of their centre.

    ``voxels`` is either a :class:`CylindricalGrid` (its occupied cells are
    split, and flat cell indices are returned) or an array of radial
    distances (positions into that array are returned).  A voxel exactly at
    the threshold counts as far.
    """
    if not 0.0 < far_fraction < 1.0:
        raise ValueError(f"far_fraction must lie in (0, 1), got {far_fraction}")
    thr = range_threshold(cfg, far_fraction)
    if isinstance(voxels, CylindricalGrid):
        cells = voxels.occupied_cells
        far = cfg.cell_centers(cells)[:, 0] >= thr
        return cells[far], cells[~far]
    rho = np.asarray(voxels, dtype=np.float64)
    far = rho >= thr
    return np.flatnonzero(far), np.flatnonzero(~far)


def devoxelize(voxel_features, mapping: VoxelMapping):
    """Give each point the feature row of its cell; out-of-range points get zeros.

    ``voxel_features`` has one row per grid cell.  Works on numpy arrays and
    on :class:`Tensor` (differentiably).
    """
    n_rows = voxel_features.shape[0]
    if n_rows != mapping.n_cells:
        raise ValueError(f"{n_rows} voxel rows for a mapping over {mapping.n_cells} cells")
    inside = np.flatnonzero(mapping.in_range)
    cells = mapping.point_to_cell[inside]
    if isinstance(voxel_features, Tensor):
        return scatter_rows(gather_rows(voxel_features, cells), inside, mapping.n_points)
    out = np.zeros((mapping.n_points,) + voxel_features.shape[1:])
    out[inside] = voxel_features[cells]
    return out
