"""Datasets: SemanticKITTI-layout files, labelled-frame splits, synthetic sequences.

On disk a dataset looks like SemanticKITTI::

    <root>/sequences/<id>/velodyne/<frame:06d>.bin    float32 x, y, z, r
    <root>/sequences/<id>/labels/<frame:06d>.label    uint32, class in the low 16 bits

Synthetic datasets additionally carry ``<root>/dataset.cfg`` (``key=value``
lines) naming the class set.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloudFrame

IGNORE = -1

SYNTH_CLASSES = ("road", "vehicle", "vegetation", "structure")
ROAD, VEHICLE, VEGETATION, STRUCTURE = range(4)

SEMANTICKITTI_CLASSES = (
    "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person", "bicyclist",
    "motorcyclist", "road", "parking", "sidewalk", "other-ground", "building", "fence",
    "vegetation", "trunk", "terrain", "pole", "traffic-sign",
)

# raw SemanticKITTI id -> train id (0..18); everything else is ignored
SEMANTICKITTI_LEARNING_MAP = {
    10: 0, 11: 1, 15: 2, 18: 3, 20: 4, 13: 4, 16: 4, 30: 5, 31: 6, 32: 7,
    40: 8, 60: 8, 44: 9, 48: 10, 49: 11, 50: 12, 51: 13, 70: 14, 71: 15, 72: 16,
    80: 17, 81: 18, 252: 0, 253: 6, 254: 5, 255: 7, 256: 4, 257: 4, 258: 3, 259: 4,
}
SEMANTICKITTI_INVERSE_MAP = {
    0: 10, 1: 11, 2: 15, 3: 18, 4: 20, 5: 30, 6: 31, 7: 32, 8: 40, 9: 44,
    10: 48, 11: 49, 12: 50, 13: 51, 14: 70, 15: 71, 16: 72, 17: 80, 18: 81,
}


# ---------------------------------------------------------------------------
# binary files
# ---------------------------------------------------------------------------

def load_bin_frame(path, frame_id: int = 0) -> PointCloudFrame:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        whole = len(raw) - len(raw) % 16
        raise ValueError(f"{path}: truncated point record at byte offset {whole} "
                         f"(file is {len(raw)} bytes, not a multiple of 16)")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloudFrame(pts, frame_id)


def write_bin_frame(path, points: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(points)[:, :4], dtype="<f4")
    Path(path).write_bytes(arr.tobytes())


def load_label_file(path) -> np.ndarray:
    """Raw semantic ids (low 16 bits) as int64."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise ValueError(f"{path}: truncated label record at byte offset {len(raw) - len(raw) % 4}")
    return (np.frombuffer(raw, dtype="<u4") & 0xFFFF).astype(np.int64)


def write_label_file(path, labels: np.ndarray, instance: np.ndarray | None = None) -> None:
    sem = np.asarray(labels, dtype=np.int64)
    if np.any(sem < 0) or np.any(sem > 0xFFFF):
        raise ValueError("semantic ids must fit in 16 unsigned bits")
    word = sem.astype(np.uint32)
    if instance is not None:
        word |= (np.asarray(instance, dtype=np.uint32) & 0xFFFF) << 16
    Path(path).write_bytes(word.astype("<u4").tobytes())


def map_labels(raw: np.ndarray, label_map: str) -> np.ndarray:
    if label_map == "identity":
        return raw.copy()
    if label_map == "semantickitti":
        lut = np.full(max(max(SEMANTICKITTI_LEARNING_MAP), int(raw.max(initial=0))) + 1, IGNORE)
        for k, v in SEMANTICKITTI_LEARNING_MAP.items():
            lut[k] = v
        return lut[raw]
    raise ValueError(f"unknown label map {label_map!r}")


def unmap_labels(pred: np.ndarray, label_map: str) -> np.ndarray:
    if label_map == "identity":
        return np.asarray(pred, dtype=np.int64)
    lut = np.array([SEMANTICKITTI_INVERSE_MAP[i] for i in range(len(SEMANTICKITTI_CLASSES))])
    return lut[np.asarray(pred)]


# ---------------------------------------------------------------------------
# dataset containers
# ---------------------------------------------------------------------------

@dataclass
class FrameRef:
    """One frame, held in memory or lazily read from disk."""

    frame_id: int
    points: np.ndarray | None = None
    labels: np.ndarray | None = None
    bin_path: Path | None = None
    label_path: Path | None = None
    instances: np.ndarray | None = None
    label_map: str = "identity"

    @property
    def has_labels(self) -> bool:
        return self.labels is not None or (self.label_path is not None and Path(self.label_path).exists())

    def load(self) -> PointCloudFrame:
        if self.points is not None:
            return PointCloudFrame(self.points, self.frame_id)
        return load_bin_frame(self.bin_path, self.frame_id)

    def load_labels(self) -> np.ndarray | None:
        if self.labels is not None:
            return self.labels
        if self.label_path is None or not Path(self.label_path).exists():
            return None
        return map_labels(load_label_file(self.label_path), self.label_map)


@dataclass
class Sequence:
    seq_id: str
    frames: list[FrameRef]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class SequenceDataset:
    sequences: list[Sequence]
    n_classes: int
    class_names: tuple[str, ...] = ()
    label_map: str = "identity"

    def __post_init__(self):
        for seq in self.sequences:
            ids = [f.frame_id for f in seq.frames]
            if any(b <= a for a, b in zip(ids, ids[1:])):
                raise ValueError(f"sequence {seq.seq_id}: frame ids not strictly increasing")

    def frame_keys(self) -> list[tuple[int, int]]:
        return [(s, f) for s, seq in enumerate(self.sequences) for f in range(len(seq))]

    def subset(self, seq_indices) -> "SequenceDataset":
        return SequenceDataset([self.sequences[i] for i in seq_indices], self.n_classes,
                               self.class_names, self.label_map)


def load_dataset(root, sequences: list[str] | None = None, label_map: str | None = None,
                 n_classes: int | None = None) -> SequenceDataset:
    """Index a SemanticKITTI-layout directory (frames are read lazily)."""
    root = Path(root)
    meta = _read_meta(root / "dataset.cfg")
    label_map = label_map or meta.get("label_map", "semantickitti")
    if label_map == "semantickitti":
        names = SEMANTICKITTI_CLASSES
    else:
        names = tuple(meta.get("class_names", ",".join(SYNTH_CLASSES)).split(","))
    k = n_classes or int(meta.get("n_classes", len(names)))
    seq_root = root / "sequences"
    if not seq_root.is_dir():
        raise FileNotFoundError(f"{seq_root} does not exist")
    ids = sequences or sorted(p.name for p in seq_root.iterdir() if p.is_dir())
    seqs = []
    for sid in ids:
        velo = seq_root / sid / "velodyne"
        frames = []
        for p in sorted(velo.glob("*.bin")):
            lab = seq_root / sid / "labels" / (p.stem + ".label")
            frames.append(FrameRef(int(p.stem), bin_path=p, label_path=lab, label_map=label_map))
        seqs.append(Sequence(sid, frames))
    return SequenceDataset(seqs, k, names, label_map)


def save_dataset(ds: SequenceDataset, root, with_labels: bool = True) -> None:
    root = Path(root)
    for seq in ds.sequences:
        velo = root / "sequences" / seq.seq_id / "velodyne"
        labs = root / "sequences" / seq.seq_id / "labels"
        velo.mkdir(parents=True, exist_ok=True)
        if with_labels:
            labs.mkdir(parents=True, exist_ok=True)
        for fr in seq.frames:
            write_bin_frame(velo / f"{fr.frame_id:06d}.bin", fr.load().points)
            lab = fr.load_labels()
            if with_labels and lab is not None:
                write_label_file(labs / f"{fr.frame_id:06d}.label", unmap_labels(lab, ds.label_map),
                                 fr.instances)
    with open(root / "dataset.cfg", "w") as fh:
        fh.write(f"n_classes={ds.n_classes}\n")
        fh.write(f"class_names={','.join(ds.class_names)}\n")
        fh.write(f"label_map={ds.label_map}\n")


def _read_meta(path: Path) -> dict[str, str]:
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# splits and windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    ratio: float = 0.1
    seed: int = 0
    strategy: str = "uniform"

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"supervised ratio must lie in (0, 1], got {self.ratio}")


def labeled_positions(n_frames: int, ratio: float, phase: float) -> np.ndarray:
    """Frames ``floor(phase + j / ratio)`` that fall inside the sequence."""
    stride = 1.0 / ratio
    j = np.arange(int(np.ceil(n_frames * ratio)) + 2)
    pos = np.floor(phase + j * stride).astype(np.int64)
    return np.unique(pos[pos < n_frames])


def make_split(ds: SequenceDataset, spec: SplitSpec) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Uniform-stride labelled frames with a seeded phase per sequence.

    Returns (labelled, unlabelled) lists of (sequence index, frame index).
    """
    rng = np.random.default_rng(spec.seed)
    labeled, unlabeled = [], []
    for s, seq in enumerate(ds.sequences):
        phase = rng.uniform(0.0, 1.0 / spec.ratio)
        lab = set(labeled_positions(len(seq), spec.ratio, phase).tolist())
        for f in range(len(seq)):
            (labeled if f in lab else unlabeled).append((s, f))
    return labeled, unlabeled


def window_indices(n_frames: int, center: int, t: int) -> list[int]:
    """Symmetric window around ``center``, clamped to the sequence ends."""
    if t < 1:
        raise ValueError("t must be >= 1")
    before = (t - 1) // 2
    return [min(max(center - before + k, 0), n_frames - 1) for k in range(t)]


@dataclass
class Window:
    frames: list[PointCloudFrame]
    frame_indices: list[int]
    center: int
    labels: np.ndarray | None
    key: tuple[int, int] = (0, 0)

    @property
    def central_frame(self) -> PointCloudFrame:
        return self.frames[self.center]


def batch_window(ds: SequenceDataset, central: tuple[int, int], t: int,
                 with_labels: bool = True) -> Window:
    s, f = central
    seq = ds.sequences[s]
    idx = window_indices(len(seq), f, t)
    frames = [seq.frames[i].load() for i in idx]
    labels = seq.frames[f].load_labels() if with_labels else None
    return Window(frames, idx, (t - 1) // 2, labels, central)


# ---------------------------------------------------------------------------
# synthetic sequences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Near geometry is fixed; far objects are re-drawn each frame with probability ``churn``."""

    n_points: int = 2048
    n_frames: int = 20
    churn: float = 0.5
    noise: float = 0.03
    seed: int = 0
    near_radius: float = 15.0
    max_range: float = 48.0
    n_near_vehicles: int = 4
    n_far_objects: int = 14
    ground_z: float = -1.7
    ground_fraction: float = 0.35

    def __post_init__(self):
        if not 0.0 <= self.churn <= 1.0:
            raise ValueError("churn must lie in [0, 1]")
        if self.n_points < 1 or self.n_frames < 1:
            raise ValueError("need at least one point and one frame")


@dataclass
class _Obj:
    oid: int
    cls: int
    kind: str
    center: np.ndarray
    size: np.ndarray
    yaw: float
    intensity: float


_FAR_KINDS = (("vehicle", VEHICLE), ("bush", VEGETATION), ("tree", VEGETATION),
              ("wall", STRUCTURE), ("pole", STRUCTURE))


class _SceneGenerator:
    def __init__(self, spec: SyntheticSceneSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.next_id = 1

    def _id(self) -> int:
        self.next_id += 1
        return self.next_id - 1

    def near_objects(self) -> list[_Obj]:
        sp, rng = self.spec, self.rng
        out = []
        angles = rng.uniform(-np.pi, np.pi) + np.arange(sp.n_near_vehicles) * 2 * np.pi / max(sp.n_near_vehicles, 1)
        for a in angles:
            rho = rng.uniform(5.0, sp.near_radius - 3.0)
            c = np.array([rho * np.cos(a), rho * np.sin(a), sp.ground_z + 0.75])
            out.append(_Obj(self._id(), VEHICLE, "vehicle", c, np.array([4.2, 1.8, 1.5]),
                            a + np.pi / 2 + rng.normal(0, 0.2), rng.uniform(0.55, 0.75)))
        return out

    def far_object(self) -> _Obj:
        sp, rng = self.spec, self.rng
        kind, cls = _FAR_KINDS[rng.integers(len(_FAR_KINDS))]
        rho = rng.uniform(sp.near_radius + 2.0, sp.max_range - 2.0)
        a = rng.uniform(-np.pi, np.pi)
        base = np.array([rho * np.cos(a), rho * np.sin(a)])
        g = sp.ground_z
        if kind == "vehicle":
            size = np.array([rng.uniform(3.8, 5.0), rng.uniform(1.7, 2.1), rng.uniform(1.4, 1.9)])
            intensity = rng.uniform(0.45, 0.75)
        elif kind == "bush":
            size = rng.uniform(1.5, 3.5, 3) * np.array([1, 1, 0.6])
            intensity = rng.uniform(0.25, 0.5)
        elif kind == "tree":
            size = np.array([rng.uniform(2, 4), rng.uniform(2, 4), rng.uniform(3.0, 3.8)])
            intensity = rng.uniform(0.25, 0.5)
        elif kind == "wall":
            size = np.array([rng.uniform(6, 14), 0.4, rng.uniform(2.5, 3.6)])
            intensity = rng.uniform(0.35, 0.6)
        else:
            size = np.array([0.35, 0.35, rng.uniform(3.2, 3.7)])
            intensity = rng.uniform(0.35, 0.6)
        center = np.array([base[0], base[1], g + size[2] / 2])
        return _Obj(self._id(), cls, kind, center, size, rng.uniform(-np.pi, np.pi), intensity)

    def sample_object(self, o: _Obj, n: int) -> np.ndarray:
        rng = self.rng
        if o.kind in ("bush", "tree"):
            u = rng.normal(size=(n, 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            local = u * o.size / 2 * rng.uniform(0.8, 1.0, (n, 1))
        elif o.kind == "pole":
            a = rng.uniform(0, 2 * np.pi, n)
            local = np.stack([np.cos(a) * o.size[0] / 2, np.sin(a) * o.size[1] / 2,
                              rng.uniform(-0.5, 0.5, n) * o.size[2]], axis=1)
        else:
            # points on the box surface, faces weighted by area
            half = o.size / 2
            areas = np.array([o.size[1] * o.size[2], o.size[0] * o.size[2], o.size[0] * o.size[1]])
            face = rng.choice(3, n, p=areas / areas.sum())
            local = rng.uniform(-1, 1, (n, 3)) * half
            sign = rng.choice([-1.0, 1.0], n)
            local[np.arange(n), face] = sign * half[face]
        c, s = np.cos(o.yaw), np.sin(o.yaw)
        xy = local[:, :2] @ np.array([[c, s], [-s, c]])
        xyz = np.column_stack([xy, local[:, 2]]) + o.center
        xyz += rng.normal(0, self.spec.noise, xyz.shape)
        inten = np.clip(o.intensity + rng.normal(0, 0.12, n), 0.0, 1.0)
        return np.column_stack([xyz, inten])

    def sample_ground(self, n: int) -> np.ndarray:
        sp, rng = self.spec, self.rng
        rho = rng.uniform(1.5, sp.max_range, n)
        a = rng.uniform(-np.pi, np.pi, n)
        z = sp.ground_z + rng.normal(0, sp.noise, n)
        inten = np.clip(rng.normal(0.15, 0.06, n), 0.0, 1.0)
        return np.column_stack([rho * np.cos(a), rho * np.sin(a), z, inten])

    def allocate(self, objects: list[_Obj], n: int) -> np.ndarray:
        """Split ``n`` points over objects by apparent size (area over squared range)."""
        w = np.array([np.prod(np.sort(o.size)[1:]) / max(np.hypot(*o.center[:2]), 4.0) ** 2
                      for o in objects])
        p = w / w.sum()
        return self.rng.multinomial(n, p)

    def run(self) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
        sp, rng = self.spec, self.rng
        near = self.near_objects()
        far = [self.far_object() for _ in range(sp.n_far_objects)]
        frames, labels, inst = [], [], []
        n_ground = int(round(sp.n_points * sp.ground_fraction))
        for k in range(sp.n_frames):
            if k > 0:
                for j in range(len(far)):
                    if rng.random() < sp.churn:
                        far[j] = self.far_object()
            objs = near + far
            counts = self.allocate(objs, sp.n_points - n_ground)
            parts = [self.sample_ground(n_ground)]
            labs = [np.full(n_ground, ROAD)]
            ids = [np.zeros(n_ground, dtype=np.int64)]
            for o, c in zip(objs, counts):
                parts.append(self.sample_object(o, int(c)))
                labs.append(np.full(int(c), o.cls))
                ids.append(np.full(int(c), o.oid))
            pts = np.concatenate(parts)
            order = rng.permutation(len(pts))
            frames.append(pts[order])
            labels.append(np.concatenate(labs)[order].astype(np.int64))
            inst.append(np.concatenate(ids)[order])
        return frames, labels, inst


def generate_synthetic_sequence(spec: SyntheticSceneSpec, seq_id: str = "00") -> SequenceDataset:
    """One synthetic sequence; every point is labelled and carries an object id (0 = ground)."""
    frames, labels, inst = _SceneGenerator(spec).run()
    refs = [FrameRef(k, points=p, labels=l, instances=i)
            for k, (p, l, i) in enumerate(zip(frames, labels, inst))]
    return SequenceDataset([Sequence(seq_id, refs)], len(SYNTH_CLASSES), SYNTH_CLASSES, "identity")


def generate_synthetic_dataset(n_sequences: int = 8, spec: SyntheticSceneSpec | None = None) -> SequenceDataset:
    """The desk benchmark: ``n_sequences`` independent sequences, seeds spec.seed + i."""
    spec = spec or SyntheticSceneSpec()
    seqs = []
    for i in range(n_sequences):
        sub = SyntheticSceneSpec(**{**spec.__dict__, "seed": spec.seed * 1000 + i})
        seqs.extend(generate_synthetic_sequence(sub, f"{i:02d}").sequences)
    return SequenceDataset(seqs, len(SYNTH_CLASSES), SYNTH_CLASSES, "identity")


def label_change_frequency(seq: Sequence, split_radius: float) -> tuple[float, float]:
    """Mean per-point label-change rate between consecutive frames, (far, near).

    Each point is matched to its nearest neighbour in the next frame; a
    change is a label mismatch.  Points with horizontal range at or beyond
    ``split_radius`` count as far.
    """
    far_hits, near_hits = [], []
    for a, b in zip(seq.frames[:-1], seq.frames[1:]):
        pa, pb = a.load().points, b.load().points
        la, lb = a.load_labels(), b.load_labels()
        _, nn = cKDTree(pb[:, :3]).query(pa[:, :3])
        changed = la != lb[nn]
        far = np.hypot(pa[:, 0], pa[:, 1]) >= split_radius
        far_hits.append(changed[far])
        near_hits.append(changed[~far])
    return float(np.concatenate(far_hits).mean()), float(np.concatenate(near_hits).mean())
