"""Confusion matrices, mIoU, teacher evaluation and error-map images."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import IGNORE, SequenceDataset
from .geom import PointCloudFrame, range_threshold
from .model import ModelConfig, predict
from .tensor import ParameterSet


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def zeros(cls, k: int) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, truth: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        self.counts += confusion_matrix(truth, pred, self.n_classes).counts
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, n_classes: int,
                     ignore: int = IGNORE) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ValueError(f"truth/pred length mismatch: {truth.shape} vs {pred.shape}")
    keep = truth != ignore
    t, p = truth[keep], pred[keep]
    if len(t) and (t.min() < 0 or t.max() >= n_classes or p.min() < 0 or p.max() >= n_classes):
        raise ValueError(f"labels outside [0, {n_classes})")
    flat = np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
    return ConfusionMatrix(flat.reshape(n_classes, n_classes))


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean over classes seen in truth or prediction.

    Classes absent from both get IoU NaN and are left out of the mean.
    """
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    fp = c.sum(axis=0) - np.diag(c)
    fn = c.sum(axis=1) - np.diag(c)
    union = tp + fp + fn
    present = union > 0
    iou = np.full(cm.n_classes, np.nan)
    iou[present] = tp[present] / union[present]
    mean = float(iou[present].mean()) if present.any() else 0.0
    return iou, mean


def format_iou_table(iou: np.ndarray, mean: float, names: list[str]) -> str:
    width = max([len(n) for n in names] + [4])
    lines = [f"{'class':<{width}}  IoU"]
    for n, v in zip(names, iou):
        lines.append(f"{n:<{width}}  {'  n/a' if np.isnan(v) else f'{100 * v:5.1f}'}")
    lines.append(f"{'mIoU':<{width}}  {100 * mean:5.1f}")
    return "\n".join(lines)


@dataclass
class EvalResult:
    overall: ConfusionMatrix
    far: ConfusionMatrix
    near: ConfusionMatrix

    @property
    def miou(self) -> float:
        return miou(self.overall)[1]

    @property
    def far_miou(self) -> float:
        return miou(self.far)[1]

    @property
    def near_miou(self) -> float:
        return miou(self.near)[1]


def evaluate(params: ParameterSet, ds: SequenceDataset, keys: list[tuple[int, int]],
             model_cfg: ModelConfig, cache=None, far_fraction: float | None = None) -> EvalResult:
    """Teacher-style inference on the given (sequence, frame) keys, split by range.

    A point counts as far when its cylindrical radius is at least the
    partition threshold used by the embedding unit.
    """
    from .trainer import WindowCache

    cache = cache or WindowCache(ds, model_cfg)
    f = model_cfg.heu.far_fraction if far_fraction is None else far_fraction
    thr = range_threshold(model_cfg.grid, f)
    k = ds.n_classes
    res = EvalResult(ConfusionMatrix.zeros(k), ConfusionMatrix.zeros(k), ConfusionMatrix.zeros(k))
    for key in keys:
        pw = cache.window(key, with_labels=True)
        pred = predict(params, pw, model_cfg)
        truth = pw.labels
        rho = np.hypot(pw.frame.points[:, 0], pw.frame.points[:, 1])
        far = rho >= thr
        res.overall.update(truth, pred)
        res.far.update(truth[far], pred[far])
        res.near.update(truth[~far], pred[~far])
    return res


BLUE = (0, 0, 255)
RED = (255, 0, 0)


def render_error_map(frame: PointCloudFrame, pred: np.ndarray, truth: np.ndarray, path,
                     size: int = 512, extent: float | None = None) -> np.ndarray:
    """Top-down view, +x to the right and +y up; writes a binary PPM and returns the image.

    Points whose truth is the ignore marker are not drawn.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if len(pred) != len(truth) or len(pred) != len(frame):
        raise ValueError(f"length mismatch: {len(frame)} points, {len(pred)} pred, {len(truth)} truth")
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    xy = frame.points[:, :2]
    if extent is None:
        extent = float(np.abs(xy).max()) * 1.05 if len(xy) else 1.0
    extent = max(extent, 1e-9)
    col = np.clip(((xy[:, 0] + extent) / (2 * extent) * size).astype(np.int64), 0, size - 1)
    row = np.clip(((extent - xy[:, 1]) / (2 * extent) * size).astype(np.int64), 0, size - 1)
    keep = truth != IGNORE
    ok = (pred == truth) & keep
    bad = (pred != truth) & keep
    img[row[ok], col[ok]] = BLUE
    img[row[bad], col[bad]] = RED
    write_ppm(path, img)
    return img


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=3)
    if len(parts) < 4 or parts[0] != b"P6" or not parts[3].startswith(b"255"):
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    pixels = parts[3][4:]  # "255" plus one whitespace byte
    return np.frombuffer(pixels, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


__all__ = [
    "ConfusionMatrix", "EvalResult", "confusion_matrix", "miou", "format_iou_table", "evaluate",
    "render_error_map", "write_ppm", "read_ppm",
]
