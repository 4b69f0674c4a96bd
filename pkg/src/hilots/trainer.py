"""Mean-teacher training: losses, AdamW, EMA coupling and frame routing.

A window whose central frame is labelled goes through the student with the
focal loss; an unlabelled one goes through student and teacher (the
teacher without recording) and contributes the consistency loss.  After
the AdamW step the teacher follows the student by EMA.

AdamW update, per parameter ``p`` with gradient ``g`` at step ``k``::

    m <- b1 m + (1 - b1) g
    v <- b2 v + (1 - b2) g^2
    p <- p - lr * ( m / (1 - b1^k) / (sqrt(v / (1 - b2^k)) + eps) + wd * p )
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import IGNORE, SequenceDataset, batch_window, window_indices
from .geom import PointCloudFrame, voxelize_frame
from .model import ModelConfig, PreparedWindow, assemble_window, forward, init_params
from .tensor import ParameterSet, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 600
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 1
    ema: float = 0.99
    focal_gamma: float = 2.0
    class_weights: str = "uniform"
    loss: LossWeights = field(default_factory=LossWeights)
    warmup: int = 0
    input_noise: float = 0.0
    use_unlabeled: bool = True
    seed: int = 0
    log_every: int = 1
    ckpt_every: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.ema <= 1.0:
            raise ValueError("ema ratio must lie in [0, 1]")
        if self.class_weights not in ("uniform", "inverse_freq"):
            raise ValueError("class_weights must be 'uniform' or 'inverse_freq'")

    def lr_at(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        return self.lr


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float = 2.0,
               class_weights: np.ndarray | None = None, ignore: int = IGNORE) -> Tensor:
    """Mean over non-ignored points of ``-w_c (1 - p_t)^gamma log p_t``."""
    labels = np.asarray(labels, dtype=np.int64)
    valid = np.flatnonzero(labels != ignore)
    if len(valid) == 0:
        return Tensor(0.0)
    k = logits.shape[1]
    y = labels[valid]
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}) or equal the ignore marker")
    logp = T.log_softmax_rows(T.gather_rows(logits, valid))
    onehot = np.zeros((len(valid), k))
    onehot[np.arange(len(valid)), y] = 1.0
    logp_t = T.matmul(T.mul(logp, onehot), np.ones((k, 1)))
    per_point = logp_t
    if gamma != 0:
        per_point = T.mul(T.power(T.sub(1.0, T.exp(logp_t)), gamma), logp_t)
    if class_weights is not None:
        per_point = T.mul(per_point, np.asarray(class_weights, dtype=np.float64)[y][:, None])
    return T.neg(T.mean_all(per_point))


def inverse_frequency_weights(labels: list[np.ndarray], n_classes: int) -> np.ndarray:
    counts = np.zeros(n_classes)
    for lab in labels:
        v = lab[lab != IGNORE]
        counts += np.bincount(v, minlength=n_classes)[:n_classes]
    w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / n_classes, 0.0)
    return w / w[counts > 0].mean()


def consistency_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """``||softmax(student) - softmax(teacher)||_2 / P``."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"shape mismatch {student_logits.shape} vs {teacher_logits.shape}")
    n = max(student_logits.shape[0], 1)
    diff = T.sub(T.softmax_rows(student_logits), T.softmax_rows(teacher_logits))
    return T.mul(T.l2_norm(diff), 1.0 / n)


def total_loss(l_sup, l_con, w: LossWeights = LossWeights()):
    return T.add(T.mul(w.alpha, l_sup), T.mul(w.beta, l_con))


# ---------------------------------------------------------------------------
# optimisation and EMA
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay and bias correction (formula in the module docstring)."""

    def __init__(self, params: ParameterSet, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.k = 0

    def step(self, params: ParameterSet, grads: dict[str, np.ndarray] | None = None,
             lr: float | None = None) -> None:
        grads = params.grads() if grads is None else grads
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.k += 1
        c1, c2 = 1.0 - b1 ** self.k, 1.0 - b2 ** self.k
        for name, t in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            t.data -= lr * (update + self.weight_decay * t.data)


def adamw_step(params: ParameterSet, grads: dict[str, np.ndarray], cfg: TrainConfig,
               state: AdamW | None = None) -> AdamW:
    """Functional wrapper: one AdamW update, creating the moment state on first use."""
    state = state or AdamW(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    state.step(params, grads)
    return state


@dataclass
class TeacherStudentState:
    student: ParameterSet
    teacher: ParameterSet
    gamma: float = 0.99
    step: int = 0

    def __post_init__(self):
        if not self.student.same_layout(self.teacher):
            raise ValueError("teacher and student parameter layouts differ")

    @classmethod
    def from_student(cls, student: ParameterSet, gamma: float = 0.99) -> "TeacherStudentState":
        return cls(student, student.copy(requires_grad=False), gamma)

    def teacher_has_grads(self) -> bool:
        return any(t.grad is not None or t.requires_grad for _, t in self.teacher.items())


def ema_update(state: TeacherStudentState) -> ParameterSet:
    """teacher <- gamma * teacher + (1 - gamma) * student, element-wise."""
    g = state.gamma
    for name, t in state.teacher.items():
        t.data = g * t.data + (1.0 - g) * state.student[name].data
    return state.teacher


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------

@dataclass
class LossRecord:
    step: int
    l_sup: float
    l_con: float
    total: float
    lr: float
    n_labeled: int = 0
    n_unlabeled: int = 0

    def line(self) -> str:
        return (f"step={self.step} l_sup={self.l_sup:.17g} l_con={self.l_con:.17g} "
                f"total={self.total:.17g} lr={self.lr:.6g}")


def route_and_step(windows: list[PreparedWindow], state: TeacherStudentState, opt: AdamW,
                   cfg: TrainConfig, model_cfg: ModelConfig,
                   class_weights: np.ndarray | None = None,
                   perturb: Callable[[PreparedWindow], PreparedWindow] | None = None) -> LossRecord:
    """One optimisation step over a batch of windows, routed by their central label."""
    for pw in windows:
        if len(pw.frames) != model_cfg.t:
            raise ValueError(f"window has {len(pw.frames)} frames, expected t={model_cfg.t}")
    w = cfg.loss
    labeled = [pw for pw in windows if pw.labels is not None]
    unlabeled = [pw for pw in windows if pw.labels is None] if w.beta > 0 else []
    state.student.zero_grad()
    with T.Tape() as tape:
        sup_terms, con_terms = [], []
        for pw in labeled:
            logits = forward(state.student, pw, model_cfg).logits
            sup_terms.append(focal_loss(logits, pw.labels, cfg.focal_gamma, class_weights))
        for pw in unlabeled:
            with T.no_grad():
                teacher_logits = forward(state.teacher, pw, model_cfg).logits
            student_pw = perturb(pw) if perturb is not None else pw
            logits = forward(state.student, student_pw, model_cfg).logits
            con_terms.append(consistency_loss(logits, teacher_logits))
        l_sup = _mean(sup_terms)
        l_con = _mean(con_terms)
        loss = total_loss(l_sup, l_con, w)
    T.backward(tape, loss)
    lr = cfg.lr_at(state.step)
    opt.step(state.student, lr=lr)
    ema_update(state)
    state.step += 1
    if state.teacher_has_grads():
        raise RuntimeError("teacher parameters picked up gradients")
    return LossRecord(state.step, l_sup.item(), l_con.item(), loss.item(), lr,
                      len(labeled), len(unlabeled))


def _mean(terms: list[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return T.mul(out, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class WindowCache:
    """Voxelizes every frame once and keeps the assembled windows."""

    def __init__(self, ds: SequenceDataset, model_cfg: ModelConfig):
        self.ds, self.cfg = ds, model_cfg
        self._frames: dict[tuple[int, int], tuple] = {}
        self._windows: dict[tuple[int, int, bool], PreparedWindow] = {}

    def frame(self, s: int, f: int):
        key = (s, f)
        if key not in self._frames:
            fr = self.ds.sequences[s].frames[f].load()
            grid, mapping = voxelize_frame(fr, self.cfg.grid)
            self._frames[key] = (fr, grid, mapping)
        return self._frames[key]

    def window(self, key: tuple[int, int], with_labels: bool) -> PreparedWindow:
        ck = (key[0], key[1], with_labels)
        if ck not in self._windows:
            s, f = key
            idx = window_indices(len(self.ds.sequences[s]), f, self.cfg.t)
            parts = [self.frame(s, i) for i in idx]
            labels = self.ds.sequences[s].frames[f].load_labels() if with_labels else None
            self._windows[ck] = assemble_window([p[0] for p in parts], [p[1] for p in parts],
                                                [p[2] for p in parts], (self.cfg.t - 1) // 2,
                                                self.cfg, labels)
        return self._windows[ck]


def jitter_window(pw: PreparedWindow, cfg: ModelConfig, sigma: float,
                  rng: np.random.Generator) -> PreparedWindow:
    """Student-side input perturbation: Gaussian jitter on every point's xyz."""
    frames = []
    for fr in pw.frames:
        pts = fr.points.copy()
        pts[:, :3] += rng.normal(0.0, sigma, (len(pts), 3))
        frames.append(PointCloudFrame(pts, fr.frame_id))
    vox = [voxelize_frame(f, cfg.grid) for f in frames]
    return assemble_window(frames, [v[0] for v in vox], [v[1] for v in vox], pw.center, cfg, pw.labels)


@dataclass
class TrainResult:
    state: TeacherStudentState
    records: list[LossRecord]


def train(ds: SequenceDataset, labeled: list[tuple[int, int]], unlabeled: list[tuple[int, int]],
          model_cfg: ModelConfig, cfg: TrainConfig, log_path=None, ckpt_dir=None,
          cache: WindowCache | None = None) -> TrainResult:
    """Mean-teacher training.  Each step draws ``batch_size`` labelled and
    ``batch_size`` unlabelled windows (the latter only when the consistency
    weight is positive and ``use_unlabeled`` is set)."""
    if not labeled and not unlabeled:
        raise ValueError("no training frames")
    rng = np.random.default_rng(cfg.seed)
    student = init_params(model_cfg, cfg.seed)
    state = TeacherStudentState.from_student(student, cfg.ema)
    opt = AdamW(student, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    cache = cache or WindowCache(ds, model_cfg)
    use_unl = cfg.use_unlabeled and cfg.loss.beta > 0 and bool(unlabeled)
    weights = None
    if cfg.class_weights == "inverse_freq":
        weights = inverse_frequency_weights([ds.sequences[s].frames[f].load_labels() for s, f in labeled],
                                            ds.n_classes)
    perturb = None
    if cfg.input_noise > 0:
        noise_rng = np.random.default_rng(cfg.seed + 1)
        perturb = lambda pw: jitter_window(pw, model_cfg, cfg.input_noise, noise_rng)  # noqa: E731
    records = []
    fh = open(log_path, "w") if log_path else None
    try:
        if fh:
            fh.write("# step l_sup l_con total lr\n")
        for it in range(cfg.iterations):
            batch = []
            if labeled:
                for i in rng.integers(len(labeled), size=cfg.batch_size):
                    batch.append(cache.window(labeled[i], with_labels=True))
            if use_unl:
                for i in rng.integers(len(unlabeled), size=cfg.batch_size):
                    batch.append(cache.window(unlabeled[i], with_labels=False))
            rec = route_and_step(batch, state, opt, cfg, model_cfg, weights, perturb)
            records.append(rec)
            if fh and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
                fh.write(rec.line() + "\n")
            if it % 50 == 0:
                log.info(rec.line())
            if ckpt_dir and cfg.ckpt_every and (it + 1) % cfg.ckpt_every == 0:
                T.save_checkpoint(Path(ckpt_dir) / f"step{it + 1:06d}.hilo", state.teacher)
    finally:
        if fh:
            fh.close()
    if ckpt_dir:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
        T.save_checkpoint(Path(ckpt_dir) / "final.hilo", state.teacher)
    return TrainResult(state, records)


__all__ = [
    "LossWeights", "TrainConfig", "TeacherStudentState", "AdamW", "LossRecord", "TrainResult",
    "WindowCache", "focal_loss", "consistency_loss", "total_loss", "ema_update", "adamw_step",
    "route_and_step", "train", "inverse_frequency_weights", "jitter_window", "batch_window",
]
