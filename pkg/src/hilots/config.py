"""Run configuration: presets, flat ``key=value`` files and command-line overrides."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import SyntheticSceneSpec
from .model import ModelConfig
from .trainer import LossWeights, TrainConfig

PRESETS = ("desk", "paper")


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    ratio: float = 0.1
    data: str = ""
    out: str = ""
    ckpt: str = ""
    iters: int = 600
    # optimisation
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 1
    ema: float = 0.99
    focal_gamma: float = 2.0
    class_weights: str = "uniform"
    alpha: float = 1.0
    beta: float = 1.0
    warmup: int = 0
    input_noise: float = 0.0
    use_unlabeled: bool = True
    log_every: int = 1
    ckpt_every: int = 0
    # embedding unit
    heu_mode: str = "full"
    fusion: str = "low_q"
    sampling: str = "aggregate"
    t: int = 5
    layers: int = 0
    far_fraction: float = 0.7
    # synthetic benchmark (used when no --data is given)
    n_sequences: int = 8
    frames_per_sequence: int = 20
    points_per_frame: int = 2048
    churn: float = 0.5
    data_seed: int = 0
    train_sequences: str = ""
    val_sequences: str = ""

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {PRESETS}")

    @classmethod
    def for_preset(cls, name: str) -> "RunConfig":
        if name == "paper":
            return cls(preset="paper", iters=50_000)
        return cls(preset=name)

    def updated(self, values: dict[str, str | object]) -> "RunConfig":
        """Copy with overrides; string values are coerced to the field type."""
        known = {f.name: f for f in fields(self)}
        kw = {}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            kw[key] = _coerce(raw, type(getattr(self, key)), key)
        return replace(self, **kw)

    def model_config(self) -> ModelConfig:
        base = ModelConfig.paper() if self.preset == "paper" else ModelConfig.desk()
        heu = dict(mode=self.heu_mode, fusion=self.fusion, sampling=self.sampling, t=self.t,
                   far_fraction=self.far_fraction)
        if self.layers:
            heu["layers"] = self.layers
        return base.with_heu(**heu)

    def train_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iters, lr=self.lr, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, ema=self.ema, focal_gamma=self.focal_gamma,
                           class_weights=self.class_weights, loss=LossWeights(self.alpha, self.beta),
                           warmup=self.warmup, input_noise=self.input_noise,
                           use_unlabeled=self.use_unlabeled, seed=self.seed,
                           log_every=self.log_every, ckpt_every=self.ckpt_every)

    def scene_spec(self) -> SyntheticSceneSpec:
        return SyntheticSceneSpec(n_points=self.points_per_frame, n_frames=self.frames_per_sequence,
                                  churn=self.churn, seed=self.data_seed)


def _coerce(raw, kind: type, key: str):
    if not isinstance(raw, str):
        return kind(raw)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        return kind(raw.strip())
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected key=value, got {line!r}")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def load_config_file(path, base: RunConfig | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text(), str(path))
    preset = values.get("preset", base.preset if base else "desk")
    base = base if base is not None and base.preset == preset else RunConfig.for_preset(preset)
    return base.updated(values)
