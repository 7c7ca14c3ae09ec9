"""Training configuration and its flat key/value file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SAMPLER_SCHEDULE = {"ddim": ("linear-beta", "cosine"), "dpm1": ("linear-beta", "cosine"), "flow": ("flow-linear",)}

# file key -> attribute name, where they differ
ALIASES = {"lambda": "lam"}


@dataclass
class TrainConfig:
    lam: float = 0.5
    gen_every: int = 5
    k_train_steps: int = 3
    ema_rate: float = 0.99
    lr_gen: float = 1e-4
    lr_disc: float = 1e-4
    weight_decay: float = 0.0
    cfg_scale: float = 1.0
    cfg_swapped_sign: bool = False
    sampler: str = "ddim"
    schedule: str = "linear-beta"
    m: int = 10
    batch: int = 128
    iters: int = 2000
    seed: int = 0
    aug_strength: float = 0.05
    aug_rotation: float = 0.1
    warmup_disc: int = 100
    warmup_gen: int = 50
    grad_mode: str = "adt"  # adt | drtune | full
    heads: str = "siamese"  # siamese | scalar | none
    hidden: int = 128
    pretrain_iters: int = 5000
    lr_pretrain: float = 2e-3
    dataset: str = "gauss-mixture"
    n_train: int = 20000
    n_test: int = 10000
    data_shift: bool = True  # fine-tune on the rotated / narrowed mixture
    debug_grad_check: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.gen_every < 1:
            raise ValueError("gen_every must be >= 1")
        if self.k_train_steps < 0:
            raise ValueError("k_train_steps must be >= 0")
        if not 0.0 <= self.ema_rate <= 1.0:
            raise ValueError("ema_rate must be in [0, 1]")
        if self.lr_gen < 0 or self.lr_disc < 0 or self.lr_pretrain < 0:
            raise ValueError("learning rates must be >= 0")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if self.sampler not in SAMPLER_SCHEDULE:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.schedule not in SAMPLER_SCHEDULE[self.sampler]:
            raise ValueError(f"sampler {self.sampler!r} cannot run on schedule {self.schedule!r}")
        if self.m < 1 or self.batch < 1 or self.iters < 0:
            raise ValueError("m and batch must be >= 1, iters >= 0")
        if self.grad_mode not in ("adt", "drtune", "full"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.heads not in ("siamese", "scalar", "none"):
            raise ValueError(f"unknown heads {self.heads!r}")
        if self.aug_strength < 0 or self.aug_rotation < 0:
            raise ValueError("augmentation settings must be >= 0")

    @property
    def cfg_enabled(self) -> bool:
        return self.cfg_scale != 1.0

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **{ALIASES.get(k, k): v for k, v in changes.items()})

    def to_dict(self) -> dict:
        inverse = {v: k for k, v in ALIASES.items()}
        return {inverse.get(f.name, f.name): getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            name = ALIASES.get(key, key)
            if name not in known or key in ALIASES.values():
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(value, dict):
                raise ValueError(f"config is flat; key {key!r} holds a table")
            kwargs[name] = _coerce(known[name], value)
        return cls(**kwargs)

    def dumps(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, str):
                text = f'"{value}"'
            else:
                text = repr(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def _coerce(f: dataclasses.Field, value):
    kind = type(f.default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ValueError(f"{f.name} expects true/false")
        return value
    if kind is int:
        if isinstance(value, bool) or int(value) != value:
            raise ValueError(f"{f.name} expects an integer")
        return int(value)
    if kind is float:
        return float(value)
    return str(value)


def load_config(path, **overrides) -> TrainConfig:
    raw = tomllib.loads(Path(path).read_text())
    cfg = TrainConfig.from_dict(raw)
    return cfg.replace(**overrides) if overrides else cfg


def save_config(cfg: TrainConfig, path):
    Path(path).write_text(cfg.dumps())
