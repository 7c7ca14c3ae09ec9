"""Named config presets, evaluation, and the discriminator-only hinge curve."""

from __future__ import annotations

import numpy as np

from .config import TrainConfig
from .inference import sample
from .metrics import MetricsReport, report
from .trainer import TrainState, adt_step, finetune, fresh_finetune_state, schedule_for

PRESETS = {
    "adt": {},
    "ft": {"heads": "none"},
    "no-diff-loss": {"lam": 0.0},
    "drtune-backprop": {"grad_mode": "drtune"},
    "scalar-heads": {"heads": "scalar"},
}

EVAL_SEED = 10_007


def apply_preset(cfg: TrainConfig, preset: str) -> TrainConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return cfg.replace(**PRESETS[preset])


def generate(generator, cfg: TrainConfig, labels, seed: int = EVAL_SEED) -> np.ndarray:
    """Gradient-free samples from pure noise, one per label."""
    rng = np.random.default_rng(seed)
    x_T = rng.standard_normal((len(labels), generator.d))
    return sample(generator, schedule_for(cfg), cfg.sampler, x_T, labels, cfg.cfg_scale, cfg.cfg_swapped_sign)


def evaluate(generator, cfg: TrainConfig, test, seed: int = EVAL_SEED, max_mmd: int = 2000) -> MetricsReport:
    xs = generate(generator, cfg, test.labels, seed)
    return report(xs, test.labels, test.points, test.labels, max_mmd=max_mmd)


def ablation_run(preset: str, cfg: TrainConfig, seed: int, base: TrainState, train, test, metrics_path=None):
    """Fine-tune ``base`` under one preset and seed, then evaluate on ``test``.

    Returns (config used, fine-tuned state, report).
    """
    cfg = apply_preset(cfg, preset).replace(seed=seed)
    state = fresh_finetune_state(base, cfg)
    if preset == "ft" and state.bank is not None:
        raise AssertionError("ft preset must not build a discriminator")
    state = finetune(state, cfg, train, metrics_path=metrics_path)
    return cfg, state, evaluate(state.generator, cfg, test)


def hinge_curve(base: TrainState, cfg: TrainConfig, train, iters: int, seed: int) -> np.ndarray:
    """Discriminator hinge loss per iteration against a frozen generator with lambda = 0."""
    cfg = cfg.replace(lam=0.0, lr_gen=0.0, seed=seed)
    state = fresh_finetune_state(base, cfg)
    out = np.empty(iters)
    for k in range(iters):
        state, m = adt_step(state, cfg, train.batch(state.rng, cfg.batch))
        out[k] = m["loss_disc"]
    return out


def block_means(curve: np.ndarray, blocks: int) -> np.ndarray:
    return np.array([b.mean() for b in np.array_split(np.asarray(curve), blocks)])
