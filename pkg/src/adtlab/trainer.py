"""Baseline pretraining, the adversarial fine-tuning loop, and Adam."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .adversarial import bind_bank, discriminator_hinge_loss, discriminator_score, ema_update, generator_adv_loss
from .autodiff import Tape
from .config import TrainConfig
from .data import Dataset2D, make_dataset, ring_mixture, shifted
from .inference import GradMode, build_path, run_inference
from .networks import Backbone, HeadBank, MLPGenerator, bind, init_backbone, init_generator, init_head_bank
from .schedules import NoiseSchedule, make_schedule

BACKBONE_SEED = 20240  # the frozen feature network is shared by every run
LABEL_DROPOUT = 0.1


class DivergenceError(FloatingPointError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}


# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, moments: AdamState, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """Bias-corrected Adam with decoupled weight decay (AdamW), in place on ``params``.

    Parameters missing from ``grads`` are left untouched.
    """
    b1, b2 = betas
    moments.t += 1
    c1 = 1.0 - b1**moments.t
    c2 = 1.0 - b2**moments.t
    for k, g in grads.items():
        if k not in moments.m:
            moments.m[k] = np.zeros_like(params[k])
            moments.v[k] = np.zeros_like(params[k])
        if moments.m[k].shape != params[k].shape:
            raise ValueError(f"moment shape mismatch for {k}")
        moments.m[k] = b1 * moments.m[k] + (1 - b1) * g
        moments.v[k] = b2 * moments.v[k] + (1 - b2) * g * g
        update = lr * (moments.m[k] / c1) / (np.sqrt(moments.v[k] / c2) + eps)
        if weight_decay:
            update = update + lr * weight_decay * params[k]
        params[k] = params[k] - update
    return params


# state


@dataclass
class TrainState:
    iteration: int
    generator: MLPGenerator
    bank: HeadBank | None
    backbone: Backbone
    opt_gen: AdamState
    opt_disc: AdamState
    rng: np.random.Generator
    gen_updates: int = 0


@lru_cache(maxsize=32)
def _schedule(kind: str, m: int) -> NoiseSchedule:
    return make_schedule(kind, m)


def schedule_for(cfg: TrainConfig) -> NoiseSchedule:
    return _schedule(cfg.schedule, cfg.m)


def is_flow(cfg: TrainConfig) -> bool:
    return cfg.sampler == "flow"


def datasets_for(cfg: TrainConfig, data_seed: int = 0):
    """(pretraining train set, fine-tuning train set, fine-tuning test set)."""
    if cfg.dataset == "gauss-mixture":
        base = ring_mixture()
        target = shifted(base) if cfg.data_shift else base
        pre = make_dataset("gauss-mixture", cfg.n_train, {"spec": base}, data_seed, "train")
        ft = make_dataset("gauss-mixture", cfg.n_train, {"spec": target}, data_seed + 1, "train")
        test = make_dataset("gauss-mixture", cfg.n_test, {"spec": target}, data_seed + 1, "test")
        return pre, ft, test
    pre = make_dataset(cfg.dataset, cfg.n_train, None, data_seed, "train")
    test = make_dataset(cfg.dataset, cfg.n_test, None, data_seed, "test")
    return pre, pre, test


def init_state(cfg: TrainConfig, d: int, n_classes: int, seed: int | None = None) -> TrainState:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    gen = init_generator(d, n_classes, rng, hidden=cfg.hidden, null_token=cfg.cfg_enabled)
    backbone = init_backbone(d, np.random.default_rng(BACKBONE_SEED))
    bank = None
    if cfg.heads != "none":
        bank = init_head_bank(rng, n_heads=len(backbone.taps), tau=cfg.ema_rate, scalar=cfg.heads == "scalar")
    return TrainState(0, gen, bank, backbone, AdamState(), AdamState(), rng)


def noised(sched: NoiseSchedule, x0, eps, idx):
    idx = np.asarray(idx)
    return sched.alpha[idx][:, None] * x0 + sched.sigma[idx][:, None] * eps


def diffusion_target(cfg: TrainConfig, x0, eps):
    return eps - x0 if is_flow(cfg) else eps


def diffusion_loss(tape: Tape, pred: int, target) -> int:
    """Mean squared error over every element (the one reduction used throughout)."""
    target = target if isinstance(target, (int, np.integer)) else tape.constant(target)
    return tape.mse(pred, target)


def _drop_labels(cond, gen: MLPGenerator, rng):
    if not gen.null_token:
        return cond
    drop = rng.random(cond.shape[0]) < LABEL_DROPOUT
    return np.where(drop, gen.null_index, cond)


# pretraining


def pretrain_step(state: TrainState, cfg: TrainConfig, batch, lr: float) -> float:
    sched = schedule_for(cfg)
    x0, cond = batch
    rng, gen = state.rng, state.generator
    n = x0.shape[0]
    idx = rng.integers(1, sched.m + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    cond = _drop_labels(cond, gen, rng)
    tape = Tape()
    nodes = bind(tape, gen.params, True, "gen.")
    pred = gen.forward(tape, nodes, tape.constant(noised(sched, x0, eps, idx)), sched.t[idx], gen.context(tape, nodes, cond))
    loss = diffusion_loss(tape, pred, diffusion_target(cfg, x0, eps))
    value = float(tape.value(loss))
    if not np.isfinite(value):
        raise DivergenceError(f"pretraining diverged at iteration {state.iteration + 1}")
    grads = {k.removeprefix("gen."): g for k, g in tape.grads_by_name(tape.backward(loss)).items()}
    adam_step(gen.params, grads, state.opt_gen, lr)
    state.iteration += 1
    return value


def pretrain(cfg: TrainConfig, dataset: Dataset2D, rng=None, iters=None, log_every=0) -> TrainState:
    """Standard denoising (or flow-matching) training of the base generator."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    state = init_state(cfg, dataset.points.shape[1], dataset.n_classes)
    if rng is not None:
        state.rng = rng
    iters = cfg.pretrain_iters if iters is None else iters
    for it in range(iters):
        loss = pretrain_step(state, cfg, dataset.batch(state.rng, cfg.batch), cfg.lr_pretrain)
        if log_every and (it + 1) % log_every == 0:
            print(f"pretrain {it + 1}/{iters} loss {loss:.4f}")
    state.iteration = 0
    state.opt_gen = AdamState()
    return state


def fresh_finetune_state(base: TrainState, cfg: TrainConfig) -> TrainState:
    """Copy base generator weights; new heads, optimizers and rng seeded by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    gen = MLPGenerator(
        base.generator.d, base.generator.n_classes, {k: v.copy() for k, v in base.generator.params.items()},
        base.generator.hidden, base.generator.temb_dim, base.generator.cond_dim, base.generator.null_token,
    )
    bank = None
    if cfg.heads != "none":
        bank = init_head_bank(rng, n_heads=len(base.backbone.taps), tau=cfg.ema_rate, scalar=cfg.heads == "scalar")
    return TrainState(0, gen, bank, base.backbone, AdamState(), AdamState(), rng)


# fine-tuning


def _warm(lr, it, warmup):
    return lr * min(1.0, it / warmup) if warmup > 0 else lr


def _check_partition(names, allowed_prefixes, what):
    bad = [k for k in names if not k.startswith(allowed_prefixes)]
    if bad:
        raise AssertionError(f"{what} gradient reached {bad}")


def adt_step(state: TrainState, cfg: TrainConfig, batch, rng=None, hooks=None):
    """One iteration of the adversarial fine-tuning loop.

    Per sample: draw s on {0..m}, noise x_0 to t_s, run the constrained path.
    Then a discriminator step on (x_0, detached x_hat_0), the EMA update, and
    on every ``gen_every``-th iteration a generator step on
    ``-sum_i D_i + lambda * |eps_bar - eps|^2``.
    """
    t0 = time.perf_counter()
    rng = state.rng if rng is None else rng
    sched = schedule_for(cfg)
    gen, bank = state.generator, state.bank
    x0, cond = batch
    n = x0.shape[0]
    it = state.iteration + 1
    gen_update = it % cfg.gen_every == 0
    use_disc = bank is not None

    starts = rng.integers(0, sched.m + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    x_init = noised(sched, x0, eps, starts)
    target = diffusion_target(cfg, x0, eps)
    metrics = {"iter": it, "s": float(starts.mean())}

    mode = GradMode(cfg.grad_mode)
    if use_disc:
        paths = [build_path(sched, int(s), mode, cfg.k_train_steps, rng, cfg.cfg_scale) for s in starts]
        tape = Tape() if gen_update else None
        res = run_inference(gen, x_init, paths, cond, sched, tape, cfg.sampler, swapped_sign=cfg.cfg_swapped_sign)
        if hooks is not None:
            hooks.append({"iter": it, "starts": starts, "paths": paths, "result": res})
        x_hat = res.tape.value(res.x0)
        metrics["loss_diff"] = float(np.mean((res.tape.value(res.eps_bar) - target) ** 2))

        # discriminator on a value copy of x_hat, then EMA
        dt = Tape()
        bound_nodes = bind_bank(dt, bank, True)
        real = discriminator_score(dt, bank, state.backbone, dt.constant(x0), x0, rng, cfg.aug_strength,
                                   "real", rotation=cfg.aug_rotation, bound=bound_nodes)
        fake = discriminator_score(dt, bank, state.backbone, dt.constant(x_hat), x0, rng, cfg.aug_strength,
                                   "fake", rotation=cfg.aug_rotation, bound=bound_nodes)
        ld = discriminator_hinge_loss(real, fake)
        metrics["loss_disc"] = float(dt.value(ld))
        if not np.isfinite(metrics["loss_disc"]):
            raise DivergenceError(f"discriminator loss non-finite at iteration {it}", metrics)
        dgrads = dt.grads_by_name(dt.backward(ld))
        if cfg.debug_grad_check:
            _check_partition(dgrads, ("head", "pred."), "discriminator")
        flat = bank.trainable()
        adam_step(flat, dgrads, state.opt_disc, _warm(cfg.lr_disc, it, cfg.warmup_disc), weight_decay=cfg.weight_decay)
        bank.load_trainable(flat)
        if not bank.scalar:
            ema_update(bank)
        metrics["score_real"] = [float(v) for v in real.values().mean(axis=1)]
        metrics["score_fake"] = [float(v) for v in fake.values().mean(axis=1)]
        metrics["degenerate_scores"] = int(real.degenerate.sum() + fake.degenerate.sum())
    else:
        tape = Tape() if gen_update else None

    metrics["loss_gen_adv"] = None
    metrics["grad_norm_theta"] = 0.0
    if gen_update:
        if use_disc:
            scores = discriminator_score(tape, bank, state.backbone, res.x0, x0, rng, cfg.aug_strength,
                                         "fake", trainable=False, rotation=cfg.aug_rotation)
            l_adv = generator_adv_loss(scores)
            l_diff = diffusion_loss(tape, res.eps_bar, target)
            loss = l_adv if cfg.lam == 0 else tape.add(l_adv, tape.scale(l_diff, cfg.lam))
            metrics["loss_gen_adv"] = float(tape.value(l_adv))
        else:
            nodes = bind(tape, gen.params, True, "gen.")
            c = _drop_labels(cond, gen, rng)
            pred = gen.forward(tape, nodes, tape.constant(x_init), sched.t[starts], gen.context(tape, nodes, c))
            loss = diffusion_loss(tape, pred, target)
            metrics["loss_diff"] = float(tape.value(loss))
        if not np.isfinite(tape.value(loss)):
            raise DivergenceError(f"generator loss non-finite at iteration {it}", metrics)
        grads = tape.grads_by_name(tape.backward(loss))
        if cfg.debug_grad_check:
            _check_partition(grads, ("gen.",), "generator")
        grads = {k.removeprefix("gen."): g for k, g in grads.items()}
        metrics["grad_norm_theta"] = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
        adam_step(gen.params, grads, state.opt_gen, _warm(cfg.lr_gen, it, cfg.warmup_gen), weight_decay=cfg.weight_decay)
        state.gen_updates += 1
    elif not use_disc:
        metrics["loss_diff"] = None

    state.iteration = it
    metrics["wall_ms"] = round(1000.0 * (time.perf_counter() - t0), 3)
    return state, metrics


def finetune(state: TrainState, cfg: TrainConfig, dataset: Dataset2D, iters=None, metrics_path=None, on_step=None):
    """Run ``iters`` fine-tuning iterations (default ``cfg.iters``); optionally append JSONL metrics."""
    iters = cfg.iters if iters is None else iters
    fh = open(metrics_path, "a") if metrics_path else None
    try:
        for _ in range(iters):
            batch = dataset.batch(state.rng, cfg.batch)
            state, metrics = adt_step(state, cfg, batch)
            if fh:
                fh.write(json.dumps(metrics) + "\n")
            if on_step:
                on_step(state, metrics)
    finally:
        if fh:
            fh.close()
    return state
