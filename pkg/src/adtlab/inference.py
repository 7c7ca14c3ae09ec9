"""Inference paths, gradient-control regimes, CFG, and the constrained inference loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import Tape
from .networks import bind
from .schedules import NoiseSchedule, StepCoeffs, coeff_table


class GradMode(str, Enum):
    FULL = "full"
    DRTUNE = "drtune"
    ADT = "adt"
    NO_GRAD = "no_grad"


@dataclass(frozen=True)
class InferencePath:
    timesteps: tuple  # grid indices s, s-1, ..., 0
    start: int
    trainable_set: frozenset
    grad_mode: GradMode = GradMode.ADT
    cfg_scale: float = 1.0

    def __post_init__(self):
        if self.grad_mode == GradMode.NO_GRAD and self.trainable_set:
            raise ValueError("NO_GRAD paths carry an empty trainable set")


def build_path(sched: NoiseSchedule, s: int, grad_mode=GradMode.ADT, K: int = 3, rng=None, cfg_scale=1.0):
    """Path t_s -> t_0 with a trainable subset of size min(K, s).

    The subset is drawn uniformly without replacement from t_{s-1}..t_1. When
    s <= K there are fewer than min(K, s) such steps; then every step
    t_s..t_1 is trainable (t_s already carries gradient as the start step).
    """
    grad_mode = GradMode(grad_mode)
    if not 0 <= s <= sched.m:
        raise ValueError(f"start index {s} outside 0..{sched.m}")
    if K < 0:
        raise ValueError("K must be >= 0")
    steps = tuple(range(s, -1, -1))
    if grad_mode == GradMode.NO_GRAD:
        return InferencePath(steps, s, frozenset(), grad_mode, cfg_scale)
    k = min(K, s)
    pool = np.arange(1, s)
    if k > pool.size:
        chosen = set(range(1, s + 1))
    else:
        rng = rng if rng is not None else np.random.default_rng()
        chosen = {int(v) for v in rng.choice(pool, size=k, replace=False)} if k else set()
    return InferencePath(steps, s, frozenset(chosen), grad_mode, cfg_scale)


def cfg_combine(tape: Tape, eps_uncond: int, eps_cond: int, gamma: float, swapped_sign: bool = False) -> int:
    """Guided prediction.

    Default: ``(1 - gamma) * uncond + gamma * cond`` (equal inputs are a fixed
    point for every gamma). ``swapped_sign=True``: ``(gamma - 1) * uncond + gamma * cond``.
    """
    if tape.shape(eps_uncond) != tape.shape(eps_cond):
        raise ValueError(f"cfg_combine: shapes {tape.shape(eps_uncond)} and {tape.shape(eps_cond)}")
    w_u = (gamma - 1.0) if swapped_sign else (1.0 - gamma)
    return tape.add(tape.scale(eps_uncond, w_u), tape.scale(eps_cond, gamma))


def sampler_step(tape: Tape, x: int, eps_hat: int, coeffs: StepCoeffs, regime) -> int:
    """One abstract step ``a x + b eps``, evaluated as ``x + (a-1) x' + b eps``.

    ADT passes ``x' = sg(x)``, which makes the latent Jacobian the identity.
    FULL and DRTUNE pass ``x' = x`` (DRTUNE differs only in the predictor
    input, handled by :func:`run_inference`). Forward values agree bitwise.
    """
    regime = GradMode(regime)
    if regime == GradMode.ADT:
        lin = tape.stop_gradient(x)
    elif regime in (GradMode.FULL, GradMode.DRTUNE):
        lin = x
    else:
        raise ValueError(f"sampler_step does not handle regime {regime}")
    return tape.affine_combine(x, lin, eps_hat, coeffs.a, coeffs.b)


def flow_euler_step(tape: Tape, x: int, v_hat: int, t_k: float, t_km1: float) -> int:
    """``x - (t_k - t_km1) v``. The linear coefficient is 1, so no extra blocking."""
    if not 0.0 <= t_km1 < t_k <= 1.0:
        raise ValueError(f"flow step needs 0 <= t_km1 < t_k <= 1, got {t_k} -> {t_km1}")
    return tape.affine_combine(x, x, v_hat, 1.0, -(t_k - t_km1))


@dataclass
class InferenceResult:
    x0: int
    eps_bar: int
    tape: Tape
    latents: dict = field(default_factory=dict)  # step index i -> node for x_{t_i}
    trace: list = field(default_factory=list)  # per step: (i, per-row mode labels)
    start_evals: np.ndarray | None = None  # per-row count of start-step predictor calls


def _mix(tape, mask_rows: np.ndarray, grad: int, frozen: int) -> int:
    """Row-wise select: rows where mask is true take ``grad``, others ``frozen``."""
    if mask_rows.all():
        return grad
    if not mask_rows.any():
        return frozen
    m = np.broadcast_to(mask_rows[:, None].astype(np.float64), tape.shape(grad))
    return tape.add(tape.mul(tape.constant(m), grad), tape.mul(tape.constant(1.0 - m), frozen))


def predict_eps(tape, generator, nodes, x, t, ctx, ctx_null, cfg_scale, swapped_sign=False):
    eps = generator.forward(tape, nodes, x, t, ctx)
    if cfg_scale == 1.0 or ctx_null is None:
        return eps
    return cfg_combine(tape, generator.forward(tape, nodes, x, t, ctx_null), eps, cfg_scale, swapped_sign)


def run_inference(
    generator,
    x_init,
    paths,
    cond,
    sched: NoiseSchedule,
    tape: Tape | None = None,
    sampler: str = "ddim",
    params: dict | None = None,
    nodes: dict | None = None,
    swapped_sign: bool = False,
) -> InferenceResult:
    """Batched reverse inference following the constrained training loop.

    ``paths`` is one InferencePath (shared by all rows) or one per row. Per
    row: at t_s the predictor sees the raw latent and its output is kept as
    ``eps_bar``; at trainable steps the input is stop-gradient wrapped; other
    steps are fully stop-gradient wrapped. Each step is the fused
    ``x + (a-1) sg(x) + b eps`` node under ADT. With ``tape=None`` the pass is
    gradient-free. Rows with s = 0 return x_init and ``eps_bar`` from a single
    predictor call at t_0.
    """
    given_node = isinstance(x_init, (int, np.integer))
    if given_node and tape is None:
        raise ValueError("x_init given as a node requires its tape")
    x_vals = tape.value(x_init) if given_node else np.asarray(x_init, dtype=np.float64)
    n = x_vals.shape[0]
    if isinstance(paths, InferencePath):
        paths = [paths] * n
    if len(paths) != n:
        raise ValueError(f"{len(paths)} paths for {n} rows")
    mode = paths[0].grad_mode
    if any(p.grad_mode != mode for p in paths):
        raise ValueError("all rows must share one gradient mode")
    cfg_scale = paths[0].cfg_scale
    cond = generator.check_cond(np.broadcast_to(np.asarray(cond, dtype=int), (n,)))

    grad_free = tape is None or mode == GradMode.NO_GRAD
    if tape is None:
        tape = Tape()
    params = generator.params if params is None else params
    if nodes is None:
        nodes = bind(tape, params, trainable=not grad_free, prefix="gen.")
    ctx = generator.context(tape, nodes, cond)
    ctx_null = None
    if cfg_scale != 1.0:
        ctx_null = generator.context(tape, nodes, np.full(n, generator.null_index))

    starts = np.array([p.start for p in paths])
    a_tab, b_tab = coeff_table(sampler, sched)
    x = x_start = x_init if given_node else tape.constant(x_vals)
    result = InferenceResult(x0=x, eps_bar=-1, tape=tape, start_evals=np.zeros(n, dtype=int))
    eps_bar = None

    def eval_step(i, x, input_grad, output_grad):
        inp = _mix(tape, input_grad, x, tape.stop_gradient(x)) if not grad_free else x
        eps = predict_eps(tape, generator, nodes, inp, sched.t[i], ctx, ctx_null, cfg_scale, swapped_sign)
        if grad_free:
            return eps
        return _mix(tape, output_grad, eps, tape.stop_gradient(eps))

    for i in range(int(starts.max()), 0, -1):
        result.latents[i] = x
        active = starts >= i
        is_start = starts == i
        in_set = np.array([i in p.trainable_set for p in paths]) & active & ~is_start
        if mode == GradMode.FULL:
            input_grad, output_grad = active, active
        else:
            input_grad, output_grad = is_start, is_start | in_set
        labels = np.where(is_start, "start", np.where(in_set, "train", np.where(active, "frozen", "idle")))
        result.trace.append((i, labels))
        result.start_evals += is_start

        eps = eval_step(i, x, input_grad, output_grad)
        a = np.where(active, a_tab[i], 1.0)
        b = np.where(active, b_tab[i], 0.0)
        lin = tape.stop_gradient(x) if mode == GradMode.ADT else x
        x = tape.affine_combine(x, lin, eps, a, b)
        if not np.all(np.isfinite(tape.value(x))):
            raise FloatingPointError(f"non-finite latent after step {i}")

        if is_start.any():
            part = _mix(tape, is_start, eps, tape.constant(np.zeros(tape.shape(eps))))
            eps_bar = part if eps_bar is None else tape.add(eps_bar, part)

    zero_start = starts == 0
    if zero_start.any():
        eps0 = eval_step(0, x_start, zero_start, zero_start)
        result.start_evals += zero_start
        part = _mix(tape, zero_start, eps0, tape.constant(np.zeros(tape.shape(eps0))))
        eps_bar = part if eps_bar is None else tape.add(eps_bar, part)

    result.latents[0] = x
    result.x0 = x
    result.eps_bar = eps_bar
    return result


def sample(generator, sched, sampler, x_T, cond, cfg_scale=1.0, swapped_sign=False):
    """Gradient-free full-path sampling from pure noise; returns an array."""
    path = build_path(sched, sched.m, GradMode.NO_GRAD, 0, cfg_scale=cfg_scale)
    res = run_inference(generator, x_T, path, cond, sched, None, sampler, swapped_sign=swapped_sign)
    return res.tape.value(res.x0)
