"""Noise schedules and abstract-sampler step coefficients.

Every reverse step is ``x_prev = a * x + b * pred`` where ``pred`` is the
noise prediction (diffusion) or velocity (flow).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VP_KINDS = ("linear-beta", "cosine")
KINDS = VP_KINDS + ("flow-linear",)

ALPHA_FLOOR = 1e-4
DEGENERATE_ALPHA = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    m: int
    alpha: np.ndarray  # (m + 1,), index 0 is clean data
    sigma: np.ndarray
    t: np.ndarray  # grid position in [0, 1], used for embeddings and flow steps

    @property
    def variance_preserving(self) -> bool:
        return self.kind in VP_KINDS


@dataclass(frozen=True)
class StepCoeffs:
    a: float
    b: float


def linear_beta_alpha_bar(beta_start=1e-4, beta_end=2e-2, base_steps=1000) -> np.ndarray:
    """Cumulative products of (1 - beta) with a leading 1 for t = 0."""
    betas = np.linspace(beta_start, beta_end, base_steps, dtype=np.float64)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def _cosine_alpha(t, s=0.008):
    f = np.cos((t + s) / (1.0 + s) * np.pi / 2.0)
    f0 = np.cos(s / (1.0 + s) * np.pi / 2.0)
    return np.clip(f / f0, 0.0, 1.0)


def make_schedule(kind: str, m: int, **params) -> NoiseSchedule:
    """Build a schedule on ``m + 1`` uniformly spaced grid points ``t_0 .. t_m``.

    linear-beta: ``beta_start``, ``beta_end``, ``base_steps`` (DDPM-style,
        alpha is the square root of the cumulative product).
    cosine: ``s`` offset; alpha floored at 1e-4 at the terminal point.
    flow-linear: alpha = 1 - t, sigma = t.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    if int(m) != m or m < 1:
        raise ValueError(f"path length m must be a positive integer, got {m}")
    m = int(m)
    if kind == "linear-beta":
        beta_start = float(params.get("beta_start", 1e-4))
        beta_end = float(params.get("beta_end", 2e-2))
        base = int(params.get("base_steps", 1000))
        if not (0.0 < beta_start < beta_end < 1.0):
            raise ValueError("linear-beta requires 0 < beta_start < beta_end < 1")
        if base < m:
            raise ValueError("base_steps must be at least m")
        abar = linear_beta_alpha_bar(beta_start, beta_end, base)
        idx = np.round(np.linspace(0, base, m + 1)).astype(int)
        alpha = np.sqrt(abar[idx])
        t = idx / base
    elif kind == "cosine":
        t = np.linspace(0.0, 1.0, m + 1)
        alpha = np.maximum(_cosine_alpha(t, float(params.get("s", 0.008))), ALPHA_FLOOR)
        alpha[0] = 1.0
    else:
        t = np.linspace(0.0, 1.0, m + 1)
        return NoiseSchedule(kind, m, 1.0 - t, t.copy(), t)
    if alpha[-1] < ALPHA_FLOOR:
        raise ValueError(f"terminal alpha {alpha[-1]:.3g} below floor {ALPHA_FLOOR}")
    sigma = np.sqrt(1.0 - alpha**2)
    return NoiseSchedule(kind, m, alpha, sigma, t)


def _check_index(sched: NoiseSchedule, i: int):
    if not 1 <= i <= sched.m:
        raise ValueError(f"step index {i} outside 1..{sched.m}")


def ddim_coeffs(sched: NoiseSchedule, i: int) -> StepCoeffs:
    """Deterministic DDIM step t_i -> t_{i-1}."""
    _check_index(sched, i)
    if not sched.variance_preserving:
        raise ValueError("DDIM coefficients need a variance-preserving schedule")
    al, al_prev = sched.alpha[i], sched.alpha[i - 1]
    if al < DEGENERATE_ALPHA:
        raise ValueError(f"alpha at step {i} is degenerate ({al:.3g})")
    a = al_prev / al
    return StepCoeffs(float(a), float(sched.sigma[i - 1] - a * sched.sigma[i]))


def dpm_coeffs(sched: NoiseSchedule, i: int) -> StepCoeffs:
    """First-order DPM-Solver++ step written through the half-log-SNR gap.

    With lambda = log(alpha / sigma) and h = lambda_{i-1} - lambda_i:
    x_prev = (sigma_prev / sigma) x + alpha_prev (1 - e^{-h}) x0_pred, and
    x0_pred = (x - sigma eps) / alpha.
    """
    _check_index(sched, i)
    if not sched.variance_preserving:
        raise ValueError("DPM-Solver coefficients need a variance-preserving schedule")
    al, al_prev = sched.alpha[i], sched.alpha[i - 1]
    sg, sg_prev = sched.sigma[i], sched.sigma[i - 1]
    if al < DEGENERATE_ALPHA:
        raise ValueError(f"alpha at step {i} is degenerate ({al:.3g})")
    with np.errstate(divide="ignore"):
        lam = np.log(al) - np.log(sg)
        lam_prev = np.log(al_prev) - np.log(sg_prev)
    h = lam_prev - lam
    decay = np.exp(-h)  # 0 at the clean endpoint where lambda is +inf
    ratio = sg_prev / sg
    x0_weight = al_prev * (1.0 - decay) / al
    a = ratio + x0_weight
    b = -x0_weight * sg
    return StepCoeffs(float(a), float(b))


def flow_coeffs(sched: NoiseSchedule, i: int) -> StepCoeffs:
    """Euler step on the linear interpolant: a = 1, b = -(t_i - t_{i-1})."""
    _check_index(sched, i)
    return StepCoeffs(1.0, float(-(sched.t[i] - sched.t[i - 1])))


SAMPLERS = {"ddim": ddim_coeffs, "dpm1": dpm_coeffs, "flow": flow_coeffs}


def step_coeffs(sampler: str, sched: NoiseSchedule, i: int) -> StepCoeffs:
    try:
        fn = SAMPLERS[sampler]
    except KeyError:
        raise ValueError(f"unknown sampler {sampler!r}") from None
    if (sampler == "flow") != (sched.kind == "flow-linear"):
        raise ValueError(f"sampler {sampler!r} is incompatible with schedule {sched.kind!r}")
    return fn(sched, i)


def coeff_table(sampler: str, sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Arrays a[i], b[i] for i = 0..m; index 0 is the identity step (a=1, b=0)."""
    a = np.ones(sched.m + 1)
    b = np.zeros(sched.m + 1)
    for i in range(1, sched.m + 1):
        c = step_coeffs(sampler, sched, i)
        a[i], b[i] = c.a, c.b
    return a, b
