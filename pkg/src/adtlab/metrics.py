"""Distribution distances: Gaussian Frechet distance (gFID) and unbiased MMD."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

RIDGE = 1e-8


@dataclass
class MetricsReport:
    mmd: float
    gfid: float
    n_samples: int
    per_condition: dict = field(default_factory=dict)
    ridge_applied: bool = False
    gfid_bias_floor: float | None = None  # gFID between two test halves, same n
    gfid_cond: float | None = None  # mean of the per-condition gFIDs

    def to_dict(self):
        return asdict(self)


def _moments(x):
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=0), np.cov(x, rowvar=False)


def frechet_gaussian(mu1, cov1, mu2, cov2) -> tuple[float, bool]:
    """``|mu1 - mu2|^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2))``; returns (value, ridge flag)."""
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    ridged = False
    covmean, _ = linalg.sqrtm(cov1 @ cov2, disp=False)
    if not np.all(np.isfinite(covmean)) or min(np.linalg.eigvalsh(cov1).min(), np.linalg.eigvalsh(cov2).min()) <= 0:
        ridged = True
        eye = RIDGE * np.eye(cov1.shape[0])
        covmean, _ = linalg.sqrtm((cov1 + eye) @ (cov2 + eye), disp=False)
    covmean = np.real(covmean)
    diff = np.asarray(mu1) - np.asarray(mu2)
    val = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean))
    return max(val, 0.0), ridged


def gaussian_fid(a, b, return_flag: bool = False):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise ValueError(f"gaussian_fid needs at least d + 1 = {d + 1} samples per set")
    val, flag = frechet_gaussian(*_moments(a), *_moments(b))
    return (val, flag) if return_flag else val


def _gauss_kernel(x, y, bandwidth):
    diff = x[:, None, :] - y[None, :, :]
    return np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * bandwidth**2))


def median_bandwidth(a, b) -> float:
    pooled = np.concatenate([np.asarray(a), np.asarray(b)])
    if pooled.shape[0] > 2000:
        pooled = pooled[np.linspace(0, pooled.shape[0] - 1, 2000).astype(int)]
    diff = pooled[:, None, :] - pooled[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    med = np.median(np.sqrt(d2[np.triu_indices_from(d2, k=1)]))
    return float(med) if med > 0 else 1.0


def mmd(a, b, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel (median heuristic if no bandwidth).

    Sums use ``math.fsum`` so the result does not depend on summation order.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if bandwidth is None:
        bandwidth = median_bandwidth(a, b)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    m, n = a.shape[0], b.shape[0]
    kxx, kyy, kxy = _gauss_kernel(a, a, bandwidth), _gauss_kernel(b, b, bandwidth), _gauss_kernel(a, b, bandwidth)
    np.fill_diagonal(kxx, 0.0)
    np.fill_diagonal(kyy, 0.0)
    sxx = math.fsum(kxx.ravel()) / (m * (m - 1))
    syy = math.fsum(kyy.ravel()) / (n * (n - 1))
    sxy = math.fsum(kxy.ravel()) / (m * n)
    return sxx + syy - 2.0 * sxy


def report(samples, labels, reference, ref_labels, max_mmd: int = 2000) -> MetricsReport:
    """gFID and MMD overall and per condition; MMD subsamples to ``max_mmd`` points."""
    samples, reference = np.asarray(samples), np.asarray(reference)
    g, flag = gaussian_fid(samples, reference, return_flag=True)
    sub_s = samples[: max_mmd]
    sub_r = reference[: max_mmd]
    per = {}
    for c in np.unique(ref_labels):
        s_c, r_c = samples[labels == c], reference[ref_labels == c]
        if s_c.shape[0] > s_c.shape[1] and r_c.shape[0] > r_c.shape[1]:
            per[int(c)] = {"gfid": gaussian_fid(s_c, r_c), "n": int(s_c.shape[0])}
    half = reference.shape[0] // 2
    floor = gaussian_fid(reference[:half], reference[half:]) if half > reference.shape[1] else None
    cond = float(np.mean([v["gfid"] for v in per.values()])) if per else None
    return MetricsReport(mmd(sub_s, sub_r), g, int(samples.shape[0]), per, flag, floor, cond)


def conditional_gfid(samples, labels, reference, ref_labels) -> float:
    """Mean over conditions of the per-condition gFID."""
    vals = [gaussian_fid(samples[labels == c], reference[ref_labels == c]) for c in np.unique(ref_labels)]
    return float(np.mean(vals))
