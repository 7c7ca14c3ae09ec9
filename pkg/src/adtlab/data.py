"""Synthetic conditional datasets: Gaussian mixtures and a swiss roll."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPLITS = ("train", "test")


@dataclass
class MixtureSpec:
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    weights: np.ndarray | None = None

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class Dataset2D:
    points: np.ndarray
    labels: np.ndarray
    spec: object
    split: str = "train"
    n_classes: int = field(default=0)

    def __len__(self):
        return self.points.shape[0]

    def batch(self, rng: np.random.Generator, size: int):
        idx = rng.integers(0, len(self), size=size)
        return self.points[idx], self.labels[idx]


def ring_mixture(n_components=8, radius=2.0, std=0.2, d=2, rotation_deg=0.0, cov_scale=1.0) -> MixtureSpec:
    """Components evenly spaced on a circle in the first coordinate plane.

    ``rotation_deg`` rotates the means and ``cov_scale`` multiplies every
    covariance; together they produce the shifted target mixture.
    """
    if d not in (2, 8):
        raise ValueError("d must be 2 or 8")
    ang = 2 * np.pi * np.arange(n_components) / n_components + np.deg2rad(rotation_deg)
    means = np.zeros((n_components, d))
    means[:, 0], means[:, 1] = radius * np.cos(ang), radius * np.sin(ang)
    covs = np.broadcast_to(np.eye(d) * std**2 * cov_scale, (n_components, d, d)).copy()
    return MixtureSpec(means, covs)


def shifted(spec: MixtureSpec, rotation_deg=30.0, cov_scale=0.5) -> MixtureSpec:
    """Rotate means in the first coordinate plane and scale covariances."""
    th = np.deg2rad(rotation_deg)
    rot = np.eye(spec.dim)
    rot[:2, :2] = [[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]
    return MixtureSpec(spec.means @ rot.T, spec.covs * cov_scale, spec.weights)


def _split_rng(seed: int, split: str) -> np.random.Generator:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    child = np.random.SeedSequence(seed).spawn(len(SPLITS))[SPLITS.index(split)]
    return np.random.default_rng(child)


def sample_mixture(spec: MixtureSpec, n: int, rng: np.random.Generator, labels=None):
    k = spec.n_components
    if labels is None:
        w = np.full(k, 1.0 / k) if spec.weights is None else np.asarray(spec.weights)
        labels = rng.choice(k, size=n, p=w)
    labels = np.asarray(labels, dtype=int)
    chol = np.linalg.cholesky(spec.covs)
    z = rng.standard_normal((n, spec.dim))
    pts = spec.means[labels] + np.einsum("nij,nj->ni", chol[labels], z)
    return pts, labels


def make_dataset(kind: str, n: int, params: dict | None = None, seed: int = 0, split: str = "train") -> Dataset2D:
    """Deterministic per (seed, split); train and test come from disjoint seed streams."""
    params = dict(params or {})
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _split_rng(seed, split)
    if kind == "gauss-mixture":
        spec = params.pop("spec", None)
        if spec is None:
            spec = ring_mixture(**params)
        pts, labels = sample_mixture(spec, n, rng)
        return Dataset2D(pts, labels, spec, split, spec.n_components)
    if kind == "swiss-roll":
        noise = float(params.get("noise", 0.05))
        buckets = int(params.get("buckets", 8))
        if noise < 0 or buckets < 1:
            raise ValueError("invalid swiss-roll params")
        u = rng.uniform(0.0, 1.0, size=n)
        t = 1.5 * np.pi * (1 + 2 * u)
        pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / 5.0
        pts += noise * rng.standard_normal(pts.shape)
        labels = np.minimum((u * buckets).astype(int), buckets - 1)
        return Dataset2D(pts, labels, {"noise": noise, "buckets": buckets}, split, buckets)
    raise ValueError(f"unknown dataset kind {kind!r}")
