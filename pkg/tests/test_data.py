import numpy as np
import pytest

from adtlab.data import MixtureSpec, make_dataset, ring_mixture, shifted


def test_single_component_mean_clt():
    spec = MixtureSpec(np.zeros((1, 2)), np.eye(2)[None])
    n = 100_000
    ds = make_dataset("gauss-mixture", n, {"spec": spec}, seed=3)
    assert np.all(np.abs(ds.points.mean(axis=0)) <= 3 / np.sqrt(n))


def test_same_seed_same_data():
    a = make_dataset("gauss-mixture", 500, {}, seed=9)
    b = make_dataset("gauss-mixture", 500, {}, seed=9)
    assert a.points.tobytes() == b.points.tobytes() and np.array_equal(a.labels, b.labels)


def test_splits_differ():
    a = make_dataset("gauss-mixture", 500, {}, seed=9, split="train")
    b = make_dataset("gauss-mixture", 500, {}, seed=9, split="test")
    assert not np.array_equal(a.points, b.points)
    with pytest.raises(ValueError):
        make_dataset("gauss-mixture", 5, {}, split="valid")


def test_all_components_present():
    # coupon collector: 8 labels at n = 1000 miss one with probability < 8 (7/8)^1000
    ds = make_dataset("gauss-mixture", 1000, {"n_components": 8}, seed=0)
    assert set(np.unique(ds.labels)) == set(range(8))


def test_shifted_mixture_geometry():
    base = ring_mixture()
    tgt = shifted(base, 30.0, 0.5)
    ang = np.arctan2(tgt.means[:, 1], tgt.means[:, 0]) - np.arctan2(base.means[:, 1], base.means[:, 0])
    np.testing.assert_allclose(np.mod(ang, 2 * np.pi), np.deg2rad(30.0), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(tgt.means, axis=1), 2.0, rtol=1e-12)
    np.testing.assert_allclose(tgt.covs, 0.5 * base.covs)


def test_eight_dimensional_ring():
    ds = make_dataset("gauss-mixture", 200, {"d": 8}, seed=0)
    assert ds.points.shape == (200, 8)
    with pytest.raises(ValueError):
        ring_mixture(d=3)


def test_swiss_roll_labels_follow_arc():
    ds = make_dataset("swiss-roll", 2000, {"noise": 0.0, "buckets": 4}, seed=1)
    assert set(np.unique(ds.labels)) == {0, 1, 2, 3}
    r = np.linalg.norm(ds.points, axis=1)
    means = [r[ds.labels == k].mean() for k in range(4)]
    assert means == sorted(means)
    with pytest.raises(ValueError):
        make_dataset("swiss-roll", 10, {"noise": -1})


def test_rejects_bad_kind_and_size():
    with pytest.raises(ValueError):
        make_dataset("moons", 10)
    with pytest.raises(ValueError):
        make_dataset("gauss-mixture", 0)


def test_batch_draws_rows():
    ds = make_dataset("gauss-mixture", 50, {}, seed=0)
    x, y = ds.batch(np.random.default_rng(0), 7)
    assert x.shape == (7, 2) and y.shape == (7,)
    rows = {tuple(p) for p in ds.points}
    assert all(tuple(p) in rows for p in x)
