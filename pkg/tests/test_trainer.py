import json

import numpy as np
import pytest

from adtlab.checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from adtlab.config import TrainConfig
from adtlab.data import make_dataset, ring_mixture
from adtlab.trainer import (
    AdamState,
    adam_step,
    adt_step,
    finetune,
    fresh_finetune_state,
    init_state,
    pretrain,
    pretrain_step,
)

SMALL = dict(hidden=16, batch=16, m=6, iters=20, warmup_disc=5, warmup_gen=2, n_train=400, n_test=200)


def small_cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def data():
    return make_dataset("gauss-mixture", 400, {"spec": ring_mixture()}, 0, "train")


def base_state(cfg, data):
    st = init_state(cfg, 2, data.n_classes)
    # non-zero output layer so gradients reach every generator tensor
    st.generator.params["w3"] = np.random.default_rng(3).normal(0, 0.1, st.generator.params["w3"].shape)
    return fresh_finetune_state(st, cfg)


# Adam


def test_adam_first_step_closed_form():
    g = np.array([0.5, -2.0, 1e-3])
    p = {"w": np.array([1.0, 1.0, 1.0])}
    adam_step(p, {"w": g}, AdamState(), lr=0.1, eps=1e-8)
    # fresh moments: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"], 1.0 - 0.1 * g / (np.abs(g) + 1e-8), rtol=1e-15)


def test_adam_second_step_closed_form():
    g1, g2 = np.array([1.0]), np.array([-3.0])
    p = {"w": np.zeros(1)}
    st = AdamState()
    adam_step(p, {"w": g1}, st, lr=0.01)
    adam_step(p, {"w": g2}, st, lr=0.01)
    m = (0.9 * 0.1 * g1 + 0.1 * g2) / (1 - 0.9**2)
    v = (0.999 * 0.001 * g1**2 + 0.001 * g2**2) / (1 - 0.999**2)
    expect = -0.01 * g1 / (1 + 1e-8) - 0.01 * m / (np.sqrt(v) + 1e-8)
    np.testing.assert_allclose(p["w"], expect, rtol=1e-12)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([0.3, -0.2])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.5)
    np.testing.assert_array_equal(p["w"], [0.3, -0.2])


def test_adam_decoupled_weight_decay():
    p = {"w": np.array([2.0])}
    adam_step(p, {"w": np.zeros(1)}, AdamState(), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(p["w"], 2.0 - 0.1 * 0.5 * 2.0)


def test_adam_rejects_shape_mismatch():
    st = AdamState(m={"w": np.zeros(3)}, v={"w": np.zeros(3)})
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.ones(2)}, st, lr=0.1)


# pretraining


def test_initial_pretraining_loss_is_data_dimension(data):
    cfg = small_cfg(batch=4000)
    st = init_state(cfg, 2, data.n_classes)
    big = make_dataset("gauss-mixture", 4000, {"spec": ring_mixture()}, 1, "train")
    loss = pretrain_step(st, cfg, (big.points, big.labels), lr=0.0)
    # zero output layer: loss is the mean of 8000 squared standard normals (variance 2 each)
    assert abs(loss - 1.0) <= 3 * np.sqrt(2.0 / 8000)


def test_initial_flow_pretraining_loss(data):
    cfg = small_cfg(batch=4000, sampler="flow", schedule="flow-linear")
    st = init_state(cfg, 2, data.n_classes)
    big = make_dataset("gauss-mixture", 4000, {"spec": ring_mixture()}, 1, "train")
    loss = pretrain_step(st, cfg, (big.points, big.labels), lr=0.0)
    # target eps - x0, averaged over coordinates: (d + E|x0|^2) / d
    expect = (2.0 + np.mean(np.sum(big.points**2, axis=1))) / 2
    assert loss == pytest.approx(expect, rel=0.05)


def test_pretraining_reduces_loss(data):
    cfg = small_cfg(pretrain_iters=150, lr_pretrain=5e-3, batch=64)
    st = init_state(cfg, 2, data.n_classes)
    first = pretrain_step(st, cfg, data.batch(np.random.default_rng(0), 256), 0.0)
    st = pretrain(cfg, data)
    st.rng = np.random.default_rng(0)
    after = pretrain_step(st, cfg, data.batch(np.random.default_rng(0), 256), 0.0)
    assert after < 0.8 * first


def test_pretrain_rejects_empty():
    empty = make_dataset("gauss-mixture", 5, {"spec": ring_mixture()}, 0, "train")
    empty.points, empty.labels = empty.points[:0], empty.labels[:0]
    with pytest.raises(ValueError):
        pretrain(small_cfg(), empty)


# the fine-tuning loop


def _run_with_hooks(cfg, data, iters):
    st = base_state(cfg, data)
    hooks, history = [], []
    for _ in range(iters):
        before = {k: v.copy() for k, v in st.generator.params.items()}
        st, metrics = adt_step(st, cfg, data.batch(st.rng, cfg.batch), hooks=hooks)
        changed = any(not np.array_equal(before[k], v) for k, v in st.generator.params.items())
        history.append((metrics, changed))
    return st, hooks, history


def test_generator_cadence_and_path_contract(data):
    cfg = small_cfg(gen_every=5, k_train_steps=3, debug_grad_check=True)
    st, hooks, history = _run_with_hooks(cfg, data, 100)
    changed = [m["iter"] for m, c in history if c]
    assert changed == list(range(5, 101, 5))
    assert st.gen_updates == 20
    for h in hooks:
        for s, p in zip(h["starts"], h["paths"]):
            assert len(p.trainable_set) == min(3, int(s))
        np.testing.assert_array_equal(h["result"].start_evals, 1)


def test_ema_follows_heads(data):
    cfg = small_cfg(ema_rate=0.99)
    st = base_state(cfg, data)
    for _ in range(5):
        prev = [{k: v.copy() for k, v in d.items()} for d in st.bank.dual]
        st, _ = adt_step(st, cfg, data.batch(st.rng, cfg.batch))
        for d_prev, d_now, h in zip(prev, st.bank.dual, st.bank.heads):
            for k in d_now:
                np.testing.assert_allclose(d_now[k], 0.99 * d_prev[k] + 0.01 * h[k], rtol=1e-12, atol=1e-15)


def test_ema_geometric_decay_with_frozen_heads(data):
    cfg = small_cfg(ema_rate=0.99, lr_disc=0.0)
    st = base_state(cfg, data)
    st.bank.heads[0]["b1"] = st.bank.heads[0]["b1"] + 1.0
    gap0 = st.bank.dual[0]["b1"] - st.bank.heads[0]["b1"]
    for k in range(1, 31):
        st, _ = adt_step(st, cfg, data.batch(st.rng, cfg.batch))
        gap = st.bank.dual[0]["b1"] - st.bank.heads[0]["b1"]
        np.testing.assert_allclose(gap, 0.99**k * gap0, rtol=1e-9)


def test_metrics_record_fields(data):
    cfg = small_cfg(gen_every=2)
    st = base_state(cfg, data)
    st, m1 = adt_step(st, cfg, data.batch(st.rng, cfg.batch))
    st, m2 = adt_step(st, cfg, data.batch(st.rng, cfg.batch))
    for m in (m1, m2):
        assert {"iter", "s", "loss_disc", "loss_gen_adv", "loss_diff", "score_real", "score_fake",
                "grad_norm_theta", "wall_ms"} <= set(m)
        assert len(m["score_real"]) == len(m["score_fake"]) == 3
        assert all(-1 - 1e-9 <= v <= 1 + 1e-9 for v in m["score_real"] + m["score_fake"])
    assert m1["loss_gen_adv"] is None and m2["loss_gen_adv"] is not None
    assert m2["grad_norm_theta"] > 0


def test_ft_preset_has_no_discriminator(data):
    cfg = small_cfg(heads="none", gen_every=1)
    st = base_state(cfg, data)
    assert st.bank is None
    st, m = adt_step(st, cfg, data.batch(st.rng, cfg.batch))
    assert "loss_disc" not in m and m["loss_diff"] > 0


def test_scalar_heads_run(data):
    cfg = small_cfg(heads="scalar", gen_every=1)
    st = base_state(cfg, data)
    assert st.bank.scalar and not st.bank.dual and not st.bank.predictor
    st, m = adt_step(st, cfg, data.batch(st.rng, cfg.batch))
    assert np.isfinite(m["loss_disc"]) and np.isfinite(m["loss_gen_adv"])


@pytest.mark.parametrize("extra", [{}, {"grad_mode": "drtune"}, {"sampler": "flow", "schedule": "flow-linear"},
                                   {"cfg_scale": 2.0}])
def test_run_is_deterministic(data, extra, tmp_path):
    cfg = small_cfg(gen_every=2, **extra)
    runs = []
    for j in range(2):
        path = tmp_path / f"m{j}.jsonl"
        st = finetune(base_state(cfg, data), cfg, data, iters=8, metrics_path=path)
        recs = [json.loads(line) for line in path.read_text().splitlines()]
        for r in recs:
            r.pop("wall_ms")
        runs.append((recs, {k: v.tobytes() for k, v in st.generator.params.items()}))
    assert runs[0] == runs[1]


def test_generator_loss_value_matches_components(data):
    # lambda weighting: the logged adversarial part plus lambda times the diffusion part
    cfg = small_cfg(gen_every=1, lam=0.5)
    st = base_state(cfg, data)
    hooks = []
    st, m = adt_step(st, cfg, data.batch(st.rng, cfg.batch), hooks=hooks)
    assert m["loss_gen_adv"] <= 3.0 + 1e-9 and m["loss_gen_adv"] >= -3.0 - 1e-9
    assert m["loss_diff"] >= 0


# checkpoints


def test_checkpoint_round_trip_bytes(data, tmp_path):
    cfg = small_cfg(gen_every=2)
    st = finetune(base_state(cfg, data), cfg, data, iters=6)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, st, cfg, metrics_cursor=6)
    ck = load_checkpoint(p1)
    assert ck.metrics_cursor == 6 and ck.config == cfg and ck.state.iteration == 6
    save_checkpoint(p2, ck.state, ck.config, ck.metrics_cursor)
    assert p1.read_bytes() == p2.read_bytes()


@pytest.mark.parametrize("heads", ["siamese", "scalar", "none"])
def test_resume_is_bit_identical(data, heads):
    cfg = small_cfg(gen_every=3, heads=heads)
    straight = finetune(base_state(cfg, data), cfg, data, iters=100)
    half = finetune(base_state(cfg, data), cfg, data, iters=50)
    resumed = loads(dumps(half, cfg)).state
    resumed = finetune(resumed, cfg, data, iters=50)
    assert dumps(straight, cfg) == dumps(resumed, cfg)


def test_checkpoint_rejects_corruption_and_version(data):
    cfg = small_cfg()
    blob = bytearray(dumps(base_state(cfg, data), cfg))
    flipped = bytearray(blob)
    flipped[100] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        loads(bytes(flipped))
    with pytest.raises(CheckpointError):
        loads(b"NOPE" + bytes(blob[4:]))
    with pytest.raises(CheckpointError):
        loads(bytes(blob[:-10]))
    import struct
    import zlib

    bumped = bytearray(blob[:-4])
    bumped[4:8] = struct.pack("<I", 99)
    bumped += struct.pack("<I", zlib.crc32(bytes(bumped)))
    with pytest.raises(CheckpointError, match="version 99"):
        loads(bytes(bumped))
