import numpy as np
import pytest
from conftest import random_generator
from hypothesis import given, settings
from hypothesis import strategies as st

from adtlab.autodiff import Tape
from adtlab.diagnostics import ConstantPredictor, closed_form_generator_grad, latent_adjoints
from adtlab.inference import (
    GradMode,
    InferencePath,
    build_path,
    cfg_combine,
    flow_euler_step,
    run_inference,
    sample,
    sampler_step,
)
from adtlab.networks import bind, init_tiny_predictor
from adtlab.schedules import StepCoeffs, coeff_table, make_schedule

# classifier-free guidance


def _cfg(u, c, gamma, swapped_sign=False):
    tape = Tape()
    return tape.value(cfg_combine(tape, tape.constant(u), tape.constant(c), gamma, swapped_sign))


def test_cfg_scale_one_is_conditional():
    u, c = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    np.testing.assert_array_equal(_cfg(u, c, 1.0), c)
    np.testing.assert_array_equal(_cfg(u, c, 1.0, swapped_sign=True), c)


def test_cfg_swapped_sign_at_zero():
    u, c = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    np.testing.assert_array_equal(_cfg(u, c, 0.0, swapped_sign=True), -u)


@pytest.mark.parametrize("gamma", [0.0, 2.5, 7.5])
def test_cfg_fixed_point_conventions(gamma):
    e = np.array([0.3, -0.7])
    # the default convention keeps equal predictions fixed for every scale
    np.testing.assert_allclose(_cfg(e, e, gamma), e, rtol=0, atol=1e-15)
    # the literal signed form scales them by 2 gamma - 1
    np.testing.assert_allclose(_cfg(e, e, gamma, swapped_sign=True), (2 * gamma - 1) * e, rtol=1e-15)


def test_cfg_shape_mismatch():
    tape = Tape()
    with pytest.raises(ValueError):
        cfg_combine(tape, tape.constant(np.ones(2)), tape.constant(np.ones(3)), 2.0)


# paths


def test_build_path_start_zero():
    p = build_path(make_schedule("cosine", 10), 0, K=3, rng=np.random.default_rng(0))
    assert p.timesteps == (0,) and p.trainable_set == frozenset()


def test_build_path_short_start():
    p = build_path(make_schedule("cosine", 10), 2, K=3, rng=np.random.default_rng(0))
    assert len(p.trainable_set) == 2
    assert p.timesteps == (2, 1, 0)


def test_build_path_subset_is_uniform():
    sched = make_schedule("cosine", 10)
    rng = np.random.default_rng(1)
    counts = np.zeros(11)
    n = 10_000
    for _ in range(n):
        p = build_path(sched, 10, K=3, rng=rng)
        assert len(p.trainable_set) == 3 and 10 not in p.trainable_set
        for i in p.trainable_set:
            counts[i] += 1
    np.testing.assert_allclose(counts[1:10] / n, 3 / 9, atol=0.02)
    assert counts[0] == counts[10] == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 12), st.integers(0, 6), st.integers(0, 2**31))
def test_build_path_size_law(s, K, seed):
    p = build_path(make_schedule("linear-beta", 12), s, K=K, rng=np.random.default_rng(seed))
    assert len(p.trainable_set) == min(K, s)
    assert all(1 <= i <= s for i in p.trainable_set)


def test_build_path_rejects():
    sched = make_schedule("cosine", 4)
    with pytest.raises(ValueError):
        build_path(sched, 5)
    with pytest.raises(ValueError):
        build_path(sched, 2, K=-1)
    with pytest.raises(ValueError):
        InferencePath((1, 0), 1, frozenset({1}), GradMode.NO_GRAD)


# single steps


def test_sampler_step_values_agree_across_regimes():
    rng = np.random.default_rng(3)
    x, e = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    c = StepCoeffs(1.37, -0.21)
    vals = []
    for regime in (GradMode.FULL, GradMode.DRTUNE, GradMode.ADT):
        tape = Tape()
        vals.append(tape.value(sampler_step(tape, tape.constant(x), tape.constant(e), c, regime)).tobytes())
    assert len(set(vals)) == 1
    with pytest.raises(ValueError):
        tape = Tape()
        sampler_step(tape, tape.constant(x), tape.constant(e), c, GradMode.NO_GRAD)


def test_sampler_step_adt_latent_jacobian_is_identity():
    tape = Tape()
    x = tape.parameter(np.array([[0.4, -1.0]]))
    out = sampler_step(tape, x, tape.constant(np.array([[1.0, 2.0]])), StepCoeffs(3.0, 0.5), GradMode.ADT)
    np.testing.assert_array_equal(tape.backward(tape.sum(out))[x], 1.0)


def test_flow_euler_full_span_lands_on_data():
    x0, eps = np.array([[0.3, -1.2]]), np.array([[1.1, 0.4]])
    tape = Tape()
    out = flow_euler_step(tape, tape.constant(eps), tape.constant(eps - x0), 1.0, 0.0)
    np.testing.assert_allclose(tape.value(out), x0, rtol=0, atol=1e-15)


@pytest.mark.parametrize("m", [1, 3, 8, 25])
def test_flow_euler_constant_velocity_is_exact(m):
    x0, eps = np.array([[0.3, -1.2]]), np.array([[1.1, 0.4]])
    sched = make_schedule("flow-linear", m)
    tape = Tape()
    x = tape.constant(eps)
    for i in range(m, 0, -1):
        x = flow_euler_step(tape, x, tape.constant(eps - x0), sched.t[i], sched.t[i - 1])
    np.testing.assert_allclose(tape.value(x), x0, rtol=0, atol=1e-13)


def test_flow_euler_rejects_ascending_times():
    tape = Tape()
    x = tape.constant(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        flow_euler_step(tape, x, x, 0.2, 0.5)
    with pytest.raises(ValueError):
        flow_euler_step(tape, x, x, 1.5, 0.5)


def test_flow_euler_richardson_order():
    # smooth synthetic field v(x, t) = x cos(3t) + sin(t)
    def endpoint(m):
        tape = Tape()
        x = tape.constant(np.array([[0.7, -0.4]]))
        ts = np.linspace(0.0, 1.0, m + 1)
        for k in range(m, 0, -1):
            xv = tape.value(x)
            v = tape.constant(xv * np.cos(3 * ts[k]) + np.sin(ts[k]))
            x = flow_euler_step(tape, x, v, ts[k], ts[k - 1])
        return tape.value(x)

    h1, h2, h3 = endpoint(200), endpoint(400), endpoint(800)
    order = np.log2(np.abs(h1 - h2) / np.abs(h2 - h3))
    assert np.all((order >= 0.9) & (order <= 1.1))


# full paths


SAMPLERS = [("ddim", "linear-beta"), ("ddim", "cosine"), ("dpm1", "cosine"), ("flow", "flow-linear")]


@pytest.mark.parametrize("sampler,kind", SAMPLERS)
def test_regimes_are_value_identical(sampler, kind, small_generator):
    sched = make_schedule(kind, 8)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 2))
    cond = rng.integers(0, 3, 6)
    out = []
    for mode in (GradMode.FULL, GradMode.DRTUNE, GradMode.ADT):
        paths = [build_path(sched, 8, mode, 3, np.random.default_rng(9)) for _ in range(6)]
        res = run_inference(small_generator, x, paths, cond, sched, Tape(), sampler)
        out.append(res.tape.value(res.x0).tobytes())
        out.append(res.tape.value(res.eps_bar).tobytes())
    free = run_inference(small_generator, x, build_path(sched, 8, GradMode.NO_GRAD, 0), cond, sched, None, sampler)
    assert len(set(out[0::2])) == 1 and len(set(out[1::2])) == 1
    assert free.tape.value(free.x0).tobytes() == out[0]


@pytest.mark.parametrize("sampler,kind", SAMPLERS)
def test_adt_scale_law_is_exact(sampler, kind, small_generator):
    sched = make_schedule(kind, 10)
    tape = Tape()
    x = tape.parameter(np.random.default_rng(5).normal(size=(3, 2)))
    path = build_path(sched, 10, GradMode.ADT, 3, np.random.default_rng(0))
    res = run_inference(small_generator, x, path, [0, 1, 2], sched, tape, sampler)
    w = tape.constant(np.random.default_rng(6).normal(size=(3, 2)))
    loss = tape.sum(tape.mul(tape.tanh(res.x0), w))
    adj = tape.adjoints(loss, list(res.latents.values()))
    top = adj[res.latents[0]]
    for i in range(10):  # the start latent additionally feeds its own prediction
        assert np.array_equal(adj[res.latents[i]], top)


@pytest.mark.parametrize("kind", ["linear-beta", "cosine"])
def test_drtune_scale_law(kind, small_generator):
    sched = make_schedule(kind, 20)
    a, _ = coeff_table("ddim", sched)
    tape = Tape()
    x = tape.parameter(np.random.default_rng(7).normal(size=(2, 2)))
    res = run_inference(small_generator, x, build_path(sched, 20, GradMode.DRTUNE, 3, np.random.default_rng(1)),
                        [0, 1], sched, tape, "ddim")
    adj = tape.adjoints(tape.sum(res.x0), list(res.latents.values()))
    for i in range(20):
        np.testing.assert_allclose(adj[res.latents[i]], np.prod(a[1:i + 1]), rtol=1e-8)


def test_latent_adjoints_with_constant_predictor():
    sched = make_schedule("cosine", 12)
    dr = latent_adjoints(sched, "ddim", GradMode.DRTUNE)
    ad = latent_adjoints(sched, "ddim", GradMode.ADT)
    np.testing.assert_allclose(dr[:, 0, 0], 1.0 / sched.alpha, rtol=1e-10)
    np.testing.assert_array_equal(ad, 1.0)


def test_full_regime_differs_from_drtune_in_gradient(small_generator):
    sched = make_schedule("cosine", 6)
    grads = {}
    for mode in (GradMode.FULL, GradMode.DRTUNE):
        tape = Tape()
        x = tape.parameter(np.array([[0.2, -0.3]]))
        res = run_inference(small_generator, x, build_path(sched, 6, mode, 2, np.random.default_rng(0)), [1], sched,
                            tape, "ddim")
        grads[mode] = tape.backward(tape.sum(res.x0))[x]
    assert not np.allclose(grads[GradMode.FULL], grads[GradMode.DRTUNE])


def test_start_zero_returns_input_and_single_eval(small_generator):
    sched = make_schedule("cosine", 6)
    x = np.array([[0.5, 0.25], [1.0, -1.0]])
    tape = Tape()
    res = run_inference(small_generator, x, build_path(sched, 0, GradMode.ADT, 3), [0, 2], sched, tape)
    np.testing.assert_array_equal(tape.value(res.x0), x)
    np.testing.assert_array_equal(res.start_evals, [1, 1])
    nodes = bind(Tape(), small_generator.params, False)
    t2 = Tape()
    nodes = bind(t2, small_generator.params, False)
    expect = small_generator.forward(t2, nodes, t2.constant(x), 0.0, small_generator.context(t2, nodes, [0, 2]))
    np.testing.assert_array_equal(tape.value(res.eps_bar), t2.value(expect))


def test_mixed_starts_one_eval_each_and_trace(small_generator):
    sched = make_schedule("linear-beta", 8)
    rng = np.random.default_rng(11)
    starts = [8, 5, 0, 2, 8, 1]
    paths = [build_path(sched, s, GradMode.ADT, 3, rng) for s in starts]
    x = rng.normal(size=(6, 2))
    res = run_inference(small_generator, x, paths, [0, 1, 2, 0, 1, 2], sched, Tape())
    np.testing.assert_array_equal(res.start_evals, 1)
    for i, labels in res.trace:
        for r, p in enumerate(paths):
            expect = ("start" if i == p.start else "train" if i in p.trainable_set and i < p.start
                      else "frozen" if i < p.start else "idle")
            assert labels[r] == expect
    # each row matches running it alone
    for r, p in enumerate(paths):
        solo = run_inference(small_generator, x[r:r + 1], p, [r % 3], sched, Tape())
        np.testing.assert_allclose(res.tape.value(res.x0)[r], solo.tape.value(solo.x0)[0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(res.tape.value(res.eps_bar)[r], solo.tape.value(solo.eps_bar)[0], rtol=0,
                                   atol=1e-12)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_non_finite_latent_reports_step():
    sched = make_schedule("cosine", 5)
    gen = ConstantPredictor(d=2, params={"c": np.array([[1e308, 0.0]])})
    with pytest.raises(FloatingPointError, match="step 5"):
        run_inference(gen, np.ones((1, 2)), build_path(sched, 5, GradMode.NO_GRAD, 0), [0], sched, None)


def test_node_input_requires_tape(small_generator):
    tape = Tape()
    with pytest.raises(ValueError):
        run_inference(small_generator, tape.constant(np.ones((1, 2))), build_path(make_schedule("cosine", 2), 2),
                      [0], make_schedule("cosine", 2), None)


def test_cfg_inside_paths_changes_samples():
    gen = random_generator(2)
    sched = make_schedule("cosine", 6)
    x = np.random.default_rng(0).normal(size=(4, 2))
    plain = sample(gen, sched, "ddim", x, [0, 1, 2, 0])
    guided = sample(gen, sched, "ddim", x, [0, 1, 2, 0], cfg_scale=3.0)
    assert not np.allclose(plain, guided)


# the per-step closed form of the generator gradient


@pytest.mark.parametrize("cfg_scale", [1.0, 2.0])
def test_generator_gradient_closed_form(cfg_scale):
    rng = np.random.default_rng(12)
    gen = init_tiny_predictor(2, rng)
    if cfg_scale != 1.0:
        gen.null_token = True
    sched = make_schedule("cosine", 8)
    starts = [8, 6, 3, 0]
    paths = [build_path(sched, s, GradMode.ADT, 3, rng, cfg_scale=cfg_scale) for s in starts]
    x = rng.normal(size=(4, 2))
    target = rng.normal(size=(4, 2))
    w = rng.normal(size=(4, 2))
    lam = 0.5

    tape = Tape()
    nodes = bind(tape, gen.params, True)
    res = run_inference(gen, x, paths, np.zeros(4, dtype=int), sched, tape, "ddim", nodes=nodes)
    adv = tape.sum(tape.mul(tape.tanh(res.x0), tape.constant(w)))
    loss = tape.add(adv, tape.scale(tape.mse(res.eps_bar, tape.constant(target)), lam))
    g = tape.backward(loss)
    adv_grad = w * (1 - np.tanh(tape.value(res.x0)) ** 2)
    closed = closed_form_generator_grad(gen, sched, "ddim", x, paths, 0, adv_grad, lam, target)
    for k, node in nodes.items():
        np.testing.assert_allclose(g[node], closed[k], rtol=1e-5, atol=1e-8)
