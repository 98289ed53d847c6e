import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshdiff.diffusion import MeshSample, build_schedule, estimate_h0, forward_sample, reverse_step
from meshdiff.geometry import MeshToPoseMap, MeshTopology, mpve
from meshdiff.guidance import GuidanceConfig, run_ensemble
from meshdiff.models import (
    AnalyticGaussianScore,
    DenoiserConfig,
    LossWeights,
    OptimConfig,
    RefinementHead,
    StepDifferenceAdapter,
    TokenDenoiser,
    aggregate_prediction,
    diffusion_loss,
    geometry_losses,
    load_checkpoint,
    save_checkpoint,
    step_embedding,
    total_loss,
    train,
)
from meshdiff.models.checkpoint import CheckpointError
from meshdiff.models.losses import geometry_losses_and_grad, step_difference_target, step_difference_to_eps
from meshdiff.models.train import TrainingDiverged, batch_loss_and_grads
from meshdiff.synthdata import PriorSpec, ProblemInstance, generate_instance, generate_prior

from conftest import rel_err
from helpers import biped_benchmark, chain_problem, small_denoiser
from oracles import central_difference, loop_geometry_losses

SCHED = build_schedule(200)


# -- token denoiser ----------------------------------------------------------------


def test_denoiser_shapes_and_width():
    inst = generate_instance("chain")
    cfg = DenoiserConfig(V=inst.V, d_ctx=inst.context.shape[1])
    net = TokenDenoiser(cfg)
    assert cfg.width == 34
    out = net.evaluate(np.zeros((inst.V, 3)), 10, inst.context)
    assert out.shape == (inst.V, 3) and np.all(np.isfinite(out))
    batch = net.evaluate(np.zeros((4, inst.V, 3)), np.array([1, 50, 100, 200]), inst.context)
    assert batch.shape == (4, inst.V, 3)
    np.testing.assert_allclose(batch[1], net.evaluate(np.zeros((inst.V, 3)), 50, inst.context), rtol=1e-13, atol=1e-15)
    shapes = TokenDenoiser.param_shapes(cfg)
    assert net.num_params == sum(int(np.prod(s)) for s in shapes.values())
    assert net.describe()["num_params"] == net.num_params


def test_wide_dimensions_supported():
    cfg = DenoiserConfig(V=15, d_id=64, d_step=61, d_attn=32, d_ff=32)
    assert cfg.width == 128
    assert TokenDenoiser(cfg).evaluate(np.zeros((15, 3)), 3, np.zeros((5, 8))).shape == (15, 3)


def test_denoiser_rejects_bad_inputs():
    inst = generate_instance("chain")
    net = small_denoiser(inst)
    with pytest.raises(ValueError):
        net.evaluate(np.zeros((inst.V, 3)), 3, None)
    with pytest.raises(ValueError):
        net.evaluate(np.zeros((inst.V, 3)), 3, np.zeros((5, 3)))
    with pytest.raises(ValueError):
        DenoiserConfig(V=3, output="score")
    bad = net.copy().params
    bad["Wout"] = np.zeros((2, 3))
    with pytest.raises(ValueError):
        TokenDenoiser(net.config, bad)


def test_step_embedding():
    e = step_embedding([0, 7], 5, 200)
    assert e.shape == (2, 5)
    np.testing.assert_allclose(e[0], [0, 0, 1, 1, 0])
    assert e[1, -1] == pytest.approx(7 / 200)


@pytest.mark.parametrize("output", ["epsilon", "velocity"])
def test_vertex_id_permutation_equivariance(output, rng):
    inst = generate_instance("chain", seed=2)
    net = small_denoiser(inst, seed=1, output=output)
    perm = rng.permutation(inst.V)
    params = {k: v.copy() for k, v in net.params.items()}
    params["E_id"] = params["E_id"][perm]
    permuted = TokenDenoiser(net.config, params)
    h = rng.standard_normal((inst.V, 3))
    out = net.evaluate(h, 37, inst.context)
    np.testing.assert_allclose(permuted.evaluate(h[perm], 37, inst.context), out[perm], rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("output", ["epsilon", "velocity"])
def test_denoiser_vjp_matches_finite_differences(output, rng):
    inst = generate_instance("chain", seed=4)
    net = small_denoiser(inst, seed=5, output=output)
    for _ in range(10):
        k = int(rng.integers(1, 201))
        h = rng.standard_normal((inst.V, 3))
        cot = rng.standard_normal((inst.V, 3))
        d = rng.standard_normal((inst.V, 3))
        fd = central_difference(lambda x: np.sum(cot * net.evaluate(x, k, inst.context)), h, d)
        assert rel_err(np.sum(net.vjp(h, k, inst.context, cot) * d), fd) < 1e-4


@pytest.mark.parametrize("output", ["epsilon", "velocity"])
def test_denoiser_parameter_gradients(output, rng):
    inst = generate_instance("chain", seed=4)
    net = small_denoiser(inst, seed=6, output=output)
    h = rng.standard_normal((3, inst.V, 3))
    k = np.array([2, 90, 199])
    cot = rng.standard_normal(h.shape)
    _, cache = net.forward(h, k, inst.context)
    _, grads = net.backward(cache, cot)
    for name, p in net.params.items():
        d = rng.standard_normal(p.shape)

        def L(t):
            saved = p.copy()
            p[...] = saved + t * d
            try:
                return np.sum(cot * net.forward(h, k, inst.context)[0])
            finally:
                p[...] = saved

        fd = central_difference(L, 0.0, 1.0)
        assert rel_err(np.sum(grads[name] * d), fd) < 1e-4, name


def test_velocity_head_bounded_clean_estimate():
    # with v = 0 the clean estimate is sqrt(a) h and stays bounded at k = K
    inst = generate_instance("chain")
    net = small_denoiser(inst, output="velocity")
    for name in ("Wout", "bout"):
        net.params[name][...] = 0.0
    h = np.random.default_rng(0).standard_normal((inst.V, 3))
    eps = net.evaluate(h, 200, inst.context)
    h0 = estimate_h0(MeshSample(h, 200), eps, 200, SCHED).vertices
    np.testing.assert_allclose(h0, np.sqrt(SCHED.alphas[200]) * h, atol=1e-12)


# -- analytic gaussian --------------------------------------------------------------


def test_gaussian_vjp_and_posterior(rng):
    mean = rng.standard_normal((4, 3))
    var = rng.uniform(0.5, 2.0, (4, 3))
    m = AnalyticGaussianScore(mean, var, SCHED)
    for _ in range(10):
        k = int(rng.integers(1, 201))
        h, cot, d = (rng.standard_normal((4, 3)) for _ in range(3))
        fd = central_difference(lambda x: np.sum(cot * m.evaluate(x, k)), h, d)
        assert rel_err(np.sum(m.vjp(h, k, None, cot) * d), fd) < 1e-4
        # Tweedie: the one-jump estimate equals the posterior mean
        h0 = estimate_h0(MeshSample(h, k), m.evaluate(h, k), k, SCHED).vertices
        np.testing.assert_allclose(h0, m.posterior_mean(h, k), rtol=1e-9, atol=1e-9)
        # score = -eps / sqrt(1 - a)
        np.testing.assert_allclose(m.score(h, k), -m.evaluate(h, k) / np.sqrt(1 - SCHED.alphas[k]), rtol=1e-12)
    with pytest.raises(ValueError):
        AnalyticGaussianScore(mean, -1.0, SCHED)


@pytest.mark.parametrize("eta,steps", [(1.0, 200), (0.0, 40), (0.3, 200)])
def test_chain_moments_match_simulation(eta, steps):
    s = build_schedule(200, eta=eta, ddim_steps=steps)
    m = AnalyticGaussianScore(np.array([[0.5, -1.0, 0.2]]), np.array([[1.0, 2.0, 0.5]]), s)
    mu, var = m.chain_moments(s)
    rng = np.random.default_rng(0)
    n = 20000
    h = MeshSample(rng.standard_normal((n, 1, 3)), s.K)
    for k_from, k_to in s.hops():
        eps = m.evaluate(h.vertices, k_from)
        z = rng.standard_normal(h.vertices.shape)
        h = reverse_step(h, k_from, k_to, eps, s, z)
    x = h.vertices
    se = np.sqrt(var / n)
    assert np.all(np.abs(x.mean(0) - mu) < 4 * se)
    assert np.all(np.abs(x.var(0) / var - 1) < 4 * np.sqrt(2 / n) + 1e-3)


# -- losses ------------------------------------------------------------------------


class Constant:
    def __init__(self, out):
        self.out = out

    def evaluate(self, hk, k, context=None):
        return self.out


def test_diffusion_loss_examples(rng):
    h0 = MeshSample(rng.standard_normal((5, 3)), 0)
    z = rng.standard_normal((5, 3))
    assert diffusion_loss(Constant(z), h0, 30, z, SCHED) == 0.0
    vals = [diffusion_loss(Constant(np.zeros((5, 3))), h0, 30, z_, SCHED) for z_ in rng.standard_normal((4000, 5, 3))]
    assert np.mean(vals) == pytest.approx(15, abs=4 * np.std(vals) / np.sqrt(4000))
    with pytest.raises(ValueError):
        diffusion_loss(Constant(z), h0, 30, np.zeros((4, 3)), SCHED)
    with pytest.raises(ValueError):
        diffusion_loss(Constant(z), h0, 30, z, SCHED, target_mode="x")


def test_step_difference_target_and_inverse(rng):
    h0 = rng.standard_normal((5, 3))
    z = rng.standard_normal((5, 3))
    k = 77
    target = step_difference_target(h0, z, k, SCHED)
    a0, a1 = SCHED.alphas[k - 1], SCHED.alphas[k]
    prev = np.sqrt(a0) * h0 + np.sqrt(1 - a0) * z
    cur = np.sqrt(a1) * h0 + np.sqrt(1 - a1) * z
    np.testing.assert_allclose(target, prev - cur, rtol=1e-12)
    np.testing.assert_allclose(step_difference_to_eps(target, cur, k, SCHED), z, rtol=1e-8, atol=1e-8)
    assert diffusion_loss(Constant(target), MeshSample(h0, 0), k, z, SCHED, target_mode="step_difference") < 1e-20


def test_step_difference_adapter(rng):
    inst = generate_instance("chain")
    net = small_denoiser(inst, seed=2)
    ad = StepDifferenceAdapter(net, SCHED)
    h, cot, d = (rng.standard_normal((inst.V, 3)) for _ in range(3))
    k = 40
    want = step_difference_to_eps(net.evaluate(h, k, inst.context), h, k, SCHED)
    np.testing.assert_array_equal(ad.evaluate(h, k, inst.context), want)
    fd = central_difference(lambda x: np.sum(cot * ad.evaluate(x, k, inst.context)), h, d)
    assert rel_err(np.sum(ad.vjp(h, k, inst.context, cot) * d), fd) < 1e-4


def test_diffusion_loss_final_layer_gradient(rng):
    inst = generate_instance("chain", seed=1)
    net = small_denoiser(inst, seed=3)
    h0 = inst.gt_mesh
    z = rng.standard_normal((inst.V, 3))
    k = 60
    hk = forward_sample(h0, k, SCHED, z).vertices
    pred, cache = net.forward(hk, k, inst.context)
    _, grads = net.backward(cache, -2 * (z - pred))
    d = rng.standard_normal(net.params["Wout"].shape)
    W = net.params["Wout"]

    def L(t):
        saved = W.copy()
        W[...] = saved + t * d
        try:
            return diffusion_loss(net, h0, k, z, SCHED, inst.context)
        finally:
            W[...] = saved

    assert rel_err(np.sum(grads["Wout"] * d), central_difference(L, 0.0, 1.0)) < 1e-4


def test_geometry_losses_zero_at_gt_and_translation():
    inst = generate_instance("biped", 0.3 * np.random.default_rng(1).standard_normal(48))
    gt = inst.gt_mesh.vertices
    L0 = geometry_losses(gt, gt, inst.topology, inst.f)
    assert (L0.L_v, L0.L_j, L0.L_e) == (0.0, 0.0, 0.0)
    assert L0.L_n < 1e-15  # in-plane edge dotted with the unit normal, roundoff only
    t = np.array([0.3, -0.1, 0.2])
    L = geometry_losses(gt + t, gt, inst.topology, inst.f)
    assert L.L_v == pytest.approx(np.mean(np.abs(t)), rel=1e-12)
    assert L.L_j == pytest.approx(np.mean(np.abs(t)), rel=1e-12)
    assert L.L_n == pytest.approx(0.0, abs=1e-12) and L.L_e == pytest.approx(0.0, abs=1e-12)


def test_geometry_losses_loop_oracle(rng):
    inst = generate_instance("chain", 0.3 * rng.standard_normal(15))
    gt = inst.gt_mesh.vertices
    for _ in range(5):
        x = gt + 0.1 * rng.standard_normal(gt.shape)
        got = geometry_losses(x, gt, inst.topology, inst.f)
        want = loop_geometry_losses(x.tolist(), gt.tolist(), inst.topology.edges.tolist(), inst.topology.faces.tolist(), inst.f.M.tolist())
        for g, w in zip(got, want):
            assert abs(g - w) <= 1e-12 * max(1.0, abs(w))


def test_geometry_losses_skip_degenerate_faces(caplog):
    topo = MeshTopology.from_faces(4, [[0, 1, 2], [0, 1, 3]])
    gt = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], dtype=float)  # face 2 is collinear
    f = MeshToPoseMap(np.full((1, 4), 0.25))
    x = gt + np.array([[0, 0, 0.1], [0, 0, 0], [0, 0, 0], [0, 0, 0]])
    with caplog.at_level(logging.WARNING):
        L = geometry_losses(x, gt, topo, f)
    assert "degenerate" in caplog.text
    want = loop_geometry_losses(x.tolist(), gt.tolist(), topo.edges.tolist(), topo.faces.tolist(), f.M.tolist())
    assert L.L_n == pytest.approx(want[2], abs=1e-12) and L.L_n > 0


def test_geometry_loss_gradients(rng):
    inst = generate_instance("chain", 0.3 * rng.standard_normal(15))
    gt = inst.gt_mesh.vertices
    x = gt + 0.1 * rng.standard_normal(gt.shape)
    _, grads = geometry_losses_and_grad(x, gt, inst.topology, inst.f)
    d = rng.standard_normal(gt.shape)
    for i, g in enumerate(grads):
        fd = central_difference(lambda y: geometry_losses(y, gt, inst.topology, inst.f)[i], x, d, step=1e-7)
        assert rel_err(np.sum(g * d), fd) < 1e-4, i


def test_total_loss_examples(rng):
    assert total_loss((2.5, 1, 2, 3, 4), LossWeights(0, 0, 0, 0)) == 2.5
    assert total_loss((1, 1, 1, 1, 1), LossWeights(1, 1, 1, 1)) == 5
    parts = rng.uniform(0, 3, 5)
    w = LossWeights(*rng.uniform(0, 2, 4))
    resum = parts[0] + w.lambda_v * parts[1] + w.lambda_j * parts[2] + w.lambda_n * parts[3] + w.lambda_e * parts[4]
    assert total_loss(parts, w) == pytest.approx(resum, rel=1e-15)
    with pytest.raises(ValueError):
        LossWeights(lambda_v=-1)
    with pytest.raises(ValueError):
        LossWeights(lambda_n=np.nan)


# -- training ----------------------------------------------------------------------


def _one_vertex_dataset():
    topo = MeshTopology(1, np.zeros((0, 2), int), np.zeros((0, 3), int))
    inst = ProblemInstance(
        "point", topo, MeshSample(np.array([[0.7, -0.4, 1.1]]), 0), MeshToPoseMap(np.ones((1, 1))),
        np.zeros((1, 8)), np.zeros(0), 1.0, 0,
    )  # fmt: skip
    return [inst]


def test_zero_learning_rate_is_a_no_op():
    ds = _one_vertex_dataset()
    net = TokenDenoiser(DenoiserConfig(V=1, d_id=4, d_step=5, d_attn=4, d_ff=8))
    before = {k: v.copy() for k, v in net.params.items()}
    train(net, ds, SCHED, LossWeights(), OptimConfig(lr=0.0, num_updates=20, batch_size=4))
    for k in before:
        np.testing.assert_array_equal(net.params[k], before[k])


def test_one_vertex_training_converges():
    ds = _one_vertex_dataset()
    net = TokenDenoiser(DenoiserConfig(V=1, d_id=4, d_step=5, d_attn=4, d_ff=16, output="velocity"), seed=0)
    _, curve = train(net, ds, SCHED, LossWeights(), OptimConfig(lr=1e-3, num_updates=2000, batch_size=32))
    total = np.array([row[-1] for row in curve])
    assert np.all(np.isfinite(total))
    assert total[-100:].mean() < 0.1 * total[:10].mean()


def test_training_is_deterministic():
    inst, _, _, _ = chain_problem()
    runs = []
    for _ in range(2):
        net = small_denoiser(inst, seed=1, output="velocity")
        _, curve = train(net, [inst], SCHED, LossWeights(), OptimConfig(lr=1e-3, num_updates=15, batch_size=4, seed=3))
        runs.append((curve, net.params))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


def test_training_divergence_aborts():
    inst, _, _, _ = chain_problem()
    net = small_denoiser(inst)
    net.params["bout"][...] = 1e4
    with pytest.raises(TrainingDiverged, match="update 0"):
        train(net, [inst], SCHED, LossWeights(), OptimConfig(num_updates=3, batch_size=2))


@pytest.mark.parametrize("target_mode", ["epsilon", "step_difference"])
def test_batch_gradient_matches_finite_differences(target_mode, rng):
    inst, _, _, _ = chain_problem()
    net = small_denoiser(inst, seed=8)
    B = 3
    batch = (
        np.stack([inst.gt_mesh.vertices] * B), np.stack([inst.context] * B), np.array([3, 80, 170]),
        rng.standard_normal((B, inst.V, 3)), inst.topology, inst.f,
    )  # fmt: skip
    w = LossWeights()
    _, total, grads = batch_loss_and_grads(net, batch, SCHED, w, target_mode)
    for name in ("Wout", "W1", "E_id"):
        p = net.params[name]
        d = rng.standard_normal(p.shape)

        def L(t):
            saved = p.copy()
            p[...] = saved + t * d
            try:
                return batch_loss_and_grads(net, batch, SCHED, w, target_mode)[1]
            finally:
                p[...] = saved

        assert rel_err(np.sum(grads[name] * d), central_difference(L, 0.0, 1.0, step=1e-7)) < 1e-4, name


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(target_mode="both")
    with pytest.raises(ValueError):
        OptimConfig(lr=-1)


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    inst = generate_instance("chain")
    net = small_denoiser(inst, seed=4, output="velocity")
    save_checkpoint(net, tmp_path / "m.ckpt", target_mode="epsilon", seed=9)
    back, meta = load_checkpoint(tmp_path / "m.ckpt", expect=net.config)
    assert meta == {"target_mode": "epsilon", "seed": 9, "arch": net.config}
    for k in net.params:
        np.testing.assert_array_equal(back.params[k], net.params[k])
    h = np.ones((inst.V, 3))
    np.testing.assert_array_equal(back.evaluate(h, 5, inst.context), net.evaluate(h, 5, inst.context))
    head = (tmp_path / "m.ckpt").read_bytes().split(b"\nEND\n")[0].decode()
    assert "target_mode=epsilon" in head
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(tmp_path / "m.ckpt", expect=DenoiserConfig(V=inst.V, d_ctx=8))
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")
    (tmp_path / "long.ckpt").write_bytes((tmp_path / "m.ckpt").read_bytes() + b"\0" * 8)
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "long.ckpt")


# -- aggregation -------------------------------------------------------------------


def test_aggregate_examples(rng):
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(aggregate_prediction([x]).vertices, x)
    mu = rng.standard_normal((4, 3))
    d = rng.standard_normal((4, 3))
    np.testing.assert_allclose(aggregate_prediction([mu + d, mu - d]).vertices, mu, atol=1e-15)
    assert aggregate_prediction([MeshSample(x, 0)]).step == 0
    with pytest.raises(ValueError):
        aggregate_prediction([])
    head = RefinementHead.zeros(4)
    np.testing.assert_array_equal(aggregate_prediction([x], head).vertices, x)
    head.W2[...] = 0.1
    assert not np.allclose(aggregate_prediction([x], head).vertices, x)


@given(seed=st.integers(0, 10**6))
def test_aggregate_mpve_never_exceeds_mean_of_samples(seed):
    rng = np.random.default_rng(seed)
    gt = rng.standard_normal((6, 3))
    S = gt + rng.standard_normal((5, 6, 3))
    agg = aggregate_prediction(list(S)).vertices
    assert mpve(agg, gt) <= np.mean([mpve(s, gt) for s in S]) + 1e-12


def test_aggregate_beats_mean_sample_on_benchmark():
    ds, model, sched = biped_benchmark()
    tests = ds.split("test")
    agg, per = [], []
    for t in range(50):
        inst = tests[t % len(tests)]
        prior = generate_prior(inst, PriorSpec(), seed=t)
        res = run_ensemble(inst.V, model, prior, inst.f, sched, GuidanceConfig(num_chains=5), seeds=t)
        gt = inst.gt_mesh.vertices
        agg.append(mpve(aggregate_prediction(res.samples).vertices, gt))
        per.append(np.mean([mpve(s, gt) for s in res.samples]))
    assert np.mean(agg) <= np.mean(per)
