import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshdiff.guidance import gap
from meshdiff.synthdata import (
    TEMPLATES,
    PoseSampler,
    PriorSpec,
    build_dataset,
    dataset_from_manifest,
    generate_instance,
    generate_prior,
    template_skeleton,
)

GOLDEN = json.loads((Path(__file__).parent / "data" / "rest_poses.json").read_text())


def _pose(template, seed):
    return 0.3 * np.random.default_rng(seed).standard_normal(template_skeleton(template).n_pose_params)


@pytest.mark.parametrize("template", sorted(TEMPLATES))
def test_same_seed_is_bitwise_identical(template):
    a = generate_instance(template, _pose(template, 1), seed=5)
    b = generate_instance(template, _pose(template, 1), seed=5)
    np.testing.assert_array_equal(a.gt_mesh.vertices, b.gt_mesh.vertices)
    np.testing.assert_array_equal(a.context, b.context)
    c = generate_instance(template, _pose(template, 1), seed=6)
    np.testing.assert_array_equal(a.gt_mesh.vertices, c.gt_mesh.vertices)
    assert not np.array_equal(a.context, c.context)


@pytest.mark.parametrize("template", sorted(TEMPLATES))
def test_rest_pose_matches_golden_file(template):
    inst = generate_instance(template)
    np.testing.assert_allclose(inst.gt_mesh.vertices, GOLDEN[template]["vertices"], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(inst.topology.faces, GOLDEN[template]["faces"])


@given(s=st.floats(0.1, 10.0), seed=st.integers(0, 1000))
def test_scale_homogeneity(s, seed):
    theta = _pose("chain", seed)
    x = generate_instance("chain", theta, 1.0).gt_mesh.vertices
    y = generate_instance("chain", theta, s).gt_mesh.vertices
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    dy = np.linalg.norm(y[:, None] - y[None], axis=-1)
    np.testing.assert_allclose(dy, s * dx, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("template", sorted(TEMPLATES))
def test_mesh_invariants(template):
    for seed in range(5):
        inst = generate_instance(template, _pose(template, seed), seed=seed)
        V = inst.V
        assert 12 <= V <= 48
        topo = inst.topology
        assert topo.edges.min() >= 0 and topo.edges.max() < V and topo.faces.max() < V
        x = inst.gt_mesh.vertices
        lengths = np.linalg.norm(x[topo.edges[:, 1]] - x[topo.edges[:, 0]], axis=1)
        assert lengths.min() > 1e-6
        assert inst.f.M.shape == (inst.f.J, V)
        assert inst.gt_mesh.step == 0 and np.all(np.isfinite(inst.context))
        # topology is fixed per template
        np.testing.assert_array_equal(topo.faces, generate_instance(template).topology.faces)


def test_generate_errors():
    with pytest.raises(ValueError, match="unknown template"):
        generate_instance("octopus")
    with pytest.raises(ValueError):
        generate_instance("chain", scale=0.0)
    with pytest.raises(ValueError):
        generate_instance("chain", np.zeros(3))


def test_regressor_recovers_joints():
    inst = generate_instance("biped", _pose("biped", 3))
    from meshdiff.synthdata import forward_kinematics

    P, _ = forward_kinematics(template_skeleton("biped"), inst.pose_params)
    np.testing.assert_allclose(inst.gt_pose, P, atol=1e-12)


# -- priors ------------------------------------------------------------------------


def test_noise_free_prior_is_the_true_pose():
    inst = generate_instance("chain", _pose("chain", 0))
    prior = generate_prior(inst, PriorSpec(0.0, 0.0, 7), seed=1)
    assert prior.N == 7
    for u in prior.samples:
        np.testing.assert_array_equal(u, inst.gt_pose)
    assert gap(inst.gt_mesh, prior, inst.f) == 0.0


def test_biased_prior_gap():
    inst = generate_instance("chain", _pose("chain", 0))
    d = np.random.default_rng(2).standard_normal((inst.f.J, 3))
    prior = generate_prior(inst, PriorSpec(0.0, d, 9), seed=1)
    assert gap(inst.gt_mesh, prior, inst.f) == pytest.approx(9 * np.sum(d**2), rel=1e-12)


def test_prior_mean_converges_at_sigma_over_sqrt_n():
    inst = generate_instance("chain", _pose("chain", 0))
    sigma = 2.0
    for N in (10, 1000):
        err = np.array([generate_prior(inst, PriorSpec(sigma, 0.0, N), seed=s).samples.mean(0) - inst.gt_pose for s in range(200)])
        # each coordinate of the sample mean is N(0, sigma^2 / N)
        assert np.std(err) == pytest.approx(sigma / np.sqrt(N), rel=0.05)
        assert abs(np.mean(err)) < 4 * sigma / np.sqrt(N * err.size)


def test_prior_spec_validation():
    with pytest.raises(ValueError):
        PriorSpec(N=0)
    with pytest.raises(ValueError):
        PriorSpec(joint_noise_sigma=-0.1)


# -- datasets ----------------------------------------------------------------------


def test_singleton_dataset():
    ds = build_dataset(1)
    assert len(ds) == 1 and ds.train == [0] and ds.test == []
    with pytest.raises(ValueError):
        build_dataset(0)


def test_split_disjoint_and_complete():
    ds = build_dataset(50, ("chain", "hand"), seed=3)
    assert not set(ds.train) & set(ds.test)
    assert sorted(ds.train + ds.test) == list(range(50))
    assert len(ds.test) == 10
    assert [i.template for i in ds.instances[:4]] == ["chain", "hand", "chain", "hand"]


def test_manifest_round_trip_is_bitwise(tmp_path):
    ds = build_dataset(20, "biped", PoseSampler(0.4, 0.1), seed=7)
    ds.write_manifest(tmp_path / "m.json")
    back = dataset_from_manifest(tmp_path / "m.json")
    assert back.train == ds.train and back.test == ds.test
    for a, b in zip(ds.instances, back.instances):
        np.testing.assert_array_equal(a.gt_mesh.vertices, b.gt_mesh.vertices)
        np.testing.assert_array_equal(a.context, b.context)
        np.testing.assert_array_equal(a.pose_params, b.pose_params)


def test_dataset_reproducible_and_seed_sensitive():
    a, b, c = build_dataset(5, seed=1), build_dataset(5, seed=1), build_dataset(5, seed=2)
    np.testing.assert_array_equal(a.instances[3].gt_mesh.vertices, b.instances[3].gt_mesh.vertices)
    assert not np.array_equal(a.instances[3].gt_mesh.vertices, c.instances[3].gt_mesh.vertices)


def test_overlapping_manifest_rejected():
    m = dict(build_dataset(4).manifest)
    m["split"] = {"train": [0, 1], "test": [1, 2]}
    with pytest.raises(ValueError, match="overlap"):
        dataset_from_manifest(m)


def test_mesh_dump_layout(tmp_path):
    from meshdiff.flatio import read_flat

    ds = build_dataset(6, "chain")
    ds.write_meshes(tmp_path / "m.bin")
    head, rec = read_flat(tmp_path / "m.bin")
    assert (head.V, head.J, head.n_records, head.record_len) == (15, 5, 6, 45 + 15)
    inst = ds.instances[2]
    np.testing.assert_array_equal(rec[2, :45].reshape(15, 3), inst.gt_mesh.vertices)
    np.testing.assert_array_equal(rec[2, 45:].reshape(5, 3), inst.gt_pose)
    with pytest.raises(ValueError):
        build_dataset(4, ("chain", "biped")).write_meshes(tmp_path / "x.bin")
