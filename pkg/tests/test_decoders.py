import math

import numpy as np
import pytest

from crossview.decoders import extract_pose, field_heading
from crossview.geometry import shift_panorama
from crossview.matching import OrientationPrior
from crossview.model import CrossViewModel, ModelConfig
from crossview.tensor import ShapeError


@pytest.fixture(scope="module")
def model():
    return CrossViewModel(ModelConfig(seed=3))


@pytest.fixture(scope="module")
def inputs():
    rng = np.random.default_rng(0)
    return rng.random((2, 16, 64, 3)).astype(np.float32), rng.random((2, 64, 64, 3)).astype(np.float32)


@pytest.fixture(scope="module")
def output(model, inputs):
    return model.forward(*inputs)


def test_output_shapes(output):
    assert output.D.shape == (2, 64, 64)
    assert output.Y.shape == (2, 64, 64, 2)
    assert sorted(output.volumes) == [1, 2, 3, 4]
    assert [output.volumes[k].shape[1] for k in (1, 2, 3, 4)] == [4, 8, 16, 32]


def test_distribution_contract(output):
    d = output.D.data
    assert np.all(d >= 0)
    np.testing.assert_allclose(d.sum(axis=(1, 2)), 1.0, atol=1e-5)


def test_field_unit_norm(output):
    n = np.linalg.norm(output.Y.data, axis=-1)
    np.testing.assert_allclose(n, 1.0, atol=1e-5)


def test_duplicate_pair_gives_identical_field(model, inputs):
    g, a = inputs
    out = model.forward(np.stack([g[0], g[0]]), np.stack([a[0], a[0]]))
    np.testing.assert_array_equal(out.Y.data[0], out.Y.data[1])
    np.testing.assert_array_equal(out.D.data[0], out.D.data[1])


def test_vacuous_prior_path_bit_identical(model, inputs, output):
    out = model.forward(*inputs, prior=OrientationPrior(77.0, 180.0))
    np.testing.assert_array_equal(out.D.data, output.D.data)
    np.testing.assert_array_equal(out.Y.data, output.Y.data)


def test_rotation_equivariance_of_volume_and_max_maps(model, inputs, output):
    g, a = inputs
    for s in (1, 2, 5):
        gs = np.stack([shift_panorama(x, s * 45.0) for x in g])
        out = model.forward(gs, a)
        m0, m1 = output.volumes[1].data, out.volumes[1].data
        assert np.max(np.abs(m1 - np.roll(m0, s, axis=-1))) < 1e-4
        for x, y in zip(output.maxmaps, out.maxmaps):
            assert np.max(np.abs(x.data - y.data)) < 1e-4


def test_single_level_ablation_still_valid(inputs):
    m = CrossViewModel(ModelConfig(lmu_levels=(1,), seed=1))
    out = m.forward(*inputs)
    assert sorted(out.volumes) == [1]
    np.testing.assert_allclose(out.D.data.sum(axis=(1, 2)), 1.0, atol=1e-5)


def test_no_omu_model_runs(inputs):
    m = CrossViewModel(ModelConfig(use_omu=False, seed=1))
    out = m.forward(*inputs)
    np.testing.assert_allclose(np.linalg.norm(out.Y.data, axis=-1), 1.0, atol=1e-5)


def test_limited_fov_forward(model, inputs):
    g, a = inputs
    out = model.forward(g[:, :, 16:48], a, fov=180.0)
    assert out.ground_desc[1].shape == (2, 128)
    np.testing.assert_allclose(out.D.data.sum(axis=(1, 2)), 1.0, atol=1e-5)


def test_bad_config_rejected():
    with pytest.raises(ShapeError):
        CrossViewModel(ModelConfig(K=3))
    with pytest.raises(ShapeError):
        CrossViewModel(ModelConfig(R=3))


def test_extract_pose_uniform_tie_rule():
    est = extract_pose(np.full((8, 8), 1 / 64), np.tile([1.0, 0.0], (8, 8, 1)))
    assert est.pixel == (0, 0)
    assert (est.pose.u, est.pose.v, est.pose.heading) == (0.5, 0.5, 0.0)


def test_extract_pose_one_hot():
    d = np.zeros((16, 16))
    d[5, 7] = 1
    y = np.zeros((16, 16, 2))
    y[5, 7] = [math.cos(math.radians(90)), math.sin(math.radians(90))]
    est = extract_pose(d, y)
    assert (est.pose.u, est.pose.v) == (5.5, 7.5)
    assert est.pose.heading == pytest.approx(90.0)
    assert est.confidence == 1.0


def test_extract_pose_scan_oracle_and_conditioning():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = rng.random((16, 16))
        y = rng.normal(size=(16, 16, 2))
        best, bi = -1.0, None
        for i in range(16):
            for j in range(16):
                if d[i, j] > best:
                    best, bi = d[i, j], (i, j)
        est = extract_pose(d, y)
        assert est.pixel == bi
        y2 = rng.normal(size=y.shape)
        y2[bi] = y[bi]
        assert extract_pose(d, y2).pose.heading == est.pose.heading


def test_field_heading_convention():
    assert field_heading(np.array([0.0, -1.0])) == pytest.approx(270.0)
    assert field_heading(np.array([-1.0, 0.0])) == pytest.approx(180.0)
