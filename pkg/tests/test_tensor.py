import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossview.tensor import (
    ShapeError,
    StateError,
    Tensor,
    backprop,
    degeneracy_count,
    grad_check,
    grad_of,
    load,
    parameter,
    primitive_suite,
    reset_degeneracy,
    save,
)
from crossview.tensor import ops
from crossview.tensor.io import FormatError, from_bytes, to_bytes

from crossview.losses import ce_loss
from oracles import naive_conv2d, naive_deconv2d


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9, dtype=np.float32).reshape(3, 3, 1)
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)))
        np.testing.assert_array_equal(out.data, x)

    def test_circular_wrap(self):
        x = np.array([1, 2, 3, 4], np.float32).reshape(1, 4, 1)
        k = np.array([0, 0, 1], np.float32).reshape(1, 3, 1, 1)
        # 1 x 3 kernels are rejected (square only), so embed in a 3 x 3 kernel
        k3 = np.zeros((3, 3, 1, 1), np.float32)
        k3[1] = k[0]
        out = ops.conv2d(Tensor(x), Tensor(k3), pad_mode="circular_horizontal")
        np.testing.assert_array_equal(out.data[0, :, 0], [2, 3, 4, 1])

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("circular", [False, True])
    def test_matches_naive_loops(self, stride, circular):
        rng = np.random.default_rng(stride + 2 * circular)
        x = rng.standard_normal((5, 5, 2))
        k = rng.standard_normal((3, 3, 2, 3))
        mode = "circular_horizontal" if circular else "zero"
        out = ops.conv2d(t64(x), t64(k), pad_mode=mode, stride=stride)
        np.testing.assert_allclose(out.data, naive_conv2d(x, k, stride, circular), atol=1e-12)
        out32 = ops.conv2d(Tensor(x.astype(np.float32)), Tensor(k.astype(np.float32)), pad_mode=mode, stride=stride)
        np.testing.assert_allclose(out32.data, naive_conv2d(x, k, stride, circular), atol=1e-5)

    def test_random_extents_up_to_8(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            h, w = rng.integers(1, 9, size=2)
            x = rng.standard_normal((h, w, 2))
            k = rng.standard_normal((3, 3, 2, 2))
            np.testing.assert_allclose(ops.conv2d(t64(x), t64(k)).data, naive_conv2d(x, k), atol=1e-12)

    def test_output_extent_is_ceil(self):
        out = ops.conv2d(Tensor(np.zeros((7, 5, 1))), Tensor(np.zeros((3, 3, 1, 1))), stride=2)
        assert out.shape == (4, 3, 1)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channels"):
            ops.conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))

    def test_batched_equals_per_item(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 6, 6, 2))
        k = rng.standard_normal((3, 3, 2, 4))
        batched = ops.conv2d(t64(x), t64(k), stride=2).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], ops.conv2d(t64(x[b]), t64(k), stride=2).data, atol=1e-12)


class TestDeconv2d:
    def test_delta_kernel_places_on_even_grid(self):
        y = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        k = np.zeros((3, 3, 1, 1))
        k[1, 1] = 1
        out = ops.deconv2d(t64(y), t64(k)).data[..., 0]
        expected = np.zeros((4, 4))
        expected[::2, ::2] = y[..., 0]
        np.testing.assert_array_equal(out, expected)

    def test_scatter_oracle(self):
        rng = np.random.default_rng(3)
        y = rng.standard_normal((3, 3, 2))
        k = rng.standard_normal((3, 3, 4, 2))
        np.testing.assert_allclose(ops.deconv2d(t64(y), t64(k)).data, naive_deconv2d(y, k), atol=1e-12)
        out32 = ops.deconv2d(Tensor(y.astype(np.float32)), Tensor(k.astype(np.float32))).data
        np.testing.assert_allclose(out32, naive_deconv2d(y, k), atol=1e-5)

    def test_adjoint_of_stride2_conv(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 5))
            cx, cy = rng.integers(1, 4, size=2)
            ksz = int(rng.choice([1, 3, 5]))
            x = rng.standard_normal((2 * n, 2 * n, cx)).astype(np.float32)
            y = rng.standard_normal((n, n, cy)).astype(np.float32)
            k = rng.standard_normal((ksz, ksz, cx, cy)).astype(np.float32)
            lhs = float((ops.conv2d(Tensor(x), Tensor(k), stride=2).data * y).sum())
            rhs = float((x * ops.deconv2d(Tensor(y), Tensor(k)).data).sum())
            assert abs(lhs - rhs) < 1e-5 * max(1.0, abs(lhs))

    def test_non_square_rejected(self):
        with pytest.raises(ShapeError, match="square"):
            ops.deconv2d(Tensor(np.zeros((2, 3, 1))), Tensor(np.zeros((3, 3, 1, 1))))


class TestPrimitives:
    def test_softmax_constant_is_uniform(self):
        out = ops.softmax_pixels(Tensor(np.full((4, 4), 3.0, np.float32)))
        np.testing.assert_allclose(out.data, 1 / 16, rtol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=16, max_size=16))
    def test_softmax_is_distribution(self, vals):
        out = ops.softmax_pixels(Tensor(np.array(vals, np.float32).reshape(4, 4))).data
        assert out.min() >= 0
        assert abs(out.sum() - 1) < 1e-5

    def test_l2_normalize_analytic(self):
        np.testing.assert_allclose(ops.l2_normalize(t64([3.0, 4.0])).data, [0.6, 0.8])

    def test_l2_normalize_zero_vector(self):
        reset_degeneracy()
        out = ops.l2_normalize(t64(np.zeros((2, 3)))).data
        np.testing.assert_array_equal(out, 0)
        assert degeneracy_count() == 2

    def test_l2_normalize_unit_norm(self):
        x = np.random.default_rng(1).standard_normal((3, 4, 5))
        norms = np.linalg.norm(ops.l2_normalize(t64(x)).data, axis=-1)
        np.testing.assert_allclose(norms, 1, atol=1e-12)

    def test_max_tie_goes_to_lowest_index(self):
        vals, idx = ops.max_channels(t64([0.5, 0.5]))
        assert vals.data[0] == 0.5 and idx == 0

    def test_max_gradient_routes_to_argmax(self):
        x = parameter(np.array([[0.5, 0.5, 0.1], [0.0, 2.0, 2.0]]))
        vals, _ = ops.max_channels(x)
        backprop(ops.sum_all(vals))
        np.testing.assert_array_equal(x.grad, [[1, 0, 0], [0, 1, 0]])

    def test_max_with_mask(self):
        vals, idx = ops.max_channels(t64([0.9, 0.2, 0.4]), keep=np.array([False, True, True]))
        assert vals.data[0] == 0.4 and idx == 2
        with pytest.raises(ValueError):
            ops.max_channels(t64([0.9, 0.2]), keep=np.array([False, False]))

    def test_roll_vector(self):
        x = t64(np.arange(8.0))
        np.testing.assert_array_equal(ops.roll_vector(x, 2).data, [2, 3, 4, 5, 6, 7, 0, 1])
        np.testing.assert_array_equal(ops.roll_vector(x, 8).data, x.data)

    def test_cosine_parallel_and_orthogonal(self):
        assert ops.cosine_similarity(t64([1.0, 2.0]), t64([2.0, 4.0])).data == pytest.approx(1.0)
        assert ops.cosine_similarity(t64([1.0, 0.0]), t64([0.0, 3.0])).data == pytest.approx(0.0)

    def test_concat_and_reshape(self):
        a, b = t64(np.ones((2, 2, 1))), t64(np.zeros((2, 2, 3)))
        assert ops.concat([a, b]).shape == (2, 2, 4)
        assert ops.reshape(ops.concat([a, b]), (16,)).shape == (16,)
        with pytest.raises(ShapeError):
            ops.concat([a, t64(np.zeros((3, 2, 1)))])

    def test_primitives_match_naive_references(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 4, 5))
        w = rng.standard_normal((5, 2))
        ref = np.array([[[sum(x[i, j, c] * w[c, o] for c in range(5)) for o in range(2)] for j in range(4)] for i in range(3)])
        np.testing.assert_allclose(ops.dense(t64(x), t64(w)).data, ref, atol=1e-12)
        np.testing.assert_allclose(ops.relu(t64(x)).data, np.maximum(x, 0), atol=0)
        m = x[..., 0]
        z = sum(np.exp(v) for v in m.reshape(-1))
        ref_sm = np.array([[np.exp(m[i, j]) / z for j in range(4)] for i in range(3)])
        np.testing.assert_allclose(ops.softmax_pixels(t64(m)).data, ref_sm, atol=1e-12)


class TestBackprop:
    def test_softmax_cross_entropy_identity(self):
        logits = parameter(np.random.default_rng(0).standard_normal((3, 3)))
        target = np.zeros((3, 3))
        target[1, 2] = 1
        d = ops.softmax_pixels(logits)
        backprop(ce_loss(d, target))
        np.testing.assert_allclose(logits.grad, d.data - target, atol=1e-12)

    def test_constant_loss_zero_gradient(self):
        w = parameter(np.ones((2, 2)))
        out = ops.mul(w, 0.0)
        backprop(ops.sum_all(out))
        np.testing.assert_array_equal(w.grad, 0)

    def test_grad_before_backprop_is_state_error(self):
        w = parameter(np.ones(3))
        with pytest.raises(StateError):
            grad_of(w)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            backprop(parameter(np.ones(3)))

    def test_shared_subgraph_accumulates(self):
        x = parameter(np.array([1.0, 2.0]))
        y = ops.add(x, x)
        backprop(ops.sum_all(ops.mul(y, y)))
        np.testing.assert_allclose(x.grad, 8 * x.data)

    def test_l2_normalize_gradient(self):
        r = grad_check(ops.l2_normalize, [(4, 7)], trials=100)
        assert r.max_rel_error < 1e-4


class TestGradCheck:
    @pytest.mark.parametrize("name", sorted(primitive_suite()))
    def test_primitive(self, name):
        res = grad_check(name=name, trials=100, **primitive_suite()[name])
        limit = 1e-6 if name == "dense" else 1e-4
        assert res.max_rel_error < limit, res


class TestCVT1:
    def test_roundtrip(self, tmp_path):
        a = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
        save(tmp_path / "a.cvt", a)
        np.testing.assert_array_equal(load(tmp_path / "a.cvt"), a)

    def test_layout(self):
        buf = to_bytes(np.array([[1.0, 2.0]], np.float32))
        assert buf[:4] == b"CVT1"
        assert buf[4] == 2
        assert buf[5:13] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert np.frombuffer(buf[13:], "<f4").tolist() == [1.0, 2.0]

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            from_bytes(b"XXXX\x00" + b"\x00" * 4)
