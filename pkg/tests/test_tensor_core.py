import itertools
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tunet import ops
from tunet.errors import DimensionError, GraphError
from tunet.gradcheck import check_gradients
from tunet.tensor import Tensor, precision

GRAD_TOL = 1e-4
H = 1e-3


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def conv_oracle(x, w, b, padding):
    """Direct summation over the receptive field of every output voxel."""
    cin, D, Hh, W = x.shape
    cout, _, k, _, _ = w.shape
    p = 0 if padding == "valid" else k // 2
    mode = "edge" if padding == "replicate" else "constant"
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)), mode=mode)
    oD, oH, oW = (s + 2 * p - k + 1 for s in (D, Hh, W))
    out = np.zeros((cout, oD, oH, oW))
    for o, z, y, xx in itertools.product(range(cout), range(oD), range(oH), range(oW)):
        out[o, z, y, xx] = np.sum(w[o] * xp[:, z:z + k, y:y + k, xx:xx + k]) + b[o]
    return out


def random_functional(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


class TestConv3d:
    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((3, 1, 3, 3, 3))
        out = ops.conv3d(Tensor(np.zeros((1, 4, 4, 4))), Tensor(w), Tensor([1.0, -2.0, 0.5]))
        for c, b in enumerate([1.0, -2.0, 0.5]):
            assert np.all(out.data[c] == np.float32(b))

    def test_identity_kernel(self):
        x = np.random.default_rng(1).standard_normal((1, 5, 4, 3))
        out = ops.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x.astype(np.float32))

    def test_ones_receptive_field_counts(self):
        out = ops.conv3d(Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor([0.0]))
        expected = conv_oracle(np.ones((1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)), [0.0], "same")
        np.testing.assert_array_equal(out.data, expected)
        assert out.data[0, 1, 1, 1] == 27
        assert out.data[0, 0, 1, 1] == 18
        assert out.data[0, 0, 0, 0] == 8

    @pytest.mark.parametrize("padding", ["same", "valid", "replicate"])
    def test_matches_direct_summation(self, f64, padding):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 4, 5, 6))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        out = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), padding=padding)
        np.testing.assert_allclose(out.data, conv_oracle(x, w, b, padding), rtol=1e-12, atol=1e-12)

    def test_batched_equals_per_instance(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 2, 4, 4, 4))
        w, b = Tensor(rng.standard_normal((2, 2, 3, 3, 3))), Tensor(rng.standard_normal(2))
        batched = ops.conv3d(Tensor(x), w, b).data
        for n in range(3):
            np.testing.assert_array_equal(batched[n], ops.conv3d(Tensor(x[n]), w, b).data)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError) as err:
            ops.conv3d(Tensor(np.zeros((2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))))
        assert err.value.axis == "channels"

    def test_valid_padding_too_small(self):
        with pytest.raises(DimensionError) as err:
            ops.conv3d(Tensor(np.zeros((1, 4, 2, 4))), Tensor(np.zeros((1, 1, 3, 3, 3))), padding="valid")
        assert err.value.axis == "height"

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            ops.conv3d(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 1, 2, 2, 2))))

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
    def test_linear_in_input(self, a, b, seed):
        with precision(np.float64):
            rng = np.random.default_rng(seed)
            x, y = rng.standard_normal((2, 2, 4, 4, 4))
            w = Tensor(rng.standard_normal((2, 2, 3, 3, 3)))
            lhs = ops.conv3d(Tensor(a * x + b * y), w).data
            rhs = a * ops.conv3d(Tensor(x), w).data + b * ops.conv3d(Tensor(y), w).data
            np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-6 * (1 + np.abs(rhs).max()))

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
    def test_linear_in_kernel(self, a, b, seed):
        with precision(np.float64):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.standard_normal((2, 4, 4, 4)))
            k1, k2 = rng.standard_normal((2, 2, 2, 3, 3, 3))
            lhs = ops.conv3d(x, Tensor(a * k1 + b * k2)).data
            rhs = a * ops.conv3d(x, Tensor(k1)).data + b * ops.conv3d(x, Tensor(k2)).data
            np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-6 * (1 + np.abs(rhs).max()))


class TestInstanceNorm:
    def test_constant_channel_collapses_to_beta(self):
        x = np.full((2, 3, 3, 3), 7.25)
        out = ops.instance_norm(Tensor(x), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
        assert np.all(out.data == 0)

    def test_zero_gamma(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 3, 3))
        out = ops.instance_norm(Tensor(x), Tensor([0.0, 0.0]), Tensor([5.0, 5.0]))
        assert np.all(out.data == 5)

    def test_hand_computed(self, f64):
        x = np.arange(1, 9, dtype=float).reshape(1, 2, 2, 2)
        mean = sum(range(1, 9)) / 8
        var = sum((v - mean) ** 2 for v in range(1, 9)) / 8
        expected = (x - mean) / np.sqrt(var + 1e-5)
        out = ops.instance_norm(Tensor(x), Tensor([1.0]), Tensor([0.0]), eps=1e-5)
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_standardizes_each_channel(self, f64):
        x = np.random.default_rng(4).normal(3.0, 5.0, size=(3, 4, 5, 6))
        out = ops.instance_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        for c in range(3):
            assert abs(out[c].mean()) < 1e-4
            assert abs(out[c].var() - 1) < 1e-4

    @settings(max_examples=20, deadline=None)
    @given(shift=st.floats(-100, 100), seed=st.integers(0, 1000))
    def test_invariant_to_per_channel_shift(self, shift, seed):
        with precision(np.float64):
            x = np.random.default_rng(seed).standard_normal((2, 3, 3, 3))
            g, b = Tensor([1.5, 0.5]), Tensor([0.1, -0.2])
            a = ops.instance_norm(Tensor(x), g, b).data
            shifted = x.copy()
            shifted[1] += shift
            np.testing.assert_allclose(ops.instance_norm(Tensor(shifted), g, b).data, a, atol=1e-8)

    def test_needs_two_voxels(self):
        with pytest.raises(DimensionError):
            ops.instance_norm(Tensor(np.ones((1, 1, 1, 1))), Tensor([1.0]), Tensor([0.0]))


class TestPoolingAndResampling:
    def test_maxpool_constant(self):
        out = ops.maxpool3d(Tensor(np.full((2, 4, 4, 4), 3.0)))
        assert out.shape == (2, 2, 2, 2) and np.all(out.data == 3)

    def test_maxpool_single_peak(self):
        x = np.zeros((1, 2, 2, 2))
        x[0, 1, 0, 1] = 9
        assert ops.maxpool3d(Tensor(x)).data.reshape(-1).tolist() == [9]

    def test_maxpool_matches_window_scan(self):
        x = np.random.default_rng(5).standard_normal((1, 4, 4, 4))
        out = ops.maxpool3d(Tensor(x)).data
        for z, y, w in itertools.product(range(2), repeat=3):
            window = [x[0, 2 * z + a, 2 * y + b, 2 * w + c] for a, b, c in itertools.product(range(2), repeat=3)]
            assert out[0, z, y, w] == np.float32(max(window))

    def test_maxpool_tie_goes_to_lowest_index(self):
        x = Tensor(np.full((1, 2, 2, 2), 1.0), requires_grad=True)
        ops.maxpool3d(x).sum().backward()
        expected = np.zeros((1, 2, 2, 2))
        expected[0, 0, 0, 0] = 1
        np.testing.assert_array_equal(x.grad, expected)

    def test_maxpool_odd_dim(self):
        with pytest.raises(DimensionError) as err:
            ops.maxpool3d(Tensor(np.zeros((1, 4, 3, 4))))
        assert err.value.axis == "height"

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_maxpool_within_input_range(self, seed):
        x = np.random.default_rng(seed).standard_normal((2, 4, 2, 6))
        out = ops.maxpool3d(Tensor(x)).data
        assert out.max() <= x.astype(np.float32).max() and out.min() >= x.astype(np.float32).min()

    def test_upsample_scalar(self):
        out = ops.upsample3d_nearest(Tensor(np.full((1, 1, 1, 1), 3.0)))
        assert out.shape == (1, 2, 2, 2) and np.all(out.data == 3)

    def test_upsample_index_oracle(self):
        x = np.random.default_rng(6).standard_normal((2, 2, 2, 2))
        out = ops.upsample3d_nearest(Tensor(x)).data
        for c, d, h, w in itertools.product(range(2), range(4), range(4), range(4)):
            assert out[c, d, h, w] == np.float32(x[c, d // 2, h // 2, w // 2])

    def test_upsample_then_downsample_is_identity(self, f64):
        x = np.random.default_rng(7).standard_normal((3, 2, 3, 4))
        back = ops.downsample_avg(ops.upsample3d_nearest(Tensor(x)), 2).data
        np.testing.assert_array_equal(back, x)

    def test_downsample_constant(self):
        out = ops.downsample_avg(Tensor(np.full((1, 4, 4, 4), -2.5)), 4)
        assert out.shape == (1, 1, 1, 1) and out.data.item() == -2.5

    def test_downsample_mean_of_range(self):
        x = np.arange(8, dtype=float).reshape(1, 2, 2, 2)
        assert ops.downsample_avg(Tensor(x), 2).data.item() == 3.5

    def test_downsample_composition(self, f64):
        x = Tensor(np.random.default_rng(8).standard_normal((2, 8, 4, 8)))
        once = ops.downsample_avg(x, 4).data
        twice = ops.downsample_avg(ops.downsample_avg(x, 2), 2).data
        np.testing.assert_allclose(once, twice, rtol=1e-12, atol=1e-14)

    def test_downsample_indivisible(self):
        with pytest.raises(DimensionError):
            ops.downsample_avg(Tensor(np.zeros((1, 4, 6, 4))), 4)


class TestSmallKernels:
    def test_sigmoid_zero(self):
        assert ops.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_stable_for_large_inputs(self):
        out = ops.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(out)) and out.tolist() == [0.0, 1.0]

    def test_gap_constant(self):
        out = ops.global_avg_pool(Tensor(np.full((3, 2, 2, 2), 4.0)))
        assert out.shape == (3,) and np.all(out.data == 4)

    def test_concat_shapes(self):
        a, b = Tensor(np.zeros((2, 4, 4, 4))), Tensor(np.ones((3, 4, 4, 4)))
        assert ops.concat_channels(a, b).shape == (5, 4, 4, 4)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(DimensionError) as err:
            ops.concat_channels(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 2, 4))))
        assert err.value.axis == "height"

    def test_fully_connected(self):
        out = ops.fully_connected(Tensor([1.0, 2.0]), Tensor([[1.0, 0.0], [1.0, 1.0], [0.0, -1.0]]),
                                  Tensor([0.5, 0.0, 0.0]))
        assert out.data.tolist() == [1.5, 3.0, -2.0]

    def test_fully_connected_mismatch(self):
        with pytest.raises(DimensionError):
            ops.fully_connected(Tensor([1.0, 2.0]), Tensor(np.zeros((3, 3))))

    def test_scale_channels(self):
        x = np.ones((2, 2, 2, 2))
        out = ops.scale_channels(Tensor(x), Tensor([2.0, -1.0])).data
        assert np.all(out[0] == 2) and np.all(out[1] == -1)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
        ops.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_sigmoid_slope_at_zero(self, f64):
        x = np.array([1.0, -2.0, 3.0])
        w = Tensor(np.zeros((1, 3)), requires_grad=True)
        ops.sum_all(ops.sigmoid(ops.fully_connected(Tensor(x), w))).backward()
        np.testing.assert_allclose(w.grad[0], 0.25 * x)

    def test_fan_out_accumulates(self, f64):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        y = ops.add(ops.mul(x, Tensor(2.0)), ops.mul(x, x))
        ops.sum_all(y).backward()
        np.testing.assert_allclose(x.grad, 2 + 2 * x.data)

    def test_backward_without_graph(self):
        with pytest.raises(GraphError):
            Tensor([1.0]).backward()

    def test_backward_twice(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = ops.sum_all(ops.mul(x, x))
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()


def _grad_case(name, rng):
    """Build (forward, leaves) for one kernel on a small random 64-bit input."""
    x = Tensor(rng.standard_normal((2, 4, 4, 4)))
    if name == "conv3d":
        w, b = Tensor(rng.standard_normal((2, 2, 3, 3, 3))), Tensor(rng.standard_normal(2))
        return (lambda: ops.conv3d(x, w, b)), {"x": x, "w": w, "b": b}
    if name == "conv3d_replicate":
        w, b = Tensor(rng.standard_normal((3, 2, 3, 3, 3))), Tensor(rng.standard_normal(3))
        return (lambda: ops.conv3d(x, w, b, padding="replicate")), {"x": x, "w": w, "b": b}
    if name == "instance_norm":
        g, b = Tensor(rng.uniform(0.5, 1.5, 2)), Tensor(rng.standard_normal(2))
        return (lambda: ops.instance_norm(x, g, b)), {"x": x, "gamma": g, "beta": b}
    if name == "maxpool3d":
        # distinct values spaced far beyond the probe step keep every argmax fixed
        xs = Tensor(rng.permutation(128).reshape(2, 4, 4, 4) * 0.05)
        return (lambda: ops.maxpool3d(xs)), {"x": xs}
    if name == "upsample":
        return (lambda: ops.upsample3d_nearest(x)), {"x": x}
    if name == "downsample":
        return (lambda: ops.downsample_avg(x, 2)), {"x": x}
    if name == "fully_connected":
        v, w, b = Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal((3, 5))), Tensor(rng.standard_normal(3))
        return (lambda: ops.fully_connected(v, w, b)), {"x": v, "w": w, "b": b}
    if name == "relu":
        xr = Tensor(rng.choice([-1, 1], size=(2, 4, 4, 4)) * rng.uniform(0.1, 2.0, size=(2, 4, 4, 4)))
        return (lambda: ops.relu(xr)), {"x": xr}
    if name == "sigmoid":
        return (lambda: ops.sigmoid(x)), {"x": x}
    if name == "global_avg_pool":
        return (lambda: ops.global_avg_pool(x)), {"x": x}
    if name == "scale_channels":
        s = Tensor(rng.standard_normal(2))
        return (lambda: ops.scale_channels(x, s)), {"x": x, "s": s}
    if name == "concat":
        y = Tensor(rng.standard_normal((1, 4, 4, 4)))
        return (lambda: ops.concat_channels(x, y)), {"x": x, "y": y}
    raise KeyError(name)


KERNELS = ["conv3d", "conv3d_replicate", "instance_norm", "maxpool3d", "upsample", "downsample",
           "fully_connected", "relu", "sigmoid", "global_avg_pool", "scale_channels", "concat"]


@pytest.mark.parametrize("name", KERNELS)
def test_kernel_gradients_match_finite_differences(f64, name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    forward, leaves = _grad_case(name, rng)
    proj = {}

    def loss():
        out = forward()
        if "r" not in proj:
            proj["r"] = random_functional(out.shape, seed=1)
        return ops.sum_all(ops.mul(out, proj["r"]))

    result = check_gradients(loss, leaves, h=H)
    assert result.skipped == 0
    assert result.max_rel_error < GRAD_TOL, result


def test_same_seed_same_forward():
    from tunet.network import Cascade, CascadeSpec

    spec = CascadeSpec.uniform(levels=2, base_filters=2, patch_shape=(8, 8, 8))
    x = np.random.default_rng(0).standard_normal((4, 8, 8, 8))
    a = Cascade(spec, seed=11)(x)
    b = Cascade(spec, seed=11)(x)
    for pa, pb in zip(a, b):
        assert pa.data.tobytes() == pb.data.tobytes()
