import zlib

import numpy as np
import pytest

from tunet import ops
from tunet.errors import ConfigError, DimensionError
from tunet.gradcheck import check_gradients
from tunet.network import (BlockKind, BlockVariant, Cascade, CascadeSpec, ConvBlock, ResBlock, SEBlock,
                           SubNet, SubNetSpec, cascade_forward)
from tunet.tensor import Tensor, precision, no_grad

GRAD_TOL = 1e-4
# composite blocks have large third derivatives, so h=1e-3 truncation error alone reaches ~1e-4
H = 1e-5


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def rng_for(name):
    return np.random.default_rng(zlib.crc32(name.encode()))


def weighted_sum(t, seed=0):
    w = Tensor(np.random.default_rng(seed).uniform(0.5, 1.5, t.shape))
    return ops.sum_all(ops.mul(t, w))


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0


class TestVariants:
    def test_six_variants(self):
        names = {v.model_name for v in BlockVariant.all()}
        assert names == {"TuNet", "TuNet + SEB", "TuNet + RES1", "TuNet + RES1 + SEB",
                         "TuNet + RES2", "TuNet + RES2 + SEB"}

    @pytest.mark.parametrize("variant", BlockVariant.all(), ids=str)
    def test_parse_round_trip(self, variant):
        assert BlockVariant.parse(str(variant)) == variant

    def test_filters_double_per_level(self):
        spec = SubNetSpec(levels=5, base_filters=16)
        assert [spec.filters(l) for l in range(5)] == [16, 32, 64, 128, 256]

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ConfigError, match="width"):
            SubNetSpec(levels=3, patch_shape=(8, 8, 6))

    def test_cascade_extra_channels_checked(self):
        base = SubNetSpec(levels=2, base_filters=2, patch_shape=(8, 8, 8))
        with pytest.raises(ConfigError, match="c_net"):
            CascadeSpec(base, base, base)

    def test_spec_dict_round_trip(self):
        spec = CascadeSpec.uniform(3, 4, (16, 16, 16), BlockVariant(BlockKind.RES2, True), detach_cascade=True)
        assert CascadeSpec.from_dict(spec.to_dict()) == spec


class TestConvBlock:
    def test_zero_input_zero_output(self):
        block = ConvBlock(2, 3, rng=rng_for("cb"))
        out = block(Tensor(np.zeros((2, 4, 4, 4))))
        assert out.shape == (3, 4, 4, 4)
        assert np.all(out.data == 0)

    def test_nonnegative_and_shape(self):
        block = ConvBlock(2, 5, rng=rng_for("cb2"))
        out = block(Tensor(rng_for("x").standard_normal((2, 6, 4, 8))))
        assert out.shape == (5, 6, 4, 8)
        assert out.data.min() >= 0

    def test_channel_mismatch(self):
        block = ConvBlock(2, 3, rng=rng_for("cb"))
        with pytest.raises(DimensionError) as exc:
            block(Tensor(np.zeros((3, 4, 4, 4))))
        assert exc.value.axis == "channels"


class TestSEBlock:
    def test_zero_weights_halve_input(self, f64):
        se = SEBlock(4, rng=rng_for("se"))
        zero_params(se)
        x = rng_for("x").standard_normal((4, 3, 3, 3))
        np.testing.assert_allclose(se(Tensor(x)).data, x / 2, rtol=0, atol=0)

    def test_output_bounded_by_input(self):
        se = SEBlock(8, rng=rng_for("se8"))
        x = rng_for("x8").standard_normal((8, 4, 4, 4)).astype(np.float32)
        assert np.all(np.abs(se(Tensor(x)).data) <= np.abs(x))

    def test_hidden_width_floor(self):
        se = SEBlock(2, rng=rng_for("se2"))
        assert se.fc1.weight.shape == (1, 2)

    def test_two_channel_scalar_chain(self, f64):
        se = SEBlock(2, reduction=1, rng=rng_for("toy"))
        se.fc1.weight.data[...] = [[1.0, -1.0], [0.5, 2.0]]
        se.fc1.bias.data[...] = [0.1, -3.0]
        se.fc2.weight.data[...] = [[2.0, 0.0], [-1.0, 1.0]]
        se.fc2.bias.data[...] = [0.0, 0.5]
        x = np.zeros((2, 1, 1, 2))
        x[0, 0, 0] = [1.0, 3.0]
        x[1, 0, 0] = [-2.0, 0.0]
        # by hand: means (2, -1); fc1 -> relu(2+1+0.1)=3.1, relu(1-2-3)=0
        z0, z1 = 3.1, 0.0
        s0 = 1 / (1 + np.exp(-(2.0 * z0)))
        s1 = 1 / (1 + np.exp(-(-1.0 * z0 + 1.0 * z1 + 0.5)))
        out = se(Tensor(x)).data
        np.testing.assert_allclose(out[0], x[0] * s0, rtol=1e-14)
        np.testing.assert_allclose(out[1], x[1] * s1, rtol=1e-14)

    def test_gradients(self, f64):
        se = SEBlock(6, reduction=2, rng=rng_for("seg"))
        x = Tensor(rng_for("seg-x").standard_normal((2, 6, 3, 3, 3)))
        leaves = {"x": x, **dict(se.named_parameters())}
        res = check_gradients(lambda: weighted_sum(se(x)), leaves, h=H)
        assert res.passed(GRAD_TOL), res


class TestResBlock:
    def test_res1_zero_weights_is_identity(self, f64):
        block = ResBlock(3, 3, BlockKind.RES1, rng=rng_for("r1"))
        for conv in (block.conv1, block.conv2):
            zero_params(conv)
        x = rng_for("r1x").standard_normal((3, 4, 4, 4))
        np.testing.assert_array_equal(block(Tensor(x)).data, x)

    def test_res2_zero_weights_is_relu(self, f64):
        block = ResBlock(3, 3, BlockKind.RES2, rng=rng_for("r2"))
        for conv in (block.conv1, block.conv2):
            zero_params(conv)
        x = rng_for("r2x").standard_normal((3, 4, 4, 4))
        np.testing.assert_array_equal(block(Tensor(x)).data, np.maximum(x, 0))

    def test_res1_zero_weights_identity_jacobian(self, f64):
        block = ResBlock(2, 2, BlockKind.RES1, rng=rng_for("r1j"))
        for conv in (block.conv1, block.conv2):
            zero_params(conv)
        x = Tensor(rng_for("r1jx").standard_normal((2, 3, 3, 3)), requires_grad=True)
        upstream = rng_for("up").standard_normal(x.shape)
        out = ops.sum_all(ops.mul(block(x), Tensor(upstream)))
        out.backward()
        np.testing.assert_allclose(x.grad, upstream, rtol=1e-12)
        res = check_gradients(lambda: ops.sum_all(ops.mul(block(x), Tensor(upstream))), {"x": x}, h=H)
        assert res.passed(GRAD_TOL), res

    def test_projection_inserted_for_channel_change(self):
        block = ResBlock(2, 4, BlockKind.RES2, rng=rng_for("proj"))
        assert block.proj is not None and block.proj.weight.shape == (4, 2, 1, 1, 1)
        assert block(Tensor(np.ones((2, 4, 4, 4)))).shape == (4, 4, 4, 4)

    def test_channel_change_without_projection(self):
        with pytest.raises(DimensionError):
            ResBlock(2, 4, BlockKind.RES1, rng=rng_for("np"), project=False)

    @pytest.mark.parametrize("kind", [BlockKind.RES1, BlockKind.RES2])
    def test_gradients(self, f64, kind):
        block = ResBlock(2, 3, kind, rng=rng_for(kind.value))
        x = Tensor(rng_for(kind.value + "x").standard_normal((2, 4, 4, 4)))
        leaves = {"x": x, **dict(block.named_parameters())}
        res = check_gradients(lambda: weighted_sum(block(x)), leaves, h=H)
        assert res.passed(GRAD_TOL), res


class TestSubNet:
    @pytest.mark.parametrize("variant", BlockVariant.all(), ids=str)
    def test_output_range_and_shape(self, variant):
        spec = SubNetSpec(levels=3, base_filters=2, patch_shape=(8, 8, 8), block=variant)
        net = SubNet(spec, 4, rng=rng_for(str(variant)))
        out = net(Tensor(rng_for("in").standard_normal((4, 8, 8, 8))))
        assert out.shape == (1, 8, 8, 8)
        # float32 sigmoid may round a saturated logit to exactly 0 or 1
        assert out.data.min() >= 0 and out.data.max() <= 1

    def test_encoder_channel_bookkeeping(self):
        spec = SubNetSpec(levels=4, base_filters=3, patch_shape=(8, 8, 8))
        net = SubNet(spec, 5, rng=rng_for("audit"))
        assert net.encoder_in_channels == [5, 3 + 5, 6 + 5, 12 + 5]
        for l, stage in enumerate(net.enc):
            assert stage.block.conv.weight.shape[1] == net.encoder_in_channels[l]

    def test_indivisible_input(self):
        net = SubNet(SubNetSpec(levels=2, base_filters=2, patch_shape=(8, 8, 8)), 4, rng=rng_for("d"))
        with pytest.raises(DimensionError) as exc:
            net(Tensor(np.zeros((4, 8, 7, 8))))
        assert exc.value.axis == "height"

    def test_batch_permutation(self):
        net = SubNet(SubNetSpec(levels=2, base_filters=2, patch_shape=(8, 8, 8)), 4, rng=rng_for("perm"))
        x = rng_for("perm-x").standard_normal((2, 4, 8, 8, 8))
        a = net(Tensor(x)).data
        b = net(Tensor(x[::-1].copy())).data
        np.testing.assert_array_equal(a[::-1], b)

    def test_gradients_all_parameters(self, f64):
        spec = SubNetSpec(levels=2, base_filters=2, patch_shape=(8, 8, 8))
        net = SubNet(spec, 4, rng=rng_for("sub-fd"))
        x = Tensor(rng_for("sub-fd-x").standard_normal((4, 8, 8, 8)))
        res = check_gradients(lambda: weighted_sum(net(x)), dict(net.named_parameters()), h=H)
        assert res.passed(GRAD_TOL), res

    def test_forced_open_gates_match_plain_twin(self, f64):
        for kind in BlockKind:
            with_se = SubNet(SubNetSpec(2, 2, (8, 8, 8), BlockVariant(kind, True)), 4, rng=rng_for("se-on"))
            twin = SubNet(SubNetSpec(2, 2, (8, 8, 8), BlockVariant(kind, False)), 4, rng=rng_for("se-off"))
            state = with_se.state_dict()
            twin.load_state_dict({k: state[k] for k in twin.state_dict()})
            for name, p in with_se.named_parameters():
                if ".fc2." in name:
                    p.data[...] = 0
                    if name.endswith("bias"):
                        p.data[...] = 40.0
            x = Tensor(rng_for("gate-x").standard_normal((4, 8, 8, 8)))
            np.testing.assert_allclose(with_se(x).data, twin(x).data, rtol=0, atol=1e-5)


def tiny_cascade(seed=0, **kw):
    return Cascade(CascadeSpec.uniform(levels=2, base_filters=2, patch_shape=(8, 8, 8), **kw), seed=seed)


class TestCascade:
    def test_stage_input_channels(self):
        model = tiny_cascade()
        assert model.w_net.enc[0].block.conv.weight.shape[1] == 4
        assert model.c_net.enc[0].block.conv.weight.shape[1] == 5
        assert model.e_net.enc[0].block.conv.weight.shape[1] == 6

    def test_maps_share_input_shape(self):
        maps = cascade_forward(rng_for("c").standard_normal((4, 8, 8, 8)), tiny_cascade())
        for m in maps:
            assert m.shape == (1, 8, 8, 8)
            assert 0 <= m.data.min() and m.data.max() <= 1

    def test_three_distinct_parameter_stores(self):
        model = tiny_cascade()
        ids = [{id(p) for p in net.parameters()} for net in (model.w_net, model.c_net, model.e_net)]
        assert not (ids[0] & ids[1] or ids[1] & ids[2] or ids[0] & ids[2])

    def test_wrong_input_channels(self):
        with pytest.raises(DimensionError):
            tiny_cascade()(np.zeros((3, 8, 8, 8)))

    def test_w_net_weight_moves_enhancing_map(self, f64):
        model = tiny_cascade(seed=3)
        x = rng_for("probe").standard_normal((4, 8, 8, 8))
        w = model.w_net.enc[0].block.conv.weight
        with no_grad():
            base = model(x).p_enh.data.copy()
            w.data[0, 0, 1, 1, 1] += 1e-3
            moved = model(x).p_enh.data
        assert np.abs(moved - base).max() > 1e-9

    def test_detached_cascade_blocks_gradient(self, f64):
        model = tiny_cascade(detach_cascade=True)
        x = rng_for("det").standard_normal((4, 8, 8, 8))
        ops.sum_all(model(x).p_enh).backward()
        assert all(np.all(p.grad == 0) for p in model.w_net.parameters())
        assert any(np.any(p.grad != 0) for p in model.e_net.parameters())

    def test_full_cascade_gradients(self, f64):
        model = tiny_cascade(seed=1)
        x = Tensor(rng_for("cascade-fd").standard_normal((4, 8, 8, 8)))

        def loss():
            maps = model(x)
            return ops.add(ops.add(weighted_sum(maps.p_whole, 1), weighted_sum(maps.p_core, 2)),
                           weighted_sum(maps.p_enh, 3))

        # the acceptance suite checks every coordinate; a sample keeps this file quick
        res = check_gradients(loss, dict(model.named_parameters()), h=H, max_per_tensor=12)
        assert res.skipped == 0
        assert res.passed(GRAD_TOL), res
