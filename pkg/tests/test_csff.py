import numpy as np
import pytest
from scipy.special import expit

from dcaunet import tensor as T
from dcaunet.checks import gradcheck, scalarize
from dcaunet.csff import ChannelAttention, CsffBlock, SpatialAttention, StandardFusion
from dcaunet.errors import ConfigError, ShapeError
from dcaunet.tensor import Tensor


def zero_attention(block: CsffBlock) -> None:
    block.channel_attn.fc1.weight.data[:] = 0.0
    block.channel_attn.fc2.weight.data[:] = 0.0
    block.spatial_attn.conv.weight.data[:] = 0.0


class TestChannelAttention:
    def test_identical_channels_get_equal_gates(self, rng):
        # channel-uniform pooled statistics through a channel-symmetric MLP
        ca = ChannelAttention(4, rng)
        ca.fc1.weight.data[:] = 0.3
        ca.fc2.weight.data[:] = -0.7
        base = rng.normal(size=(1, 3, 3, 1))
        x = Tensor(np.repeat(base, 4, axis=-1))
        gate, _ = ca(x)
        spread = gate.data.max() - gate.data.min()
        assert spread < 1e-12

    def test_gate_strictly_inside_unit_interval(self, rng):
        ca = ChannelAttention(8, rng)
        gate, _ = ca(Tensor(rng.normal(size=(2, 4, 4, 8))))
        assert (gate.data > 0).all() and (gate.data < 1).all()

    def test_hand_computed_2x2x4(self, rng):
        ca = ChannelAttention(4, rng)
        x = rng.normal(size=(1, 2, 2, 4))
        gate, gated = ca(Tensor(x))
        avg = x.mean(axis=(1, 2))
        mx = x.max(axis=(1, 2))
        w1, w2 = ca.fc1.weight.data, ca.fc2.weight.data
        mlp = lambda v: np.maximum(v @ w1, 0.0) @ w2
        oracle = expit(mlp(avg) + mlp(mx)).reshape(1, 1, 1, 4)
        np.testing.assert_allclose(gate.data, oracle, atol=1e-12)
        np.testing.assert_allclose(gated.data, oracle * x, atol=1e-12)

    def test_reduction_divisibility(self, rng):
        with pytest.raises(ConfigError):
            ChannelAttention(6, rng)


class TestSpatialAttention:
    def test_channel_constant_input_has_equal_avg_and_max(self, rng):
        base = rng.normal(size=(1, 4, 4, 1))
        x = np.repeat(base, 3, axis=-1)
        avg = x.mean(axis=-1)
        mx = x.max(axis=-1)
        np.testing.assert_allclose(avg, mx, atol=1e-12)

    def test_gate_strictly_inside_unit_interval(self, rng):
        sa = SpatialAttention(rng)
        gate, _ = sa(Tensor(rng.normal(size=(1, 5, 5, 6))))
        assert gate.shape == (1, 5, 5, 1)
        assert (gate.data > 0).all() and (gate.data < 1).all()

    def test_matches_per_pixel_oracle_4x4x3(self, rng):
        sa = SpatialAttention(rng)
        x = rng.normal(size=(1, 4, 4, 3))
        gate, gated = sa(Tensor(x))
        stacked = np.stack([x.mean(axis=-1), x.max(axis=-1)], axis=-1)
        padded = np.pad(stacked, ((0, 0), (1, 1), (1, 1), (0, 0)))
        w = sa.conv.weight.data
        oracle = np.zeros((1, 4, 4, 1))
        for i in range(4):
            for j in range(4):
                oracle[0, i, j, 0] = (padded[0, i:i + 3, j:j + 3, :] * w[:, :, :, 0]).sum()
        oracle = expit(oracle)
        np.testing.assert_allclose(gate.data, oracle, atol=1e-12)
        np.testing.assert_allclose(gated.data, oracle * x, atol=1e-12)


class TestCsffBlock:
    def test_zeroed_gate_parameters_give_quarter_of_fused(self, rng):
        block = CsffBlock(4, rng)
        zero_attention(block)
        skip = Tensor(rng.normal(size=(1, 4, 4, 4)))
        up = Tensor(rng.normal(size=(1, 4, 4, 4)))
        block.eval()
        bare = CsffBlock(4, rng, use_channel_attn=False, use_spatial_attn=False)
        for (_, src), (_, dst) in zip(block.named_parameters(), bare.named_parameters()):
            if src.shape == dst.shape:
                dst.data = src.data.copy()
        bare.eval()
        with T.no_grad():
            gated = block(skip, up).data
            fused = bare(skip, up).data
        np.testing.assert_allclose(gated, 0.25 * fused, atol=1e-12)

    def test_gating_never_amplifies(self, rng):
        block = CsffBlock(4, rng, use_spatial_attn=False)
        block.capture = True
        skip = Tensor(rng.normal(size=(1, 4, 4, 4)))
        up = Tensor(rng.normal(size=(1, 4, 4, 4)))
        with T.no_grad():
            out = block(skip, up).data
        gate = block.captured["m_c"]
        assert (gate > 0).all() and (gate < 1).all()
        block_bare = CsffBlock(4, rng, use_channel_attn=False, use_spatial_attn=False)
        for (_, src), (_, dst) in zip(block.named_parameters(), block_bare.named_parameters()):
            if src.shape == dst.shape:
                dst.data = src.data.copy()
        with T.no_grad():
            fused = block_bare(skip, up).data
        assert (np.abs(out) <= np.abs(fused) + 1e-12).all()

    def test_shape_mismatch_raises(self, rng):
        block = CsffBlock(4, rng)
        with pytest.raises(ShapeError):
            block(Tensor(rng.normal(size=(1, 4, 4, 4))),
                  Tensor(rng.normal(size=(1, 2, 2, 4))))

    def test_ablation_flags_bypass_gates(self, rng):
        skip = Tensor(rng.normal(size=(1, 4, 4, 4)))
        up = Tensor(rng.normal(size=(1, 4, 4, 4)))
        full = CsffBlock(4, rng)
        for flags in ((False, True), (True, False), (False, False)):
            variant = CsffBlock(4, rng, use_channel_attn=flags[0], use_spatial_attn=flags[1])
            for (_, src), (_, dst) in zip(full.named_parameters(), variant.named_parameters()):
                dst.data = src.data.copy()
            variant.capture = True
            with T.no_grad():
                variant(skip, up)
            captured = set(variant.captured)
            assert ("m_c" in captured) == flags[0]
            assert ("m_s" in captured) == flags[1]

    def test_flags_off_with_identity_refines_is_concat_conv(self, rng):
        block = CsffBlock(4, rng, use_channel_attn=False, use_spatial_attn=False)
        for conv in (block.refine_skip, block.refine_up):
            conv.weight.data[:] = 0.0
            for c in range(4):
                conv.weight.data[1, 1, c, c] = 1.0
        baseline = StandardFusion(4, rng)
        baseline.fuse.weight.data = block.fuse.weight.data.copy()
        block.eval()
        baseline.eval()
        skip = Tensor(np.abs(rng.normal(size=(1, 4, 4, 4))))  # ReLU transparent
        up = Tensor(np.abs(rng.normal(size=(1, 4, 4, 4))))
        with T.no_grad():
            ours = block(skip, up).data
            ref = baseline(skip, up).data
        np.testing.assert_allclose(ours, ref, rtol=1e-4, atol=1e-6)

    def test_channel_permutation_equivariance(self, rng):
        channels = 4
        block = CsffBlock(channels, rng, use_spatial_attn=True)
        perm = np.array([2, 0, 3, 1])
        permuted = CsffBlock(channels, rng)
        permuted.load_like = None
        # permute every per-channel parameter consistently
        permuted.refine_skip.weight.data = block.refine_skip.weight.data[:, :, perm][:, :, :, perm]
        permuted.refine_up.weight.data = block.refine_up.weight.data[:, :, perm][:, :, :, perm]
        fuse = block.fuse.weight.data  # (3,3,2C,C)
        fuse_in = np.concatenate([perm, channels + perm])
        permuted.fuse.weight.data = fuse[:, :, fuse_in][:, :, :, perm]
        for name in ("bn_skip", "bn_up", "bn_fuse"):
            src, dst = getattr(block, name), getattr(permuted, name)
            dst.gain.data = src.gain.data[perm].copy()
            dst.bias.data = src.bias.data[perm].copy()
        permuted.channel_attn.fc1.weight.data = block.channel_attn.fc1.weight.data[perm]
        permuted.channel_attn.fc2.weight.data = block.channel_attn.fc2.weight.data[:, perm]
        permuted.spatial_attn.conv.weight.data = block.spatial_attn.conv.weight.data.copy()

        skip = rng.normal(size=(1, 4, 4, channels))
        up = rng.normal(size=(1, 4, 4, channels))
        with T.no_grad():
            base = block(Tensor(skip), Tensor(up)).data
            swapped = permuted(Tensor(skip[..., perm]), Tensor(up[..., perm])).data
        np.testing.assert_allclose(swapped, base[..., perm], atol=1e-10)

    def test_gradient_check(self, rng):
        block = CsffBlock(4, rng)
        skip = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
        up = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
        weights = rng.normal(size=(1, 4, 4, 4))
        err = gradcheck(lambda: scalarize(block(skip, up), weights),
                        [skip, up] + block.parameters(), coords_per_tensor=16, rng=rng)
        assert err < 1e-4


class TestStandardFusion:
    def test_output_shape(self, rng):
        fusion = StandardFusion(4, rng)
        out = fusion(Tensor(rng.normal(size=(1, 4, 4, 4))),
                     Tensor(rng.normal(size=(1, 4, 4, 4))))
        assert out.shape == (1, 4, 4, 4)
        assert (out.data >= 0).all()
