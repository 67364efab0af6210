import numpy as np
import pytest

from dcaunet import tensor as T
from dcaunet.blocks import DcaBlock, FinalExpand, PatchEmbed, PatchMerge, Upsample, pixel_shuffle
from dcaunet.checks import gradcheck, scalarize
from dcaunet.dca import DcaConfig
from dcaunet.errors import GeometryError, ShapeError
from dcaunet.tensor import Tensor


def make_block(rng, channels=4, head_dim=1, window=3, block_index=1):
    cfg = DcaConfig(channels=channels, head_dim=head_dim, window=window,
                    block_index=block_index)
    return DcaBlock(cfg, rng)


class TestDcaBlock:
    def test_zeroed_projections_make_identity(self, rng):
        block = make_block(rng)
        block.dwconv.weight.data[:] = 0.0
        block.dwconv.bias.data[:] = 0.0
        block.attn.wo.weight.data[:] = 0.0
        block.mlp.fc2.weight.data[:] = 0.0
        block.mlp.fc2.bias.data[:] = 0.0
        x = Tensor(rng.normal(size=(2, 6, 6, 4)))
        with T.no_grad():
            out = block(x)
        assert np.array_equal(out.data, x.data)

    @pytest.mark.parametrize("shape", [(6, 6, 4), (2, 6, 6, 4), (1, 9, 9, 4)])
    def test_shape_contract(self, shape, rng):
        block = make_block(rng)
        assert block(Tensor(rng.normal(size=shape))).shape == shape

    def test_gradient_check(self, rng):
        block = make_block(rng, window=3)
        x = Tensor(rng.normal(size=(6, 6, 4)), requires_grad=True)
        weights = rng.normal(size=(6, 6, 4))
        err = gradcheck(lambda: scalarize(block(x), weights),
                        [x] + block.parameters(), coords_per_tensor=16, rng=rng)
        assert err < 1e-4

    def test_mlp_hidden_width_is_four_c(self, rng):
        block = make_block(rng, channels=4)
        assert block.mlp.fc1.weight.shape == (4, 16)


class TestPatchEmbed:
    def test_quarters_resolution(self, rng):
        embed = PatchEmbed(1, 8, rng)
        out = embed(Tensor(rng.normal(size=(2, 8, 8, 1))))
        assert out.shape == (2, 2, 2, 8)

    def test_constant_image_gives_constant_grid_pre_norm(self, rng):
        embed = PatchEmbed(1, 8, rng)
        x = Tensor(np.full((1, 8, 8, 1), 0.7))
        with T.no_grad():
            pre = embed.proj(x).data
        spread = pre.max(axis=(0, 1, 2)) - pre.min(axis=(0, 1, 2))
        assert spread.max() < 1e-12

    def test_matches_unfold_then_linear_oracle(self, rng):
        embed = PatchEmbed(2, 4, rng)
        x = rng.normal(size=(1, 8, 8, 2))
        with T.no_grad():
            ours = embed.proj(Tensor(x)).data
        w = embed.proj.weight.data.reshape(-1, 4)  # (kh*kw*cin, out)
        patches = x.reshape(1, 2, 4, 2, 4, 2).transpose(0, 1, 3, 2, 4, 5).reshape(4, -1)
        oracle = (patches @ w + embed.proj.bias.data).reshape(1, 2, 2, 4)
        np.testing.assert_allclose(ours, oracle, atol=1e-12)

    def test_indivisible_extents_raise(self, rng):
        embed = PatchEmbed(1, 8, rng)
        with pytest.raises(GeometryError):
            embed(Tensor(rng.normal(size=(1, 6, 8, 1))))


class TestPatchMergeAndUpsample:
    def test_merge_halves_and_doubles(self, rng):
        merge = PatchMerge(4, rng)
        out = merge(Tensor(rng.normal(size=(1, 8, 8, 4))))
        assert out.shape == (1, 4, 4, 8)

    def test_merge_pads_odd_extents(self, rng):
        merge = PatchMerge(4, rng)
        out = merge(Tensor(rng.normal(size=(1, 7, 7, 4))))
        assert out.shape == (1, 4, 4, 8)

    def test_upsample_inverts_merge_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 8, 8, 4)))
        merged = PatchMerge(4, rng)(x)
        restored = Upsample(8, rng)(merged)
        assert restored.shape == x.shape

    def test_upsample_rejects_odd_channels(self, rng):
        with pytest.raises(ShapeError):
            Upsample(5, rng)

    def test_final_expand_keeps_width(self, rng):
        out = FinalExpand(4, rng)(Tensor(rng.normal(size=(1, 3, 3, 4))))
        assert out.shape == (1, 12, 12, 4)

    def test_merge_upsample_gradients(self, rng):
        merge, up = PatchMerge(4, rng), Upsample(8, rng)
        x = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
        weights = rng.normal(size=(1, 4, 4, 4))
        err = gradcheck(lambda: scalarize(up(merge(x)), weights),
                        [x] + merge.parameters() + up.parameters(), rng=rng)
        assert err < 1e-4


class TestPixelShuffle:
    def test_index_arithmetic_oracle_2x2x4(self):
        x = Tensor(np.arange(16.0).reshape(1, 2, 2, 4))
        out = pixel_shuffle(x, 2)
        assert out.shape == (1, 4, 4, 1)
        oracle = np.zeros((1, 4, 4, 1))
        for i in range(2):
            for j in range(2):
                for u in range(2):
                    for v in range(2):
                        oracle[0, i * 2 + u, j * 2 + v, 0] = x.data[0, i, j, u * 2 + v]
        assert np.array_equal(out.data, oracle)

    def test_channel_divisibility(self, rng):
        with pytest.raises(ShapeError):
            pixel_shuffle(Tensor(rng.normal(size=(1, 2, 2, 6))), 2)
