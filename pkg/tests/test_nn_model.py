import numpy as np
import pytest

from _util import tiny_mae, tiny_regressor
from rppg_lab.errors import ConfigError, ShapeMismatchError
from rppg_lab.nn.model import (
    DecoderConfig,
    EncoderConfig,
    LinearProbe,
    MaskedAutoencoder,
    desk_profile,
    paper_profile,
    sincos_2d,
)
from rppg_lab.stmap import make_mask_plan, patchify


class TestShapes:
    def test_desk_profile_shapes(self):
        enc, dec = desk_profile(in_channels=6, side=64, patch_size=8)
        model = MaskedAutoencoder(enc, dec, seed=0, dtype="f32")
        plan = make_mask_plan(64, 8, 0.8, seed=1)
        patches = np.random.default_rng(0).random((64, 384))
        tokens = model.encoder_forward(patches[plan.kept_indices], plan)
        assert tokens.shape == (plan.kept_indices.size + 1, 64)
        pred = model.decoder_forward(tokens, plan)
        assert pred.shape == (64, 384)

    def test_paper_profile_shapes(self):
        # ViT-Base encoder: 39 kept patches + class token -> [40, 768];
        # decoder output covers all 196 patches at 16*16*3 = 768 values
        enc, dec = paper_profile(in_channels=3, side=224, patch_size=16)
        assert (enc.depth, enc.dim, enc.heads) == (12, 768, 12)
        assert (dec.depth, dec.dim) == (8, 128)
        model = MaskedAutoencoder(enc, dec, seed=0, dtype="f32")
        plan = make_mask_plan(224, 16, 0.8, seed=2)
        assert plan.kept_indices.size == 39
        patches = np.random.default_rng(1).random((196, 768)).astype(np.float32)
        tokens = model.encoder_forward(patches[plan.kept_indices], plan)
        assert tokens.shape == (40, 768)
        pred = model.decoder_forward(tokens, plan)
        assert pred.shape == (196, 768)

    def test_random_small_config_shapes(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            heads = int(rng.integers(1, 4))
            dim = int(rng.integers(1, 4)) * 4 * heads
            grid = int(rng.integers(2, 5))
            patch = int(rng.integers(2, 5))
            channels = int(rng.integers(1, 4))
            depth = int(rng.integers(1, 3))
            enc = EncoderConfig(depth=depth, dim=dim, heads=heads, patch_size=patch,
                                in_channels=channels, seq_side=grid)
            dec = DecoderConfig(depth=depth, dim=dim, heads=heads, patch_size=patch,
                                in_channels=channels, seq_side=grid)
            model = MaskedAutoencoder(enc, dec, seed=0, dtype="f64")
            ratio = float(rng.uniform(0.3, 0.9))
            plan = make_mask_plan(grid * patch, patch, ratio, seed=int(rng.integers(1e6)))
            if plan.kept_indices.size == 0:
                continue
            patch_dim = patch * patch * channels
            patches = rng.random((grid * grid, patch_dim))
            tokens = model.encoder_forward(patches[plan.kept_indices], plan)
            assert tokens.shape == (plan.kept_indices.size + 1, dim)
            pred = model.decoder_forward(tokens, plan)
            assert pred.shape == (grid * grid, patch_dim)

    def test_bad_configs(self):
        with pytest.raises(ConfigError):
            EncoderConfig(dim=70, heads=4).validate()
        with pytest.raises(ConfigError):
            EncoderConfig(depth=0).validate()
        enc, dec = desk_profile()
        dec.seq_side = 3
        with pytest.raises(ConfigError):
            MaskedAutoencoder(enc, dec)

    def test_kept_count_mismatch(self):
        model = tiny_mae()
        plan = make_mask_plan(16, 4, 0.75, seed=0)
        with pytest.raises(ShapeMismatchError):
            model.encoder_forward(np.zeros((3, 48)), plan)


class TestEquivariance:
    def test_permuting_kept_patches_permutes_outputs(self):
        model = tiny_mae(dtype="f64")
        plan = make_mask_plan(16, 4, 0.5, seed=4)
        rng = np.random.default_rng(5)
        patches = rng.random((16, 48))
        kept = patches[plan.kept_indices]
        base = model.encode_batch(kept[None], plan.kept_indices[None]).data[0]

        perm = rng.permutation(plan.kept_indices.size)
        permuted = model.encode_batch(
            kept[perm][None], plan.kept_indices[perm][None]
        ).data[0]
        # class token identical; patch tokens permuted the same way
        assert np.allclose(base[0], permuted[0], atol=1e-12)
        assert np.allclose(base[1:][perm], permuted[1:], atol=1e-12)

    def test_positional_identity_not_storage_order(self):
        # same kept set in two storage orders -> same decoder output
        model = tiny_mae(dtype="f64")
        plan = make_mask_plan(16, 4, 0.5, seed=6)
        rng = np.random.default_rng(7)
        patches = rng.random((16, 48))
        pred_a = model.reconstruct(patches, plan).data

        perm = rng.permutation(plan.kept_indices.size)
        plan_b = type(plan)(
            patch_size=plan.patch_size,
            grid=plan.grid,
            kept_indices=plan.kept_indices[perm].copy(),
            masked_indices=plan.masked_indices.copy(),
            seed=plan.seed,
        )
        pred_b = model.reconstruct(patches, plan_b).data
        assert np.allclose(pred_a, pred_b, atol=1e-10)


class TestResidualStructure:
    def test_zeroed_final_block_is_identity(self):
        model = tiny_mae(depth=2, dtype="f64")
        # zero the residual-branch outputs of the last encoder block
        for name in (
            "encoder.blocks.1.attn.proj.weight",
            "encoder.blocks.1.attn.proj.bias",
            "encoder.blocks.1.mlp.fc2.weight",
            "encoder.blocks.1.mlp.fc2.bias",
        ):
            model.params.table[name].data[:] = 0.0
        shallow = tiny_mae(depth=2, dtype="f64")
        for name, p in model.params.table.items():
            shallow.params.table[name].data = p.data.copy()

        plan = make_mask_plan(16, 4, 0.5, seed=8)
        patches = np.random.default_rng(9).random((16, 48))
        kept = patches[plan.kept_indices]

        # run block 0 only by zeroing block 1 in the copy as well, then
        # compare: with block 1 zeroed, tokens before the final norm are
        # unchanged by block 1 (pre-norm residual becomes identity)
        from rppg_lab.nn import tensor as T
        from rppg_lab.nn.model import _run_blocks

        x = T.constant(np.random.default_rng(10).random((1, 5, 16)))
        out = _run_blocks(model.params, "encoder", 2, 2, x)
        one = _run_blocks(model.params, "encoder", 1, 2, x)
        assert np.allclose(out.data, one.data, atol=1e-12)

    def test_mask_token_shared(self):
        # at init with a zeroed decoder head the masked outputs are all
        # equal: every masked position holds the same mask token and the
        # head bias dominates after zeroing
        model = tiny_mae(dtype="f64")
        model.params.table["decoder.head.weight"].data[:] = 0.0
        model.params.table["decoder.head.bias"].data[:] = 0.3
        plan = make_mask_plan(16, 4, 0.9, seed=11)  # 1 kept, 15 masked
        patches = np.random.default_rng(12).random((16, 48))
        pred = model.reconstruct(patches, plan).data
        masked_rows = pred[plan.masked_indices]
        assert np.allclose(masked_rows, masked_rows[0], atol=1e-12)


class TestPosEmbed:
    def test_sincos_properties(self):
        pe = sincos_2d(16, 4)
        assert pe.shape == (16, 16)
        # distinct positions get distinct embeddings
        assert np.unique(np.round(pe, 9), axis=0).shape[0] == 16

    def test_determinism_across_models(self):
        a = tiny_mae(seed=0)
        b = tiny_mae(seed=0)
        for name in a.params.table:
            assert np.array_equal(a.params.table[name].data, b.params.table[name].data)
        c = tiny_mae(seed=1)
        diff = any(
            not np.array_equal(a.params.table[n].data, c.params.table[n].data)
            for n in a.params.table
        )
        assert diff


class TestHeads:
    def test_regressor_output(self):
        model = tiny_regressor(out_len=16)
        patches = np.random.default_rng(13).random((2, 16, 48))
        sig = model.forward(patches)
        assert sig.shape == (2, 16)

    def test_probe_logits(self):
        enc = EncoderConfig(depth=1, dim=16, heads=2, patch_size=4, in_channels=3, seq_side=4)
        model = LinearProbe(enc, n_bins=145, seed=0, dtype="f64")
        logits = model.forward(np.random.default_rng(14).random((3, 16, 48)))
        assert logits.shape == (3, 145)
