import numpy as np
import pytest

from conftest import generic_params
from vmae.backbone import init_params
from vmae.errors import InputError, ParameterError, StructuralError
from vmae.tokenizer import (
    MaskPlan,
    embed_patches,
    flatten_patches,
    full_visible_mask,
    masked_count,
    patchify,
    sample_mask,
    unpatchify,
    validate_image,
)


class TestPatchify:
    def test_full_scale_grid(self):
        img = np.random.default_rng(0).uniform(size=(224, 224, 3))
        seq = patchify(img, 16)
        assert seq.patches.shape == (196, 16, 16, 3)
        assert seq.grid == (14, 14)

    def test_tiny_grid(self):
        img = np.zeros((32, 32, 3))
        assert patchify(img, 8).patches.shape == (16, 8, 8, 3)

    def test_row_major_order(self):
        # encode the grid cell into the pixel values and read it back
        img = np.zeros((4, 6, 1))
        for r in range(2):
            for c in range(3):
                img[2 * r : 2 * r + 2, 2 * c : 2 * c + 2, 0] = r * 3 + c
        seq = patchify(img, 2)
        for i in range(6):
            assert np.all(seq.patches[i] == i)

    def test_flat_element_order(self):
        img = np.arange(2 * 2 * 3, dtype=np.float64).reshape(2, 2, 3) / 100.0
        seq = patchify(img, 2)
        np.testing.assert_array_equal(seq.flat()[0], img.reshape(-1))

    def test_rejects_indivisible_dims(self):
        with pytest.raises(InputError, match="height 30"):
            patchify(np.zeros((30, 32, 3)), 16)
        with pytest.raises(InputError, match="width 20"):
            patchify(np.zeros((32, 20, 3)), 16)

    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            img = rng.uniform(size=(48, 32, 3))
            out = unpatchify(patchify(img, 8))
            assert np.array_equal(out, img)

    def test_flatten_patches_matches_per_sample(self):
        rng = np.random.default_rng(1)
        batch = rng.uniform(size=(3, 32, 32, 3))
        flat = flatten_patches(batch, 8)
        for i in range(3):
            np.testing.assert_array_equal(flat[i], patchify(batch[i], 8).flat())


class TestValidateImage:
    def test_accepts_valid(self):
        validate_image(np.zeros((32, 32, 3)), patch_size=8)

    def test_rejects_out_of_range(self):
        with pytest.raises(InputError, match=r"\[0, 1\]"):
            validate_image(np.full((8, 8, 3), 1.5))

    def test_rejects_bad_channels(self):
        with pytest.raises(InputError, match="channel"):
            validate_image(np.zeros((8, 8, 2)))

    def test_rejects_non_finite(self):
        img = np.zeros((8, 8, 3))
        img[0, 0, 0] = np.nan
        with pytest.raises(InputError, match="non-finite"):
            validate_image(img)


class TestSampleMask:
    def test_counts_match_rounding(self):
        for ratio, expect in [(0.25, 49), (0.5, 98), (0.75, 147), (0.85, 167)]:
            plan = sample_mask(196, ratio, seed=3)
            assert plan.n_masked == expect == masked_count(196, ratio)
            assert plan.n_visible == 196 - expect

    def test_partition_property(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            n = int(rng.integers(1, 300))
            ratio = float(rng.uniform(0.0, 0.999))
            plan = sample_mask(n, ratio, int(rng.integers(0, 2**31)))
            plan.validate()
            both = np.concatenate([plan.masked_idx, plan.visible_idx])
            assert np.array_equal(np.sort(both), np.arange(n))
            assert np.array_equal(plan.masked_idx, np.sort(plan.masked_idx))

    def test_deterministic_per_seed(self):
        a = sample_mask(196, 0.75, seed=11)
        b = sample_mask(196, 0.75, seed=11)
        c = sample_mask(196, 0.75, seed=12)
        assert np.array_equal(a.masked_idx, b.masked_idx)
        assert not np.array_equal(a.masked_idx, c.masked_idx)

    def test_zero_ratio_masks_nothing(self):
        plan = sample_mask(16, 0.0, seed=0)
        assert plan.n_masked == 0
        assert np.array_equal(plan.visible_idx, np.arange(16))

    def test_uniformity_monte_carlo(self):
        # each index should be masked about ratio of the time
        n, ratio, trials = 16, 0.75, 4000
        counts = np.zeros(n)
        for s in range(trials):
            counts[sample_mask(n, ratio, seed=s).masked_idx] += 1
        freq = counts / trials
        assert np.all(np.abs(freq - ratio) < 0.03)

    def test_rejects_bad_ratio(self):
        for ratio in (-0.1, 1.0, 1.5):
            with pytest.raises(ParameterError):
                sample_mask(16, ratio, seed=0)

    def test_rejects_empty_sequence(self):
        with pytest.raises(ParameterError):
            sample_mask(0, 0.5, seed=0)


class TestEmbedPatches:
    def test_zero_params_give_zero_tokens(self, tiny_config):
        params = init_params(tiny_config, 0)
        for t in params.tensors.values():
            t[:] = 0.0
        img = np.random.default_rng(0).uniform(size=(32, 32, 3))
        plan = sample_mask(16, 0.75, seed=1)
        tokens = embed_patches(patchify(img, 8), plan, params)
        assert tokens.tokens.shape == (1 + plan.n_visible, 16)
        assert np.all(tokens.tokens == 0.0)

    def test_identity_like_projection_recovers_pixels(self, tiny_config):
        # patch_dim = 192 > d_enc = 16: use the first 16 pixel slots
        params = init_params(tiny_config, 0)
        for t in params.tensors.values():
            t[:] = 0.0
        params.tensors["patch_embed.weight"][:16, :] = np.eye(16)
        img = np.random.default_rng(3).uniform(size=(32, 32, 3))
        seq = patchify(img, 8)
        plan = full_visible_mask(16)
        pos = np.random.default_rng(4).uniform(size=params.tensors["pos_image"].shape)
        params.tensors["pos_image"][:] = pos
        tokens = embed_patches(seq, plan, params)
        np.testing.assert_allclose(tokens.tokens[1:], seq.flat()[:, :16] + pos[1:], atol=1e-12)
        np.testing.assert_allclose(tokens.tokens[0], pos[0], atol=1e-12)

    def test_masked_patches_are_dropped(self, tiny_config):
        params = generic_params(tiny_config)
        img = np.random.default_rng(5).uniform(size=(32, 32, 3))
        seq = patchify(img, 8)
        plan = sample_mask(16, 0.5, seed=9)
        tokens = embed_patches(seq, plan, params)
        assert tokens.tokens.shape[0] == 1 + plan.n_visible
        # altering a masked patch must not change any token
        seq2 = patchify(img, 8)
        seq2.patches[plan.masked_idx[0]] += 0.5
        tokens2 = embed_patches(seq2, plan, params)
        assert np.array_equal(tokens.tokens, tokens2.tokens)

    def test_sketch_table_differs_from_image_table(self, tiny_config):
        params = generic_params(tiny_config)
        img = np.random.default_rng(6).uniform(size=(32, 32, 3))
        seq = patchify(img, 8)
        plan = full_visible_mask(16)
        t_img = embed_patches(seq, plan, params, pos_table="image")
        t_sk = embed_patches(seq, plan, params, pos_table="sketch")
        diff = params.tensors["pos_sketch"] - params.tensors["pos_image"]
        np.testing.assert_allclose(t_sk.tokens - t_img.tokens, diff, atol=1e-12)

    def test_mask_length_mismatch_raises(self, tiny_config):
        params = init_params(tiny_config, 0)
        img = np.zeros((32, 32, 3))
        plan = sample_mask(32, 0.5, seed=0)
        with pytest.raises(StructuralError):
            embed_patches(patchify(img, 8), plan, params)


class TestMaskPlanValidate:
    def test_overlap_detected(self):
        plan = MaskPlan(
            n_tokens=4,
            ratio=0.5,
            seed=0,
            masked_idx=np.array([0, 1]),
            visible_idx=np.array([1, 3]),
        )
        with pytest.raises(StructuralError):
            plan.validate()
