import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carpet_studio import autodiff as ad
from carpet_studio import cams, gatys, synthetic
from carpet_studio.errors import PaletteMismatchError, ShapeMismatchError
from oracles import oracle_cams_style_loss, oracle_weighted_gram


class TestExtractPalette:
    def test_solid_color_collapses_to_one(self):
        img = np.full((16, 16, 3), [0.3, 0.5, 0.7], dtype=np.float32)
        palette = cams.extract_palette(img, 5)
        assert palette.shape == (1, 3)
        assert np.allclose(palette[0], [0.3, 0.5, 0.7], atol=1e-6)

    def test_two_pure_halves(self):
        img = synthetic.make_two_tone([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], size=16)
        palette = cams.extract_palette(img, 2)
        assert palette.shape == (2, 3)
        # clustering oracle on a two-point color distribution: the centroids
        # are the two colors themselves
        found = sorted(tuple(np.round(c, 3)) for c in palette)
        expected = sorted([(0.0, 0.0, 1.0), (1.0, 0.0, 0.0)])
        for f, e in zip(found, expected):
            assert np.allclose(f, e, atol=2 / 255)

    def test_size_one_is_lab_mean(self, rng):
        img = rng.uniform(0, 1, (12, 12, 3)).astype(np.float32)
        palette = cams.extract_palette(img, 1)
        # mean-color oracle in the clustering space
        lab_mean = cams.rgb_to_lab(img.reshape(-1, 3).astype(np.float64)).mean(axis=0)
        expected = cams.lab_to_rgb(lab_mean)
        assert palette.shape == (1, 3)
        assert np.allclose(palette[0], expected, atol=1e-6)

    def test_size_validation(self, carpet64):
        with pytest.raises(ValueError):
            cams.extract_palette(carpet64, 0)
        with pytest.raises(ValueError):
            cams.extract_palette(carpet64, 17)

    def test_deterministic(self, texture64):
        a = cams.extract_palette(texture64, 5)
        b = cams.extract_palette(texture64, 5)
        assert np.array_equal(a, b)

    def test_palette_entries_pairwise_separated(self, texture64):
        palette = cams.extract_palette(texture64, 6)
        for i in range(len(palette)):
            for j in range(i + 1, len(palette)):
                assert np.linalg.norm(palette[i] - palette[j]) > cams.MERGE_THRESHOLD


class TestMergePalettes:
    def test_idempotent(self, texture64):
        p = cams.extract_palette(texture64, 4)
        assert np.array_equal(cams.merge_palettes(p, p), p)

    def test_disjoint_union_count(self):
        a = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        b = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        assert cams.merge_palettes(a, b).shape == (5, 3)

    def test_near_duplicates_average(self):
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[0.04, 0.0, 0.03]])  # inside the merge threshold
        merged = cams.merge_palettes(a, b)
        assert merged.shape == (1, 3)
        assert np.allclose(merged[0], [0.02, 0.0, 0.015], atol=1e-9)

    def test_order_invariant(self, rng):
        a = rng.uniform(0, 1, (3, 3))
        b = rng.uniform(0, 1, (2, 3))
        assert np.allclose(cams.merge_palettes(a, b), cams.merge_palettes(b, a))


class TestColorMasks:
    def test_single_color_all_ones(self, texture64):
        masks = cams.color_masks(texture64, np.array([[0.5, 0.5, 0.5]]))
        assert masks.shape == (1, 64, 64)
        assert np.array_equal(masks, np.ones_like(masks))

    def test_exact_match_dominates(self):
        img = np.full((4, 4, 3), [1.0, 0.0, 0.0], dtype=np.float32)
        palette = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        masks = cams.color_masks(img, palette, sigma=0.25)
        assert masks[0].min() >= 0.99

    def test_equidistant_pixel_splits_evenly(self):
        img = np.full((2, 2, 3), [0.5, 0.0, 0.0], dtype=np.float32)
        palette = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        masks = cams.color_masks(img, palette)
        assert np.allclose(masks, 0.5)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 6))
    def test_partition_of_unity(self, seed, n):
        r = np.random.default_rng(seed)
        img = r.uniform(0, 1, (8, 9, 3)).astype(np.float32)
        palette = r.uniform(0, 1, (n, 3))
        masks = cams.color_masks(img, palette)
        assert np.abs(masks.sum(axis=0) - 1.0).max() <= 1e-5


class TestResizeMasks:
    def test_identity_dims_unchanged(self, texture64):
        masks = cams.color_masks(texture64, cams.extract_palette(texture64, 3))
        assert np.array_equal(cams.resize_masks(masks, (64, 64)), masks)

    def test_all_ones_stays_ones(self):
        masks = np.ones((1, 32, 32), dtype=np.float32)
        out = cams.resize_masks(masks, (8, 8))
        assert np.array_equal(out, np.ones((1, 8, 8), dtype=np.float32))

    def test_half_half_to_single_pixel(self):
        top = np.zeros((1, 4, 4), dtype=np.float32)
        top[0, :2] = 1.0
        masks = np.concatenate([top, 1.0 - top], axis=0)
        out = cams.resize_masks(masks, (1, 1))
        assert np.allclose(out, 0.5)

    def test_partition_restored_after_downsample(self, texture64):
        masks = cams.color_masks(texture64, cams.extract_palette(texture64, 4))
        out = cams.resize_masks(masks, (16, 16))
        assert np.abs(out.sum(axis=0) - 1.0).max() <= 1e-5


class TestWeightedGram:
    def test_all_ones_equals_plain(self, rng):
        feat = rng.standard_normal((3, 4, 5))
        assert np.allclose(cams.weighted_gram(feat, np.ones((4, 5))),
                           gatys.gram_matrix(feat), rtol=1e-12)

    def test_all_zeros_annihilates(self, rng):
        feat = rng.standard_normal((3, 4, 5))
        assert np.array_equal(cams.weighted_gram(feat, np.zeros((4, 5))), np.zeros((3, 3)))

    def test_hand_summation(self):
        feat = np.array([[[1.0, 2.0]]])  # C=1, 1x2
        mask = np.array([[1.0, 0.0]])
        assert np.array_equal(cams.weighted_gram(feat, mask), np.array([[1.0]]))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatchError):
            cams.weighted_gram(rng.standard_normal((2, 3, 3)), np.ones((2, 3)))

    def test_matches_brute_force(self, rng):
        feat = rng.standard_normal((3, 3, 4))
        mask = rng.uniform(0, 1, (3, 4))
        assert np.allclose(cams.weighted_gram(feat, mask),
                           oracle_weighted_gram(feat, mask), rtol=1e-9)


class TestCamsStyleLoss:
    def _random_case(self, rng, layers=("a", "b"), n_colors=2, c=3, hw=(3, 4)):
        feats_s = {k: rng.standard_normal((c, *hw)) for k in layers}
        feats_o = {k: rng.standard_normal((c, *hw)) for k in layers}
        masks = {k: rng.uniform(0, 1, (n_colors, *hw)) for k in layers}
        return feats_s, feats_o, masks

    def test_identical_zero(self, rng):
        fs, _, masks = self._random_case(rng)
        fo = {k: v.copy() for k, v in fs.items()}
        assert cams.cams_style_loss(fs, fo, masks, masks) == 0.0

    def test_single_color_reduces_to_global_discrepancy(self, rng):
        layers = ("relu1_1", "relu2_1")
        fs = {k: rng.standard_normal((3, 4, 4)) for k in layers}
        fo = {k: rng.standard_normal((3, 4, 4)) for k in layers}
        ones = {k: np.ones((1, 4, 4)) for k in layers}
        got = cams.cams_style_loss(fs, fo, ones, ones)
        expected = sum(
            ((gatys.gram_matrix(fs[k]) - gatys.gram_matrix(fo[k])) ** 2).sum()
            for k in layers
        )
        assert got == expected  # exact reduction

    def test_quadratic_scaling(self, rng):
        fs = {"l": np.zeros((2, 3, 3))}
        fo = {"l": rng.standard_normal((2, 3, 3))}
        masks = {"l": np.ones((1, 3, 3))}
        base = cams.cams_style_loss(fs, fo, masks, masks)
        doubled = cams.cams_style_loss(fs, {"l": 2.0 * fo["l"]}, masks, masks)
        assert doubled == pytest.approx(16.0 * base, rel=1e-9)

    def test_palette_mismatch(self, rng):
        fs, fo, masks = self._random_case(rng, layers=("l",), n_colors=2)
        other = {"l": rng.uniform(0, 1, (3, 3, 4))}
        with pytest.raises(PaletteMismatchError):
            cams.cams_style_loss(fs, fo, masks, other)

    def test_matches_brute_force(self, rng):
        fs, fo, masks = self._random_case(rng)
        got = cams.cams_style_loss(fs, fo, masks, masks)
        expected = oracle_cams_style_loss(fs, fo, masks, masks)
        assert got == pytest.approx(expected, rel=1e-9)


class TestRunCams:
    def test_fixed_point_when_style_is_content(self, encoder, carpet64):
        out, trace = cams.run_cams(carpet64, carpet64,
                                   cams.CamsConfig(iterations=3, palette_size=3),
                                   encoder=encoder)
        assert trace[0] == 0.0
        assert np.array_equal(out, carpet64)

    def test_degenerate_palette_matches_gatys_at_start(self, encoder, carpet64, rng):
        # style = pixel permutation of content -> identical color statistics,
        # so the two single-color palettes merge into one and every mask is 1
        flat = carpet64.reshape(-1, 3)
        style = flat[rng.permutation(len(flat))].reshape(carpet64.shape)
        layer = ("relu3_1",)
        c_cfg = cams.CamsConfig(iterations=1, palette_size=1, style_layers=layer,
                                style_weight=1.0)
        _, cams_trace = cams.run_cams(carpet64, style, c_cfg, encoder=encoder)

        feats = encoder.encode(style, list(layer))
        norm = gatys.style_layer_normalizer(feats["relu3_1"])
        g_cfg = gatys.GatysConfig(iterations=1, style_layers=layer,
                                  content_layers=c_cfg.content_layers,
                                  style_weight=1.0)
        _, gatys_trace = gatys.run_gatys(carpet64, style, g_cfg, encoder=encoder)
        assert cams_trace[0] * norm == pytest.approx(gatys_trace[0], rel=1e-5)

    def test_bit_reproducible(self, encoder, carpet64, texture64):
        cfg = cams.CamsConfig(iterations=3, palette_size=3, seed=4)
        a, _ = cams.run_cams(carpet64, texture64, cfg, encoder=encoder)
        b, _ = cams.run_cams(carpet64, texture64, cfg, encoder=encoder)
        assert np.array_equal(a, b)

    def test_loss_decreases(self, encoder, carpet64, texture64):
        _, trace = cams.run_cams(carpet64, texture64,
                                 cams.CamsConfig(iterations=8, palette_size=3),
                                 encoder=encoder)
        assert trace[-1] < trace[0]
        assert trace[-1] <= trace[0]
