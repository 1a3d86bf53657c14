import unittest

import numpy as np
from numpy.testing import assert_array_equal

from errors import DimensionMismatchError, UnknownWordError
from imaging import BinaryMask, GrayImage
from prompts import (
    PROMPT_MODES,
    TOKEN_IDS,
    VIEW_NAMES,
    PositionView,
    PromptParams,
    assemble_image,
    assemble_text,
    build_views,
    extract_patches,
    get_mode,
    image_view_for,
    init_prompt_params,
    make_view,
    patch_grid,
    tokenize,
    views_for_mode,
)


def mean_embed(patches):
    """Stand-in patch map: each patch becomes its mean pixel repeated across d = 3."""
    return np.repeat(patches.mean(axis=1, keepdims=True), 3, axis=1)


class TestTokenize(unittest.TestCase):

    def test_known_words(self):
        self.assertEqual(tokenize("left lung"), [TOKEN_IDS["left"], TOKEN_IDS["lung"]])
        self.assertEqual(tokenize("pneumonia"), [TOKEN_IDS["pneumonia"]])
        self.assertEqual(tokenize(["upper", "lung"]), [TOKEN_IDS["upper"], TOKEN_IDS["lung"]])

    def test_empty_prefix(self):
        self.assertEqual(tokenize(""), [TOKEN_IDS["<empty>"]])

    def test_unknown_word(self):
        with self.assertRaises(UnknownWordError):
            tokenize("left kidney")


class TestViews(unittest.TestCase):

    def setUp(self):
        self.views = {v.name: v for v in build_views(224, 32)}

    def test_order_and_names(self):
        self.assertEqual([v.name for v in build_views(224, 32)], list(VIEW_NAMES))

    def test_entire_view(self):
        entire = self.views["entire"]
        self.assertTrue(entire.is_entire)
        self.assertTrue(entire.region_mask.data.all())
        self.assertTrue(entire.patch_mask.all())
        self.assertEqual(entire.prefix, "")
        self.assertEqual(entire.prefix_tokens, (TOKEN_IDS["<empty>"],))

    def test_halves_cover_the_image(self):
        left = self.views["left_lung"].region_mask.data
        right = self.views["right_lung"].region_mask.data
        upper = self.views["upper_lung"].region_mask.data
        lower = self.views["lower_lung"].region_mask.data
        self.assertTrue(np.all(left | right))
        self.assertFalse(np.any(left & right))
        self.assertTrue(np.all(upper | lower))
        self.assertFalse(np.any(upper & lower))
        self.assertTrue(left[:, :112].all())
        self.assertFalse(left[:, 112:].any())

    def test_left_patch_columns(self):
        grid = self.views["left_lung"].patch_mask.reshape(7, 7)
        self.assertTrue(grid[:, :4].all())
        self.assertFalse(grid[:, 4:].any())
        self.assertEqual(int(grid.sum()), 28)

    def test_aligned_patches_match_every_pixel_rule(self):
        view = make_view("upper_lung", 64, 16)
        grid = view.patch_mask.reshape(4, 4)
        self.assertTrue(grid[:2].all())
        self.assertFalse(grid[2:].any())

    def test_patch_grid_validation(self):
        self.assertEqual(patch_grid(224, 32), (7, 7))
        with self.assertRaises(DimensionMismatchError):
            patch_grid(100, 32)


class TestModes(unittest.TestCase):

    def test_mode_table(self):
        self.assertEqual(set(PROMPT_MODES), {"zero_shot", "text", "position_text", "position_text_image"})
        self.assertFalse(get_mode("zero_shot").trainable)
        with self.assertRaises(ValueError):
            get_mode("everything")

    def test_views_for_mode(self):
        self.assertEqual([v.name for v in views_for_mode(get_mode("text"), 64, 16)], ["entire"])
        self.assertEqual(len(views_for_mode(get_mode("position_text_image"), 64, 16)), 5)

    def test_image_view_for(self):
        left = make_view("left_lung", 64, 16)
        self.assertIs(image_view_for(left, get_mode("position_text_image"), 64, 16), left)
        self.assertEqual(image_view_for(left, get_mode("position_text"), 64, 16).name, "entire")


class TestPromptParams(unittest.TestCase):

    def test_init_shapes_and_determinism(self):
        a = init_prompt_params(4, 49, 8, 0.02, seed=3)
        b = init_prompt_params(4, 49, 8, 0.02, seed=3)
        self.assertEqual(a.text_prompt.shape, (4, 8))
        self.assertEqual(a.image_prompt.shape, (49, 8))
        assert_array_equal(a.text_prompt, b.text_prompt)
        assert_array_equal(a.image_prompt, b.image_prompt)

    def test_validation(self):
        with self.assertRaises(DimensionMismatchError):
            PromptParams(np.zeros((2, 4)), np.zeros((4, 5)))
        with self.assertRaises(ValueError):
            PromptParams(np.array([[np.inf, 0.0]]), np.zeros((4, 2)))

    def test_read_only(self):
        params = init_prompt_params(2, 4, 3, 0.02, seed=0)
        with self.assertRaises(ValueError):
            params.text_prompt[0, 0] = 1.0


class TestAssembleText(unittest.TestCase):

    def setUp(self):
        self.table = np.random.default_rng(0).normal(size=(len(TOKEN_IDS), 5))
        self.left = make_view("left_lung", 64, 16)

    def test_row_arithmetic(self):
        params = init_prompt_params(4, 16, 5, 0.02, seed=0)
        tokens = assemble_text(self.left, "normal", params, self.table)
        self.assertEqual(tokens.assembled.shape, (7, 5))
        self.assertEqual(tokens.prompt_length, 4)
        assert_array_equal(tokens.assembled[:2], self.table[[TOKEN_IDS["left"], TOKEN_IDS["lung"]]])
        assert_array_equal(tokens.assembled[2:6], params.text_prompt)
        assert_array_equal(tokens.assembled[6], self.table[TOKEN_IDS["normal"]])

    def test_no_text_prompt(self):
        params = init_prompt_params(0, 16, 5, 0.02, seed=0)
        tokens = assemble_text(self.left, "pneumonia", params, self.table)
        assert_array_equal(tokens.assembled, np.vstack([tokens.pos, tokens.cls]))

    def test_class_names_differ_only_in_last_row(self):
        params = init_prompt_params(3, 16, 5, 0.02, seed=1)
        a = assemble_text(self.left, "normal", params, self.table).assembled
        b = assemble_text(self.left, "pneumonia", params, self.table).assembled
        assert_array_equal(a[:-1], b[:-1])
        self.assertFalse(np.array_equal(a[-1], b[-1]))

    def test_width_mismatch(self):
        params = init_prompt_params(2, 16, 4, 0.02, seed=0)
        with self.assertRaises(DimensionMismatchError):
            assemble_text(self.left, "normal", params, self.table)


class TestAssembleImage(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(4)
        self.img = GrayImage(rng.random((64, 64)))
        self.params = init_prompt_params(2, 16, 3, 0.5, seed=2)

    def test_extract_patches_row_major(self):
        data = np.arange(16.0).reshape(4, 4)
        patches = extract_patches(data, 2)
        assert_array_equal(patches[0], [0, 1, 4, 5])
        assert_array_equal(patches[1], [2, 3, 6, 7])
        assert_array_equal(patches[3], [10, 11, 14, 15])

    def test_entire_view_uses_patch_embeddings(self):
        out = assemble_image(self.img, make_view("entire", 64, 16), self.params, mean_embed)
        assert_array_equal(out.patches, mean_embed(extract_patches(self.img.data, 16)))
        self.assertEqual(out.grid, (4, 4))

    def test_all_zero_patch_mask_uses_prompt(self):
        entire = make_view("entire", 64, 16)
        hidden = PositionView(
            name="hidden",
            region_mask=BinaryMask.empty(64, 64),
            patch_mask=np.zeros(16, dtype=bool),
            prefix="",
            prefix_tokens=entire.prefix_tokens,
        )
        out = assemble_image(self.img, hidden, self.params, mean_embed)
        assert_array_equal(out.patches, self.params.image_prompt)

    def test_rows_are_never_blended(self):
        view = make_view("lower_lung", 64, 16)
        out = assemble_image(self.img, view, self.params, mean_embed)
        embedded = mean_embed(extract_patches(self.img.data, 16))
        for p, keep in enumerate(view.patch_mask):
            expected = embedded[p] if keep else self.params.image_prompt[p]
            assert_array_equal(out.patches[p], expected)

    def test_masked_pixels_cannot_leak(self):
        view = make_view("left_lung", 48, 16)
        params = init_prompt_params(2, 9, 3, 0.5, seed=2)
        base = np.full((48, 48), 0.3)
        changed = base.copy()
        changed[:, 24:] = 0.9
        a = assemble_image(GrayImage(base), view, params, mean_embed)
        b = assemble_image(GrayImage(changed), view, params, mean_embed)
        assert_array_equal(a.patches, b.patches)

    def test_shape_errors(self):
        with self.assertRaises(DimensionMismatchError):
            assemble_image(GrayImage(np.zeros((32, 32))), make_view("entire", 64, 16), self.params, mean_embed)
        wrong = init_prompt_params(2, 9, 3, 0.5, seed=2)
        with self.assertRaises(DimensionMismatchError):
            assemble_image(self.img, make_view("entire", 64, 16), wrong, mean_embed)


if __name__ == '__main__':
    unittest.main()
