import math
import unittest

import numpy as np
from numpy.testing import assert_array_equal

from encoder import (
    FeatureVector,
    FrozenEncoders,
    TrainItem,
    bce_loss,
    encode_image,
    encode_text,
    forward,
    frozen_hash,
    grad_prompts,
    init_encoders,
    loss_and_grad,
    predict,
)
from errors import DimensionMismatchError, EmptyInputError
from imaging import BinaryMask, GrayImage
from prompts import (
    VIEW_NAMES,
    PatchEmbeddings,
    PromptParams,
    TokenEmbeddings,
    assemble_image,
    init_prompt_params,
    make_view,
)
from synth import SynthConfig, synthesize
from toydata import make_normal_image


SIZE, PATCH = 12, 4


def small_encoders(seed, activation="gelu", d=8, f=8, bias=-2.0):
    return init_encoders(seed, embed_dim=d, feature_dim=f, patch_pixels=PATCH * PATCH, patch_activation=activation,
                         patch_bias=bias)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return FeatureVector(v / np.linalg.norm(v))


def numeric_grads(item, params, enc, step=1e-5):
    grads = []
    for name in ("text_prompt", "image_prompt"):
        base = getattr(params, name)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            other = params.image_prompt if name == "text_prompt" else params.text_prompt
            if name == "text_prompt":
                lp = forward(item, PromptParams(plus, other), enc).loss
                lm = forward(item, PromptParams(minus, other), enc).loss
            else:
                lp = forward(item, PromptParams(other, plus), enc).loss
                lm = forward(item, PromptParams(other, minus), enc).loss
            g[idx] = (lp - lm) / (2 * step)
        grads.append(g)
    return grads


class TestEncoding(unittest.TestCase):

    def setUp(self):
        self.enc = small_encoders(0)
        self.rng = np.random.default_rng(1)

    def test_single_row_identity_head(self):
        eye = FrozenEncoders(
            embed_table=np.eye(9, 4),
            patch_proj=np.zeros((16, 4)),
            text_head=np.eye(4),
            image_head=np.eye(4),
        )
        row = np.array([[3.0, 0.0, 4.0, 0.0]])
        out = encode_text(TokenEmbeddings(pos=row[:0], cls=row, assembled=row), eye)
        np.testing.assert_allclose(out.values, [0.6, 0.0, 0.8, 0.0], atol=1e-15)

    def test_mean_pool_invariances(self):
        rows = self.rng.normal(size=(5, 8))
        base = encode_text(TokenEmbeddings(rows[:1], rows[-1:], rows), self.enc).values
        doubled = np.vstack([rows, rows])
        np.testing.assert_allclose(encode_text(TokenEmbeddings(rows[:1], rows[-1:], doubled), self.enc).values,
                                   base, atol=1e-12)
        patches = self.rng.normal(size=(9, 8))
        mask = np.ones(9, dtype=bool)
        a = encode_image(PatchEmbeddings(patches, (3, 3), mask), self.enc).values
        b = encode_image(PatchEmbeddings(patches[self.rng.permutation(9)], (3, 3), mask), self.enc).values
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_constant_patches(self):
        row = self.rng.normal(size=8)
        patches = np.tile(row, (9, 1))
        out = encode_image(PatchEmbeddings(patches, (3, 3), np.ones(9, dtype=bool)), self.enc).values
        expected = row @ self.enc.image_head
        np.testing.assert_allclose(out, expected / np.linalg.norm(expected), atol=1e-12)

    def test_unit_norm(self):
        for _ in range(20):
            rows = self.rng.normal(size=(int(self.rng.integers(1, 8)), 8))
            out = encode_text(TokenEmbeddings(rows[:0], rows[:1], rows), self.enc)
            self.assertAlmostEqual(float(np.linalg.norm(out.values)), 1.0, delta=1e-9)

    def test_empty_input(self):
        empty = np.zeros((0, 8))
        with self.assertRaises(EmptyInputError):
            encode_text(TokenEmbeddings(empty, empty, empty), self.enc)
        with self.assertRaises(EmptyInputError):
            encode_image(PatchEmbeddings(empty, (0, 0), np.zeros(0, dtype=bool)), self.enc)

    def test_patch_embedding_width(self):
        self.assertEqual(self.enc.embed_patches(np.zeros((9, 16))).shape, (9, 8))
        with self.assertRaises(DimensionMismatchError):
            self.enc.embed_patches(np.zeros((9, 15)))

    def test_background_patches_sit_at_the_bias(self):
        flat = np.full((9, 16), self.enc.pixel_mean)
        gelu_at_bias = -2.0 * 0.5 * (1.0 + math.erf(-2.0 / math.sqrt(2.0)))
        np.testing.assert_allclose(self.enc.embed_patches(flat), np.full((9, 8), gelu_at_bias), atol=1e-12)
        linear = small_encoders(0, activation="linear", bias=0.5)
        np.testing.assert_allclose(linear.embed_patches(flat), np.full((9, 8), 0.5), atol=1e-15)

    def test_zero_rows_pool_to_zero_feature(self):
        out = encode_image(PatchEmbeddings(np.zeros((9, 8)), (3, 3), np.ones(9, dtype=bool)), self.enc)
        assert_array_equal(out.values, np.zeros(8))
        self.assertEqual(predict(out, unit([1.0] * 8), unit(range(8)), 10.0), 0.5)


class TestPredictAndLoss(unittest.TestCase):

    def test_symmetric_cases(self):
        img = unit([1.0, 0.0, 0.0])
        same = unit([0.5, 0.5, 0.0])
        self.assertEqual(predict(img, same, same, 10.0), 0.5)
        self.assertEqual(predict(img, unit([1, 0, 0]), unit([0, 1, 0]), 0.0), 0.5)

    def test_worked_example(self):
        img = FeatureVector(np.array([1.0, 0.0]))
        normal = FeatureVector(np.array([0.2, math.sqrt(1 - 0.04)]))
        pneu = FeatureVector(np.array([0.6, 0.8]))
        p = predict(img, normal, pneu, 10.0)
        self.assertAlmostEqual(p, 1.0 / (1.0 + math.exp(-4.0)), places=12)
        self.assertAlmostEqual(p, 0.9820, places=4)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            feats = [unit(rng.normal(size=6)) for _ in range(3)]
            q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
            rotated = [FeatureVector(q @ f.values) for f in feats]
            self.assertAlmostEqual(predict(*feats, 10.0), predict(*rotated, 10.0), delta=1e-9)

    def test_bce(self):
        self.assertAlmostEqual(bce_loss(0.5, 0), math.log(2))
        self.assertAlmostEqual(bce_loss(0.5, 1), math.log(2))
        self.assertAlmostEqual(bce_loss(1.0, 1), 1e-7, delta=1e-9)
        self.assertAlmostEqual(bce_loss(0.0, 1), -math.log(1e-7))
        self.assertAlmostEqual(bce_loss(0.9820, 1), 0.018163, places=5)


class TestFrozenEncoders(unittest.TestCase):

    def test_seeded_and_hashed(self):
        a, b = small_encoders(3), small_encoders(3)
        self.assertEqual(frozen_hash(a), frozen_hash(b))
        self.assertNotEqual(frozen_hash(a), frozen_hash(small_encoders(4)))
        self.assertNotEqual(frozen_hash(a), frozen_hash(small_encoders(3, activation="linear")))
        self.assertNotEqual(frozen_hash(a), frozen_hash(small_encoders(3, bias=-1.0)))
        self.assertLess(frozen_hash(a), 2 ** 64)

    def test_weights_read_only(self):
        enc = small_encoders(0)
        with self.assertRaises(ValueError):
            enc.text_head[0, 0] = 1.0

    def test_validation(self):
        with self.assertRaises(ValueError):
            init_encoders(0, embed_dim=4, feature_dim=4, patch_pixels=16, logit_scale=0.0)
        with self.assertRaises(ValueError):
            init_encoders(0, embed_dim=4, feature_dim=4, patch_pixels=16, patch_activation="relu")
        with self.assertRaises(ValueError):
            init_encoders(0, embed_dim=4, feature_dim=4, patch_pixels=16, patch_bias=float("inf"))
        with self.assertRaises(DimensionMismatchError):
            FrozenEncoders(np.zeros((9, 4)), np.zeros((16, 5)), np.zeros((4, 4)), np.zeros((4, 4)))


class TestGradients(unittest.TestCase):

    def _random_case(self, rng, activation="gelu", text_length=2):
        enc = small_encoders(int(rng.integers(0, 2 ** 31)), activation)
        params = init_prompt_params(text_length, 9, 8, 0.5, seed=int(rng.integers(0, 2 ** 31)))
        view = make_view(VIEW_NAMES[int(rng.integers(0, 5))], SIZE, PATCH)
        img = GrayImage(rng.random((SIZE, SIZE)))
        return TrainItem(image=img, view=view, label=int(rng.integers(0, 2))), params, enc

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2023)
        checked = 0
        for case in range(500):
            if checked == 50:
                break
            item, params, enc = self._random_case(rng, "gelu" if case % 2 == 0 else "linear")
            if not 1e-6 < forward(item, params, enc).probability < 1 - 1e-6:
                continue
            checked += 1
            analytic = grad_prompts(item, params, enc)
            numeric_t, numeric_i = numeric_grads(item, params, enc)
            a = np.concatenate([analytic.text_prompt.ravel(), analytic.image_prompt.ravel()])
            n = np.concatenate([numeric_t.ravel(), numeric_i.ravel()])
            scale = max(np.abs(a).max(), np.abs(n).max())
            self.assertLess(np.abs(a - n).max() / scale, 1e-4, f"case {case}")
        self.assertEqual(checked, 50)

    def test_scaled_loss_scales_both_gradients(self):
        rng = np.random.default_rng(31)
        item, params, _ = self._random_case(rng)
        left = make_view("left_lung", SIZE, PATCH)
        item = TrainItem(item.image, left, 1)
        enc = small_encoders(4)
        loss, grads = loss_and_grad(item, params, enc)
        self.assertTrue(np.any(grads.text_prompt != 0.0) and np.any(grads.image_prompt != 0.0))
        for c in (0.25, 3.0, 10.0):
            scaled_loss, scaled = loss_and_grad(item, params, enc, loss_scale=c)
            self.assertAlmostEqual(scaled_loss, c * loss, delta=1e-12 * c)
            np.testing.assert_allclose(scaled.text_prompt, c * grads.text_prompt, rtol=1e-12, atol=1e-15)
            np.testing.assert_allclose(scaled.image_prompt, c * grads.image_prompt, rtol=1e-12, atol=1e-15)

    def test_zero_image_feature(self):
        # unbiased linear patches of a flat image at the pixel mean all embed to zero
        enc = small_encoders(2, activation="linear", bias=0.0)
        params = init_prompt_params(2, 9, 8, 0.5, seed=3)
        flat = GrayImage(np.full((SIZE, SIZE), enc.pixel_mean))
        for label in (0, 1):
            item = TrainItem(flat, make_view("entire", SIZE, PATCH), label)
            fp = forward(item, params, enc)
            assert_array_equal(fp.image.feature, np.zeros(8))
            self.assertEqual(fp.probability, 0.5)
            loss, grads = loss_and_grad(item, params, enc)
            self.assertAlmostEqual(loss, math.log(2), places=12)
            numeric_t, numeric_i = numeric_grads(item, params, enc)
            assert_array_equal(grads.text_prompt, np.zeros_like(params.text_prompt))
            assert_array_equal(grads.image_prompt, np.zeros_like(params.image_prompt))
            np.testing.assert_allclose(numeric_t, 0.0, atol=1e-9)
            np.testing.assert_allclose(numeric_i, 0.0, atol=1e-9)

    def test_kept_patch_rows_get_zero_gradient(self):
        rng = np.random.default_rng(5)
        item, params, enc = self._random_case(rng)
        for name in VIEW_NAMES:
            view = make_view(name, SIZE, PATCH)
            g = grad_prompts(TrainItem(item.image, view, 1), params, enc).image_prompt
            self.assertTrue(np.all(g[view.patch_mask] == 0.0))
            if name == "entire":
                assert_array_equal(g, np.zeros_like(g))
            else:
                self.assertTrue(np.any(g[~view.patch_mask] != 0.0))

    def test_image_view_override(self):
        rng = np.random.default_rng(6)
        item, params, enc = self._random_case(rng)
        left = make_view("left_lung", SIZE, PATCH)
        entire = make_view("entire", SIZE, PATCH)
        _, grads = loss_and_grad(TrainItem(item.image, left, 1, image_view=entire), params, enc)
        assert_array_equal(grads.image_prompt, np.zeros_like(grads.image_prompt))
        self.assertTrue(np.any(grads.text_prompt != 0.0))

    def test_no_text_prompt(self):
        rng = np.random.default_rng(7)
        item, params, enc = self._random_case(rng, text_length=0)
        loss, grads = loss_and_grad(item, params, enc)
        self.assertEqual(grads.text_prompt.shape, (0, 8))
        self.assertGreater(loss, 0.0)

    def test_descent_direction(self):
        rng = np.random.default_rng(9)
        item, params, enc = self._random_case(rng)
        loss, grads = loss_and_grad(item, params, enc)
        stepped = PromptParams(params.text_prompt - 1e-3 * grads.text_prompt,
                               params.image_prompt - 1e-3 * grads.image_prompt)
        self.assertLess(forward(item, stepped, enc).loss, loss)


class TestFrozenFeatures(unittest.TestCase):

    def test_synthesized_lesions_leave_the_normal_cluster(self):
        size, patch = 64, 16
        enc = init_encoders(0, patch_pixels=patch * patch)
        view = make_view("entire", size, patch)
        params = PromptParams(np.zeros((4, enc.embed_dim)), np.zeros(((size // patch) ** 2, enc.embed_dim)))

        def feature(img):
            return encode_image(assemble_image(img, view, params, enc.embed_patches), enc).values

        prototype = np.mean([feature(make_normal_image(size, 100 + s)) for s in range(8)], axis=0)
        prototype /= np.linalg.norm(prototype)
        normal = [float(feature(make_normal_image(size, s)) @ prototype) for s in range(12)]
        abnormal = []
        for s in range(12):
            result = synthesize(make_normal_image(size, 200 + s), BinaryMask.full(size, size),
                                SynthConfig(apply_probability=1.0, seed=s))
            abnormal.append(float(feature(result.image) @ prototype))
        ordered = np.mean([n > a for n in normal for a in abnormal])
        self.assertGreaterEqual(ordered, 0.75)


if __name__ == '__main__':
    unittest.main()
