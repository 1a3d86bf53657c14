import tempfile
import unittest
from pathlib import Path

import numpy as np
from numpy.testing import assert_array_equal
from PIL import Image

from errors import (
    DimensionMismatchError,
    ImageNotFoundError,
    PPADIOError,
    UnsupportedFormatError,
    ZeroDimensionError,
)
from imaging import (
    BinaryMask,
    GrayImage,
    check_same_shape,
    list_dataset,
    load_image,
    overlay_points,
    overlay_polyline,
    save_image,
    save_mask,
    to_bytes,
)
from maskgen import Point2D


class TestGrayImage(unittest.TestCase):

    def test_valid_image_is_read_only_copy(self):
        raw = np.full((4, 6), 0.25)
        img = GrayImage(raw)
        raw[0, 0] = 0.9
        self.assertEqual(img.shape, (4, 6))
        self.assertEqual((img.height, img.width), (4, 6))
        self.assertEqual(img.data[0, 0], 0.25)
        with self.assertRaises(ValueError):
            img.data[0, 0] = 1.0

    def test_rejects_out_of_range(self):
        with self.assertRaises(ValueError):
            GrayImage(np.array([[0.0, 1.5]]))
        with self.assertRaises(ValueError):
            GrayImage(np.array([[np.nan, 0.5]]))

    def test_rejects_bad_shapes(self):
        with self.assertRaises(DimensionMismatchError):
            GrayImage(np.zeros(5))
        with self.assertRaises(ZeroDimensionError):
            GrayImage(np.zeros((0, 3)))


class TestBinaryMask(unittest.TestCase):

    def test_empty_and_full(self):
        self.assertTrue(BinaryMask.empty(3, 4).is_empty())
        self.assertEqual(BinaryMask.full(3, 4).area, 12)

    def test_rejects_non_binary_values(self):
        with self.assertRaises(ValueError):
            BinaryMask(np.array([[0, 2]]))

    def test_accepts_zero_one_integers(self):
        mask = BinaryMask(np.array([[0, 1], [1, 1]]))
        self.assertEqual(mask.data.dtype, np.bool_)
        self.assertEqual(mask.area, 3)

    def test_check_same_shape(self):
        with self.assertRaises(DimensionMismatchError):
            check_same_shape(GrayImage(np.zeros((2, 2))), BinaryMask.empty(2, 3))


class TestFileIO(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_uniform_128_graymap(self):
        path = self.root / "flat.pgm"
        Image.fromarray(np.full((224, 224), 128, dtype=np.uint8)).save(path, format="PPM")
        img = load_image(path)
        self.assertEqual(img.shape, (224, 224))
        np.testing.assert_allclose(img.data, 128 / 255, atol=1e-12)

    def _write_graymap(self, name, levels):
        path = self.root / name
        Image.fromarray(np.asarray(levels, dtype=np.uint8)).save(path, format="PPM")
        return path

    def test_checkerboard_graymap(self):
        img = load_image(self._write_graymap("check.pgm", [[0, 255], [255, 0]]), target_size=2)
        assert_array_equal(img.data, [[0.0, 1.0], [1.0, 0.0]])

    def test_single_pixel_graymap(self):
        img = load_image(self._write_graymap("one.pgm", [[128]]), target_size=1)
        self.assertEqual(img.shape, (1, 1))
        self.assertEqual(img.data[0, 0], 128 / 255)

    def test_downsampled_constant_stays_constant(self):
        img = load_image(self._write_graymap("flat4.pgm", np.full((4, 4), 64)), target_size=2)
        self.assertEqual(img.shape, (2, 2))
        np.testing.assert_allclose(img.data, 64 / 255, atol=1e-6)

    def test_resize_stays_in_unit_range(self):
        rng = np.random.default_rng(3)
        path = self._write_graymap("noise.pgm", rng.integers(0, 256, size=(10, 7)))
        for target in (3, 16, 37):
            data = load_image(path, target_size=target).data
            self.assertEqual(data.shape, (target, target))
            self.assertTrue(np.all((data >= 0.0) & (data <= 1.0)))

    def test_off_grid_values_survive_within_one_level(self):
        rng = np.random.default_rng(4)
        img = GrayImage(rng.random((8, 8)))
        path = self.root / "off_grid.pgm"
        save_image(img, path)
        loaded = load_image(path, target_size=8)
        self.assertLessEqual(float(np.abs(loaded.data - img.data).max()), 1 / 255)

    def test_resize_to_target(self):
        path = self.root / "small.png"
        Image.fromarray(np.full((10, 20), 255, dtype=np.uint8)).save(path)
        img = load_image(path, target_size=32)
        self.assertEqual(img.shape, (32, 32))
        np.testing.assert_allclose(img.data, 1.0, atol=1e-6)

    def test_rgb_png_is_averaged(self):
        path = self.root / "rgb.png"
        rgb = np.zeros((8, 8, 3), dtype=np.uint8)
        rgb[..., 0] = 255
        Image.fromarray(rgb).save(path)
        img = load_image(path, target_size=8)
        np.testing.assert_allclose(img.data, 1.0 / 3.0, atol=1e-12)

    def test_missing_file(self):
        with self.assertRaises(ImageNotFoundError):
            load_image(self.root / "nope.pgm")

    def test_unsupported_format(self):
        path = self.root / "notes.txt"
        path.write_text("hello")
        with self.assertRaises(UnsupportedFormatError):
            load_image(path)

    def test_corrupt_graymap(self):
        path = self.root / "bad.pgm"
        path.write_bytes(b"not an image at all")
        with self.assertRaises(UnsupportedFormatError):
            load_image(path)

    def test_save_then_load_keeps_bytes(self):
        rng = np.random.default_rng(0)
        img = GrayImage(rng.integers(0, 256, size=(16, 16)) / 255.0)
        path = self.root / "nested" / "out.pgm"
        save_image(img, path)
        self.assertTrue(path.read_bytes().startswith(b"P5"))
        assert_array_equal(to_bytes(load_image(path, 16).data), to_bytes(img.data))

    def test_save_mask_values(self):
        mask = BinaryMask(np.eye(4, dtype=bool))
        path = self.root / "mask.pgm"
        save_mask(mask, path)
        with Image.open(path) as im:
            assert_array_equal(np.asarray(im), np.eye(4, dtype=np.uint8) * 255)

    def test_save_into_unwritable_location(self):
        blocker = self.root / "file"
        blocker.write_text("x")
        with self.assertRaises(PPADIOError):
            save_image(GrayImage(np.zeros((2, 2))), blocker / "sub" / "out.pgm")

    def test_to_bytes_rounds_half_up(self):
        assert_array_equal(to_bytes(np.array([0.0, 0.5, 1.0])), [0, 128, 255])

    def test_list_dataset(self):
        for name in ("normal/b.pgm", "normal/a.png", "abnormal/c.pgm", "normal/skip.txt"):
            p = self.root / name
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(b"")
        normal, abnormal = list_dataset(self.root)
        self.assertEqual([p.name for p in normal], ["a.png", "b.pgm"])
        self.assertEqual([p.name for p in abnormal], ["c.pgm"])
        self.assertEqual(list_dataset(self.root / "missing"), ([], []))


class TestOverlays(unittest.TestCase):

    def test_points_marked(self):
        img = GrayImage(np.zeros((9, 9)))
        out = overlay_points(img, [Point2D(4.5, 4.5)], radius=1)
        self.assertEqual(out.data.sum(), 9.0)
        self.assertEqual(out.data[4, 4], 1.0)

    def test_closed_polyline_touches_vertices(self):
        img = GrayImage(np.zeros((10, 10)))
        square = [Point2D(1.5, 1.5), Point2D(8.5, 1.5), Point2D(8.5, 8.5), Point2D(1.5, 8.5)]
        out = overlay_polyline(img, square)
        for r, c in ((1, 1), (1, 8), (8, 8), (8, 1), (5, 1)):
            self.assertEqual(out.data[r, c], 1.0)
        self.assertEqual(out.data[5, 5], 0.0)


if __name__ == '__main__':
    unittest.main()
