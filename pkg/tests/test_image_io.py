"""
PNG 读写的测试。
"""

import numpy as np
import pytest

from sceneslots_core.image_io import quantize, read_labels, read_rgb, write_gray, write_labels, write_rgb


class TestQuantize:
    def test_rounding_and_clipping(self):
        image = np.array([[[-0.2, 0.0, 0.5 / 255, 1.0, 1.5]]] * 3)
        q = quantize(image)
        assert q.shape == (1, 5, 3) and q.dtype == np.uint8
        np.testing.assert_array_equal(q[0, :, 0], [0, 0, 1, 255, 255])

    def test_accepts_channels_last(self):
        assert quantize(np.zeros((4, 5, 3))).shape == (4, 5, 3)
        with pytest.raises(ValueError):
            quantize(np.zeros((4, 5)))


class TestFiles:
    def test_rgb_roundtrip_within_half_step(self, tmp_path, rng):
        image = rng.random((3, 6, 7))
        write_rgb(tmp_path / "a.png", image)
        back = read_rgb(tmp_path / "a.png")
        assert back.shape == (3, 6, 7)
        assert np.max(np.abs(back - image)) <= 0.5 / 255 + 1e-12

    def test_labels_roundtrip(self, tmp_path, rng):
        labels = rng.integers(0, 6, size=(5, 5))
        write_labels(tmp_path / "m.png", labels)
        np.testing.assert_array_equal(read_labels(tmp_path / "m.png"), labels)
        with pytest.raises(ValueError):
            write_labels(tmp_path / "bad.png", np.full((2, 2), 300))

    def test_gray_normalization(self, tmp_path):
        write_gray(tmp_path / "g.png", np.array([[0.0, 2.0], [4.0, 8.0]]))
        np.testing.assert_array_equal(read_labels(tmp_path / "g.png"), [[0, 64], [128, 255]])
        write_gray(tmp_path / "z.png", np.zeros((2, 2)))
        np.testing.assert_array_equal(read_labels(tmp_path / "z.png"), 0)
