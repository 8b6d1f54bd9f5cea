"""Image buffers, PGM round-trips, bilinear sampling, and tiling."""

from __future__ import annotations

import numpy as np
import pytest

from dagfaces.images import ImageBuffer, bilinear_sample, load_image, save_image, tile_grid

from _oracles import bilinear_oracle


class TestImageBuffer:
    def test_accepts_2d_and_3d(self):
        img2 = ImageBuffer(np.zeros((4, 5)))
        assert (img2.height, img2.width, img2.channels) == (4, 5, 1)
        img3 = ImageBuffer(np.zeros((4, 5, 3)))
        assert img3.channels == 3

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            ImageBuffer(np.zeros((4, 5, 2)))
        with pytest.raises(ValueError):
            ImageBuffer(np.full((3, 3), 1.5))
        with pytest.raises(ValueError):
            ImageBuffer(np.full((3, 3), np.nan))
        with pytest.raises(ValueError):
            ImageBuffer(np.zeros((0, 3)))

    def test_data_is_immutable(self):
        img = ImageBuffer(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            img.data[0, 0, 0] = 1.0

    def test_plane_requires_single_channel(self):
        with pytest.raises(ValueError):
            ImageBuffer(np.zeros((3, 3, 3))).plane()
        assert ImageBuffer(np.zeros((3, 4))).plane().shape == (3, 4)


class TestPgmRoundTrip:
    def test_save_load_roundtrip_is_exact(self, tmp_path):
        # Values on the 8-bit grid (p / 127.5 - 1) survive the round trip.
        rng = np.random.default_rng(1)
        quantized = np.round(rng.uniform(0, 255, size=(7, 9))) / 127.5 - 1.0
        img = ImageBuffer(quantized)
        path = tmp_path / "img.pgm"
        save_image(img, path)
        back = load_image(path)
        assert np.array_equal(back.data, img.data)

    def test_save_load_save_reproduces_bytes(self, tmp_path):
        rng = np.random.default_rng(7)
        img = ImageBuffer(rng.uniform(-1, 1, size=(5, 8)))
        first = tmp_path / "first.pgm"
        second = tmp_path / "second.pgm"
        save_image(img, first)
        save_image(load_image(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_identical_images_produce_identical_bytes(self, tmp_path):
        rng = np.random.default_rng(2)
        img = ImageBuffer(rng.uniform(-1, 1, size=(6, 6)))
        save_image(img, tmp_path / "a.pgm")
        save_image(img, tmp_path / "b.pgm")
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()

    def test_load_rejects_garbage(self, tmp_path):
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"P6\n2 2\n255\n")
        with pytest.raises(ValueError):
            load_image(bad)


class TestBilinearSample:
    def test_integer_coordinates_hit_pixels_exactly(self):
        rng = np.random.default_rng(3)
        data = rng.uniform(-1, 1, size=(5, 7, 1))
        ys, xs = np.mgrid[0:5, 0:7]
        out = bilinear_sample(data, xs.reshape(-1).astype(float), ys.reshape(-1).astype(float))
        assert np.array_equal(out.reshape(5, 7, 1), data)

    def test_near_integer_coordinates_snap(self):
        data = np.arange(9.0).reshape(3, 3, 1) / 8.0
        out = bilinear_sample(data, np.array([1.0 + 4e-10]), np.array([2.0 - 4e-10]))
        assert out[0, 0] == data[2, 1, 0]

    def test_matches_pixel_oracle(self):
        rng = np.random.default_rng(4)
        data = rng.uniform(-1, 1, size=(6, 8, 1))
        for _ in range(200):
            x = float(rng.uniform(-2, 9))
            y = float(rng.uniform(-2, 7))
            got = bilinear_sample(data, np.array([x]), np.array([y]))[0]
            np.testing.assert_allclose(got, bilinear_oracle(data, x, y), atol=1e-12)

    def test_out_of_range_clamps_to_edges(self):
        data = np.arange(4.0).reshape(2, 2, 1) / 3.0
        out = bilinear_sample(data, np.array([-10.0, 10.0]), np.array([-10.0, 10.0]))
        assert out[0, 0] == data[0, 0, 0]
        assert out[1, 0] == data[1, 1, 0]

    def test_midpoint_averages_neighbors(self):
        data = np.array([[[0.0], [1.0]]])
        out = bilinear_sample(data, np.array([0.5]), np.array([0.0]))
        assert out[0, 0] == pytest.approx(0.5)


class TestTileGrid:
    def test_layout_and_padding(self):
        a = ImageBuffer(np.full((4, 4), -1.0))
        b = ImageBuffer(np.full((4, 4), 1.0))
        sheet = tile_grid([[a, b]], pad=1, pad_value=0.0)
        assert (sheet.height, sheet.width) == (6, 11)
        assert sheet.data[0, 0, 0] == 0.0  # border
        assert sheet.data[1, 1, 0] == -1.0  # first tile
        assert sheet.data[1, 6, 0] == 1.0  # second tile

    def test_rejects_mixed_tile_sizes(self):
        a = ImageBuffer(np.zeros((4, 4)))
        b = ImageBuffer(np.zeros((5, 4)))
        with pytest.raises(ValueError):
            tile_grid([[a, b]])
