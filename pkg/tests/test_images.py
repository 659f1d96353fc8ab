import numpy as np
import pytest

from helmstereo.errors import ImageFormatError, OutOfBounds
from helmstereo.images import (
    gaussian_prefilter,
    read_image,
    read_pfm,
    read_pgm,
    sample_bilinear_many,
    sample_intensity,
    write_pfm,
    write_pgm,
    write_png_heatmap,
)


class TestPfm:
    def test_roundtrip_gray(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.normal(size=(17, 23)).astype(np.float32).astype(np.float64)
        path = tmp_path / "x.pfm"
        write_pfm(path, img)
        assert np.array_equal(read_pfm(path), img)

    def test_roundtrip_color(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.normal(size=(9, 11, 3)).astype(np.float32).astype(np.float64)
        path = tmp_path / "c.pfm"
        write_pfm(path, img)
        assert np.array_equal(read_pfm(path), img)

    def test_write_is_deterministic(self, tmp_path):
        img = np.linspace(0, 1, 48).reshape(6, 8)
        write_pfm(tmp_path / "a.pfm", img)
        write_pfm(tmp_path / "b.pfm", img)
        assert (tmp_path / "a.pfm").read_bytes() == (tmp_path / "b.pfm").read_bytes()

    def test_header_little_endian_scale(self, tmp_path):
        write_pfm(tmp_path / "h.pfm", np.zeros((2, 2)))
        head = (tmp_path / "h.pfm").read_bytes()[:16]
        assert head.startswith(b"Pf\n2 2\n-1.0\n")

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.pfm"
        p.write_bytes(b"P5\n2 2\n255\n....")
        with pytest.raises(ImageFormatError):
            read_pfm(p)


class TestPgm:
    @pytest.mark.parametrize("dtype,maxval", [(np.uint8, 255), (np.uint16, 65535)])
    def test_roundtrip(self, tmp_path, dtype, maxval):
        rng = np.random.default_rng(2)
        img = rng.integers(0, maxval + 1, size=(5, 7)).astype(dtype)
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        assert np.array_equal(read_pgm(path), img)

    def test_read_image_scales_to_unit(self, tmp_path):
        img = np.array([[0, 255]], dtype=np.uint8)
        path = tmp_path / "u.pgm"
        write_pgm(path, img)
        assert np.allclose(read_image(path), [[0.0, 1.0]])


class TestGaussianPrefilter:
    def test_sigma_zero_identity(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(12, 12))
        assert np.array_equal(gaussian_prefilter(img, 0.0), img)

    def test_preserves_constants(self):
        img = np.full((20, 20), 7.0)
        assert np.allclose(gaussian_prefilter(img, 1.5), 7.0)

    def test_impulse_center_value(self):
        # Discrete 2-D Gaussian center weight at sigma 1 is ~1/(2 pi).
        img = np.zeros((21, 21))
        img[10, 10] = 1.0
        out = gaussian_prefilter(img, 1.0)
        assert abs(out[10, 10] - 1.0 / (2.0 * np.pi)) < 0.02 / (2.0 * np.pi)

    def test_linear_in_image(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(16, 16))
        b = rng.uniform(size=(16, 16))
        lhs = gaussian_prefilter(2.0 * a + 3.0 * b, 1.2)
        rhs = 2.0 * gaussian_prefilter(a, 1.2) + 3.0 * gaussian_prefilter(b, 1.2)
        assert np.allclose(lhs, rhs)


class TestSampling:
    def test_constant_image(self):
        img = np.full((8, 8), 7.0)
        assert sample_intensity(img, (3.3, 4.7)) == pytest.approx(7.0)

    def test_bilinear_midpoint(self):
        img = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert sample_intensity(img, (0.5, 0.0)) == pytest.approx(0.5)

    def test_out_of_bounds_raises(self):
        img = np.zeros((4, 4))
        with pytest.raises(OutOfBounds):
            sample_intensity(img, (4.5, 1.0))

    def test_linearity_in_image_values(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(6, 6))
        b = rng.uniform(size=(6, 6))
        pix = rng.uniform(0, 5, size=(40, 2))
        va, _ = sample_bilinear_many(a, pix)
        vb, _ = sample_bilinear_many(b, pix)
        vab, _ = sample_bilinear_many(3.0 * a - 0.5 * b, pix)
        assert np.allclose(vab, 3.0 * va - 0.5 * vb)

    def test_exact_at_pixel_centers(self):
        rng = np.random.default_rng(6)
        img = rng.uniform(size=(5, 9))
        for y in range(5):
            for x in range(9):
                assert sample_intensity(img, (x, y)) == pytest.approx(img[y, x])


def test_heatmap_writes_png(tmp_path):
    vals = np.arange(20.0).reshape(4, 5)
    vals[0, 0] = np.nan
    write_png_heatmap(tmp_path / "h.png", vals)
    assert (tmp_path / "h.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
