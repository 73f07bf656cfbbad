import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from escgan.audio_io import AudioClip
from escgan.scalogram import (InputTooShortError, ScalogramConfig, Spectrogram, dwt_power,
                              hist_equalize, read_pgm, to_image, write_pgm)

SMALL = ScalogramConfig(width=64, height=48, frame_ms=10, sample_rate=8000, fmin=50)


def tone(freq, seconds=0.5, rate=8000, amp=0.5):
    t = np.arange(int(rate * seconds)) / rate
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), rate)


def eq(pixels):
    return hist_equalize(Spectrogram(np.asarray(pixels, dtype=np.uint8))).pixels


images = hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=24))


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(width=0), dict(overlap=1.0), dict(overlap=0.0),
                                        dict(frame_ms=-1), dict(fmin=5000)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ScalogramConfig(**kwargs)

    def test_scales_span_band(self):
        f = SMALL.frequencies()
        assert f[0] == pytest.approx(4000) and f[-1] == pytest.approx(50)
        assert np.all(np.diff(f) < 0)


class TestDwtPower:
    def test_zero_clip(self):
        assert np.all(dwt_power(AudioClip(np.zeros(4000), 8000), SMALL) == 0.0)

    def test_shape_independent_of_length(self):
        for n in (80, 1000, 12345):
            assert dwt_power(AudioClip(np.random.default_rng(n).standard_normal(n) * 0.1, 8000), SMALL).shape == (48, 64)

    def test_too_short(self):
        with pytest.raises(InputTooShortError):
            dwt_power(AudioClip(np.ones(10), 8000), SMALL)

    def test_quadratic_homogeneity(self):
        x = np.random.default_rng(0).uniform(-0.4, 0.4, 4000)
        a = dwt_power(AudioClip(x, 8000), SMALL)
        b = dwt_power(AudioClip(2 * x, 8000), SMALL)
        np.testing.assert_allclose(b, 4 * a, rtol=1e-9, atol=1e-300)

    @pytest.mark.parametrize("freq", [200, 700, 1800])
    def test_tonal_line(self, freq):
        grid = dwt_power(tone(freq), SMALL)
        rows = np.argmax(grid, axis=0)
        dominant = np.bincount(rows).argmax()
        assert np.mean(rows == dominant) >= 0.9
        # the analytic resonance of the chosen scale is the nearest to the tone frequency
        assert dominant == np.argmin(np.abs(np.log(SMALL.frequencies() / freq)))

    def test_resamples_to_config_rate(self):
        x = np.sin(2 * np.pi * 500 * np.arange(16000) / 16000)
        grid = dwt_power(AudioClip(x, 16000), SMALL)
        assert grid.shape == (48, 64)
        assert np.argmax(grid.mean(axis=1)) == np.argmin(np.abs(np.log(SMALL.frequencies() / 500)))


class TestToImage:
    def test_constant(self):
        assert np.all(to_image(np.full((4, 5), 3.0)).pixels == 0)

    def test_two_values(self):
        assert set(np.unique(to_image(np.array([[1.0, 5.0], [5.0, 1.0]])).pixels)) == {0, 255}

    def test_three_decades_ramp(self):
        img = to_image(np.logspace(0, 3, 200).reshape(10, 20))
        assert np.unique(img.pixels).size >= 8

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            to_image(np.array([[-1.0]]))


class TestHistEqualize:
    @pytest.mark.parametrize("c", [0, 17, 255])
    def test_constant_goes_white(self, c):
        assert np.all(eq(np.full((3, 4), c)) == 255)

    def test_two_level_fixture(self):
        np.testing.assert_array_equal(eq([[0, 0], [255, 255]]), [[127, 127], [255, 255]])

    def test_uniform_histogram_fixed_point(self):
        px = np.random.default_rng(1).permutation(np.arange(256)).reshape(16, 16)
        np.testing.assert_array_equal(eq(px), px)

    @settings(max_examples=100, deadline=None)
    @given(images)
    def test_idempotent(self, px):
        once = eq(px)
        np.testing.assert_array_equal(eq(once), once)

    @settings(max_examples=100, deadline=None)
    @given(images)
    def test_monotone(self, px):
        out = eq(px)
        order = np.argsort(px.ravel(), kind="stable")
        assert np.all(np.diff(out.ravel()[order].astype(int)) >= 0)

    def test_metadata_kept(self):
        img = Spectrogram(np.zeros((2, 2), np.uint8), SMALL, "a__t1", "dog")
        out = hist_equalize(img)
        assert (out.clip_id, out.label, out.config) == ("a__t1", "dog", SMALL)


class TestPgm:
    @settings(max_examples=30, deadline=None)
    @given(images)
    def test_roundtrip(self, tmp_path_factory, px):
        path = tmp_path_factory.mktemp("pgm") / "x.pgm"
        write_pgm(path, px)
        np.testing.assert_array_equal(read_pgm(path), px)

    def test_header_bytes(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.zeros((2, 3), np.uint8))
        assert (tmp_path / "a.pgm").read_bytes() == b"P5\n3 2\n255\n" + bytes(6)

    def test_comment_in_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x05\x06")
        np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[5, 6]])

    @pytest.mark.parametrize("payload", [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00"])
    def test_rejects(self, tmp_path, payload):
        (tmp_path / "b.pgm").write_bytes(payload)
        with pytest.raises(ValueError):
            read_pgm(tmp_path / "b.pgm")


class TestSpectrogram:
    def test_out_of_range(self):
        with pytest.raises(ValueError):
            Spectrogram(np.array([[300]]))

    def test_not_2d(self):
        with pytest.raises(ValueError):
            Spectrogram(np.zeros(4, np.uint8))
