"""Compiled kernels against the numpy fallback."""

import subprocess
import sys

import numpy as np
import pytest

from escgan import _fallback, kernels
from escgan.surf import integral

try:
    from escgan import _kernels
except ImportError:  # pragma: no cover - only when the extension was not built
    _kernels = None

needs_ext = pytest.mark.skipif(_kernels is None, reason="compiled extension not built")


def image(seed, shape=(40, 56)):
    return np.random.default_rng(seed).integers(0, 256, shape).astype(np.float64)


@needs_ext
class TestParity:
    @pytest.mark.parametrize("size,step", [(9, 1), (15, 2), (21, 1), (27, 4), (51, 2)])
    def test_hessian_map(self, size, step):
        ii = integral(image(size))
        a = _kernels.hessian_map(ii, size, step)
        b = _fallback.hessian_map(ii, size, step)
        np.testing.assert_allclose(np.asarray(a), b, rtol=1e-12, atol=1e-9)

    def test_hessian_map_tiny_image(self):
        ii = integral(image(0, (5, 5)))
        np.testing.assert_array_equal(np.asarray(_kernels.hessian_map(ii, 9, 1)), _fallback.hessian_map(ii, 9, 1))

    @pytest.mark.parametrize("size", [2, 4, 7, 10])
    def test_haar_sample_exact(self, size):
        ii = integral(image(size))
        rng = np.random.default_rng(size)
        rows = rng.integers(-5, 45, 300).astype(np.int64)
        cols = rng.integers(-5, 61, 300).astype(np.int64)
        dx1, dy1 = _kernels.haar_sample(ii, rows, cols, size)
        dx2, dy2 = _fallback.haar_sample(ii, rows, cols, size)
        np.testing.assert_array_equal(np.asarray(dx1), dx2)
        np.testing.assert_array_equal(np.asarray(dy1), dy2)

    @pytest.mark.parametrize("seed", range(30))
    def test_gini_split_scan(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 60))
        k = int(rng.integers(2, 5))
        xs = np.sort(rng.integers(0, 8, n).astype(np.float64))
        ys = rng.integers(0, k, n).astype(np.int64)
        min_leaf = int(rng.integers(1, 4))
        pa, sa = _kernels.gini_split_scan(xs, ys, k, min_leaf)
        pb, sb = _fallback.gini_split_scan(xs, ys, k, min_leaf)
        assert pa == pb
        assert sa == pytest.approx(sb, rel=1e-12)


class TestDispatch:
    def test_backend_reported(self):
        assert kernels.BACKEND in ("cython", "python")
        if _kernels is not None:
            assert kernels.BACKEND == "cython"

    def test_environment_forces_fallback(self):
        code = "from escgan import kernels; print(kernels.BACKEND)"
        out = subprocess.run([sys.executable, "-c", code], env={"ESCGAN_PURE_PYTHON": "1", "PATH": ""},
                             capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"


class TestFallback:
    def test_gini_scan_simple(self):
        pos, score = _fallback.gini_split_scan(np.array([0.0, 0.0, 1.0, 1.0]), np.array([0, 0, 1, 1]), 2, 1)
        assert pos == 2 and score == 4.0

    def test_gini_scan_no_valid_cut(self):
        assert _fallback.gini_split_scan(np.array([1.0, 1.0]), np.array([0, 1]), 2, 1) == (-1, -1.0)

    def test_haar_uniform_image_zero(self):
        ii = integral(np.full((20, 20), 7.0))
        dx, dy = _fallback.haar_sample(ii, np.array([10]), np.array([10]), 4)
        assert dx[0] == 0 and dy[0] == 0
