import os
import subprocess
import sys

import numpy as np
import pytest

from dcswin import _kernels

CASES = [
    # B, C, H, W, k, stride, padding, dilation
    (1, 1, 4, 4, 3, 1, 0, 1),
    (2, 3, 7, 9, 3, 1, 1, 1),
    (1, 4, 8, 8, 3, 2, 1, 1),
    (1, 2, 11, 10, 3, 1, 6, 6),
    (2, 2, 6, 6, 2, 2, 0, 1),
    (1, 1, 3, 3, 3, 1, 5, 1),
    (1, 2, 9, 9, 2, 3, 4, 1),
]


def naive_im2col(x, k, stride, padding, dilation):
    B, C, H, W = x.shape
    Ho = (H + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((B, C * k * k, Ho * Wo), dtype=x.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    for oh in range(Ho):
                        for ow in range(Wo):
                            h = oh * stride - padding + i * dilation
                            w = ow * stride - padding + j * dilation
                            if 0 <= h < H and 0 <= w < W:
                                out[b, (c * k + i) * k + j, oh * Wo + ow] = x[b, c, h, w]
    return out


@pytest.mark.parametrize("backend", sorted(_kernels.backends()))
@pytest.mark.parametrize("case", CASES)
def test_im2col_matches_loops(backend, case):
    B, C, H, W, k, s, p, d = case
    x = np.random.default_rng(1).standard_normal((B, C, H, W))
    im2col, _ = _kernels.backends()[backend]
    np.testing.assert_array_equal(im2col(x, k, k, s, p, d), naive_im2col(x, k, s, p, d))


@pytest.mark.parametrize("backend", sorted(_kernels.backends()))
@pytest.mark.parametrize("case", CASES)
def test_col2im_is_adjoint(backend, case):
    B, C, H, W, k, s, p, d = case
    rng = np.random.default_rng(2)
    im2col, col2im = _kernels.backends()[backend]
    x = rng.standard_normal((B, C, H, W))
    cols = im2col(x, k, k, s, p, d)
    y = rng.standard_normal(cols.shape)
    assert np.vdot(cols, y) == pytest.approx(np.vdot(x, col2im(y, C, H, W, k, k, s, p, d)),
                                             rel=1e-12)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree_bitwise(dtype):
    impls = _kernels.backends()
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 13, 12)).astype(dtype)
    ref_cols = impls["numpy"][0](x, 3, 3, 2, 2, 2)
    y = rng.standard_normal(ref_cols.shape).astype(dtype)
    ref_back = impls["numpy"][1](y, 5, 13, 12, 3, 3, 2, 2, 2)
    for name, (im2col, col2im) in impls.items():
        cols = im2col(x, 3, 3, 2, 2, 2)
        assert cols.dtype == dtype
        np.testing.assert_array_equal(cols, ref_cols)
        np.testing.assert_allclose(col2im(y, 5, 13, 12, 3, 3, 2, 2, 2), ref_back, rtol=1e-6)


def test_compiled_backend_is_built():
    # the editable install builds the extension; this guards against a silent fallback
    assert "cython" in _kernels.backends()


def test_env_forces_numpy_fallback():
    env = dict(os.environ, DCSWIN_KERNELS="numpy")
    out = subprocess.run([sys.executable, "-c", "from dcswin import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
