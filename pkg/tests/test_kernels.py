"""Kernel-level checks: numpy backend vs compiled backend vs slow oracles.

The nested-loop convolution here is the independent oracle: no im2col, no
BLAS, just the definition. Everything faster must agree with it.
"""

import numpy as np
import pytest

from dropclass import kernels
from dropclass.kernels import numpy_backend

try:
    from dropclass.kernels import _conv as compiled
except ImportError:
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled backend not built")


def conv2d_oracle(x, k, bias, pad):
    """Direct convolution by quadruple loop. Slow on purpose."""
    b, h, w, ci = x.shape
    kh, kw, _, co = k.shape
    ph, pw = pad
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    y = np.zeros((b, ho, wo, co), dtype=np.float64)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for di in range(kh):
                    for dj in range(kw):
                        si, sj = i + di - ph, j + dj - pw
                        if 0 <= si < h and 0 <= sj < w:
                            y[n, i, j] += x[n, si, sj].astype(np.float64) @ \
                                k[di, dj].astype(np.float64)
    return y + bias.astype(np.float64)


def drop_oracle(a, s, z, scale):
    """Per-class aggregation in float64: scale * sum_{c != z} relu(a * s[:, c])."""
    out = np.zeros(a.shape, dtype=np.float64)
    for c in range(s.shape[1]):
        if c == z:
            continue
        out += np.maximum(a.astype(np.float64) * s[:, c].astype(np.float64), 0.0)
    return out * scale


def _case(seed, b=2, h=7, w=6, ci=3, co=4, kh=3, kw=3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, h, w, ci)).astype(np.float32)
    k = (rng.standard_normal((kh, kw, ci, co)) * 0.5).astype(np.float32)
    bias = rng.standard_normal(co).astype(np.float32)
    return x, k, bias


# ---------------------------------------------------------------------------
# convolution vs the nested-loop oracle
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("pad", [(1, 1), (0, 0)])
def test_numpy_conv_matches_oracle(pad):
    x, k, bias = _case(0)
    y, _ = numpy_backend.conv2d_forward(x, k, bias, pad)
    ref = conv2d_oracle(x, k, bias, pad)
    assert y.shape == ref.shape
    assert np.abs(y - ref).max() < 1e-5


def test_numpy_conv_matches_oracle_wide_kernel():
    x, k, bias = _case(1, h=9, w=9, kh=5, kw=3)
    y, _ = numpy_backend.conv2d_forward(x, k, bias, (2, 1))
    ref = conv2d_oracle(x, k, bias, (2, 1))
    assert np.abs(y - ref).max() < 1e-5


def test_numpy_conv_1x1():
    x, k, bias = _case(2, kh=1, kw=1)
    y, _ = numpy_backend.conv2d_forward(x, k, bias, (0, 0))
    ref = conv2d_oracle(x, k, bias, (0, 0))
    assert np.abs(y - ref).max() < 1e-5


def test_conv_backward_matches_finite_differences():
    x, k, bias = _case(3, b=1, h=5, w=5, ci=2, co=2)
    pad = (1, 1)
    gy = np.random.default_rng(4).standard_normal(
        numpy_backend.conv2d_forward(x, k, bias, pad)[0].shape).astype(np.float32)

    gx, gk, gb = numpy_backend.conv2d_backward(x, k, gy, pad)

    def loss(xv, kv, bv):
        return float((conv2d_oracle(xv, kv, bv, pad) * gy.astype(np.float64)).sum())

    rng = np.random.default_rng(5)
    step = 1e-4
    for arr, grad, name in ((x, gx, "x"), (k, gk, "k"), (bias, gb, "bias")):
        a64 = arr.astype(np.float64)
        for _ in range(8):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            plus, minus = a64.copy(), a64.copy()
            plus[idx] += step
            minus[idx] -= step
            args = {"x": [a64, k, bias], "k": [x, a64, bias], "bias": [x, k, a64]}[name]
            pos = loss(*[plus if v is a64 else v for v in args])
            neg = loss(*[minus if v is a64 else v for v in args])
            num = (pos - neg) / (2 * step)
            assert abs(num - grad[idx]) < 1e-3 * max(1.0, abs(num)), (name, idx)


# ---------------------------------------------------------------------------
# backend agreement (bitwise where both paths share accumulation order)
# ---------------------------------------------------------------------------

@needs_compiled
@pytest.mark.parametrize("pad", [(1, 1), (0, 0), (2, 2)])
def test_conv_forward_backends_bitwise(pad):
    x, k, bias = _case(10, h=12, w=10, ci=5, co=7)
    y_np, col_np = numpy_backend.conv2d_forward(x, k, bias, pad)
    y_c, col_c = compiled.conv2d_forward(x, k, bias, pad)
    assert np.array_equal(y_np, y_c)
    assert np.array_equal(col_np, col_c)


@needs_compiled
def test_conv_backward_backends_agree():
    x, k, bias = _case(11, b=3, h=10, w=9, ci=4, co=6)
    pad = (1, 1)
    y, col = numpy_backend.conv2d_forward(x, k, bias, pad)
    gy = np.random.default_rng(12).standard_normal(y.shape).astype(np.float32)
    gx_np, gk_np, gb_np = numpy_backend.conv2d_backward(x, k, gy, pad, col)
    gx_c, gk_c, gb_c = compiled.conv2d_backward(x, k, gy, pad, col)
    assert np.array_equal(gk_np, gk_c)
    assert np.array_equal(gb_np, gb_c)
    # gx accumulation order differs between backends; agreement is to rounding
    scale = np.abs(gx_np).max()
    assert np.abs(gx_np - gx_c).max() <= 1e-5 * max(scale, 1.0)


@needs_compiled
def test_conv_1x1_fast_path_backends_bitwise():
    x, k, bias = _case(13, h=8, w=8, ci=6, co=3, kh=1, kw=1)
    y_np, _ = numpy_backend.conv2d_forward(x, k, bias, (0, 0))
    y_c, _ = compiled.conv2d_forward(x, k, bias, (0, 0))
    assert np.array_equal(y_np, y_c)


@needs_compiled
def test_relu_backward_backends_bitwise():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((4, 5, 5, 3)).astype(np.float32)
    x[0, 0, 0, 0] = 0.0  # the kink itself: subgradient 0
    gy = rng.standard_normal(x.shape).astype(np.float32)
    g_np = numpy_backend.relu_backward(x, gy)
    g_c = compiled.relu_backward(x, gy)
    assert np.array_equal(g_np, g_c)
    assert g_np[0, 0, 0, 0] == 0.0


# ---------------------------------------------------------------------------
# fused drop aggregation
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("z", [-1, 0, 3, 5])
def test_drop_forward_matches_per_class_oracle(z):
    rng = np.random.default_rng(20 + z)
    a = rng.standard_normal((2, 6, 6, 8)).astype(np.float32)
    s = rng.standard_normal((8, 6)).astype(np.float32)
    got = numpy_backend.drop_aggregate_forward(a, s, z, 1.0 / 6)
    ref = drop_oracle(a, s, z, 1.0 / 6)
    assert np.abs(got - ref).max() < 1e-5


def test_drop_forward_hand_computed():
    a = np.array([[2.0, -3.0, 0.0]], dtype=np.float32)
    s = np.array([[1.0, -2.0],
                  [0.5, 0.5],
                  [-1.0, -1.0]], dtype=np.float32)
    out = numpy_backend.drop_aggregate_forward(a, s, -1, 0.5)
    # ch 0: relu(2*1) + relu(2*-2) = 2, scaled 0.5 -> 1.0
    # ch 1: relu(-3*0.5) twice = 0
    # ch 2: a = 0 -> 0
    assert out[0, 0] == pytest.approx(1.0)
    assert out[0, 1] == 0.0
    assert out[0, 2] == 0.0


def test_drop_excluded_class_really_excluded():
    a = np.ones((1, 4), dtype=np.float32)
    s = np.array([[1.0, 100.0],
                  [1.0, 100.0],
                  [1.0, 100.0],
                  [1.0, 100.0]], dtype=np.float32)
    full = numpy_backend.drop_aggregate_forward(a, s, -1, 0.5)
    dropped = numpy_backend.drop_aggregate_forward(a, s, 1, 0.5)
    assert np.allclose(full, 0.5 * 101.0)
    assert np.allclose(dropped, 0.5 * 1.0)


def test_drop_backward_is_piecewise_slope():
    rng = np.random.default_rng(23)
    a = rng.standard_normal((3, 7, 5, 4)).astype(np.float32)
    s = rng.standard_normal((4, 5)).astype(np.float32)
    gout = rng.standard_normal(a.shape).astype(np.float32)
    z, scale = 2, 0.2
    ga = numpy_backend.drop_aggregate_backward(a, s, z, scale, gout)

    psum = np.zeros(4, dtype=np.float64)
    msum = np.zeros(4, dtype=np.float64)
    for c in range(5):
        if c == z:
            continue
        psum += np.maximum(s[:, c].astype(np.float64), 0)
        msum += np.minimum(s[:, c].astype(np.float64), 0)
    slope = np.where(a > 0, psum * scale, np.where(a < 0, msum * scale, 0.0))
    assert np.abs(ga - slope * gout).max() < 1e-5


def test_drop_backward_finite_difference():
    rng = np.random.default_rng(24)
    a = rng.standard_normal((1, 4, 4, 3)).astype(np.float64)
    s = rng.standard_normal((3, 4)).astype(np.float64)
    gout = rng.standard_normal(a.shape).astype(np.float64)
    z, scale = 0, 0.25
    ga = numpy_backend.drop_aggregate_backward(a, s, z, scale, gout)
    step = 1e-6
    for idx in [(0, 0, 0, 0), (0, 1, 2, 1), (0, 3, 3, 2), (0, 2, 1, 0)]:
        plus, minus = a.copy(), a.copy()
        plus[idx] += step
        minus[idx] -= step
        f_p = (numpy_backend.drop_aggregate_forward(plus, s, z, scale) * gout).sum()
        f_m = (numpy_backend.drop_aggregate_forward(minus, s, z, scale) * gout).sum()
        num = (f_p - f_m) / (2 * step)
        assert abs(num - ga[idx]) < 1e-6 * max(1.0, abs(num))


@needs_compiled
@pytest.mark.parametrize("z", [-1, 0, 3])
def test_drop_backends_bitwise(z):
    rng = np.random.default_rng(30 + z)
    a = rng.standard_normal((2, 8, 8, 16)).astype(np.float32)
    s = rng.standard_normal((16, 6)).astype(np.float32)
    gout = rng.standard_normal(a.shape).astype(np.float32)
    f_np = numpy_backend.drop_aggregate_forward(a, s, z, 1.0 / 6)
    f_c = compiled.drop_aggregate_forward(a, s, z, 1.0 / 6)
    assert np.array_equal(f_np, f_c)
    b_np = numpy_backend.drop_aggregate_backward(a, s, z, 1.0 / 6, gout)
    b_c = compiled.drop_aggregate_backward(a, s, z, 1.0 / 6, gout)
    assert np.array_equal(b_np, b_c)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def test_dispatch_float64_uses_numpy_path():
    # float64 must survive the round trip untouched (compiled path is f32-only)
    x = np.random.default_rng(40).standard_normal((1, 5, 5, 2))
    k = np.random.default_rng(41).standard_normal((3, 3, 2, 2))
    bias = np.zeros(2)
    y, col = kernels.conv2d_forward(x, k, bias, (1, 1))
    assert y.dtype == np.float64
    ref = conv2d_oracle(x, k, bias, (1, 1))
    assert np.abs(y - ref).max() < 1e-9


def test_dispatch_drop_z_none_means_keep_all():
    a = np.ones((1, 2), dtype=np.float32)
    s = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]], dtype=np.float32)
    full = kernels.drop_aggregate_forward(a, s, None, 1.0 / 3)
    assert np.allclose(full, 2.0)  # (1+2+3)/3


def test_backend_name_is_valid():
    assert kernels.backend_name() in ("compiled", "python")
