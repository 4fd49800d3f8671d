"""Backend parity: the compiled conv kernels must match the BLAS fallback."""

import numpy as np
import pytest

from vgan.kernels import BACKEND, reference

compiled = pytest.importorskip(
    "vgan.kernels._convcore", reason="compiled extension not built"
)

# (c_in, c_out, extents, kernel, stride, padding) with deliberately
# asymmetric cases so axis mixups cannot cancel out
CASES = [
    (1, 1, (4, 4, 4), (3, 3, 3), (1, 1, 1), (1, 1, 1)),
    (2, 3, (8, 6, 5), (3, 3, 3), (2, 2, 2), (1, 1, 1)),
    (3, 2, (7, 8, 9), (2, 3, 1), (1, 2, 3), (0, 1, 0)),
    (4, 4, (6, 6, 6), (2, 2, 2), (2, 2, 2), (0, 0, 0)),
    (2, 5, (9, 5, 7), (3, 1, 3), (2, 1, 1), (1, 0, 2)),
]


def _rand(rng, shape, dtype):
    return rng.standard_normal(shape).astype(dtype)


@pytest.mark.parametrize("dtype,atol", [(np.float32, 1e-4), (np.float64, 1e-11)])
@pytest.mark.parametrize("case", CASES)
def test_forward_matches_fallback(case, dtype, atol):
    c_in, c_out, ext, k, s, p = case
    rng = np.random.default_rng(hash(case) % 2**32)
    x = _rand(rng, (2, c_in) + ext, dtype)
    w = _rand(rng, (c_out, c_in) + k, dtype)
    a = reference.conv3d_forward(x, w, s, p)
    b = compiled.conv3d_forward(x, w, s, p)
    assert a.shape == b.shape
    assert np.allclose(a, b, atol=atol)


@pytest.mark.parametrize("dtype,atol", [(np.float32, 1e-3), (np.float64, 1e-11)])
@pytest.mark.parametrize("case", CASES)
def test_gradients_match_fallback(case, dtype, atol):
    c_in, c_out, ext, k, s, p = case
    rng = np.random.default_rng(hash(case) % 2**31)
    x = _rand(rng, (2, c_in) + ext, dtype)
    w = _rand(rng, (c_out, c_in) + k, dtype)
    out_ext = reference.conv_out_extents(ext, k, s, p)
    gy = _rand(rng, (2, c_out) + out_ext, dtype)

    gi_a = reference.conv3d_grad_input(w, gy, ext, s, p)
    gi_b = compiled.conv3d_grad_input(w, gy, ext, s, p)
    assert np.allclose(gi_a, gi_b, atol=atol)

    gw_a = reference.conv3d_grad_weight(x, gy, k, s, p)
    gw_b = compiled.conv3d_grad_weight(x, gy, k, s, p)
    assert np.allclose(gw_a, gw_b, atol=atol)


def test_out_extent_formula():
    # floor((e + 2p - k) / s) + 1 per axis
    assert reference.conv_out_extents((32, 32, 32), (3, 3, 3), (2, 2, 2), (1, 1, 1)) == (16, 16, 16)
    assert reference.conv_out_extents((5, 5, 5), (3, 3, 3), (1, 1, 1), (0, 0, 0)) == (3, 3, 3)
    assert reference.conv_out_extents((7, 9, 11), (3, 3, 3), (2, 2, 2), (1, 1, 1)) == (4, 5, 6)
    assert compiled.conv_out_extents((7, 9, 11), (3, 3, 3), (2, 2, 2), (1, 1, 1)) == (4, 5, 6)


def test_forward_value_hand_case():
    # 1x1x1x2x2 input, all-ones 1x1x1x2x2 kernel, no padding: plain sum
    x = np.arange(4, dtype=np.float64).reshape(1, 1, 1, 2, 2)
    w = np.ones((1, 1, 1, 2, 2))
    y = reference.conv3d_forward(x, w, (1, 1, 1), (0, 0, 0))
    assert y.shape == (1, 1, 1, 1, 1)
    assert y.item() == 6.0
    y2 = compiled.conv3d_forward(x, w, (1, 1, 1), (0, 0, 0))
    assert y2.item() == 6.0


def test_active_backend_is_compiled_by_default():
    assert BACKEND in ("compiled", "fallback")
    assert BACKEND == "compiled"  # the build in this repo ships the extension
