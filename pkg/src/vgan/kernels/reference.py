"""Pure-NumPy convolution kernels (im2col / col2im).

This is the fallback backend: every function here has a signature-identical
twin in the compiled extension, and the test suite asserts the two agree to
floating-point equality. All functions take and return plain ndarrays; layout
is x[N, C, D, H, W], w[Cout, Cin, kd, kh, kw], gradients match their primal
shapes. Strides/padding are 3-tuples ordered (D, H, W).
"""

import numpy as np


def _pad(x, padding):
    pd, ph, pw = padding
    if pd == 0 and ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _col_view(xp, kernel, stride, out_extents):
    """Strided window view [N, Do, Ho, Wo, Cin, kd, kh, kw] of the padded input."""
    n, c = xp.shape[:2]
    do, ho, wo = out_extents
    kd, kh, kw = kernel
    sd, sh, sw = stride
    sn, sc, s0, s1, s2 = xp.strides
    shape = (n, do, ho, wo, c, kd, kh, kw)
    strides = (sn, s0 * sd, s1 * sh, s2 * sw, sc, s0, s1, s2)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def conv_out_extents(in_extents, kernel, stride, padding):
    return tuple(
        (i + 2 * p - k) // s + 1
        for i, k, s, p in zip(in_extents, kernel, stride, padding)
    )


def conv3d_forward(x, w, stride, padding):
    cout = w.shape[0]
    out = conv_out_extents(x.shape[2:], w.shape[2:], stride, padding)
    xp = _pad(x, padding)
    cols = _col_view(xp, w.shape[2:], stride, out)
    y = np.tensordot(cols, w, axes=([4, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(y, 4, 1))


def conv3d_grad_weight(x, gy, kernel, stride, padding):
    out = gy.shape[2:]
    xp = _pad(x, padding)
    cols = _col_view(xp, kernel, stride, out)
    # [Cout, Cin, kd, kh, kw] summed over batch and output voxels
    return np.tensordot(gy, cols, axes=([0, 2, 3, 4], [0, 1, 2, 3]))


def conv3d_grad_input(w, gy, in_extents, stride, padding):
    n = gy.shape[0]
    cin = w.shape[1]
    kd, kh, kw = w.shape[2:]
    sd, sh, sw = stride
    pd, ph, pw = padding
    do, ho, wo = gy.shape[2:]
    d, h, wid = in_extents
    gxp = np.zeros((n, cin, d + 2 * pd, h + 2 * ph, wid + 2 * pw), dtype=gy.dtype)
    # scatter one kernel offset at a time; each is a strided slice add
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                g = np.tensordot(gy, w[:, :, a, b, c], axes=([1], [0]))
                g = np.moveaxis(g, 4, 1)
                gxp[
                    :,
                    :,
                    a : a + (do - 1) * sd + 1 : sd,
                    b : b + (ho - 1) * sh + 1 : sh,
                    c : c + (wo - 1) * sw + 1 : sw,
                ] += g
    if pd or ph or pw:
        gxp = gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + wid]
    return np.ascontiguousarray(gxp)
