"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
The quantization kernels are bit-identical between the two backends; the
convolution kernels agree to floating-point reassociation error only.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _round_at_step(x, shift):
    # floor plus the strict "> 0.5" rounding flag; power-of-two scaling is exact
    y = np.ldexp(x, shift)
    fl = np.floor(y)
    return np.ldexp(fl + ((y - fl) > 0.5), -shift)


def lq_quantize(sw, fl):
    sw = np.asarray(sw, dtype=np.float64)
    q = _round_at_step(sw, fl)
    top = (2.0 ** (fl + 1) - 1.0) / 2.0**fl
    return np.clip(q, -2.0, top)


def nlq_quantize(sw, fl):
    sw = np.asarray(sw, dtype=np.float64)
    a = np.abs(sw)
    q = np.where(
        a >= 0.5,
        _round_at_step(sw, fl - 1),
        np.where(a >= 0.25, _round_at_step(sw, fl), _round_at_step(sw, fl + 2)),
    )
    top = 2.0 - 2.0 ** (1 - fl)
    return np.clip(q, -top, top)


def nlq_encode(q, fl):
    """Map NLQ values to sign/magnitude region codes.

    Returns ``(codes, ok)``; ``ok`` is False for values that are not exactly
    representable.
    """
    q = np.asarray(q, dtype=np.float64)
    a = np.abs(q)
    n_c = 1 << fl            # region C levels: m/2^(fl+2)
    n_b = 1 << (fl - 2)      # region B levels: 0.25 + m/2^fl
    ya = np.ldexp(a - 0.5, fl - 1)
    yb = np.ldexp(a - 0.25, fl)
    yc = np.ldexp(a, fl + 2)
    y = np.where(a >= 0.5, ya, np.where(a >= 0.25, yb, yc))
    base = np.where(a >= 0.5, n_c + n_b, np.where(a >= 0.25, n_c, 0))
    ok = (y == np.floor(y)) & (a <= 2.0 - 2.0 ** (1 - fl)) & np.isfinite(q)
    y = np.where(ok, y, 0.0)
    m = base + y.astype(np.int64)
    sign = (q < 0) & (m > 0)
    codes = (m | (sign.astype(np.int64) << (fl + 1))).astype(np.uint8)
    return codes, ok


def nlq_decode(codes, fl):
    codes = np.asarray(codes).astype(np.int64)
    n_c = 1 << fl
    n_b = 1 << (fl - 2)
    mask = (1 << (fl + 1)) - 1
    m = codes & mask
    neg = (codes >> (fl + 1)) & 1
    mag = np.where(
        m >= n_c + n_b,
        0.5 + np.ldexp((m - n_c - n_b).astype(np.float64), 1 - fl),
        np.where(
            m >= n_c,
            0.25 + np.ldexp((m - n_c).astype(np.float64), -fl),
            np.ldexp(m.astype(np.float64), -(fl + 2)),
        ),
    )
    ok = ((codes >> (fl + 2)) == 0) & ~((neg == 1) & (m == 0))
    return np.where(neg == 1, -mag, mag), ok


def nearest_codeword(x, codebook):
    """Index of the nearest codeword; ties go to the lower index.

    ``codebook`` must be strictly increasing.
    """
    x = np.asarray(x, dtype=np.float64)
    cb = np.asarray(codebook, dtype=np.float64)
    if cb.size == 1:
        return np.zeros(x.shape, dtype=np.int64)
    mids = 0.5 * (cb[:-1] + cb[1:])
    return np.searchsorted(mids, x, side="left").astype(np.int64)


def conv_forward(x, w):
    """Stride-2 convolution with ``k // 2`` zero padding.

    ``x``: (B, C, H, W), ``w``: (O, C, k, k) -> (B, O, H', W').
    """
    k = w.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::2, ::2]
    return np.einsum("bchwuv,ocuv->bohw", win, w, optimize=True)


def conv_backward_input(gy, w, h, wd):
    """Adjoint of :func:`conv_forward` with respect to its input."""
    b, o, ho, wo = gy.shape
    _, c, k, _ = w.shape
    p = k // 2
    gxp = np.zeros((b, c, h + 2 * p + 1, wd + 2 * p + 1))
    for u in range(k):
        for v in range(k):
            contrib = np.einsum("bohw,oc->bchw", gy, w[:, :, u, v], optimize=True)
            gxp[:, :, u:u + 2 * ho:2, v:v + 2 * wo:2] += contrib
    return np.ascontiguousarray(gxp[:, :, p:p + h, p:p + wd])


def conv_backward_weight(x, gy, k):
    """Gradient of :func:`conv_forward` with respect to its weight."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::2, ::2]
    ho, wo = gy.shape[2], gy.shape[3]
    win = win[:, :, :ho, :wo]
    return np.einsum("bchwuv,bohw->ocuv", win, gy, optimize=True)
