# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Scaling by a power of two is done with a multiply, which is exact for the
value ranges involved, so the quantization kernels match numpy bit for bit.
"""

import numpy as np

from libc.math cimport floor, fabs, isfinite, ldexp


cdef inline double _floor(double y) noexcept nogil:
    # integer cast with a branch-free fix-up beats a libm call; large or
    # non-finite values take the slow path
    cdef long long t
    if -4503599627370496.0 < y < 4503599627370496.0:
        t = <long long>y
        t -= <long long>(<double>t > y)
        return <double>t
    return floor(y)


cdef inline double _clamp(double q, double lo, double hi) noexcept nogil:
    q = q if q < hi else hi
    return q if q > lo else lo


cdef inline double _round_at(double x, double up, double down) noexcept nogil:
    cdef double y = x * up
    cdef double fl = _floor(y)
    return (fl + <double>(y - fl > 0.5)) * down


def _flat(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype).reshape(-1)


def lq_quantize(sw, int fl):
    cdef double[::1] src = _flat(sw, np.float64)
    out_arr = np.empty(src.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, n = src.shape[0]
    cdef double up = ldexp(1.0, fl), down = ldexp(1.0, -fl)
    cdef double top = (ldexp(1.0, fl + 1) - 1.0) * down
    cdef double q
    with nogil:
        for i in range(n):
            out[i] = _clamp(_round_at(src[i], up, down), -2.0, top)
    return out_arr.reshape(np.shape(sw))


def nlq_quantize(sw, int fl):
    cdef double[::1] src = _flat(sw, np.float64)
    out_arr = np.empty(src.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, n = src.shape[0]
    cdef double top = 2.0 - ldexp(1.0, 1 - fl)
    cdef double ua = ldexp(1.0, fl - 1), da = ldexp(1.0, 1 - fl)
    cdef double ub = ldexp(1.0, fl), db = ldexp(1.0, -fl)
    cdef double uc = ldexp(1.0, fl + 2), dc = ldexp(1.0, -fl - 2)
    cdef double x, a, up, down
    cdef bint hi, mid
    with nogil:
        for i in range(n):
            x = src[i]
            a = fabs(x)
            # pick the region step without branching
            hi = a >= 0.5
            mid = a >= 0.25
            up = ua if hi else (ub if mid else uc)
            down = da if hi else (db if mid else dc)
            out[i] = _clamp(_round_at(x, up, down), -top, top)
    return out_arr.reshape(np.shape(sw))


def nlq_encode(q, int fl):
    cdef double[::1] src = _flat(q, np.float64)
    cdef Py_ssize_t i, n = src.shape[0]
    codes_arr = np.zeros(n, dtype=np.uint8)
    ok_arr = np.ones(n, dtype=np.bool_)
    cdef unsigned char[::1] codes = codes_arr
    cdef unsigned char[::1] ok = ok_arr.view(np.uint8)
    cdef long n_c = 1 << fl
    cdef long n_b = 1 << (fl - 2)
    cdef long sign = 1 << (fl + 1)
    cdef double top = 2.0 - ldexp(1.0, 1 - fl)
    cdef double ua = ldexp(1.0, fl - 1), ub = ldexp(1.0, fl), uc = ldexp(1.0, fl + 2)
    cdef double x, a, y
    cdef long m
    with nogil:
        for i in range(n):
            x = src[i]
            a = fabs(x)
            if not isfinite(x) or a > top:
                ok[i] = 0
                continue
            if a >= 0.5:
                y = (a - 0.5) * ua
                m = n_c + n_b
            elif a >= 0.25:
                y = (a - 0.25) * ub
                m = n_c
            else:
                y = a * uc
                m = 0
            if y != _floor(y):
                ok[i] = 0
                continue
            m += <long>y
            if x < 0 and m > 0:
                m |= sign
            codes[i] = <unsigned char>m
    shape = np.shape(q)
    return codes_arr.reshape(shape), ok_arr.reshape(shape)


def nlq_decode(codes, int fl):
    cdef long long[::1] src = _flat(codes, np.int64)
    cdef Py_ssize_t i, n = src.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    ok_arr = np.ones(n, dtype=np.bool_)
    cdef double[::1] out = out_arr
    cdef unsigned char[::1] ok = ok_arr.view(np.uint8)
    cdef long n_c = 1 << fl
    cdef long n_b = 1 << (fl - 2)
    cdef long mask = (1 << (fl + 1)) - 1
    cdef double da = ldexp(1.0, 1 - fl), db = ldexp(1.0, -fl), dc = ldexp(1.0, -fl - 2)
    cdef long long c
    cdef long m, neg
    cdef double mag
    with nogil:
        for i in range(n):
            c = src[i]
            m = c & mask
            neg = (c >> (fl + 1)) & 1
            if (c >> (fl + 2)) != 0 or (neg == 1 and m == 0):
                ok[i] = 0
            if m >= n_c + n_b:
                mag = 0.5 + <double>(m - n_c - n_b) * da
            elif m >= n_c:
                mag = 0.25 + <double>(m - n_c) * db
            else:
                mag = <double>m * dc
            out[i] = -mag if neg == 1 else mag
    shape = np.shape(codes)
    return out_arr.reshape(shape), ok_arr.reshape(shape)


def nearest_codeword(x, codebook):
    cdef double[::1] src = _flat(x, np.float64)
    cb_arr = _flat(codebook, np.float64)
    cdef Py_ssize_t i, n = src.shape[0], k = cb_arr.shape[0]
    out_arr = np.zeros(n, dtype=np.int64)
    if k == 1:
        return out_arr.reshape(np.shape(x))
    cdef long long[::1] out = out_arr
    cdef double[::1] mids = 0.5 * (cb_arr[:-1] + cb_arr[1:])
    cdef Py_ssize_t m = k - 1, base, half, length
    cdef double v
    with nogil:
        for i in range(n):
            # branch-free lower bound over the midpoints, same as
            # searchsorted(side="left")
            v = src[i]
            base = 0
            length = m
            while length > 1:
                half = length >> 1
                base += half * <Py_ssize_t>(mids[base + half] < v)
                length -= half
            out[i] = base + <Py_ssize_t>(mids[base] < v)
    return out_arr.reshape(np.shape(x))


def _phases(x, p):
    """Zero pad by ``p`` and split into the four stride-2 phase planes.

    ``out[b, c, u % 2, v % 2, i + u // 2, j + v // 2]`` equals padded
    ``x[b, c, 2 * i + u, 2 * j + v]``, so the inner loops run over
    contiguous memory.
    """
    x = np.asarray(x, dtype=np.float64)
    b, c, h, w = x.shape
    hp, wp = h + 2 * p, w + 2 * p
    xp = np.zeros((b, c, hp + hp % 2, wp + wp % 2))
    xp[:, :, p:p + h, p:p + w] = x
    hh, wh = xp.shape[2] // 2, xp.shape[3] // 2
    return np.ascontiguousarray(xp.reshape(b, c, hh, 2, wh, 2).transpose(0, 1, 3, 5, 2, 4))


def conv_forward(x, w):
    cdef Py_ssize_t K = w.shape[2], P = K // 2
    cdef double[:, :, :, :, :, ::1] X = _phases(x, P)
    cdef double[:, :, :, ::1] Wt = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t B = X.shape[0], C = X.shape[1]
    cdef Py_ssize_t O = Wt.shape[0]
    cdef Py_ssize_t Ho = (x.shape[2] - 1) // 2 + 1, Wo = (x.shape[3] - 1) // 2 + 1
    out_arr = np.zeros((B, O, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] Y = out_arr
    cdef Py_ssize_t b, o, c, i, j, u, v
    cdef double wt
    cdef double* yrow
    cdef double* xrow
    with nogil:
        for b in range(B):
            for o in range(O):
                for c in range(C):
                    for u in range(K):
                        for v in range(K):
                            wt = Wt[o, c, u, v]
                            for i in range(Ho):
                                yrow = &Y[b, o, i, 0]
                                xrow = &X[b, c, u & 1, v & 1, i + (u >> 1), v >> 1]
                                for j in range(Wo):
                                    yrow[j] += wt * xrow[j]
    return out_arr


def conv_backward_input(gy, w, Py_ssize_t h, Py_ssize_t wd):
    cdef double[:, :, :, ::1] G = np.ascontiguousarray(gy, dtype=np.float64)
    cdef double[:, :, :, ::1] Wt = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t B = G.shape[0], O = G.shape[1], Ho = G.shape[2], Wo = G.shape[3]
    cdef Py_ssize_t C = Wt.shape[1], K = Wt.shape[2]
    cdef Py_ssize_t P = K // 2
    cdef Py_ssize_t hp = h + 2 * P, wp = wd + 2 * P
    cdef Py_ssize_t hh = (hp + 1) // 2, wh = (wp + 1) // 2
    # accumulate into padded phase planes, then interleave and crop
    acc_arr = np.zeros((B, C, 2, 2, hh, wh), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] GX = acc_arr
    cdef Py_ssize_t b, o, c, i, j, u, v
    cdef double wt
    cdef double* grow
    cdef double* arow
    with nogil:
        for b in range(B):
            for o in range(O):
                for c in range(C):
                    for u in range(K):
                        for v in range(K):
                            wt = Wt[o, c, u, v]
                            for i in range(Ho):
                                grow = &G[b, o, i, 0]
                                arow = &GX[b, c, u & 1, v & 1, i + (u >> 1), v >> 1]
                                for j in range(Wo):
                                    arow[j] += wt * grow[j]
    full = acc_arr.transpose(0, 1, 4, 2, 5, 3).reshape(B, C, 2 * hh, 2 * wh)
    return np.ascontiguousarray(full[:, :, P:P + h, P:P + wd])


def conv_backward_weight(x, gy, Py_ssize_t k):
    cdef Py_ssize_t P = k // 2
    cdef double[:, :, :, :, :, ::1] X = _phases(x, P)
    cdef double[:, :, :, ::1] G = np.ascontiguousarray(gy, dtype=np.float64)
    cdef Py_ssize_t B = X.shape[0], C = X.shape[1]
    cdef Py_ssize_t O = G.shape[1], Ho = G.shape[2], Wo = G.shape[3]
    out_arr = np.zeros((O, C, k, k), dtype=np.float64)
    cdef double[:, :, :, ::1] GW = out_arr
    cdef Py_ssize_t b, o, c, i, j, u, v
    cdef double acc
    cdef double* grow
    cdef double* xrow
    with nogil:
        for o in range(O):
            for c in range(C):
                for u in range(k):
                    for v in range(k):
                        acc = 0.0
                        for b in range(B):
                            for i in range(Ho):
                                grow = &G[b, o, i, 0]
                                xrow = &X[b, c, u & 1, v & 1, i + (u >> 1), v >> 1]
                                for j in range(Wo):
                                    acc = acc + grow[j] * xrow[j]
                        GW[o, c, u, v] = acc
    return out_arr
