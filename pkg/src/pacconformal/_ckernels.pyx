# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled scalar kernels; same algorithms as ``_pykernels``."""
from libc.math cimport log, log1p, exp, lgamma, floor, cos, sin, fabs, INFINITY

import numpy as np

cdef double CF_EPS = 1e-15
cdef int CF_MAXIT = 20000
cdef double FPMIN = 1e-300


cpdef double bernoulli_kl(double p, double q):
    cdef double t1 = 0.0, t2 = 0.0
    if p > 0.0:
        if q <= 0.0:
            return INFINITY
        t1 = p * log(p / q)
    if p < 1.0:
        if q >= 1.0:
            return INFINITY
        t2 = (1.0 - p) * (log1p(-p) - log1p(-q))
    return t1 + t2


cpdef double kl_inverse_upper(double p, double c):
    cdef double lo, hi, mid
    if p >= 1.0:
        return 1.0
    if c <= 0.0:
        return p
    lo = p
    hi = 1.0
    # bisect down to adjacent floats
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if bernoulli_kl(p, mid) <= c:
            lo = mid
        else:
            hi = mid
    return lo


cdef double _betacf(double a, double b, double x) except? -1.0:
    cdef double qab = a + b, qap = a + 1.0, qam = a - 1.0
    cdef double c = 1.0, d, h, aa, delta
    cdef int m, m2
    d = 1.0 - qab * x / qap
    if fabs(d) < FPMIN:
        d = FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, CF_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if fabs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if fabs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if fabs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if fabs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if fabs(delta - 1.0) < CF_EPS:
            return h
    raise ArithmeticError(f"continued fraction did not converge for a={a}, b={b}, x={x}")


cpdef double betainc(double a, double b, double x) except? -1.0:
    cdef double log_front
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = lgamma(a + b) - lgamma(a) - lgamma(b) + a * log(x) + b * log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return exp(log_front + log(_betacf(a, b, x)) - log(a))
    return 1.0 - exp(log_front + log(_betacf(b, a, 1.0 - x)) - log(b))


cpdef double log_beta_pdf(double x, double a, double b):
    cdef double out = lgamma(a + b) - lgamma(a) - lgamma(b)
    if a != 1.0:
        if x > 0.0:
            out += (a - 1.0) * log(x)
        else:
            return -INFINITY
    if b != 1.0:
        if x < 1.0:
            out += (b - 1.0) * log1p(-x)
        else:
            return -INFINITY
    return out


cpdef long vovk_2b_index(double alpha, double delta, long n) except? -2:
    cdef long best = -1, j = 0
    cdef double limit = alpha * (n + 1)
    while j + 1 < limit and j < n:
        if betainc(<double>(n - j), j + 1.0, 1.0 - alpha) <= delta:
            best = j
            j += 1
        else:
            break
    return best


def rotate_bilinear(images, angles):
    cdef double[:, :, ::1] src = np.ascontiguousarray(images, dtype=np.float64)
    cdef double[::1] ang = np.ascontiguousarray(angles, dtype=np.float64)
    cdef Py_ssize_t n = src.shape[0], h = src.shape[1], w = src.shape[2]
    out_arr = np.zeros((n, h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0
    cdef double cos_t, sin_t, dr, dc, sx, sy, fx, fy, v00, v01, v10, v11
    cdef Py_ssize_t i, r, col
    cdef long x0, y0
    for i in range(n):
        cos_t = cos(ang[i])
        sin_t = sin(ang[i])
        for r in range(h):
            dr = r - cy
            for col in range(w):
                dc = col - cx
                sx = cos_t * dc - sin_t * dr + cx
                sy = sin_t * dc + cos_t * dr + cy
                x0 = <long>floor(sx)
                y0 = <long>floor(sy)
                if x0 < -1 or x0 > w - 1 or y0 < -1 or y0 > h - 1:
                    continue
                fx = sx - x0
                fy = sy - y0
                v00 = src[i, y0, x0] if (y0 >= 0 and x0 >= 0) else 0.0
                v01 = src[i, y0, x0 + 1] if (y0 >= 0 and x0 + 1 < w) else 0.0
                v10 = src[i, y0 + 1, x0] if (y0 + 1 < h and x0 >= 0) else 0.0
                v11 = src[i, y0 + 1, x0 + 1] if (y0 + 1 < h and x0 + 1 < w) else 0.0
                out[i, r, col] = ((1 - fy) * ((1 - fx) * v00 + fx * v01)
                                  + fy * ((1 - fx) * v10 + fx * v11))
    return out_arr
