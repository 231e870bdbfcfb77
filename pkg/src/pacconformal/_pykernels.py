"""Pure-Python scalar kernels.

Reference implementation of the routines compiled in ``_ckernels.pyx``.  Both
modules expose the same functions with the same algorithms so that results
agree to floating-point round-off; :mod:`pacconformal.kernels` picks one at
import time.
"""
import math

import numpy as np

CF_EPS = 1e-15
CF_MAXIT = 20000
FPMIN = 1e-300


def bernoulli_kl(p, q):
    if p > 0.0:
        if q <= 0.0:
            return math.inf
        t1 = p * math.log(p / q)
    else:
        t1 = 0.0
    if p < 1.0:
        if q >= 1.0:
            return math.inf
        t2 = (1.0 - p) * (math.log1p(-p) - math.log1p(-q))
    else:
        t2 = 0.0
    return t1 + t2


def kl_inverse_upper(p, c):
    if p >= 1.0:
        return 1.0
    if c <= 0.0:
        return p
    lo, hi = p, 1.0
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


def _betacf(a, b, x):
    # modified Lentz evaluation of the continued fraction for I_x(a, b)
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < FPMIN:
        d = FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, CF_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_EPS:
            return h
    raise ArithmeticError(f"continued fraction did not converge for a={a}, b={b}, x={x}")


def betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b) for a, b > 0."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front + math.log(_betacf(a, b, x)) - math.log(a))
    return 1.0 - math.exp(log_front + math.log(_betacf(b, a, 1.0 - x)) - math.log(b))


def log_beta_pdf(x, a, b):
    """log of the Beta(a, b) density at x, with 0 * log 0 = 0."""
    out = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    if a != 1.0:
        out += (a - 1.0) * math.log(x) if x > 0.0 else -math.inf
    if b != 1.0:
        out += (b - 1.0) * math.log1p(-x) if x < 1.0 else -math.inf
    return out


def vovk_2b_index(alpha, delta, n):
    """Largest j with I_{1-alpha}(n - j, j + 1) <= delta and (j + 1)/(n + 1) < alpha.

    Scans j upward; the left-hand side is the Binomial(n, alpha) CDF at j and
    therefore nondecreasing, so the scan stops at the first failure.  Returns
    -1 when j = 0 already fails.
    """
    best = -1
    j = 0
    limit = alpha * (n + 1)
    while j + 1 < limit and j < n:
        if betainc(n - j, j + 1.0, 1.0 - alpha) <= delta:
            best = j
            j += 1
        else:
            break
    return best


def rotate_bilinear(images, angles):
    """Rotate each (H, W) image counterclockwise about its center.

    Bilinear interpolation, zero fill outside the source grid.
    """
    images = np.ascontiguousarray(images, dtype=np.float64)
    n, h, w = images.shape
    out = np.empty_like(images)
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                         np.arange(w, dtype=np.float64) - cx, indexing="ij")
    padded = np.zeros((h + 2, w + 2))
    for i in range(n):
        cos_t = math.cos(angles[i])
        sin_t = math.sin(angles[i])
        sx = cos_t * cc - sin_t * rr + cx
        sy = sin_t * cc + cos_t * rr + cy
        x0 = np.floor(sx)
        y0 = np.floor(sy)
        fx = sx - x0
        fy = sy - y0
        # shift by one into the zero-padded frame; clamp far-away samples onto the border
        xi = np.clip(x0.astype(np.int64) + 1, 0, w)
        yi = np.clip(y0.astype(np.int64) + 1, 0, h)
        outside = (x0 < -1) | (x0 > w - 1) | (y0 < -1) | (y0 > h - 1)
        padded[1:-1, 1:-1] = images[i]
        val = ((1 - fy) * ((1 - fx) * padded[yi, xi] + fx * padded[yi, xi + 1])
               + fy * ((1 - fx) * padded[yi + 1, xi] + fx * padded[yi + 1, xi + 1]))
        val[outside] = 0.0
        out[i] = val
    return out
