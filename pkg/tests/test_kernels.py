import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from pacconformal import kernels


def binomial_cdf_exact(j, n, p):
    # I_{1-p}(n - j, j + 1) equals P[Binomial(n, p) <= j]
    p = Fraction(p)
    return sum(math.comb(n, i) * p**i * (1 - p) ** (n - i) for i in range(j + 1))


def test_compiled_backend_present():
    # the build is expected to produce the extension in this environment
    assert kernels.compiled_backend is not None
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("p,q,expected", [
    (0.3, 0.3, 0.0),
    (0.0, 0.5, math.log(2.0)),
    (1.0, 0.5, math.log(2.0)),
])
def test_bernoulli_kl_closed_forms(backend, p, q, expected):
    assert backend.bernoulli_kl(p, q) == pytest.approx(expected, abs=1e-15)


def test_bernoulli_kl_off_support(backend):
    assert backend.bernoulli_kl(0.5, 1.0) == math.inf
    assert backend.bernoulli_kl(0.5, 0.0) == math.inf
    assert backend.bernoulli_kl(0.0, 0.0) == 0.0
    assert backend.bernoulli_kl(1.0, 1.0) == 0.0


@pytest.mark.parametrize("a,b,x", [(5, 96, 0.9), (990, 11, 0.9), (3.5, 2.25, 0.3), (1, 1, 0.7),
                                   (100, 900, 0.1), (40000, 60000, 0.4)])
def test_betainc_matches_scipy(backend, a, b, x):
    # the log-gamma prefactor carries absolute error ~ eps * lgamma(a + b)
    rel = max(1e-11, 4e-16 * (a + b) * math.log(a + b))
    assert backend.betainc(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=rel, abs=1e-300)


@pytest.mark.parametrize("n,j,alpha", [(10, 0, 0.1), (10, 3, 0.1), (50, 2, 0.1), (200, 11, 0.1), (30, 20, 0.7)])
def test_betainc_is_binomial_tail(backend, n, j, alpha):
    exact = float(binomial_cdf_exact(j, n, Fraction(alpha).limit_denominator(1000)))
    assert backend.betainc(n - j, j + 1.0, 1.0 - alpha) == pytest.approx(exact, rel=1e-11)


def test_betainc_endpoints(backend):
    assert backend.betainc(2.0, 3.0, 0.0) == 0.0
    assert backend.betainc(2.0, 3.0, 1.0) == 1.0


@pytest.mark.parametrize("x,a,b", [(0.25, 3, 7), (0.5, 6, 6), (0.0, 1, 5), (0.9, 2.5, 1)])
def test_log_beta_pdf_matches_mpmath(backend, x, a, b):
    mpmath.mp.dps = 40
    ref = mpmath.log(mpmath.gamma(a + b) / (mpmath.gamma(a) * mpmath.gamma(b))
                     * mpmath.mpf(x) ** (a - 1) * (1 - mpmath.mpf(x)) ** (b - 1))
    assert backend.log_beta_pdf(x, a, b) == pytest.approx(float(ref), abs=1e-12)


def test_log_beta_pdf_boundary(backend):
    assert backend.log_beta_pdf(0.0, 2.0, 3.0) == -math.inf
    assert backend.log_beta_pdf(1.0, 2.0, 3.0) == -math.inf


@settings(max_examples=60, deadline=None)
@given(p=st.floats(0.0, 0.99), c=st.floats(0.0, 3.0))
def test_backends_agree_on_kl_inverse(p, c):
    if kernels.compiled_backend is None:
        pytest.skip("extension not built")
    assert kernels.python_backend.kl_inverse_upper(p, c) == kernels.compiled_backend.kl_inverse_upper(p, c)


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0.02, 0.5), delta=st.floats(0.001, 0.5), n=st.integers(1, 3000))
def test_backends_agree_on_vovk_index(alpha, delta, n):
    if kernels.compiled_backend is None:
        pytest.skip("extension not built")
    assert kernels.python_backend.vovk_2b_index(alpha, delta, n) == kernels.compiled_backend.vovk_2b_index(alpha, delta, n)


def test_vovk_index_matches_binomial_scan(backend):
    from scipy import stats
    for n in (20, 100, 1000):
        for alpha, delta in ((0.1, 0.05), (0.2, 0.01), (0.05, 0.2)):
            best = -1
            for j in range(n + 1):
                if (j + 1) / (n + 1) >= alpha:
                    break
                if stats.binom.cdf(j, n, alpha) <= delta:
                    best = j
            assert backend.vovk_2b_index(alpha, delta, n) == best


def test_rotation_by_zero_is_identity(backend, rng):
    img = rng.uniform(size=(3, 28, 28))
    out = backend.rotate_bilinear(img, np.zeros(3))
    assert np.max(np.abs(out - img)) < 1e-6


def test_rotation_quarter_turn_moves_dot(backend):
    img = np.zeros((1, 29, 29))
    img[0, 14, 20] = 1.0  # six columns right of center
    out = backend.rotate_bilinear(img, np.array([math.pi / 2]))
    r, c = np.unravel_index(np.argmax(out[0]), out[0].shape)
    # counterclockwise on screen: right of center goes to above center
    assert (r, c) == (8, 14)
    assert out[0, r, c] == pytest.approx(1.0, abs=1e-9)


def test_rotation_zero_fill(backend):
    img = np.ones((1, 10, 10))
    out = backend.rotate_bilinear(img, np.array([math.radians(45)]))
    assert out[0, 0, 0] == 0.0
    assert out[0, 5, 5] == pytest.approx(1.0)


def test_rotation_backends_agree(rng):
    if kernels.compiled_backend is None:
        pytest.skip("extension not built")
    img = rng.normal(size=(5, 28, 28))
    ang = rng.uniform(-0.6, 0.6, 5)
    a = kernels.python_backend.rotate_bilinear(img, ang)
    b = kernels.compiled_backend.rotate_bilinear(img, ang)
    assert np.max(np.abs(a - b)) < 1e-12
