import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from pacconformal import bounds
from pacconformal.bounds import BoundInputs, InfeasibleGuarantee


def exact_log_b(alpha_hat, n):
    """ln of the Beta(k, N+1-k) density at (k-1)/(N-1), in rational arithmetic."""
    k = math.floor((n + 1) * Fraction(alpha_hat).limit_denominator(10**6))
    x = Fraction(k - 1, n - 1)
    norm = Fraction(math.factorial(n), math.factorial(k - 1) * math.factorial(n - k))
    dens = norm * x ** (k - 1) * (1 - x) ** (n - k)
    return math.log(dens.numerator) - math.log(dens.denominator)


def root_alpha_hat(alpha, delta, n):
    """Zero of the budget as a function of alpha_hat, by scanning the k/(N+1) lattice."""
    return bounds.max_certified_alpha_hat(alpha, delta, n)


class TestBernoulliKL:
    def test_identical(self):
        assert bounds.bernoulli_kl(0.3, 0.3) == 0.0

    def test_against_mpmath(self):
        mpmath.mp.dps = 40
        p, q = mpmath.mpf("0.1"), mpmath.mpf("0.2")
        ref = p * mpmath.log(p / q) + (1 - p) * mpmath.log((1 - p) / (1 - q))
        assert bounds.bernoulli_kl(0.1, 0.2) == pytest.approx(float(ref), rel=1e-13)
        assert bounds.bernoulli_kl(0.1, 0.2) == pytest.approx(0.036690, abs=1e-6)

    def test_off_support(self):
        assert bounds.bernoulli_kl(0.5, 1.0) == math.inf

    @settings(max_examples=200, deadline=None)
    @given(p=st.floats(0, 1), q=st.floats(0, 1))
    def test_nonnegative(self, p, q):
        assert bounds.bernoulli_kl(p, q) >= 0.0


class TestKLInverse:
    def test_zero_radius(self):
        assert bounds.kl_inverse_upper(0.2, 0.0) == pytest.approx(0.2, abs=1e-12)

    def test_from_zero(self):
        assert bounds.kl_inverse_upper(0.0, 0.1) == pytest.approx(1 - math.exp(-0.1), abs=1e-12)
        assert bounds.kl_inverse_upper(0.0, 0.1) == pytest.approx(0.095163, abs=1e-6)

    def test_round_trip_example(self):
        assert bounds.kl_inverse_upper(0.1, 0.036690) == pytest.approx(0.2, abs=1e-5)

    def test_rejects_infinite_radius(self):
        with pytest.raises(ValueError):
            bounds.kl_inverse_upper(0.1, math.inf)

    def test_right_inverse_grid(self):
        for p in np.arange(0, 1, 0.05):
            for c in np.arange(0, 1.0001, 0.01):
                q = bounds.kl_inverse_upper(p, c)
                assert p - 1e-12 <= q <= 1.0
                if p < q < 1.0:
                    # within 1e-9 unless a single ulp of q moves kl further than that
                    step = bounds.bernoulli_kl(p, np.nextafter(q, 1.0)) - bounds.bernoulli_kl(p, q)
                    assert c - max(1e-9, step) <= bounds.bernoulli_kl(p, q) <= c

    @settings(max_examples=200, deadline=None)
    @given(p=st.floats(0, 0.999), c=st.floats(1e-6, 5))
    def test_largest_float(self, p, c):
        q = bounds.kl_inverse_upper(p, c)
        assert bounds.bernoulli_kl(p, q) <= c
        if q < 1.0:
            assert bounds.bernoulli_kl(p, np.nextafter(q, 1.0)) > c

    @settings(max_examples=100, deadline=None)
    @given(p=st.floats(0, 0.99), c1=st.floats(0, 2), c2=st.floats(0, 2))
    def test_monotone_in_radius(self, p, c1, c2):
        lo, hi = sorted((c1, c2))
        assert bounds.kl_inverse_upper(p, lo) <= bounds.kl_inverse_upper(p, hi)


class TestVovk:
    def test_2a_value(self):
        ref = 0.1 - math.sqrt(math.log(20) / 10000)
        assert bounds.vovk_2a_alpha_hat(0.1, 0.05, 5000) == pytest.approx(ref, abs=1e-15)
        # the quoted 0.082690 is good to about two units in the last digit
        assert bounds.vovk_2a_alpha_hat(0.1, 0.05, 5000) == pytest.approx(0.082690, abs=5e-6)

    def test_2a_delta_one(self):
        assert bounds.vovk_2a_alpha_hat(0.1, 1.0, 100) == 0.1

    def test_2a_too_small(self):
        with pytest.raises(InfeasibleGuarantee, match="too small"):
            bounds.vovk_2a_alpha_hat(0.1, 0.05, 100)

    def test_2b_delta_one(self):
        ah = bounds.vovk_2b_alpha_hat(0.1, 1.0, 1000)
        assert ah < 0.1
        assert ah == pytest.approx(0.1, abs=1.5 / 1001)

    def test_2b_too_small(self):
        with pytest.raises(InfeasibleGuarantee):
            bounds.vovk_2b_alpha_hat(0.1, 0.05, 10)

    def test_2b_brute_force(self):
        # every alpha_hat class (j+1)/(N+1) checked against the binomial tail
        for n in (50, 300, 1000):
            ah = bounds.vovk_2b_alpha_hat(0.1, 0.05, n)
            j = round(ah * (n + 1)) - 1
            assert stats.binom.cdf(j, n, 0.1) <= 0.05
            if (j + 2) / (n + 1) < 0.1:
                assert stats.binom.cdf(j + 1, n, 0.1) > 0.05

    def test_2b_monte_carlo(self):
        # conditional miscoverage given the calibration set is Beta(N+1-k', k')
        # with k' = ceil((N+1)(1-alpha_hat)); sample it and count violations
        n = 1000
        ah = bounds.vovk_2b_alpha_hat(0.1, 0.05, n)
        rank = math.ceil((n + 1) * (1 - ah) - 1e-9)
        cover = np.random.default_rng(7).beta(rank, n + 1 - rank, size=100_000)
        frac = np.mean(1 - cover > 0.1)
        assert frac <= 0.05 + 3 * math.sqrt(0.05 * 0.95 / 100_000)

    def test_2b_at_least_2a_grid(self):
        count = 0
        for alpha in (0.05, 0.1, 0.2, 0.3):
            for delta in (0.01, 0.05, 0.1, 0.2, 0.5):
                for n in (200, 500, 1000, 5000, 20000):
                    try:
                        a = bounds.vovk_2a_alpha_hat(alpha, delta, n)
                    except InfeasibleGuarantee:
                        continue
                    assert bounds.vovk_2b_alpha_hat(alpha, delta, n) >= a
                    count += 1
        assert count >= 90


class TestLogB:
    def test_k_equals_one(self):
        assert bounds.log_b_constant(0.015, 100) == pytest.approx(math.log(100), abs=1e-12)

    def test_exact_small(self):
        assert bounds.log_b_constant(0.5, 11) == pytest.approx(exact_log_b(0.5, 11), abs=1e-10)

    def test_exact_all_small_n(self):
        for n in range(2, 31):
            for k in range(1, n + 1):
                ah = (k + 0.5) / (n + 1)
                if ah >= 1:
                    continue
                assert bounds.log_b_constant(ah, n) == pytest.approx(exact_log_b(ah, n), abs=1e-10)

    def test_stirling_upper_bound(self):
        n = 5000
        k = bounds.calibration_count(0.1, n)
        stirling = math.log(n * math.sqrt(n - 1) / math.sqrt(2 * math.pi * (k - 1) * (n - k)))
        assert bounds.log_b_constant(0.1, n) <= stirling

    def test_precondition(self):
        with pytest.raises(InfeasibleGuarantee):
            bounds.log_b_constant(0.001, 100)


class TestCoverageBound:
    def test_budget_inverse(self):
        for n in (500, 2000, 10000):
            ah = 0.6 * bounds.max_certified_alpha_hat(0.1, 0.05, n)
            budget = bounds.kl_budget(0.1, ah, 0.05, n)
            assert budget > 0
            cert = bounds.coverage_upper_bound(BoundInputs(0.1, ah, 0.05, n, budget))
            assert cert.upper_bound == pytest.approx(0.1, abs=1e-9)

    def test_radius_components(self):
        b = BoundInputs(0.1, 0.05, 0.05, 1000, 2.0)
        cert = bounds.coverage_upper_bound(b)
        k = math.floor(1001 * 0.05)
        assert cert.empirical_rate == (k - 1) / 999
        assert cert.kl_radius == pytest.approx((2.0 + bounds.log_b_constant(0.05, 1000) + math.log(20)) / 999)

    def test_converges_to_alpha_hat(self):
        prev = 1.0
        for n in (1000, 10000, 100000, 1000000):
            ub = bounds.coverage_upper_bound(BoundInputs(0.1, 0.05, 0.05, n)).upper_bound
            assert ub < prev
            prev = ub
        assert prev == pytest.approx(0.05, abs=2e-3)

    @settings(max_examples=50, deadline=None)
    @given(k1=st.floats(0, 50), k2=st.floats(0, 50))
    def test_monotone_in_kl(self, k1, k2):
        lo, hi = sorted((k1, k2))
        f = lambda kl: bounds.coverage_upper_bound(BoundInputs(0.1, 0.06, 0.05, 2000, kl)).upper_bound
        assert f(lo) <= f(hi)

    @settings(max_examples=60, deadline=None)
    @given(frac=st.floats(0.05, 1.0), n=st.integers(300, 20000), delta=st.floats(0.005, 0.3))
    def test_clamped_budget_never_exceeds_alpha_when_positive(self, frac, n, delta):
        ah = max(frac * 0.1, 2.0 / (n + 1))
        budget = bounds.kl_budget(0.1, ah, delta, n)
        if budget >= 0:
            cert = bounds.coverage_upper_bound(BoundInputs(0.1, ah, delta, n, max(0.0, budget)))
            assert cert.upper_bound <= 0.1 + 1e-9

    def test_input_validation(self):
        with pytest.raises(ValueError):
            BoundInputs(0.1, 0.2, 0.05, 100)
        with pytest.raises(ValueError):
            BoundInputs(0.1, 0.05, 0.0, 100)
        with pytest.raises(ValueError):
            BoundInputs(0.1, 0.05, 0.05, 100, -1.0)
        with pytest.raises(InfeasibleGuarantee):
            BoundInputs(0.1, 0.005, 0.05, 100)


class TestBudget:
    @pytest.mark.parametrize("n", [1000, 10000, 100000])
    def test_root_near_2a(self, n):
        assert abs(root_alpha_hat(0.1, 0.05, n) - bounds.vovk_2a_alpha_hat(0.1, 0.05, n)) < 0.01

    @pytest.mark.parametrize("n", [1000, 10000, 100000])
    def test_negative_at_2b(self, n):
        assert bounds.kl_budget(0.1, bounds.vovk_2b_alpha_hat(0.1, 0.05, n), 0.05, n) < 0

    @pytest.mark.parametrize("n", [500, 1000, 10000, 100000])
    def test_negative_at_alpha(self, n):
        assert bounds.kl_budget(0.1, 0.1, 0.05, n) < 0

    @pytest.mark.parametrize("n", [1000, 10000])
    def test_nonincreasing(self, n):
        grid = np.geomspace(2.0 / n, 0.1, 200)
        vals = [bounds.kl_budget(0.1, a, 0.05, n) for a in grid]
        assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))

    def test_rejects_alpha_hat_above_alpha(self):
        with pytest.raises(ValueError):
            bounds.kl_budget(0.1, 0.2, 0.05, 1000)

    def test_max_certified_is_zero_crossing(self):
        n = 2000
        ah = bounds.max_certified_alpha_hat(0.1, 0.05, n)
        assert bounds.kl_budget(0.1, ah, 0.05, n) >= 0
        assert bounds.kl_budget(0.1, ah + 1 / (n + 1), 0.05, n) < 0


class TestEfficiencyBound:
    def test_formula(self):
        mpmath.mp.dps = 30
        ref = 0.3 + 2 / mpmath.sqrt(1000) + mpmath.sqrt(1 + mpmath.log(40000) / 2) / mpmath.sqrt(999)
        cert = bounds.efficiency_upper_bound(0.3, 2.0, 1.0, 1.0, 1000, 0.05)
        assert cert.upper_bound == pytest.approx(float(ref), rel=1e-14)

    def test_rates(self):
        for n in (10**3, 10**4, 10**5, 10**6):
            c = bounds.efficiency_upper_bound(0.5, 0.0, 1.0, 1.0, n, 0.05)
            assert c.lipschitz_term * math.sqrt(n) == pytest.approx(2.0)
            # the kl term carries a log factor; scaled by sqrt(N / log N) it stays bounded
            assert c.kl_term * math.sqrt(n / math.log(n)) < 1.5

    @settings(max_examples=50, deadline=None)
    @given(k1=st.floats(0, 100), k2=st.floats(0, 100))
    def test_strictly_increasing_in_kl(self, k1, k2):
        if abs(k1 - k2) < 1e-6:
            return
        lo, hi = sorted((k1, k2))
        f = lambda kl: bounds.efficiency_upper_bound(0.4, kl, 2.0, 0.5, 500, 0.05).upper_bound
        assert f(lo) < f(hi)

    def test_validation(self):
        with pytest.raises(ValueError):
            bounds.efficiency_upper_bound(1.5, 0, 1, 1, 100, 0.05)
        with pytest.raises(ValueError):
            bounds.efficiency_upper_bound(0.5, 0, 0, 1, 100, 0.05)


def test_pure_and_deterministic():
    a = [bounds.kl_budget(0.1, 0.05, 0.05, 1234) for _ in range(3)]
    assert a[0] == a[1] == a[2]
