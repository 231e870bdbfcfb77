"""Closed-form bounds for conformal prediction with PAC-Bayes certificates.

Every function here is pure and deterministic.  Scalar special functions come
from :mod:`pacconformal.kernels`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import kernels

# (N+1)*alpha_hat is frequently an integer in exact arithmetic but not in
# floating point; counts are rounded with this slack.
_COUNT_EPS = 1e-9


class InfeasibleGuarantee(ValueError):
    """The calibration set is too small for the requested guarantee."""


def floor_count(x: float) -> int:
    return math.floor(x + _COUNT_EPS)


def ceil_count(x: float) -> int:
    return math.ceil(x - _COUNT_EPS)


def calibration_count(alpha_hat: float, n: int) -> int:
    """k = floor((N+1) * alpha_hat), the number of calibration points allowed above tau."""
    return floor_count((n + 1) * alpha_hat)


@dataclass(frozen=True)
class BoundInputs:
    alpha: float
    alpha_hat: float
    delta: float
    n: int
    kl_qp: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha_hat <= self.alpha < 1.0:
            raise ValueError(f"need 0 < alpha_hat <= alpha < 1, got alpha_hat={self.alpha_hat}, alpha={self.alpha}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.kl_qp < 0.0:
            raise ValueError(f"kl_qp must be nonnegative, got {self.kl_qp}")
        if self.n < 2 or calibration_count(self.alpha_hat, self.n) < 1:
            raise InfeasibleGuarantee(
                f"n={self.n} too small for alpha_hat={self.alpha_hat}: need N > 1/alpha_hat - 1")


@dataclass(frozen=True)
class CoverageCertificate:
    upper_bound: float
    empirical_rate: float
    kl_radius: float


@dataclass(frozen=True)
class EfficiencyCertificate:
    upper_bound: float
    empirical_mean: float
    lipschitz_term: float
    kl_term: float


def bernoulli_kl(p: float, q: float) -> float:
    """KL divergence between Bernoulli(p) and Bernoulli(q); +inf off the support."""
    return kernels.bernoulli_kl(float(p), float(q))


def kl_inverse_upper(p: float, c: float) -> float:
    """Largest q in [p, 1] with kl(p || q) <= c, bisected to adjacent floats."""
    if not math.isfinite(c):
        raise ValueError("kl radius must be finite")
    return kernels.kl_inverse_upper(float(p), float(c))


def vovk_2a_alpha_hat(alpha: float, delta: float, n: int) -> float:
    """Empirical level alpha - sqrt(-ln(delta) / 2N) from the Hoeffding-style correction."""
    if n < 1:
        raise ValueError("n must be positive")
    out = alpha - math.sqrt(-math.log(delta) / (2.0 * n))
    if out <= 0.0:
        raise InfeasibleGuarantee(
            f"calibration set too small: n={n} gives alpha_hat={out:.4g} <= 0 "
            f"for alpha={alpha}, delta={delta}")
    return out


def vovk_2b_alpha_hat(alpha: float, delta: float, n: int) -> float:
    """Largest empirical level certified by the incomplete-beta condition.

    Enumerates j = floor(alpha_hat (N+1) - 1) over the integers and returns the
    smallest alpha_hat in the winning class, (j+1)/(N+1).  Every alpha_hat in
    that class yields the same calibration threshold.
    """
    if n < 1:
        raise ValueError("n must be positive")
    j = kernels.vovk_2b_index(float(alpha), float(delta), int(n))
    if j < 0:
        raise InfeasibleGuarantee(
            f"calibration set too small: no alpha_hat in (0, {alpha}) satisfies "
            f"the beta condition at n={n}, delta={delta}")
    return (j + 1) / (n + 1)


def log_b_constant(alpha_hat: float, n: int) -> float:
    """ln B(N): log of the Beta(k, N+1-k) density at (k-1)/(N-1)."""
    k = calibration_count(alpha_hat, n)
    if n < 2 or k < 1 or k > n:
        raise InfeasibleGuarantee(f"k={k} outside [1, {n}] for alpha_hat={alpha_hat}, n={n}")
    return kernels.log_beta_pdf((k - 1) / (n - 1), float(k), float(n + 1 - k))


def empirical_miscoverage(alpha_hat: float, n: int) -> float:
    return (calibration_count(alpha_hat, n) - 1) / (n - 1)


def coverage_upper_bound(b: BoundInputs) -> CoverageCertificate:
    """Invert the kl coverage bound: an upper bound on test miscoverage of Q."""
    rate = empirical_miscoverage(b.alpha_hat, b.n)
    radius = (b.kl_qp + log_b_constant(b.alpha_hat, b.n) - math.log(b.delta)) / (b.n - 1)
    return CoverageCertificate(
        upper_bound=kl_inverse_upper(rate, radius),
        empirical_rate=rate,
        kl_radius=radius,
    )


def kl_budget(alpha: float, alpha_hat: float, delta: float, n: int) -> float:
    """Largest KL(Q||P) for which test miscoverage <= alpha stays certified.

    Negative values mean no posterior, not even Q = P, is certified.
    """
    if alpha_hat > alpha:
        raise ValueError(f"alpha_hat={alpha_hat} exceeds alpha={alpha}")
    rate = empirical_miscoverage(alpha_hat, n)
    log_b = log_b_constant(alpha_hat, n)
    return (n - 1) * bernoulli_kl(rate, alpha) - (log_b - math.log(delta))


def max_certified_alpha_hat(alpha: float, delta: float, n: int) -> float:
    """Largest alpha_hat of the form k/(N+1) whose KL budget is nonnegative.

    This is where the budget crosses zero; raises when no level qualifies.
    """
    best = None
    k = 1
    while k / (n + 1) <= alpha and k <= n:
        ah = k / (n + 1)
        if kl_budget(alpha, ah, delta, n) >= 0.0:
            best = ah
        k += 1
    if best is None:
        raise InfeasibleGuarantee(f"no alpha_hat has a nonnegative KL budget at n={n}, delta={delta}")
    return best


def efficiency_upper_bound(empirical_mean: float, kl_qp: float, beta: float,
                           l_tau: float, n: int, gamma: float) -> EfficiencyCertificate:
    """Bound on expected efficiency of the randomized predictor (efficiency in [0, 1])."""
    if not 0.0 <= empirical_mean <= 1.0:
        raise ValueError(f"empirical efficiency must lie in [0, 1], got {empirical_mean}")
    if beta <= 0 or l_tau <= 0:
        raise ValueError("beta and l_tau must be positive")
    if n < 2:
        raise ValueError("n must be at least 2")
    lip = 2.0 * beta * l_tau / math.sqrt(n)
    klt = math.sqrt(0.5 * kl_qp + 0.5 * math.log(2.0 * n / gamma)) / math.sqrt(n - 1)
    return EfficiencyCertificate(
        upper_bound=empirical_mean + lip + klt,
        empirical_mean=empirical_mean,
        lipschitz_term=lip,
        kl_term=klt,
    )
