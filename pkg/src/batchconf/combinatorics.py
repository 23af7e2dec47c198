"""Binomial weight tables for batch conformal p-values.

Every batch p-value is a tail sum of the pmf of a combined-sample rank of a
comparison order statistic. Under exchangeability the ordered ranks
``R_1 < ... < R_m`` of the ``m`` comparison scores among ``n + m`` pooled
scores are uniform over increasing ``m``-subsets of ``{1, ..., n+m}``, so the
pmfs involved are ratios of binomial coefficients. They are evaluated in log
space so that tables for ``n`` in the thousands neither overflow nor lose
precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

# below this many factors ln C(b, a) is summed term by term
_DIRECT_SUM_LIMIT = 2000
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def log_binom(b: int, a: int) -> float:
    """Natural log of the binomial coefficient C(b, a).

    Accurate to ~1e-13 relative error for ``b`` up to 1e6.

    >>> round(math.exp(log_binom(4, 2)), 12)
    6.0
    """
    b, a = _check_nonneg_int(b, "b"), _check_nonneg_int(a, "a")
    if a > b:
        raise ValueError(f"log_binom requires a <= b, got a={a}, b={b}")
    k = min(a, b - a)
    if k == 0:
        return 0.0
    if k <= _DIRECT_SUM_LIMIT:
        base = b - k
        return math.fsum(math.log1p(base / j) for j in range(1, k + 1))
    return float(_log_binom_array(b, k))


def _check_nonneg_int(x, name):
    if isinstance(x, (bool, np.bool_)) or not isinstance(x, (int, np.integer)):
        raise TypeError(f"{name} must be an integer, got {type(x).__name__}")
    if x < 0:
        raise ValueError(f"{name} must be nonnegative, got {x}")
    return int(x)


def _stirling_remainder(x):
    """``ln(x!) - (x + 1/2) ln x + x - ln(2 pi)/2`` for integers x >= 1."""
    x = np.asarray(x, dtype=float)
    small = x <= 15
    xs = np.where(small, x, 1.0)
    direct = gammaln(xs + 1) - (xs + 0.5) * np.log(xs) + xs - _HALF_LOG_2PI
    xl = np.where(small, 16.0, x)
    x2 = xl * xl
    series = (1 / 12 - (1 / 360 - (1 / 1260 - (1 / 1680 - 1 / (1188 * x2)) / x2) / x2) / x2) / xl
    return np.where(small, direct, series)


def _log_binom_array(b, a):
    """Vectorized ln C(b, a); -inf where a < 0 or a > b.

    Uses ``ln C(b, a) = a ln(b/a) + (b-a) ln(b/(b-a)) + ln(b / (2 pi a (b-a)))/2
    + r(b) - r(a) - r(b-a)`` with ``r`` the Stirling remainder. The two
    leading terms are positive, so nothing cancels and the relative error
    stays near machine precision even for b ~ 1e6.
    """
    b = np.asarray(b, dtype=float)
    a = np.asarray(a, dtype=float)
    valid = (a >= 0) & (a <= b)
    k = np.where(valid, np.minimum(a, b - a), 1.0)
    bb = np.where(valid, b, 2.0)
    trivial = k == 0
    k = np.where(trivial, 1.0, k)
    bb = np.where(trivial, 2.0, bb)
    rest = bb - k
    out = (
        k * np.log(bb / k)
        + rest * np.log1p(k / rest)
        + 0.5 * np.log(bb / (2 * np.pi * k * rest))
        + _stirling_remainder(bb) - _stirling_remainder(k) - _stirling_remainder(rest)
    )
    out = np.where(trivial, 0.0, out)
    return np.where(valid, out, -np.inf)


def _sorted_sum(values) -> float:
    # ascending-magnitude summation of nonnegative terms
    return math.fsum(np.sort(np.asarray(values, dtype=float)))


@dataclass(frozen=True)
class WeightTable:
    """pmf of ``R_eta - eta + 1`` on ``{1, ..., n+1}``.

    ``weights[i - 1]`` is ``w_i``. ``tail[j - 1]`` is ``sum_{i >= j} w_i``, the
    batch p-value when the shifted rank equals ``j``.
    """

    n: int
    m: int
    eta: int
    weights: np.ndarray = field(repr=False)
    tail: np.ndarray = field(repr=False)

    def pvalue_at(self, shifted_rank: int) -> float:
        """Batch p-value for a shifted rank ``R_eta - eta + 1`` in [1, n+1]."""
        return float(self.tail[shifted_rank - 1])


@lru_cache(maxsize=4096)
def rank_weights(n: int, m: int, eta: int) -> WeightTable:
    """Weights ``w_1..w_{n+1}`` of the batch conformal p-value.

    ``w_i = C(i+eta-2, eta-1) C(n+m-i-eta+1, m-eta) / C(n+m, m)`` is the
    probability that the ``eta``-th smallest of ``m`` comparison scores has
    exactly ``i - 1`` reference scores below it.

    Tables are cached; equal-sized groups share them.
    """
    n = _check_nonneg_int(n, "n")
    m = _check_nonneg_int(m, "m")
    eta = _check_nonneg_int(eta, "eta")
    if n < 1 or m < 1:
        raise ValueError(f"need n >= 1 and m >= 1, got n={n}, m={m}")
    if not 1 <= eta <= m:
        raise ValueError(f"eta must lie in [1, {m}], got {eta}")

    i = np.arange(1, n + 2)
    logw = (
        _log_binom_array(i + eta - 2, eta - 1)
        + _log_binom_array(n + m - i - eta + 1, m - eta)
        - log_binom(n + m, m)
    )
    weights = np.exp(logw)
    # remove the common rounding offset of the log-space normalizer
    weights /= _sorted_sum(weights)
    weights.setflags(write=False)
    tail = _tail_sums(weights)
    return WeightTable(n=n, m=m, eta=eta, weights=weights, tail=tail)


def _tail_sums(weights):
    # compensated (Neumaier) running sum from the last weight backwards
    tail = np.empty_like(weights)
    total = comp = 0.0
    for j in range(len(weights) - 1, -1, -1):
        w = float(weights[j])
        t = total + w
        comp += (total - t) + w if abs(total) >= abs(w) else (w - t) + total
        total = t
        tail[j] = total + comp
    # the full tail is the total mass, 1 by construction
    tail[0] = 1.0
    np.clip(tail, weights[-1], 1.0, out=tail)
    tail.setflags(write=False)
    return tail


def exact_rank_weights(n: int, m: int, eta: int) -> list[Fraction]:
    """Big-integer rational version of :func:`rank_weights`, for verification."""
    if not (n >= 1 and m >= 1 and 1 <= eta <= m):
        raise ValueError(f"invalid (n, m, eta) = ({n}, {m}, {eta})")
    total = math.comb(n + m, m)
    return [
        Fraction(
            math.comb(i + eta - 2, eta - 1) * math.comb(n + m - i - eta + 1, m - eta),
            total,
        )
        for i in range(1, n + 2)
    ]


def scaled_rank(eta: int, m: int, n: int) -> int:
    """Reference rank matching comparison rank ``eta``: ``round(eta * n / m)``.

    Exact halves round down, so ``scaled_rank(1, 2, 3) == 1``.
    """
    if not (m >= 1 and 1 <= eta <= m):
        raise ValueError(f"eta must lie in [1, {m}], got {eta}")
    q, r = divmod(eta * n, m)
    # exact integer comparison of the fractional part r/m against 1/2
    return q + 1 if 2 * r > m else q


@dataclass(frozen=True)
class TwoQuantileWeightTable:
    """pmf of ``T = max(R_eta1 - eta1 - etaTilde1 + 1, R_eta2 - eta2 - etaTilde2 + 1)``.

    ``offsets[j]`` carries mass ``weights[j]``; ``tail[j]`` is the mass at
    offsets ``>= offsets[j]``.
    """

    n: int
    m: int
    eta1: int
    eta2: int
    eta_tilde1: int
    eta_tilde2: int
    offsets: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    tail: np.ndarray = field(repr=False)

    def as_dict(self) -> dict[int, float]:
        return {int(t): float(w) for t, w in zip(self.offsets, self.weights)}


def _two_quantile_pairs(n, m, eta1, eta2, eta_tilde1, eta_tilde2):
    # every feasible (R_eta1, R_eta2) = (a, b): eta1 <= a, a + (eta2 - eta1) <= b,
    # b <= n + eta2, a <= n + eta1
    a = np.arange(eta1, n + eta1 + 1)
    b = np.arange(eta2, n + eta2 + 1)
    aa, bb = np.meshgrid(a, b, indexing="ij")
    feasible = bb - aa >= eta2 - eta1
    aa, bb = aa[feasible], bb[feasible]
    t1 = aa - eta1 - eta_tilde1 + 1
    t2 = bb - eta2 - eta_tilde2 + 1
    return aa, bb, np.maximum(t1, t2)


@lru_cache(maxsize=1024)
def two_quantile_weights(
    n: int, m: int, eta1: int, eta2: int, eta_tilde1: int, eta_tilde2: int
) -> TwoQuantileWeightTable:
    """Weights ``w_t`` of the two-quantile p-value.

    ``P(R_eta1 = a, R_eta2 = b) = C(a-1, eta1-1) C(b-a-1, eta2-eta1-1)
    C(n+m-b, m-eta2) / C(n+m, m)`` is summed over all ``(a, b)`` pairs sharing
    the same ``T``. The support of ``T`` runs from ``1 - eta_tilde1`` up to
    ``n + 1 - eta_tilde1``, which is wider than ``[1 - eta_tilde1,
    n + 1 - eta_tilde2]`` whenever ``eta_tilde1 < eta_tilde2``; the full
    support is kept so that the weights sum to one.
    """
    if not (n >= 1 and m >= 2):
        raise ValueError(f"need n >= 1 and m >= 2, got n={n}, m={m}")
    if not 1 <= eta1 < eta2 <= m:
        raise ValueError(f"need 1 <= eta1 < eta2 <= m, got eta1={eta1}, eta2={eta2}, m={m}")
    if not 0 <= eta_tilde1 <= eta_tilde2 <= n:
        raise ValueError(
            f"need 0 <= eta_tilde1 <= eta_tilde2 <= n, got {eta_tilde1}, {eta_tilde2}"
        )

    aa, bb, t = _two_quantile_pairs(n, m, eta1, eta2, eta_tilde1, eta_tilde2)
    logp = (
        _log_binom_array(aa - 1, eta1 - 1)
        + _log_binom_array(bb - aa - 1, eta2 - eta1 - 1)
        + _log_binom_array(n + m - bb, m - eta2)
        - log_binom(n + m, m)
    )
    probs = np.exp(logp)

    offsets = np.arange(t.min(), t.max() + 1)
    weights = np.array([_sorted_sum(probs[t == o]) for o in offsets])
    weights /= _sorted_sum(weights)
    weights.setflags(write=False)
    offsets.setflags(write=False)
    tail = _tail_sums(weights)
    return TwoQuantileWeightTable(
        n=n, m=m, eta1=eta1, eta2=eta2, eta_tilde1=eta_tilde1, eta_tilde2=eta_tilde2,
        offsets=offsets, weights=weights, tail=tail,
    )


def exact_two_quantile_weights(n, m, eta1, eta2, eta_tilde1, eta_tilde2) -> dict[int, Fraction]:
    """Rational ``w_t`` by the closed-form double sum, for verification."""
    total = math.comb(n + m, m)
    out: dict[int, Fraction] = {}
    aa, bb, t = _two_quantile_pairs(n, m, eta1, eta2, eta_tilde1, eta_tilde2)
    for a, b, tt in zip(aa.tolist(), bb.tolist(), t.tolist()):
        count = (
            math.comb(a - 1, eta1 - 1)
            * math.comb(b - a - 1, eta2 - eta1 - 1)
            * math.comb(n + m - b, m - eta2)
        )
        out[tt] = out.get(tt, Fraction(0)) + Fraction(count, total)
    return dict(sorted(out.items()))
