"""p-value constructions for testing one comparison sample against a reference.

All tests are one-sided: large comparison scores are evidence against the
null. Two-sided behaviour is obtained by choosing the score, e.g. the absolute
deviation from a reference centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from functools import lru_cache
from typing import Optional, Union

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .combinatorics import rank_weights, scaled_rank, two_quantile_weights

METHODS = ("batch", "multiquantile", "subsampling", "permutation", "ranksum", "ztest", "ttest")

RANKSUM_EXACT_LIMIT = 10_000
_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class PValueRecord:
    group_id: object
    method: str
    eta_used: Optional[Union[int, tuple]]
    statistic: float
    p: float

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.eta_used, tuple):
            d["eta_used"] = list(self.eta_used)
        return d


def quantile_rank(q: float, size: int, rounding: str = "ceil") -> int:
    """Rank ``ceil(q * size)`` or ``floor(q * size)``, clipped to [1, size].

    Products within 1e-9 of an integer are treated as that integer so that
    ``quantile_rank(0.8, 30)`` is 24 rather than 25.
    """
    if size < 1:
        raise ValueError("size must be positive")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level must lie in [0, 1], got {q}")
    x = q * size
    nearest = round(x)
    if abs(x - nearest) < 1e-9:
        k = nearest
    elif rounding == "ceil":
        k = math.ceil(x)
    elif rounding == "floor":
        k = math.floor(x)
    else:
        raise ValueError(f"rounding must be 'ceil' or 'floor', got {rounding!r}")
    return min(max(int(k), 1), size)


def _as_1d(x, name):
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _check_distinct(ref, cmp):
    pooled = np.sort(np.concatenate([ref, cmp]))
    if np.any(pooled[1:] == pooled[:-1]):
        raise ValueError(
            "scores are not distinct; break ties first (see scores.apply_scores)"
        )


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def batch_conformal_pvalue(ref_scores, cmp_scores, eta: int, *, group_id=None,
                           check_ties: bool = True) -> PValueRecord:
    """Batch conformal p-value for the ``eta``-th smallest comparison score.

    Parameters
    ----------
    ref_scores : array-like of shape (n,)
        Reference scores. Sorted internally.
    cmp_scores : array-like of shape (m,)
        Comparison scores.
    eta : int
        Rank of the comparison order statistic used as test statistic, in [1, m].
    check_ties : bool, default=True
        Raise if the pooled scores contain duplicates.

    Returns
    -------
    PValueRecord
        ``statistic`` is the ``eta``-th smallest comparison score.
    """
    ref = np.sort(_as_1d(ref_scores, "ref_scores"))
    cmp = _as_1d(cmp_scores, "cmp_scores")
    m = cmp.size
    if not 1 <= eta <= m:
        raise ValueError(f"eta must lie in [1, {m}], got {eta}")
    if check_ties:
        _check_distinct(ref, cmp)
    stat = np.partition(cmp, eta - 1)[eta - 1]
    table = rank_weights(ref.size, m, int(eta))
    # shifted rank R_eta - eta + 1 = 1 + #{reference scores below the statistic}
    shifted = int(np.searchsorted(ref, stat, side="left")) + 1
    return PValueRecord(group_id, "batch", int(eta), float(stat), table.pvalue_at(shifted))


def multi_quantile_pvalue(ref_scores, cmp_scores, eta1: int, eta2: int, *,
                          group_id=None, check_ties: bool = True) -> PValueRecord:
    """Two-quantile p-value combining comparison ranks ``eta1 < eta2``.

    Small when either order statistic is large relative to the reference
    order statistic at the matching scaled rank. ``statistic`` is the
    observed offset ``T``.
    """
    ref = np.sort(_as_1d(ref_scores, "ref_scores"))
    cmp = np.sort(_as_1d(cmp_scores, "cmp_scores"))
    n, m = ref.size, cmp.size
    if not 1 <= eta1 < eta2 <= m:
        raise ValueError(f"need 1 <= eta1 < eta2 <= m, got eta1={eta1}, eta2={eta2}, m={m}")
    if check_ties:
        _check_distinct(ref, cmp)
    et1, et2 = scaled_rank(eta1, m, n), scaled_rank(eta2, m, n)
    table = two_quantile_weights(n, m, int(eta1), int(eta2), et1, et2)
    c1 = int(np.searchsorted(ref, cmp[eta1 - 1], side="left"))
    c2 = int(np.searchsorted(ref, cmp[eta2 - 1], side="left"))
    t_obs = max(c1 + 1 - et1, c2 + 1 - et2)
    idx = t_obs - int(table.offsets[0])
    p = 1.0 if idx <= 0 else float(table.tail[idx])
    return PValueRecord(group_id, "multiquantile", (int(eta1), int(eta2)), float(t_obs), p)


def subsampling_pvalue(ref_scores, cmp_scores, seed=None, *, group_id=None) -> PValueRecord:
    """Conformal p-value of one comparison point drawn uniformly at random."""
    ref = _as_1d(ref_scores, "ref_scores")
    cmp = _as_1d(cmp_scores, "cmp_scores")
    i_star = int(_rng(seed).integers(cmp.size))
    s = cmp[i_star]
    p = (np.count_nonzero(s <= ref) + 1) / (ref.size + 1)
    return PValueRecord(group_id, "subsampling", None, float(s), float(p))


def _empirical_quantile_rows(x, tau):
    # left-continuous quantile inf{v : F(v) >= tau}, row-wise
    k = quantile_rank(tau, x.shape[-1], "ceil") if tau > 0 else 1
    return np.partition(x, k - 1, axis=-1)[..., k - 1]


_STATISTICS = {
    "mean-diff": lambda x, tau: x.mean(axis=-1),
    "quantile-diff": _empirical_quantile_rows,
}


def permutation_pvalue(pooled, n: int, statistic: str = "mean-diff", L: int = 1000,
                       seed=None, *, tau: float = 0.5, alternative: str = "greater",
                       group_id=None) -> PValueRecord:
    """Randomized permutation p-value ``(1 + #{T(perm) >= T(obs)}) / (L + 1)``.

    ``pooled[:n]`` is the reference block, ``pooled[n:]`` the comparison
    block. The statistic is ``stat(comparison) - stat(reference)``; with
    ``alternative='two-sided'`` its absolute value is used.
    """
    if statistic not in _STATISTICS:
        raise ValueError(f"unknown statistic {statistic!r}; choose from {sorted(_STATISTICS)}")
    if alternative not in ("greater", "two-sided"):
        raise ValueError(f"alternative must be 'greater' or 'two-sided', got {alternative!r}")
    if L < 1:
        raise ValueError("L must be at least 1")
    x = _as_1d(pooled, "pooled")
    if not 1 <= n < x.size:
        raise ValueError(f"need 1 <= n < len(pooled), got n={n}")
    # canonical within-block order makes the result invariant to relabelling
    x = np.concatenate([np.sort(x[:n]), np.sort(x[n:])])
    fn = _STATISTICS[statistic]

    def stat(arr):
        d = fn(arr[..., n:], tau) - fn(arr[..., :n], tau)
        return np.abs(d) if alternative == "two-sided" else d

    t_obs = stat(x)
    perms = _rng(seed).permuted(np.broadcast_to(x, (L, x.size)), axis=1)
    t_perm = stat(perms)
    # relative slack so that permutations reproducing the observed split count as ties
    tol = 1e-12 * max(1.0, abs(float(t_obs)))
    count = int(np.count_nonzero(t_perm >= t_obs - tol))
    return PValueRecord(group_id, "permutation", None, float(t_obs), (1 + count) / (L + 1))


@lru_cache(maxsize=512)
def _mann_whitney_counts(n: int, m: int) -> tuple:
    """Number of arrangements with ``U = u`` for u = 0..n*m (exact integers).

    Coefficients of the Gaussian binomial ``prod_{i<=m} (1-q^{n+i}) / (1-q^i)``,
    built as truncated power series so every intermediate is an integer.
    """
    n, m = max(n, m), min(n, m)
    size = n * m + 1
    c = np.zeros(size, dtype=object)
    c[0] = 1
    for i in range(1, m + 1):
        s = n + i
        if s < size:
            c[s:] = c[s:] - c[: size - s]
        for r in range(i):
            c[r::i] = np.cumsum(c[r::i])
    return tuple(int(v) for v in c)


@lru_cache(maxsize=512)
def _mann_whitney_cdf(n: int, m: int) -> np.ndarray:
    counts = _mann_whitney_counts(n, m)
    total = math.comb(n + m, m)
    cum = 0
    out = np.empty(len(counts))
    for u, c in enumerate(counts):
        cum += c
        out[u] = cum / total
    out.setflags(write=False)
    return out


def ranksum_pvalue(ref_scores, cmp_scores, mode: str = "exact", *, group_id=None) -> PValueRecord:
    """One-sided Wilcoxon rank-sum p-value ``P(U' <= U)``.

    ``U = n*m + m(m+1)/2 - R`` counts (reference, comparison) pairs with the
    reference value larger, where ``R`` is the comparison rank sum in the
    pooled sample. Small ``U`` means large comparison values.
    """
    ref = _as_1d(ref_scores, "ref_scores")
    cmp = _as_1d(cmp_scores, "cmp_scores")
    n, m = ref.size, cmp.size
    ranks = rankdata(np.concatenate([ref, cmp]))
    R = float(ranks[n:].sum())
    U = n * m + m * (m + 1) / 2 - R
    if mode == "exact":
        if n * m > RANKSUM_EXACT_LIMIT:
            raise ValueError(
                f"exact rank-sum limited to n*m <= {RANKSUM_EXACT_LIMIT} (got {n * m}); "
                "use mode='normal'"
            )
        # average ranks under ties give half-integers; U' is integer-valued
        p = float(_mann_whitney_cdf(n, m)[int(math.floor(U + 1e-9))])
    elif mode == "normal":
        mu = n * m / 2
        sd = math.sqrt(n * m * (n + m + 1) / 12)
        p = float(ndtr((U + 0.5 - mu) / sd))
    else:
        raise ValueError(f"mode must be 'exact' or 'normal', got {mode!r}")
    return PValueRecord(group_id, "ranksum", None, float(U), min(max(p, _TINY), 1.0))


def ztest_pvalue(ref_values, cmp_values, sigma: Optional[float] = None, *,
                 group_id=None) -> PValueRecord:
    """One-sided two-sample z-test ``Phi((mean_ref - mean_cmp) / (sigma sqrt(1/n + 1/m)))``.

    With ``sigma=None`` the pooled sample standard deviation is plugged in
    and the method is reported as ``ttest``.
    """
    ref = _as_1d(ref_values, "ref_values")
    cmp = _as_1d(cmp_values, "cmp_values")
    n, m = ref.size, cmp.size
    method = "ztest"
    if sigma is None:
        if n + m < 3:
            raise ValueError("estimating sigma needs at least three observations")
        ss = ((ref - ref.mean()) ** 2).sum() + ((cmp - cmp.mean()) ** 2).sum()
        sigma = math.sqrt(ss / (n + m - 2))
        method = "ttest"
    elif not sigma > 0:
        raise ValueError("sigma must be positive")
    z = (ref.mean() - cmp.mean()) / (sigma * math.sqrt(1 / n + 1 / m))
    p = float(ndtr(z))
    return PValueRecord(group_id, method, None, float(z), max(p, _TINY))
