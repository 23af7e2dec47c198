import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from batchconf.combinatorics import (
    exact_rank_weights,
    exact_two_quantile_weights,
    rank_weights,
    scaled_rank,
)
from batchconf.pvalues import (
    batch_conformal_pvalue,
    multi_quantile_pvalue,
    permutation_pvalue,
    quantile_rank,
    ranksum_pvalue,
    subsampling_pvalue,
    ztest_pvalue,
    _mann_whitney_counts,
)

from conftest import layout, rank_subsets


def exact_batch_p(n, m, eta, ranks):
    w = exact_rank_weights(n, m, eta)
    j = ranks[eta - 1] - eta + 1
    return sum(w[j - 1:], Fraction(0))


def assert_super_uniform(law):
    """``law`` maps p-value -> probability; check P(p <= a) <= a at every atom."""
    cum = Fraction(0)
    for p in sorted(law):
        cum += law[p]
        assert cum <= p


# --- batch ------------------------------------------------------------------

def test_batch_standard_conformal_example():
    rec = batch_conformal_pvalue([1, 2, 3], [4], 1)
    assert rec.p == pytest.approx(0.25, abs=1e-15)
    assert rec.eta_used == 1 and rec.statistic == 4.0


def test_batch_below_all_references_is_one():
    rec = batch_conformal_pvalue([5, 6, 7, 8], [0.1, 0.2, 9], 2)
    assert rec.p == 1.0


@pytest.mark.parametrize("n,m,eta", [(5, 3, 2), (4, 4, 1), (3, 5, 5), (6, 6, 3), (9, 3, 3)])
def test_batch_super_uniform_by_enumeration(n, m, eta):
    law = {}
    for r in rank_subsets(n, m):
        ref, cmp = layout(n, m, r)
        exact = exact_batch_p(n, m, eta, r)
        got = batch_conformal_pvalue(ref, cmp, eta).p
        assert abs(got - float(exact)) <= 1e-12
        law[exact] = law.get(exact, 0) + Fraction(1, math.comb(n + m, m))
    assert_super_uniform(law)
    # every atom is attained with equality
    cum = Fraction(0)
    for p in sorted(law):
        cum += law[p]
        assert cum == p


def test_batch_step_sizes_equal_weights():
    n, m, eta = 8, 4, 2
    w = rank_weights(n, m, eta).weights
    ref = np.arange(1.0, n + 1)
    base = [0.5, 0.25, 100.0, 200.0]
    ps = []
    for below in range(n + 1):
        cmp = list(base)
        cmp[1] = below + 0.5   # the second-smallest comparison score
        cmp[0] = 0.1
        ps.append(batch_conformal_pvalue(ref, cmp, eta).p)
    for r in range(n):
        assert ps[r] - ps[r + 1] == pytest.approx(w[r], abs=1e-14)


@pytest.mark.parametrize("n", [1, 3, 10, 57])
def test_batch_equals_standard_conformal_at_m1(n, rng):
    ref = rng.standard_normal(n)
    for s in rng.standard_normal(20):
        expected = (np.count_nonzero(s <= ref) + 1) / (n + 1)
        assert batch_conformal_pvalue(ref, [s], 1).p == pytest.approx(expected, rel=1e-14)


def test_batch_monotone_in_scores(rng):
    ref = rng.standard_normal(30)
    cmp = rng.standard_normal(12)
    base = batch_conformal_pvalue(ref, cmp, 6).p
    for i in range(cmp.size):
        up = cmp.copy()
        up[i] += 0.7 + 1e-6 * i
        assert batch_conformal_pvalue(ref, up, 6).p <= base
    for i in range(ref.size):
        up = ref.copy()
        up[i] += 0.7 + 1e-6 * i
        assert batch_conformal_pvalue(up, cmp, 6).p >= base


def test_batch_rejects_ties_and_bad_eta():
    with pytest.raises(ValueError, match="distinct"):
        batch_conformal_pvalue([1, 2, 3], [2, 5], 1)
    with pytest.raises(ValueError):
        batch_conformal_pvalue([1, 2, 3], [4, 5], 3)
    with pytest.raises(ValueError):
        batch_conformal_pvalue([], [4], 1)


def test_quantile_rank_rounding():
    assert quantile_rank(0.8, 30) == 24
    assert quantile_rank(0.5, 31) == 16
    assert quantile_rank(0.5, 31, "floor") == 15
    assert quantile_rank(0.01, 10) == 1
    assert quantile_rank(0.75, 10, "floor") == 7


# --- two quantiles --------------------------------------------------------------

def test_multiquantile_all_below_is_one():
    rec = multi_quantile_pvalue(np.arange(10.0, 20.0), [0.1, 0.2, 0.3, 0.4], 1, 3)
    assert rec.p == 1.0


@pytest.mark.parametrize("n,m,e1,e2", [(6, 3, 1, 2), (6, 3, 2, 3), (5, 4, 1, 3), (7, 5, 2, 4)])
def test_multiquantile_super_uniform_by_enumeration(n, m, e1, e2):
    et1, et2 = scaled_rank(e1, m, n), scaled_rank(e2, m, n)
    w = exact_two_quantile_weights(n, m, e1, e2, et1, et2)
    law = {}
    for r in rank_subsets(n, m):
        ref, cmp = layout(n, m, r)
        t_obs = max(r[e1 - 1] - e1 - et1 + 1, r[e2 - 1] - e2 - et2 + 1)
        exact = sum((v for t, v in w.items() if t >= t_obs), Fraction(0))
        rec = multi_quantile_pvalue(ref, cmp, e1, e2)
        assert rec.statistic == t_obs
        assert abs(rec.p - float(exact)) <= 1e-12
        law[exact] = law.get(exact, 0) + Fraction(1, math.comb(n + m, m))
    assert_super_uniform(law)


def test_multiquantile_upper_shift_never_increases_p(rng):
    ref = rng.standard_normal(40)
    cmp = np.sort(rng.standard_normal(10))
    base = multi_quantile_pvalue(ref, cmp, 3, 8).p
    for bump in (0.1, 0.5, 2.0, 10.0):
        shifted = cmp.copy()
        shifted[3:] += bump
        assert multi_quantile_pvalue(ref, shifted, 3, 8).p <= base


# --- subsampling ------------------------------------------------------------------

def test_subsampling_examples():
    assert subsampling_pvalue([1, 2, 3], [10, 11], seed=0).p == 0.25
    assert subsampling_pvalue([1, 2, 3], [-5, -4], seed=0).p == 1.0
    a = subsampling_pvalue(np.arange(9.0), np.arange(20.0) + 0.5, seed=3)
    b = subsampling_pvalue(np.arange(9.0), np.arange(20.0) + 0.5, seed=3)
    assert a == b


def test_subsampling_super_uniform_by_enumeration():
    n, m = 5, 3
    law = {}
    unit = Fraction(1, math.comb(n + m, m) * m)
    for r in rank_subsets(n, m):
        ref, cmp = layout(n, m, r)
        for s in cmp:
            p = Fraction(sum(1 for v in ref if s <= v) + 1, n + 1)
            law[p] = law.get(p, 0) + unit
    assert_super_uniform(law)


# --- permutation ---------------------------------------------------------------

def test_permutation_constant_statistic_gives_one():
    rec = permutation_pvalue(np.ones(20), 10, "mean-diff", L=99, seed=1)
    assert rec.p == 1.0


def test_permutation_minimum_is_one_over_L_plus_one():
    x = np.concatenate([np.arange(30.0), np.arange(30.0) + 1000])
    rec = permutation_pvalue(x, 30, "mean-diff", L=199, seed=4)
    assert rec.p == pytest.approx(1 / 200)


def test_permutation_relabel_invariance(rng):
    ref, cmp = rng.standard_normal(15), rng.standard_normal(12) + 0.3
    base = permutation_pvalue(np.concatenate([ref, cmp]), 15, "quantile-diff", 299, 11, tau=0.8)
    for _ in range(3):
        shuffled = np.concatenate([rng.permutation(ref), rng.permutation(cmp)])
        again = permutation_pvalue(shuffled, 15, "quantile-diff", 299, 11, tau=0.8)
        assert again.p == base.p and again.statistic == base.statistic


def test_permutation_null_rejection_rate():
    rng = np.random.default_rng(2024)
    reps, alpha = 10_000, 0.05
    hits = 0
    for _ in range(reps):
        x = rng.standard_normal(20)
        hits += permutation_pvalue(x, 10, "mean-diff", L=199, seed=rng).p <= alpha
    rate = hits / reps
    assert rate <= alpha + 3 * math.sqrt(alpha * (1 - alpha) / reps)


def test_permutation_argument_errors():
    with pytest.raises(ValueError):
        permutation_pvalue(np.arange(5.0), 5)
    with pytest.raises(ValueError):
        permutation_pvalue(np.arange(5.0), 2, "median")
    with pytest.raises(ValueError):
        permutation_pvalue(np.arange(5.0), 2, L=0)


# --- rank-sum ----------------------------------------------------------------------

def test_ranksum_extremes():
    assert ranksum_pvalue([1, 2, 3], [4, 5, 6]).p == pytest.approx(1 / 20)
    assert ranksum_pvalue([0.0], [1.0]).p == pytest.approx(0.5)
    assert ranksum_pvalue([4, 5, 6], [1, 2, 3]).p == 1.0


@pytest.mark.parametrize("n,m", [(1, 1), (3, 4), (6, 2), (9, 7), (20, 13)])
def test_mann_whitney_counts_sum_and_symmetry(n, m):
    c = _mann_whitney_counts(n, m)
    assert sum(c) == math.comb(n + m, m)
    assert c == c[::-1]


def test_mann_whitney_counts_match_brute_force():
    n, m = 5, 4
    counts = [0] * (n * m + 1)
    for r in rank_subsets(n, m):
        U = n * m + m * (m + 1) // 2 - sum(r)
        counts[U] += 1
    assert list(_mann_whitney_counts(n, m)) == counts


@pytest.mark.parametrize("n,m", [(4, 4), (5, 3), (3, 6)])
def test_ranksum_super_uniform_by_enumeration(n, m):
    law = {}
    c = _mann_whitney_counts(n, m)
    total = math.comb(n + m, m)
    for r in rank_subsets(n, m):
        ref, cmp = layout(n, m, r)
        U = n * m + m * (m + 1) // 2 - sum(r)
        exact = Fraction(sum(c[: U + 1]), total)
        assert ranksum_pvalue(ref, cmp).p == pytest.approx(float(exact), rel=1e-12)
        law[exact] = law.get(exact, 0) + Fraction(1, total)
    assert_super_uniform(law)


def test_ranksum_matches_scipy_exact(rng):
    for n, m in [(7, 9), (12, 12), (30, 25)]:
        ref, cmp = rng.standard_normal(n), rng.standard_normal(m) + 0.4
        expected = stats.mannwhitneyu(cmp, ref, alternative="greater", method="exact").pvalue
        assert ranksum_pvalue(ref, cmp).p == pytest.approx(expected, rel=1e-10)


def test_ranksum_exact_and_normal_agree_at_100(rng):
    for _ in range(5):
        ref, cmp = rng.standard_normal(100), rng.standard_normal(100)
        exact = ranksum_pvalue(ref, cmp, "exact").p
        normal = ranksum_pvalue(ref, cmp, "normal").p
        assert abs(exact - normal) <= 0.01


def test_ranksum_exact_limit_and_mode():
    with pytest.raises(ValueError, match="normal"):
        ranksum_pvalue(np.arange(200.0), np.arange(60.0) + 0.5, "exact")
    with pytest.raises(ValueError):
        ranksum_pvalue([1.0], [2.0], "asymptotic")


# --- z-test --------------------------------------------------------------------------

def test_ztest_examples():
    assert ztest_pvalue([1.0, 2.0, 3.0], [2.0, 2.0], sigma=1.0).p == pytest.approx(0.5)
    n, m, sigma = 4, 9, 2.0
    gap = sigma * math.sqrt(1 / n + 1 / m)
    ref = np.full(n, 5.0 + gap)
    cmp = np.full(m, 5.0)
    assert ztest_pvalue(ref, cmp, sigma).p == pytest.approx(stats.norm.cdf(1.0), rel=1e-12)


def test_ztest_null_uniformity():
    rng = np.random.default_rng(99)
    ref = 3 * rng.standard_normal((10_000, 100))
    cmp = 3 * rng.standard_normal((10_000, 40))
    ps = [ztest_pvalue(a, b, 3.0).p for a, b in zip(ref, cmp)]
    assert stats.kstest(ps, "uniform").pvalue > 0.01


def test_ttest_plugs_in_pooled_sd(rng):
    ref, cmp = rng.standard_normal(25), rng.standard_normal(18)
    rec = ztest_pvalue(ref, cmp)
    pooled = math.sqrt((24 * ref.var(ddof=1) + 17 * cmp.var(ddof=1)) / 41)
    assert rec.method == "ttest"
    assert rec.p == pytest.approx(ztest_pvalue(ref, cmp, pooled).p, rel=1e-12)
    with pytest.raises(ValueError):
        ztest_pvalue(ref, cmp, sigma=0.0)
