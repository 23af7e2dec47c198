"""Benjamini-Hochberg selection, end-to-end detection, and rank-law oracles."""

from __future__ import annotations

import itertools
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

from .pvalues import (
    PValueRecord,
    batch_conformal_pvalue,
    quantile_rank,
    subsampling_pvalue,
)
from .scores import ScoreSet, SampleGroup, apply_scores


@dataclass(frozen=True)
class BHOutcome:
    alpha: float
    k_star: int
    threshold: Optional[float]
    rejected: frozenset
    sorted_pvalues: tuple
    group_ids: tuple = ()

    def to_dict(self) -> dict:
        ordered = [g for g in self.group_ids if g in self.rejected]
        return {"alpha": self.alpha, "k_star": self.k_star,
                "threshold": self.threshold, "rejected": ordered}


def bh_procedure(pvalues, alpha: float, group_ids: Optional[Sequence] = None) -> BHOutcome:
    """Benjamini-Hochberg step-up at level ``alpha``.

    Rejects every hypothesis with ``p <= p_(k*)`` where
    ``k* = max{k : p_(k) <= k * alpha / M}``; ties at the threshold are
    rejected together. ``rejected`` holds group ids (indices by default).
    """
    p = np.asarray(pvalues, dtype=float).ravel()
    M = p.size
    if M == 0:
        raise ValueError("no p-values given")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if np.any(~(p > 0) | (p > 1)):
        raise ValueError("p-values must lie in (0, 1]")
    ids = tuple(range(M)) if group_ids is None else tuple(group_ids)
    if len(ids) != M:
        raise ValueError("group_ids and pvalues differ in length")

    srt = np.sort(p)
    passing = np.nonzero(srt <= np.arange(1, M + 1) * alpha / M)[0]
    if passing.size == 0:
        return BHOutcome(alpha, 0, None, frozenset(), tuple(srt.tolist()), ids)
    k_star = int(passing[-1]) + 1
    threshold = float(srt[k_star - 1])
    rejected = frozenset(g for g, pk in zip(ids, p) if pk <= threshold)
    return BHOutcome(alpha, k_star, threshold, rejected, tuple(srt.tolist()), ids)


@dataclass(frozen=True)
class QuantileRule:
    """How the comparison rank ``eta_k`` is chosen from the group size.

    ``rule='rank'`` uses ``value`` as a fixed rank (clipped to the group
    size); ``q-ceil`` and ``q-floor`` use ``ceil(value * n_k)`` and
    ``floor(value * n_k)``, clipped to [1, n_k].
    """

    rule: str = "q-ceil"
    value: float = 0.5

    def __post_init__(self):
        if self.rule not in ("rank", "q-ceil", "q-floor"):
            raise ValueError(f"unknown quantile rule {self.rule!r}")
        if self.rule == "rank" and (self.value < 1 or int(self.value) != self.value):
            raise ValueError("rank rule needs a positive integer")
        if self.rule != "rank" and not 0 < self.value <= 1:
            raise ValueError("quantile level must lie in (0, 1]")

    def eta(self, size: int) -> int:
        if self.rule == "rank":
            return min(int(self.value), size)
        return quantile_rank(self.value, size, "ceil" if self.rule == "q-ceil" else "floor")

    @classmethod
    def coerce(cls, spec) -> "QuantileRule":
        if isinstance(spec, cls):
            return spec
        if isinstance(spec, Mapping):
            return cls(**spec)
        if isinstance(spec, int):
            return cls("rank", spec)
        if isinstance(spec, float):
            return cls("q-ceil", spec)
        raise TypeError(f"cannot build a quantile rule from {spec!r}")


def batch_pvalues(scores: ScoreSet, quantile_rule=QuantileRule(), workers: int = 1) -> list:
    """Batch conformal p-values for every group of a score set, in group order."""
    rule = QuantileRule.coerce(quantile_rule)
    ref = scores.reference

    def one(item):
        gid, s = item
        return batch_conformal_pvalue(ref, s, rule.eta(len(s)), group_id=gid, check_ties=False)

    items = list(scores.groups.items())
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, items))
    return [one(it) for it in items]


def batch_detect(reference: SampleGroup, groups: Sequence[SampleGroup], spec,
                 quantile_rule=QuantileRule(), alpha: float = 0.1, *,
                 tie_policy: str = "noise", seed=None, workers: int = 1):
    """Score, compute batch conformal p-values, and select groups by BH.

    FDR is controlled at ``K0 * alpha / K`` provided the score was fitted on
    data disjoint from ``reference`` and ``groups`` and the comparison groups
    are mutually independent; neither assumption can be checked from data.

    Returns
    -------
    records : list of PValueRecord
    outcome : BHOutcome
    """
    if not groups:
        raise ValueError("no comparison groups")
    for g in groups:
        if len(g) == 0:
            raise ValueError(f"group {g.id!r} is empty")
    scores = apply_scores(spec, reference, groups, tie_policy=tie_policy, seed=seed)
    records = batch_pvalues(scores, quantile_rule, workers)
    outcome = bh_procedure([r.p for r in records], alpha, [r.group_id for r in records])
    return records, outcome


def subsampling_detect(scores: ScoreSet, alpha: float, seed=None):
    """BH on conformal p-values of one randomly drawn point per group."""
    rng = np.random.default_rng(seed)
    records = [subsampling_pvalue(scores.reference, s, rng, group_id=gid)
               for gid, s in scores.groups.items()]
    return records, bh_procedure([r.p for r in records], alpha, [r.group_id for r in records])


def split_reference(n: int, K: int, seed=None) -> list:
    """Random partition of ``range(n)`` into ``K`` chunks whose sizes differ by at most one."""
    if n < K:
        raise ValueError(f"cannot split {n} reference points into {K} chunks")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(c) for c in np.array_split(perm, K)]


def partitioned_pvalues(scores: ScoreSet, quantile_rule=QuantileRule(), seed=None) -> list:
    """Batch p-values with each group tested against its own reference chunk."""
    rule = QuantileRule.coerce(quantile_rule)
    chunks = split_reference(scores.reference.size, len(scores.groups), seed)
    records = []
    for (gid, s), idx in zip(scores.groups.items(), chunks):
        rec = batch_conformal_pvalue(scores.reference[idx], s, rule.eta(len(s)),
                                     group_id=gid, check_ties=False)
        records.append(PValueRecord(gid, "partitioned", rec.eta_used, rec.statistic, rec.p))
    return records


def partitioned_detect(reference: SampleGroup, groups: Sequence[SampleGroup], spec,
                       alpha: float, seed=None, quantile_rule=QuantileRule(), *,
                       tie_policy: str = "noise"):
    """Reference-splitting baseline: independent p-values, then BH."""
    if len(reference) < len(groups):
        raise ValueError(f"need n >= K, got n={len(reference)}, K={len(groups)}")
    scores = apply_scores(spec, reference, groups, tie_policy=tie_policy, seed=seed)
    records = partitioned_pvalues(scores, quantile_rule, seed)
    return records, bh_procedure([r.p for r in records], alpha, [r.group_id for r in records])


@dataclass(frozen=True)
class MetricRecord:
    fdp: float
    power: float
    V: int
    R: int


def evaluate(outcome: BHOutcome, truth: Mapping) -> MetricRecord:
    """False discovery proportion and power of one selection.

    ``truth`` maps group id to ``True`` for null groups. Power is the fraction
    of non-null groups rejected (0 when there are none).
    """
    unknown = set(outcome.rejected) - set(truth)
    if unknown or (outcome.group_ids and set(outcome.group_ids) != set(truth)):
        raise ValueError(f"truth labels do not match the tested groups: {sorted(map(str, unknown))}")
    R = len(outcome.rejected)
    V = sum(1 for g in outcome.rejected if truth[g])
    non_null = sum(1 for v in truth.values() if not v)
    power = (R - V) / non_null if non_null else 0.0
    return MetricRecord(fdp=V / max(R, 1), power=power, V=V, R=R)


# --- rank-law oracles -------------------------------------------------------

ORACLE_LIMIT = 10**7


def rank_distribution_oracle(n: int, m: int) -> dict:
    """Exact uniform pmf over ordered comparison-rank vectors.

    Maps each ``(r_1 < ... < r_m)`` subset of ``{1, ..., n+m}`` to
    ``Fraction(1, C(n+m, m))``.
    """
    total = math.comb(n + m, m)
    if total > ORACLE_LIMIT:
        raise ValueError(f"C({n + m}, {m}) = {total} exceeds the enumeration limit")
    mass = Fraction(1, total)
    return {r: mass for r in itertools.combinations(range(1, n + m + 1), m)}


def rank_marginal(oracle: Mapping, index: int) -> dict:
    """pmf of ``R_index`` (1-based) from an enumerated joint pmf."""
    out: dict = {}
    for r, w in oracle.items():
        out[r[index - 1]] = out.get(r[index - 1], 0) + w
    return dict(sorted(out.items()))


def sample_rank_vectors(n: int, m: int, draws: int, seed=None) -> Counter:
    """Tally ordered comparison ranks over simulated exchangeable samples."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((draws, n + m))
    ranks = x.argsort(axis=1).argsort(axis=1) + 1
    cmp = np.sort(ranks[:, n:], axis=1)
    return Counter(map(tuple, cmp.tolist()))


@dataclass
class StochasticOrderReport:
    n: int
    m: int
    t: int
    violations: list = field(default_factory=list)
    closed_form_max_error: float = 0.0
    factorization_max_error: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def _lower_closed_form(r, q, t):
    # P(R_{t-1} <= r | R_t = q) = sum_{l<=min(r,q-1)} C(l-1,t-2) / sum_{l<=q-1} C(l-1,t-2)
    num = sum(math.comb(l - 1, t - 2) for l in range(1, min(r, q - 1) + 1))
    den = sum(math.comb(l - 1, t - 2) for l in range(1, q))
    return num / den


def stochastic_order_check(n: int, m: int, t: int) -> StochasticOrderReport:
    """Verify the monotone conditional rank laws around ``R_t`` by enumeration.

    Checks, for all ``q <= q'`` in the support of ``R_t`` and all ``r``:

    * ``P(R_{t-1} <= r | R_t = q) >= P(R_{t-1} <= r | R_t = q')``
    * ``P(R_{t+1} >= r | R_t = q) <= P(R_{t+1} >= r | R_t = q')`` (when ``t < m``)

    plus the closed form of the first conditional cdf and the conditional
    independence of ``R_{t-1}`` and ``R_{t+1}`` given ``R_t``.
    """
    if not 2 <= t <= m:
        raise ValueError(f"need 2 <= t <= m, got t={t}, m={m}")
    oracle = rank_distribution_oracle(n, m)
    N = n + m
    report = StochasticOrderReport(n, m, t)

    joint: dict = {}
    for r, w in oracle.items():
        key = (r[t - 2], r[t - 1], r[t] if t < m else None)
        joint[key] = joint.get(key, 0) + w
    p_q: dict = {}
    lower: dict = {}
    upper: dict = {}
    for (a, q, b), w in joint.items():
        p_q[q] = p_q.get(q, 0) + w
        lower[(q, a)] = lower.get((q, a), 0) + w
        if b is not None:
            upper[(q, b)] = upper.get((q, b), 0) + w
    support = sorted(p_q)

    def lower_cdf(q, r):
        return sum(w for (qq, a), w in lower.items() if qq == q and a <= r) / p_q[q]

    def upper_sf(q, r):
        return sum(w for (qq, b), w in upper.items() if qq == q and b >= r) / p_q[q]

    lo = {(q, r): lower_cdf(q, r) for q in support for r in range(1, N + 1)}
    up = {(q, r): upper_sf(q, r) for q in support for r in range(1, N + 1)} if t < m else {}

    for q, q2 in itertools.combinations_with_replacement(support, 2):
        for r in range(1, N + 1):
            if lo[(q, r)] < lo[(q2, r)]:
                report.violations.append(("lower", q, q2, r))
            if t < m and up[(q, r)] > up[(q2, r)]:
                report.violations.append(("upper", q, q2, r))

    for (q, r), val in lo.items():
        err = abs(float(val) - _lower_closed_form(r, q, t))
        report.closed_form_max_error = max(report.closed_form_max_error, err)

    if t < m:
        for (a, q, b), w in joint.items():
            pa = lower[(q, a)] / p_q[q]
            pb = upper[(q, b)] / p_q[q]
            err = abs(float(w / p_q[q] - pa * pb))
            report.factorization_max_error = max(report.factorization_max_error, err)
        # pairs (a, b) with zero joint mass must also have a zero product
        for q in support:
            for (qa, a) in [k for k in lower if k[0] == q]:
                for (qb, b) in [k for k in upper if k[0] == q]:
                    if (a, q, b) not in joint:
                        err = float(lower[(q, a)] * upper[(q, b)] / p_q[q] ** 2)
                        report.factorization_max_error = max(report.factorization_max_error, err)
    return report
