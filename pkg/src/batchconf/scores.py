"""Nonconformity scores and tie-breaking.

A score maps an observation ``(x, y)`` to a real number oriented so that
large values indicate departure from the reference distribution. Scores are
fitted on data disjoint from the reference and comparison samples used for
inference (a training split of the reference, or a control arm).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

KINDS = (
    "identity",
    "negated-identity",
    "abs-residual",
    "cqr",
    "mahalanobis",
    "sequential-mahalanobis",
    "empirical-cdf",
)

TIE_POLICIES = ("noise", "uniform", "none")

REFERENCE = "__reference__"


@dataclass
class SampleGroup:
    """One dataset: outcomes of shape (rows, p), optional features (rows, d).

    ``control`` holds control-arm outcomes when the group comes from a
    treated/control design; it is used only to build empirical-CDF scores.
    """

    id: object
    outcomes: np.ndarray
    features: Optional[np.ndarray] = None
    control: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2:
            raise ValueError(f"group {self.id!r}: outcomes must be 1-D or 2-D")
        self.outcomes = y
        if self.features is None:
            self.features = np.empty((len(y), 0))
        else:
            x = np.asarray(self.features, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            if len(x) != len(y):
                raise ValueError(
                    f"group {self.id!r}: {len(x)} feature rows vs {len(y)} outcome rows"
                )
            self.features = x
        if self.control is not None:
            self.control = np.asarray(self.control, dtype=float).ravel()

    def __len__(self):
        return len(self.outcomes)

    def subset(self, idx) -> "SampleGroup":
        return SampleGroup(self.id, self.outcomes[idx], self.features[idx], self.control)


class KNNRegressor:
    """k-nearest-neighbour conditional mean and quantile estimates.

    Inputs are standardized with the training mean and sd. With zero input
    columns every prediction is the global training statistic.
    """

    def __init__(self, k: int = 10):
        if k < 1:
            raise ValueError("k must be positive")
        self.k = k

    def fit(self, X, y):
        X = np.asarray(X, dtype=float).reshape(len(y), -1)
        self.y_ = np.asarray(y, dtype=float).ravel()
        self.k_ = min(self.k, len(self.y_))
        self.center_ = X.mean(axis=0) if X.shape[1] else np.empty(0)
        scale = X.std(axis=0) if X.shape[1] else np.empty(0)
        self.scale_ = np.where(scale > 0, scale, 1.0)
        self.tree_ = cKDTree(self._standardize(X)) if X.shape[1] else None
        return self

    def _standardize(self, X):
        return (X - self.center_) / self.scale_

    def _neighbours(self, X, exclude_self=False):
        X = np.asarray(X, dtype=float)
        X = X.reshape(len(X) if X.ndim == 2 else -1, len(self.center_))
        if self.tree_ is None:
            if exclude_self:
                idx = np.arange(len(self.y_))
                return np.array([np.delete(self.y_, i) for i in idx])
            return np.broadcast_to(self.y_, (len(X), len(self.y_)))
        k = self.k_ + 1 if exclude_self else self.k_
        k = min(k, len(self.y_))
        _, idx = self.tree_.query(self._standardize(X), k=k)
        idx = np.asarray(idx).reshape(len(X), k)
        if exclude_self:
            # drop the query point itself (first hit at distance zero)
            idx = idx[:, 1:] if k > 1 else idx
        return self.y_[idx]

    def predict(self, X, exclude_self=False):
        return self._neighbours(X, exclude_self).mean(axis=1)

    def predict_median(self, X, exclude_self=False):
        return np.median(self._neighbours(X, exclude_self), axis=1)

    def predict_quantile(self, X, q, exclude_self=False):
        return np.quantile(self._neighbours(X, exclude_self), q, axis=1)


@dataclass
class ScoreSpec:
    """A fitted score function. ``apply`` is deterministic."""

    kind: str
    params: dict = field(default_factory=dict)

    def apply(self, features, outcomes) -> np.ndarray:
        y = np.asarray(outcomes, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        x = np.empty((len(y), 0)) if features is None else np.asarray(features, dtype=float)
        x = x.reshape(len(y), -1)
        p = self.params
        if "p" in p and y.shape[1] != p["p"]:
            raise ValueError(f"expected {p['p']} outcome columns, got {y.shape[1]}")
        if "d" in p and x.shape[1] != p["d"]:
            raise ValueError(f"expected {p['d']} feature columns, got {x.shape[1]}")

        if self.kind == "identity":
            return y[:, 0].copy()
        if self.kind == "negated-identity":
            return -y[:, 0]
        if self.kind == "abs-residual":
            return np.abs(y[:, 0] - _center(p, x))
        if self.kind == "cqr":
            lo, hi = p["lower"], p["upper"]
            ql = lo.predict_quantile(x, p["alpha"] / 2) if isinstance(lo, KNNRegressor) else lo
            qh = hi.predict_quantile(x, 1 - p["alpha"] / 2) if isinstance(hi, KNNRegressor) else hi
            return np.maximum(ql - y[:, 0], y[:, 0] - qh)
        if self.kind in ("mahalanobis", "sequential-mahalanobis"):
            r = _residuals(self, x, y)
            return np.einsum("ij,jk,ik->i", r, p["precision"], r)
        if self.kind == "empirical-cdf":
            ctrl = p["control"]
            return np.searchsorted(ctrl, y[:, 0], side="right") / ctrl.size
        raise ValueError(f"unknown score kind {self.kind!r}")

    def score_group(self, group: SampleGroup) -> np.ndarray:
        return self.apply(group.features, group.outcomes)


def _center(p, x):
    est = p["center"]
    if isinstance(est, KNNRegressor):
        return est.predict_median(x) if p.get("estimator") == "median" else est.predict(x)
    return est


def _residuals(spec, x, y, exclude_self=False):
    p = spec.params
    if spec.kind == "mahalanobis":
        mu = p["mean"]
        if isinstance(mu, list):
            mu = np.column_stack([m.predict(x, exclude_self) for m in mu])
        return y - mu
    fit_order, apply_order = p["order"], p["apply_order"]
    cols = []
    for j, est in enumerate(p["estimators"]):
        # estimator j was trained on (x, y[fit_order[:j]]) but is fed the
        # outcomes listed by apply_order; the two differ only for deliberately
        # mis-specified orderings
        inputs = np.column_stack([x, y[:, list(apply_order[:j])]])
        cols.append(y[:, apply_order[j]] - est.predict(inputs, exclude_self))
    return np.column_stack(cols)


def _precision(cov, ridge):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    cov = (cov + cov.T) / 2
    dim = cov.shape[0]
    cond = np.linalg.cond(cov)
    if ridge == "auto":
        if not np.isfinite(cond) or cond > 1e12:
            lam = 1e-8 * np.trace(cov) / dim
            cov = cov + (lam if lam > 0 else 1e-8) * np.eye(dim)
    elif ridge is None:
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError(
                f"residual covariance is singular (condition number {cond:.3g}); "
                "pass ridge='auto' or a positive ridge value"
            )
    else:
        cov = cov + float(ridge) * np.eye(dim)
    return np.linalg.inv(cov), cov


def fit_score(kind: str, training: Optional[SampleGroup] = None, *, k: int = 10,
              center: str = "median", alpha: float = 0.1, order: Optional[Sequence[int]] = None,
              apply_order: Optional[Sequence[int]] = None, ridge="auto") -> ScoreSpec:
    """Fit a score of the given kind on training data.

    Parameters
    ----------
    kind : str
        One of :data:`KINDS` except ``empirical-cdf`` (see
        :func:`empirical_cdf_score`).
    training : SampleGroup
        Data disjoint from the inference data. Not needed for the identity
        kinds.
    k : int
        Neighbours for the k-NN estimators.
    center : {'median', 'mean'}
        Centre estimator for ``abs-residual``.
    alpha : float
        Miscoverage of the ``cqr`` band; quantiles at ``alpha/2`` and
        ``1 - alpha/2``.
    order, apply_order : sequence of int
        Outcome ordering for ``sequential-mahalanobis``. Estimator ``j`` predicts
        ``y[order[j]]`` from ``x`` and ``y[order[:j]]``; at scoring time it is
        applied to ``y[apply_order[j]]`` given ``y[apply_order[:j]]``.
    ridge : 'auto', float or None
        Covariance regularization for the Mahalanobis kinds.
    """
    if kind in ("identity", "negated-identity"):
        return ScoreSpec(kind, {"p": 1} if training is None else {"p": training.outcomes.shape[1]})
    if kind == "empirical-cdf":
        raise ValueError("use empirical_cdf_score(control_outcomes) for empirical-cdf scores")
    if kind not in KINDS:
        raise ValueError(f"unknown score kind {kind!r}; choose from {KINDS}")
    if training is None or len(training) == 0:
        raise ValueError(f"score kind {kind!r} needs training data")

    x, y = training.features, training.outcomes
    d, p = x.shape[1], y.shape[1]
    params = {"d": d, "p": p}

    if kind == "abs-residual":
        if center not in ("median", "mean"):
            raise ValueError("center must be 'median' or 'mean'")
        if d:
            params["center"] = KNNRegressor(k).fit(x, y[:, 0])
        else:
            params["center"] = float(np.median(y[:, 0]) if center == "median" else y[:, 0].mean())
        params["estimator"] = center
        return ScoreSpec(kind, params)

    if kind == "cqr":
        if d:
            est = KNNRegressor(k).fit(x, y[:, 0])
            params.update(lower=est, upper=est)
        else:
            params.update(lower=float(np.quantile(y[:, 0], alpha / 2)),
                          upper=float(np.quantile(y[:, 0], 1 - alpha / 2)))
        params["alpha"] = alpha
        return ScoreSpec(kind, params)

    if len(y) <= p:
        raise ValueError(f"need more than {p} training rows to estimate a {p}x{p} covariance")

    if kind == "mahalanobis":
        if d:
            params["mean"] = [KNNRegressor(k).fit(x, y[:, j]) for j in range(p)]
        else:
            params["mean"] = y.mean(axis=0)
    else:
        order = tuple(range(p)) if order is None else tuple(int(i) for i in order)
        apply_order = order if apply_order is None else tuple(int(i) for i in apply_order)
        for o in (order, apply_order):
            if sorted(o) != list(range(p)):
                raise ValueError(f"ordering {o} is not a permutation of range({p})")
        params["order"], params["apply_order"] = order, apply_order
        params["estimators"] = [
            KNNRegressor(k).fit(np.column_stack([x, y[:, list(order[:j])]]), y[:, order[j]])
            for j in range(p)
        ]
    spec = ScoreSpec(kind, params)
    # leave-one-out residuals so the covariance is not shrunk by self-matches
    r = _residuals(spec, x, y, exclude_self=True)
    params["precision"], params["covariance"] = _precision(np.cov(r, rowvar=False), ridge)
    return spec


def mahalanobis_score(mean, covariance, ridge="auto") -> ScoreSpec:
    """Mahalanobis score with a given centre and covariance (no fitting)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    precision, cov = _precision(covariance, ridge)
    return ScoreSpec("mahalanobis", {"p": mean.size, "mean": mean,
                                     "precision": precision, "covariance": cov})


def empirical_cdf_score(control_outcomes) -> ScoreSpec:
    """Score ``y -> #{control <= y} / N`` from a control arm."""
    ctrl = np.sort(np.asarray(control_outcomes, dtype=float).ravel())
    if ctrl.size == 0:
        raise ValueError("control arm is empty")
    return ScoreSpec("empirical-cdf", {"p": 1, "control": ctrl})


def control_arm_specs(reference: SampleGroup, groups: Sequence[SampleGroup]) -> dict:
    """Per-group empirical-CDF scores built from each group's own control arm."""
    specs = {}
    for g, key in [(reference, REFERENCE)] + [(g, g.id) for g in groups]:
        if g.control is None:
            raise ValueError(f"group {g.id!r} has no control arm")
        specs[key] = empirical_cdf_score(g.control)
    return specs


@dataclass(frozen=True)
class ScoreSet:
    reference: np.ndarray
    groups: dict
    tie_policy: dict

    @property
    def group_ids(self):
        return list(self.groups)


def _spec_for(spec, key):
    if isinstance(spec, Mapping):
        try:
            return spec[key]
        except KeyError:
            raise KeyError(f"no score spec for group {key!r}") from None
    return spec


def apply_scores(spec, reference: SampleGroup, groups: Sequence[SampleGroup],
                 tie_policy: str = "noise", seed=None, noise_sd: Optional[float] = None) -> ScoreSet:
    """Score the reference and comparison groups and break ties.

    ``spec`` is one :class:`ScoreSpec` or a mapping from group id (and
    :data:`REFERENCE`) to specs, as built by :func:`control_arm_specs`.

    Tie policies: ``noise`` adds ``N(0, sd^2)`` to every score, with ``sd``
    defaulting to ``1e-10`` times the pooled interquartile range; ``uniform``
    replaces scores by pooled ranks with uniformly random tie order;
    ``none`` leaves scores untouched.
    """
    if tie_policy not in TIE_POLICIES:
        raise ValueError(f"tie_policy must be one of {TIE_POLICIES}, got {tie_policy!r}")
    ids = [g.id for g in groups]
    if len(set(ids)) != len(ids):
        raise ValueError("group ids must be unique")
    parts = [_spec_for(spec, REFERENCE).score_group(reference)]
    parts += [_spec_for(spec, g.id).score_group(g) for g in groups]
    sizes = [len(s) for s in parts]
    pooled = np.concatenate(parts)
    record = {"policy": tie_policy, "seed": seed}

    if tie_policy == "noise":
        if noise_sd is None:
            q75, q25 = np.percentile(pooled, [75, 25])
            iqr = q75 - q25
            noise_sd = 1e-10 * (iqr if iqr > 0 else max(np.abs(pooled).max(), 1.0))
        rng = np.random.default_rng(seed)
        pooled = pooled + rng.normal(0.0, noise_sd, size=pooled.size)
        record["noise_sd"] = float(noise_sd)
        srt = np.sort(pooled)
        if np.any(srt[1:] == srt[:-1]):
            raise ValueError("tie-breaking noise too small for the score magnitude; "
                             "use tie_policy='uniform' or a larger noise_sd")
    elif tie_policy == "uniform":
        rng = np.random.default_rng(seed)
        u = rng.random(pooled.size)
        order = np.lexsort((u, pooled))
        ranks = np.empty(pooled.size)
        ranks[order] = np.arange(1, pooled.size + 1)
        pooled = ranks

    bounds = np.cumsum(sizes)[:-1]
    pieces = np.split(pooled, bounds)
    return ScoreSet(
        reference=np.sort(pieces[0]),
        groups={gid: piece for gid, piece in zip(ids, pieces[1:])},
        tie_policy=record,
    )
