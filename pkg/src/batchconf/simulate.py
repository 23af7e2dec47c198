"""Seeded Monte Carlo studies of FDR and power.

Scenarios are plain JSON documents (see ``scenarios/`` for the bundled ones).
Each replicate draws fresh reference and comparison data from a seed derived
only from ``(scenario.seed, replicate index)``, so results do not depend on
the number of workers or the order in which replicates finish.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .pvalues import (
    RANKSUM_EXACT_LIMIT,
    multi_quantile_pvalue,
    permutation_pvalue,
    quantile_rank,
    ranksum_pvalue,
    ztest_pvalue,
)
from .scores import SampleGroup, apply_scores, fit_score
from .testing import (
    QuantileRule,
    batch_pvalues,
    bh_procedure,
    evaluate,
    partitioned_pvalues,
    subsampling_detect,
)

KINDS = ("normal", "mixture", "multivariate")
METHOD_NAMES = ("batch", "multiquantile", "subsampling", "partitioned",
                "ztest-oracle", "ttest", "permutation", "ranksum")
CSV_COLUMNS = ("scenario", "method", "alpha", "fdr", "fdr_se", "power", "power_se",
               "replicates", "warning")


class ScenarioError(ValueError):
    """Invalid scenario definition."""


@dataclass
class Scenario:
    """One simulation design.

    ``group_sizes`` is ``{"rule": "uniform", "low": a, "high": b}`` (integer
    sizes uniform on [a, b]), ``{"rule": "fixed", "size": s}`` or
    ``{"rule": "poisson", "base": b, "lam": l}`` (``b + Poisson(l)``). Sizes
    are drawn once per scenario seed and shared by all replicates.

    Univariate kinds: the first ``round(null_proportion * K)`` groups follow
    the reference law; the others are shifted by ``delta`` and have their
    spread multiplied by ``alt_scale``.

    The multivariate kind allocates groups to shift levels ``t`` through
    ``t_allocation`` (``t = 0`` is null) and scores with ``score`` in
    ``{"A", "B", "C"}``.
    """

    name: str
    kind: str = "normal"
    n: int = 100
    K: int = 20
    group_sizes: dict = field(default_factory=lambda: {"rule": "uniform", "low": 30, "high": 50})
    null_proportion: float = 0.5
    delta: float = 2.0
    sigma: float = 3.0
    alt_scale: float = 1.0
    quantile: dict = field(default_factory=lambda: {"rule": "q-ceil", "value": 0.5})
    alphas: list = field(default_factory=lambda: [0.05, 0.1, 0.2])
    replicates: int = 500
    seed: int = 0
    methods: list = field(default_factory=lambda: ["batch"])
    tie_policy: str = "none"
    # multivariate design
    n_train: int = 100
    t_allocation: dict = field(default_factory=lambda: {"0": 25, "1": 10, "2": 5, "3": 5, "4": 5})
    score: str = "A"
    knn_k: int = 10
    gamma_parameterization: str = "scale"
    description: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 <= self.null_proportion <= 1.0:
            raise ScenarioError("null_proportion must lie in [0, 1]")
        if self.replicates < 1:
            raise ScenarioError("replicates must be at least 1")
        if self.n < 1 or self.K < 1:
            raise ScenarioError("n and K must be positive")
        if not self.alphas or not all(0 < a < 1 for a in self.alphas):
            raise ScenarioError("alphas must be a nonempty list of levels in (0, 1)")
        if self.sigma <= 0 or self.alt_scale <= 0:
            raise ScenarioError("sigma and alt_scale must be positive")
        if self.tie_policy not in ("none", "noise", "uniform"):
            raise ScenarioError(f"unknown tie_policy {self.tie_policy!r}")
        if self.gamma_parameterization not in ("scale", "rate"):
            raise ScenarioError("gamma_parameterization must be 'scale' or 'rate'")
        if self.score not in ("A", "B", "C"):
            raise ScenarioError("score must be 'A', 'B' or 'C'")
        rule = self.group_sizes.get("rule")
        if rule not in ("uniform", "fixed", "poisson"):
            raise ScenarioError(f"unknown group size rule {rule!r}")
        try:
            QuantileRule.coerce(self.quantile)
            specs = [method_spec(m) for m in self.methods]
        except (TypeError, ValueError) as exc:
            raise ScenarioError(str(exc)) from None
        labels = [s["label"] for s in specs]
        if len(set(labels)) != len(labels):
            raise ScenarioError(f"duplicate method labels: {labels}")
        if self.kind == "multivariate":
            if sum(int(v) for v in self.t_allocation.values()) != self.K:
                raise ScenarioError("t_allocation counts must sum to K")
            for s in specs:
                if s["name"] in ("ztest-oracle", "ttest"):
                    raise ScenarioError(f"method {s['name']!r} needs a univariate scenario")

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
        if "name" not in data:
            raise ScenarioError("scenario needs a name")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "Scenario":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ScenarioError(f"{path}: scenario must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "Scenario":
        return Scenario.from_dict({**self.to_dict(), **changes})


def bundled_scenarios() -> list:
    return sorted(p.name[:-5] for p in resources.files("batchconf.scenarios").iterdir()
                  if p.name.endswith(".json"))


def load_scenario(name_or_path) -> Scenario:
    """Load a scenario from a JSON path or by bundled name (e.g. ``fig2_scaled``)."""
    path = Path(name_or_path)
    if path.exists():
        return Scenario.from_json(path)
    stem = path.name[:-5] if path.name.endswith(".json") else path.name
    res = resources.files("batchconf.scenarios") / f"{stem}.json"
    if res.is_file():
        return Scenario.from_dict(json.loads(res.read_text()))
    raise FileNotFoundError(f"no scenario file or bundled scenario named {str(name_or_path)!r}")


def method_spec(method) -> dict:
    """Normalize a method entry (string or dict) into a dict with a label."""
    spec = {"name": method} if isinstance(method, str) else dict(method)
    name = spec.get("name")
    if name not in METHOD_NAMES:
        raise ValueError(f"unknown method {name!r}; choose from {METHOD_NAMES}")
    if name == "permutation":
        spec.setdefault("statistic", "mean-diff")
        spec.setdefault("L", 199)
        spec.setdefault("tau", 0.5)
    if name == "multiquantile":
        spec.setdefault("q1", 0.25)
        spec.setdefault("q2", 0.75)
    if name == "ranksum":
        spec.setdefault("mode", "auto")
    if "quantile" in spec:
        QuantileRule.coerce(spec["quantile"])
    spec.setdefault("label", name)
    return spec


# --- seeds --------------------------------------------------------------------

def _scenario_rng(seed):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))


def _replicate_seeds(seed, r):
    data_ss, method_ss = np.random.SeedSequence(seed, spawn_key=(1, r)).spawn(2)
    return data_ss, method_ss


def draw_group_sizes(rule: dict, K: int, rng) -> np.ndarray:
    kind = rule["rule"]
    if kind == "uniform":
        return rng.integers(int(rule["low"]), int(rule["high"]) + 1, size=K)
    if kind == "fixed":
        return np.full(K, int(rule["size"]))
    return int(rule["base"]) + rng.poisson(float(rule["lam"]), size=K)


@dataclass(frozen=True)
class Design:
    """Per-scenario quantities drawn once from the master seed."""

    sizes: np.ndarray
    beta1: Optional[np.ndarray] = None
    beta2: Optional[np.ndarray] = None
    beta3: Optional[np.ndarray] = None
    t_levels: Optional[np.ndarray] = None


def scenario_design(scenario: Scenario) -> Design:
    rng = _scenario_rng(scenario.seed)
    sizes = draw_group_sizes(scenario.group_sizes, scenario.K, rng)
    if scenario.kind != "multivariate":
        return Design(sizes)
    beta1 = rng.uniform(size=(10, 3))
    beta2 = rng.uniform(size=(10, 3))
    beta3 = rng.uniform(size=10)
    t_levels = np.concatenate([
        np.full(int(c), int(t)) for t, c in sorted(scenario.t_allocation.items(), key=lambda kv: int(kv[0]))
    ])
    return Design(sizes, beta1, beta2, beta3, t_levels)


# --- data generators ------------------------------------------------------------

def _univariate_draw(kind, size, rng, sigma, delta=0.0, scale=1.0):
    if kind == "normal":
        return delta + scale * sigma * rng.standard_normal(size)
    # 0.5 * Cauchy(0, 1) + 0.5 * Unif[-1, 1], location-shifted by delta
    base = 0.5 * rng.standard_cauchy(size) + 0.5 * rng.uniform(-1.0, 1.0, size)
    return delta + scale * base


def gen_univariate(scenario: Scenario, replicate_seed, design: Optional[Design] = None):
    """Reference sample, comparison groups and null labels for one replicate."""
    if scenario.kind not in ("normal", "mixture"):
        raise ScenarioError("gen_univariate needs a univariate scenario")
    design = design or scenario_design(scenario)
    rng = np.random.default_rng(replicate_seed)
    n_null = int(round(scenario.null_proportion * scenario.K))
    identical = scenario.delta == 0 and scenario.alt_scale == 1
    ref = SampleGroup("reference", _univariate_draw(scenario.kind, scenario.n, rng, scenario.sigma))
    groups, truth = [], {}
    for k, size in enumerate(design.sizes):
        gid = f"g{k:03d}"
        null = k < n_null or identical
        if k < n_null:
            x = _univariate_draw(scenario.kind, int(size), rng, scenario.sigma)
        else:
            x = _univariate_draw(scenario.kind, int(size), rng, scenario.sigma,
                                 scenario.delta, scenario.alt_scale)
        groups.append(SampleGroup(gid, x))
        truth[gid] = null
    return ref, groups, truth


SIGMA_MV = np.array([[2.0, 1.0, 0.0], [1.0, 2.0, 1.0], [0.0, 1.0, 2.0]])


def _multivariate_rows(size, t, design, rng, gamma_parameterization):
    X = rng.uniform(size=(size, 10))
    mean = X @ design.beta1 + t * (X @ design.beta2) ** 2
    Y = np.empty((size, 5))
    todo = np.arange(size)
    scale = 2.0 if gamma_parameterization == "scale" else 0.5
    while todo.size:
        y123 = mean[todo] + rng.multivariate_normal(np.zeros(3), SIGMA_MV, size=todo.size)
        shape = (t * np.abs(X[todo] @ design.beta3) + y123[:, 0] ** 2 + y123[:, 1] ** 2) / 2
        a = np.abs(y123[:, 0])
        b = np.abs(y123[:, 1]) + 0.5 * np.abs(y123[:, 2])
        ok = (shape > 0) & (a > 0) & (b > 0)
        rows = todo[ok]
        Y[rows, :3] = y123[ok]
        Y[rows, 3] = rng.gamma(shape[ok], scale)
        Y[rows, 4] = rng.beta(a[ok], b[ok])
        # degenerate Gamma/Beta parameters: redraw those rows
        todo = todo[~ok]
    return X, Y


def gen_multivariate(scenario: Scenario, replicate_seed, design: Optional[Design] = None):
    """Training set, reference, comparison groups and null labels for one replicate."""
    if scenario.kind != "multivariate":
        raise ScenarioError("gen_multivariate needs a multivariate scenario")
    design = design or scenario_design(scenario)
    rng = np.random.default_rng(replicate_seed)
    gp = scenario.gamma_parameterization
    train = SampleGroup("train", *reversed(_multivariate_rows(scenario.n_train, 0, design, rng, gp)))
    ref = SampleGroup("reference", *reversed(_multivariate_rows(scenario.n, 0, design, rng, gp)))
    groups, truth = [], {}
    for k, (size, t) in enumerate(zip(design.sizes, design.t_levels)):
        gid = f"g{k:03d}"
        X, Y = _multivariate_rows(int(size), int(t), design, rng, gp)
        groups.append(SampleGroup(gid, Y, X))
        truth[gid] = int(t) == 0
    return train, ref, groups, truth


def multivariate_score(scenario: Scenario, train: SampleGroup):
    k = scenario.knn_k
    if scenario.score == "A":
        return fit_score("mahalanobis", train, k=k)
    if scenario.score == "B":
        return fit_score("sequential-mahalanobis", train, k=k, order=range(5))
    return fit_score("sequential-mahalanobis", train, k=k, order=range(5),
                     apply_order=(4, 3, 2, 1, 0))


def gen_control_arm_fixture(K: int = 8, n_reference: int = 60, size: int = 40,
                            shifts: Optional[dict] = None, seed=0, control_size: int = 1000):
    """Long-format rows ``(group, arm, value)`` for a treated/control design.

    Every group, including ``"reference"``, has its own control-arm location;
    treated outcomes equal control outcomes plus the group's treatment effect
    (0.5 for the reference and for every group not listed in ``shifts``).
    Treated and control outcomes of a group are therefore exchangeable after
    subtracting the common effect, which the empirical-CDF score does
    implicitly. All control arms have ``control_size`` rows so that null
    groups share the reference's score law.

    Each group is scored through its own finite control arm, so the pooled
    scores are only approximately exchangeable; with control arms of a few
    dozen rows the null rejection rate of batch p-values is noticeably above
    nominal. Large control arms make the scores close to i.i.d. uniform.

    Returns ``(rows, truth)`` with ``truth[g]`` true for null groups.
    """
    shifts = dict(shifts or {})
    rng = np.random.default_rng(seed)
    base_effect = 0.5
    rows, truth = [], {}
    for k in range(-1, K):
        gid = "reference" if k < 0 else f"site{k:02d}"
        size_k = n_reference if k < 0 else size
        location = rng.normal(0.0, 2.0)
        effect = base_effect + shifts.get(gid, 0.0)
        for arm, count in ((0, control_size), (1, size_k)):
            values = location + rng.standard_normal(count) + (effect if arm else 0.0)
            rows.extend({"group": gid, "arm": arm, "value": float(v)} for v in values)
        if k >= 0:
            truth[gid] = gid not in shifts
    return rows, truth


# --- Monte Carlo ---------------------------------------------------------------

def _method_pvalues(spec, scenario, scores, raw_ref, raw_groups, rng):
    name = spec["name"]
    rule = QuantileRule.coerce(spec.get("quantile", scenario.quantile))
    if name == "batch":
        return [r.p for r in batch_pvalues(scores, rule)]
    if name == "partitioned":
        return [r.p for r in partitioned_pvalues(scores, rule, rng)]
    if name == "subsampling":
        recs, _ = subsampling_detect(scores, 0.5, rng)
        return [r.p for r in recs]
    ref = scores.reference
    out = []
    for gid, s in scores.groups.items():
        m = len(s)
        if name == "multiquantile":
            e1 = quantile_rank(spec["q1"], m)
            e2 = max(quantile_rank(spec["q2"], m), e1 + 1)
            if e2 > m:
                e1, e2 = m - 1, m
            out.append(multi_quantile_pvalue(ref, s, e1, e2, check_ties=False).p)
        elif name == "permutation":
            out.append(permutation_pvalue(np.concatenate([ref, s]), ref.size, spec["statistic"],
                                          int(spec["L"]), rng, tau=float(spec["tau"])).p)
        elif name == "ranksum":
            mode = spec["mode"]
            if mode == "auto":
                mode = "exact" if ref.size * m <= RANKSUM_EXACT_LIMIT else "normal"
            out.append(ranksum_pvalue(ref, s, mode).p)
        elif name == "ztest-oracle":
            out.append(ztest_pvalue(raw_ref, raw_groups[gid], scenario.sigma).p)
        elif name == "ttest":
            out.append(ztest_pvalue(raw_ref, raw_groups[gid], None).p)
    return out


def run_replicate(scenario: Scenario, r: int, design: Optional[Design] = None) -> list:
    """(label, alpha, fdp, power) tuples for one replicate."""
    design = design or scenario_design(scenario)
    data_ss, method_ss = _replicate_seeds(scenario.seed, r)
    tie_ss, method_ss = method_ss.spawn(2)
    if scenario.kind == "multivariate":
        train, ref, groups, truth = gen_multivariate(scenario, data_ss, design)
        spec = multivariate_score(scenario, train)
    else:
        ref, groups, truth = gen_univariate(scenario, data_ss, design)
        spec = fit_score("identity")
    scores = apply_scores(spec, ref, groups, tie_policy=scenario.tie_policy,
                          seed=np.random.default_rng(tie_ss))
    raw_ref = ref.outcomes[:, 0]
    raw_groups = {g.id: g.outcomes[:, 0] for g in groups}
    ids = [g.id for g in groups]

    rows = []
    specs = [method_spec(m) for m in scenario.methods]
    rngs = [np.random.default_rng(ss) for ss in method_ss.spawn(len(specs))]
    for spec_m, rng in zip(specs, rngs):
        pv = _method_pvalues(spec_m, scenario, scores, raw_ref, raw_groups, rng)
        for alpha in scenario.alphas:
            metric = evaluate(bh_procedure(pv, alpha, ids), truth)
            rows.append((spec_m["label"], float(alpha), metric.fdp, metric.power))
    return rows


def _run_chunk(args):
    scenario_dict, replicate_ids = args
    scenario = Scenario.from_dict(scenario_dict)
    design = scenario_design(scenario)
    return [run_replicate(scenario, r, design) for r in replicate_ids]


@dataclass
class SimResult:
    scenario: str
    rows: list

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow([row[c] if isinstance(row[c], (str, int)) else repr(row[c])
                             for c in CSV_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def get(self, method: str, alpha: float) -> dict:
        for row in self.rows:
            if row["method"] == method and math.isclose(row["alpha"], alpha):
                return row
        raise KeyError((method, alpha))


def _mean_se(values):
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def run_monte_carlo(scenario: Scenario, methods: Optional[list] = None, workers: int = 1) -> SimResult:
    """Run all replicates of a scenario and aggregate FDR and power per method and level.

    ``methods`` overrides ``scenario.methods``. Output is identical for any
    ``workers``.
    """
    if methods is not None:
        scenario = scenario.replace(methods=list(methods))
    reps = list(range(scenario.replicates))
    if workers > 1 and len(reps) > 1:
        n_chunks = min(len(reps), workers * 4)
        chunks = [reps[i::n_chunks] for i in range(n_chunks)]
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_chunk, [(scenario.to_dict(), c) for c in chunks]))
        by_rep = {}
        for chunk, res in zip(chunks, parts):
            by_rep.update(zip(chunk, res))
        per_rep = [by_rep[r] for r in reps]
    else:
        design = scenario_design(scenario)
        per_rep = [run_replicate(scenario, r, design) for r in reps]

    collected: dict = {}
    for rep_rows in per_rep:
        for label, alpha, fdp, power in rep_rows:
            entry = collected.setdefault((label, alpha), ([], []))
            entry[0].append(fdp)
            entry[1].append(power)

    warning = "single replicate: standard errors reported as 0" if len(reps) == 1 else ""
    rows = []
    for (label, alpha), (fdps, powers) in collected.items():
        fdr, fdr_se = _mean_se(fdps)
        power, power_se = _mean_se(powers)
        rows.append({"scenario": scenario.name, "method": label, "alpha": alpha,
                     "fdr": fdr, "fdr_se": fdr_se, "power": power, "power_se": power_se,
                     "replicates": len(reps), "warning": warning})
    return SimResult(scenario.name, rows)
