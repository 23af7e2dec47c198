"""Distribution-shift detection across many groups with batch conformal p-values."""

__version__ = "0.1.0"

from .combinatorics import (
    TwoQuantileWeightTable,
    WeightTable,
    log_binom,
    rank_weights,
    scaled_rank,
    two_quantile_weights,
)
from .pvalues import (
    PValueRecord,
    batch_conformal_pvalue,
    multi_quantile_pvalue,
    permutation_pvalue,
    ranksum_pvalue,
    subsampling_pvalue,
    ztest_pvalue,
)
from .scores import (
    SampleGroup,
    ScoreSet,
    ScoreSpec,
    apply_scores,
    control_arm_specs,
    empirical_cdf_score,
    fit_score,
)
from .testing import (
    BHOutcome,
    MetricRecord,
    QuantileRule,
    batch_detect,
    bh_procedure,
    evaluate,
    partitioned_detect,
)
from .simulate import Scenario, SimResult, load_scenario, run_monte_carlo

__all__ = [
    "BHOutcome", "MetricRecord", "PValueRecord", "QuantileRule", "SampleGroup",
    "Scenario", "ScoreSet", "ScoreSpec", "SimResult", "TwoQuantileWeightTable",
    "WeightTable", "apply_scores", "batch_conformal_pvalue", "batch_detect",
    "bh_procedure", "control_arm_specs", "empirical_cdf_score", "evaluate",
    "fit_score", "load_scenario", "log_binom", "multi_quantile_pvalue",
    "partitioned_detect", "permutation_pvalue", "rank_weights", "ranksum_pvalue",
    "run_monte_carlo", "scaled_rank", "subsampling_pvalue", "two_quantile_weights",
    "ztest_pvalue",
]
