import itertools
import math
from fractions import Fraction

import pytest


def rank_subsets(n, m):
    """All ordered comparison-rank vectors (r_1 < ... < r_m) in [1, n+m]."""
    return itertools.combinations(range(1, n + m + 1), m)


def layout(n, m, ranks):
    """Reference and comparison scores realizing a rank vector (scores = positions)."""
    cmp_set = set(ranks)
    ref = [float(v) for v in range(1, n + m + 1) if v not in cmp_set]
    cmp = [float(v) for v in ranks]
    return ref, cmp


def enumerated_shifted_rank_pmf(n, m, eta):
    counts = {}
    for r in rank_subsets(n, m):
        j = r[eta - 1] - eta + 1
        counts[j] = counts.get(j, 0) + 1
    total = math.comb(n + m, m)
    return [Fraction(counts.get(i, 0), total) for i in range(1, n + 2)]


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
