from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import rankdata, wilcoxon

from mpcaps.errors import DegenerateError, InvalidArgument
from mpcaps.stats import wilcoxon_signed_rank

# paired accuracies, ten runs; the differences contain a tie in magnitude
TEXTBOOK_A = [0.991, 0.987, 0.993, 0.989, 0.995, 0.990, 0.984, 0.992, 0.996, 0.988]
TEXTBOOK_B = [0.989, 0.988, 0.990, 0.983, 0.991, 0.989, 0.986, 0.985, 0.990, 0.989]


def enumerate_oracle(d):
    """Statistic and two-sided p by trying all 2^n sign patterns."""
    d = np.asarray([x for x in d if x != 0])
    ranks = rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    stat = min(w_plus, ranks.sum() - w_plus)
    hits = 0
    for signs in product((0, 1), repeat=len(d)):
        wp = float(np.dot(signs, ranks))
        if min(wp, ranks.sum() - wp) <= stat + 1e-9:
            hits += 1
    return stat, hits / 2 ** len(d)


def test_textbook_fixture():
    a, b = np.array(TEXTBOOK_A), np.array(TEXTBOOK_B)
    res = wilcoxon_signed_rank(a, b)
    stat, p = enumerate_oracle(a - b)
    assert res.method == "exact"
    assert res.statistic == stat
    assert res.p_value == pytest.approx(p, abs=1e-9)


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("n", [5, 7, 10])
def test_random_fixtures_match_enumeration(seed, n):
    r = np.random.default_rng(seed)
    # rounded so that tied magnitudes occur
    d = np.round(r.normal(size=n), 1)
    d[d == 0] = 0.3
    res = wilcoxon_signed_rank(d, np.zeros(n))
    stat, p = enumerate_oracle(d)
    assert res.statistic == stat
    assert abs(res.p_value - p) <= 1e-9


def test_matches_scipy_without_ties():
    d = np.array([1.5, -0.2, 3.1, 2.2, -0.9, 4.0, 0.7, 1.1, -2.6])
    res = wilcoxon_signed_rank(d, np.zeros_like(d))
    ref = wilcoxon(d, method="exact")
    assert res.statistic == ref.statistic
    assert res.p_value == pytest.approx(ref.pvalue, abs=1e-12)


def test_normal_approximation_close_to_scipy():
    r = np.random.default_rng(3)
    d = r.normal(0.3, 1.0, size=40)
    res = wilcoxon_signed_rank(d, np.zeros_like(d))
    ref = wilcoxon(d, method="approx", correction=False)
    assert res.method == "normal"
    assert res.statistic == ref.statistic
    assert res.p_value == pytest.approx(ref.pvalue, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-20, 20).filter(lambda v: v != 0), min_size=5, max_size=16))
def test_negation_swaps_sums(values):
    d = np.array(values, dtype=float)
    fwd = wilcoxon_signed_rank(d, np.zeros_like(d))
    rev = wilcoxon_signed_rank(-d, np.zeros_like(d))
    assert fwd.w_plus == rev.w_minus and fwd.w_minus == rev.w_plus
    assert fwd.p_value == rev.p_value
    assert 0.0 < fwd.p_value <= 1.0


def test_identical_lists_degenerate():
    with pytest.raises(DegenerateError):
        wilcoxon_signed_rank(TEXTBOOK_A, TEXTBOOK_A)


def test_input_validation():
    with pytest.raises(InvalidArgument):
        wilcoxon_signed_rank([1, 2, 3], [1, 2])
    with pytest.raises(InvalidArgument):
        wilcoxon_signed_rank([1, 2, 3, 4], [0, 0, 0, 0])
