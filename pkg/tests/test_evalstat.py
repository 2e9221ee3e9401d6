import itertools
import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from microfit import evalstat as es
from microfit.evalstat import StatError

import oracle_values as ov


# brute-force oracles, written without the library's rank or DP code


def _avg_ranks(values):
    vals = sorted(values)
    return [Fraction(sum(i + 1 for i, w in enumerate(vals) if w == v), vals.count(v)) for v in values]


def _two_sided(dist, observed):
    total = sum(dist.values())
    lo = sum(c for s, c in dist.items() if s <= observed)
    hi = sum(c for s, c in dist.items() if s >= observed)
    return min(Fraction(1), 2 * min(Fraction(lo, total), Fraction(hi, total)))


def brute_wilcoxon(x, y):
    d = [a - b for a, b in zip(x, y) if a != b]
    ranks = _avg_ranks([abs(v) for v in d])
    observed = sum(r for r, v in zip(ranks, d) if v > 0)
    dist = {}
    for signs in itertools.product((0, 1), repeat=len(d)):
        s = sum(r for r, keep in zip(ranks, signs) if keep)
        dist[s] = dist.get(s, 0) + 1
    return float(_two_sided(dist, observed))


def brute_mwu(x, y):
    pooled = list(x) + list(y)
    ranks = _avg_ranks(pooled)
    observed = sum(ranks[: len(x)])
    dist = {}
    for idx in itertools.combinations(range(len(pooled)), len(x)):
        s = sum(ranks[i] for i in idx)
        dist[s] = dist.get(s, 0) + 1
    return float(_two_sided(dist, observed))


# metrics


def test_mse_examples():
    assert es.mse([[1, 0]], [[1, 1]]) == 0.5
    a = np.random.default_rng(0).random((5, 6))
    b = np.random.default_rng(1).random((5, 6))
    assert es.mse(a, a) == 0.0 and es.mse(a, b) == es.mse(b, a)
    with pytest.raises(StatError):
        es.mse(a, b[:3])


def test_information_criteria():
    assert es.aicc(1.0, 100, 2) == pytest.approx(100 * math.log(0.01) + 4 + 12 / 97)
    assert es.aicc(1.0, 100, 2) == pytest.approx(-456.39, abs=0.005)
    assert es.bic(1.0, 100, 2) == pytest.approx(100 * math.log(0.01) + 2 * math.log(100))
    assert es.aicc(1.0, 100, 4) > es.aicc(1.0, 100, 2)
    assert es.bic(1.0, 100, 4) > es.bic(1.0, 100, 2)
    for n in (10**4, 10**6):
        aic = n * math.log(1.0 / n) + 4
        assert es.aicc(1.0, n, 2) - aic < 20 / n
    with pytest.raises(StatError):
        es.aicc(1.0, 3, 2)


def test_cov_examples():
    assert es.cov_percent([2, 2, 2]) == 0.0
    assert es.cov_percent([1, 3]) == pytest.approx(100 * math.sqrt(2) / 2)
    assert es.cov_percent([1, 3]) == pytest.approx(70.71, abs=0.005)
    with pytest.raises(StatError):
        es.cov_percent([1.0])


def test_pooled_sd_examples():
    assert es.pooled_sd([3, 3, 3]) == 0.0
    assert es.pooled_sd([0, 0, 1, 1]) == pytest.approx(math.sqrt(1 / 3))
    assert es.pooled_sd([np.array([0, 0]), np.array([1, 1])]) == pytest.approx(0.5774, abs=5e-5)


@settings(max_examples=30)
@given(st.lists(st.floats(0.1, 10), min_size=3, max_size=12), st.floats(0.1, 10), st.randoms())
def test_metrics_invariances(values, c, rnd):
    v = np.array(values)
    perm = v.copy()
    rnd.shuffle(perm)
    assert es.cov_percent(v * c) == pytest.approx(es.cov_percent(v), rel=1e-9, abs=1e-9)
    assert es.cov_percent(perm) == pytest.approx(es.cov_percent(v), rel=1e-12, abs=1e-12)
    assert es.pooled_sd(perm) == pytest.approx(es.pooled_sd(v), rel=1e-12, abs=1e-12)
    w = v[::-1] + 1.0
    assert es.cnr(perm, w) == pytest.approx(es.cnr(v, w), rel=1e-12, abs=1e-12)


def test_cnr_examples(rng):
    x = rng.normal(0, 1, 50)
    assert es.cnr(x, x) == 0.0
    value, flag = es.cnr([2, 2, 2], [1, 1, 1], return_flag=True)
    assert value == math.inf and flag
    assert es.cnr([1, 1], [1, 1]) == 0.0
    t, n = rng.normal(2, 1, 200_000), rng.normal(1, 1, 200_000)
    assert es.cnr(t, n) == pytest.approx(1 / math.sqrt(2), abs=0.01)
    assert es.median_iqr([1, 2, 3, 4, 5]) == (3.0, 2.0, 4.0)


# tests against oracles


def test_paired_t_matches_mpmath_oracle():
    r = es.paired_t(ov.PAIRED_X, ov.PAIRED_Y)
    assert r.statistic == pytest.approx(ov.PAIRED_T, rel=1e-12)
    assert r.p_value == pytest.approx(ov.PAIRED_P, rel=1e-9)
    assert es.paired_t(ov.PAIRED_Y, ov.PAIRED_X).statistic == pytest.approx(-ov.PAIRED_T, rel=1e-12)


def test_t_cdf_independent_route(rng):
    # mpmath regularized incomplete beta vs the scipy t tail used in the module
    x, y = rng.normal(0, 1, 12), rng.normal(0.5, 1.3, 15)
    r = es.student_t(x, y)
    df = r.extra["df"]
    t = mpmath.mpf(r.statistic)
    p = mpmath.betainc(df / 2, mpmath.mpf(1) / 2, 0, df / (df + t * t), regularized=True)
    assert r.p_value == pytest.approx(float(p), rel=1e-9)


def test_paired_t_degenerate():
    r = es.paired_t([1, 2, 3], [1, 2, 3])
    assert r.degenerate and r.p_value == 1.0 and math.isnan(r.statistic)


def test_two_sample_t_matches_scipy(rng):
    x, y = rng.normal(0, 1, 20), rng.normal(0.3, 2, 25)
    for eq in (True, False):
        ours = es.student_t(x, y, equal_var=eq)
        ref = scipy.stats.ttest_ind(x, y, equal_var=eq)
        assert ours.statistic == pytest.approx(ref.statistic, rel=1e-10)
        assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-8)


def test_wilcoxon_crafted_n6():
    d = [1, -2, 3, 4, 5, 6]
    r = es.wilcoxon_signed_rank(d, [0] * 6)
    assert r.statistic == 19 and r.exact
    assert r.p_value == ov.WILCOXON_6_P == brute_wilcoxon(d, [0] * 6)


@settings(max_examples=60)
@given(st.lists(st.integers(-4, 4), min_size=1, max_size=10), st.lists(st.integers(-4, 4), min_size=10,
                                                                       max_size=10))
def test_wilcoxon_matches_enumeration(x, y):
    y = y[: len(x)]
    if all(a == b for a, b in zip(x, y)):
        return
    r = es.wilcoxon_signed_rank(x, y)
    assert r.exact
    assert r.p_value == pytest.approx(brute_wilcoxon(x, y), rel=1e-12, abs=1e-15)


def test_wilcoxon_all_zero_differences():
    r = es.wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    assert r.degenerate and r.n == 0 and r.p_value == 1.0


def test_wilcoxon_exact_vs_normal_at_25(rng):
    x, y = rng.normal(0, 1, 25), rng.normal(0.2, 1, 25)
    exact = es.wilcoxon_signed_rank(x, y)
    approx = es.wilcoxon_signed_rank(x, y, exact=False)
    assert exact.exact and not approx.exact
    assert abs(exact.p_value - approx.p_value) < 0.01


def test_wilcoxon_matches_scipy_exact(rng):
    x, y = rng.normal(0, 1, 15), rng.normal(0.4, 1, 15)
    ref = scipy.stats.wilcoxon(x, y, method="exact")
    assert es.wilcoxon_signed_rank(x, y).p_value == pytest.approx(ref.pvalue, rel=1e-12)


@settings(max_examples=60)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=6), st.lists(st.integers(0, 6), min_size=1, max_size=6))
def test_mann_whitney_matches_enumeration(x, y):
    r = es.mann_whitney_u(x, y)
    assert r.exact
    assert r.p_value == pytest.approx(brute_mwu(x, y), rel=1e-12, abs=1e-15)
    assert r.extra["u_x"] + r.extra["u_y"] == len(x) * len(y)


def test_mann_whitney_identical_samples():
    assert es.mann_whitney_u([1, 2, 3, 4], [1, 2, 3, 4]).p_value == 1.0
    rng = np.random.default_rng(3)
    x = rng.normal(size=40)
    assert es.mann_whitney_u(x, x).p_value > 0.9


def test_mann_whitney_approx_matches_scipy(rng):
    x, y = rng.normal(0, 1, 30), np.round(rng.normal(0.5, 1, 40), 1)
    ref = scipy.stats.mannwhitneyu(x, y, method="asymptotic", use_continuity=True)
    r = es.mann_whitney_u(x, y)
    assert not r.exact and r.p_value == pytest.approx(ref.pvalue, rel=1e-10)


def test_shapiro_wilk_against_scipy(rng):
    for n in (3, 5, 8, 11, 12, 50, 500, 4000):
        for draw in (rng.normal(size=n), rng.exponential(size=n), rng.uniform(size=n)):
            ours = es.shapiro_wilk(draw)
            ref = scipy.stats.shapiro(draw)
            assert ours.statistic == pytest.approx(ref.statistic, abs=1e-6)
            assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-6)


def test_shapiro_wilk_behaviour():
    passes = sum(es.shapiro_wilk(np.random.default_rng(s).normal(size=500)).p_value > 0.05 for s in range(10))
    assert passes >= 8
    assert es.shapiro_wilk(np.random.default_rng(0).uniform(size=500)).p_value < 0.001
    with pytest.raises(StatError):
        es.shapiro_wilk([1.0, 2.0])
    assert es.shapiro_wilk([2.0, 2.0, 2.0, 2.0]).degenerate


def test_levene_and_bartlett(rng):
    a = rng.normal(0, 1, 200)
    assert es.levene(a, a + 5).p_value > 0.99
    assert es.bartlett(a, a + 5).p_value > 0.99
    b = rng.normal(0, math.sqrt(10), 200)
    assert es.levene(a, b).p_value < 0.01
    assert es.bartlett(a, b).p_value < 0.01
    with pytest.raises(StatError):
        es.levene(a, [1.0])
    with pytest.raises(StatError):
        es.bartlett(a)
    x, y = rng.normal(0, 1, 30), rng.normal(0, 2, 25)
    assert es.levene(x, y).p_value == pytest.approx(scipy.stats.levene(x, y, center="median").pvalue, rel=1e-10)
    assert es.bartlett(x, y).p_value == pytest.approx(scipy.stats.bartlett(x, y).pvalue, rel=1e-10)


def test_decide_branches(rng):
    x = rng.normal(0, 1, 60)
    r = es.decide_and_test(x, x + rng.normal(0.3, 0.5, 60), paired=True)
    assert r.method == "paired_t" and r.branch[:2] == ("paired", "normal")
    heavy = rng.standard_cauchy(60)
    r = es.decide_and_test(x, x + heavy, paired=True)
    assert r.method == "wilcoxon_signed_rank" and r.branch[1] == "non-normal"
    r = es.decide_and_test(rng.exponential(1, 80), rng.exponential(2, 80), paired=False)
    assert r.method == "mann_whitney_u"
    r = es.decide_and_test(rng.normal(0, 1, 80), rng.normal(1, 1, 80), paired=False)
    assert r.method == "student_t" and r.branch[2] == "equal-variance"
    r = es.decide_and_test(rng.normal(0, 1, 80), rng.normal(1, 5, 80), paired=False)
    assert r.method == "welch_t" and r.branch[2] == "unequal-variance"


def test_decide_branch_is_function_of_gates(rng):
    x, y = rng.normal(0, 1, 40), rng.normal(0.2, 1, 40)
    r = es.decide_and_test(x, y, paired=False)
    gx, gy = r.extra["gate_shapiro_p"]
    assert gx == es.shapiro_wilk(x).p_value and gy == es.shapiro_wilk(y).p_value
    normal = min(gx, gy) >= 0.05
    assert (r.branch[1] == "normal") == normal


def test_decide_large_sample_gate(rng):
    x, y = rng.normal(0, 1, 12_000), rng.normal(0.1, 1, 9_000)
    r = es.decide_and_test(x, y, paired=False)
    assert 0.0 <= r.p_value <= 1.0


def test_p_values_in_range(rng):
    for _ in range(20):
        x, y = rng.normal(size=8), rng.normal(size=8)
        for r in (es.paired_t(x, y), es.wilcoxon_signed_rank(x, y), es.mann_whitney_u(x, y), es.levene(x, y),
                  es.bartlett(x, y), es.shapiro_wilk(x), es.student_t(x, y, False)):
            assert 0.0 <= r.p_value <= 1.0
    with pytest.raises(StatError):
        es.StatTestResult("x", 0.0, 1.5, 1, True)


def _report(label, ssr, k, model="verdict"):
    return es.EvalReport(label, model, "nlls", "SP1", ssr / 600, ssr, 600, k)


def test_rank_models():
    one = es.rank_models([_report("a", 1.0, 4)])
    assert one["aicc_rank"] == {"a": 1} and one["bic_rank"] == {"a": 1}
    r = es.rank_models([_report("worse", 2.0, 4), _report("better", 1.0, 4), _report("dki", 3.0, 2, "dki")])
    assert r["aicc"] == ["better", "worse", "dki"] and r["orderings_agree"]
    assert sorted(r["aicc_rank"].values()) == [1, 2, 3]
    with pytest.raises(StatError):
        es.rank_models([])
    d = _report("x", 1.0, 4).to_dict()
    assert d["aicc"] == pytest.approx(es.aicc(1.0, 600, 4))


def test_variability_metrics():
    t = {"P1": [0.4, 0.5, 0.45], "P2": [0.5, 0.55, 0.6]}
    n = {"P1": [0.2, 0.25, 0.22], "P2": [0.2, 0.21, 0.3]}
    out = es.variability_metrics(t, n)
    assert out["cov_percent"] == pytest.approx(es.cov_percent([0.45, 0.55]))
    assert out["pooled_sd"] == pytest.approx(np.std([0.4, 0.5, 0.45, 0.5, 0.55, 0.6], ddof=1))
    assert out["cnr_q1"] <= out["cnr_median"] <= out["cnr_q3"]
    assert out["cnr_degenerate"] == [False, False]
