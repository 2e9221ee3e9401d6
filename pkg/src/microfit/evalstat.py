"""Fit-quality metrics, information criteria, variability/contrast metrics and
the hypothesis tests used to compare fitters."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

ALPHA = 0.05
EXACT_WILCOXON_MAX_N = 25
EXACT_MWU_MAX_N = 16
SHAPIRO_MAX_N = 5000
CNR_VAR_FLOOR = 1e-12


class StatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def mse(measured, reconstructed) -> float:
    a = np.asarray(getattr(measured, "signals", measured), dtype=float)
    b = np.asarray(getattr(reconstructed, "signals", reconstructed), dtype=float)
    if a.shape != b.shape:
        raise StatError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _check_nk(n, k):
    if not n > k + 1:
        raise StatError(f"need n > k + 1 (n={n}, k={k})")
    if n <= 0:
        raise StatError("n must be positive")


def aicc(ssr: float, n: int, k: int) -> float:
    """Gaussian-residual AICc: n ln(SSR/n) + 2k + 2k(k+1)/(n-k-1)."""
    _check_nk(n, k)
    return n * math.log(ssr / n) + 2 * k + 2 * k * (k + 1) / (n - k - 1)


def bic(ssr: float, n: int, k: int) -> float:
    _check_nk(n, k)
    return n * math.log(ssr / n) + k * math.log(n)


def cov_percent(means) -> float:
    """Coefficient of variation (sample SD / mean) in percent."""
    m = np.asarray(means, dtype=float)
    if m.size < 2:
        raise StatError("need at least two values")
    return float(100.0 * np.std(m, ddof=1) / np.mean(m))


def pooled_sd(values) -> float:
    v = np.concatenate([np.ravel(np.asarray(x, dtype=float)) for x in values]) if _is_ragged(values) \
        else np.ravel(np.asarray(values, dtype=float))
    if v.size < 2:
        raise StatError("need at least two values")
    return float(np.std(v, ddof=1))


def _is_ragged(values) -> bool:
    return isinstance(values, (list, tuple)) and len(values) > 0 and np.ndim(values[0]) > 0


def cnr(tumour, normal, return_flag: bool = False):
    """|mean(T) - mean(N)| / sqrt(var(T) + var(N)) with sample variances.

    A combined variance below ``CNR_VAR_FLOOR`` yields ``inf`` (or 0 when the means
    coincide too); ``return_flag`` adds a degenerate-variance flag.
    """
    t = np.ravel(np.asarray(tumour, dtype=float))
    n = np.ravel(np.asarray(normal, dtype=float))
    if t.size < 2 or n.size < 2:
        raise StatError("each region needs at least two values")
    diff = abs(t.mean() - n.mean())
    var = t.var(ddof=1) + n.var(ddof=1)
    degenerate = var < CNR_VAR_FLOOR
    if degenerate:
        value = math.inf if diff > 0 else 0.0
    else:
        value = float(diff / math.sqrt(var))
    return (value, bool(degenerate)) if return_flag else value


def median_iqr(values) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(med), float(q1), float(q3)


# ---------------------------------------------------------------------------
# tests


@dataclass
class StatTestResult:
    method: str
    statistic: float
    p_value: float
    n: int
    exact: bool
    degenerate: bool = False
    branch: tuple = ()
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.p_value <= 1.0) and not math.isnan(self.p_value):
            raise StatError(f"p-value {self.p_value} out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch"] = list(self.branch)
        return d


def _norm_sf(z):
    return 0.5 * special.erfc(z / math.sqrt(2.0))


def _two_sided_from_tails(lower: float, upper: float) -> float:
    return float(min(1.0, 2.0 * min(lower, upper)))


def _shapiro_coefficients(n: int) -> np.ndarray:
    i = np.arange(1, n + 1)
    m = special.ndtri((i - 0.375) / (n + 0.25))
    mm = float(m @ m)
    if n == 3:
        a = np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
        return a
    u = 1.0 / math.sqrt(n)
    c = m / math.sqrt(mm)
    a = np.empty(n)
    an = c[-1] + 0.221157 * u - 0.147981 * u**2 - 2.071190 * u**3 + 4.434685 * u**4 - 2.706056 * u**5
    if n > 5:
        an1 = c[-2] + 0.042981 * u - 0.293762 * u**2 - 1.752461 * u**3 + 5.682633 * u**4 - 3.582633 * u**5
        phi = (mm - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * an**2 - 2 * an1**2)
        a[2:-2] = m[2:-2] / math.sqrt(phi)
        a[-1], a[-2], a[0], a[1] = an, an1, -an, -an1
    else:
        phi = (mm - 2 * m[-1] ** 2) / (1 - 2 * an**2)
        a[1:-1] = m[1:-1] / math.sqrt(phi)
        a[-1], a[0] = an, -an
    return a


def shapiro_wilk(x) -> StatTestResult:
    """Shapiro-Wilk W with Royston's normalizing approximation for the p-value."""
    x = np.sort(np.ravel(np.asarray(x, dtype=float)))
    n = x.size
    if n < 3:
        raise StatError("Shapiro-Wilk needs n >= 3")
    if n > SHAPIRO_MAX_N:
        raise StatError(f"Shapiro-Wilk supports n <= {SHAPIRO_MAX_N}")
    ss = float(np.sum((x - x.mean()) ** 2))
    if ss <= 0:
        return StatTestResult("shapiro_wilk", 1.0, 1.0, n, False, degenerate=True)
    a = _shapiro_coefficients(n)
    w = min(1.0, float((a @ x) ** 2 / ss))
    if n == 3:
        p = max(0.0, 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75))))
        return StatTestResult("shapiro_wilk", w, min(1.0, p), n, True)
    if n <= 11:
        gamma = -2.273 + 0.459 * n
        mu = 0.5440 - 0.39978 * n + 0.025054 * n**2 - 0.0006714 * n**3
        sigma = math.exp(1.3822 - 0.77857 * n + 0.062767 * n**2 - 0.0020322 * n**3)
        y = -math.log1p(-w) if w < 1 else math.inf
        if gamma - (-y) <= 0 or w >= 1:
            # beyond the approximation's support: essentially certain rejection / acceptance
            p = 1.0 if w >= 1 else 1e-99
            return StatTestResult("shapiro_wilk", w, p, n, False)
        z = (-math.log(gamma - math.log1p(-w)) - mu) / sigma
    else:
        ln_n = math.log(n)
        mu = -1.5861 - 0.31082 * ln_n - 0.083751 * ln_n**2 + 0.0038915 * ln_n**3
        sigma = math.exp(-0.4803 - 0.082676 * ln_n + 0.0030302 * ln_n**2)
        z = (math.log1p(-w) - mu) / sigma if w < 1 else -math.inf
    return StatTestResult("shapiro_wilk", w, float(_norm_sf(z)), n, False)


def _t_two_sided(t: float, df: float) -> float:
    return float(min(1.0, 2.0 * special.stdtr(df, -abs(t))))


def paired_t(x, y) -> StatTestResult:
    x, y = _paired(x, y)
    d = x - y
    n = d.size
    if n < 2:
        raise StatError("paired t needs n >= 2")
    sd = float(np.std(d, ddof=1))
    mean = float(d.mean())
    if sd == 0.0:
        if mean == 0.0:
            return StatTestResult("paired_t", math.nan, 1.0, n, True, degenerate=True)
        return StatTestResult("paired_t", math.copysign(math.inf, mean), 0.0, n, True, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return StatTestResult("paired_t", t, _t_two_sided(t, n - 1), n, True, extra={"df": n - 1})


def student_t(x, y, equal_var: bool = True) -> StatTestResult:
    """Two-sample t-test; ``equal_var=False`` gives Welch's version."""
    x, y = _two_samples(x, y)
    nx, ny = x.size, y.size
    vx, vy = x.var(ddof=1), y.var(ddof=1)
    diff = x.mean() - y.mean()
    if equal_var:
        df = nx + ny - 2
        sp2 = ((nx - 1) * vx + (ny - 1) * vy) / df
        se2 = sp2 * (1.0 / nx + 1.0 / ny)
        name = "student_t"
    else:
        se2 = vx / nx + vy / ny
        df = se2**2 / ((vx / nx) ** 2 / (nx - 1) + (vy / ny) ** 2 / (ny - 1)) if se2 > 0 else 1.0
        name = "welch_t"
    if se2 == 0:
        degenerate_p = 1.0 if diff == 0 else 0.0
        stat = math.nan if diff == 0 else math.copysign(math.inf, diff)
        return StatTestResult(name, stat, degenerate_p, nx + ny, True, degenerate=True)
    t = float(diff / math.sqrt(se2))
    return StatTestResult(name, t, _t_two_sided(t, df), nx + ny, True, extra={"df": float(df)})


def rankdata(v) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their mean rank."""
    v = np.asarray(v, dtype=float)
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    ranks = np.empty(v.size)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _tie_sizes(v) -> np.ndarray:
    _, counts = np.unique(np.asarray(v), return_counts=True)
    return counts


def _signed_rank_null(doubled_ranks) -> np.ndarray:
    """Counts of each attainable doubled W+ over all 2^n sign patterns."""
    total = int(sum(doubled_ranks))
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:total + 1 - r]
        dist = dist + shifted
    return dist


def wilcoxon_signed_rank(x, y=None, exact: bool | None = None) -> StatTestResult:
    """Two-sided signed-rank test on x - y; zero differences dropped, ties get average ranks."""
    d = np.ravel(np.asarray(x, dtype=float)) if y is None else np.subtract(*_paired(x, y))
    d = d[d != 0]
    n = d.size
    if n == 0:
        return StatTestResult("wilcoxon_signed_rank", 0.0, 1.0, 0, True, degenerate=True)
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if exact is None:
        exact = n <= EXACT_WILCOXON_MAX_N
    if exact:
        doubled = np.round(2 * ranks).astype(int)
        dist = _signed_rank_null(doubled)
        prob = dist / dist.sum()
        k = int(round(2 * w_plus))
        p = _two_sided_from_tails(prob[:k + 1].sum(), prob[k:].sum())
        return StatTestResult("wilcoxon_signed_rank", w_plus, p, n, True)
    mean = n * (n + 1) / 4.0
    t = _tie_sizes(np.abs(d))
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(t**3 - t)) / 48.0
    if var <= 0:
        return StatTestResult("wilcoxon_signed_rank", w_plus, 1.0, n, False, degenerate=True)
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * float(_norm_sf(max(z, 0.0))))
    return StatTestResult("wilcoxon_signed_rank", w_plus, p, n, False, extra={"z": z})


def _rank_sum_null(doubled_ranks, n_x: int) -> np.ndarray:
    """dist[s] = number of n_x-subsets of the pooled doubled ranks summing to s."""
    total = int(sum(doubled_ranks))
    dp = np.zeros((n_x + 1, total + 1))
    dp[0, 0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        dp[1:, r:] = dp[1:, r:] + dp[:-1, :total + 1 - r]
    return dp[n_x]


def mann_whitney_u(x, y, exact: bool | None = None) -> StatTestResult:
    """Two-sided Mann-Whitney U; statistic is U_x = R_x - n_x(n_x+1)/2."""
    x, y = _two_samples(x, y, min_n=1)
    nx, ny = x.size, y.size
    pooled = np.concatenate([x, y])
    ranks = rankdata(pooled)
    rx = float(ranks[:nx].sum())
    u_x = rx - nx * (nx + 1) / 2.0
    u_y = nx * ny - u_x
    if exact is None:
        exact = nx + ny <= EXACT_MWU_MAX_N
    extra = {"u_x": u_x, "u_y": u_y}
    if exact:
        doubled = np.round(2 * ranks).astype(int)
        dist = _rank_sum_null(doubled, nx)
        prob = dist / dist.sum()
        k = int(round(2 * rx))
        p = _two_sided_from_tails(prob[:k + 1].sum(), prob[k:].sum())
        return StatTestResult("mann_whitney_u", u_x, p, nx + ny, True, extra=extra)
    n = nx + ny
    t = _tie_sizes(pooled)
    var = nx * ny / 12.0 * ((n + 1) - float(np.sum(t**3 - t)) / (n * (n - 1)))
    if var <= 0:
        return StatTestResult("mann_whitney_u", u_x, 1.0, n, False, degenerate=True, extra=extra)
    z = (abs(u_x - nx * ny / 2.0) - 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * float(_norm_sf(max(z, 0.0))))
    extra["z"] = z
    return StatTestResult("mann_whitney_u", u_x, p, n, False, extra=extra)


def levene(*samples) -> StatTestResult:
    """Brown-Forsythe variant: one-way ANOVA on absolute deviations from group medians."""
    groups = _groups(samples)
    z = [np.abs(g - np.median(g)) for g in groups]
    k = len(z)
    n_tot = sum(g.size for g in z)
    grand = np.concatenate(z).mean()
    between = sum(g.size * (g.mean() - grand) ** 2 for g in z)
    within = sum(float(np.sum((g - g.mean()) ** 2)) for g in z)
    if within == 0:
        return StatTestResult("levene", math.nan if between == 0 else math.inf,
                              1.0 if between == 0 else 0.0, n_tot, False, degenerate=True)
    f = (n_tot - k) / (k - 1) * between / within
    p = float(special.fdtrc(k - 1, n_tot - k, f))
    return StatTestResult("levene", float(f), min(1.0, max(0.0, p)), n_tot, False)


def bartlett(*samples) -> StatTestResult:
    groups = _groups(samples)
    k = len(groups)
    ns = np.array([g.size for g in groups], dtype=float)
    vs = np.array([g.var(ddof=1) for g in groups])
    n_tot = ns.sum()
    if np.any(vs <= 0):
        # all groups constant: no evidence against equality; some constant: maximal evidence
        all_flat = bool(np.all(vs <= 0))
        return StatTestResult("bartlett", math.nan if all_flat else math.inf, 1.0 if all_flat else 0.0,
                              int(n_tot), False, degenerate=True)
    sp2 = float(np.sum((ns - 1) * vs) / (n_tot - k))
    num = (n_tot - k) * math.log(sp2) - float(np.sum((ns - 1) * np.log(vs)))
    den = 1.0 + (float(np.sum(1.0 / (ns - 1))) - 1.0 / (n_tot - k)) / (3.0 * (k - 1))
    stat = num / den
    p = float(special.chdtrc(k - 1, stat))
    return StatTestResult("bartlett", stat, min(1.0, max(0.0, p)), int(n_tot), False)


def _gate_sample(v: np.ndarray) -> np.ndarray:
    """Deterministic, evenly spaced sub-sample for normality gates on very large samples."""
    if v.size <= SHAPIRO_MAX_N:
        return v
    idx = np.linspace(0, v.size - 1, SHAPIRO_MAX_N).round().astype(int)
    return v[idx]


def decide_and_test(x, y, paired: bool, alpha: float = ALPHA) -> StatTestResult:
    """Normality gate, then the parametric or rank test.

    Paired: Shapiro-Wilk on the differences; normal -> paired t, else Wilcoxon.
    Unpaired: Shapiro-Wilk on both groups; both normal -> Levene and Bartlett,
    then Student t (equal variances) or Welch t; otherwise Mann-Whitney U.
    The branch taken and every gate p-value are recorded.
    """
    if paired:
        x, y = _paired(x, y)
        d = x - y
        gate = shapiro_wilk(_gate_sample(d)) if d.size >= 3 else None
        normal = gate is None or gate.degenerate or gate.p_value >= alpha
        res = paired_t(x, y) if normal else wilcoxon_signed_rank(x, y)
        res.branch = ("paired", "normal" if normal else "non-normal", res.method)
        res.extra["gate_shapiro_p"] = None if gate is None else gate.p_value
        return res
    x, y = _two_samples(x, y)
    gx, gy = shapiro_wilk(_gate_sample(x)), shapiro_wilk(_gate_sample(y))
    normal = min(gx.p_value, gy.p_value) >= alpha
    gates = {"gate_shapiro_p": [gx.p_value, gy.p_value]}
    if normal:
        lv, bt = levene(x, y), bartlett(x, y)
        gates.update(gate_levene_p=lv.p_value, gate_bartlett_p=bt.p_value)
        equal = min(lv.p_value, bt.p_value) >= alpha
        res = student_t(x, y, equal_var=equal)
        res.branch = ("unpaired", "normal", "equal-variance" if equal else "unequal-variance", res.method)
    else:
        res = mann_whitney_u(x, y)
        res.branch = ("unpaired", "non-normal", res.method)
    res.extra.update(gates)
    return res


def _paired(x, y):
    x = np.ravel(np.asarray(x, dtype=float))
    y = np.ravel(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise StatError("paired samples must have equal length")
    return x, y


def _two_samples(x, y, min_n: int = 2):
    x = np.ravel(np.asarray(x, dtype=float))
    y = np.ravel(np.asarray(y, dtype=float))
    if x.size < min_n or y.size < min_n:
        raise StatError(f"each sample needs at least {min_n} values")
    return x, y


def _groups(samples):
    if len(samples) < 2:
        raise StatError("need at least two groups")
    groups = [np.ravel(np.asarray(s, dtype=float)) for s in samples]
    if any(g.size < 2 for g in groups):
        raise StatError("every group needs at least two values")
    return groups


# ---------------------------------------------------------------------------
# reports and ranking


@dataclass
class EvalReport:
    """Evaluation of one (fitter, model, protocol) combination."""

    label: str
    model: str
    fitter: str
    sp: str
    mse: float
    ssr: float
    n_obs: int
    k: int
    aicc: float = math.nan
    bic: float = math.nan
    cov_percent: float = math.nan
    pooled_sd: float = math.nan
    cnr_median: float = math.nan
    cnr_q1: float = math.nan
    cnr_q3: float = math.nan
    tests: dict = field(default_factory=dict)

    def __post_init__(self):
        if math.isnan(self.aicc) and self.ssr > 0:
            self.aicc = aicc(self.ssr, self.n_obs, self.k)
        if math.isnan(self.bic) and self.ssr > 0:
            self.bic = bic(self.ssr, self.n_obs, self.k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tests"] = {k: (v.to_dict() if isinstance(v, StatTestResult) else v) for k, v in self.tests.items()}
        return d


def rank_models(reports) -> dict:
    """Order reports by AICc and by BIC (lower is better; ties broken by label)."""
    reports = list(reports)
    if not reports:
        raise StatError("nothing to rank")
    by_aicc = [r.label for r in sorted(reports, key=lambda r: (r.aicc, r.label))]
    by_bic = [r.label for r in sorted(reports, key=lambda r: (r.bic, r.label))]
    return {
        "aicc": by_aicc,
        "bic": by_bic,
        "aicc_rank": {lab: i + 1 for i, lab in enumerate(by_aicc)},
        "bic_rank": {lab: i + 1 for i, lab in enumerate(by_bic)},
        "orderings_agree": by_aicc == by_bic,
    }


def variability_metrics(tumour_by_patient: dict, normal_by_patient: dict | None = None) -> dict:
    """CoV of per-patient tumour means, pooled tumour SD, per-patient CNR median/IQR."""
    ids = sorted(tumour_by_patient)
    means = [float(np.mean(tumour_by_patient[i])) for i in ids]
    out = {
        "patient_means": means,
        "cov_percent": cov_percent(means),
        "pooled_sd": pooled_sd([np.asarray(tumour_by_patient[i]) for i in ids]),
    }
    if normal_by_patient is not None:
        vals, flags = [], []
        for i in ids:
            v, f = cnr(tumour_by_patient[i], normal_by_patient[i], return_flag=True)
            vals.append(v)
            flags.append(f)
        med, q1, q3 = median_iqr(vals)
        out.update(cnr_per_patient=vals, cnr_degenerate=flags, cnr_median=med, cnr_q1=q1, cnr_q3=q3)
    return out
