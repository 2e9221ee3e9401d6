"""Recompute the frozen reference values in tests/oracle_values.py with mpmath.

Nothing here imports the package; every value comes from an independent
high-precision evaluation. Run: python scripts/derive_oracles.py
"""

import itertools

import mpmath as mp

mp.mp.dps = 40
GAMMA = mp.mpf("2.6752218744e8")


def b_value(g_mT_m, delta_ms, Delta_ms):
    g = mp.mpf(g_mT_m) * mp.mpf("1e-3")
    d, D = mp.mpf(delta_ms) * mp.mpf("1e-3"), mp.mpf(Delta_ms) * mp.mpf("1e-3")
    return GAMMA**2 * g**2 * d**2 * (D - d / 3) * mp.mpf("1e-9")


def j1_prime(x):
    return mp.diff(lambda t: mp.sin(t) / t**2 - mp.cos(t) / t, x)


def sphere_roots(n):
    roots, x = [], mp.mpf("0.5")
    while len(roots) < n:
        if j1_prime(x) * j1_prime(x + mp.mpf("0.05")) < 0:
            roots.append(mp.findroot(j1_prime, (x, x + mp.mpf("0.05")), solver="bisect"))
        x += mp.mpf("0.05")
    return roots


def gpd(r, d, g_mT_m, delta, Delta, n_roots=60):
    q = GAMMA * mp.mpf(g_mT_m) * mp.mpf("1e-12")  # rad / (ms um)
    total = mp.mpf(0)
    for lam in sphere_roots(n_roots):
        a = lam / r
        x = d * a**2
        num = 2 * x * delta - 2 + 2 * mp.e**(-x * delta) + 2 * mp.e**(-x * Delta) \
            - mp.e**(-x * (Delta - delta)) - mp.e**(-x * (Delta + delta))
        total += num / (d**2 * a**6 * (lam**2 - 2))
    return mp.e**(-2 * q**2 * total)


def t_two_sided(t, df):
    x = df / (df + t**2)
    return mp.betainc(df / 2, mp.mpf(1) / 2, 0, x, regularized=True)


def main():
    print("B_SP1 =", mp.nstr(b_value(300, 5, 25), 17))
    print("B_SP2 =", mp.nstr(b_value(80, 16, 32), 17))
    print("B_SP3 =", mp.nstr(b_value(40, 26, 48), 17))
    print("ROOTS_J1P =", [mp.nstr(r, 17) for r in sphere_roots(5)])
    print("ASTRO_8_3 =", mp.nstr(mp.sqrt(mp.pi / (4 * 24)) * mp.erf(mp.sqrt(24)), 17))
    for r, g in ((4, 300), (8, 100), (12, 40), (8, 300)):
        print(f"GPD_SP1_R{r}_G{g} =", mp.nstr(gpd(mp.mpf(r), mp.mpf(2), g, mp.mpf(5), mp.mpf(25)), 17))
    print("GPD_SP3_R8_G40 =", mp.nstr(gpd(mp.mpf(8), mp.mpf(2), 40, mp.mpf(26), mp.mpf(48)), 17))
    # paired t on a textbook sample
    x = [mp.mpf(v) for v in ("5.1", "4.9", "6.2", "5.8", "6.0", "5.5", "5.3", "6.1")]
    y = [mp.mpf(v) for v in ("4.8", "4.7", "5.9", "5.9", "5.6", "5.0", "5.4", "5.7")]
    d = [a - b for a, b in zip(x, y)]
    n = len(d)
    mean = sum(d) / n
    sd = mp.sqrt(sum((v - mean) ** 2 for v in d) / (n - 1))
    t = mean / (sd / mp.sqrt(n))
    print("PAIRED_T =", mp.nstr(t, 17), "PAIRED_P =", mp.nstr(t_two_sided(t, n - 1), 17))
    # exact signed-rank p by enumeration of 2^6 sign patterns for d = 1..6 with one negative rank 2
    ranks = [1, 2, 3, 4, 5, 6]
    wplus = 21 - 2
    pats = list(itertools.product((0, 1), repeat=6))
    sums = [sum(r for r, s in zip(ranks, p) if s) for p in pats]
    lo = sum(1 for s in sums if s <= wplus) / len(pats)
    hi = sum(1 for s in sums if s >= wplus) / len(pats)
    print("WILCOXON_6 =", min(1, 2 * min(lo, hi)))


if __name__ == "__main__":
    main()
