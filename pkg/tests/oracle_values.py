"""Reference values frozen from scripts/derive_oracles.py (mpmath, 40 digits)."""

B_SP1 = 3.7573263405658309
B_SP2 = 3.1268589086390133
B_SP3 = 3.0447177908241798

ROOTS_J1P = (2.0815759778181006, 5.9403699905727125, 9.2058401429366649, 12.404445021901974, 15.579236410387186)

# sqrt(pi / (4 b d)) erf(sqrt(b d)) at d = 8, b = 3
ASTRO_8_3 = 0.18090031363879588

# sphere signal, d = 2, 60 roots; keyed by (sub-protocol, radius um, gradient mT/m)
GPD = {
    ("SP1", 4, 300): 0.78103865418166128,
    ("SP1", 8, 100): 0.8388733159692974,
    ("SP1", 12, 40): 0.94543787900402325,
    ("SP1", 8, 300): 0.20571569147427976,
    ("SP3", 8, 40): 0.67020119094507623,
}

PAIRED_X = (5.1, 4.9, 6.2, 5.8, 6.0, 5.5, 5.3, 6.1)
PAIRED_Y = (4.8, 4.7, 5.9, 5.9, 5.6, 5.0, 5.4, 5.7)
PAIRED_T = 2.9673014758835152
PAIRED_P = 0.020887536562928843

# differences 1..6 with the rank-2 difference negative: W+ = 19, exact two-sided p
WILCOXON_6_P = 0.09375
