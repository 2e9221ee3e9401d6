"""Forward signal models: DKI and the three-compartment VERDICT model.

Every batch forward returns the normalized signal and, on request, the
analytic Jacobian with respect to the free parameters. The NLLS fitter uses
the Jacobians; the neural decoders re-express the same formulas on the
autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erf

from .protocol import GAMMA_MS_UM_PER_MT_M, AcquisitionProtocol, PulseTiming

DKI = "dki"
VERDICT = "verdict"
MODELS = (DKI, VERDICT)

DEFAULT_N_ROOTS = 40

_FRACTION_TOL = 1e-9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class FixedDiffusivities:
    d_ic: float = 2.0
    d_vasc: float = 8.0


@dataclass(frozen=True)
class ParamBounds:
    """Lower/upper pairs for the free parameters of one model, in fit order."""

    names: tuple
    lower: tuple
    upper: tuple

    def __post_init__(self):
        if not (len(self.names) == len(self.lower) == len(self.upper)):
            raise ModelError("bounds arrays must have equal length")
        for n, lo, hi in zip(self.names, self.lower, self.upper):
            if not lo < hi:
                raise ModelError(f"bound for {n}: lower {lo} must be < upper {hi}")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def __len__(self):
        return len(self.names)

    def contains(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.all((theta >= self.lo) & (theta <= self.hi), axis=-1)


DKI_BOUNDS = ParamBounds(names=("d_k", "k"), lower=(0.0, 0.0), upper=(3.0, 5.0))
VERDICT_BOUNDS = ParamBounds(
    names=("f_ic", "f_ees", "r_um", "d_ees"),
    lower=(0.0, 0.0, 0.01, 0.5),
    upper=(1.0, 1.0, 15.0, 3.0),
)


def default_bounds(model: str) -> ParamBounds:
    return {DKI: DKI_BOUNDS, VERDICT: VERDICT_BOUNDS}[_check_model(model)]


def n_free_params(model: str) -> int:
    return len(default_bounds(model))


def _check_model(model: str) -> str:
    m = str(model).lower()
    if m not in MODELS:
        raise ModelError(f"unknown model {model!r}; expected one of {MODELS}")
    return m


@dataclass(frozen=True)
class DkiParams:
    d_k: float
    k: float

    def __post_init__(self):
        if not (0.0 < self.d_k <= 3.0):
            raise ModelError(f"d_k={self.d_k} outside (0, 3]")
        if not (0.0 <= self.k <= 5.0):
            raise ModelError(f"k={self.k} outside [0, 5]")

    def as_array(self) -> np.ndarray:
        return np.array([self.d_k, self.k])


@dataclass(frozen=True)
class VerdictParams:
    f_ic: float
    f_ees: float
    f_vasc: float
    r_um: float
    d_ees: float

    def __post_init__(self):
        for name in ("f_ic", "f_ees", "f_vasc"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ModelError(f"{name}={v} outside [0, 1]")
        total = self.f_ic + self.f_ees + self.f_vasc
        if abs(total - 1.0) > _FRACTION_TOL:
            raise ModelError(f"volume fractions sum to {total}, expected 1")
        if not (0.01 <= self.r_um <= 15.0):
            raise ModelError(f"r_um={self.r_um} outside [0.01, 15]")
        if not (0.5 <= self.d_ees <= 3.0):
            raise ModelError(f"d_ees={self.d_ees} outside [0.5, 3]")

    @classmethod
    def from_free(cls, f_ic, f_ees, r_um, d_ees) -> "VerdictParams":
        (f_ic, f_ees, f_vasc), _ = normalize_fractions(np.float64(f_ic), np.float64(f_ees))
        return cls(float(f_ic), float(f_ees), float(f_vasc), float(r_um), float(d_ees))

    def as_array(self) -> np.ndarray:
        """Free-parameter vector (f_ic, f_ees, r_um, d_ees)."""
        return np.array([self.f_ic, self.f_ees, self.r_um, self.d_ees])


# ---------------------------------------------------------------------------
# Bessel roots for the sphere series


def _j1_derivative(x):
    s, c = np.sin(x), np.cos(x)
    return 2.0 * c / x**2 - 2.0 * s / x**3 + s / x


@lru_cache(maxsize=8)
def sphere_roots(n_roots: int = DEFAULT_N_ROOTS, tol: float = 1e-12) -> np.ndarray:
    """First ``n_roots`` positive roots of j1'(x), j1 the spherical Bessel function.

    Brackets come from a sign scan on a fine grid; each root is then refined
    by bisection to ``tol``.
    """
    roots = []
    step = 0.05
    x0 = 0.5
    f0 = _j1_derivative(x0)
    while len(roots) < n_roots:
        x1 = x0 + step
        f1 = _j1_derivative(x1)
        if f0 == 0.0:
            roots.append(x0)
        elif f0 * f1 < 0:
            lo, hi, flo = x0, x1, f0
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                fm = _j1_derivative(mid)
                if flo * fm <= 0:
                    hi = mid
                else:
                    lo, flo = mid, fm
            roots.append(0.5 * (lo + hi))
        x0, f0 = x1, f1
    out = np.array(roots[:n_roots])
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Scalar compartment signals


def dki_signal(p: DkiParams, b):
    """exp(-b D + b^2 D^2 K / 6)."""
    b = np.asarray(b, dtype=float)
    return np.exp(-b * p.d_k + b * b * p.d_k**2 * p.k / 6.0)


def ball_signal(d_ees, b):
    return np.exp(-np.asarray(b, dtype=float) * d_ees)


def astrosticks_signal(d_vasc, b):
    """Orientation average of a stick: sqrt(pi / (4 b d)) erf(sqrt(b d)), equal to 1 at b = 0."""
    x = np.asarray(np.asarray(b, dtype=float) * d_vasc)
    small = x < 1e-8
    xs = np.where(small, 1.0, x)
    val = np.sqrt(np.pi / (4.0 * xs)) * erf(np.sqrt(xs))
    # series 1 - x/3 + x^2/10 near zero
    out = np.where(small, 1.0 - x / 3.0 + x * x / 10.0, val)
    return float(out) if out.ndim == 0 else out


def _gpd_sum(r_um, d, timing: PulseTiming, n_roots: int = DEFAULT_N_ROOTS, with_grad=False):
    """Series sum of the sphere GPD exponent and optionally its derivative in R.

    The result multiplied by ``-2 (gamma G)^2`` is the log signal.
    """
    lam = sphere_roots(n_roots)
    r = np.asarray(r_um, dtype=float)[..., None]
    a = lam / r
    x = d * a * a
    dl, Dl = timing.delta_ms, timing.Delta_ms
    e_d = np.exp(-x * dl)
    e_D = np.exp(-x * Dl)
    e_m = np.exp(-x * (Dl - dl))
    e_p = np.exp(-x * (Dl + dl))
    num = 2.0 * x * dl - 2.0 + 2.0 * e_d + 2.0 * e_D - e_m - e_p
    denom = d * d * a**6 * (lam * lam - 2.0)
    total = np.sum(num / denom, axis=-1)
    if not with_grad:
        return total
    dnum_dx = 2.0 * dl - 2.0 * dl * e_d - 2.0 * Dl * e_D + (Dl - dl) * e_m + (Dl + dl) * e_p
    dnum_da = dnum_dx * 2.0 * d * a
    dterm_da = (dnum_da - 6.0 * num / a) / denom
    da_dr = -a / r
    return total, np.sum(dterm_da * da_dr, axis=-1)


def sphere_gpd_signal(r_um, d_ic, g_mT_m, timing: PulseTiming, n_roots: int = DEFAULT_N_ROOTS):
    """Restricted diffusion in an impermeable sphere, Gaussian phase approximation."""
    if np.any(np.asarray(r_um) <= 0):
        raise ModelError("sphere radius must be positive")
    s = _gpd_sum(r_um, d_ic, timing, n_roots)
    q = GAMMA_MS_UM_PER_MT_M * np.asarray(g_mT_m, dtype=float)
    out = np.exp(-2.0 * q * q * s)
    return float(out) if np.ndim(out) == 0 else out


def normalize_fractions(f_ic, f_ees, with_grad=False):
    """Apply the shared fraction rule: rescale (f_ic, f_ees) when their sum exceeds 1.

    Returns ``(f_ic, f_ees, f_vasc)`` and, if ``with_grad``, the 2x2 Jacobian of
    the rescaled pair with respect to the raw pair (shape ``(..., 2, 2)``).
    """
    f_ic = np.asarray(f_ic, dtype=float)
    f_ees = np.asarray(f_ees, dtype=float)
    s = f_ic + f_ees
    over = s > 1.0
    scale = np.where(over, s, 1.0)
    g_ic = f_ic / scale
    g_ees = f_ees / scale
    f_vasc = np.clip(1.0 - g_ic - g_ees, 0.0, 1.0)
    if not with_grad:
        return (g_ic, g_ees, f_vasc), None
    jac = np.zeros(f_ic.shape + (2, 2))
    inv = 1.0 / scale
    inv2 = np.where(over, 1.0 / (scale * scale), 0.0)
    jac[..., 0, 0] = inv - f_ic * inv2
    jac[..., 0, 1] = -f_ic * inv2
    jac[..., 1, 0] = -f_ees * inv2
    jac[..., 1, 1] = inv - f_ees * inv2
    return (g_ic, g_ees, f_vasc), jac


def verdict_signal(p: VerdictParams, fixed: FixedDiffusivities, b, g_mT_m, timing: PulseTiming,
                   n_roots: int = DEFAULT_N_ROOTS):
    if abs(p.f_ic + p.f_ees + p.f_vasc - 1.0) > _FRACTION_TOL:
        raise ModelError("volume fractions must sum to 1")
    s_ic = sphere_gpd_signal(p.r_um, fixed.d_ic, g_mT_m, timing, n_roots)
    return (
        p.f_ic * s_ic
        + p.f_ees * ball_signal(p.d_ees, b)
        + p.f_vasc * astrosticks_signal(fixed.d_vasc, b)
    )


# ---------------------------------------------------------------------------
# Batch forwards over a protocol


def dki_forward(theta, b_values, with_jac=False):
    """Batch DKI signals for ``theta`` of shape (N, 2) = (d_k, k).

    Returns S of shape (N, n_b) and, if requested, J of shape (N, n_b, 2).
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    b = np.asarray(b_values, dtype=float)[None, :]
    dk = theta[:, 0:1]
    k = theta[:, 1:2]
    s = np.exp(-b * dk + b * b * dk * dk * k / 6.0)
    if not with_jac:
        return s
    jac = np.empty(s.shape + (2,))
    jac[..., 0] = s * (-b + b * b * dk * k / 3.0)
    jac[..., 1] = s * b * b * dk * dk / 6.0
    return s, jac


def verdict_forward(theta, protocol: AcquisitionProtocol, fixed: FixedDiffusivities = FixedDiffusivities(),
                    with_jac=False, n_roots: int = DEFAULT_N_ROOTS):
    """Batch VERDICT signals for free parameters ``theta`` (N, 4) = (f_ic, f_ees, R, d_ees).

    Fractions go through :func:`normalize_fractions` before use, so any
    (f_ic, f_ees) in the unit square is valid input.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    b = protocol.b_array[None, :]
    q2 = (GAMMA_MS_UM_PER_MT_M * protocol.gradients[None, :]) ** 2
    (f_ic, f_ees, f_vasc), fjac = normalize_fractions(theta[:, 0], theta[:, 1], with_grad=with_jac)
    r = theta[:, 2]
    d_ees = theta[:, 3:4]
    if with_jac:
        gsum, dgsum = _gpd_sum(r, fixed.d_ic, protocol.timing, n_roots, with_grad=True)
    else:
        gsum = _gpd_sum(r, fixed.d_ic, protocol.timing, n_roots)
    s_ic = np.exp(-2.0 * q2 * gsum[:, None])
    s_ees = np.exp(-b * d_ees)
    s_vasc = astrosticks_signal(fixed.d_vasc, protocol.b_array)[None, :]
    fic, fees, fv = f_ic[:, None], f_ees[:, None], f_vasc[:, None]
    s = fic * s_ic + fees * s_ees + fv * s_vasc
    if not with_jac:
        return s
    # f_vasc = 1 - f_ic - f_ees on the normalized pair; the clip is inactive there
    ds_dgic = s_ic - s_vasc
    ds_dgees = s_ees - s_vasc
    jac = np.empty(s.shape + (4,))
    jac[..., 0] = ds_dgic * fjac[:, None, 0, 0] + ds_dgees * fjac[:, None, 1, 0]
    jac[..., 1] = ds_dgic * fjac[:, None, 0, 1] + ds_dgees * fjac[:, None, 1, 1]
    jac[..., 2] = fic * s_ic * (-2.0 * q2 * dgsum[:, None])
    jac[..., 3] = fees * s_ees * (-b)
    return s, jac


def forward(model: str, theta, protocol: AcquisitionProtocol, fixed: FixedDiffusivities = FixedDiffusivities(),
            with_jac=False):
    model = _check_model(model)
    if model == DKI:
        return dki_forward(theta, protocol.b_array, with_jac=with_jac)
    return verdict_forward(theta, protocol, fixed, with_jac=with_jac)


def model_signal_vector(model: str, params, protocol: AcquisitionProtocol,
                        fixed: FixedDiffusivities = FixedDiffusivities()) -> np.ndarray:
    """Signal over the protocol's shells for a single parameter set."""
    model = _check_model(model)
    if model == DKI:
        if not isinstance(params, DkiParams):
            params = DkiParams(*params)
        return dki_signal(params, protocol.b_array)
    if not isinstance(params, VerdictParams):
        params = VerdictParams.from_free(*params)
    return verdict_signal(params, fixed, protocol.b_array, protocol.gradients, protocol.timing)
