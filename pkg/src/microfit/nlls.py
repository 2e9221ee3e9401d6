"""Voxel-wise Levenberg-Marquardt fitting of DKI and VERDICT.

Bounds are enforced by a sigmoid reparameterization of each parameter onto its
interval. The solver is vectorized over voxels: every voxel carries its own
damping, iteration count and convergence state, and nothing couples voxels,
so a voxel's result does not depend on the batch it was fitted in.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import models
from .models import DkiParams, FixedDiffusivities, ParamBounds, VerdictParams
from .protocol import AcquisitionProtocol

log = logging.getLogger(__name__)

_U_CLIP = 500.0


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class LmConfig:
    lambda0: float = 1e-3
    lambda_factor: float = 10.0
    max_iter: int = 200
    ssr_rtol: float = 1e-10
    step_tol: float = 1e-10
    # a fit this close to exact cannot improve further in double precision
    ssr_atol: float = 1e-26
    lambda_max: float = 1e16
    lambda_min: float = 1e-12
    n_starts: int = 5
    seed: int = 0


@dataclass(frozen=True)
class FitResult:
    params: DkiParams | VerdictParams
    ssr: float
    n_iter: int
    converged: bool
    restarts_used: int


@dataclass
class VolumeFit:
    """Per-row NLLS output for a signal table."""

    model: str
    params: np.ndarray
    ssr: np.ndarray
    n_iter: np.ndarray
    converged: np.ndarray
    failed: np.ndarray
    start_ssr: np.ndarray
    reconstructed: np.ndarray

    @property
    def param_names(self):
        return models.default_bounds(self.model).names


def to_bounded(u, bounds: ParamBounds):
    s = 1.0 / (1.0 + np.exp(-np.clip(u, -_U_CLIP, _U_CLIP)))
    return bounds.lo + bounds.width * s, bounds.width * s * (1.0 - s)


def to_unbounded(theta, bounds: ParamBounds):
    z = (np.asarray(theta, dtype=float) - bounds.lo) / bounds.width
    z = np.clip(z, 1e-12, 1.0 - 1e-12)
    return np.log(z) - np.log1p(-z)


def start_points(bounds: ParamBounds, cfg: LmConfig) -> np.ndarray:
    """Midpoint of the bounds followed by ``n_starts - 1`` seeded uniform draws (theta space)."""
    rng = np.random.default_rng(cfg.seed)
    draws = bounds.lo + bounds.width * rng.random((max(cfg.n_starts - 1, 0), len(bounds)))
    return np.vstack([bounds.midpoint[None, :], draws])[: cfg.n_starts]


def _residuals(model, y, u, bounds, protocol, fixed, with_jac):
    theta, dtheta = to_bounded(u, bounds)
    if with_jac:
        s, jac = models.forward(model, theta, protocol, fixed, with_jac=True)
        r = y - s
        return r, np.sum(r * r, axis=1), -jac * dtheta[:, None, :]
    s = models.forward(model, theta, protocol, fixed)
    r = y - s
    return r, np.sum(r * r, axis=1), None


def _solve(M, rhs):
    try:
        return np.linalg.solve(M, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        return np.stack([np.linalg.lstsq(m, v, rcond=None)[0] for m, v in zip(M, rhs)])


def _lm_from(model, y, u0, bounds, protocol, fixed, cfg: LmConfig):
    n, p = u0.shape
    u = u0.copy()
    lam = np.full(n, cfg.lambda0)
    r, ssr, jr = _residuals(model, y, u, bounds, protocol, fixed, True)
    n_iter = np.zeros(n, dtype=int)
    converged = ssr <= cfg.ssr_atol
    active = ~converged
    eye = np.eye(p)
    for _ in range(cfg.max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        J = jr[idx]
        A = np.sum(J[:, :, :, None] * J[:, :, None, :], axis=1)
        g = np.sum(J * r[idx][:, :, None], axis=1)
        # Marquardt scaling: damp along diag(J^T J), floored so saturated directions stay solvable
        diag = np.einsum("nii->ni", A)
        floor = 1e-12 * np.max(diag, axis=1, keepdims=True) + 1e-30
        M = A + lam[idx][:, None, None] * (np.maximum(diag, floor)[:, :, None] * eye)
        step = _solve(M, -g)
        u_try = u[idx] + step
        r_try, ssr_try, jr_try = _residuals(model, y[idx], u_try, bounds, protocol, fixed, True)
        ok = np.isfinite(ssr_try) & (ssr_try < ssr[idx])
        step_norm = np.sqrt(np.sum(step * step, axis=1))
        n_iter[idx] += 1

        acc = idx[ok]
        rel = (ssr[acc] - ssr_try[ok]) / np.maximum(ssr[acc], 1e-300)
        u[acc] = u_try[ok]
        r[acc] = r_try[ok]
        jr[acc] = jr_try[ok]
        ssr[acc] = ssr_try[ok]
        lam[acc] = np.maximum(lam[acc] / cfg.lambda_factor, cfg.lambda_min)
        done_acc = (rel < cfg.ssr_rtol) | (step_norm[ok] < cfg.step_tol) | (ssr_try[ok] <= cfg.ssr_atol)

        rej = idx[~ok]
        lam[rej] = lam[rej] * cfg.lambda_factor
        done_rej = (step_norm[~ok] < cfg.step_tol) | (lam[rej] > cfg.lambda_max)

        converged[acc[done_acc]] = True
        converged[rej[done_rej]] = True
        active[acc[done_acc]] = False
        active[rej[done_rej]] = False
    return u, ssr, n_iter, converged


def _validate_rows(signals, protocol):
    y = np.atleast_2d(np.asarray(signals, dtype=float))
    if y.shape[1] != protocol.n_shells:
        raise FitError(f"signal has {y.shape[1]} entries, protocol has {protocol.n_shells} shells")
    bad = ~np.all(np.isfinite(y), axis=1) | np.all(y == 0, axis=1)
    return y, bad


def fit_signals(signals, protocol: AcquisitionProtocol, model: str, bounds: ParamBounds | None = None,
                cfg: LmConfig = LmConfig(), fixed: FixedDiffusivities = FixedDiffusivities()) -> VolumeFit:
    """Fit every row of ``signals`` (N, n_shells); invalid rows are flagged, not fatal."""
    model = models._check_model(model)
    bounds = bounds or models.default_bounds(model)
    y, bad = _validate_rows(signals, protocol)
    n, p = y.shape[0], len(bounds)
    good = np.nonzero(~bad)[0]
    yg = y[good]
    best_u = np.zeros((good.size, p))
    best_ssr = np.full(good.size, np.inf)
    best_iter = np.zeros(good.size, dtype=int)
    best_conv = np.zeros(good.size, dtype=bool)
    start_ssr = np.full((n, cfg.n_starts), np.nan)
    for si, theta0 in enumerate(start_points(bounds, cfg)):
        u0 = np.tile(to_unbounded(theta0, bounds), (good.size, 1))
        _, ssr0, _ = _residuals(model, yg, u0, bounds, protocol, fixed, False)
        start_ssr[good, si] = ssr0
        u, ssr, n_iter, conv = _lm_from(model, yg, u0, bounds, protocol, fixed, cfg)
        better = ssr < best_ssr
        best_u[better] = u[better]
        best_ssr[better] = ssr[better]
        best_iter[better] = n_iter[better]
        best_conv[better] = conv[better]
    params = np.full((n, p), np.nan)
    ssr = np.full(n, np.nan)
    n_iter = np.zeros(n, dtype=int)
    converged = np.zeros(n, dtype=bool)
    recon = np.full(y.shape, np.nan)
    if good.size:
        theta, _ = to_bounded(best_u, bounds)
        if model == models.VERDICT:
            (theta[:, 0], theta[:, 1], _), _ = models.normalize_fractions(theta[:, 0], theta[:, 1])
        params[good] = theta
        ssr[good] = best_ssr
        n_iter[good] = best_iter
        converged[good] = best_conv
        recon[good] = models.forward(model, theta, protocol, fixed)
    if bad.any():
        log.warning("%d voxel(s) rejected: non-finite or all-zero signal", int(bad.sum()))
    return VolumeFit(model, params, ssr, n_iter, converged, bad, start_ssr, recon)


def fit_voxel(signal, protocol: AcquisitionProtocol, model: str, bounds: ParamBounds | None = None,
              cfg: LmConfig = LmConfig(), fixed: FixedDiffusivities = FixedDiffusivities()) -> FitResult:
    """Best-of-restarts LM fit of one b0-normalized signal vector."""
    y = np.asarray(signal, dtype=float)
    if y.ndim != 1:
        raise FitError("fit_voxel expects a single signal vector")
    if y.size != protocol.n_shells:
        raise FitError(f"signal has {y.size} entries, protocol has {protocol.n_shells} shells")
    if not np.all(np.isfinite(y)):
        raise FitError("signal contains non-finite values")
    if np.all(y == 0):
        raise FitError("signal is all zero")
    if abs(y[0] - 1.0) > 1e-6:
        raise FitError(f"signal must be b0-normalized, got S(b=0)={y[0]}")
    vf = fit_signals(y[None, :], protocol, model, bounds, cfg, fixed)
    theta = vf.params[0]
    if models._check_model(model) == models.DKI:
        params = DkiParams(float(theta[0]), float(theta[1]))
    else:
        params = VerdictParams.from_free(*theta)
    return FitResult(params, float(vf.ssr[0]), int(vf.n_iter[0]), bool(vf.converged[0]), cfg.n_starts)


def fit_volume(table, protocol: AcquisitionProtocol, model: str, bounds: ParamBounds | None = None,
               cfg: LmConfig = LmConfig(), fixed: FixedDiffusivities = FixedDiffusivities()) -> VolumeFit:
    """Fit every voxel of a :class:`~microfit.pipeline.SignalTable` (or a raw 2-D array)."""
    signals = getattr(table, "signals", table)
    return fit_signals(signals, protocol, model, bounds, cfg, fixed)
