"""Monte-Carlo random walk inside an impermeable sphere under a PGSE waveform.

Used as an independent check of the GPD sphere signal in :mod:`microfit.models`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .protocol import GAMMA_MS_UM_PER_MT_M, PulseTiming


class McConfigError(ValueError):
    pass


@dataclass(frozen=True)
class McConfig:
    r_um: float
    d_um2_ms: float
    g_mT_m: float
    timing: PulseTiming
    n_walkers: int = 200_000
    dt_ms: float | None = None
    seed: int = 0
    batch_size: int = 50_000

    def resolved_dt(self) -> float:
        """Time step: the requested one, or the largest satisfying both step rules,
        then shrunk so that an integer number of steps spans the sequence."""
        total = self.timing.Delta_ms + self.timing.delta_ms
        if self.dt_ms is not None:
            dt = self.dt_ms
        else:
            dt = self.timing.delta_ms / 50.0
            if self.d_um2_ms > 0:
                dt = min(dt, (self.r_um / 10.0) ** 2 / (6.0 * self.d_um2_ms))
        n = math.ceil(total / dt - 1e-9)
        return total / n

    def validate(self, min_walkers: int = 1) -> None:
        if self.r_um <= 0:
            raise McConfigError("radius must be positive")
        if self.d_um2_ms < 0 or self.g_mT_m < 0:
            raise McConfigError("diffusivity and gradient must be non-negative")
        if self.n_walkers < min_walkers:
            raise McConfigError(f"n_walkers={self.n_walkers} below required {min_walkers}")
        dt = self.resolved_dt()
        if dt > self.timing.delta_ms / 50.0 * (1 + 1e-9):
            raise McConfigError(f"dt={dt} exceeds delta/50")
        if math.sqrt(6.0 * self.d_um2_ms * dt) > self.r_um / 10.0 * (1 + 1e-9):
            raise McConfigError("step length sqrt(6 d dt) exceeds R/10")


def _lobe_integrals(t0: np.ndarray, dt: float, timing: PulseTiming) -> np.ndarray:
    """Exact integral of the unit-amplitude PGSE waveform over [t0, t0 + dt]."""
    t1 = t0 + dt
    d, D = timing.delta_ms, timing.Delta_ms
    pos = np.clip(np.minimum(t1, d) - np.maximum(t0, 0.0), 0.0, None)
    neg = np.clip(np.minimum(t1, D + d) - np.maximum(t0, D), 0.0, None)
    return pos - neg


def _uniform_in_sphere(rng: np.random.Generator, n: int, r: float) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * (r * rng.random(n) ** (1.0 / 3.0))[:, None]


def _reflect_step(pos: np.ndarray, step: np.ndarray, r: float) -> np.ndarray:
    """Move walkers by ``step`` with specular reflection on the sphere wall."""
    new = pos + step
    out = np.einsum("ij,ij->i", new, new) > r * r
    if not out.any():
        return new
    idx = np.nonzero(out)[0]
    p = pos[idx]
    s = step[idx]
    r2 = r * r
    for _ in range(32):
        ss = np.einsum("ij,ij->i", s, s)
        ps = np.einsum("ij,ij->i", p, s)
        pp = np.einsum("ij,ij->i", p, p)
        disc = np.maximum(ps * ps - ss * (pp - r2), 0.0)
        t = (-ps + np.sqrt(disc)) / np.where(ss > 0, ss, 1.0)
        t = np.clip(t, 0.0, 1.0)
        hit = p + t[:, None] * s
        normal = hit / np.linalg.norm(hit, axis=1, keepdims=True)
        rest = (1.0 - t)[:, None] * s
        rest = rest - 2.0 * np.einsum("ij,ij->i", rest, normal)[:, None] * normal
        # keep the contact point a hair inside so the next test is unambiguous
        p = normal * (r * (1.0 - 1e-12))
        cand = p + rest
        still = np.einsum("ij,ij->i", cand, cand) > r2
        if not still.any():
            new[idx] = cand
            return new
        done = ~still
        new[idx[done]] = cand[done]
        idx, p, s = idx[still], p[still], rest[still]
    new[idx] = p
    return new


def _run_batch(cfg: McConfig, n: int, batch_index: int, dt: float, n_steps: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, batch_index]))
    pos = _uniform_in_sphere(rng, n, cfg.r_um)
    gint = GAMMA_MS_UM_PER_MT_M * cfg.g_mT_m * _lobe_integrals(np.arange(n_steps) * dt, dt, cfg.timing)
    sigma = math.sqrt(2.0 * cfg.d_um2_ms * dt)
    phase = np.zeros(n)
    for k in range(n_steps):
        x_prev = pos[:, 0].copy()
        if sigma > 0:
            pos = _reflect_step(pos, sigma * rng.standard_normal((n, 3)), cfg.r_um)
        if gint[k] != 0.0:
            phase += gint[k] * 0.5 * (x_prev + pos[:, 0])
    return np.cos(phase)


def mc_sphere_signal(cfg: McConfig, min_walkers: int = 1) -> tuple[float, float]:
    """Estimate the sphere signal; returns ``(mean cos(phase), standard error)``.

    Walkers are split into batches seeded by ``(seed, batch_index)``, so the
    result does not depend on how batches are scheduled.
    """
    cfg.validate(min_walkers)
    if cfg.g_mT_m == 0:
        return 1.0, 0.0
    dt = cfg.resolved_dt()
    n_steps = int(round((cfg.timing.Delta_ms + cfg.timing.delta_ms) / dt))
    chunks = []
    remaining = cfg.n_walkers
    b = 0
    while remaining > 0:
        n = min(cfg.batch_size, remaining)
        chunks.append(_run_batch(cfg, n, b, dt, n_steps))
        remaining -= n
        b += 1
    c = np.concatenate(chunks)
    se = float(np.std(c, ddof=1) / math.sqrt(c.size)) if c.size > 1 else 0.0
    return float(np.mean(c)), se
