"""Digital prostate phantoms: ground-truth VERDICT maps, ROIs, signals and Rician noise.

Each subject is a small 3-D grid holding an elliptical gland. Patients carry a
peripheral-zone lesion with raised intracellular fraction and cell radius; every
subject has a contralateral normal-tissue ROI of the same size.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import models
from .models import FixedDiffusivities
from .protocol import AcquisitionProtocol

TE_REF_MS = 54.0

PATIENT = "patient"
HEALTHY = "healthy"


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class RegionParams:
    """Mean and voxel-level jitter (SD) of one tissue class."""

    f_ic: float
    f_vasc: float
    r_um: float
    d_ees: float
    sd_f_ic: float = 0.05
    sd_f_vasc: float = 0.02
    sd_r_um: float = 0.5
    sd_d_ees: float = 0.1


TUMOUR = RegionParams(f_ic=0.45, f_vasc=0.08, r_um=9.0, d_ees=1.8)
NORMAL_PZ = RegionParams(f_ic=0.20, f_vasc=0.08, r_um=7.0, d_ees=2.2)
GLAND = RegionParams(f_ic=0.28, f_vasc=0.08, r_um=7.5, d_ees=2.0)


@dataclass(frozen=True)
class PhantomSpec:
    grid: tuple = (3, 64, 64)
    tumour: RegionParams = TUMOUR
    normal: RegionParams = NORMAL_PZ
    gland: RegionParams = GLAND
    # subject-level SD added to each region mean (inter-patient variation)
    subject_sd_f_ic: float = 0.01
    subject_sd_r_um: float = 0.3
    subject_sd_d_ees: float = 0.05
    roi_radius_frac: float = 0.09
    # per-patient lesion radius multiplier, drawn uniformly from this range
    lesion_scale_range: tuple = (0.55, 1.15)
    # log-SD of a per-subject SNR multiplier (coil loading, body habitus)
    subject_snr_log_sd: float = 0.3
    t2_ms: float = 80.0
    snr_ref: float = 30.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "lesion_scale_range", tuple(float(v) for v in self.lesion_scale_range))
        lo, hi = self.lesion_scale_range
        if not 0 < lo <= hi:
            raise PhantomError("lesion_scale_range must satisfy 0 < lo <= hi")
        if self.subject_snr_log_sd < 0:
            raise PhantomError("subject_snr_log_sd must be non-negative")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise PhantomError("grid must be (slices, height, width) with positive sizes")
        if self.grid[1] < 16 or self.grid[2] < 16:
            raise PhantomError("in-plane grid must be at least 16x16")
        if self.tumour.f_ic <= self.normal.f_ic:
            raise PhantomError("tumour mean f_ic must exceed normal mean f_ic")
        if self.t2_ms <= 0 or not self.snr_ref > 0:
            raise PhantomError("t2_ms and snr_ref must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("tumour", "normal", "gland"):
            if key in d and isinstance(d[key], dict):
                d[key] = RegionParams(**d[key])
        for key in ("grid", "lesion_scale_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Subject:
    subject_id: str
    kind: str
    acquisition_order: int
    seed: int


def default_cohort(seed: int = 0) -> list[Subject]:
    """Nine subjects (4 healthy, 5 patients) in acquisition order.

    The order places HC1, PT1, HC2, PT2, PT3 first, then HC3, PT5, then HC4, PT4,
    so a chronological 5/2/2 split reproduces the usual train/val/test make-up.
    """
    ids = ["HC1", "PT1", "HC2", "PT2", "PT3", "HC3", "PT5", "HC4", "PT4"]
    ss = np.random.SeedSequence(seed)
    child = [int(c.generate_state(1)[0]) for c in ss.spawn(len(ids))]
    return [Subject(sid, PATIENT if sid.startswith("PT") else HEALTHY, i, child[i])
            for i, sid in enumerate(ids)]


@dataclass
class Phantom:
    subject: Subject
    spec: PhantomSpec
    params: np.ndarray  # (S, H, W, 4) free VERDICT parameters, NaN outside the gland
    masks: dict  # name -> (S, H, W) bool
    snr_scale: float = 1.0

    @property
    def f_vasc(self) -> np.ndarray:
        return 1.0 - self.params[..., 0] - self.params[..., 1]


@dataclass
class VolumeGrid:
    """Signals laid out as [slices x b-values x height x width]."""

    data: np.ndarray
    b_values: tuple
    masks: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != len(self.b_values):
            raise PhantomError(f"volume shape {self.data.shape} inconsistent with {len(self.b_values)} b-values")

    @property
    def spatial_shape(self) -> tuple:
        s, _, h, w = self.data.shape
        return (s, h, w)


def _ellipse(shape2d, cy, cx, ay, ax):
    yy, xx = np.mgrid[0:shape2d[0], 0:shape2d[1]]
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _draw_region(rng, region: RegionParams, offsets, n):
    f_ic = rng.normal(region.f_ic + offsets[0], region.sd_f_ic, n)
    f_vasc = rng.normal(region.f_vasc, region.sd_f_vasc, n)
    r = rng.normal(region.r_um + offsets[1], region.sd_r_um, n)
    d = rng.normal(region.d_ees + offsets[2], region.sd_d_ees, n)
    f_ic = np.clip(f_ic, 0.01, 0.9)
    f_vasc = np.clip(f_vasc, 0.0, 0.5)
    f_vasc = np.minimum(f_vasc, 0.98 - f_ic)
    f_ees = 1.0 - f_ic - f_vasc
    return np.column_stack([f_ic, f_ees, np.clip(r, 1.0, 14.5), np.clip(d, 0.6, 2.9)])


def make_phantom(spec: PhantomSpec, subject: Subject | None = None) -> Phantom:
    """Ground-truth parameter volume and ROI masks, deterministic in the subject seed."""
    if subject is None:
        subject = Subject("PT1", PATIENT, 0, spec.seed)
    rng = np.random.default_rng(np.random.SeedSequence([subject.seed, spec.seed]))
    S, H, W = spec.grid
    cy = H / 2 + rng.uniform(-0.02, 0.02) * H
    cx = W / 2 + rng.uniform(-0.02, 0.02) * W
    ay, ax = (0.30 + rng.uniform(-0.02, 0.02)) * H, (0.38 + rng.uniform(-0.02, 0.02)) * W
    # subject-level draws use their own stream so the geometry stream stays fixed
    srng = np.random.default_rng(np.random.SeedSequence([subject.seed, spec.seed, 1]))
    lesion_scale = srng.uniform(*spec.lesion_scale_range)
    snr_scale = float(np.exp(srng.normal(0.0, spec.subject_snr_log_sd)))
    rad = spec.roi_radius_frac * min(H, W)
    # lesion sits posterolateral in the peripheral zone; the normal ROI mirrors it
    ly, lx = cy + 0.45 * ay, cx - 0.45 * ax
    ny, nx = ly, cx + 0.45 * ax

    gland = np.zeros((S, H, W), dtype=bool)
    lesion = np.zeros_like(gland)
    normal = np.zeros_like(gland)
    mid = (S - 1) / 2
    for s in range(S):
        shrink = 1.0 - 0.15 * (abs(s - mid) / mid if mid > 0 else 0.0)
        g = _ellipse((H, W), cy, cx, ay * shrink, ax * shrink)
        gland[s] = g
        if subject.kind == PATIENT:
            lesion[s] = _ellipse((H, W), ly, lx, rad * lesion_scale, rad * lesion_scale) & g
        normal[s] = _ellipse((H, W), ny, nx, rad, rad) & g & ~lesion[s]

    offsets = {
        name: (rng.normal(0, spec.subject_sd_f_ic), rng.normal(0, spec.subject_sd_r_um),
               rng.normal(0, spec.subject_sd_d_ees))
        for name in ("tumour", "normal", "gland")
    }
    params = np.full((S, H, W, 4), np.nan)
    pz = normal | (gland & ~lesion & (np.arange(H)[None, :, None] > cy + 0.25 * ay))
    rest = gland & ~lesion & ~pz
    for mask, region, key in ((lesion, spec.tumour, "tumour"), (pz, spec.normal, "normal"),
                              (rest, spec.gland, "gland")):
        n = int(mask.sum())
        if n:
            params[mask] = _draw_region(rng, region, offsets[key], n)
    masks = {"gland": gland, "lesion": lesion, "normal": normal}
    return Phantom(subject, spec, params, masks, snr_scale)


def synthesize_signals(phantom: Phantom, protocol: AcquisitionProtocol,
                       fixed: FixedDiffusivities = FixedDiffusivities()) -> VolumeGrid:
    """Noise-free VERDICT signal in every gland voxel; background is zero."""
    S, H, W = phantom.spec.grid
    data = np.zeros((S, protocol.n_shells, H, W))
    gland = phantom.masks["gland"]
    sig = models.verdict_forward(phantom.params[gland], protocol, fixed)
    data.transpose(0, 2, 3, 1)[gland] = sig
    meta = {"subject": phantom.subject.subject_id, "kind": phantom.subject.kind, "sp": protocol.name,
            "subject_seed": phantom.subject.seed, "phantom_seed": phantom.spec.seed, "noise_seed": None}
    return VolumeGrid(data, protocol.b_values, {k: v.copy() for k, v in phantom.masks.items()}, meta)


def noise_sigma(protocol: AcquisitionProtocol, spec: PhantomSpec, snr_scale: float = 1.0) -> float:
    """Per-direction noise SD relative to a unit b0 signal at the reference echo time."""
    if math.isinf(spec.snr_ref):
        return 0.0
    sigma = math.exp((protocol.timing.te_ms - TE_REF_MS) / spec.t2_ms) / (spec.snr_ref * snr_scale)
    if not sigma > 0:
        raise PhantomError(f"noise sigma must be positive, got {sigma}")
    return sigma


def acquire_directions(volume: VolumeGrid, protocol: AcquisitionProtocol, spec: PhantomSpec, seed: int,
                       b_jitter: float = 0.0, snr_scale: float = 1.0):
    """Per-direction Rician magnitudes, shape (S, n_shells * n_dirs, H, W), plus the
    per-volume measured b estimates (nominal times 1 + N(0, b_jitter))."""
    sigma = noise_sigma(protocol, spec, snr_scale)
    n_dir = protocol.directions_per_shell
    S, nb, H, W = volume.data.shape
    out = np.empty((S, nb * n_dir, H, W))
    measured = np.empty(nb * n_dir)
    for j in range(nb):
        rng = np.random.default_rng(np.random.SeedSequence([seed, j]))
        sig = volume.data[:, j]
        for k in range(n_dir):
            if sigma > 0:
                n1 = rng.normal(0.0, sigma, sig.shape)
                n2 = rng.normal(0.0, sigma, sig.shape)
                out[:, j * n_dir + k] = np.sqrt((sig + n1) ** 2 + n2**2)
            else:
                out[:, j * n_dir + k] = sig
        jit = np.random.default_rng(np.random.SeedSequence([seed, j, 1])).normal(0.0, b_jitter, n_dir)
        measured[j * n_dir:(j + 1) * n_dir] = volume.b_values[j] * (1.0 + jit)
    return out, measured


def add_rician(volume: VolumeGrid, protocol: AcquisitionProtocol, spec: PhantomSpec, seed: int,
               snr_scale: float = 1.0) -> VolumeGrid:
    """Rician noise drawn per direction, then averaged over each shell's directions."""
    sigma = noise_sigma(protocol, spec, snr_scale)
    meta = dict(volume.meta, noise_seed=seed, sigma=sigma)
    if sigma == 0.0:
        return VolumeGrid(volume.data.copy(), volume.b_values, {k: v.copy() for k, v in volume.masks.items()}, meta)
    raw, _ = acquire_directions(volume, protocol, spec, seed, snr_scale=snr_scale)
    S, nb, H, W = volume.data.shape
    avg = raw.reshape(S, nb, protocol.directions_per_shell, H, W).mean(axis=2)
    return VolumeGrid(avg, volume.b_values, {k: v.copy() for k, v in volume.masks.items()}, meta)


def simulate_cohort(spec: PhantomSpec, protocol: AcquisitionProtocol, cohort=None, noise_seed: int | None = 0,
                    fixed: FixedDiffusivities = FixedDiffusivities()):
    """Phantoms and (noisy unless ``noise_seed`` is None) volumes for every subject."""
    cohort = default_cohort(spec.seed) if cohort is None else cohort
    phantoms, volumes = {}, {}
    for i, subj in enumerate(cohort):
        ph = make_phantom(spec, subj)
        vol = synthesize_signals(ph, protocol, fixed)
        if noise_seed is not None:
            nseed = int(np.random.SeedSequence([noise_seed, i]).generate_state(1)[0])
            vol = add_rician(vol, protocol, spec, seed=nseed, snr_scale=ph.snr_scale)
        phantoms[subj.subject_id] = ph
        volumes[subj.subject_id] = vol
    return phantoms, volumes


def with_seed(spec: PhantomSpec, seed: int) -> PhantomSpec:
    return replace(spec, seed=seed)
