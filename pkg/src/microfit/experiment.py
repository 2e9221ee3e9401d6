"""End-to-end experiment matrix on phantoms: simulate, preprocess, fit with every
fitter, evaluate, and write a deterministic report bundle."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, evalstat, models, nlls, phantom, pipeline
from .neurofit import network, training
from .protocol import subprotocol

log = logging.getLogger(__name__)

NLLS = "nlls"
FITTERS = (NLLS, network.BASELINE, network.DENSE)
SPS = ("SP1", "SP2", "SP3")
BIOMARKER = {models.DKI: ("k", 1), models.VERDICT: ("f_ic", 0)}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class ExperimentConfig:
    """Which parts of the matrix to run, with every seed spelled out."""

    sps: tuple = SPS
    models: tuple = models.MODELS
    fitters: tuple = FITTERS
    phantom_seed: int = 0
    noise_seed: int = 0
    train_seed: int = 0
    phantom_spec: str | None = None
    phantom_overrides: dict = field(default_factory=dict)
    # per-architecture TrainConfig field overrides, e.g. {"dense": {"epochs": 5}}
    train_overrides: dict = field(default_factory=dict)
    output_dir: str = "results"
    write_maps: bool = True

    def __post_init__(self):
        for name, allowed in (("sps", SPS), ("models", models.MODELS), ("fitters", FITTERS)):
            vals = tuple(str(v).upper() if name == "sps" else str(v).lower() for v in getattr(self, name))
            if not vals:
                raise ConfigError(f"{name} must not be empty")
            bad = [v for v in vals if v not in allowed]
            if bad:
                raise ConfigError(f"unknown {name}: {bad}; allowed {list(allowed)}")
            object.__setattr__(self, name, vals)
        for s in ("phantom_seed", "noise_seed", "train_seed"):
            v = getattr(self, s)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ConfigError(f"{s} must be an explicit integer")
        if self.phantom_spec is not None and not Path(self.phantom_spec).is_file():
            raise ConfigError(f"phantom spec {self.phantom_spec} does not exist")
        for arch, ov in self.train_overrides.items():
            if arch not in (network.BASELINE, network.DENSE):
                raise ConfigError(f"train_overrides: unknown architecture {arch!r}")
            unknown = set(ov) - {"epochs", "batch_size", "lr0"}
            if unknown:
                raise ConfigError(f"train_overrides[{arch}]: unsupported keys {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("sps", "models", "fitters"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for k in ("sps", "models", "fitters"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    text = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def phantom_spec_for(cfg: ExperimentConfig) -> phantom.PhantomSpec:
    base = phantom.PhantomSpec.load(cfg.phantom_spec) if cfg.phantom_spec else phantom.PhantomSpec()
    d = base.to_dict()
    d.update(cfg.phantom_overrides)
    d["seed"] = cfg.phantom_seed
    return phantom.PhantomSpec.from_dict(d)


def train_config_for(cfg: ExperimentConfig, arch: str, model: str, sp: str) -> training.TrainConfig:
    tc = training.TrainConfig.preset(arch, model, sp, seed=cfg.train_seed)
    ov = cfg.train_overrides.get(arch, {})
    return replace(tc, **ov) if ov else tc


@dataclass
class CohortData:
    """One sub-protocol's simulated cohort after preprocessing."""

    sp: str
    phantoms: dict
    volumes: dict
    tables: dict
    split: pipeline.SubjectSplit

    def table(self, ids) -> pipeline.SignalTable:
        return pipeline.SignalTable.concat([self.tables[s] for s in ids])

    @property
    def patients(self) -> list:
        return [s for s, p in self.phantoms.items() if p.subject.kind == phantom.PATIENT]

    @property
    def all_subjects(self) -> list:
        return list(self.tables)


def prepare_cohort(spec: phantom.PhantomSpec, sp: str, noise_seed: int | None, cohort=None) -> CohortData:
    prot = subprotocol(sp)
    cohort = phantom.default_cohort(spec.seed) if cohort is None else cohort
    phs, vols = phantom.simulate_cohort(spec, prot, cohort, noise_seed=noise_seed)
    tables = {sid: pipeline.preprocess_volume(v, "gland") for sid, v in vols.items()}
    return CohortData(sp, phs, vols, tables, pipeline.make_split(cohort))


@dataclass
class FitOutput:
    """Per-voxel parameters for every subject plus training history, if any."""

    model: str
    fitter: str
    sp: str
    params: dict  # subject -> (N_s, k) array aligned with CohortData.tables[subject]
    history: training.TrainResult | None = None


def run_fitter(data: CohortData, model: str, fitter: str, cfg: ExperimentConfig) -> FitOutput:
    prot = subprotocol(data.sp)
    if fitter == NLLS:
        everything = data.table(data.all_subjects)
        vf = nlls.fit_signals(everything.signals, prot, model)
        if np.any(vf.failed):
            raise StageError("fit-nlls", f"{int(vf.failed.sum())} voxel(s) failed")
        return FitOutput(model, fitter, data.sp, _split_by_subject(everything, vf.params))
    spec = network.MlpSpec.preset(fitter, model)
    tc = train_config_for(cfg, fitter, model, data.sp)
    try:
        res = training.train_ssl(spec, tc, data.table(data.split.train), data.table(data.split.validation), prot)
    except training.TrainingDiverged as exc:
        raise StageError("train", f"{model}/{fitter}/{data.sp}: {exc}") from exc
    params = {sid: training.predict_params(res.network, t.signals) for sid, t in data.tables.items()}
    return FitOutput(model, fitter, data.sp, params, res)


def _split_by_subject(table: pipeline.SignalTable, values) -> dict:
    return {sid: values[table.subject == sid] for sid in table.subjects}


def roi_values(data: CohortData, fit: FitOutput, sid: str, roi: str, index: int) -> np.ndarray:
    t = data.tables[sid]
    flat = np.flatnonzero(data.phantoms[sid].masks[roi].ravel())
    return fit.params[sid][np.isin(t.voxel, flat), index]


def evaluate_fit(data: CohortData, fit: FitOutput) -> dict:
    """Test-set fit quality, information criteria and tumour-ROI statistics."""
    prot = subprotocol(data.sp)
    k = models.n_free_params(fit.model)
    test_ids = list(data.split.test) or list(data.split.train)
    meas = np.concatenate([data.tables[s].signals for s in test_ids])
    theta = np.concatenate([fit.params[s] for s in test_ids])
    rec = models.forward(fit.model, theta, prot)
    ssr = float(np.sum((rec - meas) ** 2))
    label = f"{fit.model}-{fit.fitter}"
    rep = evalstat.EvalReport(label, fit.model, fit.fitter, data.sp, evalstat.mse(meas, rec), ssr,
                              int(meas.size), k)
    per_subject = {}
    for s in test_ids:
        r = models.forward(fit.model, fit.params[s], prot)
        per_subject[s] = evalstat.mse(data.tables[s].signals, r)
    name, idx = BIOMARKER[fit.model]
    entry = {"label": label, "sp": data.sp, "model": fit.model, "fitter": fit.fitter, "biomarker": name,
             "test_subjects": test_ids, "test_mse": rep.mse, "test_mse_by_subject": per_subject,
             "ssr": ssr, "n_obs": rep.n_obs, "k": k, "aicc": rep.aicc, "bic": rep.bic}
    if fit.history is not None:
        h = fit.history
        entry["training"] = {"best_epoch": h.best_epoch + 1, "best_val_loss": h.best_val_loss,
                             "train_loss_at_best": h.best_train_loss, "epochs": len(h.train_loss),
                             "config": h.config.to_dict()}
    pts = data.patients
    if len(pts) >= 2:
        tum = {s: roi_values(data, fit, s, "lesion", idx) for s in pts}
        nor = {s: roi_values(data, fit, s, "normal", idx) for s in pts}
        var = evalstat.variability_metrics(tum, nor)
        test = evalstat.decide_and_test(np.concatenate(list(tum.values())), np.concatenate(list(nor.values())),
                                        paired=False)
        entry["roi"] = {
            "patients": sorted(pts),
            "patient_means": var["patient_means"],
            "cov_percent": var["cov_percent"],
            "pooled_sd": var["pooled_sd"],
            "cnr_per_patient": var["cnr_per_patient"],
            "cnr_median": var["cnr_median"],
            "cnr_q1": var["cnr_q1"],
            "cnr_q3": var["cnr_q3"],
            "tumour_vs_normal": test.to_dict(),
        }
    return entry


def directional_checks(entries: list) -> dict:
    by = {(e["sp"], e["model"], e["fitter"]): e for e in entries}
    checks = {"sp_ordering": {}, "model_selection": {}, "dense_vs_nlls": {}}
    for model in models.MODELS:
        for fitter in FITTERS:
            if all((sp, model, fitter) in by for sp in SPS):
                m = [by[(sp, model, fitter)]["test_mse"] for sp in SPS]
                checks["sp_ordering"][f"{model}-{fitter}"] = bool(m[0] < m[1] < m[2])
    for sp in SPS:
        reps = [e for e in entries if e["sp"] == sp]
        if {e["model"] for e in reps} == set(models.MODELS):
            ranking = evalstat.rank_models([_as_report(e) for e in reps])
            worst_v = max(ranking["aicc_rank"][e["label"]] for e in reps if e["model"] == models.VERDICT)
            best_d = min(ranking["aicc_rank"][e["label"]] for e in reps if e["model"] == models.DKI)
            worst_vb = max(ranking["bic_rank"][e["label"]] for e in reps if e["model"] == models.VERDICT)
            best_db = min(ranking["bic_rank"][e["label"]] for e in reps if e["model"] == models.DKI)
            checks["model_selection"][sp] = {
                "verdict_above_dki_aicc": bool(worst_v < best_d),
                "verdict_above_dki_bic": bool(worst_vb < best_db),
                "orderings_agree": ranking["orderings_agree"],
            }
        d, n = by.get((sp, models.VERDICT, network.DENSE)), by.get((sp, models.VERDICT, NLLS))
        if d and n and "roi" in d and "roi" in n:
            checks["dense_vs_nlls"][sp] = {
                "lower_pooled_sd": bool(d["roi"]["pooled_sd"] < n["roi"]["pooled_sd"]),
                "lower_cov": bool(d["roi"]["cov_percent"] < n["roi"]["cov_percent"]),
                "higher_cnr_median": bool(d["roi"]["cnr_median"] > n["roi"]["cnr_median"]),
            }
    return checks


def _as_report(e: dict) -> evalstat.EvalReport:
    return evalstat.EvalReport(e["label"], e["model"], e["fitter"], e["sp"], e["test_mse"], e["ssr"],
                               e["n_obs"], e["k"], e["aicc"], e["bic"])


def rankings(entries: list) -> dict:
    out = {}
    for sp in SPS:
        reps = [_as_report(e) for e in entries if e["sp"] == sp]
        if reps:
            out[sp] = evalstat.rank_models(reps)
    return out


def write_loss_csv(path, result: training.TrainResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_loss"])
        for i, (lr, tr, va) in enumerate(zip(result.lrs, result.train_loss, result.val_loss)):
            w.writerow([i + 1, repr(float(lr)), repr(float(tr)), repr(float(va))])


def write_map_previews(outdir: Path, data: CohortData, fit: FitOutput) -> list:
    name, idx = BIOMARKER[fit.model]
    lo, hi = pipeline.DEFAULT_WINDOWS[name]
    written = []
    for sid in data.patients:
        t = data.tables[sid]
        vol = t.unflatten(fit.params[sid][:, idx], sid)
        p = outdir / f"{data.sp}_{fit.model}_{fit.fitter}_{sid}_{name}.pgm"
        pipeline.write_pgm(p, pipeline.tile_slices(vol), lo, hi)
        written.append(p.name)
    return written


def dumps_report(report: dict) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _clean(obj):
    """Make floats JSON-safe: non-finite values become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def cmd_reproduce(cfg: ExperimentConfig, output_dir: str | None = None) -> dict:
    """Run the configured matrix; returns the report and writes the bundle."""
    out = Path(output_dir or cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "losses").mkdir(exist_ok=True)
        if cfg.write_maps:
            (out / "maps").mkdir(exist_ok=True)
    except OSError as exc:
        raise StageError("io", f"cannot create {out}: {exc}") from exc
    try:
        spec = phantom_spec_for(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"phantom spec: {exc}") from exc
    entries, artifacts = [], {"loss_curves": [], "maps": []}
    for sp in cfg.sps:
        try:
            data = prepare_cohort(spec, sp, cfg.noise_seed)
        except (ValueError, phantom.PhantomError) as exc:
            raise StageError("simulate", f"{sp}: {exc}") from exc
        for model in cfg.models:
            for fitter in cfg.fitters:
                log.info("%s %s %s", sp, model, fitter)
                fit = run_fitter(data, model, fitter, cfg)
                try:
                    entry = evaluate_fit(data, fit)
                except (ValueError, FloatingPointError) as exc:
                    raise StageError("evaluate", f"{sp}/{model}/{fitter}: {exc}") from exc
                entries.append(entry)
                if fit.history is not None:
                    p = out / "losses" / f"{sp}_{model}_{fitter}.csv"
                    write_loss_csv(p, fit.history)
                    artifacts["loss_curves"].append(f"losses/{p.name}")
                if cfg.write_maps:
                    artifacts["maps"] += [f"maps/{n}" for n in write_map_previews(out / "maps", data, fit)]
    report = {
        "version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "phantom_spec": _clean(spec.to_dict()),
        "split": data.split.to_dict(),
        "metric_definitions": {
            "cnr": "|mean(T) - mean(N)| / sqrt(var(T) + var(N)), sample variances, per patient",
            "cov_percent": "100 * sample SD / mean of per-patient tumour means",
            "pooled_sd": "sample SD of tumour voxels pooled over patients",
            "aicc_bic": "Gaussian SSR form, n = test measurements, k = free parameters per voxel",
        },
        "entries": entries,
        "rankings": rankings(entries),
        "checks": directional_checks(entries),
        "artifacts": artifacts,
    }
    text = dumps_report(report)
    try:
        (out / "report.json").write_text(text)
    except OSError as exc:
        raise StageError("io", f"cannot write report: {exc}") from exc
    return json.loads(text)


def variability_replicate(seed: int, sp: str = "SP1", cfg: ExperimentConfig | None = None) -> dict:
    """Dense-vs-NLLS tumour-ROI comparison on one seeded phantom replicate.

    Phantom, noise and training seeds are all set to ``seed``.
    """
    base = cfg or ExperimentConfig()
    cfg = replace(base, sps=(sp,), models=(models.VERDICT,), fitters=(NLLS, network.DENSE), phantom_seed=seed,
                  noise_seed=seed, train_seed=seed)
    data = prepare_cohort(phantom_spec_for(cfg), sp, cfg.noise_seed)
    entries = [evaluate_fit(data, run_fitter(data, models.VERDICT, f, cfg)) for f in cfg.fitters]
    out = {"seed": seed, "checks": directional_checks(entries)["dense_vs_nlls"][sp]}
    for e in entries:
        out[e["fitter"]] = {k: e["roi"][k] for k in ("pooled_sd", "cov_percent", "cnr_median")}
    return out
