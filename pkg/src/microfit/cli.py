"""``microfit`` command line: simulate, preprocess, fit, train, evaluate, export, oracle, reproduce.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, evalstat, experiment, models, nlls, phantom, pipeline
from .neurofit import checkpoint, network, training
from .protocol import ProtocolError, subprotocol

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("microfit")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _sp(text: str) -> str:
    t = str(text).upper()
    t = t if t.startswith("SP") else f"SP{t}"
    if t not in experiment.SPS:
        raise argparse.ArgumentTypeError(f"sub-protocol must be 1, 2, 3 or SP1..SP3, got {text!r}")
    return t


def _stamp(header: dict, args) -> dict:
    """Version and a hash of the invoking arguments, embedded in every output."""
    def plain(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    rec = {k: plain(v) for k, v in vars(args).items() if k != "func"}
    return dict(header, version=__version__, config_hash=experiment.config_hash(rec), command=rec)


def _read_table(path) -> pipeline.SignalTable:
    if str(path).endswith(".csv"):
        b, sig = pipeline.read_csv(path)
        n = sig.shape[0]
        return pipeline.SignalTable(sig, b, np.full(n, "csv", dtype=object), np.arange(n),
                                    {"csv": (n,)}, "", "")
    return pipeline.load_table(path)[1]


def cmd_simulate(args) -> int:
    spec = phantom.PhantomSpec.load(args.spec) if args.spec else phantom.PhantomSpec()
    overrides = {"seed": args.seed}
    if args.snr_ref is not None:
        overrides["snr_ref"] = args.snr_ref
    if args.t2 is not None:
        overrides["t2_ms"] = args.t2
    spec = phantom.PhantomSpec.from_dict(dict(spec.to_dict(), **overrides))
    prot = subprotocol(args.sp)
    cohort = phantom.default_cohort(spec.seed)
    if args.subjects:
        wanted = set(args.subjects)
        cohort = [c for c in cohort if c.subject_id in wanted]
        if not cohort:
            raise CliError(f"no subjects match {args.subjects}", EXIT_CONFIG)
    _, vols = phantom.simulate_cohort(spec, prot, cohort, noise_seed=None if args.noise_free else args.noise_seed)
    header = {"sp": prot.name, "phantom_spec": spec.to_dict(), "protocol": prot.to_dict(),
              "noise_seed": None if args.noise_free else args.noise_seed,
              "cohort": [{"id": c.subject_id, "kind": c.kind, "order": c.acquisition_order} for c in cohort]}
    pipeline.save_volumes(args.out, vols, _stamp(header, args))
    print(f"wrote {len(vols)} subject volume(s) to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    header, vols = pipeline.load_volumes(args.inp)
    ids = args.subjects or list(vols)
    missing = [s for s in ids if s not in vols]
    if missing:
        raise CliError(f"subjects not in volume file: {missing}", EXIT_CONFIG)
    table = pipeline.SignalTable.concat([pipeline.preprocess_volume(vols[s], args.mask) for s in ids])
    pipeline.save_table(args.out, table, _stamp({"source": str(args.inp), "sp": header.get("sp")}, args))
    if args.csv:
        pipeline.write_csv(args.csv, table)
    print(f"{len(table)} voxel(s) from {len(ids)} subject(s) -> {args.out}")
    return EXIT_OK


def cmd_fit_nlls(args) -> int:
    table = _read_table(args.inp)
    prot = subprotocol(args.sp)
    if len(table.b_values) != prot.n_shells:
        raise CliError("table columns do not match the protocol's shells", EXIT_CONFIG)
    cfg = nlls.LmConfig(n_starts=args.starts, seed=args.seed, max_iter=args.max_iter)
    vf = nlls.fit_signals(table.signals, prot, args.model, cfg=cfg)
    header = _stamp({"model": vf.model, "fitter": "nlls", "sp": prot.name,
                     "n_failed": int(vf.failed.sum()), "n_converged": int(vf.converged.sum())}, args)
    params = np.where(np.isnan(vf.params), 0.0, vf.params)
    pipeline.save_maps(args.out, table, params, models.default_bounds(vf.model).names, header,
                       ssr=np.nan_to_num(vf.ssr, nan=-1.0))
    print(f"fitted {len(table)} voxel(s); {int(vf.failed.sum())} failed; {int(vf.converged.sum())} converged")
    return EXIT_OK if not vf.failed.all() else EXIT_NUMERIC


def cmd_train(args) -> int:
    prot = subprotocol(args.sp)
    spec = network.MlpSpec.preset(args.arch, args.model)
    train_t = _read_table(args.train)
    val_t = _read_table(args.val)
    if args.config:
        try:
            cfg = training.TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
        except (KeyError, json.JSONDecodeError, TypeError) as exc:
            raise CliError(f"bad training config {args.config}: {exc}", EXIT_CONFIG) from None
    else:
        cfg = training.TrainConfig.preset(args.arch, args.model, prot.name, seed=args.seed)
    if args.epochs is not None:
        cfg = training.TrainConfig.from_dict(dict(cfg.to_dict(), epochs=args.epochs))
    grid_info = None
    if args.grid:
        grid = training.GridSpec.for_model(args.model)
        gres = training.grid_search(grid, spec, cfg, train_t, val_t, prot)
        if gres.best_result is None:
            raise CliError("every grid cell diverged", EXIT_NUMERIC)
        result = gres.best_result
        grid_info = {"batch_sizes": list(grid.batch_sizes), "lrs": list(grid.lrs),
                     "val_loss": [[float(v) if np.isfinite(v) else "inf" for v in row] for row in gres.val_loss],
                     "best_batch_size": gres.best_batch_size, "best_lr": gres.best_lr}
        print(f"grid best: batch {gres.best_batch_size}, lr {gres.best_lr:g}")
    else:
        result = training.train_ssl(spec, cfg, train_t, val_t, prot)
    extra = _stamp({"sp": prot.name, "grid": grid_info}, args)
    checkpoint.save_checkpoint(args.out, result.network, result.config, result, extra)
    if args.loss_csv:
        experiment.write_loss_csv(args.loss_csv, result)
    if args.apply:
        table = _read_table(args.apply)
        theta = training.predict_params(result.network, table.signals)
        rec = models.forward(spec.model, theta, prot)
        pipeline.save_maps(args.maps_out or Path(args.out).with_suffix(".maps.bin"), table, theta,
                           models.default_bounds(spec.model).names,
                           _stamp({"model": spec.model, "fitter": spec.arch, "sp": prot.name}, args),
                           ssr=np.sum((rec - table.signals) ** 2, axis=1))
    print(f"best epoch {result.best_epoch + 1}: val loss {result.best_val_loss:.4e}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    vol_header, vols = pipeline.load_volumes(args.masks)
    table = _read_table(args.table) if args.table else None
    reports, entries = [], []
    for mpath in args.maps:
        h, arr = pipeline.load_maps(mpath)
        model = h["model"]
        prot = subprotocol(h["sp"])
        label = f"{model}-{h.get('fitter', Path(mpath).stem)}"
        entry = {"label": label, "maps": str(mpath), "model": model, "sp": h["sp"]}
        if table is not None:
            if len(table) != arr["params"].shape[0]:
                raise CliError(f"{mpath}: row count differs from {args.table}", EXIT_CONFIG)
            rec = models.forward(model, arr["params"], prot)
            ssr = float(np.sum((rec - table.signals) ** 2))
            rep = evalstat.EvalReport(label, model, h.get("fitter", ""), h["sp"], evalstat.mse(table.signals, rec),
                                      ssr, int(table.signals.size), models.n_free_params(model))
            reports.append(rep)
            entry.update(mse=rep.mse, ssr=ssr, aicc=rep.aicc, bic=rep.bic)
        name, idx = experiment.BIOMARKER[model]
        tum, nor = {}, {}
        for sid in h["subjects"]:
            if sid not in vols or not vols[sid].masks.get("lesion", np.zeros(1, bool)).any():
                continue
            vol = pipeline.map_volume(h, arr, sid, idx)
            tum[sid] = vol[vols[sid].masks["lesion"]]
            nor[sid] = vol[vols[sid].masks["normal"]]
            tum[sid], nor[sid] = tum[sid][np.isfinite(tum[sid])], nor[sid][np.isfinite(nor[sid])]
        if len(tum) >= 2:
            var = evalstat.variability_metrics(tum, nor)
            test = evalstat.decide_and_test(np.concatenate(list(tum.values())), np.concatenate(list(nor.values())),
                                            paired=False)
            entry["roi"] = dict(var, biomarker=name, tumour_vs_normal=test.to_dict())
        entries.append(entry)
    report = {"entries": entries}
    if reports:
        report["rankings"] = evalstat.rank_models(reports)
    report = _stamp(report, args)
    Path(args.out).write_text(experiment.dumps_report(report))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_export_maps(args) -> int:
    h, arr = pipeline.load_maps(args.maps)
    windows = dict(pipeline.DEFAULT_WINDOWS)
    for w in args.window or []:
        name, rng = pipeline.parse_window(w)
        windows[name] = rng
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    names = h["param_names"]
    wanted = args.params or [n for n in names if n in windows]
    count = 0
    for pname in wanted:
        if pname not in names:
            raise CliError(f"parameter {pname!r} not in maps (have {names})", EXIT_CONFIG)
        lo, hi = windows.get(pname, (float(np.min(arr["params"][:, names.index(pname)])),
                                     float(np.max(arr["params"][:, names.index(pname)]))))
        for sid in h["subjects"]:
            vol = pipeline.map_volume(h, arr, sid, names.index(pname))
            img = pipeline.tile_slices(vol) if vol.ndim == 3 else np.atleast_2d(vol)
            pipeline.write_pgm(outdir / f"{sid}_{pname}.pgm", img, lo, hi)
            count += 1
    print(f"wrote {count} PGM preview(s) to {outdir}")
    return EXIT_OK


def cmd_oracle_sphere(args) -> int:
    from .restricted_mc import McConfig, mc_sphere_signal

    prot = subprotocol(args.sp)
    cfg = McConfig(r_um=args.r, d_um2_ms=args.d, g_mT_m=args.g, timing=prot.timing, n_walkers=args.walkers,
                   seed=args.seed)
    est, se = mc_sphere_signal(cfg)
    gpd = float(models.sphere_gpd_signal(args.r, args.d, args.g, prot.timing))
    out = {"r_um": args.r, "d_um2_ms": args.d, "g_mT_m": args.g, "sp": prot.name, "walkers": args.walkers,
           "seed": args.seed, "mc_signal": est, "mc_se": se, "gpd_signal": gpd,
           "rel_diff": abs(gpd - est) / abs(est) if est else None, "version": __version__}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    if args.config and not Path(args.config).is_file():
        raise CliError(f"config file {args.config} does not exist", EXIT_CONFIG)
    cfg = experiment.ExperimentConfig.load(args.config) if args.config else experiment.ExperimentConfig()
    report = experiment.cmd_reproduce(cfg, args.out)
    out = args.out or cfg.output_dir
    print(f"{len(report['entries'])} entr{'y' if len(report['entries']) == 1 else 'ies'}; report at {out}/report.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="microfit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"microfit {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize a phantom cohort for one sub-protocol")
    s.add_argument("--sp", type=_sp, required=True, help="sub-protocol 1|2|3")
    s.add_argument("--spec", type=Path, help="phantom spec JSON (defaults built in)")
    s.add_argument("--seed", type=int, default=0, help="phantom seed")
    s.add_argument("--noise-seed", type=int, default=0, help="Rician noise seed")
    s.add_argument("--noise-free", action="store_true", help="skip noise")
    s.add_argument("--snr-ref", type=float, help="b0 SNR at the reference TE")
    s.add_argument("--t2", type=float, help="tissue T2 in ms")
    s.add_argument("--subjects", nargs="+", help="restrict to these subject ids")
    s.add_argument("--out", type=Path, required=True, help="output volume container")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", help="mask, flatten and b0-normalize volumes into a signal table")
    s.add_argument("--in", dest="inp", type=Path, required=True, help="volume container")
    s.add_argument("--mask", default="gland", help="mask channel to apply")
    s.add_argument("--subjects", nargs="+", help="subjects to include (default all)")
    s.add_argument("--out", type=Path, required=True, help="output table container")
    s.add_argument("--csv", type=Path, help="also write a CSV (header row = b-values)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("fit-nlls", help="voxel-wise Levenberg-Marquardt fit")
    s.add_argument("--model", choices=models.MODELS, required=True)
    s.add_argument("--sp", type=_sp, required=True)
    s.add_argument("--in", dest="inp", type=Path, required=True, help="table container or CSV")
    s.add_argument("--out", type=Path, required=True, help="output maps container")
    s.add_argument("--starts", type=int, default=5, help="number of starts per voxel")
    s.add_argument("--max-iter", type=int, default=200, help="LM iterations per start")
    s.add_argument("--seed", type=int, default=0, help="seed of the random starts")
    s.set_defaults(func=cmd_fit_nlls)

    s = sub.add_parser("train", help="self-supervised encoder training")
    s.add_argument("--model", choices=models.MODELS, required=True)
    s.add_argument("--arch", choices=(network.BASELINE, network.DENSE), required=True)
    s.add_argument("--sp", type=_sp, required=True)
    s.add_argument("--train", type=Path, required=True, help="training table")
    s.add_argument("--val", type=Path, required=True, help="validation table")
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--grid", action="store_true", help="full factorial batch x lr search")
    mode.add_argument("--config", type=Path, help="TrainConfig JSON (default: architecture preset)")
    s.add_argument("--epochs", type=int, help="override the epoch count")
    s.add_argument("--seed", type=int, default=0, help="training seed when no --config is given")
    s.add_argument("--out", type=Path, required=True, help="checkpoint path")
    s.add_argument("--loss-csv", type=Path, help="per-epoch loss history CSV")
    s.add_argument("--apply", type=Path, help="table to run inference on")
    s.add_argument("--maps-out", type=Path, help="maps container for --apply")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="metrics, rankings and ROI statistics for fitted maps")
    s.add_argument("--maps", type=Path, nargs="+", required=True, help="maps containers")
    s.add_argument("--masks", type=Path, required=True, help="volume container holding lesion/normal masks")
    s.add_argument("--table", type=Path, help="measured table matching the maps rows (enables MSE/AICc/BIC)")
    s.add_argument("--out", type=Path, required=True, help="report JSON")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-maps", help="8-bit PGM previews of parameter maps")
    s.add_argument("--maps", type=Path, required=True)
    s.add_argument("--outdir", type=Path, required=True)
    s.add_argument("--window", action="append", help="display window name=lo:hi, e.g. fic=0:0.4 (repeatable)")
    s.add_argument("--params", nargs="+", help="parameters to export (default: those with a window)")
    s.set_defaults(func=cmd_export_maps)

    s = sub.add_parser("oracle", help="validation oracles")
    osub = s.add_subparsers(dest="oracle", required=True)
    o = osub.add_parser("sphere", help="Monte-Carlo restricted sphere signal vs the GPD series")
    o.add_argument("--r", type=float, required=True, help="radius (um)")
    o.add_argument("--d", type=float, default=2.0, help="diffusivity (um^2/ms)")
    o.add_argument("--g", type=float, required=True, help="gradient (mT/m)")
    o.add_argument("--sp", type=_sp, default="SP1", help="timing preset")
    o.add_argument("--walkers", type=int, default=200_000)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_oracle_sphere)

    s = sub.add_parser("reproduce", help="run the experiment matrix end to end")
    s.add_argument("--config", type=Path, help="ExperimentConfig JSON (default: full matrix)")
    s.add_argument("--out", type=Path, help="output directory (overrides config)")
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (experiment.ConfigError, ProtocolError, phantom.PhantomError, network.SpecError,
            models.ModelError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except experiment.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if exc.stage == "io" else EXIT_NUMERIC
    except pipeline.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if "container" in str(exc) else EXIT_CONFIG
    except (training.TrainingDiverged, nlls.FitError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
