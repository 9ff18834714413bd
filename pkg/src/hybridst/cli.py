"""Command-line interface: simulate, fit, hybrid, cv.

Exit codes: 0 success (possibly with warnings), 2 configuration error,
3 numerical failure.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from .config import STUDIES, ConfigError, RunConfig, load_config, sub_seed, validate
from .lgm import OptimizationFailure, fit
from .metrics import evaluate
from .simulate import StDataset, simulate_spatiotemporal, simulate_temporal_jumps
from .sparse import NotPositiveDefinite
from .studies import RF1_MODELS, run_cv_study, spatiotemporal_model, temporal_model
from .hybrid import run_inla_rf1, run_inla_rf2

log = logging.getLogger("hybridst")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# ---------------------------------------------------------------------------
# helpers

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{float(v):.10g}"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _provenance(cfg, command, args, extra=None):
    out = {"command": command, "version": __version__, "seed": cfg.seed, "sub_seeds": cfg.seeds(),
           "data_seed": cfg.data_seed(), "config": cfg.to_dict(), "argv": sys.argv[1:]}
    if getattr(args, "data", None):
        out["data"] = {"path": os.path.abspath(args.data), "sha256": _sha256(args.data)}
    out.update(extra or {})
    return out


def _simulate(cfg):
    study_cfg = cfg.study_config()
    if cfg.simulation.study == "spatiotemporal":
        return simulate_spatiotemporal(study_cfg, cfg.data_seed())
    return simulate_temporal_jumps(study_cfg, cfg.data_seed())


def _infer_study(data):
    return "temporal-jumps" if np.all(data.x == 0) and np.all(data.y_coord == 0) else "spatiotemporal"


def _load_data(cfg, args):
    if getattr(args, "data", None):
        try:
            data = StDataset.from_csv(args.data)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read dataset: {exc}") from exc
        study = args.study or _infer_study(data)
        if study == "spatiotemporal":
            # domain geometry is not stored in the CSV; take it from the config
            geom = cfg.study_config() if cfg.simulation.study == "spatiotemporal" else None
            w, h = (geom.width, geom.height) if geom else (data.x.max(), data.y_coord.max())
            data.meta["domain"] = [float(w), float(h)]
        return data, study
    return _simulate(cfg), cfg.simulation.study


def _model(cfg, data, study):
    if study == "spatiotemporal":
        spec, _ = spatiotemporal_model(data, cfg.mesh_config())
        return spec
    return temporal_model(data, order=cfg.model.rw_order)


def _metric_rows(data, mean, sd):
    rows = []
    for split in ("train", "test"):
        mask = data.mask(split)
        if mask.any():
            r = evaluate(data.response[mask], mean[mask], sd[mask])
            rows.append(["all", split] + [f"{v:.6f}" for v in (r.rmse, r.mae, r.cp, r.aiw)])
    return rows


METRIC_HEADER = ["block_id", "split", "rmse", "mae", "cp", "aiw"]


def _marginals(cfg, study):
    if cfg.model.marginals is not None:
        return cfg.model.marginals
    return "integrated" if study == "temporal-jumps" else "plugin"


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(cfg, args, out):
    if args.study:
        cfg.simulation.study = args.study
        validate(cfg)
    data = _simulate(cfg)
    path = data.to_csv(os.path.join(out, "data.csv"))
    _write_json(os.path.join(out, "provenance.json"),
                _provenance(cfg, "simulate", args, {"generator": data.meta, "rows": len(data)}))
    log.info("wrote %d rows to %s", len(data), path)
    return EXIT_OK


def cmd_fit(cfg, args, out):
    data, study = _load_data(cfg, args)
    spec = _model(cfg, data, study)
    y = data.response.copy()
    y[data.split != "train"] = np.nan
    init, step = None, 0.5
    if args.warm_start:
        with open(args.warm_start) as fh:
            prev = json.load(fh)
        init = np.asarray(prev["theta"], dtype=float)
        if init.shape != (len(spec.theta_names),):
            raise ConfigError(f"warm start has {init.size} hyperparameters, model needs {len(spec.theta_names)}")
        step = 0.1
    f = fit(spec, y, init=init, step=step, marginals=_marginals(cfg, study))
    log.info("fit: %d optimizer iterations, %d evaluations", f.n_iter, f.n_eval)
    _write_json(os.path.join(out, "theta_mode.json"),
                {"names": spec.theta_names, "theta": f.theta_mode, "hyper": f.hyper,
                 "n_iter": f.n_iter, "n_eval": f.n_eval, "log_posterior": f.log_posterior})
    _write_csv(os.path.join(out, "latent.csv"), ["node", "mean", "sd"],
               [[i, _fmt(m), _fmt(np.sqrt(v))] for i, (m, v) in enumerate(zip(f.mu, f.latent_marginal_var))])
    var = f.eta_var if cfg.model.interval == "eta" else f.pred_var
    sd = np.sqrt(var)
    _write_csv(os.path.join(out, "predictive.csv"), ["row", "mean", "sd"],
               [[i, _fmt(m), _fmt(s)] for i, (m, s) in enumerate(zip(f.eta_mean, sd))])
    _write_csv(os.path.join(out, "metrics.csv"), METRIC_HEADER, _metric_rows(data, f.eta_mean, sd))
    _write_json(os.path.join(out, "provenance.json"), _provenance(cfg, "fit", args, {"study": study}))
    if cfg.output.figures:
        from . import plotting
        plotting.plot_observed_predicted(data.response, f.eta_mean, os.path.join(out, "observed_predicted.png"))
        if study == "temporal-jumps":
            plotting.plot_latent_series(data.t, data.eta_true, f.eta_mean, sd, os.path.join(out, "latent.png"),
                                        marks=np.asarray(data.meta.get("jump_starts", [])) + 1)
    return EXIT_OK


def cmd_hybrid(cfg, args, out):
    data, study = _load_data(cfg, args)
    spec = _model(cfg, data, study)
    overrides = {}
    if args.algorithm:
        overrides["algorithm"] = args.algorithm
    elif "algorithm" not in cfg.hybrid:
        overrides["algorithm"] = "RF2" if study == "temporal-jumps" else "RF1"
    if args.propagate:
        overrides["propagate_uncertainty"] = True
    if "marginals" not in cfg.hybrid:
        overrides["marginals"] = _marginals(cfg, study)
    hcfg = cfg.hybrid_config(**overrides)
    if hcfg.algorithm == "RF2" and hcfg.target_effect is None:
        hcfg = replace(hcfg, target_effect="u" if study == "temporal-jumps" else "omega")
    rf_cfg = cfg.forest_config()
    runner = run_inla_rf1 if hcfg.algorithm == "RF1" else run_inla_rf2
    res = runner(spec, data, rf_cfg, hcfg)

    _write_csv(os.path.join(out, "trace.csv"), ["iter", "d_kl", "sigma2_rf", "train_rmse"],
               [[r["iter"], _fmt(r["d_kl"]), _fmt(r["sigma2_rf"]), _fmt(r["train_rmse"])] for r in res.trace])
    sd = res.pred_sd(cfg.model.interval)
    _write_csv(os.path.join(out, "predictive.csv"), ["row", "mean", "sd"],
               [[i, _fmt(m), _fmt(s)] for i, (m, s) in enumerate(zip(res.pred_mean, sd))])
    rows = _metric_rows(data, res.pred_mean, sd)
    if res.stress_table is not None:
        tab = res.stress_table
        _write_csv(os.path.join(out, "stress_points.csv"),
                   ["node", "base_mean", "base_sd", "corrected_mean", "corrected_sd", "truth"],
                   [[int(tab["node"][i])] + [_fmt(tab[k][i]) for k in
                                              ("base_mean", "base_sd", "corrected_mean", "corrected_sd", "truth")]
                    for i in range(len(tab["node"]))])
        ok = tab["row"] >= 0
        for label, key in (("stress_base", "base"), ("stress_corrected", "corrected")):
            r = evaluate(tab["truth"][ok], tab[f"{key}_mean"][ok], tab[f"{key}_sd"][ok])
            rows.append([label, "truth"] + [f"{v:.6f}" for v in (r.rmse, r.mae, r.cp, r.aiw)])
    _write_csv(os.path.join(out, "metrics.csv"), METRIC_HEADER, rows)
    warnings = [] if res.converged else [f"stopped at max_iter={hcfg.max_iter} without D_KL < {hcfg.delta}"]
    for w in warnings:
        log.warning(w)
    _write_json(os.path.join(out, "report.json"),
                {"algorithm": hcfg.algorithm, "converged": res.converged, "iterations": res.n_iter,
                 "final_d_kl": res.trace[-1]["d_kl"], "sigma2_rf": res.sigma2_rf,
                 "hyper": res.final_fit.hyper, "warnings": warnings})
    _write_json(os.path.join(out, "provenance.json"),
                _provenance(cfg, "hybrid", args, {"study": study, "hybrid_config": asdict(hcfg)}))
    if cfg.output.figures:
        from . import plotting
        plotting.plot_trace(res.trace, os.path.join(out, "trace.png"))
        plotting.plot_observed_predicted(data.response, res.pred_mean, os.path.join(out, "observed_predicted.png"))
        if res.stress_table is not None:
            plotting.plot_stress_points(res.stress_table, os.path.join(out, "stress_points.png"))
    return EXIT_OK


def cmd_cv(cfg, args, out):
    data, study = _load_data(cfg, args)
    if study != "spatiotemporal":
        raise ConfigError("cv runs on spatio-temporal data")
    n_blocks = args.blocks or cfg.cv.blocks
    hcfg = cfg.hybrid_config(algorithm="RF1")
    try:
        results, blocks = run_cv_study(data, n_blocks, sub_seed(cfg.seed, "kmeans"), cfg.forest_config(), hcfg,
                                       cfg.mesh_config(), cfg.model.interval)
    except ValueError as exc:
        if "block layout" in str(exc):
            raise ConfigError(str(exc)) from exc
        raise
    rows = []
    for model in RF1_MODELS:
        for r in results[model]:
            for metric, value in r.report.as_dict().items():
                rows.append([model, r.block, r.split, metric, f"{value:.6f}"])
    _write_csv(os.path.join(out, "cv.csv"), ["model", "block", "split", "metric", "value"], rows)
    _write_csv(os.path.join(out, "blocks.csv"), ["row", "block"], [[i, int(b)] for i, b in enumerate(blocks)])
    _write_json(os.path.join(out, "provenance.json"),
                _provenance(cfg, "cv", args, {"study": study, "n_blocks": n_blocks}))
    if cfg.output.figures:
        from . import plotting
        plotting.plot_blocks(data.coords, blocks, os.path.join(out, "blocks.png"))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "hybrid": cmd_hybrid, "cv": cmd_cv}


def build_parser():
    p = argparse.ArgumentParser(prog="hybridst", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads for forest fitting")
    p.add_argument("--figures", action="store_true", help="also render PNG figures")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a simulated dataset")
    s.add_argument("--study", choices=STUDIES)

    for name, helptext in (("fit", "fit the base latent Gaussian model"),
                           ("hybrid", "run INLA-RF1 or INLA-RF2"),
                           ("cv", "leave-one-block-out cross-validation")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--data", help="dataset CSV (default: simulate from the config)")
        c.add_argument("--study", choices=STUDIES, help="model family (default: inferred from the data)")
        if name == "fit":
            c.add_argument("--warm-start", help="theta_mode.json of a previous fit")
        if name == "hybrid":
            c.add_argument("--algorithm", choices=("RF1", "RF2"))
            c.add_argument("--propagate", action="store_true", help="RF1 uncertainty propagation")
        if name == "cv":
            c.add_argument("--blocks", type=int, help="number of spatio-temporal blocks (6, 8, 16, ...)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = args.out or "."
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        if args.out is not None:
            cfg.output.directory = args.out
        if args.figures:
            cfg.output.figures = True
        if getattr(args, "study", None) and args.command != "simulate":
            cfg.simulation.study = args.study
        validate(cfg)
        out = cfg.output.directory
        try:
            os.makedirs(out, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NotPositiveDefinite, OptimizationFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        try:
            _write_json(os.path.join(out, "diagnostics.json"),
                        {"command": args.command, "error": type(exc).__name__, "message": str(exc)})
        except OSError:
            pass
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
