"""Command-line interface: ``covshift-el <subcommand> ...``.

Exit codes: 0 success, 1 user error (bad flags, config, files), 2 numeric failure.
Every run writes a manifest next to its outputs; ``covshift-el --replay MANIFEST``
re-executes the recorded command and reproduces the outputs byte for byte.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import cond_density as cd
from . import data
from . import density_ratio as dr
from . import divergence as div
from . import el
from . import funclass as fc
from . import harness
from . import moments as mom
from . import rng as rngmod
from .errors import ConfigurationError, ContractError, NumericError, UserError

log = logging.getLogger("covshift_el")

THREADS_ENV = "COVSHIFT_EL_THREADS"
CONFIG_SECTIONS = ("ratio", "cde", "el")


# --- helpers ------------------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(harness._jsonable(obj), indent=2, sort_keys=True) + "\n"


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_toml(path) -> dict:
    import tomli
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed TOML in {path}: {exc}") from None


def load_run_config(path) -> dict:
    """Parse an optional run config with [ratio], [cde] and [el] tables (strict keys)."""
    raw = _load_toml(path) if path else {}
    extra = set(raw) - set(CONFIG_SECTIONS)
    if extra:
        raise ConfigurationError(f"unknown config section(s): {sorted(extra)}")
    out = {}
    for key in ("ratio", "cde"):
        try:
            out[key] = fc.FunctionClassConfig.from_dict(raw.get(key, {}))
        except ConfigurationError as exc:
            raise ConfigurationError(f"[{key}] {exc}") from None
    try:
        out["el"] = el.ELConfig.from_dict(raw.get("el", {}))
    except ConfigurationError as exc:
        raise ConfigurationError(f"[el] {exc}") from None
    return out


def _config_dict(cfg: dict) -> dict:
    return {"ratio": cfg["ratio"].to_dict(), "cde": cfg["cde"].to_dict(),
            "el": {f.name: getattr(cfg["el"], f.name) for f in fields(cfg["el"])}}


def _manifest(args, argv, resolved: dict, out_path) -> None:
    blob = json.dumps(harness._jsonable(resolved), sort_keys=True).encode()
    doc = {"tool": "covshift-el", "version": __version__, "command": args.command, "argv": list(argv),
           "config_hash": hashlib.sha256(blob).hexdigest(), "seed": getattr(args, "seed", None)}
    if getattr(args, "data", None):
        doc["data_sha256"] = _sha256_file(args.data)
    _write(out_path, _dumps(doc))


def _manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".manifest.json")


def _load_data(path) -> data.Dataset:
    if not Path(path).exists():
        raise ConfigurationError(f"data file not found: {path}")
    return data.load_csv(path)


# --- subcommands ---------------------------------------------------------------------

def cmd_dr_fit(args, argv) -> int:
    cfg = load_run_config(args.config)
    ds = _load_data(args.data)
    gen = rngmod.stream(args.seed, rngmod.PURPOSE_RATIO)
    if args.method == "ddr":
        model = dr.fit_ddr(ds, args.divergence, cfg["ratio"], rng=gen)
    elif args.method == "ks":
        model = dr.fit_kernel_smoothing(ds, rng=gen)
    else:
        model = dr.fit_prob_classification(ds)
    metrics = {"method": args.method, "divergence": model.spec.id, "objective": model.objective_value,
               "divergence_estimate": model.divergence_estimate, "n": ds.n, "m": ds.m, "d": ds.d,
               "source_mean_ratio": float(np.mean(model(ds.source_x)))}
    if args.oracle:
        oracle = lambda x: data.true_density_ratio(args.oracle, x)
        metrics["empirical_l2_error"] = dr.empirical_l2_error(model, oracle, ds.x_all)
        metrics["source_mse"] = dr.source_mse(model, oracle, ds.source_x)
    _write(args.out, _dumps(model.to_dict()))
    metrics_path = args.metrics or Path(args.out).with_name(Path(args.out).stem + ".metrics.json")
    _write(metrics_path, _dumps(metrics))
    _manifest(args, argv, {"config": _config_dict(cfg), "method": args.method, "divergence": args.divergence},
              _manifest_path(args.out))
    print(json.dumps(harness._jsonable(metrics), sort_keys=True))
    return 0


def cmd_cde_fit(args, argv) -> int:
    cfg = load_run_config(args.config)
    ds = _load_data(args.data)
    model = cd.fit_conditional_density(ds, args.divergence, cfg["cde"], rng=rngmod.stream(args.seed, rngmod.PURPOSE_CDE))
    _write(args.out, _dumps(model.to_dict()))
    summary = {"n": ds.n, "d": ds.d, "grid_points": int(model.y_grid.size),
               "aux": model.aux.to_dict(), "objective": model.ratio_fit.objective_value}
    if args.draws_csv:
        kappa = args.kappa or max(1, ds.N // 2)
        imp = cd.impute(model, ds.x_all, kappa, seed=args.seed)
        header = "row,role," + ",".join(f"draw{k + 1}" for k in range(kappa))
        lines = [header] + [f"{i + 1},{'source' if i < ds.n else 'target'}," + ",".join(repr(float(v)) for v in row)
                            for i, row in enumerate(imp.draws)]
        _write(args.draws_csv, "\n".join(lines) + "\n")
        summary["kappa"] = kappa
    _manifest(args, argv, {"config": _config_dict(cfg), "divergence": args.divergence, "kappa": args.kappa},
              _manifest_path(args.out))
    print(json.dumps(harness._jsonable(summary), sort_keys=True))
    return 0


def _fit_nuisances(ds, method, cfg, seed, divergence, kappa):
    r_hat = imp = None
    if method in ("drw", "drw-mi"):
        r_hat = dr.fit_ddr(ds, divergence, cfg["ratio"], rng=rngmod.stream(seed, rngmod.PURPOSE_RATIO))
    if method in ("mi", "drw-mi"):
        cm = cd.fit_conditional_density(ds, divergence, cfg["cde"], rng=rngmod.stream(seed, rngmod.PURPOSE_CDE))
        imp = cd.impute(cm, ds.x_all, kappa or max(1, ds.N // 2), seed=seed)
    return r_hat, imp


def _estimate(ds, method, g, cfg, seed, divergence, kappa):
    r_hat, imp = _fit_nuisances(ds, method, cfg, seed, divergence, kappa)
    if method == "drw":
        return el.drw_estimate(ds, r_hat, g, cfg["el"]), r_hat
    if method == "mi":
        return el.mi_estimate(ds, imp, g, cfg["el"]), r_hat
    return el.maximize_el(ds, mom.Nuisances(r_hat, imp), g, cfg["el"]), r_hat


def cmd_estimate(args, argv) -> int:
    cfg = load_run_config(args.config)
    g = mom.parse_estimand(args.estimand)
    div.get(args.divergence)
    if args.ci == "wilks" and args.method != "drw-mi":
        raise ContractError("Wilks intervals are only calibrated for --method drw-mi; use --ci bootstrap")
    ds = _load_data(args.data)
    res, r_hat = _estimate(ds, args.method, g, cfg, args.seed, args.divergence, args.kappa)
    out = res.to_dict()
    out.update({"estimand": g.id, "method": args.method, "n": ds.n, "m": ds.m, "d": ds.d, "tau_hat": ds.tau_hat,
                "seed": args.seed, "level": args.level, "ci_method": args.ci})
    if args.ci == "wilks":
        lo, hi = el.wilks_ci(res, args.level, cfg["el"])
        grid = np.linspace(lo - 0.5 * (hi - lo), hi + 0.5 * (hi - lo), 21)
        out["r_n_samples"] = [[float(t), res.r_n_at(t)] for t in grid]
    else:
        def est(bds, b):
            return _estimate(bds, args.method, g, cfg, rngmod.child_seed(rngmod.stream(args.seed, b)),
                             args.divergence, args.kappa)[0].theta_hat[0]

        (lo, hi), draws, failures = el.bootstrap_ci(est, ds, args.bootstrap_b, args.level, seed=args.seed)
        out["bootstrap_failures"] = len(failures)
    out["ci"] = [lo, hi]
    if r_hat is not None:
        out["divergence_estimate"] = r_hat.divergence_estimate
    _write(args.out, _dumps(out))
    _manifest(args, argv, {"config": _config_dict(cfg), "estimand": g.id, "method": args.method,
                           "ci": args.ci, "level": args.level, "kappa": args.kappa,
                           "bootstrap_b": args.bootstrap_b, "divergence": args.divergence},
              _manifest_path(args.out))
    print(f"theta_hat = {out['theta_hat'][0]:.6f}  {int(round(100 * args.level))}% CI [{lo:.6f}, {hi:.6f}]")
    return 0


def cmd_simulate(args, argv) -> int:
    raw = _load_toml(args.plan)
    plan = harness.ExperimentPlan.from_dict(raw)
    if args.replications:
        plan = plan.with_(replications=args.replications)
    if args.seed is not None:
        plan = plan.with_(master_seed=args.seed)
    workers = args.threads or int(os.environ.get(THREADS_ENV, "0") or 0) or plan.workers
    plan = plan.with_(workers=max(1, workers))
    report = harness.run_plan(plan, progress=lambda k, t: log.info("replication %d/%d", k, t))
    out = Path(args.out_dir)
    _write(out / "report.json", report.to_json() + "\n")
    _write(out / "table.csv", harness.report_table(report, "csv"))
    _write(out / "table.txt", harness.report_table(report, "text"))
    _write(out / "replications.csv", harness.records_csv(report))
    resolved = report.plan | {"workers": None}
    _manifest(args, argv, resolved, out / "manifest.json")
    print(harness.report_table(report, "text"), end="")
    return 0


def cmd_selfcheck(args, argv) -> int:
    from .selfcheck import run_checks
    results = run_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}{'' if ok else '  ' + detail}")
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 2


# --- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covshift-el", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker processes for simulate (env {THREADS_ENV})")
    p.add_argument("--replay", metavar="MANIFEST", help="re-run the command recorded in a manifest")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("simulate", help="run a Monte-Carlo plan")
    s.add_argument("--plan", required=True, help="TOML experiment plan")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--replications", type=int, default=None)
    s.add_argument("--seed", type=int, default=None, help="override the plan's master seed")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="point estimate and confidence interval from a CSV")
    e.add_argument("--data", required=True)
    e.add_argument("--estimand", default="mean", help="mean | quantile:<alpha>")
    e.add_argument("--method", default="drw-mi", choices=["drw-mi", "drw", "mi"])
    e.add_argument("--ci", default="wilks", choices=["wilks", "bootstrap"])
    e.add_argument("--level", type=float, default=0.95)
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None, help="TOML with [ratio], [cde], [el] tables")
    e.add_argument("--divergence", default="kl", choices=div.names())
    e.add_argument("--kappa", type=int, default=None, help="imputations per row (default N/2)")
    e.add_argument("--bootstrap-b", type=int, default=200)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_estimate)

    d = sub.add_parser("dr-fit", help="fit a density ratio")
    d.add_argument("--method", default="ddr", choices=["ddr", "ks", "pc"])
    d.add_argument("--divergence", default="kl", choices=div.names())
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--metrics", default=None)
    d.add_argument("--oracle", default=None, choices=list(data.SETTINGS),
                   help="report errors against a simulation design's true ratio")
    d.add_argument("--config", default=None)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_dr_fit)

    c = sub.add_parser("cde-fit", help="fit a conditional density of y given x")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--divergence", default="kl", choices=div.names())
    c.add_argument("--kappa", type=int, default=None)
    c.add_argument("--draws-csv", default=None, help="also write imputation draws for audit")
    c.add_argument("--config", default=None)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_cde_fit)

    k = sub.add_parser("selfcheck", help="run quick invariant checks")
    k.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.replay:
            try:
                recorded = json.loads(Path(args.replay).read_text())["argv"]
            except (OSError, KeyError, ValueError) as exc:
                raise ConfigurationError(f"cannot read manifest {args.replay}: {exc}") from None
            return main(recorded)
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args, argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
