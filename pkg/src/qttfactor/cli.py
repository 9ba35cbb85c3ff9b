"""Command-line front end: ``qttfactor estimate`` and ``qttfactor simulate``.

Every run writes its outputs and a ``manifest.json`` (resolved config,
package versions, timings) into ``--out``. A JSON file given by
``--config`` supplies defaults; explicit flags win. Exit codes: 0 success,
1 estimation failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
import traceback
from importlib import metadata
from pathlib import Path

import numpy as np

from .inference import bootstrap_qtt, make_block_plan
from .panel import PanelError, load_panel, split_control_treated
from .qtt import estimate_qtt, fit_first_stage, predict_quantile_path
from .presets import PRESETS, run_preset
from .simulate import ESTIMATORS, FAMILIES, DgpSpec, run_mc

__all__ = ["main"]

logger = logging.getLogger("qttfactor")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

ESTIMATE_DEFAULTS = {
    "format": "wide-csv",
    "tau": [0.5],
    "stage1": "iqr",
    "kmax": 8,
    "n_factors": None,
    "bandwidth": 0.5,
    "boot_B": 300,
    "block_pre": None,
    "block_post": None,
    "seed": 0,
    "restarts": 3,
    "jobs": 1,
    "treated": None,
    "T0": None,
    "covariates": None,
}

SIMULATE_DEFAULTS = {
    "family": "baseline",
    "N": 100,
    "T": 200,
    "R": 200,
    "boot_B": 0,
    "estimators": list(ESTIMATORS),
    "tau": [0.1, 0.25, 0.5, 0.75, 0.9],
    "seed": 0,
    "jobs": 1,
    "J": 3,
    "kmax": 8,
    "bandwidth": 0.5,
    "restarts": 3,
    "paper_scale": False,
    "preset": None,
}


class UsageError(Exception):
    pass


def _floats(text):
    try:
        vals = [float(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    return vals


def _names(text):
    return [v for v in str(text).replace(" ", "").split(",") if v]


def _parser():
    p = argparse.ArgumentParser(prog="qttfactor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate QTT curves on a panel file")
    e.add_argument("--config", help="JSON file with default settings")
    e.add_argument("--input", help="panel CSV")
    e.add_argument("--format", choices=["wide-csv", "long-csv"])
    e.add_argument("--tau", type=_floats, help="quantile grid, e.g. 0.1,0.5,0.9")
    e.add_argument("--stage1", choices=["iqr", "isqr"])
    e.add_argument("--kmax", type=int, help="probe rank for rank minimisation")
    e.add_argument("--n-factors", dest="n_factors", type=int, help="fix the rank instead")
    e.add_argument("--bandwidth", type=float)
    e.add_argument("--boot-B", dest="boot_B", type=int, help="bootstrap replicates (0 = none)")
    e.add_argument("--block-pre", dest="block_pre", type=int)
    e.add_argument("--block-post", dest="block_post", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--restarts", type=int)
    e.add_argument("--treated", type=_names, help="treated unit labels (wide format)")
    e.add_argument("--T0", dest="T0", type=int, help="pre-treatment periods (wide format)")
    e.add_argument("--covariates", type=_names, help="series to use as covariates")
    e.add_argument("--out", help="output directory")
    e.add_argument("--jobs", type=int)

    s = sub.add_parser("simulate", help="Monte-Carlo study")
    s.add_argument("--config", help="JSON file with default settings")
    s.add_argument("--family")
    s.add_argument("--N", dest="N", type=int)
    s.add_argument("--T", dest="T", type=int)
    s.add_argument("--R", dest="R", type=int)
    s.add_argument("--boot-B", dest="boot_B", type=int)
    s.add_argument("--estimators", type=_names)
    s.add_argument("--tau", type=_floats)
    s.add_argument("--seed", type=int)
    s.add_argument("--J", dest="J", type=int, help="neighbour radius of the dependent design")
    s.add_argument("--kmax", type=int)
    s.add_argument("--bandwidth", type=float)
    s.add_argument("--restarts", type=int)
    s.add_argument("--paper-scale", dest="paper_scale", action="store_true", default=None,
                   help="R=1000 and B=1000")
    s.add_argument("--preset", choices=sorted(PRESETS), help="reference experiment with a check")
    s.add_argument("--out", help="output directory")
    s.add_argument("--jobs", type=int)
    return p


def _resolve(args, defaults):
    cfg = dict(defaults)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"invalid JSON in {path}: {exc}") from None
        unknown = set(loaded) - set(defaults) - {"input", "out"}
        if unknown:
            raise UsageError(f"unknown config key(s) {sorted(unknown)}")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k in ("config", "command", "verbose") or v is None:
            continue
        cfg[k] = v
    if isinstance(cfg.get("tau"), (int, float)):
        cfg["tau"] = [cfg["tau"]]
    taus = [float(t) for t in cfg["tau"]]
    if any(not 0 < t < 1 for t in taus):
        raise UsageError(f"tau values must lie in (0, 1), got {taus}")
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise UsageError("tau grid must be strictly increasing")
    cfg["tau"] = taus
    if cfg.get("out") is None:
        raise UsageError("--out is required")
    return cfg


def _versions():
    out = {"python": platform.python_version()}
    for pkg in ("qttfactor", "numpy", "scipy", "scikit-learn", "numba", "pandas"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable), encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# estimate


def cmd_estimate(cfg, out):
    timings = {}
    t0 = time.perf_counter()
    if cfg.get("input") is None:
        raise UsageError("--input is required")
    schema = {}
    if cfg.get("treated"):
        schema["treated"] = cfg["treated"]
    if cfg.get("T0") is not None:
        schema["T0"] = cfg["T0"]
    if cfg.get("covariates"):
        schema["covariates"] = cfg["covariates"]
    panel = load_panel(cfg["input"], cfg["format"], schema)
    timings["load"] = time.perf_counter() - t0
    controls = panel.first_stage_block()
    _, treated = split_control_treated(panel)
    d = panel.d
    opts = {"restarts": cfg["restarts"], "seed": cfg["seed"]}
    override = {"block_pre": cfg.get("block_pre"), "block_post": cfg.get("block_post")}
    plan = make_block_plan(panel.T0, panel.T1, override)
    records, curve, paths = [], [], {}
    for tau in cfg["tau"]:
        ts = time.perf_counter()
        fit, sel = fit_first_stage(controls, tau, cfg["stage1"], cfg.get("n_factors"), cfg["kmax"],
                                   cfg["bandwidth"], opts)
        tag = "NQTT" if cfg["stage1"] == "iqr" else "SQTT"
        for k, uid in enumerate(panel.treated_unit_ids):
            est = estimate_qtt(treated[k], d, fit.factors, tau, cfg["stage1"].upper(), tag)
            rec = {"unit": uid, "unit_label": panel.unit_labels[uid - 1],
                   "estimate": est.to_dict(), "objective": fit.objective,
                   "converged": fit.converged}
            if sel is not None:
                rec["rank_selection"] = {"r_hat": sel.r_hat, "k": sel.k,
                                         "sigma_diag": sel.sigma_diag.tolist(),
                                         "threshold": sel.threshold}
            lo = hi = float("nan")
            if cfg["boot_B"] > 0:
                bs = bootstrap_qtt(treated[k], d, fit.factors, tau, cfg["boot_B"], plan,
                                   cfg["seed"], est.delta)
                rec["bootstrap"] = bs.to_dict()
                lo, hi = bs.ci_lower, bs.ci_upper
            records.append(rec)
            curve.append((uid, panel.unit_labels[uid - 1], tau, est.delta, lo, hi))
            paths[(uid, tau)] = predict_quantile_path(est.lambda1, fit.factors)
        timings[f"tau={tau:g}"] = time.perf_counter() - ts
    _write_json(out / "estimates.json", records)
    with open(out / "qtt_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "unit_label", "tau", "delta", "ci_lo", "ci_hi"])
        w.writerows(curve)
    with open(out / "pretrend.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "t", "time", "treated", "y"] + [f"q_{t:g}" for t in cfg["tau"]])
        for k, uid in enumerate(panel.treated_unit_ids):
            for t in range(panel.T):
                w.writerow([uid, t + 1, panel.time_labels[t], int(d[t]), treated[k, t]]
                           + [paths[(uid, tau)][t] for tau in cfg["tau"]])
    return {"timings": timings, "panel": {"N": panel.N, "T": panel.T, "T0": panel.T0,
                                          "treated": list(panel.treated_unit_ids)},
            "block_plan": plan.to_dict()}


# ---------------------------------------------------------------------------
# simulate


def _progress(done, total):
    logger.info("replication %d/%d", done, total)


def cmd_simulate(cfg, out):
    if cfg.get("preset"):
        R = None if cfg.get("R") == SIMULATE_DEFAULTS["R"] else cfg["R"]
        res = run_preset(cfg["preset"], R=R, seed=cfg["seed"], n_jobs=cfg["jobs"],
                         progress=_progress)
        line = f"{'PASS' if res.passed else 'FAIL'} {res.name}: {res.summary}"
        print(line)
        if hasattr(res.report, "to_csv"):
            res.report.to_csv(out / "report.csv")
            res.report.write_raw(out / "raw.jsonl")
        else:
            _write_json(out / "report.json", res.report)
        return {"preset": res.name, "passed": res.passed, "summary": res.summary}, \
            EXIT_OK if res.passed else EXIT_FAIL
    if cfg["family"] not in FAMILIES:
        raise UsageError(f"unknown family {cfg['family']!r}; choose from {list(FAMILIES)}")
    bad = [e for e in cfg["estimators"] if e not in ESTIMATORS]
    if bad:
        raise UsageError(f"unknown estimator(s) {bad}; choose from {list(ESTIMATORS)}")
    R, B = cfg["R"], cfg["boot_B"]
    if cfg.get("paper_scale"):
        R, B = 1000, 1000
    try:
        spec = DgpSpec(cfg["family"], cfg["N"], cfg["T"], cfg["seed"], J=cfg["J"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rep = run_mc(spec, cfg["estimators"], cfg["tau"], R=R, B=B, n_jobs=cfg["jobs"],
                 k_max=cfg["kmax"], bandwidth=cfg["bandwidth"], restarts=cfg["restarts"],
                 progress=_progress)
    rep.to_csv(out / "report.csv")
    rep.write_raw(out / "raw.jsonl")
    invalid = [(c.tau, c.estimator) for c in rep.cells if c.invalid]
    info = {"R": R, "B": B, "seconds": rep.seconds, "metadata": rep.metadata,
            "invalid_cells": invalid}
    return info, EXIT_FAIL if invalid else EXIT_OK


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    defaults = ESTIMATE_DEFAULTS if args.command == "estimate" else SIMULATE_DEFAULTS
    started = time.time()
    out = None
    try:
        cfg = _resolve(args, defaults)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "estimate":
            info, code = cmd_estimate(cfg, out), EXIT_OK
        else:
            info, code = cmd_simulate(cfg, out)
    except (UsageError, FileNotFoundError, PanelError) as exc:
        return _fail(out, EXIT_USAGE, exc)
    except Exception as exc:  # any module failure becomes a structured error
        logger.debug("%s", traceback.format_exc())
        return _fail(out, EXIT_FAIL, exc)
    manifest = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config": cfg,
        "versions": _versions(),
        "started": started,
        "seconds": time.time() - started,
        **info,
    }
    _write_json(out / "manifest.json", manifest)
    return code


def _fail(out, code, exc):
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err), file=sys.stderr)
    if out is not None:
        try:
            _write_json(Path(out) / "error.json", err)
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
