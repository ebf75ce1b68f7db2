"""Command line: ``quasiu describe | test | simulate``.

Exit codes: 0 success, 2 data error, 3 configuration error, 4 degenerate
statistic. A JSON config file may supply any option; command-line flags
take precedence. A previous ``report.json`` works as a config too, since
its ``config`` entry is picked up.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__
from .appendix import (BvnModel, Hypothesis, case_a_grid, case_b_grid, simulate_cohort,
                       theta_table, verify_h1_direction)
from .cohort import GroupScheme, IngestConfig, ingest, write_cohort
from .errors import ConfigError, QuasiUError
from .pipeline import CHIBAR_DRAWS, run_test, write_describe_outputs, write_test_outputs
from .quasi import DEFAULT_N_MIN
from .resampling import ResamplePlan, ResampleScheme

DEFAULTS = {
    "scheme": "sex=F,M;school=Pu,Pr",
    "contrast": None,
    "replicates": 999,
    "seed": 0,
    "threads": 1,
    "out": "out",
    "n_min": DEFAULT_N_MIN,
    "resample": ResampleScheme.PERMUTE_LABELS.value,
    "strata": ["entry_year"],
    "chibar_draws": CHIBAR_DRAWS,
    "dump_replicates": False,
    "year_min": None,
    "year_max": None,
    "ees_step": 1.0,
    # simulate
    "model": None,
    "n_per_group": 100,
    "years": 1,
    "subjects": 10,
    "hypothesis": "H1",
    "grid": None,
}

# options that never change any number in the outputs
_UNREPORTED = {"threads", "out", "config"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with option values (flags override)")
    p.add_argument("--out", help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")


def _data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--students", help="students.csv")
    p.add_argument("--grades", help="grades.csv")
    p.add_argument("--scheme", help='group factors, e.g. "sex=F,M;school=Pu,Pr"')
    p.add_argument("--year-min", type=int, dest="year_min")
    p.add_argument("--year-max", type=int, dest="year_max")
    p.add_argument("--ees-step", type=float, dest="ees_step")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="quasiu", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"quasiu {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    d = sub.add_parser("describe", help="group-by-year counts and GPA concordance tables")
    _data(d)
    _common(d)

    t = sub.add_parser("test", help="quasi-U contrast tests with permutation calibration")
    _data(t)
    _common(t)
    t.add_argument("--contrast", action="append",
                   help="h01, h02, h03 or a JSON matrix file; repeatable (default: all built-ins)")
    t.add_argument("--replicates", type=int, help="number of resampling replicates R (default 999)")
    t.add_argument("--threads", type=int, help="worker threads; results do not depend on it")
    t.add_argument("--n-min", type=int, dest="n_min", help="small-cell threshold (default 5)")
    t.add_argument("--resample", choices=[s.value for s in ResampleScheme])
    t.add_argument("--strata", action="append", help="stratification key (default entry_year)")
    t.add_argument("--chibar-draws", type=int, dest="chibar_draws")
    t.add_argument("--dump-replicates", action="store_true", default=None, dest="dump_replicates",
                   help="also write every replicate's B and statistics")

    s = sub.add_parser("simulate", help="synthetic cohort and analytic theta table")
    _common(s)
    s.add_argument("--model", help="model JSON file (case, rho1, rho2, mu, mu_star, sigma1..4)")
    s.add_argument("--case", choices=["A", "B"])
    s.add_argument("--rho", type=float)
    s.add_argument("--rho1", type=float)
    s.add_argument("--rho2", type=float)
    s.add_argument("--mu", type=float)
    s.add_argument("--mu-star", type=float, dest="mu_star")
    s.add_argument("--scheme", help="group factors (default: group=1,2)")
    s.add_argument("--n-per-group", type=int, dest="n_per_group")
    s.add_argument("--years", type=int)
    s.add_argument("--subjects", type=int)
    s.add_argument("--hypothesis", choices=["H0", "H1"])
    s.add_argument("--grid", choices=["A", "B"], help="also write the H1-direction sweep over a model grid")
    return parser


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        data = data["config"]
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (in increasing priority)."""
    cfg = dict(DEFAULTS)
    if args.command == "simulate":
        cfg["scheme"] = "group=1,2"
    cfg.update(_load_config(getattr(args, "config", None)))
    for k, v in vars(args).items():
        if v is not None and k not in ("command", "config"):
            cfg[k] = v
    if args.command == "simulate":
        model = dict(cfg.get("model") or {}) if not isinstance(cfg.get("model"), str) else \
            _load_config(cfg["model"])
        for k in ("case", "rho", "rho1", "rho2", "mu", "mu_star"):
            if cfg.get(k) is not None:
                model[k] = cfg.pop(k)
            else:
                cfg.pop(k, None)
        cfg["model"] = model
    return cfg


def reported_config(cfg: dict, command: str) -> dict:
    keys = {
        "describe": ["students", "grades", "scheme", "year_min", "year_max", "ees_step", "seed"],
        "test": ["students", "grades", "scheme", "year_min", "year_max", "ees_step", "contrast",
                 "replicates", "seed", "n_min", "resample", "strata", "chibar_draws", "dump_replicates"],
        "simulate": ["model", "scheme", "n_per_group", "years", "subjects", "hypothesis", "seed", "grid"],
    }[command]
    out = {"command": command}
    out.update({k: cfg.get(k) for k in keys if k not in _UNREPORTED})
    return out


def _load_dataset(cfg: dict):
    if not cfg.get("students") or not cfg.get("grades"):
        raise ConfigError("--students and --grades are required")
    for k in ("students", "grades"):
        if not Path(cfg[k]).is_file():
            raise ConfigError(f"{k} file not found: {cfg[k]}")
    scheme = GroupScheme.parse(cfg["scheme"])
    icfg = IngestConfig(cfg.get("year_min"), cfg.get("year_max"), float(cfg.get("ees_step") or 1.0))
    return ingest(cfg["students"], cfg["grades"], scheme, icfg)


def cmd_describe(cfg: dict) -> dict:
    ds = _load_dataset(cfg)
    out = Path(cfg["out"])
    d = write_describe_outputs(ds, out)
    return d


def cmd_test(cfg: dict) -> dict:
    ds = _load_dataset(cfg)
    strata = cfg.get("strata") or ["entry_year"]
    if isinstance(strata, str):
        strata = [strata]
    try:
        plan = ResamplePlan(cfg["resample"], tuple(strata), int(cfg["replicates"]), int(cfg["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    threads = int(cfg.get("threads") or 1)
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    run = run_test(ds, cfg.get("contrast"), plan, int(cfg["n_min"]), threads, int(cfg["chibar_draws"]))
    return write_test_outputs(run, reported_config(cfg, "test"), Path(cfg["out"]),
                              bool(cfg.get("dump_replicates")))


def cmd_simulate(cfg: dict) -> dict:
    model_d = dict(cfg["model"])
    if "case" not in model_d:
        raise ConfigError("simulate needs a model: --model FILE or --case with its parameters")
    if model_d.get("case") == "A" and "rho" not in model_d and "rho1" in model_d:
        model_d.setdefault("rho2", model_d["rho1"])
    model = BvnModel.from_dict(model_d)
    scheme = GroupScheme.parse(cfg["scheme"])
    ds = simulate_cohort(model, int(cfg["n_per_group"]), int(cfg["years"]), int(cfg["subjects"]),
                         int(cfg["seed"]), scheme, Hypothesis(cfg["hypothesis"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_cohort(ds, out / "students.csv", out / "grades.csv")
    rows = theta_table(model)
    cols = ["hypothesis", "theta11", "theta22", "theta12", "contrast"]
    with open(out / "theta.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["hypothesis"], *(repr(float(r[c])) for c in cols[1:])])
    summary = {"tool": "quasiu", "version": __version__,
               "config": reported_config({**cfg, "model": model.to_dict()}, "simulate"),
               "theta": rows, "students": ds.n_students, "cells": len(ds.cells)}
    if cfg.get("grid"):
        grid = case_a_grid(mu_star=model.mu_star) if cfg["grid"] == "A" else case_b_grid()
        rep = verify_h1_direction(grid)
        gcols = ["case", "rho1", "rho2", "mu_star", "mu", "contrast_H1", "contrast_H0"]
        with open(out / "grid.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(gcols)
            for r in rep.rows():
                w.writerow([r[c] if isinstance(r[c], str) else repr(float(r[c])) for c in gcols])
        summary["grid"] = {"case": cfg["grid"], "points": len(grid), "min_contrast": rep.min_contrast,
                           "passed": rep.passed}
    (out / "simulate.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


COMMANDS = {"describe": cmd_describe, "test": cmd_test, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return ConfigError.exit_code
        cfg = resolve(args)
        result = COMMANDS[args.command](cfg)
    except QuasiUError as exc:
        print(f"quasiu: error: {exc}", file=sys.stderr)
        return exc.exit_code
    if args.command == "test":
        for t in result["tests"]:
            print(f"{t['contrast']}: statistic={t['statistic']:.6g} p={t['p_value']:.4g} rank={t['rank']}")
    print(f"wrote {cfg['out']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
