"""End-to-end test runs and their on-disk reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import Dataset, GroupScheme, gpa_concordance_table
from .errors import ConfigError, DegenerateStatisticError, MissingPairError
from .inference import (BUILTIN_CONTRASTS, ContrastSpec, Reference, Sidedness, TestResult,
                        UipGeometry, apply_contrast, chibar_weights, contrast_rows,
                        covariance_from_replicates, pvalue_chibar, pvalue_chisq,
                        pvalue_permutation, uip_batch)
from .quasi import DEFAULT_N_MIN, GroupPairVector, KernelCache, aggregate_b, write_cell_audit
from .resampling import ReplicateB, ResamplePlan, ResampleScheme, plan_diagnostics, replicate_b

CHIBAR_DRAWS = 10**6
HIST_BINS = 40
# spawn-key prefix for chi-bar draws; replicate streams use one-element keys
_CHIBAR_KEY = 0x43484942


def resolve_contrasts(names, scheme: GroupScheme) -> list[ContrastSpec]:
    """Built-in names or JSON files; defaults to h01-h03 for four groups."""
    if not names:
        if scheme.G != 4:
            raise ConfigError("built-in contrasts need 4 groups; pass --contrast with a matrix file")
        names = ["h01", "h02", "h03"]
    out = []
    for n in names:
        c = BUILTIN_CONTRASTS.get(n) if isinstance(n, str) else None
        if c is None:
            if isinstance(n, ContrastSpec):
                c = n
            elif isinstance(n, dict):
                c = ContrastSpec.from_dict(n)
            else:
                c = ContrastSpec.load(n)
        if c.matrix.shape[1] != scheme.n_pairs:
            raise ConfigError(f"contrast {c.name!r} has {c.matrix.shape[1]} columns; "
                              f"the scheme has {scheme.n_pairs} group pairs")
        out.append(c)
    names_seen = [c.name for c in out]
    if len(set(names_seen)) != len(names_seen):
        raise ConfigError(f"duplicate contrast names: {names_seen}")
    return out


def chibar_seed(master_seed: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(_CHIBAR_KEY, k))


@dataclass
class TestRun:
    observed: GroupPairVector
    replicates: ReplicateB
    results: list[TestResult]
    plan: ResamplePlan
    n_min: int
    diagnostics: dict = field(default_factory=dict)

    __test__ = False


def _check_replicates(reps: ReplicateB, c: ContrastSpec, scheme: GroupScheme):
    used = np.any(c.matrix != 0, axis=0)
    bad = (reps.n_cells == 0) & used[None, :]
    if bad.any():
        r, p = np.argwhere(bad)[0]
        raise MissingPairError(scheme.pairs[p], scheme.pair_name(p), replicate=int(r))


def evaluate_contrast(c: ContrastSpec, observed: GroupPairVector, reps: ReplicateB,
                      master_seed: int = 0, k: int = 0, chibar_draws: int = CHIBAR_DRAWS,
                      centered: bool = False) -> TestResult:
    """Statistic, covariance and p-values of one contrast.

    The covariance of T is estimated from the replicates, which absorbs the
    sample-size scaling of the statistic. Permutation replicates are draws
    under the null as they stand. Bootstrap replicates scatter around the
    observed T, so with ``centered`` they are shifted to T* - T before the
    replicate statistics are formed.
    """
    T = apply_contrast(observed, c)
    _check_replicates(reps, c, observed.scheme)
    Tr = contrast_rows(np.where(np.isnan(reps.values), 0.0, reps.values), c)
    if centered:
        Tr = Tr - T
    ref = Reference.BOOTSTRAP if centered else Reference.PERMUTATION
    cov = covariance_from_replicates(Tr)
    if cov.degenerate:
        if np.any(T != 0):
            raise DegenerateStatisticError(
                f"contrast {c.name}: replicate covariance has rank 0 but T is nonzero")
        return TestResult(c, T, 0.0, ref, 1.0, 0, cov, np.zeros(len(Tr)), degenerate=True)
    geo = UipGeometry(cov) if c.sidedness is Sidedness.ONE_SIDED_POSITIVE else None
    L_obs = float(uip_batch(T[None, :], cov, c.sidedness, geo)[0][0])
    L_rep, _ = uip_batch(Tr, cov, c.sidedness, geo)
    p_perm = pvalue_permutation(L_obs, L_rep)
    res = TestResult(c, T, L_obs, ref, p_perm, cov.rank, cov, L_rep)
    if c.sidedness is Sidedness.ONE_SIDED_POSITIVE:
        w = chibar_weights(cov, chibar_draws, chibar_seed(master_seed, k))
        res.chibar = w
        res.p_chibar = pvalue_chibar(L_obs, w)
    else:
        res.p_chisq = pvalue_chisq(L_obs, cov.rank)
    return res


def run_test(ds: Dataset, contrasts, plan: ResamplePlan, n_min: int = DEFAULT_N_MIN,
             threads: int = 1, chibar_draws: int = CHIBAR_DRAWS) -> TestRun:
    contrasts = resolve_contrasts(contrasts, ds.scheme)
    cache = KernelCache(ds)
    observed = aggregate_b(ds, n_min, cache)
    for c in contrasts:
        apply_contrast(observed, c)  # fail fast on missing pairs
    reps = replicate_b(ds, plan, threads, n_min)
    centered = plan.scheme is ResampleScheme.BOOTSTRAP_STUDENTS
    results = [evaluate_contrast(c, observed, reps, plan.master_seed, k, chibar_draws, centered)
               for k, c in enumerate(contrasts)]
    return TestRun(observed, reps, results, plan, n_min, plan_diagnostics(ds, plan))


# ------------------------------------------------------------------ writing

def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def histogram_rows(values, observed=None, bins: int = HIST_BINS):
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    lo, hi = (float(v.min()), float(v.max())) if v.size else (0.0, 1.0)
    if observed is not None and np.isfinite(observed):
        lo, hi = min(lo, observed), max(hi, observed)
    if not np.all(np.diff(np.linspace(lo, hi, bins + 1)) > 0):
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return [(repr(float(edges[i])), repr(float(edges[i + 1])), int(counts[i])) for i in range(bins)]


def write_histogram(path: Path, values, observed=None, bins: int = HIST_BINS) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        w.writerows(histogram_rows(values, observed, bins))


def build_report(run: TestRun, config: dict) -> dict:
    scheme = run.observed.scheme
    return {
        "tool": "quasiu",
        "version": __version__,
        "config": config,
        "plan": run.plan.to_dict(),
        "n_min": run.n_min,
        "groups": [scheme.group_name(g) for g in range(scheme.G)],
        "observed": run.observed.to_dict(),
        "resampling": run.diagnostics,
        "tests": [r.to_dict() for r in run.results],
    }


def write_test_outputs(run: TestRun, config: dict, out: Path, dump_replicates: bool = False) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(run, config)
    _json_dump(report, out / "report.json")
    write_cell_audit(run.observed, out / "cells.csv")
    scheme = run.observed.scheme
    for p in range(scheme.n_pairs):
        write_histogram(out / f"hist_B{scheme.pair_name(p)}.csv", run.replicates.values[:, p],
                        run.observed.values[p])
    for r in run.results:
        write_histogram(out / f"hist_L_{r.contrast.name}.csv", r.replicate_statistics, r.statistic)
    if dump_replicates:
        with open(out / "replicates.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate", *(f"B{scheme.pair_name(p)}" for p in range(scheme.n_pairs)),
                        *(f"L_{r.contrast.name}" for r in run.results)])
            for i in range(run.plan.R):
                w.writerow([i, *(repr(float(x)) for x in run.replicates.values[i]),
                            *(repr(float(r.replicate_statistics[i])) for r in run.results)])
    return report


def describe(ds: Dataset) -> dict:
    idx = ds.index
    scheme = ds.scheme
    counts = {str(a): {scheme.group_name(g): int(idx.n_ag[a][g]) for g in range(ds.G)}
              for a in idx.years}
    has_gpa = bool(np.isfinite(ds.gpa).any())
    tables = []
    for p, (g, h) in enumerate(scheme.pairs):
        entry = {"pair": scheme.pair_name(p), "g": scheme.group_name(g), "g_prime": scheme.group_name(h)}
        if has_gpa and (ds.group == g).any() and (ds.group == h).any():
            entry.update(gpa_concordance_table(ds, g, h).to_dict())
        else:
            entry["available"] = False
        tables.append(entry)
    return {
        "scheme": scheme.spec(),
        "groups": [scheme.group_name(g) for g in range(ds.G)],
        "counts": counts,
        "students": ds.n_students,
        "cells": len(ds.cells),
        "subjects_per_year": {str(a): len(idx.subjects[a]) for a in idx.years},
        "gpa_available": has_gpa,
        "concordance": tables,
        "ingest": ds.report.to_dict() if ds.report is not None else None,
    }


def write_describe_outputs(ds: Dataset, out: Path) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    d = describe(ds)
    _json_dump(d, out / "describe.json")
    with open(out / "counts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entry_year", "group", "n"])
        for a, row in d["counts"].items():
            for grp, n in row.items():
                w.writerow([a, grp, n])
    cols = ["pair", "g", "g_prime", "available", "pairs", "untied_pairs", "C1", "C2", "D1", "D2", "C", "D"]
    with open(out / "concordance.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for t in d["concordance"]:
            w.writerow(["" if t.get(k) is None else (repr(t[k]) if isinstance(t[k], float) else t[k])
                        for k in cols])
    return d
