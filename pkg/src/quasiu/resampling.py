"""Permutation and bootstrap replicates with per-replicate seeding.

Replicate ``r`` draws from ``SeedSequence(master_seed, spawn_key=(r,))``,
so any replicate can be recomputed alone and results do not depend on how
replicates are split across workers.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cohort import Dataset, GradeRecord, StudentRecord
from .errors import ConfigError, DataError
from .quasi import DEFAULT_N_MIN, KernelCache, batch_b, onehot_weights

BLOCK = 64


class ResampleScheme(str, enum.Enum):
    PERMUTE_LABELS = "PERMUTE_LABELS"
    BOOTSTRAP_STUDENTS = "BOOTSTRAP_STUDENTS"


@dataclass(frozen=True)
class ResamplePlan:
    scheme: ResampleScheme = ResampleScheme.PERMUTE_LABELS
    strata: tuple[str, ...] = ("entry_year",)
    R: int = 999
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", ResampleScheme(self.scheme))
        object.__setattr__(self, "strata", tuple(self.strata))
        if self.R < 1:
            raise ConfigError("R must be at least 1")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {"scheme": self.scheme.value, "strata": list(self.strata),
                "R": self.R, "master_seed": self.master_seed}


class ReplicateError(DataError):
    def __init__(self, replicate: int, exc: Exception):
        self.replicate = replicate
        super().__init__(f"replicate {replicate}: {exc}")


def replicate_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


def strata_keys(ds: Dataset, keys: tuple[str, ...]) -> np.ndarray:
    """Integer stratum id per student (ids follow sorted key order)."""
    cols = []
    factor_pos = {f: i for i, f in enumerate(ds.scheme.factor_names)}
    for k in keys:
        if k == "entry_year":
            cols.append(np.asarray(ds.year))
        elif k in factor_pos:
            pos = factor_pos[k]
            lv = [ds.scheme.groups[g][pos] for g in range(ds.G)]
            order = {v: i for i, v in enumerate(sorted(set(lv)))}
            cols.append(np.array([order[lv[g]] for g in ds.group]))
        else:
            raise ConfigError(f"unknown stratum key {k!r}")
    if not cols:
        return np.zeros(ds.n_students, dtype=np.int64)
    _, sid = np.unique(np.stack(cols, axis=1), axis=0, return_inverse=True)
    return sid.reshape(-1)


def _strata_members(ds: Dataset, keys) -> list[np.ndarray]:
    sid = strata_keys(ds, keys)
    return [np.flatnonzero(sid == s) for s in range(int(sid.max()) + 1 if len(sid) else 0)]


def plan_diagnostics(ds: Dataset, plan: ResamplePlan) -> dict:
    members = _strata_members(ds, plan.strata)
    noop = sum(1 for m in members if len(np.unique(ds.group[m])) < 2)
    return {"strata": len(members), "single_group_strata": noop}


def permuted_labels(ds: Dataset, plan: ResamplePlan, index: int, _members=None) -> np.ndarray:
    members = _members if _members is not None else _strata_members(ds, plan.strata)
    rng = replicate_rng(plan.master_seed, index)
    labels = np.array(ds.group)
    for m in members:
        labels[m] = labels[m][rng.permutation(len(m))]
    return labels


def permute_labels(ds: Dataset, plan: ResamplePlan, index: int) -> Dataset:
    """Dataset view with group labels shuffled within each stratum."""
    return ds.with_groups(permuted_labels(ds, plan, index))


def bootstrap_counts(ds: Dataset, plan: ResamplePlan, index: int, _members=None) -> np.ndarray:
    """Multiplicity of each student, resampling within group x stratum."""
    members = _members if _members is not None else _bootstrap_members(ds, plan)
    rng = replicate_rng(plan.master_seed, index)
    counts = np.zeros(ds.n_students, dtype=np.int64)
    for m in members:
        draw = rng.integers(0, len(m), size=len(m))
        counts[m] += np.bincount(draw, minlength=len(m))
    return counts


def _bootstrap_members(ds, plan):
    sid = strata_keys(ds, plan.strata) * ds.G + np.asarray(ds.group)
    return [np.flatnonzero(sid == s) for s in np.unique(sid)]


def bootstrap_view(ds: Dataset, plan: ResamplePlan, index: int) -> Dataset:
    """Materialized bootstrap sample; copies get ids ``<id>#<k>``."""
    counts = bootstrap_counts(ds, plan, index)
    by_student: dict[str, list[GradeRecord]] = {}
    for gr in ds.grades:
        by_student.setdefault(gr.student_id, []).append(gr)
    students, grades = [], []
    for i, s in enumerate(ds.students):
        labels = ds.scheme.groups[ds.group[i]]
        for k in range(counts[i]):
            sid = f"{s.student_id}#{k}"
            students.append(StudentRecord(sid, s.entry_year, labels, s.ees_raw, s.ees_discrete, s.gpa))
            grades.extend(GradeRecord(sid, g.subject_id, g.grade_raw, g.grade_discrete)
                          for g in by_student.get(s.student_id, ()))
    return Dataset.from_records(ds.scheme, students, grades)


def replicate_view(ds: Dataset, plan: ResamplePlan, index: int) -> Dataset:
    if plan.scheme is ResampleScheme.PERMUTE_LABELS:
        return permute_labels(ds, plan, index)
    return bootstrap_view(ds, plan, index)


def replicate_weights(ds: Dataset, plan: ResamplePlan, indices) -> np.ndarray:
    """(N, len(indices), G) student-by-group multiplicities."""
    indices = list(indices)
    if plan.scheme is ResampleScheme.PERMUTE_LABELS:
        members = _strata_members(ds, plan.strata)
        labels = np.stack([permuted_labels(ds, plan, r, members) for r in indices])
        return onehot_weights(labels, ds.G)
    members = _bootstrap_members(ds, plan)
    W = np.zeros((ds.n_students, len(indices), ds.G))
    rows = np.arange(ds.n_students)
    for j, r in enumerate(indices):
        W[rows, j, ds.group] = bootstrap_counts(ds, plan, r, members)
    return W


@dataclass
class ReplicateB:
    """Replicate B vectors (R, G*) with their large/small split."""

    values: np.ndarray
    large: np.ndarray
    small: np.ndarray
    n_cells: np.ndarray


def replicate_b(ds: Dataset, plan: ResamplePlan, threads: int = 1, n_min: int = DEFAULT_N_MIN,
                block: int = BLOCK, indices=None) -> ReplicateB:
    """B vectors of every replicate via the batched kernel engine."""
    indices = list(range(plan.R)) if indices is None else list(indices)
    cache = KernelCache(ds)
    blocks = [indices[i:i + block] for i in range(0, len(indices), block)]

    def work(idx):
        return batch_b(ds, replicate_weights(ds, plan, idx), n_min, cache)

    if threads > 1 and len(blocks) > 1:
        # warm the cache serially so workers only read it
        for c in range(len(ds.cells)):
            cache.get(c)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    if not parts:
        P = ds.scheme.n_pairs
        empty = np.zeros((0, P))
        return ReplicateB(empty, empty, empty, np.zeros((0, P), np.int64))
    return ReplicateB(np.concatenate([p.total for p in parts]),
                      np.concatenate([p.large for p in parts]),
                      np.concatenate([p.small for p in parts]),
                      np.concatenate([p.n_cells for p in parts]))


def run_replicates(ds: Dataset, plan: ResamplePlan, pipeline: Callable[[Dataset], object] | None = None,
                   threads: int = 1, n_min: int = DEFAULT_N_MIN) -> list:
    """Apply ``pipeline`` to every replicate view, in replicate order.

    Without a pipeline the batched engine returns the replicate B vectors.
    """
    if pipeline is None:
        return list(replicate_b(ds, plan, threads, n_min).values)

    def one(r):
        try:
            return pipeline(replicate_view(ds, plan, r))
        except Exception as exc:  # noqa: BLE001 - re-raised with the index
            raise ReplicateError(r, exc) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(plan.R)))
    return [one(r) for r in range(plan.R)]
