"""Cohort records, discretization, indexing and CSV ingestion.

A :class:`Dataset` is the immutable unit the rest of the package consumes.
Grades are stored internally as integer tenths (0..100) so that ties are
exact; EES values are stored already discretized.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

GRADE_MAX = 10.0
MISSING_TOKENS = frozenset({"", "NA", "na", "NaN", "nan", "null", "NULL"})


# ---------------------------------------------------------------- discretize

def grade_tenths(z: float) -> int:
    """Index k of the 0.1-grid cell containing ``z`` (grid value k/10)."""
    if not (0.0 <= z <= GRADE_MAX):
        raise DataError(f"grade {z!r} outside [0, 10]")
    # rounding to 9 places strips binary noise so 7.45 lands in [7.45, 7.55)
    return int(math.floor(round(z * 10.0, 9) + 0.5))


def discretize_grade(z: float) -> float:
    """Map a raw grade onto {0.0, 0.1, ..., 10.0} with half-open cells.

    [0, 0.05) -> 0.0, [k/10 - 0.05, k/10 + 0.05) -> k/10, [9.95, 10] -> 10.0.
    """
    return grade_tenths(z) / 10.0


def grade_tenths_array(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    bad = ~((z >= 0.0) & (z <= GRADE_MAX))
    if bad.any():
        raise DataError(f"grade {z[bad][0]!r} outside [0, 10]")
    return np.floor(np.round(z * 10.0, 9) + 0.5).astype(np.int64)


def discretize_ees(z: float, step: float = 1.0) -> float:
    """Round an entrance score to the nearest multiple of ``step``, ties up."""
    if not math.isfinite(z):
        raise DataError(f"EES value {z!r} is not finite")
    k = math.floor(round(z / step, 9) + 0.5)
    return float(k * step)


# ------------------------------------------------------------------- schemes

@dataclass(frozen=True)
class GroupScheme:
    """Cross-classification of categorical factors into groups 0..G-1.

    Groups enumerate the cartesian product with the first factor varying
    slowest, so the default scheme gives F-Pu, F-Pr, M-Pu, M-Pr.
    """

    factors: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        if not self.factors:
            raise ConfigError("group scheme needs at least one factor")
        names = [f for f, _ in self.factors]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate factor names in scheme: {names}")
        for name, levels in self.factors:
            if len(levels) == 0 or len(set(levels)) != len(levels):
                raise ConfigError(f"factor {name!r} needs distinct, non-empty levels")

    @classmethod
    def default(cls) -> "GroupScheme":
        return cls((("sex", ("F", "M")), ("school", ("Pu", "Pr"))))

    @classmethod
    def two_groups(cls, name: str = "group", levels=("1", "2")) -> "GroupScheme":
        return cls(((name, tuple(levels)),))

    @classmethod
    def parse(cls, text: str) -> "GroupScheme":
        """Parse ``"sex=F,M;school=Pu,Pr"``."""
        factors = []
        for chunk in text.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            if "=" not in chunk:
                raise ConfigError(f"bad scheme factor {chunk!r}; expected name=l1,l2")
            name, levels = chunk.split("=", 1)
            factors.append((name.strip(), tuple(s.strip() for s in levels.split(","))))
        return cls(tuple(factors))

    def spec(self) -> str:
        return ";".join(f"{n}={','.join(lv)}" for n, lv in self.factors)

    @property
    def factor_names(self) -> tuple[str, ...]:
        return tuple(f for f, _ in self.factors)

    @cached_property
    def groups(self) -> tuple[tuple[str, ...], ...]:
        return tuple(itertools.product(*(lv for _, lv in self.factors)))

    @property
    def G(self) -> int:
        return len(self.groups)

    @cached_property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        return tuple(itertools.combinations(range(self.G), 2))

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @cached_property
    def _lookup(self) -> dict:
        return {labels: g for g, labels in enumerate(self.groups)}

    def group_index(self, labels: Sequence[str]) -> int:
        try:
            return self._lookup[tuple(labels)]
        except KeyError:
            raise DataError(f"unknown group labels {tuple(labels)}") from None

    def group_name(self, g: int) -> str:
        return "-".join(self.groups[g])

    def pair_name(self, p: int) -> str:
        g, h = self.pairs[p]
        return f"{g + 1}{h + 1}"

    def pair_index(self, g: int, h: int) -> int:
        if g > h:
            g, h = h, g
        return self.pairs.index((g, h))


# ------------------------------------------------------------------- records

@dataclass(frozen=True)
class StudentRecord:
    student_id: str
    entry_year: int
    group_labels: tuple[str | None, ...]
    ees_raw: float
    ees_discrete: float
    gpa: float | None = None

    @property
    def complete(self) -> bool:
        return all(lv is not None for lv in self.group_labels)


@dataclass(frozen=True)
class GradeRecord:
    student_id: str
    subject_id: str
    grade_raw: float
    grade_discrete: float


@dataclass(frozen=True)
class IngestConfig:
    year_min: int | None = None
    year_max: int | None = None
    ees_step: float = 1.0

    def __post_init__(self):
        if not self.ees_step > 0:
            raise ConfigError("ees_step must be positive")


@dataclass(frozen=True, eq=False)
class Cell:
    """Students of one entry year with a grade in one subject."""

    year: int
    subject: str
    members: np.ndarray  # dataset student indices, ascending
    grades: np.ndarray   # integer tenths aligned with members

    @property
    def key(self) -> tuple[int, str]:
        return (self.year, self.subject)

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass
class IngestReport:
    students_read: int = 0
    students_included: int = 0
    excluded: dict = field(default_factory=lambda: {"missing_covariate": 0, "missing_ees": 0})
    grades_read: int = 0
    grades_dropped: int = 0
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "students_read": self.students_read,
            "students_included": self.students_included,
            "excluded": dict(self.excluded),
            "grades_read": self.grades_read,
            "grades_dropped_excluded_student": self.grades_dropped,
            "counts_by_year_group": {str(a): dict(c) for a, c in sorted(self.counts.items())},
        }


def _frozen(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CohortIndex:
    """Cell bookkeeping: n_agl, n_ag, n_a, subject lists and memberships."""

    G: int
    years: tuple[int, ...]
    n_ag: dict
    n_a: dict
    n_agl: dict
    subjects: dict
    membership: dict  # (a, l, g) -> dataset indices

    def L_a(self, a: int) -> int:
        return len(self.subjects.get(a, ()))

    @property
    def L(self) -> int:
        return sum(self.L_a(a) for a in self.years)

    def cell_keys(self) -> list[tuple[int, str]]:
        return [(a, l) for a in self.years for l in self.subjects[a]]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable cohort: included students, their grades, and cell layout.

    ``group`` is the working group assignment (index into ``scheme.groups``);
    resampling views replace it without touching the records.
    """

    scheme: GroupScheme
    students: tuple[StudentRecord, ...]
    grades: tuple[GradeRecord, ...]
    group: np.ndarray
    year: np.ndarray
    ees: np.ndarray
    gpa: np.ndarray
    cells: tuple[Cell, ...]
    report: IngestReport | None = None

    @property
    def n_students(self) -> int:
        return len(self.students)

    @property
    def G(self) -> int:
        return self.scheme.G

    def with_groups(self, group) -> "Dataset":
        group = np.asarray(group)
        if group.shape != self.group.shape:
            raise ValueError("group vector has the wrong length")
        return replace(self, group=_frozen(group, np.int64))

    def cell(self, a: int, l: str) -> Cell:
        try:
            return self._cell_map[(a, l)]
        except KeyError:
            raise KeyError(f"no cell for year {a}, subject {l!r}") from None

    @cached_property
    def _cell_map(self) -> dict:
        return {c.key: c for c in self.cells}

    @cached_property
    def index(self) -> CohortIndex:
        G = self.G
        years = tuple(sorted(set(int(y) for y in self.year)))
        n_ag, n_a = {}, {}
        for a in years:
            counts = np.bincount(self.group[self.year == a], minlength=G)
            n_ag[a] = counts
            n_a[a] = int(counts.sum())
        n_agl, subjects, membership = {}, {a: [] for a in years}, {}
        for c in self.cells:
            g_of = self.group[c.members]
            n_agl[c.key] = np.bincount(g_of, minlength=G)
            subjects[c.year].append(c.subject)
            for g in range(G):
                membership[(c.year, c.subject, g)] = c.members[g_of == g]
        return CohortIndex(G, years, n_ag, n_a, n_agl,
                           {a: tuple(s) for a, s in subjects.items()}, membership)

    @classmethod
    def from_records(
        cls,
        scheme: GroupScheme,
        students: Iterable[StudentRecord],
        grades: Iterable[GradeRecord],
        report: IngestReport | None = None,
    ) -> "Dataset":
        """Validate records and build the dataset.

        Students with a missing covariate are excluded (and their grades
        dropped), which is tallied in the returned report.
        """
        report = report or IngestReport()
        students = list(students)
        seen = set()
        kept = []
        for s in students:
            if s.student_id in seen:
                raise DataError(f"duplicate student_id {s.student_id!r}")
            seen.add(s.student_id)
            if not s.complete:
                report.excluded["missing_covariate"] += 1
                continue
            kept.append(s)
        if not report.students_read:
            report.students_read = len(students)
        kept.sort(key=lambda s: (s.entry_year, s.student_id))
        pos = {s.student_id: i for i, s in enumerate(kept)}
        group = np.array([scheme.group_index(s.group_labels) for s in kept], dtype=np.int64)
        year = np.array([s.entry_year for s in kept], dtype=np.int64)
        ees = np.array([s.ees_discrete for s in kept], dtype=float)
        gpa = np.array([np.nan if s.gpa is None else s.gpa for s in kept], dtype=float)

        by_cell: dict[tuple[int, str], list[tuple[int, int]]] = {}
        kept_grades = []
        pairs_seen = set()
        n_grades = 0
        for gr in grades:
            n_grades += 1
            if gr.student_id not in seen:
                raise DataError(f"grade references unknown student {gr.student_id!r}")
            key = (gr.student_id, gr.subject_id)
            if key in pairs_seen:
                raise DataError(f"duplicate grade for student {gr.student_id!r}, subject {gr.subject_id!r}")
            pairs_seen.add(key)
            i = pos.get(gr.student_id)
            if i is None:
                report.grades_dropped += 1
                continue
            k = grade_tenths(gr.grade_raw)
            kept_grades.append(gr)
            by_cell.setdefault((int(year[i]), gr.subject_id), []).append((i, k))
        if not report.grades_read:
            report.grades_read = n_grades

        cells = []
        for (a, l) in sorted(by_cell):
            entries = sorted(by_cell[(a, l)])
            cells.append(Cell(a, l, _frozen([e[0] for e in entries], np.int64),
                              _frozen([e[1] for e in entries], np.int64)))

        report.students_included = len(kept)
        report.counts = {}
        for a in sorted(set(year.tolist())):
            cnt = np.bincount(group[year == a], minlength=scheme.G)
            report.counts[a] = {scheme.group_name(g): int(cnt[g]) for g in range(scheme.G)}
        return cls(scheme, tuple(kept), tuple(kept_grades), _frozen(group), _frozen(year),
                   _frozen(ees), _frozen(gpa), tuple(cells), report)


# ------------------------------------------------------------------- ingest

def _is_missing(tok: str | None) -> bool:
    return tok is None or tok.strip() in MISSING_TOKENS


def _read_rows(path: Path, required: Sequence[str]):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path.name}: missing column(s) {missing}")
        for row in reader:
            yield reader.line_num, row


def ingest(students_file, grades_file, scheme: GroupScheme | None = None,
           config: IngestConfig | None = None) -> Dataset:
    """Read ``students.csv`` and ``grades.csv`` into a validated Dataset."""
    scheme = scheme or GroupScheme.default()
    config = config or IngestConfig()
    students_file, grades_file = Path(students_file), Path(grades_file)
    report = IngestReport()
    levels = dict(scheme.factors)
    students = []
    seen: dict[str, int] = {}
    for row_no, row in _read_rows(students_file, ["student_id", "entry_year", *scheme.factor_names, "ees"]):
        where = f"{students_file.name} row {row_no}"
        report.students_read += 1
        sid = (row["student_id"] or "").strip()
        if not sid:
            raise DataError(f"{where}: empty student_id")
        if sid in seen:
            raise DataError(f"{where}: duplicate student_id {sid!r} (first at row {seen[sid]})")
        seen[sid] = row_no
        try:
            year = int(row["entry_year"])
        except (TypeError, ValueError):
            raise DataError(f"{where}: bad entry_year {row['entry_year']!r}") from None
        if (config.year_min is not None and year < config.year_min) or \
                (config.year_max is not None and year > config.year_max):
            raise DataError(f"{where}: entry_year {year} outside configured range")
        labels = []
        for name in scheme.factor_names:
            tok = row[name]
            if _is_missing(tok):
                labels.append(None)
                continue
            tok = tok.strip()
            if tok not in levels[name]:
                raise DataError(f"{where}: unknown level {tok!r} for factor {name!r}")
            labels.append(tok)
        if _is_missing(row["ees"]):
            report.excluded["missing_ees"] += 1
            continue
        try:
            ees = float(row["ees"])
        except ValueError:
            raise DataError(f"{where}: bad ees {row['ees']!r}") from None
        if not math.isfinite(ees):
            raise DataError(f"{where}: ees is not finite")
        gpa = None
        if not _is_missing(row.get("gpa")):
            try:
                gpa = float(row["gpa"])
            except ValueError:
                raise DataError(f"{where}: bad gpa {row['gpa']!r}") from None
            if not 0.0 <= gpa <= 1.0:
                raise DataError(f"{where}: gpa {gpa} outside [0, 1]")
        students.append(StudentRecord(sid, year, tuple(labels), ees,
                                      discretize_ees(ees, config.ees_step), gpa))

    known = set(seen)
    grades = []
    pairs: dict[tuple[str, str], int] = {}
    for row_no, row in _read_rows(grades_file, ["student_id", "subject_id", "grade"]):
        where = f"{grades_file.name} row {row_no}"
        report.grades_read += 1
        sid = (row["student_id"] or "").strip()
        subj = (row["subject_id"] or "").strip()
        if sid not in known:
            raise DataError(f"{where}: orphan grade, unknown student {sid!r}")
        if not subj:
            raise DataError(f"{where}: empty subject_id")
        if (sid, subj) in pairs:
            raise DataError(f"{where}: duplicate grade for ({sid}, {subj}), first at row {pairs[(sid, subj)]}")
        pairs[(sid, subj)] = row_no
        try:
            z = float(row["grade"])
        except (TypeError, ValueError):
            raise DataError(f"{where}: bad grade {row['grade']!r}") from None
        if not 0.0 <= z <= GRADE_MAX:
            raise DataError(f"{where}: grade {z} outside [0, 10]")
        grades.append(GradeRecord(sid, subj, z, discretize_grade(z)))
    # students excluded for a missing EES still own grades; drop those with a tally
    included = {s.student_id for s in students}
    kept = [g for g in grades if g.student_id in included]
    report.grades_dropped += len(grades) - len(kept)
    return Dataset.from_records(scheme, students, kept, report)


def write_cohort(ds: Dataset, students_path, grades_path) -> None:
    """Emit the dataset in the ``students.csv`` / ``grades.csv`` layout."""
    names = ds.scheme.factor_names
    with open(students_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "entry_year", *names, "ees", "gpa"])
        for s in ds.students:
            w.writerow([s.student_id, s.entry_year, *(lv or "" for lv in s.group_labels),
                        repr(s.ees_raw), "" if s.gpa is None else repr(s.gpa)])
    with open(grades_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "subject_id", "grade"])
        for g in ds.grades:
            w.writerow([g.student_id, g.subject_id, repr(g.grade_raw)])


# --------------------------------------------------------- descriptive table

@dataclass(frozen=True)
class ConcordanceTable:
    """Shares of concordant/discordant (EES, GPA) pairs between two groups.

    ``empty`` is set when no untied pair exists; the proportions are then None.
    """

    g: int
    h: int
    n_pairs: int
    n_untied: int
    C1: float | None = None
    C2: float | None = None
    D1: float | None = None
    D2: float | None = None

    @property
    def empty(self) -> bool:
        return self.n_untied == 0

    @property
    def C(self):
        return None if self.empty else self.C1 + self.C2

    @property
    def D(self):
        return None if self.empty else self.D1 + self.D2

    def to_dict(self) -> dict:
        return {"g": self.g + 1, "g_prime": self.h + 1, "pairs": self.n_pairs,
                "untied_pairs": self.n_untied, "available": not self.empty,
                "C1": self.C1, "C2": self.C2, "D1": self.D1, "D2": self.D2,
                "C": self.C, "D": self.D}


def gpa_concordance_table(ds: Dataset, g: int, h: int, chunk: int = 2048) -> ConcordanceTable:
    ok = np.isfinite(ds.gpa) & np.isfinite(ds.ees)
    gi = np.flatnonzero((ds.group == g) & ok)
    hj = np.flatnonzero((ds.group == h) & ok)
    if (ds.group == g).sum() == 0 or (ds.group == h).sum() == 0:
        raise DataError(f"group {g + 1} or {h + 1} is empty")
    ej, pj = ds.ees[hj], ds.gpa[hj]
    c1 = c2 = d1 = d2 = 0
    for start in range(0, len(gi), chunk):
        idx = gi[start:start + chunk]
        de = np.sign(ds.ees[idx][:, None] - ej[None, :])
        dp = np.sign(ds.gpa[idx][:, None] - pj[None, :])
        c1 += int(np.count_nonzero((de > 0) & (dp > 0)))
        c2 += int(np.count_nonzero((de < 0) & (dp < 0)))
        d1 += int(np.count_nonzero((de < 0) & (dp > 0)))
        d2 += int(np.count_nonzero((de > 0) & (dp < 0)))
    untied = c1 + c2 + d1 + d2
    n_pairs = len(gi) * len(hj)
    if untied == 0:
        return ConcordanceTable(g, h, n_pairs, 0)
    return ConcordanceTable(g, h, n_pairs, untied, c1 / untied, c2 / untied, d1 / untied, d2 / untied)
