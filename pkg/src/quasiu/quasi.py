"""Weighted quasi-U statistics per cell and their aggregation per group pair.

The observed statistic and every resampling replicate go through the same
batched core (:func:`batch_b`): for each (year, subject) cell the kernel
matrix K is built once and the group-pair kernel sums for R label
assignments come from one product ``W' K W``. Entries are integer valued,
so the float64 products are exact and independent of blocking.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .cohort import CohortIndex, Dataset, GroupScheme
from .ustat import kernel_matrix

DEFAULT_N_MIN = 5


class SizeClass(str, enum.Enum):
    LARGE = "LARGE"
    SMALL = "SMALL"


def harmonic_size(n_g, n_h):
    return n_g * n_h / (n_g + n_h)


def admissible(n_g: int, n_h: int) -> bool:
    # both within-group U-statistics must exist
    return n_g >= 2 and n_h >= 2


def cell_weight(index: CohortIndex, a: int, l: str, pair: tuple[int, int]) -> float | None:
    """Normalized harmonic size of ``pair`` among admissible pairs in (a, l).

    Returns None when the pair is not admissible in that cell.
    """
    n = index.n_agl[(a, l)]
    g, h = pair
    if not admissible(n[g], n[h]):
        return None
    total = 0.0
    for (i, j) in _pairs(index.G):
        if admissible(n[i], n[j]):
            total += harmonic_size(n[i], n[j])
    return harmonic_size(n[g], n[h]) / total


def _pairs(G):
    return [(i, j) for i in range(G) for j in range(i + 1, G)]


def cell_b(u_between: float | None, u_g: float | None, u_h: float | None, w: float) -> float:
    if u_between is None or u_g is None or u_h is None:
        raise ValueError("degenerate U-statistic; the cell must be excluded, not zeroed")
    return w * (2.0 * u_between - u_g - u_h)


def classify_cells(index: CohortIndex, n_min: int = DEFAULT_N_MIN) -> dict:
    """Map each admissible (a, l, g, g') to LARGE or SMALL.

    SMALL iff the smaller side has fewer than ``n_min`` students.
    """
    if n_min < 2:
        raise ValueError("n_min must be at least 2")
    out = {}
    for (a, l) in index.cell_keys():
        n = index.n_agl[(a, l)]
        for g, h in _pairs(index.G):
            if admissible(n[g], n[h]):
                out[(a, l, g, h)] = SizeClass.SMALL if min(n[g], n[h]) < n_min else SizeClass.LARGE
    return out


@dataclass(frozen=True)
class CellStatistic:
    year: int
    subject: str
    g: int
    h: int
    n_g: int
    n_h: int
    weight: float
    u_between: float
    u_g: float
    u_h: float
    b_value: float
    size_class: SizeClass

    @property
    def harmonic_size(self) -> float:
        return harmonic_size(self.n_g, self.n_h)


# ------------------------------------------------------------- batched core

class KernelCache:
    """Per-cell kernel matrices, kept while they fit in ``budget`` bytes."""

    def __init__(self, ds: Dataset, budget: int = 1 << 29):
        self.ds = ds
        self.budget = budget
        self._store: dict[int, np.ndarray] = {}
        self._used = 0

    def get(self, c: int) -> np.ndarray:
        K = self._store.get(c)
        if K is not None:
            return K
        cell = self.ds.cells[c]
        K = kernel_matrix(cell.grades, self.ds.ees[cell.members])
        if self._used + K.nbytes <= self.budget:
            self._store[c] = K
            self._used += K.nbytes
        return K


def onehot_weights(labels: np.ndarray, G: int) -> np.ndarray:
    """(R, N) integer labels -> (N, R, G) indicator weights."""
    labels = np.atleast_2d(labels)
    R, N = labels.shape
    W = np.zeros((N, R, G))
    W[np.arange(N)[:, None], np.arange(R)[None, :], labels.T] = 1.0
    return W


def cell_pair_sums(K: np.ndarray, W: np.ndarray):
    """Group counts (R, G) and ordered-pair kernel sums (R, G, G) for one cell."""
    n, R, G = W.shape
    KW = (K @ W.reshape(n, R * G)).reshape(n, R, G)
    S = np.einsum("nrg,nrh->rgh", W, KW)
    return np.rint(W.sum(axis=0)).astype(np.int64), np.rint(S).astype(np.int64)


@dataclass
class BatchB:
    """Quasi-U aggregates for R label assignments (rows)."""

    pairs: tuple
    large: np.ndarray
    small: np.ndarray
    n_cells: np.ndarray
    per_year: dict = field(default_factory=dict)
    L_counts: dict = field(default_factory=dict)
    dropped_cells: np.ndarray | None = None
    cells: list | None = None

    @property
    def total(self) -> np.ndarray:
        out = self.large + self.small
        return np.where(self.n_cells > 0, out, np.nan)


def batch_b(ds: Dataset, W: np.ndarray, n_min: int = DEFAULT_N_MIN,
            cache: KernelCache | None = None, keep_cells: bool = False) -> BatchB:
    """Aggregate B for every replicate column of the weight array ``W``.

    ``W`` has shape (N_students, R, G); entry [i, r, g] is the multiplicity
    of student i in group g under replicate r (0/1 for relabelings).
    """
    if n_min < 2:
        raise ValueError("n_min must be at least 2")
    N, R, G = W.shape
    pairs = tuple(_pairs(G))
    P = len(pairs)
    cache = cache or KernelCache(ds)
    large = np.zeros((R, P))
    small = np.zeros((R, P))
    n_cells = np.zeros((R, P), dtype=np.int64)
    dropped = np.zeros(R, dtype=np.int64)
    per_year: dict = {}
    L_counts: dict = {}
    kept = [] if keep_cells else None
    for c, cell in enumerate(ds.cells):
        counts, S = cell_pair_sums(cache.get(c), W[cell.members])
        nf = counts.astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            u_w = np.stack([S[:, g, g] / (nf[:, g] * (nf[:, g] - 1)) for g in range(G)], axis=1)
        adm = np.stack([(counts[:, g] >= 2) & (counts[:, h] >= 2) for g, h in pairs], axis=1)
        hs = np.zeros((R, P))
        total = np.zeros(R)
        for p, (g, h) in enumerate(pairs):
            with np.errstate(divide="ignore", invalid="ignore"):
                hs[:, p] = np.where(adm[:, p], nf[:, g] * nf[:, h] / (nf[:, g] + nf[:, h]), 0.0)
            total = total + hs[:, p]
        dropped += ~adm.any(axis=1)
        yr = per_year.setdefault(cell.year, np.zeros((R, P)))
        L1, L2 = L_counts.setdefault(cell.year, (np.zeros((R, P), np.int64), np.zeros((R, P), np.int64)))
        for p, (g, h) in enumerate(pairs):
            ok = adm[:, p]
            with np.errstate(divide="ignore", invalid="ignore"):
                w = hs[:, p] / total
                u_b = S[:, g, h] / (nf[:, g] * nf[:, h])
                b = np.where(ok, w * (2.0 * u_b - u_w[:, g] - u_w[:, h]), 0.0)
            is_large = np.minimum(counts[:, g], counts[:, h]) >= n_min
            large[:, p] += np.where(ok & is_large, b, 0.0)
            small[:, p] += np.where(ok & ~is_large, b, 0.0)
            yr[:, p] += b
            n_cells[:, p] += ok
            L1[:, p] += ok & is_large
            L2[:, p] += ok & ~is_large
            if keep_cells and ok[0]:
                kept.append(CellStatistic(
                    cell.year, cell.subject, g, h, int(counts[0, g]), int(counts[0, h]),
                    float(w[0]), float(u_b[0]), float(u_w[0, g]), float(u_w[0, h]), float(b[0]),
                    SizeClass.LARGE if is_large[0] else SizeClass.SMALL))
    return BatchB(pairs, large, small, n_cells, per_year, L_counts, dropped, kept)


# --------------------------------------------------------------- aggregate

@dataclass(frozen=True, eq=False)
class GroupPairVector:
    """B_ngg' for every group pair, in scheme pair order.

    Missing pairs (no admissible cell) hold NaN and are listed in ``missing``.
    ``values`` is defined as ``large + small``.
    """

    scheme: GroupScheme
    values: np.ndarray
    large: np.ndarray
    small: np.ndarray
    n_cells: np.ndarray
    per_year: dict
    L_counts: dict
    cells: tuple
    dropped_cells: int = 0

    @property
    def missing(self) -> tuple[tuple[int, int], ...]:
        return tuple(self.scheme.pairs[p] for p in np.flatnonzero(self.n_cells == 0))

    def __len__(self):
        return len(self.values)

    def __getitem__(self, pair: tuple[int, int]) -> float:
        return float(self.values[self.scheme.pair_index(*pair)])

    def to_dict(self) -> dict:
        names = [self.scheme.pair_name(p) for p in range(len(self.values))]
        clean = lambda a: [None if not np.isfinite(v) else float(v) for v in a]
        return {
            "pairs": names,
            "B": clean(self.values),
            "B_large": clean(self.large),
            "B_small": clean(self.small),
            "admissible_cells": [int(v) for v in self.n_cells],
            "missing": [self.scheme.pair_name(self.scheme.pair_index(*p)) for p in self.missing],
            "dropped_cells": self.dropped_cells,
            "per_year": {str(a): clean(v) for a, v in sorted(self.per_year.items())},
            "L_large": {str(a): [int(x) for x in c[0]] for a, c in sorted(self.L_counts.items())},
            "L_small": {str(a): [int(x) for x in c[1]] for a, c in sorted(self.L_counts.items())},
        }


def aggregate_b(ds: Dataset, n_min: int = DEFAULT_N_MIN, cache: KernelCache | None = None) -> GroupPairVector:
    W = onehot_weights(ds.group[None, :], ds.G)
    bb = batch_b(ds, W, n_min, cache, keep_cells=True)
    total = bb.total[0]
    return GroupPairVector(
        ds.scheme, total, bb.large[0], bb.small[0], bb.n_cells[0],
        {a: v[0] for a, v in bb.per_year.items()},
        {a: (c[0][0], c[1][0]) for a, c in bb.L_counts.items()},
        tuple(bb.cells), int(bb.dropped_cells[0]))


AUDIT_COLUMNS = ["year", "subject", "g", "g_prime", "n_g", "n_g_prime", "w",
                 "u_between", "u_g", "u_g_prime", "b", "size_class"]


def write_cell_audit(vec: GroupPairVector, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AUDIT_COLUMNS)
        for c in vec.cells:
            w.writerow([c.year, c.subject, c.g + 1, c.h + 1, c.n_g, c.n_h, repr(c.weight),
                        repr(c.u_between), repr(c.u_g), repr(c.u_h), repr(c.b_value), c.size_class.value])
