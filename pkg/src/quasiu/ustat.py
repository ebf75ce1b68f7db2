"""Concordance kernel and per-cell U-statistics.

The kernel is +1 for a discordant pair (grade order opposite to EES order),
-1 for a concordant pair and 0 on any tie. Kernel sums are kept as integers
and divided once, so results do not depend on summation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import Dataset


@dataclass(frozen=True)
class PairObservation:
    yi: float
    yj: float
    e0i: float
    e0j: float
    took_i: bool = True
    took_j: bool = True


def _sign(x) -> int:
    return (x > 0) - (x < 0)


def kernel_phi(p: PairObservation) -> int:
    if not (p.took_i and p.took_j):
        return 0
    return -_sign(p.yi - p.yj) * _sign(p.e0i - p.e0j)


def kernel_matrix(grades, ees, dtype=np.float64) -> np.ndarray:
    """Dense n x n kernel for one cell; symmetric with a zero diagonal."""
    grades = np.asarray(grades)
    ees = np.asarray(ees)
    dy = np.sign(grades[:, None] - grades[None, :]).astype(np.int8)
    de = np.sign(ees[:, None] - ees[None, :]).astype(np.int8)
    return (-(dy * de)).astype(dtype)


@dataclass(frozen=True)
class CellUStat:
    """U-statistic of one (year, subject, g, g') cell.

    ``kernel_sum`` counts each unordered pair once. A cell without enough
    students has ``pair_count == 0`` and ``u_value is None``.
    """

    year: int
    subject: str
    g: int
    h: int
    n_g: int
    n_h: int
    kernel_sum: int
    pair_count: int

    @property
    def degenerate(self) -> bool:
        return self.pair_count == 0

    @property
    def u_value(self) -> float | None:
        if self.pair_count == 0:
            return None
        return self.kernel_sum / self.pair_count


def _cell_arrays(ds: Dataset, a: int, l: str, g: int):
    cell = ds.cell(a, l)
    mask = ds.group[cell.members] == g
    return cell.grades[mask], ds.ees[cell.members[mask]]


def u_within(ds: Dataset, a: int, g: int, l: str) -> CellUStat:
    y, e = _cell_arrays(ds, a, l, g)
    n = len(y)
    if n < 2:
        return CellUStat(a, l, g, g, n, n, 0, 0)
    K = kernel_matrix(y, e, np.int64)
    return CellUStat(a, l, g, g, n, n, int(np.triu(K, 1).sum()), n * (n - 1) // 2)


def u_between(ds: Dataset, a: int, g: int, h: int, l: str) -> CellUStat:
    yg, eg = _cell_arrays(ds, a, l, g)
    yh, eh = _cell_arrays(ds, a, l, h)
    ng, nh = len(yg), len(yh)
    if ng == 0 or nh == 0:
        return CellUStat(a, l, g, h, ng, nh, 0, 0)
    dy = np.sign(yg[:, None] - yh[None, :])
    de = np.sign(eg[:, None] - eh[None, :])
    return CellUStat(a, l, g, h, ng, nh, int(-(dy * de).sum()), ng * nh)


@dataclass(frozen=True)
class ProjectionVariance:
    """Empirical Hoeffding-projection variances (biased 1/n convention).

    Within-group requests fill ``xi1``; between-group requests fill
    ``xi10``, ``xi01`` and ``gamma_n``.
    """

    n_g: int
    n_h: int
    xi1: float | None = None
    xi10: float | None = None
    xi01: float | None = None
    gamma_n: float | None = None
    psi_mean: float | None = None
    degenerate: bool = False


def projection_variance(ds: Dataset, a: int, l: str, g: int, h: int | None = None) -> ProjectionVariance:
    """Plug-in projection variances for a within (h is None or h == g) or between cell."""
    if h is None or h == g:
        y, e = _cell_arrays(ds, a, l, g)
        return within_projection(y, e)
    yg, eg = _cell_arrays(ds, a, l, g)
    yh, eh = _cell_arrays(ds, a, l, h)
    return between_projection(yg, eg, yh, eh)


def within_projection(y, e) -> ProjectionVariance:
    n = len(y)
    if n < 2:
        return ProjectionVariance(n, n, degenerate=True)
    K = kernel_matrix(y, e)
    psi = K.sum(axis=1) / (n - 1)
    return ProjectionVariance(n, n, xi1=float(np.var(psi)), psi_mean=float(psi.mean()))


def between_projection(yg, eg, yh, eh) -> ProjectionVariance:
    ng, nh = len(yg), len(yh)
    if ng < 2 or nh < 2:
        return ProjectionVariance(ng, nh, degenerate=True)
    K = -(np.sign(np.asarray(yg)[:, None] - np.asarray(yh)[None, :])
          * np.sign(np.asarray(eg)[:, None] - np.asarray(eh)[None, :])).astype(float)
    psi10 = K.mean(axis=1)
    psi01 = K.mean(axis=0)
    xi10, xi01 = float(np.var(psi10)), float(np.var(psi01))
    return ProjectionVariance(ng, nh, xi10=xi10, xi01=xi01,
                              gamma_n=xi10 / ng + xi01 / nh, psi_mean=float(K.mean()))
