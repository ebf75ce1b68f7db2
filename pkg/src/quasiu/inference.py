"""Contrast statistics, union-intersection (UIP) statistic and reference laws.

The statistic is standardized by a covariance estimated at the same sample
size (from resampling replicates), so no explicit n^2 factor appears:
``T' V^- T`` for two-sided contrasts and, for one-sided ones,

    sum over subsets a of 1(T_{a:a'} > 0, V_{a'a'}^- T_{a'} <= 0) T_{a:a'}' V_{aa:a'}^- T_{a:a'}

with T_{a:a'} = T_a - V_{aa'} V_{a'a'}^- T_{a'} and V_{aa:a'} the matching
Schur complement. For a positive definite V exactly one subset is active.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigError, DegenerateStatisticError, MissingPairError
from .quasi import GroupPairVector

PINV_RTOL = 1e-10
MAX_UIP_DIM = 20


class Sidedness(str, enum.Enum):
    ONE_SIDED_POSITIVE = "ONE_SIDED_POSITIVE"
    TWO_SIDED = "TWO_SIDED"


@dataclass(frozen=True, eq=False)
class ContrastSpec:
    name: str
    matrix: np.ndarray
    sidedness: Sidedness = Sidedness.ONE_SIDED_POSITIVE

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim == 1:
            m = m[None, :]
        if m.ndim != 2 or m.size == 0:
            raise ConfigError(f"contrast {self.name!r}: matrix must be 2-D and non-empty")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "sidedness", Sidedness(self.sidedness))
        if self.sidedness is Sidedness.ONE_SIDED_POSITIVE and m.shape[0] > MAX_UIP_DIM:
            raise ConfigError(f"one-sided contrasts support at most {MAX_UIP_DIM} rows")

    @property
    def p(self) -> int:
        return self.matrix.shape[0]

    def to_dict(self) -> dict:
        return {"name": self.name, "matrix": self.matrix.tolist(), "sidedness": self.sidedness.value}

    @classmethod
    def from_dict(cls, d: dict) -> "ContrastSpec":
        try:
            side = d.get("sidedness", "ONE_SIDED_POSITIVE")
            side = {"one-sided": Sidedness.ONE_SIDED_POSITIVE, "two-sided": Sidedness.TWO_SIDED}.get(side, side)
            return cls(d["name"], d["matrix"], side)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad contrast definition: {exc}") from None

    @classmethod
    def load(cls, path) -> "ContrastSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read contrast file {path}: {exc}") from None


# columns follow the pair order 12, 13, 14, 23, 24, 34
H01 = ContrastSpec("h01", [[0, 1, 0, 0, 1, 0]], Sidedness.ONE_SIDED_POSITIVE)
H02 = ContrastSpec("h02", [[1, 0, 0, 0, 0, 1]], Sidedness.ONE_SIDED_POSITIVE)
H03 = ContrastSpec("h03", [[1, 0, 0, 0, 0, -1], [0, 1, 0, 0, -1, 0]], Sidedness.TWO_SIDED)
BUILTIN_CONTRASTS = {"h01": H01, "h02": H02, "h03": H03}


def _rowmul(X: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Rows of X times A' with a fixed accumulation order (no BLAS).

    Keeps each row's result independent of how many rows are batched.
    """
    X = np.asarray(X, dtype=float)
    out = np.zeros((X.shape[0], A.shape[0]))
    for j in range(A.shape[1]):
        col = A[:, j]
        if np.any(col != 0):
            out += X[:, j:j + 1] * col[None, :]
    return out


def contrast_rows(B: np.ndarray, c: ContrastSpec) -> np.ndarray:
    """Contrast values for a stack of B vectors (R, G*) -> (R, p)."""
    B = np.atleast_2d(B)
    if B.shape[1] != c.matrix.shape[1]:
        raise ConfigError(f"contrast {c.name!r} has {c.matrix.shape[1]} columns but there are "
                          f"{B.shape[1]} group pairs")
    return _rowmul(B, c.matrix)


def apply_contrast(b: GroupPairVector, c: ContrastSpec) -> np.ndarray:
    if len(b.values) != c.matrix.shape[1]:
        raise ConfigError(f"contrast {c.name!r} has {c.matrix.shape[1]} columns but there are "
                          f"{len(b.values)} group pairs")
    used = np.any(c.matrix != 0, axis=0)
    for p in np.flatnonzero(used & (b.n_cells == 0)):
        raise MissingPairError(b.scheme.pairs[p], b.scheme.pair_name(p))
    vals = np.where(used, b.values, 0.0)
    return contrast_rows(vals[None, :], c)[0]


# ---------------------------------------------------------------- covariance

def pinv_sym(A: np.ndarray, rtol: float = PINV_RTOL, atol: float = 0.0):
    """Moore-Penrose inverse of a symmetric PSD matrix via eigh.

    Eigenvalues at or below ``max(rtol * max eigenvalue, atol)`` count as zero.
    Returns (pinv, rank, absolute tolerance).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return np.zeros_like(A), 0, 0.0
    A = 0.5 * (A + A.T)
    lam, Q = np.linalg.eigh(A)
    top = lam.max()
    if top <= atol or top <= 0:
        return np.zeros_like(A), 0, float(atol)
    tol = max(rtol * top, atol)
    keep = lam > tol
    Qk = Q[:, keep]
    return (Qk / lam[keep]) @ Qk.T, int(keep.sum()), float(tol)


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    matrix: np.ndarray
    pinv: np.ndarray
    rank: int
    tol: float
    eigenvalues: np.ndarray

    @property
    def p(self) -> int:
        return self.matrix.shape[0]

    @property
    def degenerate(self) -> bool:
        return self.rank == 0

    @classmethod
    def from_matrix(cls, V, rtol: float = PINV_RTOL, atol: float = 0.0) -> "CovarianceEstimate":
        V = np.atleast_2d(np.asarray(V, dtype=float))
        V = 0.5 * (V + V.T)
        pinv, rank, tol = pinv_sym(V, rtol, atol)
        return cls(V, pinv, rank, tol, np.linalg.eigvalsh(V))


def covariance_from_replicates(reps, rtol: float = PINV_RTOL) -> CovarianceEstimate:
    reps = np.asarray(reps, dtype=float)
    if reps.ndim == 1:
        reps = reps[:, None]
    R, p = reps.shape
    if R < p + 1:
        raise ConfigError(f"need at least {p + 1} replicates to estimate a {p}x{p} covariance; "
                          f"got {R} (increase R)")
    centered = reps - reps.mean(axis=0)
    # explicit column products: no BLAS, so the result is thread-count independent
    V = np.empty((p, p))
    for i in range(p):
        for j in range(i, p):
            V[i, j] = V[j, i] = np.sum(centered[:, i] * centered[:, j]) / (R - 1)
    # centering constant columns leaves O(eps * |x|) residue; variance below that is noise
    scale = float(np.max(np.abs(reps))) if reps.size else 0.0
    atol = (64 * np.finfo(float).eps * scale) ** 2
    return CovarianceEstimate.from_matrix(V, rtol, atol)


def _as_cov(V) -> CovarianceEstimate:
    return V if isinstance(V, CovarianceEstimate) else CovarianceEstimate.from_matrix(V)


# --------------------------------------------------------------- UIP engine

@dataclass(frozen=True, eq=False)
class _Subset:
    a: np.ndarray          # indices in the active block
    b: np.ndarray          # complement
    reg: np.ndarray        # V_ab V_bb^-
    Vbb_pinv: np.ndarray
    cond_pinv: np.ndarray  # (V_aa - V_ab V_bb^- V_ba)^-
    rank: int


class UipGeometry:
    """Per-subset blocks of V, computed once and reused for many T vectors."""

    def __init__(self, V, rtol: float = PINV_RTOL):
        self.cov = _as_cov(V)
        V = self.cov.matrix
        p = V.shape[0]
        if p > MAX_UIP_DIM:
            raise ConfigError(f"UIP enumeration supports p <= {MAX_UIP_DIM}")
        self.p = p
        self.subsets: list[_Subset] = []
        for mask in range(2 ** p):
            a = np.array([i for i in range(p) if mask >> i & 1], dtype=int)
            b = np.array([i for i in range(p) if not mask >> i & 1], dtype=int)
            Vbb_pinv, _, _ = pinv_sym(V[np.ix_(b, b)], rtol)
            reg = V[np.ix_(a, b)] @ Vbb_pinv
            cond = V[np.ix_(a, a)] - reg @ V[np.ix_(b, a)]
            cond_pinv, rank, _ = pinv_sym(cond, rtol)
            self.subsets.append(_Subset(a, b, reg, Vbb_pinv, cond_pinv, rank))

    def evaluate(self, T: np.ndarray):
        """One-sided statistic for each row of T.

        Returns (statistic, active subset mask, rank of the active block).
        Rows where no subset meets the sign conditions exactly (boundary
        rounding) fall back to the least-violating subset.
        """
        T = np.atleast_2d(np.asarray(T, dtype=float))
        R = T.shape[0]
        nsub = len(self.subsets)
        stat = np.zeros((R, nsub))
        viol = np.zeros((R, nsub))
        for s, sub in enumerate(self.subsets):
            Ta, Tb = T[:, sub.a], T[:, sub.b]
            if len(sub.a):
                res = Ta - _rowmul(Tb, sub.reg) if len(sub.b) else Ta
                q = _rowmul(res, sub.cond_pinv)
                stat[:, s] = np.sum(res * q, axis=1) if sub.a.size > 1 else res[:, 0] * q[:, 0]
                v_res = -res.min(axis=1)
            else:
                v_res = np.full(R, -np.inf)
            if len(sub.b):
                mult = _rowmul(Tb, sub.Vbb_pinv)
                v_mult = mult.max(axis=1)
            else:
                v_mult = np.full(R, -np.inf)
            viol[:, s] = np.maximum(v_res, v_mult)
            ok_strict = (v_res < 0) & (v_mult <= 0)
            # mark strictly satisfied subsets with a sentinel below any violation
            viol[:, s] = np.where(ok_strict, -np.inf, np.maximum(viol[:, s], 0.0))
        sat = np.isneginf(viol)
        # several satisfied subsets only happen for singular V: take the sup
        masked = np.where(sat, stat, -np.inf)
        pick = np.where(sat.any(axis=1), masked.argmax(axis=1), viol.argmin(axis=1))
        rows = np.arange(R)
        value = np.maximum(stat[rows, pick], 0.0)
        ranks = np.array([self.subsets[s].rank for s in range(nsub)])
        return value, pick, ranks[pick]


def uip_batch(T, V, sidedness=Sidedness.ONE_SIDED_POSITIVE, geometry: UipGeometry | None = None):
    """Vectorized statistic over rows of T; returns (values, ranks)."""
    cov = geometry.cov if geometry is not None else _as_cov(V)
    T = np.atleast_2d(np.asarray(T, dtype=float))
    if T.shape[1] != cov.p:
        raise ValueError(f"T has dimension {T.shape[1]}, V is {cov.p}x{cov.p}")
    if cov.degenerate:
        if np.any(T != 0):
            raise DegenerateStatisticError("covariance estimate has rank 0 but the contrast is nonzero")
        return np.zeros(T.shape[0]), np.zeros(T.shape[0], dtype=int)
    if Sidedness(sidedness) is Sidedness.TWO_SIDED:
        q = _rowmul(T, cov.pinv)
        return np.maximum(np.sum(T * q, axis=1), 0.0), np.full(T.shape[0], cov.rank)
    geo = geometry or UipGeometry(cov)
    value, _, rank = geo.evaluate(T)
    return value, rank


def uip_statistic(T, V, sidedness=Sidedness.ONE_SIDED_POSITIVE) -> float:
    value, _ = uip_batch(np.asarray(T, dtype=float)[None, :], V, sidedness)
    return float(value[0])


def active_subset(T, V) -> tuple[int, ...]:
    """Coordinates in the active block of the one-sided statistic."""
    geo = UipGeometry(V)
    _, pick, _ = geo.evaluate(np.asarray(T, dtype=float)[None, :])
    return tuple(int(i) for i in geo.subsets[int(pick[0])].a)


# ----------------------------------------------------------- reference laws

def chibar_weights(V, mc_draws: int = 10**6, seed=0, chunk: int = 100_000) -> np.ndarray:
    """Monte Carlo chi-bar-square weights w_0..w_p for covariance V.

    Draws N(0, V) and records the rank of the active block chosen by the
    same sign rules as the one-sided statistic; w_k is the share of draws
    with rank k.
    """
    counts = chibar_counts(V, mc_draws, seed, chunk)
    return counts / counts.sum()


def chibar_counts(V, mc_draws: int = 10**6, seed=0, chunk: int = 100_000) -> np.ndarray:
    geo = UipGeometry(V)
    cov = geo.cov
    p = cov.p
    lam, Q = np.linalg.eigh(cov.matrix)
    root = Q * np.sqrt(np.clip(lam, 0.0, None))
    rng = np.random.default_rng(seed)
    counts = np.zeros(p + 1, dtype=np.int64)
    done = 0
    while done < mc_draws:
        m = min(chunk, mc_draws - done)
        X = _rowmul(rng.standard_normal((m, p)), root)
        _, _, rank = geo.evaluate(X)
        counts += np.bincount(rank, minlength=p + 1)
        done += m
    return counts


def pvalue_permutation(observed: float, replicates) -> float:
    """Add-one permutation p-value; ties count toward the tail."""
    reps = np.asarray(replicates, dtype=float)
    if reps.size < 1:
        raise ValueError("need at least one replicate")
    tol = 1e-12 * abs(observed)
    return float((1 + np.count_nonzero(reps >= observed - tol)) / (reps.size + 1))


def pvalue_chibar(observed: float, weights) -> float:
    w = np.asarray(weights, dtype=float)
    p = w[0] * (1.0 if observed <= 0 else 0.0)
    for k in range(1, len(w)):
        if w[k]:
            p += w[k] * (1.0 if observed <= 0 else float(stats.chi2.sf(observed, k)))
    return float(min(1.0, p))


def pvalue_chisq(observed: float, df: int) -> float:
    if df == 0:
        return 1.0
    return 1.0 if observed <= 0 else float(stats.chi2.sf(observed, df))


# -------------------------------------------------------------------- result

class Reference(str, enum.Enum):
    PERMUTATION = "PERMUTATION"
    BOOTSTRAP = "BOOTSTRAP"  # replicates of T* - T
    CHIBAR = "CHIBAR"
    CHISQ = "CHISQ"


@dataclass(eq=False)
class TestResult:
    contrast: ContrastSpec
    T: np.ndarray
    statistic: float
    reference: Reference
    p_value: float
    rank: int
    covariance: CovarianceEstimate | None = None
    replicate_statistics: np.ndarray | None = None
    chibar: np.ndarray | None = None
    p_chibar: float | None = None
    p_chisq: float | None = None
    degenerate: bool = False
    extra: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        f = lambda x: None if x is None or not np.isfinite(x) else float(x)
        out = {
            "contrast": self.contrast.name,
            "C": self.contrast.matrix.tolist(),
            "sidedness": self.contrast.sidedness.value,
            "T": [float(v) for v in self.T],
            "statistic": f(self.statistic),
            "reference": self.reference.value,
            "p_value": f(self.p_value),
            "rank": self.rank,
            "degenerate": self.degenerate,
        }
        if self.covariance is not None:
            out["V"] = self.covariance.matrix.tolist()
        if self.chibar is not None:
            out["chibar_weights"] = [float(w) for w in self.chibar]
        if self.p_chibar is not None:
            out["p_chibar"] = f(self.p_chibar)
        if self.p_chisq is not None:
            out["p_chisq"] = f(self.p_chisq)
        out.update(self.extra)
        return out
