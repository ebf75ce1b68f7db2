"""Bivariate-normal population models for the concordance parameter theta.

For a pair of students the EES difference U and the grade difference V are
jointly normal. Then

    theta = P(discordance) - P(concordance)
          = P(U>0, V<0) + P(U<0, V>0) - P(U>0, V>0) - P(U<0, V<0),

and every term is an upper orthant probability of a standard bivariate
normal. Two model families are provided:

* Case A (equal correlations, grade deficit ``mu`` for group 2 under H1).
  Every comparison shares the location shift ``mu_star``; group 2 grades are
  shifted by ``mu_star - mu``.
* Case B (unequal EES/grade correlations rho1 < rho2 under H1). A pair from
  group g has correlation rho_g; a mixed pair has the pooled correlation
  (rho1 s1 s3 + rho2 s2 s4) / sqrt((s1^2 + s2^2)(s3^2 + s4^2)).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .cohort import (Dataset, GradeRecord, GroupScheme, StudentRecord, discretize_ees,
                     grade_tenths_array)
from .errors import ConfigError

RHO_LIMIT = 1.0 - 1e-12


# ---------------------------------------------------------- orthant evaluator

@lru_cache(maxsize=None)
def _gauss_legendre(n: int):
    return np.polynomial.legendre.leggauss(n)


def bvn_orthant(h: float, k: float, rho: float) -> float:
    """P(Z1 > h, Z2 > k) for standard normals with correlation ``rho``.

    Drezner-Wesolowsky Gauss-Legendre quadrature with Genz's refinements
    (6, 12 or 20 nodes by |rho|; an asymptotic expansion for |rho| >= 0.925).
    Absolute error is near double precision.
    """
    h, k, r = float(h), float(k), float(rho)
    if not abs(r) <= RHO_LIMIT:
        raise ValueError(f"|rho| must be at most 1 - 1e-12, got {rho}")
    if h == math.inf or k == math.inf:
        return 0.0
    if h == -math.inf:
        return 1.0 if k == -math.inf else float(ndtr(-k))
    if k == -math.inf:
        return float(ndtr(-h))

    ar = abs(r)
    x, w = _gauss_legendre(6 if ar < 0.3 else 12 if ar < 0.75 else 20)
    hk = h * k
    if ar < 0.925:
        hs = (h * h + k * k) / 2.0
        asr = math.asin(r) / 2.0
        sn = np.sin(asr * (1.0 + x))
        bvn = float(np.sum(w * np.exp((sn * hk - hs) / (1.0 - sn * sn))))
        bvn = bvn * asr / (2.0 * math.pi) + float(ndtr(-h) * ndtr(-k))
        return min(1.0, max(0.0, bvn))

    if r < 0:
        k, hk = -k, -hk
    a2 = (1.0 - r) * (1.0 + r)
    a = math.sqrt(a2)
    bs = (h - k) ** 2
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 16.0
    bvn = 0.0
    asr = -(bs / a2 + hk) / 2.0
    if asr > -100:
        bvn = a * math.exp(asr) * (1 - c * (bs - a2) * (1 - d * bs / 5) / 3 + c * d * a2 * a2 / 5)
    if hk > -100:
        b = math.sqrt(bs)
        sp = math.sqrt(2 * math.pi) * float(ndtr(-b / a))
        bvn -= math.exp(-hk / 2) * sp * b * (1 - c * bs * (1 - d * bs / 5) / 3)
    a /= 2.0
    xs = (a + a * x) ** 2
    rs = np.sqrt(1.0 - xs)
    asr_v = -(bs / xs + hk) / 2.0
    ok = asr_v > -100
    sp_v = 1.0 + c * xs[ok] * (1.0 + d * xs[ok])
    ep = np.exp(-hk * (1.0 - rs[ok]) / (2.0 * (1.0 + rs[ok]))) / rs[ok]
    bvn += a * float(np.sum(w[ok] * np.exp(asr_v[ok]) * (ep - sp_v)))
    bvn = -bvn / (2.0 * math.pi)
    if r > 0:
        bvn += float(ndtr(-max(h, k)))
    elif h >= k:
        bvn = -bvn
    else:
        span = float(ndtr(k) - ndtr(h)) if h < 0 else float(ndtr(-h) - ndtr(-k))
        bvn = span - bvn
    return min(1.0, max(0.0, bvn))


def bvn_rectangle(h1: float, h2: float, k1: float, k2: float, rho: float) -> float:
    """P(h1 < Z1 < h2, k1 < Z2 < k2)."""
    return (bvn_orthant(h1, k1, rho) - bvn_orthant(h2, k1, rho)
            - bvn_orthant(h1, k2, rho) + bvn_orthant(h2, k2, rho))


# --------------------------------------------------------------- pair laws

@dataclass(frozen=True)
class PairLaw:
    """Normal law of (U, V) = (EES difference, grade difference) for a pair."""

    mu_u: float
    mu_v: float
    sd_u: float
    sd_v: float
    rho: float


def theta_difference(law: PairLaw) -> tuple[float, float]:
    """(P(discordance), P(concordance)) for one pair law."""
    h = -law.mu_u / law.sd_u
    k = -law.mu_v / law.sd_v
    r = law.rho
    p_disc = bvn_orthant(h, -k, -r) + bvn_orthant(-h, k, -r)
    p_conc = bvn_orthant(h, k, r) + bvn_orthant(-h, -k, r)
    return p_disc, p_conc


def theta_of_law(law: PairLaw) -> float:
    d, c = theta_difference(law)
    return d - c


class Case(str, enum.Enum):
    A = "A"
    B = "B"


class Hypothesis(str, enum.Enum):
    H0 = "H0"
    H1 = "H1"


@dataclass(frozen=True)
class BvnModel:
    """Population model. sigma1/sigma2 are EES sds of groups 1/2, sigma3/sigma4 grade sds."""

    case: Case
    rho1: float
    rho2: float
    mu_star: float = 0.0
    mu: float = 0.0
    sigma1: float = 1.0
    sigma2: float = 1.0
    sigma3: float = 1.0
    sigma4: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "case", Case(self.case))
        for name in ("sigma1", "sigma2", "sigma3", "sigma4"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("rho1", "rho2"):
            if not abs(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must lie in (-1, 1)")
        if not all(math.isfinite(v) for v in (self.mu, self.mu_star)):
            raise ConfigError("mu and mu_star must be finite")
        if self.case is Case.A:
            if self.rho1 != self.rho2:
                raise ConfigError("Case A needs rho1 == rho2")
            if self.sigma1 != self.sigma2 or self.sigma3 != self.sigma4:
                raise ConfigError("Case A needs sigma1 == sigma2 and sigma3 == sigma4")
            if self.mu < 0:
                raise ConfigError("Case A needs mu >= 0")
        elif self.mu != 0:
            raise ConfigError("Case B has no grade deficit; set mu = 0")

    @classmethod
    def case_a(cls, rho: float, mu: float = 0.0, mu_star: float = 0.0,
               sigma_ees: float = 1.0, sigma_grade: float = 1.0) -> "BvnModel":
        return cls(Case.A, rho, rho, mu_star, mu, sigma_ees, sigma_ees, sigma_grade, sigma_grade)

    @classmethod
    def case_b(cls, rho1: float, rho2: float, mu_star: float = 0.0, sigma1=1.0, sigma2=1.0,
               sigma3=1.0, sigma4=1.0) -> "BvnModel":
        return cls(Case.B, rho1, rho2, mu_star, 0.0, sigma1, sigma2, sigma3, sigma4)

    @property
    def mu1_star(self) -> float:
        return self.mu_star / (math.sqrt(2) * self.sigma1)

    @property
    def mu2_star(self) -> float:
        return self.mu_star / (math.sqrt(2) * self.sigma3)

    @property
    def mu2(self) -> float:
        return self.mu / (math.sqrt(2) * self.sigma3)

    @property
    def rho12_star(self) -> float:
        num = self.rho1 * self.sigma1 * self.sigma3 + self.rho2 * self.sigma2 * self.sigma4
        return num / math.sqrt((self.sigma1 ** 2 + self.sigma2 ** 2) * (self.sigma3 ** 2 + self.sigma4 ** 2))

    def under(self, hypothesis: Hypothesis) -> "BvnModel":
        """The model with its H1 departure removed when ``hypothesis`` is H0."""
        if Hypothesis(hypothesis) is Hypothesis.H1:
            return self
        if self.case is Case.A:
            return replace(self, mu=0.0)
        return replace(self, rho2=self.rho1)

    def to_dict(self) -> dict:
        return {"case": self.case.value, "rho1": self.rho1, "rho2": self.rho2,
                "mu_star": self.mu_star, "mu": self.mu, "sigma1": self.sigma1,
                "sigma2": self.sigma2, "sigma3": self.sigma3, "sigma4": self.sigma4}

    @classmethod
    def from_dict(cls, d: dict) -> "BvnModel":
        d = dict(d)
        if "rho" in d:
            r = d.pop("rho")
            d.setdefault("rho1", r)
            d.setdefault("rho2", r)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad model definition: {exc}") from None


def pair_law(model: BvnModel, which: int, hypothesis=Hypothesis.H1) -> PairLaw:
    """Law of (U, V) for a within-group (11, 22) or mixed (12) comparison."""
    m = model.under(hypothesis)
    s2 = math.sqrt(2.0)
    if m.case is Case.A:
        if which in (11, 22):
            return PairLaw(m.mu_star, m.mu_star, s2 * m.sigma1, s2 * m.sigma3, m.rho1)
        if which == 12:
            return PairLaw(m.mu_star, m.mu_star - m.mu, s2 * m.sigma1, s2 * m.sigma3, m.rho1)
    else:
        if which == 11:
            return PairLaw(m.mu_star, m.mu_star, s2 * m.sigma1, s2 * m.sigma3, m.rho1)
        if which == 22:
            return PairLaw(m.mu_star, m.mu_star, s2 * m.sigma2, s2 * m.sigma4, m.rho2)
        if which == 12:
            return PairLaw(m.mu_star, m.mu_star, math.hypot(m.sigma1, m.sigma2),
                           math.hypot(m.sigma3, m.sigma4), m.rho12_star)
    raise ConfigError(f"which must be 11, 22 or 12, got {which!r}")


def appendix_terms(model: BvnModel) -> dict[str, float]:
    """Case A orthant pieces (a)-(f) in the standardized coordinates.

    (a) Z1 > -m1, Z2 < -m2      (b) Z1 < -m1, Z2 > -m2
    (c) Z1 > -m1, Z2 > -m2      (d) Z1 < -m1, Z2 < -m2
    (e) Z1 > -m1, -m2 < Z2 < mu2 - m2
    (f) Z1 < -m1, -m2 < Z2 < mu2 - m2
    with m1 = mu1_star, m2 = mu2_star.
    """
    if model.case is not Case.A:
        raise ConfigError("the (a)-(f) decomposition belongs to Case A")
    r = model.rho1
    m1, m2, d = model.mu1_star, model.mu2_star, model.mu2
    hi = d - m2
    c = bvn_orthant(-m1, -m2, r)
    a = bvn_orthant(-m1, m2, -r)          # Z1 > -m1, -Z2 > m2
    b = bvn_orthant(m1, -m2, -r)          # -Z1 > m1, Z2 > -m2
    dd = bvn_orthant(m1, m2, r)           # -Z1 > m1, -Z2 > m2
    e = c - bvn_orthant(-m1, hi, r)
    f = bvn_orthant(m1, -hi, r) - dd      # Z1 < -m1, Z2 < hi, minus Z2 < -m2
    return {"a": a, "b": b, "c": c, "d": dd, "e": e, "f": f}


def theta_pair(model: BvnModel, which: int, hypothesis=Hypothesis.H1) -> float:
    """theta for comparison ``which`` (11, 22 or 12).

    Case A mixed pairs are assembled from the labelled pieces: a+b-c-d under
    H0 and a+b-c-d+2e-2f under H1. Everything else uses the orthant form of
    the pair law directly.
    """
    hypothesis = Hypothesis(hypothesis)
    if which not in (11, 22, 12):
        raise ConfigError(f"which must be 11, 22 or 12, got {which!r}")
    if model.case is Case.A:
        t = appendix_terms(model)
        base = t["a"] + t["b"] - t["c"] - t["d"]
        if which == 12 and hypothesis is Hypothesis.H1:
            return base + 2 * t["e"] - 2 * t["f"]
        return base
    return theta_of_law(pair_law(model, which, hypothesis))


@dataclass(frozen=True)
class ThetaTriple:
    theta11: float
    theta22: float
    theta12: float

    @property
    def contrast(self) -> float:
        return 2 * self.theta12 - self.theta11 - self.theta22

    def to_dict(self) -> dict:
        return {"theta11": self.theta11, "theta22": self.theta22,
                "theta12": self.theta12, "contrast": self.contrast}


def theta_triple(model: BvnModel, hypothesis=Hypothesis.H1) -> ThetaTriple:
    return ThetaTriple(*(theta_pair(model, w, hypothesis) for w in (11, 22, 12)))


# ------------------------------------------------------------ H1 direction

def case_a_grid(mu_star: float = 0.5, rhos=None, mus=None) -> list[BvnModel]:
    rhos = np.round(np.arange(1, 10) / 10, 10) if rhos is None else rhos
    mus = np.round(np.arange(1, 11) / 10, 10) if mus is None else mus
    return [BvnModel.case_a(float(r), float(m), mu_star) for r in rhos for m in mus]


def case_b_grid(levels=None, mu_star: float = 0.0) -> list[BvnModel]:
    levels = np.round(np.arange(1, 9) / 10, 10) if levels is None else levels
    return [BvnModel.case_b(float(r1), float(r2), mu_star)
            for r1 in levels for r2 in levels if r1 < r2]


@dataclass
class DirectionReport:
    models: list
    contrasts: np.ndarray
    null_contrasts: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def min_contrast(self) -> float:
        return float(self.contrasts.min())

    @property
    def argmin(self) -> BvnModel:
        return self.models[int(self.contrasts.argmin())]

    @property
    def max_null(self) -> float:
        return float(np.abs(self.null_contrasts).max()) if self.null_contrasts.size else 0.0

    @property
    def passed(self) -> bool:
        return bool(self.contrasts.size) and self.min_contrast > 0

    def rows(self):
        for m, c, c0 in zip(self.models, self.contrasts, self.null_contrasts):
            yield {**m.to_dict(), "contrast_H1": float(c), "contrast_H0": float(c0)}


def verify_h1_direction(models) -> DirectionReport:
    """Evaluate 2 theta12 - theta11 - theta22 over ``models``; pass iff every value is > 0."""
    models = list(models)
    c1 = np.array([theta_triple(m, Hypothesis.H1).contrast for m in models])
    c0 = np.array([theta_triple(m, Hypothesis.H0).contrast for m in models])
    return DirectionReport(models, c1, c0)


# ------------------------------------------------------------- Monte Carlo

def monte_carlo_theta(law: PairLaw, n_pairs: int, seed, chunk: int = 2_000_000) -> tuple[float, float]:
    """Estimate theta from ``n_pairs`` draws of (U, V); returns (estimate, standard error)."""
    rng = np.random.default_rng(seed)
    c = math.sqrt(1.0 - law.rho ** 2)
    total = 0
    done = 0
    while done < n_pairs:
        m = min(chunk, n_pairs - done)
        z1 = rng.standard_normal(m)
        z2 = law.rho * z1 + c * rng.standard_normal(m)
        u = law.mu_u + law.sd_u * z1
        v = law.mu_v + law.sd_v * z2
        total -= int(np.sum(np.sign(u) * np.sign(v)))
        done += m
    est = total / n_pairs
    return est, math.sqrt(max(1.0 - est * est, 0.0) / n_pairs)


# --------------------------------------------------------------- simulation

GRADE_CENTER = 6.0
GRADE_SD = 1.5
EES_CENTER = 500.0
EES_SD = 100.0
MAX_CLIP = 0.01


def default_roles(scheme: GroupScheme) -> tuple[int, ...]:
    """Model role (1 or 2) of each group.

    Two-group schemes map groups in order. Schemes with a ``school`` factor
    put its first level in role 1 and every other level in role 2.
    """
    if scheme.G == 2:
        return (1, 2)
    names = scheme.factor_names
    if "school" in names:
        pos = names.index("school")
        first = scheme.factors[pos][1][0]
        return tuple(1 if grp[pos] == first else 2 for grp in scheme.groups)
    raise ConfigError("cannot map groups onto the two model roles; pass roles explicitly")


def _role_params(model: BvnModel, hypothesis: Hypothesis):
    """(EES mean, EES sd, grade mean, grade sd, rho) for roles 1 and 2."""
    m = model.under(hypothesis)
    if m.case is Case.B and m.mu_star != 0:
        raise ConfigError("Case B cohorts are generated with equal group means (mu_star = 0)")
    r1 = (0.0, m.sigma1, 0.0, m.sigma3, m.rho1)
    if m.case is Case.A:
        r2 = (m.mu_star, m.sigma2, m.mu_star - m.mu, m.sigma4, m.rho1)
    else:
        r2 = (0.0, m.sigma2, 0.0, m.sigma4, m.rho2)
    return {1: r1, 2: r2}


def _pooled(params, weights, idx_mean, idx_sd):
    mean = sum(w * p[idx_mean] for p, w in zip(params, weights))
    second = sum(w * (p[idx_sd] ** 2 + p[idx_mean] ** 2) for p, w in zip(params, weights))
    return mean, math.sqrt(second - mean * mean)


def grade_scale(params, weights) -> float:
    """Grade-scale sd (<= GRADE_SD) keeping the clipped share under 1%."""
    mean, sd = _pooled(params, weights, 2, 3)
    s = GRADE_SD
    while True:
        clip = 0.0
        for p, w in zip(params, weights):
            # z = (latent - mean) / sd; grade = center + s z
            loc = GRADE_CENTER + s * (p[2] - mean) / sd
            scl = s * p[3] / sd
            clip += w * float(ndtr((0.0 - loc) / scl) + ndtr((loc - 10.0) / scl))
        if clip < MAX_CLIP:
            return s
        s *= 0.95


def simulate_cohort(model: BvnModel, n_per_group: int, years=1, subjects_per_student: int = 10,
                    seed=0, scheme: GroupScheme | None = None, hypothesis=Hypothesis.H1,
                    roles=None, first_year: int = 2000) -> Dataset:
    """Draw a synthetic cohort from the model.

    Every student takes all ``subjects_per_student`` subjects of their year.
    A student's latent EES is X and subject grades are rho X + sqrt(1-rho^2) e_l
    on the standardized scale, then shifted and scaled per role. Latents are
    mapped onto the EES scale (500 +- 100) and the grade scale (6.0 +- 1.5,
    clipped to [0, 10]) through a common affine map, then discretized.
    """
    if n_per_group < 2:
        raise ConfigError("n_per_group must be at least 2")
    if subjects_per_student < 1:
        raise ConfigError("subjects_per_student must be at least 1")
    year_list = list(range(first_year, first_year + years)) if isinstance(years, int) else list(years)
    if not year_list:
        raise ConfigError("need at least one entry year")
    scheme = scheme or GroupScheme.two_groups()
    roles = tuple(roles) if roles is not None else default_roles(scheme)
    if len(roles) != scheme.G or not set(roles) <= {1, 2}:
        raise ConfigError("roles must give 1 or 2 for every group")
    hypothesis = Hypothesis(hypothesis)
    rp = _role_params(model, hypothesis)
    params = [rp[r] for r in roles]
    weights = [1.0 / scheme.G] * scheme.G
    e_mean, e_sd = _pooled(params, weights, 0, 1)
    y_mean, y_sd = _pooled(params, weights, 2, 3)
    s_grade = grade_scale(params, weights)
    subjects = [f"S{l + 1:02d}" for l in range(subjects_per_student)]

    students, grades = [], []
    for ai, year in enumerate(year_list):
        for g in range(scheme.G):
            em, es, ym, ys, rho = params[g]
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(ai, g)))
            x = rng.standard_normal(n_per_group)
            eps = rng.standard_normal((n_per_group, subjects_per_student))
            ees = EES_CENTER + EES_SD * ((em + es * x) - e_mean) / e_sd
            lat = ym + ys * (rho * x[:, None] + math.sqrt(1 - rho * rho) * eps)
            raw = np.clip(GRADE_CENTER + s_grade * (lat - y_mean) / y_sd, 0.0, 10.0)
            tenths = grade_tenths_array(raw)
            labels = scheme.groups[g]
            tag = scheme.group_name(g)
            for i in range(n_per_group):
                sid = f"{year}-{tag}-{i:05d}"
                gpa = float(tenths[i].mean()) / 100.0
                e_raw = float(ees[i])
                students.append(StudentRecord(sid, year, labels, e_raw, discretize_ees(e_raw), gpa))
                for l, subj in enumerate(subjects):
                    t = int(tenths[i, l])
                    grades.append(GradeRecord(sid, subj, t / 10.0, t / 10.0))
    return Dataset.from_records(scheme, students, grades)


def theta_table(model: BvnModel) -> list[dict]:
    """Analytic theta11, theta22, theta12 and the contrast under H0 and H1."""
    rows = []
    for hyp in (Hypothesis.H0, Hypothesis.H1):
        rows.append({"hypothesis": hyp.value, **theta_triple(model, hyp).to_dict()})
    return rows
