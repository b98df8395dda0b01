"""Linear-algebra and distribution primitives used throughout the package.

Reference distributions are the five families needed by the balance tests:
standard normal, Student t, chi-square, F and the two-sample Hotelling T^2.
CDFs and quantiles are delegated to :mod:`scipy.stats`; the Hotelling T^2 law
is mapped onto F through the exact two-sample relation.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .errors import (
    DimMismatch,
    InvalidDof,
    NonPositiveDiagonal,
    NotPositiveDefinite,
    ProbabilityOutOfRange,
)

PIVOT_TOL = 1e-12

FAMILIES = ("standard-normal", "student-t", "chi-square", "f", "hotelling-t2")
_N_DOF = {"standard-normal": 0, "student-t": 1, "chi-square": 1, "f": 2, "hotelling-t2": 2}


@dataclass(frozen=True)
class DistributionId:
    """A reference distribution: family name plus integer degrees of freedom.

    ``hotelling-t2`` takes ``(p, m)``: dimension ``p`` and the pooled
    within-group degrees of freedom ``m`` (``N - 2`` for two samples).
    """

    family: str
    dof: tuple = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        dof = tuple(int(d) for d in self.dof)
        object.__setattr__(self, "dof", dof)
        if len(dof) != _N_DOF[self.family]:
            raise InvalidDof(f"{self.family} needs {_N_DOF[self.family]} dof parameter(s), got {dof}")
        if any(d < 1 for d in dof):
            raise InvalidDof(f"dof must be >= 1, got {dof}")
        if self.family == "hotelling-t2" and dof[1] - dof[0] + 1 < 1:
            raise InvalidDof(f"hotelling-t2 needs m >= p, got {dof}")

    def _frozen(self):
        fam, d = self.family, self.dof
        if fam == "standard-normal":
            return stats.norm()
        if fam == "student-t":
            return stats.t(d[0])
        if fam == "chi-square":
            return stats.chi2(d[0])
        if fam == "f":
            return stats.f(d[0], d[1])
        p, m = d
        return stats.f(p, m - p + 1)

    def _to_base(self, x):
        # Hotelling T^2(p, m) = p m / (m - p + 1) * F(p, m - p + 1)
        if self.family == "hotelling-t2":
            p, m = self.dof
            return x * (m - p + 1) / (p * m)
        return x

    def _from_base(self, y):
        if self.family == "hotelling-t2":
            p, m = self.dof
            return y * p * m / (m - p + 1)
        return y


def normal():
    return DistributionId("standard-normal")


def student_t(df):
    return DistributionId("student-t", (df,))


def chi2(df):
    return DistributionId("chi-square", (df,))


def f_dist(df1, df2):
    return DistributionId("f", (df1, df2))


def hotelling_t2(p, m):
    return DistributionId("hotelling-t2", (p, m))


def cdf(d, x):
    """P(X <= x) for X distributed as ``d``; vectorised over ``x``."""
    return d._frozen().cdf(d._to_base(np.asarray(x, dtype=float)))


def sf(d, x):
    """Upper tail P(X > x); more accurate than ``1 - cdf`` far in the tail."""
    return d._frozen().sf(d._to_base(np.asarray(x, dtype=float)))


def quantile(d, p):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)) or np.any(np.isnan(p)):
        raise ProbabilityOutOfRange(f"probability must lie in (0, 1), got {p}")
    return d._from_base(d._frozen().ppf(p))


def two_sided_pvalue(d, stat):
    """P(|X| >= |stat|) for a symmetric reference law."""
    return np.minimum(1.0, 2.0 * sf(d, np.abs(stat)))


def as_sym(m):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise DimMismatch(f"expected a square matrix, got shape {m.shape}")
    scale = max(np.max(np.abs(m)), 1.0)
    if np.max(np.abs(m - m.T)) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    return 0.5 * (m + m.T)


def cholesky(m):
    """Lower Cholesky factor; rejects pivots below ``1e-12 * max diag``."""
    m = as_sym(m)
    max_diag = np.max(np.diag(m)) if m.size else 0.0
    if not max_diag > 0:
        raise NotPositiveDefinite("matrix has no positive diagonal entry")
    try:
        low = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if np.any(np.diag(low) ** 2 <= PIVOT_TOL * max_diag):
        raise NotPositiveDefinite("numerically singular matrix (pivot below tolerance)")
    return low


def invert_spd(m):
    low = cholesky(m)
    inv = linalg.cho_solve((low, True), np.eye(low.shape[0]))
    return 0.5 * (inv + inv.T)


def solve_spd(m, b):
    low = cholesky(m)
    return linalg.cho_solve((low, True), np.asarray(b, dtype=float))


def sigma_and_corr(v):
    """Return ``(sigma(V), D(V))``: the diagonal standard-deviation matrix and
    the implied correlation matrix."""
    v = as_sym(v)
    diag = np.diag(v)
    if np.any(diag <= 0):
        raise NonPositiveDiagonal("all diagonal entries must be positive")
    sd = np.sqrt(diag)
    corr = v / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    return np.diag(sd), corr


def mahalanobis(v, cov):
    """Quadratic form ``v' cov^{-1} v`` (no square root)."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    cov = np.atleast_2d(cov)
    if cov.shape != (v.size, v.size):
        raise DimMismatch(f"vector of length {v.size} vs covariance {cov.shape}")
    low = cholesky(cov)
    w = linalg.solve_triangular(low, v, lower=True)
    return float(w @ w)


def sym_sqrt(m):
    """Principal (symmetric positive semi-definite) square root."""
    m = as_sym(m)
    vals, vecs = np.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def sym_inv_sqrt(m):
    m = as_sym(m)
    cholesky(m)
    vals, vecs = np.linalg.eigh(m)
    return (vecs / np.sqrt(vals)) @ vecs.T


def rho(j, a0):
    """Variance-reduction factor of an ellipsoid-truncated standard normal.

    For ``L ~ N(0, I_j)`` conditioned on ``|L|^2 <= a0`` this equals
    ``E|L|^2 / j = P(chi2_{j+2} <= a0) / P(chi2_j <= a0)``.
    """
    j = int(j)
    if j < 1 or not a0 > 0:
        raise ValueError("need j >= 1 and a0 > 0")
    log_num = stats.chi2.logcdf(a0, j + 2)
    log_den = stats.chi2.logcdf(a0, j)
    return float(np.exp(log_num - log_den))
