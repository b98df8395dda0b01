"""Covariate balance statistics and acceptance rules.

Arms are labelled ``1..Q``.  With two arms, label 1 is the treated arm
(``Z = 1``) and label 2 the control arm (``Z = 0``); a 0/1 assignment vector
is translated accordingly.  The highest label is always the reference level
of the (multinomial) logit.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics
from .errors import (
    ArmTooSmall,
    DegenerateWithinVariance,
    DimMismatch,
    IncompatibleScheme,
    InvalidFrame,
    MleFailure,
    NotPositiveDefinite,
    WrongArmCount,
)
from .regression import mlogit_fit, mlogit_lrt, ols_f_test, ols_fit, wald_stat

MODELS = ("t", "lm", "logit", "f", "mlogit", "rem")
RULES = ("marginal", "joint", "consensus")
JOINT_REFERENCES = ("default", "wald", "hotelling")
STUDENTIZATIONS = ("classic", "ehw")


def normalize_assignment(assignment, arm_count=None):
    """Map an assignment vector onto labels ``1..Q``.

    A vector whose values are exactly {0, 1} is read as a treatment
    indicator: 1 becomes label 1 and 0 becomes label 2.
    """
    a = np.asarray(assignment)
    if a.ndim != 1:
        raise InvalidFrame("assignment must be one-dimensional")
    if not np.all(np.equal(np.mod(a, 1), 0)):
        raise InvalidFrame("assignment must be integer valued")
    a = a.astype(int)
    values = set(np.unique(a).tolist())
    if values <= {0, 1} and 0 in values and (arm_count in (None, 2)):
        return np.where(a == 1, 1, 2)
    if min(values) < 1:
        raise InvalidFrame("assignment labels must be 1..Q (or 0/1 with two arms)")
    if arm_count is not None and max(values) > arm_count:
        raise InvalidFrame(f"label {max(values)} exceeds arm count {arm_count}")
    return a


class ExperimentFrame:
    """Covariates (stored centred), arm sizes and optionally an assignment
    and observed outcomes.

    Covariate summaries that do not depend on the assignment are computed
    once; :meth:`with_assignment` reuses them so that the same frame can be
    evaluated cheaply against many candidate allocations.
    """

    def __init__(self, covariates, arm_sizes=None, assignment=None, outcomes=None):
        x = np.asarray(covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else x.reshape(0, 0)
        if x.ndim != 2:
            raise InvalidFrame("covariates must be an N x J matrix")
        if not np.all(np.isfinite(x)):
            raise InvalidFrame("covariates contain non-finite values")
        n, j = x.shape
        self.covariate_means = x.mean(axis=0) if n else np.zeros(j)
        self.covariates = x - self.covariate_means
        self.n = n
        self.n_covariates = j

        if j:
            col_ss = np.einsum("ij,ij->j", self.covariates, self.covariates)
            scale = np.maximum(1.0, np.abs(self.covariate_means)) ** 2
            if np.any(col_ss <= 1e-24 * n * scale):
                bad = np.flatnonzero(col_ss <= 1e-24 * n * scale).tolist()
                raise InvalidFrame(f"covariate column(s) {bad} have zero variance")
            self.s2x = self.covariates.T @ self.covariates / (n - 1)
            try:
                self.s2x_inv = numerics.invert_spd(self.s2x)
            except NotPositiveDefinite:
                raise InvalidFrame("covariate sample covariance is singular") from None
        else:
            self.s2x = np.zeros((0, 0))
            self.s2x_inv = np.zeros((0, 0))

        labels = None
        if assignment is not None:
            hint = len(arm_sizes) if arm_sizes is not None else None
            labels = normalize_assignment(assignment, hint)
            if labels.size != n:
                raise DimMismatch(f"assignment has length {labels.size}, covariates have {n} rows")
            counts = np.bincount(labels, minlength=(hint or labels.max()) + 1)[1:]
            if arm_sizes is not None and not np.array_equal(counts, np.asarray(arm_sizes)):
                raise InvalidFrame(f"assignment counts {counts.tolist()} differ from arm sizes {list(arm_sizes)}")
            arm_sizes = counts
        if arm_sizes is None:
            raise InvalidFrame("need arm sizes or an assignment")
        sizes = np.asarray(arm_sizes, dtype=int)
        if sizes.ndim != 1 or sizes.size < 2:
            raise InvalidFrame("need at least two arms")
        if sizes.sum() != n:
            raise InvalidFrame(f"arm sizes sum to {sizes.sum()}, expected {n}")
        if np.any(sizes < 2):
            raise ArmTooSmall(f"every arm needs at least two units, got {sizes.tolist()}")
        self.arm_sizes = sizes
        self.arm_count = sizes.size
        self.shares = sizes / n
        self.labels = labels

        if outcomes is not None:
            y = np.asarray(outcomes, dtype=float)
            if y.shape != (n,):
                raise DimMismatch(f"outcomes have shape {y.shape}, expected ({n},)")
            self.outcomes = y
        else:
            self.outcomes = None

    @property
    def has_assignment(self):
        return self.labels is not None

    @property
    def treated(self):
        """Boolean treatment indicator (two arms only)."""
        self._need_two_arms()
        return self._require_labels() == 1

    def _require_labels(self):
        if self.labels is None:
            raise InvalidFrame("frame has no assignment")
        return self.labels

    def _need_two_arms(self):
        if self.arm_count != 2:
            raise WrongArmCount(f"operation needs two arms, frame has {self.arm_count}")

    def with_assignment(self, assignment, outcomes=None):
        """New frame sharing covariate summaries but carrying ``assignment``."""
        labels = normalize_assignment(assignment, self.arm_count)
        if labels.size != self.n:
            raise DimMismatch("assignment length differs from frame size")
        counts = np.bincount(labels, minlength=self.arm_count + 1)[1:]
        if counts.size != self.arm_count or not np.array_equal(counts, self.arm_sizes):
            raise InvalidFrame(f"assignment counts {counts.tolist()} differ from arm sizes {self.arm_sizes.tolist()}")
        new = object.__new__(ExperimentFrame)
        new.__dict__.update(self.__dict__)
        new.labels = labels
        if outcomes is not None:
            y = np.asarray(outcomes, dtype=float)
            if y.shape != (self.n,):
                raise DimMismatch("outcomes length differs from frame size")
            new.outcomes = y
        return new

    def arm_means(self):
        """Q x J matrix of per-arm covariate means (centred scale)."""
        labels = self._require_labels()
        sums = np.zeros((self.arm_count, self.n_covariates))
        np.add.at(sums, labels - 1, self.covariates)
        return sums / self.arm_sizes[:, None]

    def taux(self):
        """Difference in covariate means, treated minus control."""
        means = self.arm_means()
        self._need_two_arms()
        return means[0] - means[1]

    def arm_covariances(self):
        """Per-arm sample covariance matrices (divisor N_q - 1)."""
        labels = self._require_labels()
        out = []
        for q in range(1, self.arm_count + 1):
            xq = self.covariates[labels == q]
            d = xq - xq.mean(axis=0)
            out.append(d.T @ d / (xq.shape[0] - 1))
        return out


@dataclass(frozen=True)
class BalanceScheme:
    """Acceptance criterion: balance model, rule and thresholds."""

    model: str
    rule: str
    alpha_marginal: object = None
    alpha_joint: float = None
    joint_reference: str = "default"
    studentization: str = "classic"

    def __post_init__(self):
        if self.model not in MODELS:
            raise IncompatibleScheme(f"unknown model {self.model!r}")
        if self.rule not in RULES:
            raise IncompatibleScheme(f"unknown rule {self.rule!r}")
        if self.model == "f" and self.rule != "marginal":
            raise IncompatibleScheme("the per-covariate F-test supports the marginal rule only")
        if self.model == "rem" and self.rule != "joint":
            raise IncompatibleScheme("Mahalanobis rerandomization supports the joint rule only")
        if self.joint_reference not in JOINT_REFERENCES:
            raise IncompatibleScheme(f"unknown joint reference {self.joint_reference!r}")
        if self.joint_reference == "hotelling" and self.model != "t":
            raise IncompatibleScheme("the Hotelling reference applies to the t model only")
        if self.studentization not in STUDENTIZATIONS:
            raise IncompatibleScheme(f"unknown studentization {self.studentization!r}")
        if self.uses_marginal:
            if self.alpha_marginal is None:
                raise IncompatibleScheme("marginal thresholds are required by this rule")
            am = np.atleast_1d(np.asarray(self.alpha_marginal, dtype=float))
            if np.any((am <= 0) | (am >= 1)):
                raise IncompatibleScheme("marginal thresholds must lie in (0, 1)")
            object.__setattr__(self, "alpha_marginal", tuple(am.tolist()) if am.size > 1 else float(am[0]))
        if self.uses_joint:
            if self.alpha_joint is None or not 0 < float(self.alpha_joint) < 1:
                raise IncompatibleScheme("joint threshold must lie in (0, 1)")
            object.__setattr__(self, "alpha_joint", float(self.alpha_joint))

    @property
    def uses_marginal(self):
        return self.rule in ("marginal", "consensus")

    @property
    def uses_joint(self):
        return self.rule in ("joint", "consensus")

    @property
    def name(self):
        return f"{self.model}-{self.rule}"

    def marginal_thresholds(self, count):
        am = np.atleast_1d(np.asarray(self.alpha_marginal, dtype=float))
        if am.size == 1:
            return np.full(count, am[0])
        if am.size != count:
            raise IncompatibleScheme(f"expected {count} marginal thresholds, got {am.size}")
        return am

    def to_dict(self):
        am = self.alpha_marginal
        return {
            "model": self.model,
            "rule": self.rule,
            "alpha_marginal": list(am) if isinstance(am, tuple) else am,
            "alpha_joint": self.alpha_joint,
            "joint_reference": self.joint_reference,
            "studentization": self.studentization,
        }

    @classmethod
    def from_dict(cls, d):
        allowed = {"model", "rule", "alpha_marginal", "alpha_joint", "joint_reference", "studentization"}
        unknown = set(d) - allowed
        if unknown:
            raise IncompatibleScheme(f"unknown scheme keys {sorted(unknown)}")
        return cls(**d)

    def relaxed(self, **changes):
        return replace(self, **changes)


@dataclass
class BalanceReport:
    marginal_stats: np.ndarray
    marginal_pvalues: np.ndarray
    joint_stat: float = None
    joint_pvalue: float = None
    taux_hat: np.ndarray = None
    accepted: bool = None
    diagnostics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        def arr(v):
            return None if v is None else np.asarray(v, dtype=float).tolist()

        return {
            "marginal_stats": arr(self.marginal_stats),
            "marginal_pvalues": arr(self.marginal_pvalues),
            "joint_stat": self.joint_stat,
            "joint_pvalue": self.joint_pvalue,
            "taux_hat": arr(self.taux_hat),
            "accepted": self.accepted,
            "diagnostics": dict(self.diagnostics),
            "extra": {k: (arr(v) if isinstance(v, np.ndarray) else v) for k, v in self.extra.items()},
        }


def _two_arm_pieces(frame):
    frame._need_two_arms()
    n1, n0 = frame.arm_sizes
    tau = frame.taux()
    s1, s0 = frame.arm_covariances()
    return n1, n0, tau, s1, s0


def t_marginal(frame, studentization="classic"):
    """Per-covariate two-sample t statistics and p-values (reference t_{N-2})."""
    n1, n0, tau, s1, s0 = _two_arm_pieces(frame)
    v1, v0 = np.diag(s1), np.diag(s0)
    if studentization == "classic":
        pooled = ((n1 - 1) * v1 + (n0 - 1) * v0) / (frame.n - 2)
        var = pooled * (1.0 / n1 + 1.0 / n0)
    else:
        # HC0 standard error of the Z coefficient in lm(x_j ~ 1 + Z)
        var = (n1 - 1) * v1 / n1**2 + (n0 - 1) * v0 / n0**2
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(tau == 0, 0.0, tau / np.sqrt(var))
    p = numerics.two_sided_pvalue(numerics.student_t(frame.n - 2), t)
    return t, np.asarray(p, dtype=float)


def t_joint(frame, reference="wald-chisq", studentization="classic"):
    """Two-sample Hotelling-type statistic ``tau' Omega^{-1} tau``.

    ``reference`` is ``"wald-chisq"`` (chi-square with J dof) or
    ``"hotelling"`` (exact two-sample T^2 law).
    """
    n1, n0, tau, s1, s0 = _two_arm_pieces(frame)
    if studentization == "classic":
        pooled = ((n1 - 1) * s1 + (n0 - 1) * s0) / (frame.n - 2)
        omega = pooled * (1.0 / n1 + 1.0 / n0)
    else:
        omega = s1 / n1 + s0 / n0
    w = numerics.mahalanobis(tau, omega)
    j = frame.n_covariates
    if reference == "hotelling":
        p = numerics.sf(numerics.hotelling_t2(j, frame.n - 2), w)
    elif reference == "wald-chisq":
        p = numerics.sf(numerics.chi2(j), w)
    else:
        raise ValueError(f"unknown reference {reference!r}")
    return w, float(p)


def lm_balance(frame, studentization="classic"):
    """Regression of the treatment indicator on an intercept and covariates.

    The report carries marginal t statistics (reference t_{N-1-J}) and, in
    ``extra``, the F-test and the Wald statistic with their p-values.
    """
    frame._need_two_arms()
    n, j = frame.n, frame.n_covariates
    z = frame.treated.astype(float)
    ones = np.ones((n, 1))
    full = ols_fit(np.hstack([ones, frame.covariates]), z)
    null = ols_fit(ones, z)
    beta = full.coefficients[1:]
    cov = (full.classic_cov if studentization == "classic" else full.ehw_cov)[1:, 1:]
    t = beta / np.sqrt(np.diag(cov))
    p = numerics.two_sided_pvalue(numerics.student_t(n - 1 - j), t)
    wald = wald_stat(beta, cov)
    if studentization == "classic":
        f_stat, f_p = ols_f_test(full, null)
    else:
        f_stat = wald / j
        f_p = float(numerics.sf(numerics.f_dist(j, n - 1 - j), f_stat))
    return BalanceReport(
        marginal_stats=t,
        marginal_pvalues=np.asarray(p, dtype=float),
        joint_stat=f_stat,
        joint_pvalue=f_p,
        taux_hat=frame.taux(),
        extra={
            "beta": beta,
            "f_stat": f_stat,
            "f_pvalue": f_p,
            "wald_stat": wald,
            "wald_pvalue": float(numerics.sf(numerics.chi2(j), wald)),
        },
    )


def _sandwich(fit, labels, covariates):
    """Robust covariance of a baseline-category logit fit."""
    n = labels.size
    q = fit.n_levels
    xt = np.column_stack([np.ones(n), covariates])
    probs = fit.fitted_probabilities(covariates)[:, : q - 1]
    onehot = (labels[:, None] == np.arange(1, q)[None, :]).astype(float)
    resid = onehot - probs
    scores = (resid[:, :, None] * xt[:, None, :]).reshape(n, -1)
    meat = scores.T @ scores
    bread = fit.cov  # (N * information)^{-1}
    return bread @ meat @ bread


def mlogit_balance(frame, studentization="classic"):
    """Baseline-category logit of the arm label on the covariates.

    Marginal z statistics are ordered by (non-reference level, covariate)
    and referred to N(0, 1); the joint statistic is the likelihood-ratio
    statistic with J(Q-1) degrees of freedom.  The Wald alternative is in
    ``extra``.
    """
    labels = frame._require_labels()
    fit = mlogit_fit(labels, frame.covariates)
    beta = fit.beta
    if studentization == "classic":
        cov = fit.beta_cov
    else:
        full = _sandwich(fit, labels, frame.covariates)
        idx = fit._slope_index()
        cov = full[np.ix_(idx, idx)]
    z = beta / np.sqrt(np.diag(cov))
    p = numerics.two_sided_pvalue(numerics.normal(), z)
    dof = frame.n_covariates * (frame.arm_count - 1)
    lam = mlogit_lrt(fit, labels)
    lam_p = float(numerics.sf(numerics.chi2(dof), lam))
    wald = wald_stat(beta, cov)
    means = frame.arm_means()
    taux = means[0] - means[1] if frame.arm_count == 2 else means.reshape(-1)
    return BalanceReport(
        marginal_stats=z,
        marginal_pvalues=np.asarray(p, dtype=float),
        joint_stat=lam,
        joint_pvalue=lam_p,
        taux_hat=taux,
        extra={
            "beta": beta,
            "lrt_stat": lam,
            "lrt_pvalue": lam_p,
            "wald_stat": wald,
            "wald_pvalue": float(numerics.sf(numerics.chi2(dof), wald)),
            "iterations": fit.iterations,
        },
    )


def logit_balance(frame, studentization="classic"):
    """Two-arm logistic regression of the treatment on the covariates."""
    frame._need_two_arms()
    return mlogit_balance(frame, studentization)


def f_balance(frame):
    """One-way ANOVA F statistic for each covariate across arms."""
    labels = frame._require_labels()
    q, n = frame.arm_count, frame.n
    means = frame.arm_means()
    between = (frame.arm_sizes[:, None] * means**2).sum(axis=0) / (q - 1)
    resid = frame.covariates - means[labels - 1]
    within_ss = np.einsum("ij,ij->j", resid, resid)
    if np.any(within_ss <= 1e-24 * np.einsum("ij,ij->j", frame.covariates, frame.covariates)):
        raise DegenerateWithinVariance("a covariate is constant within every arm")
    f = between / (within_ss / (n - q))
    p = numerics.sf(numerics.f_dist(q - 1, n - q), f)
    return f, np.asarray(p, dtype=float)


def rem_check(frame, a0):
    """Mahalanobis distance of the covariate mean difference and whether it
    is within ``a0``."""
    frame._need_two_arms()
    n1, n0 = frame.arm_sizes
    tau = frame.taux()
    d = float(tau @ frame.s2x_inv @ tau) / (1.0 / n1 + 1.0 / n0)
    return d, d <= a0


def _decide(report, scheme, count):
    ok = True
    if scheme.uses_marginal:
        alphas = scheme.marginal_thresholds(count)
        ok = ok and bool(np.all(report.marginal_pvalues >= alphas))
    if scheme.uses_joint:
        ok = ok and bool(report.joint_pvalue >= scheme.alpha_joint)
    return ok


def evaluate(frame, scheme):
    """Compute the statistics required by ``scheme`` and decide acceptance.

    A multinomial-logit fit that fails (separation or non-convergence) is
    treated as a rejection and counted in ``diagnostics["mle_failures"]``.
    """
    model, j, q = scheme.model, frame.n_covariates, frame.arm_count
    if model in ("t", "lm", "logit", "rem") and q != 2:
        raise IncompatibleScheme(f"model {model!r} needs two arms, frame has {q}")
    if j == 0:
        raise IncompatibleScheme("balance checks need at least one covariate")
    stud = scheme.studentization
    diag = {"mle_failures": 0}

    if model == "t":
        if scheme.uses_marginal:
            t, p = t_marginal(frame, stud)
        else:
            t = p = np.full(j, np.nan)
        report = BalanceReport(t, p, taux_hat=frame.taux())
        if scheme.uses_joint:
            ref = "hotelling" if scheme.joint_reference == "hotelling" else "wald-chisq"
            report.joint_stat, report.joint_pvalue = t_joint(frame, ref, stud)
    elif model == "lm":
        report = lm_balance(frame, stud)
        if scheme.joint_reference == "wald":
            report.joint_stat = report.extra["wald_stat"]
            report.joint_pvalue = report.extra["wald_pvalue"]
    elif model in ("logit", "mlogit"):
        try:
            report = mlogit_balance(frame, stud)
        except (MleFailure, NotPositiveDefinite) as exc:
            count = j * (q - 1)
            diag["mle_failures"] = 1
            means = frame.arm_means()
            taux = means[0] - means[1] if q == 2 else means.reshape(-1)
            return BalanceReport(
                np.full(count, np.nan), np.zeros(count), np.nan, 0.0, taux, False, diag,
                {"error": f"{type(exc).__name__}: {exc}"},
            )
        if scheme.joint_reference == "wald":
            report.joint_stat = report.extra["wald_stat"]
            report.joint_pvalue = report.extra["wald_pvalue"]
    elif model == "f":
        f, p = f_balance(frame)
        means = frame.arm_means()
        taux = means[0] - means[1] if q == 2 else means.reshape(-1)
        report = BalanceReport(f, p, taux_hat=taux)
    else:  # rem
        a0 = float(numerics.quantile(numerics.chi2(j), 1.0 - scheme.alpha_joint))
        d, _ = rem_check(frame, a0)
        report = BalanceReport(
            np.full(0, np.nan), np.zeros(0), d, float(numerics.sf(numerics.chi2(j), d)),
            frame.taux(), extra={"a0": a0},
        )

    report.diagnostics = diag
    count = report.marginal_pvalues.size
    report.accepted = _decide(report, scheme, count)
    return report
