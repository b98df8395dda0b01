"""Least squares and multinomial-logit maximum likelihood.

``ols_fit`` solves through a Householder QR factorisation and attaches both
the classic and the heteroskedasticity-robust (sandwich) covariance.
``mlogit_fit`` runs a damped Newton-Raphson on the per-unit average
log-likelihood of a baseline-category logit whose reference level is the
highest label.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from . import numerics
from .errors import (
    ArmTooSmall,
    DimMismatch,
    NoConvergence,
    NotNested,
    NotPositiveDefinite,
    RankDeficient,
    Separation,
    TooFewRows,
)

RANK_TOL = numerics.PIVOT_TOL
INFO_COLLAPSE = 1e-8
HC_TYPES = ("HC0", "HC1", "HC2", "HC3")


@dataclass
class OlsFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    classic_cov: np.ndarray
    ehw_cov: np.ndarray
    rss: float
    n: int
    p: int
    design: np.ndarray = field(repr=False)
    response: np.ndarray = field(repr=False)

    @property
    def classic_se(self):
        return np.sqrt(np.diag(self.classic_cov))

    @property
    def ehw_se(self):
        return np.sqrt(np.diag(self.ehw_cov))


def _qr_checked(design):
    n, p = design.shape
    q, r = np.linalg.qr(design, mode="reduced")
    # R'R = X'X, so squared diagonal of R are the Cholesky pivots of X'X
    gram_diag = np.einsum("ij,ij->j", design, design)
    max_diag = gram_diag.max() if p else 0.0
    if p and (max_diag <= 0 or np.any(np.diag(r) ** 2 <= RANK_TOL * max_diag)):
        raise RankDeficient("design matrix does not have full column rank")
    return q, r


def ols_fit(design, response, hc="HC0"):
    """Ordinary least squares of ``response`` on the columns of ``design``.

    ``hc`` selects the sandwich flavour stored in ``ehw_cov``; the default
    HC0 uses squared residuals with no small-sample correction.
    """
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(response, dtype=float)
    n, p = x.shape
    if y.shape != (n,):
        raise DimMismatch(f"response has shape {y.shape}, expected ({n},)")
    if n <= p:
        raise TooFewRows(f"need more rows than regressors (N={n}, p={p})")
    if hc not in HC_TYPES:
        raise ValueError(f"hc must be one of {HC_TYPES}")

    q, r = _qr_checked(x)
    coef = linalg.solve_triangular(r, q.T @ y)
    resid = y - x @ coef
    rss = float(resid @ resid)

    r_inv = linalg.solve_triangular(r, np.eye(p))
    bread = r_inv @ r_inv.T  # (X'X)^{-1}
    classic = rss / (n - p) * bread

    weights = resid**2
    if hc == "HC1":
        weights = weights * n / (n - p)
    elif hc in ("HC2", "HC3"):
        lev = np.einsum("ij,ij->i", q, q)
        power = 1 if hc == "HC2" else 2
        weights = weights / (1.0 - lev) ** power
    # (X'X)^{-1} X' diag(w) X (X'X)^{-1} = R^{-1} Q' diag(w) Q R^{-T}
    qw = q * np.sqrt(weights)[:, None]
    half = r_inv @ qw.T
    ehw = half @ half.T

    return OlsFit(
        coefficients=coef,
        residuals=resid,
        classic_cov=0.5 * (classic + classic.T),
        ehw_cov=0.5 * (ehw + ehw.T),
        rss=rss,
        n=n,
        p=p,
        design=x,
        response=y,
    )


def ols_f_test(full, null):
    """F-test of the nested model ``null`` against ``full``.

    Returns ``(f_stat, p_value)`` using ``F(p_full - p_null, N - p_full)``.
    """
    if full.n != null.n or not np.array_equal(full.response, null.response):
        raise NotNested("models were fitted to different responses")
    if null.p > full.p or null.rss < full.rss - 1e-10 * max(1.0, full.rss):
        raise NotNested("null model is not nested in the full model")
    # every null column must lie in the span of the full design
    proj, *_ = np.linalg.lstsq(full.design, null.design, rcond=None)
    gap = null.design - full.design @ proj
    if np.linalg.norm(gap) > 1e-8 * max(1.0, np.linalg.norm(null.design)):
        raise NotNested("null regressors are not in the column space of the full design")

    df1 = full.p - null.p
    if df1 == 0:
        return 0.0, 1.0
    df2 = full.n - full.p
    f_stat = max(0.0, (null.rss - full.rss) / df1 / (full.rss / df2))
    p_value = float(numerics.sf(numerics.f_dist(df1, df2), f_stat))
    return f_stat, p_value


def wald_stat(coef, cov):
    """Quadratic form ``coef' cov^{-1} coef``."""
    return numerics.mahalanobis(coef, cov)


@dataclass
class MleFit:
    """Result of a baseline-category logit fit.

    ``theta`` stacks ``(intercept, slope_1, ..., slope_J)`` for levels
    ``1..Q-1`` in that order; level ``Q`` is the reference.  ``cov`` is the
    inverse observed information for the whole of ``theta``.
    """

    theta: np.ndarray
    cov: np.ndarray
    loglik_scaled: float
    converged: bool
    iterations: int
    n_levels: int
    n_covariates: int
    gradient_norm: float = 0.0

    def _slope_index(self):
        width = self.n_covariates + 1
        return np.array(
            [q * width + 1 + j for q in range(self.n_levels - 1) for j in range(self.n_covariates)],
            dtype=int,
        )

    @property
    def beta(self):
        """Slopes only, ordered by (level, covariate)."""
        return self.theta[self._slope_index()]

    @property
    def beta_cov(self):
        idx = self._slope_index()
        return self.cov[np.ix_(idx, idx)]

    def fitted_probabilities(self, covariates):
        """Per-unit probabilities of levels 1..Q (columns)."""
        x = np.atleast_2d(np.asarray(covariates, dtype=float))
        if x.shape[1] != self.n_covariates:
            x = x.reshape(-1, self.n_covariates)
        xt = np.column_stack([np.ones(x.shape[0]), x])
        return _probabilities(xt, self.theta.reshape(self.n_levels - 1, -1).T)


def _probabilities(xt, coef):
    eta = xt @ coef
    full = np.column_stack([eta, np.zeros(eta.shape[0])])
    full -= full.max(axis=1, keepdims=True)
    ex = np.exp(full)
    return ex / ex.sum(axis=1, keepdims=True)  # last column = reference level


def _loglik(xt, onehot, coef):
    eta = xt @ coef
    lse = logsumexp(np.column_stack([eta, np.zeros(eta.shape[0])]), axis=1)
    return float(np.mean(np.sum(onehot * eta, axis=1) - lse))


def _score_and_hessian(xt, onehot, coef):
    n, k = xt.shape
    m = coef.shape[1]
    probs = _probabilities(xt, coef)[:, :m]
    score = (xt.T @ (onehot - probs) / n).T.reshape(-1)
    hess = np.empty((m * k, m * k))
    for a in range(m):
        for b in range(a, m):
            w = probs[:, a] * (probs[:, b] - (1.0 if a == b else 0.0))
            block = (xt * w[:, None]).T @ xt / n
            hess[a * k:(a + 1) * k, b * k:(b + 1) * k] = block
            hess[b * k:(b + 1) * k, a * k:(a + 1) * k] = block.T
    return score, hess


def null_theta(labels, n_levels, n_cov):
    """Intercept-only optimum: intercepts log(e_q / e_Q), zero slopes."""
    counts = np.bincount(labels, minlength=n_levels + 1)[1:]
    coef = np.zeros((n_cov + 1, n_levels - 1))
    coef[0, :] = np.log(counts[:-1] / counts[-1])
    return coef


def null_loglik(labels, n_levels):
    counts = np.bincount(labels, minlength=n_levels + 1)[1:]
    shares = counts / counts.sum()
    return float(np.sum(shares * np.log(shares)))


def mlogit_fit(labels, covariates, max_iter=100, tol=1e-10, max_halvings=30, diverge_at=1e4):
    """Maximum-likelihood fit of the baseline-category logit of ``labels``
    (values ``1..Q``) on an intercept plus ``covariates``.

    Starts from the intercept-only optimum and takes Newton steps, halving
    any step that lowers the log-likelihood.
    """
    labels = np.asarray(labels, dtype=int)
    n = labels.size
    if covariates is None:
        covariates = np.zeros((n, 0))
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != n:
        raise DimMismatch("labels and covariates differ in length")
    n_levels = int(labels.max())
    if labels.min() < 1 or n_levels < 2:
        raise ValueError("labels must take values 1..Q with Q >= 2")
    counts = np.bincount(labels, minlength=n_levels + 1)[1:]
    if np.any(counts < 2):
        raise ArmTooSmall(f"every level needs at least two units, got counts {counts.tolist()}")
    n_cov = x.shape[1]
    xt = np.column_stack([np.ones(n), x])
    _qr_checked(xt)

    onehot = (labels[:, None] == np.arange(1, n_levels)[None, :]).astype(float)
    coef = null_theta(labels, n_levels, n_cov)
    ll = _loglik(xt, onehot, coef)
    converged = False
    it = 0
    score, hess = _score_and_hessian(xt, onehot, coef)
    start_info = np.linalg.eigvalsh(-hess).max()
    for it in range(1, max_iter + 1):
        if np.max(np.abs(score)) < tol:
            converged = True
            it -= 1
            break
        try:
            step = numerics.solve_spd(-hess, score)
        except NotPositiveDefinite:
            raise Separation("information matrix became singular") from None
        step = step.reshape(n_levels - 1, n_cov + 1).T
        t = 1.0
        for _ in range(max_halvings + 1):
            trial = coef + t * step
            trial_ll = _loglik(xt, onehot, trial)
            if trial_ll >= ll - 1e-15 * abs(ll):
                break
            t *= 0.5
        else:
            raise NoConvergence("step-halving failed to increase the log-likelihood")
        coef, ll = trial, trial_ll
        if np.linalg.norm(coef) > diverge_at:
            raise Separation("coefficient norm diverged; the levels look separable")
        score, hess = _score_and_hessian(xt, onehot, coef)
    else:
        if np.max(np.abs(score)) < tol:
            converged = True
    if not converged:
        raise NoConvergence(f"Newton-Raphson did not converge in {max_iter} iterations")

    # saturated fits: the score vanishes while the information collapses
    if np.linalg.eigvalsh(-hess).min() < INFO_COLLAPSE * start_info:
        raise Separation("information collapsed at the optimum; the levels look separable")
    try:
        cov = numerics.invert_spd(-n * hess)
    except NotPositiveDefinite:
        raise Separation("information matrix is singular at the optimum") from None
    return MleFit(
        theta=coef.T.reshape(-1).copy(),
        cov=cov,
        loglik_scaled=ll,
        converged=True,
        iterations=it,
        n_levels=n_levels,
        n_covariates=n_cov,
        gradient_norm=float(np.max(np.abs(score))),
    )


def mlogit_lrt(fit, labels, covariates=None):
    """Likelihood-ratio statistic against the intercept-only model."""
    labels = np.asarray(labels, dtype=int)
    lam = 2.0 * labels.size * (fit.loglik_scaled - null_loglik(labels, fit.n_levels))
    if lam < 0:
        if lam < -1e-8:
            raise ValueError(f"negative likelihood-ratio statistic {lam:.3g}; fit is not the MLE")
        lam = 0.0
    return lam


def mlogit_loglik(theta, labels, covariates):
    """Scaled log-likelihood at an arbitrary parameter vector."""
    labels = np.asarray(labels, dtype=int)
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n_levels = int(labels.max())
    xt = np.column_stack([np.ones(labels.size), x])
    onehot = (labels[:, None] == np.arange(1, n_levels)[None, :]).astype(float)
    coef = np.asarray(theta, dtype=float).reshape(n_levels - 1, xt.shape[1]).T
    return _loglik(xt, onehot, coef)
