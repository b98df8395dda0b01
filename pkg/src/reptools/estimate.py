"""Regression estimators of treatment effects with robust covariances.

Kinds:
    ``N``  difference in means, ``lm(Y ~ 1 + Z)``
    ``F``  additive adjustment, ``lm(Y ~ 1 + Z + x)``
    ``L``  fully interacted adjustment, ``lm(Y ~ 1 + Z + x + Z:x)``

Covariates are centred at their full-sample means (the frame guarantees
this), which makes the coefficient of ``Z`` in the interacted fit the
adjusted mean difference.
"""

from dataclasses import dataclass, field

import numpy as np

from . import asymlaw, numerics
from .errors import ArmTooSmall, DimMismatch, InvalidFrame
from .regression import ols_fit

KINDS = ("N", "F", "L")


def _kind(kind):
    k = str(kind).upper()
    if k not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    return k


@dataclass
class EffectEstimate:
    kind: str
    point: object
    ehw_cov: np.ndarray
    normal_ci: np.ndarray
    level: float = 0.95
    plugin_ci: np.ndarray = None
    gamma_hats: np.ndarray = None
    c_hats: dict = field(default_factory=dict)
    lin_variance: object = None
    n: int = 0
    adjust_slope: np.ndarray = None

    @property
    def se(self):
        return np.sqrt(np.diag(np.atleast_2d(self.ehw_cov)))

    def to_dict(self):
        def plain(v):
            if v is None:
                return None
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            return v

        return {
            "kind": self.kind,
            "point": plain(np.asarray(self.point)) if np.ndim(self.point) else float(self.point),
            "se": plain(self.se),
            "ehw_cov": plain(np.atleast_2d(self.ehw_cov)),
            "level": self.level,
            "normal_ci": plain(self.normal_ci),
            "plugin_ci": plain(self.plugin_ci),
            "gamma_hats": plain(self.gamma_hats),
            "c_hats": {k: plain(v) for k, v in self.c_hats.items()},
            "lin_variance": plain(self.lin_variance),
        }


def normal_interval(point, se, level=0.95):
    z = float(numerics.quantile(numerics.normal(), 0.5 + level / 2.0))
    point = np.asarray(point, dtype=float)
    return np.stack([point - z * se, point + z * se], axis=-1)


def _require_data(frame):
    if frame.labels is None or frame.outcomes is None:
        raise InvalidFrame("estimation needs an assignment and outcomes")


def _per_arm_slopes(frame):
    """Q x J slopes from the fully interacted fit, plus the fit itself."""
    q, j, n = frame.arm_count, frame.n_covariates, frame.n
    labels = frame.labels
    if np.any(frame.arm_sizes < j + 2):
        raise ArmTooSmall(f"the interacted fit needs at least J+2={j + 2} units per arm")
    ind = (labels[:, None] == np.arange(1, q + 1)[None, :]).astype(float)
    inter = (ind[:, :, None] * frame.covariates[:, None, :]).reshape(n, q * j)
    fit = ols_fit(np.hstack([ind, inter]), frame.outcomes)
    slopes = fit.coefficients[q:].reshape(q, j)
    return slopes, fit, ind


def estimate_two_arm(frame, kind, level=0.95):
    """Point estimate, HC0 covariance and normal interval for two arms.

    Slopes from the interacted fit and the implied covariance vectors used
    by plug-in inference are attached whatever the kind.
    """
    kind = _kind(kind)
    _require_data(frame)
    frame._need_two_arms()
    n, j = frame.n, frame.n_covariates
    z = frame.treated.astype(float)
    y = frame.outcomes
    x = frame.covariates
    ones = np.ones((n, 1))

    if j:
        slopes, lin_fit, _ = _per_arm_slopes(frame)
        gamma1, gamma0 = slopes
        # contrast between the two arm intercepts of the interacted fit
        g = np.zeros(lin_fit.p)
        g[0], g[1] = 1.0, -1.0
        lin_var = n * float(g @ lin_fit.ehw_cov @ g)
    else:
        gamma1 = gamma0 = np.zeros(0)
        lin_var = None

    if kind == "N" or j == 0:
        fit = ols_fit(np.hstack([ones, z[:, None]]), y)
    elif kind == "F":
        fit = ols_fit(np.hstack([ones, z[:, None], x]), y)
    else:
        fit = ols_fit(np.hstack([ones, z[:, None], x, z[:, None] * x]), y)
    point = float(fit.coefficients[1])
    var = float(fit.ehw_cov[1, 1])
    if j == 0:
        lin_var = n * var

    e1, e0 = frame.shares
    if kind == "N" or j == 0:
        adjust = np.zeros(j)
    elif kind == "F":
        adjust = fit.coefficients[2:]
    else:
        adjust = e0 * gamma1 + e1 * gamma0
    c_hats = {}
    if j:
        for k in KINDS:
            c_hats[k] = asymlaw.c_two_arm(frame.s2x, gamma1, gamma0, e1, e0, k)
    return EffectEstimate(
        kind=kind,
        point=point,
        ehw_cov=np.array([[var]]),
        normal_ci=normal_interval(point, np.sqrt(var), level),
        level=level,
        gamma_hats=np.vstack([gamma1, gamma0]) if j else np.zeros((2, 0)),
        c_hats=c_hats,
        lin_variance=lin_var,
        n=n,
        adjust_slope=adjust,
    )


def estimate_multi_arm(frame, kind, level=0.95):
    """Arm-mean estimates ``Y_hat`` (length Q) with their HC0 covariance.

    Regresses the outcome on all Q arm indicators (no intercept), adding the
    centred covariates for kind F and arm-by-covariate interactions for
    kind L; the indicator coefficients are the adjusted arm means.
    """
    kind = _kind(kind)
    _require_data(frame)
    q, j, n = frame.arm_count, frame.n_covariates, frame.n
    labels = frame.labels
    ind = (labels[:, None] == np.arange(1, q + 1)[None, :]).astype(float)
    if j:
        slopes, lin_fit, _ = _per_arm_slopes(frame)
    else:
        slopes, lin_fit = np.zeros((q, 0)), None

    if kind == "N" or j == 0:
        fit = ols_fit(ind, frame.outcomes)
    elif kind == "F":
        fit = ols_fit(np.hstack([ind, frame.covariates]), frame.outcomes)
    else:
        fit = lin_fit
    point = fit.coefficients[:q]
    cov = fit.ehw_cov[:q, :q]
    lin_cov = (lin_fit.ehw_cov[:q, :q] if lin_fit is not None else cov) * n
    return EffectEstimate(
        kind=kind,
        point=point,
        ehw_cov=cov,
        normal_ci=normal_interval(point, np.sqrt(np.diag(cov)), level),
        level=level,
        gamma_hats=slopes,
        lin_variance=lin_cov,
        n=n,
    )


class Contrast:
    """Contrast matrix ``G`` whose rows are orthogonal to the all-ones
    vector."""

    def __init__(self, matrix):
        g = np.atleast_2d(np.asarray(matrix, dtype=float))
        scale = np.maximum(1.0, np.abs(g).sum(axis=1))
        if np.any(np.abs(g.sum(axis=1)) > 1e-12 * scale):
            raise ValueError("every contrast row must sum to zero")
        if np.any(np.all(g == 0, axis=1)):
            raise ValueError("contrast rows must be nonzero")
        self.matrix = g

    @classmethod
    def pairwise(cls, q, a, b):
        """``Y(a) - Y(b)`` with 1-based arm labels."""
        g = np.zeros(q)
        g[a - 1], g[b - 1] = 1.0, -1.0
        return cls(g)

    @classmethod
    def average_vs(cls, q, control, treated=None):
        """Average of ``treated`` arms minus the ``control`` arm."""
        treated = [t for t in range(1, q + 1) if t != control] if treated is None else list(treated)
        g = np.zeros(q)
        g[np.asarray(treated) - 1] = 1.0 / len(treated)
        g[control - 1] = -1.0
        return cls(g)


def apply_contrast(point, cov, g):
    """``(G Y_hat, G V G')``."""
    gm = g.matrix if isinstance(g, Contrast) else Contrast(g).matrix
    point = np.asarray(point, dtype=float)
    cov = np.atleast_2d(cov)
    if gm.shape[1] != point.size or cov.shape != (point.size, point.size):
        raise DimMismatch("contrast, estimate and covariance dimensions differ")
    c = gm @ cov @ gm.T
    return gm @ point, 0.5 * (c + c.T)


def plugin_inference(estimate, frame, scheme, level=0.95, law_draws=100_000, rng=None, law_sample=None):
    """Rerandomization-aware interval for a two-arm estimate.

    The sampling law is estimated by replacing the interacted-fit variance
    and the covariance vector with their sample analogues; the interval
    inverts equal-tailed Monte Carlo quantiles.  For kind ``L`` the law does
    not change under rerandomization and the normal interval is returned.
    """
    if estimate.kind == "L":
        return np.array(estimate.normal_ci, dtype=float)
    params = asymlaw.build_law_params_two_arm(frame, scheme, estimate)
    tail = (1.0 - level) / 2.0
    lo, hi = asymlaw.convolution_quantiles(params, [tail, 1.0 - tail], law_draws, rng, law_sample=law_sample)
    root_n = np.sqrt(frame.n)
    return np.array([estimate.point - hi / root_n, estimate.point - lo / root_n])


def plugin_inference_multi_arm(estimate, frame, scheme, contrast, level=0.95, law_draws=100_000, rng=None):
    """Experimental: plug-in interval for ``G Y_hat`` under a multi-arm
    scheme, using fitted per-arm slopes."""
    g = contrast if isinstance(contrast, Contrast) else Contrast(contrast)
    point, cov = apply_contrast(estimate.point, estimate.ehw_cov, g)
    if estimate.kind == "L":
        return normal_interval(point, np.sqrt(np.diag(cov)), level)
    params = asymlaw.build_law_params_multi_arm(frame, scheme, estimate.gamma_hats, estimate.kind, estimate.lin_variance)
    tail = (1.0 - level) / 2.0
    qs = asymlaw.convolution_quantiles(params, [tail, 1.0 - tail], law_draws, rng, contrast=g.matrix)
    qs = np.atleast_2d(qs.T) if qs.ndim == 2 else qs[None, :]
    root_n = np.sqrt(frame.n)
    return np.stack([point - qs[:, 1] / root_n, point - qs[:, 0] / root_n], axis=-1)
