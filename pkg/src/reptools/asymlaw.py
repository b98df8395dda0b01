"""Truncated-normal limit laws under rerandomization.

Under an acceptance rule the scaled estimation error of a regression
estimator behaves like ``sqrt(v_lin) * eps + loading @ T`` where ``eps`` is
standard normal and ``T`` is a normal vector conditioned on a symmetric
convex acceptance region.  This module describes such regions
(:class:`ConstrainedLaw`), samples them by plain rejection, assembles the
loading for each scheme, and evaluates quantiles of the convolution.

The population-side matrices for several arms are also here.  Notation for
``Q`` arms with shares ``e`` (level ``Q`` last) and covariate covariance
``S``:

* ``V_x = (diag(1/e) - 11') (x) S``: limiting covariance of stacked arm means
* ``V_x+ = (diag(1/e_+) - 11') (x) S``: the same with level ``Q`` dropped
* ``Phi = diag(e_+) - e_+ e_+'`` and ``Psi = (Phi^{-1} diag(e_+)) (x) S^{-1}``
* ``V_Psi = Psi V_x+ Psi'`` which simplifies to ``Phi^{-1} (x) S^{-1}``
"""

from dataclasses import dataclass

import numpy as np

from . import numerics
from .design import as_generator
from .errors import DimMismatch, IncompatibleScheme, LawSamplingFailure

MIN_ACCEPT_RATE = 1e-4
PROBE_PROPOSALS = 10**5
BATCH = 20000


@dataclass(frozen=True, eq=False)
class ConstrainedLaw:
    """``N(0, cov)`` conditioned on the listed constraints.

    box:        ``|x_k| <= box[k]`` for every coordinate.
    ellipsoid:  ``(metric, radius)`` meaning ``x' metric^{-1} x <= radius``.
    f_constraint: ``(weights, bounds)`` for a vector laid out as ``Q`` blocks
                  of ``J``; requires ``sum_q weights[q] x_{qj}^2 <= bounds[j]``.
    """

    cov: np.ndarray
    box: np.ndarray = None
    ellipsoid: tuple = None
    f_constraint: tuple = None

    def __post_init__(self):
        cov = numerics.as_sym(self.cov)
        object.__setattr__(self, "cov", cov)
        d = cov.shape[0]
        if self.box is None and self.ellipsoid is None and self.f_constraint is None:
            raise ValueError("a constrained law needs at least one constraint")
        if self.box is not None:
            box = np.asarray(self.box, dtype=float).reshape(-1)
            if box.size != d or np.any(box < 0):
                raise DimMismatch("box limits must be nonnegative with one entry per coordinate")
            object.__setattr__(self, "box", box)
        if self.ellipsoid is not None:
            metric, radius = self.ellipsoid
            metric = numerics.as_sym(metric)
            if metric.shape != (d, d) or not radius > 0:
                raise DimMismatch("ellipsoid metric must match the covariance; radius must be positive")
            object.__setattr__(self, "ellipsoid", (metric, float(radius)))
            object.__setattr__(self, "_metric_inv", numerics.invert_spd(metric))
        if self.f_constraint is not None:
            weights, bounds = self.f_constraint
            weights = np.asarray(weights, dtype=float)
            bounds = np.asarray(bounds, dtype=float)
            if weights.size * bounds.size != d:
                raise DimMismatch("f-constraint layout does not match the dimension")
            object.__setattr__(self, "f_constraint", (weights, bounds))

    @property
    def dim(self):
        return self.cov.shape[0]

    def contains(self, draws):
        """Boolean mask of rows of ``draws`` that satisfy every constraint."""
        x = np.atleast_2d(draws)
        ok = np.ones(x.shape[0], dtype=bool)
        if self.box is not None:
            ok &= np.all(np.abs(x) <= self.box, axis=1)
        if self.ellipsoid is not None:
            ok &= np.einsum("ij,jk,ik->i", x, self._metric_inv, x) <= self.ellipsoid[1]
        if self.f_constraint is not None:
            weights, bounds = self.f_constraint
            blocks = x.reshape(x.shape[0], weights.size, bounds.size)
            ok &= np.all(np.einsum("q,iqj->ij", weights, blocks**2) <= bounds, axis=1)
        return ok

    def with_cov(self, cov):
        return ConstrainedLaw(cov, self.box, self.ellipsoid, self.f_constraint)


def _factor(cov):
    try:
        return numerics.cholesky(cov)
    except Exception:
        # singular covariance (e.g. stacked arm means): symmetric root works
        return numerics.sym_sqrt(cov)


def sample_normal(cov, n, rng):
    gen = as_generator(rng)
    f = _factor(cov)
    return gen.standard_normal((n, f.shape[1])) @ f.T


def sample_constrained(law, n, rng, batch=BATCH):
    """``n`` independent draws from ``law`` by rejection from ``N(0, cov)``.

    Raises :class:`LawSamplingFailure` (an ``AcceptanceTooLow``) when, after
    at least 1e5 proposals, fewer than a fraction 1e-4 have been accepted.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    gen = as_generator(rng)
    f = _factor(law.cov)
    kept, n_kept, proposed = [], 0, 0
    while n_kept < n:
        z = gen.standard_normal((batch, f.shape[1])) @ f.T
        proposed += batch
        z = z[law.contains(z)]
        kept.append(z)
        n_kept += z.shape[0]
        if proposed >= PROBE_PROPOSALS and n_kept < MIN_ACCEPT_RATE * proposed:
            raise LawSamplingFailure(
                f"acceptance rate {n_kept / proposed:.2e} after {proposed} proposals; "
                "relax the balance thresholds"
            )
    return np.concatenate(kept)[:n]


# population-side matrices ----------------------------------------------------

def vx_two_arm(s2x, e1, e0):
    return np.asarray(s2x) / (e1 * e0)


def vx_multi(s2x, shares):
    e = np.asarray(shares, dtype=float)
    return np.kron(np.diag(1.0 / e) - np.ones((e.size, e.size)), s2x)


def vx_plus(s2x, shares):
    ep = np.asarray(shares, dtype=float)[:-1]
    return np.kron(np.diag(1.0 / ep) - np.ones((ep.size, ep.size)), s2x)


def phi_matrix(shares):
    ep = np.asarray(shares, dtype=float)[:-1]
    return np.diag(ep) - np.outer(ep, ep)


def psi_matrix(s2x, shares):
    ep = np.asarray(shares, dtype=float)[:-1]
    return np.kron(np.linalg.solve(phi_matrix(shares), np.diag(ep)), numerics.invert_spd(s2x))


def v_psi(s2x, shares):
    psi = psi_matrix(s2x, shares)
    out = psi @ vx_plus(s2x, shares) @ psi.T
    return 0.5 * (out + out.T)


def kappa_matrix(shares, j):
    """Maps ``(x(1), ..., x(Q-1))`` to all ``Q`` stacked arm means using
    ``sum_q e_q x(q) = 0``."""
    e = np.asarray(shares, dtype=float)
    top = np.vstack([np.eye(e.size - 1), -e[:-1][None, :] / e[-1]])
    return np.kron(top, np.eye(j))


def gamma_blocks(slopes, kind, shares):
    """Loading of stacked arm covariate means on the arm-mean estimator.

    ``slopes`` is Q x J (one population or fitted slope per arm).
    """
    g = np.asarray(slopes, dtype=float)
    q, j = g.shape
    if kind == "L":
        return np.zeros((q, q * j))
    if kind == "F":
        g = g - np.asarray(shares, dtype=float) @ g
    elif kind != "N":
        raise ValueError(f"unknown estimator kind {kind!r}")
    out = np.zeros((q, q * j))
    for a in range(q):
        out[a, a * j:(a + 1) * j] = g[a]
    return out


def c_two_arm(s2x, gamma1, gamma0, e1, e0, kind):
    """Covariance between scaled covariate and outcome mean differences after
    adjustment, for two arms."""
    s2x = np.asarray(s2x)
    gamma1, gamma0 = np.asarray(gamma1), np.asarray(gamma0)
    if kind == "N":
        return s2x @ (gamma0 / e0 + gamma1 / e1)
    if kind == "F":
        return (1.0 / e1 - 1.0 / e0) * (s2x @ (gamma1 - gamma0))
    if kind == "L":
        return np.zeros(s2x.shape[0])
    raise ValueError(f"unknown estimator kind {kind!r}")


def chi2_threshold(dof, alpha):
    return float(numerics.quantile(numerics.chi2(dof), 1.0 - alpha))


def normal_threshold(alpha):
    return np.asarray(numerics.quantile(numerics.normal(), 1.0 - np.asarray(alpha) / 2.0), dtype=float)


# law parameters -----------------------------------------------------------

@dataclass
class LawParams:
    """Everything needed to sample ``sqrt(v_lin) eps + coef @ scale_map @ T``.

    ``v_lin`` is a scalar (two arms) or a Q x Q matrix; ``coef`` is
    ``out_dim x k`` and ``scale_map`` is ``k x law.dim``.
    """

    v_lin: object
    coef: np.ndarray
    scale_map: np.ndarray
    law: ConstrainedLaw

    @property
    def loading(self):
        return self.coef @ self.scale_map

    @property
    def out_dim(self):
        return self.coef.shape[0]

    def same_as(self, other, tol=1e-12):
        """Numerical equality of two parameter sets."""
        a, b = self.law, other.law
        pairs = [
            (np.atleast_2d(self.v_lin), np.atleast_2d(other.v_lin)),
            (self.loading, other.loading),
            (a.cov, b.cov),
        ]
        for left, right in pairs:
            if left.shape != right.shape or not np.allclose(left, right, atol=tol, rtol=tol):
                return False
        for attr in ("box",):
            x, y = getattr(a, attr), getattr(b, attr)
            if (x is None) != (y is None) or (x is not None and not np.allclose(x, y, atol=tol)):
                return False
        if (a.ellipsoid is None) != (b.ellipsoid is None):
            return False
        if a.ellipsoid is not None and not (
            np.allclose(a.ellipsoid[0], b.ellipsoid[0], atol=tol) and abs(a.ellipsoid[1] - b.ellipsoid[1]) <= tol
        ):
            return False
        return (a.f_constraint is None) == (b.f_constraint is None)


def two_arm_law(s2x, e1, e0, scheme):
    """Return ``(law, scale_map)`` for the constrained covariate term under a
    two-arm scheme; the scale map carries it to the ``v_x^{-1} sqrt(N) tau_x``
    scale so that the estimator term is ``c' scale_map T``."""
    vx = vx_two_arm(s2x, e1, e0)
    j = vx.shape[0]
    model, rule = scheme.model, scheme.rule
    if model == "mlogit":
        model = "logit"
    if model == "f":
        if rule != "marginal":
            raise IncompatibleScheme("the F model supports the marginal rule only")
        model = "t"
    if model not in ("t", "lm", "logit", "rem"):
        raise IncompatibleScheme(f"model {scheme.model!r} has no two-arm law")

    a0 = chi2_threshold(j, scheme.alpha_joint) if scheme.uses_joint else None
    if rule == "joint":
        law = ConstrainedLaw(np.eye(j), ellipsoid=(np.eye(j), a0))
        return law, numerics.sym_inv_sqrt(vx)

    box = normal_threshold(scheme.marginal_thresholds(j))
    if model == "t":
        sigma, corr = numerics.sigma_and_corr(vx)
        scale = numerics.invert_spd(vx) @ sigma
    else:
        sigma, corr = numerics.sigma_and_corr(numerics.invert_spd(vx))
        scale = sigma
    ellipsoid = (corr, a0) if rule == "consensus" else None
    return ConstrainedLaw(corr, box=box, ellipsoid=ellipsoid), scale


def build_law_params_two_arm(frame, scheme, estimate):
    """Plug-in law for a two-arm estimate under ``scheme``.

    ``estimate`` supplies the kind, ``lin_variance`` (N times the squared
    robust standard error of the fully interacted estimator) and the fitted
    covariance vector ``c_hats[kind]``.
    """
    if frame.arm_count != 2:
        raise IncompatibleScheme("two-arm law requested for a multi-arm frame")
    e1, e0 = frame.shares
    law, scale = two_arm_law(frame.s2x, e1, e0, scheme)
    c = np.asarray(estimate.c_hats.get(estimate.kind, np.zeros(frame.n_covariates)), dtype=float)
    return LawParams(float(estimate.lin_variance), c[None, :], scale, law)


def multi_arm_law(s2x, shares, scheme, slopes, kind):
    """Return ``(coef, scale_map, law)`` for several arms.

    ``coef`` maps the model-specific covariate vector onto the Q arm means.
    """
    s2x = np.asarray(s2x)
    e = np.asarray(shares, dtype=float)
    q, j = e.size, s2x.shape[0]
    gam = gamma_blocks(slopes, kind, e)
    if scheme.model == "f":
        if scheme.rule != "marginal":
            raise IncompatibleScheme("the F model supports the marginal rule only")
        alphas = scheme.marginal_thresholds(j)
        bounds = np.array([chi2_threshold(q - 1, a) for a in alphas]) * np.diag(s2x)
        law = ConstrainedLaw(vx_multi(s2x, e), f_constraint=(e, bounds))
        return gam, np.eye(q * j), law
    if scheme.model not in ("mlogit", "logit"):
        raise IncompatibleScheme(f"model {scheme.model!r} has no multi-arm law")

    gam_prime = gam @ kappa_matrix(e, j)
    k = (q - 1) * j
    a0 = chi2_threshold(k, scheme.alpha_joint) if scheme.uses_joint else None
    if scheme.rule == "joint":
        law = ConstrainedLaw(np.eye(k), ellipsoid=(np.eye(k), a0))
        return gam_prime, numerics.sym_sqrt(vx_plus(s2x, e)), law
    vpsi = v_psi(s2x, e)
    sigma, corr = numerics.sigma_and_corr(vpsi)
    scale = np.linalg.solve(psi_matrix(s2x, e), sigma)
    box = normal_threshold(scheme.marginal_thresholds(k))
    ellipsoid = (corr, a0) if scheme.rule == "consensus" else None
    return gam_prime, scale, ConstrainedLaw(corr, box=box, ellipsoid=ellipsoid)


def build_law_params_multi_arm(frame, scheme, slopes, kind, v_lin):
    """Plug-in law for the vector of arm means under a multi-arm scheme.

    ``slopes`` is Q x J, ``v_lin`` the Q x Q scaled covariance of the fully
    interacted estimator.
    """
    coef, scale, law = multi_arm_law(frame.s2x, frame.shares, scheme, slopes, kind)
    return LawParams(np.asarray(v_lin, dtype=float), coef, scale, law)


def convolution_draws(params, n_draws, rng, law_sample=None):
    """Draws of ``sqrt(v_lin) eps + loading T`` (shape ``n x out_dim``).

    ``law_sample`` lets callers reuse constrained draws across repeated
    evaluations with different ``v_lin``/``coef``.
    """
    gen = as_generator(rng)
    if law_sample is None:
        law_sample = sample_constrained(params.law, n_draws, gen)
    t = np.asarray(law_sample)[:n_draws]
    n = t.shape[0]
    v = np.atleast_2d(params.v_lin)
    out = t @ params.loading.T
    if v.shape == (1, 1):
        out = out + np.sqrt(max(v[0, 0], 0.0)) * gen.standard_normal((n, 1))
    else:
        out = out + sample_normal(v, n, gen)
    return out


def convolution_quantiles(params, probs, n_draws, rng, contrast=None, law_sample=None):
    """Monte Carlo quantiles of the convolution law (order statistics).

    With several outputs, ``contrast`` (a matrix or vector) is applied first;
    quantiles are then computed per output coordinate.
    """
    probs = np.asarray(probs, dtype=float)
    if np.any((probs <= 0) | (probs >= 1)):
        raise ValueError("probabilities must lie in (0, 1)")
    draws = convolution_draws(params, n_draws, rng, law_sample)
    if contrast is not None:
        draws = draws @ np.atleast_2d(contrast).T
    qs = np.quantile(draws, probs, axis=0, method="inverted_cdf")
    return qs[:, 0] if qs.shape[1] == 1 else qs
