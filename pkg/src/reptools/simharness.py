"""Monte Carlo harness: synthetic populations, replications and summaries.

Replications follow a filtering design: each replication draws one complete
randomization, computes every estimator once, and then only flags whether
each balance scheme would have accepted that draw.  Complete-randomization
statistics therefore come from the superset of all draws.
"""

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import asymlaw
from .balance import BalanceScheme, ExperimentFrame, evaluate
from .design import RngStream, complete_randomization
from .errors import InvalidSpec, MissingPotentials, TooFewAccepted
from .estimate import Contrast, apply_contrast, estimate_multi_arm, estimate_two_arm, normal_interval

SCHEMA_VERSION = 1
LINKS = ("cubic-sum", "linear", "binary-logit-synthetic")
CRE_ID = "CRE"
KINDS = ("N", "F", "L")
GAPS = (("N", "F"), ("N", "L"), ("F", "L"))
LAW_STREAM_BASE = 2**64 - 1  # law pre-sampling streams count down from here


@dataclass
class PopulationSpec:
    """Recipe for a finite population of covariates and potential outcomes.

    ``noise_scales`` has one entry per arm; ``signs`` (cubic-sum) and
    ``slopes`` (linear, one row per arm) shape the outcome surfaces.
    """

    n: int
    arm_sizes: tuple
    n_covariates: int
    link: str = "cubic-sum"
    noise_scales: tuple = None
    signs: tuple = None
    slopes: list = None
    center_potentials: bool = True
    contrast: list = None
    name: str = "custom"

    def __post_init__(self):
        self.arm_sizes = tuple(int(a) for a in self.arm_sizes)
        q = len(self.arm_sizes)
        if self.link not in LINKS:
            raise InvalidSpec(f"link must be one of {LINKS}")
        if q < 2 or sum(self.arm_sizes) != self.n or min(self.arm_sizes) < 2:
            raise InvalidSpec("arm sizes must have at least two entries >= 2 summing to n")
        if self.n_covariates < 0:
            raise InvalidSpec("n_covariates must be nonnegative")
        if self.noise_scales is None:
            self.noise_scales = (0.0,) * q
        self.noise_scales = tuple(float(s) for s in self.noise_scales)
        if len(self.noise_scales) != q or min(self.noise_scales) < 0:
            raise InvalidSpec("need one nonnegative noise scale per arm")
        if self.signs is None:
            self.signs = tuple(1.0 if k % 2 == 0 else -1.0 for k in range(q))
        self.signs = tuple(float(s) for s in self.signs)
        if len(self.signs) != q:
            raise InvalidSpec("need one sign per arm")
        if self.link == "linear":
            if self.slopes is None:
                self.slopes = [[float(k + 1)] * self.n_covariates for k in range(q)]
            s = np.asarray(self.slopes, dtype=float)
            if s.shape != (q, self.n_covariates):
                raise InvalidSpec("linear link needs a Q x J slope matrix")
            self.slopes = s.tolist()
        if self.link == "binary-logit-synthetic" and self.n_covariates != 7:
            raise InvalidSpec("the synthetic binary population has exactly 7 covariates")
        if self.contrast is None:
            g = np.zeros(q)
            g[0], g[1] = 1.0, -1.0
            if q > 2:
                g = Contrast.average_vs(q, control=1).matrix[0]
            self.contrast = g.tolist()
        try:
            Contrast(self.contrast)
        except ValueError as exc:
            raise InvalidSpec(str(exc)) from None

    @property
    def arm_count(self):
        return len(self.arm_sizes)

    def to_dict(self):
        d = asdict(self)
        d["arm_sizes"] = list(self.arm_sizes)
        d["noise_scales"] = list(self.noise_scales)
        d["signs"] = list(self.signs)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            base = PRESETS.get(preset)
            if base is None:
                raise InvalidSpec(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            merged = base().to_dict()
            merged.update(d)
            d = merged
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None

    @classmethod
    def cubic_two_arm(cls, arm_sizes=(100, 400)):
        """Two arms, five uniform covariates, opposite cubic surfaces and
        unequal noise (0.4 treated, 0.1 control); both potential-outcome
        columns are centred so the average effect is exactly zero."""
        return cls(
            n=sum(arm_sizes),
            arm_sizes=tuple(arm_sizes),
            n_covariates=5,
            link="cubic-sum",
            noise_scales=(0.4, 0.1),
            signs=(1.0, -1.0),
            name="cubic-two-arm",
        )

    @classmethod
    def binary_four_arm(cls):
        """Four arms of sizes 526, 610, 584, 578 with seven covariates and
        binary outcomes imputed from a logit surface."""
        return cls(
            n=2298,
            arm_sizes=(526, 610, 584, 578),
            n_covariates=7,
            link="binary-logit-synthetic",
            noise_scales=(0.0, 0.0, 0.0, 0.0),
            center_potentials=False,
            name="binary-four-arm",
        )


PRESETS = {
    "cubic-two-arm": PopulationSpec.cubic_two_arm,
    "binary-four-arm": PopulationSpec.binary_four_arm,
}


@dataclass
class PotentialOutcomeTable:
    covariates: np.ndarray
    potentials: np.ndarray
    arm_sizes: tuple
    spec: PopulationSpec = None
    seed: int = None

    @property
    def n(self):
        return self.covariates.shape[0]

    @property
    def arm_means(self):
        return self.potentials.mean(axis=0)

    def tau(self, contrast=None):
        g = np.asarray(self.spec.contrast if contrast is None else contrast, dtype=float)
        return np.atleast_2d(g) @ self.arm_means

    def frame(self):
        return ExperimentFrame(self.covariates, arm_sizes=self.arm_sizes)

    def observed(self, labels):
        labels = np.asarray(labels, dtype=int)
        return self.potentials[np.arange(labels.size), labels - 1]


def _synthetic_binary_covariates(gen, n):
    married = gen.binomial(1, 0.45, n)
    female = gen.binomial(1, 0.35, n)
    age = np.clip(gen.normal(52.0, 13.0, n), 18, 95)
    log_gift = gen.normal(3.2, 1.0, n)
    band = gen.choice(4, size=n, p=[0.3, 0.3, 0.25, 0.15])
    bands = np.column_stack([(band == k).astype(float) for k in (1, 2, 3)])
    return np.column_stack([married, female, age / 10.0, log_gift, bands])


def generate_population(spec, rng):
    """Draw a :class:`PotentialOutcomeTable` from ``spec``.

    ``rng`` may be an :class:`RngStream`, a numpy Generator or an integer seed.
    """
    if isinstance(rng, RngStream):
        gen, seed = rng.generator, rng.seed
    elif isinstance(rng, np.random.Generator):
        gen, seed = rng, None
    else:
        seed = int(rng)
        stream = RngStream(seed, 0)
        gen = stream.generator
    n, q, j = spec.n, spec.arm_count, spec.n_covariates

    if spec.link == "binary-logit-synthetic":
        x = _synthetic_binary_covariates(gen, n)
        xc = x - x.mean(axis=0)
        base = np.array([0.3, -0.6, 1.0, -0.4, 1.2, 0.9, -1.1])
        lift = np.array([0.0, 0.35, 0.5, 0.65])
        eta = xc @ base
        probs = 1.0 / (1.0 + np.exp(-(eta[:, None] + lift[None, :])))
        # one observed arm per unit from an initial allocation; the other
        # arms are filled in deterministically from the fitted surface
        initial = complete_randomization(spec.arm_sizes, gen)
        pot = (probs > 0.5).astype(float)
        rows = np.arange(n)
        pot[rows, initial - 1] = gen.binomial(1, probs[rows, initial - 1]).astype(float)
    else:
        if j == 0:
            raise InvalidSpec("this link needs at least one covariate")
        x = gen.uniform(-1.0, 1.0, (n, j))
        if spec.link == "cubic-sum":
            signal = (x**3).sum(axis=1)
            surfaces = np.outer(signal, spec.signs)
        else:
            surfaces = x @ np.asarray(spec.slopes, dtype=float).T
        noise = gen.standard_normal((n, q)) * np.asarray(spec.noise_scales)
        pot = surfaces + noise
        xc = x - x.mean(axis=0)

    if spec.center_potentials:
        pot = pot - pot.mean(axis=0)
    return PotentialOutcomeTable(xc, pot, spec.arm_sizes, spec, seed)


# replications --------------------------------------------------------------

@dataclass
class ReplicationRecord:
    rep_id: int
    scheme_id: str
    accepted: bool
    taux_norm: float
    estimates: dict
    se: dict
    ci_hits: dict
    plugin_hits: dict = field(default_factory=dict)
    mle_failure: bool = False

    @property
    def gaps(self):
        return {f"{a}-{b}": self.estimates[a] - self.estimates[b] for a, b in GAPS}

    def to_row(self):
        row = {
            "rep_id": self.rep_id,
            "scheme_id": self.scheme_id,
            "accepted": int(bool(self.accepted)),
            "taux_norm": self.taux_norm,
            "mle_failure": int(bool(self.mle_failure)),
        }
        for k in KINDS:
            row[f"est_{k}"] = self.estimates[k]
        for a, b in GAPS:
            row[f"gap_{a}{b}"] = self.estimates[a] - self.estimates[b]
        for k in KINDS:
            row[f"se_{k}"] = self.se[k]
        for k in KINDS:
            row[f"hit_{k}"] = int(self.ci_hits[k])
        for k in KINDS:
            v = self.plugin_hits.get(k)
            row[f"plugin_hit_{k}"] = "" if v is None else int(v)
        return row

    @classmethod
    def from_row(cls, row):
        def opt(v):
            return None if v in ("", None) else bool(int(v))

        return cls(
            rep_id=int(row["rep_id"]),
            scheme_id=str(row["scheme_id"]),
            accepted=bool(int(row["accepted"])),
            taux_norm=float(row["taux_norm"]),
            estimates={k: float(row[f"est_{k}"]) for k in KINDS},
            se={k: float(row[f"se_{k}"]) for k in KINDS},
            ci_hits={k: bool(int(row[f"hit_{k}"])) for k in KINDS},
            plugin_hits={k: opt(row.get(f"plugin_hit_{k}")) for k in KINDS if opt(row.get(f"plugin_hit_{k}")) is not None},
            mle_failure=bool(int(row.get("mle_failure", 0))),
        )


RECORD_COLUMNS = list(
    ReplicationRecord(0, "", True, 0.0, dict.fromkeys(KINDS, 0.0), dict.fromkeys(KINDS, 0.0), dict.fromkeys(KINDS, True)).to_row()
)


def _normalize_schemes(schemes):
    if isinstance(schemes, dict):
        items = list(schemes.items())
    else:
        items = []
        for s in schemes:
            if isinstance(s, BalanceScheme):
                items.append((s.name, s))
            else:
                d = dict(s)
                sid = d.pop("id", None)
                sch = BalanceScheme.from_dict(d)
                items.append((sid or sch.name, sch))
    ids = [i for i, _ in items]
    if len(set(ids)) != len(ids) or CRE_ID in ids:
        raise InvalidSpec(f"scheme ids must be unique and differ from {CRE_ID!r}")
    return items


def _estimates_for(pop, frame, contrast, level):
    """Per-kind point, standard error and interval for the target contrast."""
    out = {}
    for k in KINDS:
        if frame.arm_count == 2 and contrast is None:
            est = estimate_two_arm(frame, k, level)
            out[k] = (est.point, float(est.se[0]), est.normal_ci, est)
        else:
            est = estimate_multi_arm(frame, k, level)
            point, cov = apply_contrast(est.point, est.ehw_cov, contrast)
            se = math.sqrt(cov[0, 0])
            out[k] = (float(point[0]), se, normal_interval(point[0], se, level), est)
    return out


def _presample_laws(pop, schemes, master_seed, draws):
    """Constrained covariate draws for each two-arm scheme.

    Under a fixed population and fixed arm sizes these do not depend on the
    replication, so one sample per scheme is shared across replications.
    """
    base = pop.frame()
    e1, e0 = base.shares
    out = {}
    for k, (sid, sch) in enumerate(schemes):
        law, scale = asymlaw.two_arm_law(base.s2x, e1, e0, sch)
        stream = RngStream(master_seed, LAW_STREAM_BASE - k)
        out[sid] = (asymlaw.sample_constrained(law, draws, stream), scale)
    return out


def _plugin_hits(est_by_kind, law, n, tau, level, gen):
    sample, scale = law
    tail = (1.0 - level) / 2.0
    hits = {}
    for k in ("N", "F"):
        est = est_by_kind[k][3]
        c = est.c_hats[k]
        draws = sample @ (scale.T @ c) + math.sqrt(max(est.lin_variance, 0.0)) * gen.standard_normal(sample.shape[0])
        lo, hi = np.quantile(draws, [tail, 1.0 - tail], method="inverted_cdf")
        ci = (est.point - hi / math.sqrt(n), est.point - lo / math.sqrt(n))
        hits[k] = bool(ci[0] <= tau <= ci[1])
    hits["L"] = bool(est_by_kind["L"][2][0] <= tau <= est_by_kind["L"][2][1])
    return hits


def _run_one(rep, ctx):
    pop, base, schemes, master_seed, contrast, level, laws = ctx
    stream = RngStream(master_seed, rep)
    gen = stream.generator
    labels = complete_randomization(pop.arm_sizes, gen)
    frame = base.with_assignment(labels, pop.observed(labels))
    tau = float(pop.tau(contrast.matrix if contrast is not None else None)[0])
    ests = _estimates_for(pop, frame, contrast, level)
    if frame.arm_count == 2:
        taux_norm = float(np.linalg.norm(frame.taux()))
    else:
        taux_norm = float(np.linalg.norm(frame.arm_means()))
    point = {k: v[0] for k, v in ests.items()}
    se = {k: v[1] for k, v in ests.items()}
    hits = {k: bool(v[2][0] <= tau <= v[2][1]) for k, v in ests.items()}
    records = [ReplicationRecord(rep, CRE_ID, True, taux_norm, point, se, hits)]
    for sid, sch in schemes:
        report = evaluate(frame, sch)
        plugin = {}
        if laws is not None and report.accepted:
            plugin = _plugin_hits(ests, laws[sid], frame.n, tau, level, stream.derive(1).generator)
        records.append(
            ReplicationRecord(
                rep, sid, bool(report.accepted), taux_norm, point, se, hits, plugin,
                bool(report.diagnostics.get("mle_failures", 0)),
            )
        )
    return records


def _run_chunk(args):
    reps, ctx = args
    out = []
    for r in reps:
        out.extend(_run_one(r, ctx))
    return out


def run_replications(pop, schemes, n_reps, master_seed, parallelism=1, contrast=None,
                     level=0.95, plugin=False, plugin_draws=20000):
    """Run ``n_reps`` filtering replications and return the records.

    One record per (replication, scheme) plus a complete-randomization
    record per replication.  Replication ``r`` uses stream ``r`` of
    ``master_seed`` so the output is independent of ``parallelism``.
    ``plugin`` adds rerandomization-aware interval hits (two arms only).
    """
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    items = _normalize_schemes(schemes)
    if contrast is None and pop.spec is not None and pop.spec.arm_count > 2:
        contrast = Contrast(pop.spec.contrast)
    elif contrast is not None and not isinstance(contrast, Contrast):
        contrast = Contrast(contrast)
    laws = None
    if plugin:
        if len(pop.arm_sizes) != 2:
            raise InvalidSpec("plug-in intervals in the harness are available for two arms only")
        laws = _presample_laws(pop, items, master_seed, plugin_draws)
    ctx = (pop, pop.frame(), items, int(master_seed), contrast, level, laws)

    if parallelism <= 1 or n_reps < 2:
        return _run_chunk((range(n_reps), ctx))
    size = max(1, n_reps // (4 * parallelism))
    chunks = [range(start, min(n_reps, start + size)) for start in range(0, n_reps, size)]
    records = []
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        for part in pool.map(_run_chunk, [(c, ctx) for c in chunks]):
            records.extend(part)
    return records


# summaries -----------------------------------------------------------------

def _mean_cov(cols):
    m = np.array([c.mean() for c in cols])
    mat = np.vstack(cols)
    cov = np.cov(mat, bias=False) / mat.shape[1] if mat.shape[1] > 1 else np.zeros((len(cols), len(cols)))
    return m, np.atleast_2d(cov)


def _ratio(num, den):
    # a quantity compared with itself is a ratio of one even when both vanish
    if num == den:
        return 1.0
    return num / den if den != 0 else float("nan")


def _delta(func, cols):
    """Value and delta-method standard error of ``func(means of cols)``."""
    m, cov = _mean_cov(cols)
    value = func(m)
    if not np.any(cov):
        return float(value), 0.0
    grad = np.zeros(m.size)
    for i in range(m.size):
        h = 1e-6 * max(abs(m[i]), 1e-8)
        up, dn = m.copy(), m.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (func(up) - func(dn)) / (2 * h)
    var = float(grad @ cov @ grad)
    return float(value), math.sqrt(max(var, 0.0))


def _var_ratio(u, a):
    """var(u | a) / var(u) with its delta-method standard error."""
    def f(m):
        # m = (E[a u^2], E[a u], E[a], E[u^2], E[u])
        sub = m[0] / m[2] - (m[1] / m[2]) ** 2
        full = m[3] - m[4] ** 2
        return _ratio(sub, full)
    return _delta(f, [a * u * u, a * u, a, u * u, u])


def _moment_ratio(u, a):
    """E[u | a] / E[u] with its delta-method standard error."""
    return _delta(lambda m: _ratio(m[0] / m[1], m[2]), [a * u, a, u])


def _prop(flags):
    flags = np.asarray(flags, dtype=float)
    p = float(flags.mean()) if flags.size else float("nan")
    return p, (math.sqrt(p * (1 - p) / flags.size) if flags.size else float("nan"))


def summarize(records, min_accepted=100, level=0.95):
    """Per-scheme summary of replication records (deterministic).

    For every scheme: acceptance rate, and over accepted draws the mean,
    variance and equal-tailed quantiles of each estimator, variance ratios
    against complete randomization, the balance ratio
    ``E(|tau_x|^2 | accepted) / E(|tau_x|^2)``, second moments of the
    pairwise estimator gaps and their ratios, and interval coverage.  Every
    ratio and proportion carries a Monte Carlo standard error.
    """
    by_scheme = {}
    for r in records:
        by_scheme.setdefault(r.scheme_id, []).append(r)
    if CRE_ID not in by_scheme:
        raise TooFewAccepted("records contain no complete-randomization entries")
    cre = {r.rep_id: r for r in by_scheme[CRE_ID]}
    reps = sorted(cre)
    tail = (1.0 - level) / 2.0
    out = {}
    for sid in sorted(by_scheme, key=lambda s: (s != CRE_ID, s)):
        recs = {r.rep_id: r for r in by_scheme[sid]}
        rows = [recs[i] for i in reps if i in recs]
        acc = np.array([r.accepted for r in rows], dtype=float)
        n_acc = int(acc.sum())
        if n_acc < min_accepted:
            raise TooFewAccepted(f"scheme {sid!r} has {n_acc} accepted records (< {min_accepted})")
        mask = acc.astype(bool)
        taux2 = np.array([r.taux_norm**2 for r in rows])
        rate, rate_se = _prop(acc)
        s = {
            "n_records": len(rows),
            "n_accepted": n_acc,
            "acceptance_rate": rate,
            "acceptance_rate_se": rate_se,
            "mle_failures": int(sum(r.mle_failure for r in rows)),
            "taux_sq_mean": float(taux2[mask].mean()),
        }
        s["taux_sq_ratio"], s["taux_sq_ratio_se"] = _moment_ratio(taux2, acc)
        for k in KINDS:
            u = np.array([r.estimates[k] for r in rows])
            sub = u[mask]
            s[f"mean_{k}"] = float(sub.mean())
            s[f"mean_{k}_se"] = float(sub.std(ddof=1) / math.sqrt(sub.size))
            s[f"var_{k}"] = float(sub.var(ddof=1))
            lo, hi = np.quantile(sub, [tail, 1.0 - tail])
            s[f"q_lo_{k}"], s[f"q_hi_{k}"] = float(lo), float(hi)
            s[f"var_ratio_{k}"], s[f"var_ratio_{k}_se"] = _var_ratio(u, acc)
            s[f"coverage_{k}"], s[f"coverage_{k}_se"] = _prop([r.ci_hits[k] for r in rows if r.accepted])
            ph = [r.plugin_hits[k] for r in rows if r.accepted and k in r.plugin_hits]
            if ph:
                s[f"plugin_coverage_{k}"], s[f"plugin_coverage_{k}_se"] = _prop(ph)
        for a, b in GAPS:
            g2 = np.array([(r.estimates[a] - r.estimates[b]) ** 2 for r in rows])
            s[f"gap_sq_{a}{b}"] = float(g2[mask].mean())
            s[f"gap_sq_ratio_{a}{b}"], s[f"gap_sq_ratio_{a}{b}_se"] = _moment_ratio(g2, acc)
        out[sid] = s
    return out


def histogram_rows(records, bins=40):
    """Data-only histogram of each estimator per scheme, plus quantile
    markers, for external plotting."""
    by_scheme = {}
    for r in records:
        if r.accepted:
            by_scheme.setdefault(r.scheme_id, []).append(r)
    rows = []
    for sid in sorted(by_scheme):
        for k in KINDS:
            u = np.array([r.estimates[k] for r in by_scheme[sid]])
            counts, edges = np.histogram(u, bins=bins)
            lo, hi = np.quantile(u, [0.025, 0.975])
            for c, a, b in zip(counts, edges[:-1], edges[1:]):
                rows.append({"scheme_id": sid, "kind": k, "bin_lo": float(a), "bin_hi": float(b),
                             "count": int(c), "q025": float(lo), "q975": float(hi)})
    return rows


# theory oracle -------------------------------------------------------------

def theory_variances(pop, arm_sizes=None):
    """Finite-population covariance of the scaled arm-mean estimators.

    Returns a dict with per-arm slopes, ``V_N``, ``V_F``, ``V_L``, the
    loadings ``Gamma_N``/``Gamma_F``, ``V_x`` and, for two arms, the scalar
    variances ``v_N``/``v_F``/``v_L`` and covariance vectors ``c_N``/``c_F``
    together with ``v_x``.
    """
    if getattr(pop, "potentials", None) is None:
        raise MissingPotentials("the full table of potential outcomes is required")
    x = np.asarray(pop.covariates, dtype=float)
    x = x - x.mean(axis=0)
    y = np.asarray(pop.potentials, dtype=float)
    sizes = np.asarray(arm_sizes if arm_sizes is not None else pop.arm_sizes, dtype=float)
    n, q = y.shape
    e = sizes / sizes.sum()
    s2x = x.T @ x / (n - 1)
    yc = y - y.mean(axis=0)
    slopes = np.linalg.solve(x.T @ x, x.T @ yc).T  # Q x J
    gamma_f = e @ slopes

    def vmat(adj):
        s = np.cov(adj, rowvar=False, ddof=1)
        s = np.atleast_2d(s)
        return np.diag(np.diag(s) / e) - s

    out = {
        "slopes": slopes,
        "shares": e,
        "s2x": s2x,
        "V_N": vmat(y),
        "V_F": vmat(y - (x @ gamma_f)[:, None]),
        "V_L": vmat(y - x @ slopes.T),
        "Gamma_N": asymlaw.gamma_blocks(slopes, "N", e),
        "Gamma_F": asymlaw.gamma_blocks(slopes, "F", e),
        "V_x": asymlaw.vx_multi(s2x, e),
    }
    if q == 2:
        g = np.array([1.0, -1.0])
        for k in KINDS:
            out[f"v_{k}"] = float(g @ out[f"V_{k}"] @ g)
        e1, e0 = e
        out["c_N"] = asymlaw.c_two_arm(s2x, slopes[0], slopes[1], e1, e0, "N")
        out["c_F"] = asymlaw.c_two_arm(s2x, slopes[0], slopes[1], e1, e0, "F")
        out["v_x"] = asymlaw.vx_two_arm(s2x, e1, e0)
    return out


# file output ---------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating,)):
        v = float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def emit(obj, path, fmt=None, provenance=None):
    """Write records (a list of :class:`ReplicationRecord`) or a summary dict.

    CSV output has a fixed column order; JSON output carries
    ``schema_version`` and the supplied ``provenance`` (seed, stream ids).
    """
    fmt = fmt or os.path.splitext(path)[1].lstrip(".").lower()
    if fmt not in ("csv", "json"):
        raise ValueError("format must be csv or json")
    is_records = isinstance(obj, list)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            if is_records:
                w = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS, lineterminator="\n")
                w.writeheader()
                for r in obj:
                    w.writerow(r.to_row() if isinstance(r, ReplicationRecord) else r)
            else:
                keys = sorted({k for s in obj.values() for k in s})
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["scheme_id"] + keys)
                for sid, s in obj.items():
                    w.writerow([sid] + [s.get(k, "") for k in keys])
        return path
    doc = {"schema_version": SCHEMA_VERSION, "provenance": _jsonable(provenance or {})}
    if is_records:
        doc["kind"] = "records"
        doc["columns"] = RECORD_COLUMNS
        doc["records"] = [_jsonable(r.to_row()) for r in obj]
    else:
        doc["kind"] = "summary"
        doc["summary"] = _jsonable(obj)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_records(path):
    """Read records written by :func:`emit` (CSV or JSON)."""
    if path.endswith(".json"):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("kind") != "records":
            raise ValueError("file does not contain records")
        rows = doc["records"]
        rows = [{k: ("" if v is None else v) for k, v in row.items()} for row in rows]
    else:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    return [ReplicationRecord.from_row(r) for r in rows]
