import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import cre_frame, random_frame
from oracles import pooled_t_loop
from reptools.balance import (
    BalanceScheme,
    ExperimentFrame,
    evaluate,
    f_balance,
    lm_balance,
    logit_balance,
    mlogit_balance,
    normalize_assignment,
    rem_check,
    t_joint,
    t_marginal,
)
from reptools.errors import (
    ArmTooSmall,
    DegenerateWithinVariance,
    DimMismatch,
    IncompatibleScheme,
    InvalidFrame,
    WrongArmCount,
)
from reptools.regression import ols_fit


def frame_from(x, z):
    return ExperimentFrame(np.asarray(x, dtype=float).reshape(len(z), -1), assignment=z)


class TestFrame:
    def test_centres_covariates(self, rng):
        x = rng.normal(loc=5.0, size=(30, 2))
        frame = ExperimentFrame(x, arm_sizes=(10, 20))
        assert np.allclose(frame.covariates.mean(axis=0), 0, atol=1e-10)
        assert np.allclose(frame.covariate_means, x.mean(axis=0))
        assert np.allclose(frame.s2x, np.cov(x, rowvar=False))

    def test_zero_one_assignment(self):
        assert normalize_assignment([1, 0, 0, 1]).tolist() == [1, 2, 2, 1]
        assert normalize_assignment([1, 2, 3, 1]).tolist() == [1, 2, 3, 1]
        with pytest.raises(InvalidFrame):
            normalize_assignment([0, 1, 2])
        with pytest.raises(InvalidFrame):
            normalize_assignment([1.5, 1, 2])

    def test_validation(self, rng):
        x = rng.normal(size=(6, 1))
        with pytest.raises(ArmTooSmall):
            ExperimentFrame(x, arm_sizes=(1, 5))
        with pytest.raises(InvalidFrame):
            ExperimentFrame(x, arm_sizes=(3, 4))
        with pytest.raises(InvalidFrame):
            ExperimentFrame(np.column_stack([x, np.ones(6)]), arm_sizes=(3, 3))
        with pytest.raises(DimMismatch):
            ExperimentFrame(x, assignment=[1, 2, 1, 2])
        with pytest.raises(InvalidFrame):
            ExperimentFrame(x, arm_sizes=(3, 3), assignment=[1, 1, 2, 2, 2, 2])

    def test_with_assignment_shares_summaries(self, rng):
        frame = ExperimentFrame(rng.normal(size=(20, 2)), arm_sizes=(8, 12))
        a = cre_frame(frame, rng)
        assert a.s2x is frame.s2x
        assert frame.labels is None and a.labels is not None
        with pytest.raises(InvalidFrame):
            frame.with_assignment(np.r_[np.ones(10, int), np.full(10, 2)])


class TestTwoSampleT:
    def test_zero_difference(self):
        t, p = t_marginal(frame_from([1, -1, 1, -1], [1, 1, 0, 0]))
        assert t[0] == 0 and p[0] == 1

    def test_equal_group_means_by_hand(self):
        t, p = t_marginal(frame_from([2, 0, 1, 1], [1, 1, 0, 0]))
        assert t[0] == 0 and p[0] == 1

    def test_matches_loop_oracle(self, rng):
        z = rng.permutation(np.r_[np.ones(9, int), np.zeros(14, int)])
        x = rng.normal(size=23)
        t, _ = t_marginal(frame_from(x, z))
        assert t[0] == pytest.approx(pooled_t_loop(x.tolist(), z.tolist()), rel=1e-12)

    def test_equals_regression_t_value(self, rng):
        frame = random_frame(rng, n=50, j=3, arms=(20, 30))
        t, p = t_marginal(frame)
        z = frame.treated.astype(float)
        for j in range(3):
            fit = ols_fit(np.column_stack([np.ones(50), z]), frame.covariates[:, j])
            tj = fit.coefficients[1] / fit.classic_se[1]
            assert t[j] == pytest.approx(tj, abs=1e-10)
            assert p[j] == pytest.approx(2 * stats.t.sf(abs(tj), 48), abs=1e-10)
            te, _ = t_marginal(frame, "ehw")
            assert te[j] == pytest.approx(fit.coefficients[1] / fit.ehw_se[1], abs=1e-10)

    def test_joint_single_covariate_is_t_squared(self, rng):
        frame = random_frame(rng, n=40, j=1, arms=(15, 25))
        t, _ = t_marginal(frame)
        w, p = t_joint(frame)
        assert w == pytest.approx(t[0] ** 2, rel=1e-12)
        assert p == pytest.approx(stats.chi2.sf(w, 1))

    def test_joint_zero_difference(self):
        w, p = t_joint(frame_from(np.array([[1.0, 2.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 2.0]]), [1, 1, 0, 0]))
        assert w == 0 and p == 1

    def test_hotelling_reference(self, rng):
        frame = random_frame(rng, n=40, j=3, arms=(15, 25))
        w, p = t_joint(frame, "hotelling")
        assert p == pytest.approx(stats.f.sf(w * (38 - 3 + 1) / (3 * 38), 3, 36))

    def test_joint_ehw_uses_separate_variances(self, rng):
        frame = random_frame(rng, n=40, j=2, arms=(15, 25))
        s1, s0 = frame.arm_covariances()
        tau = frame.taux()
        w, _ = t_joint(frame, studentization="ehw")
        assert w == pytest.approx(tau @ np.linalg.solve(s1 / 15 + s0 / 25, tau))

    def test_needs_two_arms(self, rng):
        frame = random_frame(rng, n=30, j=2, arms=(10, 10, 10))
        with pytest.raises(WrongArmCount):
            t_marginal(frame)
        with pytest.raises(WrongArmCount):
            rem_check(frame, 1.0)

    def test_large_sample_agrees_with_mahalanobis(self):
        gen = np.random.default_rng(31)
        frame = ExperimentFrame(gen.normal(size=(10_000, 3)), arm_sizes=(4_000, 6_000))
        for _ in range(20):
            f = cre_frame(frame, gen)
            w, _ = t_joint(f)
            d, _ = rem_check(f, 1.0)
            assert abs(w - d) < 0.1


class TestLinearProbability:
    def test_f_is_wald_over_j(self, rng):
        frame = random_frame(rng, n=70, j=4, arms=(30, 40))
        r = lm_balance(frame)
        assert r.extra["f_stat"] == pytest.approx(r.extra["wald_stat"] / 4, rel=1e-10)
        assert r.joint_pvalue == r.extra["f_pvalue"]

    def test_frisch_waugh_lovell(self, rng):
        frame = random_frame(rng, n=70, j=3, arms=(30, 40))
        e1, e0 = frame.shares
        vx = frame.s2x / (e1 * e0)
        r = lm_balance(frame)
        assert np.allclose(r.extra["beta"], 70 / 69 * np.linalg.solve(vx, frame.taux()), atol=1e-10)

    def test_orthogonal_covariate_with_zero_difference(self):
        r = lm_balance(frame_from([1, -1, 1, -1], [1, 1, 0, 0]))
        assert r.extra["beta"][0] == pytest.approx(0, abs=1e-14)
        assert r.marginal_pvalues[0] == pytest.approx(1)

    def test_marginal_reference_dof(self, rng):
        frame = random_frame(rng, n=50, j=2, arms=(20, 30))
        r = lm_balance(frame)
        assert np.allclose(r.marginal_pvalues, 2 * stats.t.sf(np.abs(r.marginal_stats), 47))

    def test_null_uniformity(self):
        gen = np.random.default_rng(404)
        frame = ExperimentFrame(gen.normal(size=(500, 3)), arm_sizes=(200, 300))
        p = [lm_balance(cre_frame(frame, gen)).joint_pvalue for _ in range(2000)]
        assert stats.kstest(p, "uniform").statistic < 0.05


class TestLogit:
    def test_zero_difference(self):
        r = logit_balance(frame_from([1, -1, 1, -1], [1, 1, 0, 0]))
        assert abs(r.extra["beta"][0]) < 1e-12
        assert r.marginal_pvalues[0] == pytest.approx(1)

    def test_q2_paths_coincide(self, rng):
        frame = random_frame(rng, n=80, j=2, arms=(30, 50))
        a, b = logit_balance(frame), mlogit_balance(frame)
        assert np.array_equal(a.marginal_stats, b.marginal_stats)
        assert a.joint_stat == b.joint_stat

    def test_large_sample_equivalences(self):
        gen = np.random.default_rng(8)
        frame = ExperimentFrame(gen.normal(size=(10_000, 3)), arm_sizes=(3_000, 7_000))
        for _ in range(5):
            f = cre_frame(frame, gen)
            r = logit_balance(f)
            w, _ = t_joint(f)
            t, _ = t_marginal(f)
            assert abs(r.joint_stat - w) < 0.1
            assert np.all(np.sign(r.marginal_stats) == np.sign(t))
            assert np.all(np.abs(r.marginal_stats - t) < 0.1)

    def test_ehw_variant_close_to_classic_under_cre(self):
        gen = np.random.default_rng(4)
        frame = cre_frame(ExperimentFrame(gen.normal(size=(5_000, 2)), arm_sizes=(2_000, 3_000)), gen)
        a, b = logit_balance(frame), logit_balance(frame, "ehw")
        assert np.allclose(a.marginal_stats, b.marginal_stats, rtol=0.05, atol=0.05)


class TestMultiArm:
    def test_f_two_arm_is_t_squared(self, rng):
        frame = random_frame(rng, n=40, j=3, arms=(18, 22))
        f, _ = f_balance(frame)
        t, _ = t_marginal(frame)
        assert np.allclose(f, t**2, rtol=1e-8)

    def test_f_against_scipy_anova(self, rng):
        frame = random_frame(rng, n=45, j=2, arms=(10, 15, 20))
        f, p = f_balance(frame)
        for j in range(2):
            groups = [frame.covariates[frame.labels == q, j] for q in (1, 2, 3)]
            ref = stats.f_oneway(*groups)
            assert f[j] == pytest.approx(ref.statistic)
            assert p[j] == pytest.approx(ref.pvalue)

    def test_f_equal_means(self):
        x = np.array([0.0, 2.0, 1.0, 1.0, 3.0, -1.0])
        f, p = f_balance(frame_from(x, [1, 1, 2, 2, 3, 3]))
        assert f[0] == pytest.approx(0, abs=1e-14) and p[0] == pytest.approx(1)

    def test_f_degenerate(self):
        with pytest.raises(DegenerateWithinVariance):
            f_balance(frame_from([0.0, 0.0, 1.0, 1.0], [1, 1, 2, 2]))

    def test_f_null_uniformity(self):
        gen = np.random.default_rng(66)
        frame = ExperimentFrame(gen.normal(size=(400, 1)), arm_sizes=(100, 100, 100, 100))
        p = [f_balance(cre_frame(frame, gen))[1][0] for _ in range(2000)]
        assert stats.kstest(p, "uniform").statistic < 0.05

    def test_mlogit_large_sample(self):
        gen = np.random.default_rng(12)
        n, j = 10_000, 3
        frame = ExperimentFrame(gen.normal(size=(n, j)), arm_sizes=(3_000, 3_000, 4_000))
        e = frame.shares
        ep = e[:-1]
        phi = np.diag(ep) - np.outer(ep, ep)
        s_inv = frame.s2x_inv
        psi = np.kron(np.linalg.inv(phi) @ np.diag(ep), s_inv)
        # N cov of the stacked non-reference arm means under complete randomization
        vxp_inv = np.linalg.inv(np.kron(np.diag(1 / ep) - np.ones((2, 2)), frame.s2x))
        for _ in range(5):
            f = cre_frame(frame, gen)
            r = mlogit_balance(f)
            means = f.arm_means()
            xplus = means[:-1].reshape(-1)
            assert np.linalg.norm(np.sqrt(n) * (r.extra["beta"] - psi @ xplus)) < 0.1
            assert abs(r.joint_stat - n * xplus @ vxp_inv @ xplus) < 0.1


class TestRem:
    def test_zero_difference_accepted(self):
        d, ok = rem_check(frame_from([1, -1, 1, -1], [1, 1, 0, 0]), 1e-9)
        assert d == 0 and ok

    def test_affine_invariance(self, rng):
        frame = random_frame(rng, n=50, j=3, arms=(20, 30))
        a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
        mapped = ExperimentFrame(frame.covariates @ a.T + 7.0, assignment=frame.labels)
        assert rem_check(mapped, 1.0)[0] == pytest.approx(rem_check(frame, 1.0)[0], rel=1e-10)


class TestScheme:
    def test_compatibility(self):
        with pytest.raises(IncompatibleScheme):
            BalanceScheme("f", "joint", alpha_joint=0.5)
        with pytest.raises(IncompatibleScheme):
            BalanceScheme("rem", "marginal", alpha_marginal=0.5)
        with pytest.raises(IncompatibleScheme):
            BalanceScheme("lm", "joint", alpha_joint=0.5, joint_reference="hotelling")
        with pytest.raises(IncompatibleScheme):
            BalanceScheme("t", "marginal", alpha_marginal=1.0)
        with pytest.raises(IncompatibleScheme):
            BalanceScheme("t", "joint")

    def test_round_trip(self):
        s = BalanceScheme("mlogit", "consensus", alpha_marginal=[0.1, 0.2], alpha_joint=0.3, studentization="ehw")
        assert BalanceScheme.from_dict(s.to_dict()) == s
        with pytest.raises(IncompatibleScheme):
            BalanceScheme.from_dict({**s.to_dict(), "colour": "red"})

    def test_wrong_arm_count(self, rng):
        frame = random_frame(rng, n=30, j=2, arms=(10, 10, 10))
        with pytest.raises(IncompatibleScheme):
            evaluate(frame, BalanceScheme("t", "joint", alpha_joint=0.5))

    def test_threshold_vector_length(self, rng):
        frame = random_frame(rng, n=60, j=2)
        with pytest.raises(IncompatibleScheme):
            evaluate(frame, BalanceScheme("t", "marginal", alpha_marginal=[0.1, 0.1, 0.1]))


ALL_SCHEMES = [
    ("t", {}), ("lm", {}), ("logit", {}), ("mlogit", {}),
    ("t", {"studentization": "ehw"}), ("lm", {"joint_reference": "wald"}), ("logit", {"joint_reference": "wald"}),
]


class TestEvaluate:
    def test_tiny_thresholds_always_accept(self, rng):
        frame = random_frame(rng, n=60, j=3)
        for model, kw in ALL_SCHEMES:
            s = BalanceScheme(model, "consensus", alpha_marginal=1e-12, alpha_joint=1e-12, **kw)
            assert evaluate(frame, s).accepted
        assert evaluate(frame, BalanceScheme("f", "marginal", alpha_marginal=1e-12)).accepted

    def test_inclusive_threshold(self, rng):
        frame = random_frame(rng, n=60, j=2)
        r = evaluate(frame, BalanceScheme("t", "joint", alpha_joint=0.5))
        exact = BalanceScheme("t", "joint", alpha_joint=r.joint_pvalue)
        assert evaluate(frame, exact).accepted

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(ALL_SCHEMES), st.floats(0.01, 0.9), st.floats(0.01, 0.9))
    def test_consensus_is_conjunction_and_monotone(self, seed, model_kw, am, aj):
        model, kw = model_kw
        gen = np.random.default_rng(seed)
        frame = random_frame(gen, n=60, j=2, arms=(25, 35))
        cs = evaluate(frame, BalanceScheme(model, "consensus", alpha_marginal=am, alpha_joint=aj, **kw)).accepted
        mg = evaluate(frame, BalanceScheme(model, "marginal", alpha_marginal=am, **kw)).accepted
        jt = evaluate(frame, BalanceScheme(model, "joint", alpha_joint=aj, **kw)).accepted
        assert cs == (mg and jt)
        if cs:
            looser = BalanceScheme(model, "consensus", alpha_marginal=am / 2, alpha_joint=aj / 2, **kw)
            assert evaluate(frame, looser).accepted

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_joint_statistics_invariant_under_linear_maps(self, seed):
        gen = np.random.default_rng(seed)
        frame = random_frame(gen, n=80, j=3, arms=(30, 50))
        a = gen.normal(size=(3, 3)) + 3 * np.eye(3)
        mapped = ExperimentFrame(frame.covariates @ a.T, assignment=frame.labels)
        assert t_joint(mapped)[0] == pytest.approx(t_joint(frame)[0], rel=1e-8)
        assert lm_balance(mapped).extra["wald_stat"] == pytest.approx(lm_balance(frame).extra["wald_stat"], rel=1e-8)
        assert logit_balance(mapped).joint_stat == pytest.approx(logit_balance(frame).joint_stat, rel=1e-6, abs=1e-9)

    def test_mle_failure_counts_as_rejection(self):
        # covariate separates the arms perfectly
        x = np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0])
        frame = frame_from(x, [1, 1, 1, 2, 2, 2])
        r = evaluate(frame, BalanceScheme("logit", "joint", alpha_joint=0.01))
        assert not r.accepted
        assert r.diagnostics["mle_failures"] == 1

    def test_report_p_values_in_unit_interval(self, rng):
        frame = random_frame(rng, n=60, j=3, arms=(20, 20, 20))
        for s in (BalanceScheme("mlogit", "consensus", alpha_marginal=0.1, alpha_joint=0.1),
                  BalanceScheme("f", "marginal", alpha_marginal=0.1)):
            r = evaluate(frame, s)
            assert np.all((r.marginal_pvalues >= 0) & (r.marginal_pvalues <= 1))
            d = r.to_dict()
            assert isinstance(d["accepted"], bool)
