import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import multivariate_t, norm, t as student_t

from skewvi.models import (
    GlmmModel,
    GlmmSpec,
    SvModel,
    SvSpec,
    load_glmm_csv,
    load_sv_csv,
    model_hash,
    synthesize_glmm,
    synthesize_sv,
)

LOG2PI = np.log(2.0 * np.pi)


def single_obs_spec(y, response_kind="bernoulli", re_prior="normal", df=10.0):
    return GlmmSpec(
        response_kind=response_kind,
        y=np.array([y]),
        X=np.ones((1, 1)),
        Z=np.ones((1, 1)),
        groups=np.array([0]),
        re_prior=re_prior,
        df=df,
    )


class TestGlmmLogDensity:
    def test_bernoulli_single_zero_observation_at_origin(self):
        model = GlmmModel(single_obs_spec(0.0))
        # lik log(1/2); b ~ N(0, e^0); beta, zeta ~ N(0, 100)
        expected = np.log(0.5) + norm.logpdf(0.0, 0.0, 1.0) \
            + 2 * norm.logpdf(0.0, 0.0, 10.0)
        assert model.log_h(np.zeros(3)) == pytest.approx(expected, abs=1e-12)

    def test_poisson_row_contribution(self):
        model = GlmmModel(single_obs_spec(3.0, response_kind="poisson"))
        # at the origin the likelihood row is y*0 - e^0 - log(y!) = -1 - log 6
        expected = (-1.0 - np.log(6.0)) + norm.logpdf(0.0, 0.0, 1.0) \
            + 2 * norm.logpdf(0.0, 0.0, 10.0)
        assert model.log_h(np.zeros(3)) == pytest.approx(expected, abs=1e-12)

    def test_scalar_normal_prior_uses_log_sd(self):
        model = GlmmModel(single_obs_spec(1.0))
        zeta = 0.7
        theta = np.array([0.9, 0.0, zeta])
        base = model.log_h(np.array([0.9, 0.0, 0.0]))
        got = model.log_h(theta)
        diff = norm.logpdf(0.9, 0.0, np.exp(zeta)) - norm.logpdf(0.9, 0.0, 1.0) \
            + norm.logpdf(zeta, 0.0, 10.0) - norm.logpdf(0.0, 0.0, 10.0)
        assert got - base == pytest.approx(diff, abs=1e-12)

    def test_scalar_student_prior_matches_scipy(self):
        model = GlmmModel(single_obs_spec(1.0, re_prior="student_t", df=7.0))
        normal = GlmmModel(single_obs_spec(1.0))
        b, zeta = 1.3, 0.4
        theta = np.array([b, 0.0, zeta])
        diff = model.log_h(theta) - normal.log_h(theta)
        expected = student_t.logpdf(b, 7.0, scale=np.exp(zeta)) \
            - norm.logpdf(b, 0.0, np.exp(zeta))
        assert diff == pytest.approx(expected, abs=1e-11)

    def test_vector_priors_match_scipy(self, rng):
        spec = GlmmSpec(
            response_kind="bernoulli",
            y=np.array([1.0]),
            X=np.ones((1, 1)),
            Z=np.array([[1.0, 0.5]]),
            groups=np.array([0]),
        )
        spec_t = GlmmSpec(
            response_kind="bernoulli",
            y=np.array([1.0]),
            X=np.ones((1, 1)),
            Z=np.array([[1.0, 0.5]]),
            groups=np.array([0]),
            re_prior="student_t",
            df=6.0,
        )
        model_n = GlmmModel(spec)
        model_t = GlmmModel(spec_t)
        b = np.array([0.8, -0.3])
        hyper = np.array([0.2, 0.5, -0.1])  # log B11, B21, log B22
        theta = np.concatenate([b, [0.0], hyper])
        B = np.array([[np.exp(0.2), 0.0], [0.5, np.exp(-0.1)]])
        cov = B @ B.T
        diff = model_t.log_h(theta) - model_n.log_h(theta)
        expected = multivariate_t(shape=cov, df=6.0).logpdf(b) \
            - multivariate_t(shape=cov, df=1e9).logpdf(b)
        assert diff == pytest.approx(expected, abs=1e-5)

    def test_layout_and_pattern(self):
        spec, _ = synthesize_glmm(5, 3, beta=[0.5, 0.2], re_chol=[[1.0]], seed=1)
        model = GlmmModel(spec)
        assert model.p == 5 * 1 + 2 + 1
        assert model.pattern.describe() == {
            "n_blocks": 5, "block_dims": [1] * 5, "global_dim": 3, "markov_order": 0,
        }

    def test_rejects_invalid_specs(self):
        with pytest.raises(ValueError):
            single_obs_spec(1.0, response_kind="gamma")
        with pytest.raises(ValueError):
            single_obs_spec(1.0, re_prior="cauchy")
        with pytest.raises(ValueError):
            single_obs_spec(1.0, re_prior="student_t", df=0.0)
        with pytest.raises(ValueError):
            GlmmSpec("bernoulli", np.zeros(3), np.ones((2, 1)), np.ones((3, 1)),
                     np.zeros(3, dtype=int))

    def test_non_finite_theta_rejected(self):
        model = GlmmModel(single_obs_spec(1.0))
        with pytest.raises(ValueError):
            model.log_h(np.array([np.nan, 0.0, 0.0]))
        with pytest.raises(ValueError):
            model.grad_log_h(np.array([np.inf, 0.0, 0.0]))


class TestGlmmGradients:
    @pytest.mark.parametrize("response_kind,re_prior,r", [
        ("bernoulli", "normal", 1),
        ("bernoulli", "student_t", 1),
        ("poisson", "normal", 1),
        ("bernoulli", "normal", 2),
        ("poisson", "student_t", 2),
    ])
    def test_matches_fd(self, rng, response_kind, re_prior, r):
        re_chol = [[1.0]] if r == 1 else [[0.8, 0.0], [0.3, 0.6]]
        spec, _ = synthesize_glmm(
            4, 3, beta=[0.4, -0.2], re_chol=re_chol,
            response_kind=response_kind, re_prior=re_prior, seed=2,
        )
        model = GlmmModel(spec)
        for _ in range(3):
            theta = 0.5 * rng.standard_normal(model.p)
            grad = model.grad_log_h(theta)
            eps = 1e-6
            for j in range(model.p):
                hi, lo = theta.copy(), theta.copy()
                hi[j] += eps
                lo[j] -= eps
                num = (model.log_h(hi) - model.log_h(lo)) / (2 * eps)
                assert grad[j] == pytest.approx(num, rel=2e-5, abs=1e-6)

    def test_student_prior_approaches_normal_at_large_df(self, rng):
        spec_n, _ = synthesize_glmm(5, 4, beta=[0.3], re_chol=[[1.2]], seed=3)
        spec_t = GlmmSpec(
            response_kind=spec_n.response_kind, y=spec_n.y, X=spec_n.X, Z=spec_n.Z,
            groups=spec_n.groups, re_prior="student_t", df=1e8,
        )
        model_n, model_t = GlmmModel(spec_n), GlmmModel(spec_t)
        theta = 0.5 * rng.standard_normal(model_n.p)
        assert model_t.log_h(theta) == pytest.approx(model_n.log_h(theta), abs=1e-3)
        np.testing.assert_allclose(
            model_t.grad_log_h(theta), model_n.grad_log_h(theta), atol=1e-3)


class TestSvModel:
    def test_log_density_matches_hand_formula(self):
        spec = SvSpec(y=np.array([0.5, -1.0]))
        model = SvModel(spec)
        theta = np.array([0.3, -0.2, 0.1, 0.4, -0.6])  # b1, b2, a, psi, k
        b = theta[:2]
        sigma = np.log1p(np.exp(0.1))
        phi = expit(0.4)
        lam = sigma * b + (-0.6)
        lik = np.sum(-0.5 * LOG2PI - lam - 0.5 * spec.y**2 * np.exp(-2 * lam))
        state = norm.logpdf(b[0], 0.0, 1.0 / np.sqrt(1 - phi**2)) \
            + norm.logpdf(b[1], phi * b[0], 1.0)
        prior = np.sum(norm.logpdf([0.1, 0.4, -0.6], 0.0, np.sqrt(10.0)))
        assert model.log_h(theta) == pytest.approx(lik + state + prior, abs=1e-11)

    def test_pattern_is_tridiagonal_arrow(self):
        model = SvModel(SvSpec(y=np.zeros(4) + 0.1))
        assert model.pattern.describe() == {
            "n_blocks": 4, "block_dims": [1] * 4, "global_dim": 3, "markov_order": 1,
        }
        assert model.p == 7

    def test_gradient_matches_fd(self, rng):
        spec, _ = synthesize_sv(6, sigma=0.4, phi=0.9, kappa=-0.3, seed=4)
        model = SvModel(spec)
        for _ in range(3):
            theta = 0.5 * rng.standard_normal(model.p)
            grad = model.grad_log_h(theta)
            eps = 1e-6
            for j in range(model.p):
                hi, lo = theta.copy(), theta.copy()
                hi[j] += eps
                lo[j] -= eps
                num = (model.log_h(hi) - model.log_h(lo)) / (2 * eps)
                assert grad[j] == pytest.approx(num, rel=2e-5, abs=1e-6)

    def test_rejects_short_series(self):
        with pytest.raises(ValueError):
            SvSpec(y=np.array([1.0]))


class TestSynthesizers:
    def test_glmm_deterministic_given_seed(self):
        a, ta = synthesize_glmm(6, 4, beta=[0.5, 0.1], re_chol=[[1.0]], seed=9)
        b, tb = synthesize_glmm(6, 4, beta=[0.5, 0.1], re_chol=[[1.0]], seed=9)
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(ta["theta"], tb["theta"])
        c, _ = synthesize_glmm(6, 4, beta=[0.5, 0.1], re_chol=[[1.0]], seed=10)
        assert not np.array_equal(a.y, c.y) or not np.array_equal(a.X, c.X)

    def test_glmm_shapes_and_truth_layout(self):
        spec, truth = synthesize_glmm(
            7, 3, beta=[0.5, -0.2, 0.1], re_chol=[[0.9, 0.0], [0.2, 0.7]], seed=1)
        assert spec.y.shape == (21,)
        assert spec.X.shape == (21, 3)
        assert spec.Z.shape == (21, 2)
        assert spec.n_groups == 7
        assert truth["theta"].shape == (7 * 2 + 3 + 3,)
        np.testing.assert_allclose(
            truth["hyper"], [np.log(0.9), 0.2, np.log(0.7)])

    def test_glmm_tiny_re_scale_gives_tiny_effects(self):
        _, truth = synthesize_glmm(20, 2, beta=[0.0], re_chol=[[1e-8]], seed=0)
        assert np.max(np.abs(truth["b"])) < 1e-6

    def test_poisson_responses_are_counts(self):
        spec, _ = synthesize_glmm(10, 5, beta=[0.2], re_chol=[[0.5]],
                                  response_kind="poisson", seed=2)
        assert np.all(spec.y >= 0)
        assert np.all(spec.y == np.round(spec.y))

    def test_sv_deterministic_and_shaped(self):
        a, ta = synthesize_sv(50, 0.4, 0.95, -0.5, seed=8)
        b, _ = synthesize_sv(50, 0.4, 0.95, -0.5, seed=8)
        np.testing.assert_array_equal(a.y, b.y)
        assert a.y.shape == (50,)
        assert ta["a"] == pytest.approx(np.log(np.expm1(0.4)))

    def test_model_hash_separates_data(self):
        a, _ = synthesize_glmm(5, 3, beta=[0.5], re_chol=[[1.0]], seed=1)
        b, _ = synthesize_glmm(5, 3, beta=[0.5], re_chol=[[1.0]], seed=2)
        assert model_hash(GlmmModel(a)) != model_hash(GlmmModel(b))
        assert model_hash(GlmmModel(a)) == model_hash(GlmmModel(a))


class TestCsvIngestion:
    def test_glmm_round_trip(self, tmp_path, rng):
        import pandas as pd

        n = 12
        frame = pd.DataFrame({
            "outcome": rng.integers(0, 2, n).astype(float),
            "clinic": np.repeat(["a", "b", "c"], 4),
            "age": rng.normal(50.0, 8.0, n),
        })
        path = tmp_path / "trial.csv"
        frame.to_csv(path, index=False)
        cfg = {
            "response": "outcome",
            "response_kind": "bernoulli",
            "group": "clinic",
            "fixed": ["intercept", "age10"],
            "random": ["intercept"],
            "derived": [{"name": "age10", "column": "age", "scale": 0.1, "offset": -5.0}],
        }
        spec = load_glmm_csv(path, cfg)
        assert spec.n_groups == 3
        np.testing.assert_array_equal(spec.groups, np.repeat([0, 1, 2], 4))
        np.testing.assert_array_equal(spec.X[:, 0], np.ones(n))
        np.testing.assert_allclose(spec.X[:, 1], frame["age"] * 0.1 - 5.0)
        np.testing.assert_array_equal(spec.y, frame["outcome"])

    def test_missing_column_is_reported(self, tmp_path):
        import pandas as pd

        path = tmp_path / "d.csv"
        pd.DataFrame({"y": [1.0, 0.0], "g": [0, 1]}).to_csv(path, index=False)
        cfg = {"response": "y", "response_kind": "bernoulli", "group": "g",
               "fixed": ["nope"], "random": ["intercept"]}
        with pytest.raises(KeyError, match="nope"):
            load_glmm_csv(path, cfg)

    def test_sv_round_trip(self, tmp_path):
        import pandas as pd

        path = tmp_path / "returns.csv"
        pd.DataFrame({"ret": [0.1, -0.2, 0.05]}).to_csv(path, index=False)
        spec = load_sv_csv(path, {"response": "ret", "prior_var": 5.0})
        np.testing.assert_array_equal(spec.y, [0.1, -0.2, 0.05])
        assert spec.prior_var == 5.0


class TestPosteriorRecovery:
    def test_gva_recovers_strong_signal_fixed_effect(self):
        # large dataset, strong signal: the fitted fixed effect lands within
        # a few posterior sds of the generating value
        from skewvi.families import get_family
        from skewvi.optimizer import Schedule, fit

        spec, truth = synthesize_glmm(
            100, 10, beta=[0.8, 1.2], re_chol=[[0.8]], seed=6)
        model = GlmmModel(spec)
        family = get_family("gva")
        params = family.init_params(model.pattern)
        sched = Schedule([(2000, 0.05), (2000, 0.01), (1000, 0.005)])
        result = fit(family, params, model, schedule=sched, total_iters=5000, seed=0)
        mu = result.params.mu
        beta_hat = mu[model.n:model.n + model.q]
        # posterior sd of the fixed effects from the fitted precision factor
        from skewvi.sparse_graph import assemble_precision

        Q = assemble_precision(result.params.L, np.exp(result.params.log_kappa))
        cov = np.linalg.inv(Q)
        sds = np.sqrt(np.diag(cov)[model.n:model.n + model.q])
        assert np.all(np.abs(beta_hat - truth["beta"]) < 3.5 * sds)
