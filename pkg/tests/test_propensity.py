"""Design construction and probit maximum likelihood."""

import math

import numpy as np
import pytest
from scipy.stats import norm

import lotteryiv as lv
from lotteryiv.propensity import probit_loglik, probit_score

from conftest import make_sample


def random_design(rng, n, k, intercept=True):
    X = rng.normal(size=(n, k))
    if intercept:
        X[:, 0] = 1.0
    beta = rng.normal(scale=0.7, size=k)
    z = (rng.random(n) < norm.cdf(X @ beta)).astype(float)
    if z.min() == z.max():  # keep both outcomes present
        z[0] = 1.0 - z[0]
    return X, z


def golden_section_max(f, lo, hi, tol=1e-13):
    """Derivative-free maximizer of a unimodal function on [lo, hi]."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
        else:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
    return 0.5 * (a + b)


def coordinate_descent_probit(X, z, sweeps=80, width=6.0):
    """Likelihood maximization without derivatives: cyclic golden-section."""
    beta = np.zeros(X.shape[1])
    for _ in range(sweeps):
        for j in range(X.shape[1]):
            def coord(v, j=j):
                trial = beta.copy()
                trial[j] = v
                return probit_loglik(X, z, trial)
            beta[j] = golden_section_max(coord, beta[j] - width, beta[j] + width)
    return beta


class TestBuildDesign:
    def test_year_dummies_are_one_hot(self):
        sample = make_sample(
            z=[1, 0, 0, 1], d=[1, 0, 0, 1], rows_per_person=[1, 1, 1, 1],
            t0=[2006, 2007, 2007, 2016])
        design = lv.build_design(sample, lv.CovariateSpec())
        assert design.columns == ["year_2006", "year_2007", "year_2016"]
        assert np.array_equal(design.values.sum(axis=1), np.ones(4))
        assert set(np.unique(design.values)) == {0.0, 1.0}

    def test_eleven_year_levels(self, default_draw):
        _, sample, _ = default_draw
        design = lv.build_design(sample, lv.CovariateSpec())
        assert len(design.columns) == 11
        assert np.array_equal(design.values.sum(axis=1), np.ones(sample.n_participants))

    def test_missing_age_becomes_zero_plus_flag(self):
        sample = make_sample(z=[1, 0, 1, 0, 0, 1, 0, 0], d=[1, 0, 1, 0, 0, 1, 0, 0],
                             rows_per_person=[1] * 8,
                             t0=[2006, 2006, 2007, 2007, 2006, 2007, 2006, 2007])
        sample.nationality = np.array(
            ["AT", "DE", "OTHER", "OTHER", "AT", "DE", "OTHER", "OTHER"],
            dtype=object)
        sample.female = np.array([1.0, 0, 0, 1, 0, 1, 0, 0])
        sample.age = np.array([30.0, np.nan, 50.0, 41.0, 28.0, 33.0, 47.0, 39.0])
        sample.age_missing = np.array([False, True] + [False] * 6)
        design = lv.build_design(
            sample, lv.CovariateSpec(mode=lv.CovariateMode.YEAR_PLUS_DEMOGRAPHICS))
        age_col = design.values[:, design.columns.index("age")]
        flag_col = design.values[:, design.columns.index("age_missing")]
        assert age_col.tolist() == [30.0, 0.0, 50.0, 41.0, 28.0, 33.0, 47.0, 39.0]
        assert flag_col.tolist() == [0.0, 1.0] + [0.0] * 6
        assert "nationality_IT" not in design.columns  # absent level dropped

    def test_reference_levels_absent(self, default_draw):
        _, sample, _ = default_draw
        design = lv.build_design(
            sample, lv.CovariateSpec(mode=lv.CovariateMode.YEAR_PLUS_DEMOGRAPHICS))
        assert "nationality_OTHER" not in design.columns
        assert "year_2006" not in design.columns  # reference year
        assert "intercept" in design.columns

    def test_collinear_columns_named(self):
        sample = make_sample(z=[1, 0, 1, 0], d=[1, 0, 1, 0],
                             rows_per_person=[1, 1, 1, 1], t0=[2006, 2006, 2006, 2006])
        sample.female = np.ones(4)  # duplicates the intercept
        with pytest.raises(ValueError, match="collinear"):
            lv.build_design(
                sample, lv.CovariateSpec(mode=lv.CovariateMode.YEAR_PLUS_DEMOGRAPHICS))

    def test_empty_sample_rejected(self):
        sample = make_sample(z=[], d=[], rows_per_person=[])
        with pytest.raises(ValueError, match="empty"):
            lv.build_design(sample, lv.CovariateSpec())


class TestProbitFit:
    def test_intercept_only_balanced_gives_zero(self):
        X = np.ones((100, 1))
        z = np.array([0.0, 1.0] * 50)
        fit = lv.ProbitRegression().fit(X, z)
        assert abs(fit.coef_[0]) < 1e-10

    def test_intercept_only_equals_quantile(self):
        share = 0.1113  # roughly the pooled winner share
        n = 10000
        z = np.zeros(n)
        z[: round(share * n)] = 1.0
        fit = lv.ProbitRegression().fit(np.ones((n, 1)), z)
        assert fit.coef_[0] == pytest.approx(norm.ppf(z.mean()), abs=1e-8)

    def test_matches_derivative_free_oracle(self):
        rng = np.random.default_rng(31)
        X, z = random_design(rng, 50, 3)
        fit = lv.ProbitRegression().fit(X, z)
        oracle = coordinate_descent_probit(X, z)
        assert np.max(np.abs(fit.coef_ - oracle)) < 1e-6

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(7)
        step = 1e-5
        for _ in range(20):
            n = int(rng.integers(40, 120))
            k = int(rng.integers(1, 5))
            X, z = random_design(rng, n, k)
            beta = rng.normal(scale=0.5, size=k)
            analytic = probit_score(X, z, beta)
            fd = np.empty(k)
            for j in range(k):
                up, dn = beta.copy(), beta.copy()
                up[j] += step
                dn[j] -= step
                fd[j] = (probit_loglik(X, z, up) - probit_loglik(X, z, dn)) / (2 * step)
            scale = np.maximum(np.abs(fd), 1.0)
            assert np.max(np.abs(analytic - fd) / scale) < 1e-6

    def test_score_equation_zero_at_optimum(self):
        rng = np.random.default_rng(5)
        X, z = random_design(rng, 200, 3)
        fit = lv.ProbitRegression().fit(X, z)
        assert np.max(np.abs(probit_score(X, z, fit.coef_))) <= fit.tol

    def test_saturated_pscores_equal_cell_shares(self, default_draw, default_fit):
        _, sample, _ = default_draw
        design, fit, pscores = default_fit
        for year in np.unique(sample.t0):
            cell = sample.t0 == year
            assert pscores[cell] == pytest.approx(sample.z[cell].mean(), abs=1e-6)

    def test_run_to_run_bit_identical(self):
        rng = np.random.default_rng(11)
        X, z = random_design(rng, 150, 3)
        a = lv.ProbitRegression().fit(X, z).coef_
        b = lv.ProbitRegression().fit(X, z).coef_
        assert np.array_equal(a, b)

    def test_row_permutation_leaves_fit_unchanged(self):
        rng = np.random.default_rng(13)
        X, z = random_design(rng, 150, 3)
        perm = rng.permutation(150)
        a = lv.ProbitRegression().fit(X, z).coef_
        b = lv.ProbitRegression().fit(X[perm], z[perm]).coef_
        assert np.max(np.abs(a - b)) < 1e-10

    def test_loglik_at_optimum_not_below_start(self):
        rng = np.random.default_rng(17)
        X, z = random_design(rng, 80, 2)
        fit = lv.ProbitRegression().fit(X, z)
        assert fit.loglik_ >= probit_loglik(X, z, np.zeros(2))
        assert fit.converged_

    def test_perfect_separation_names_column(self):
        rng = np.random.default_rng(3)
        n = 60
        z = (np.arange(n) < 30).astype(float)
        X = np.column_stack([
            np.ones(n),
            z + rng.random(n) * 0.4,  # supports disjoint across outcomes
        ])
        with pytest.raises(lv.SeparationError, match="x2"):
            lv.ProbitRegression().fit(X, z, column_names=["intercept", "x2"])

    def test_nonconvergence_reports_diagnostics(self):
        rng = np.random.default_rng(9)
        X, z = random_design(rng, 500, 3)
        with pytest.raises(lv.ConvergenceError, match="iterations"):
            lv.ProbitRegression(max_iter=1, tol=1e-14).fit(X, z)

    def test_nonbinary_outcome_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            lv.ProbitRegression().fit(np.ones((3, 1)), np.array([0.0, 0.5, 1.0]))

    def test_sklearn_params_roundtrip(self):
        model = lv.ProbitRegression(tol=1e-10, max_iter=50)
        params = model.get_params()
        assert params["tol"] == 1e-10
        clone = lv.ProbitRegression(**params)
        assert clone.get_params() == params


class TestPredict:
    def test_zero_index_gives_half(self):
        fit = lv.ProbitRegression().fit(
            np.ones((10, 1)), np.array([0.0, 1.0] * 5))
        assert fit.predict_pscore(np.zeros((3, 1)))[0] == pytest.approx(0.5)
        proba = fit.predict_proba(np.zeros((3, 1)))
        assert proba.shape == (3, 2)
        assert np.allclose(proba.sum(axis=1), 1.0)

    def test_extreme_index_clamped(self):
        fit = lv.ProbitRegression().fit(
            np.ones((10, 1)), np.array([0.0, 1.0] * 5))
        fit.coef_ = np.array([1.0])
        p = fit.predict_pscore(np.array([[-50.0], [50.0]]))
        assert p[0] == pytest.approx(1e-12)
        assert p[1] == pytest.approx(1.0 - 1e-12)
        assert np.all((p > 0.0) & (p < 1.0))

    def test_predict_pscore_op_matches_class(self, default_draw, default_fit):
        design, fit, pscores = default_fit
        assert np.array_equal(lv.predict_pscore(fit, design), pscores)
