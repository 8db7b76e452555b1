"""Cluster bootstrap: resampling contract, determinism, and inference math."""

import numpy as np
import pytest
from scipy.stats import norm

import lotteryiv as lv

from conftest import make_sample


def toy_sample(n=40, seed=0):
    rng = np.random.default_rng(seed)
    z = (rng.random(n) < 0.4).astype(int)
    if z.sum() in (0, n):
        z[0] = 1 - z[0]
    d = (z * (rng.random(n) < 0.6)).astype(int)
    outcomes = rng.normal(size=(2 * n, 5))
    sample = make_sample(z=z, d=d, rows_per_person=[2] * n, outcomes=outcomes,
                         t0=rng.choice([2008, 2009, 2010], size=n))
    return sample


class TestResampleIndices:
    def test_size_and_range(self):
        idx = lv.resample_indices(37, seed=5, replicate=12)
        assert idx.shape == (37,)
        assert idx.min() >= 0 and idx.max() < 37

    def test_keyed_by_seed_and_replicate(self):
        a = lv.resample_indices(100, seed=5, replicate=3)
        b = lv.resample_indices(100, seed=5, replicate=3)
        c = lv.resample_indices(100, seed=5, replicate=4)
        d = lv.resample_indices(100, seed=6, replicate=3)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)


class TestClusterBootstrap:
    def test_identical_clusters_give_zero_se(self):
        sample = toy_sample()

        def fn(idx):
            # Statistic invariant to which clusters are drawn.
            return {"stat": 1.25}

        res = lv.cluster_bootstrap(sample, fn,
                                   lv.BootstrapConfig(replications=50, seed=1))
        out = res["stat"]
        assert out.se == 0.0
        assert out.degenerate
        assert out.p_value == 0.0  # nonzero estimate with zero spread
        assert out.ci == (1.25, 1.25)

    def test_zero_estimate_zero_se_p_is_one(self):
        sample = toy_sample()
        res = lv.cluster_bootstrap(sample, lambda idx: {"stat": 0.0},
                                   lv.BootstrapConfig(replications=20, seed=1))
        assert res["stat"].p_value == 1.0

    def test_seed_determinism_across_worker_counts(self):
        sample = toy_sample(seed=3)
        fn = lv.make_pipeline_fn(sample, rule=lv.TrimRule(0.0, 1.0))
        serial = lv.cluster_bootstrap(
            sample, fn, lv.BootstrapConfig(replications=60, seed=9, n_jobs=1))
        threaded = lv.cluster_bootstrap(
            sample, fn, lv.BootstrapConfig(replications=60, seed=9, n_jobs=4))
        for key in serial:
            assert serial[key].se == threaded[key].se
            assert serial[key].ci == threaded[key].ci
            assert serial[key].p_value == threaded[key].p_value

    def test_replicate_draw_carries_all_cluster_rows(self):
        sample = toy_sample()
        seen = []

        def fn(idx):
            rows, owners = sample.rows_of(idx)
            seen.append((idx.copy(), rows.shape[0]))
            return {"n_rows": float(rows.shape[0])}

        lv.cluster_bootstrap(sample, fn, lv.BootstrapConfig(replications=5, seed=2))
        for idx, n_rows in seen:
            assert idx.shape == (sample.n_participants,)
            assert n_rows == int(sample.row_counts[idx].sum())

    def test_failed_replicates_counted_and_excluded(self):
        sample = toy_sample()
        calls = {"n": 0}

        def flaky(idx):
            calls["n"] += 1
            if calls["n"] % 23 == 0:
                raise lv.EstimationError("synthetic failure")
            rng = np.random.default_rng(calls["n"])
            return {"stat": float(rng.normal())}

        res = lv.cluster_bootstrap(sample, flaky,
                                   lv.BootstrapConfig(replications=100, seed=4))
        out = res["stat"]
        assert out.n_failed_replicates == 4
        assert out.n_replicates_used == 96

    def test_excessive_failures_hard_error(self):
        sample = toy_sample()
        calls = {"n": 0}

        def broken_on_resamples(idx):
            calls["n"] += 1
            if calls["n"] > 1:  # the point estimate itself succeeds
                raise lv.EstimationError("always broken")
            return {"stat": 1.0}

        with pytest.raises(lv.BootstrapError, match="unreliable"):
            lv.cluster_bootstrap(sample, broken_on_resamples,
                                 lv.BootstrapConfig(replications=20, seed=4))

    def test_pvalue_and_ci_match_normal_approximation(self):
        sample = toy_sample(seed=8)
        rng_state = {"i": 0}

        def fn(idx):
            rng_state["i"] += 1
            rng = np.random.default_rng(rng_state["i"])
            return {"stat": 0.3 + 0.1 * float(rng.normal())}

        config = lv.BootstrapConfig(replications=400, seed=6, ci_level=0.95,
                                    keep_replicates=True)
        res = lv.cluster_bootstrap(sample, fn, config)["stat"]
        est = res.estimate
        assert res.p_value == pytest.approx(2 * norm.sf(abs(est / res.se)), abs=1e-15)
        z = norm.ppf(0.975)
        assert res.ci == (pytest.approx(est - z * res.se),
                          pytest.approx(est + z * res.se))
        assert res.ci[0] <= est <= res.ci[1]
        assert res.replicates.shape == (400,)
        lo, hi = res.ci_percentile
        assert lo < hi
        assert lo == pytest.approx(np.quantile(res.replicates, 0.025))

    def test_missing_statistic_excluded_per_stat(self):
        sample = toy_sample()
        calls = {"n": 0}

        def fn(idx):
            calls["n"] += 1
            stats = {"always": 1.0 + 0.01 * calls["n"]}
            if calls["n"] == 1 or calls["n"] % 2 == 0:
                stats["sometimes"] = 2.0 + 0.01 * calls["n"]
            return stats

        res = lv.cluster_bootstrap(sample, fn,
                                   lv.BootstrapConfig(replications=10, seed=3))
        assert res["always"].n_replicates_used == 10
        assert res["sometimes"].n_replicates_used == 5

    def test_too_few_clusters(self):
        sample = make_sample(z=[1], d=[1], rows_per_person=[1])
        with pytest.raises(ValueError, match="at least 2 clusters"):
            lv.cluster_bootstrap(sample, lambda idx: {"s": 0.0},
                                 lv.BootstrapConfig(replications=5, seed=0))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            lv.BootstrapConfig(replications=0)
        with pytest.raises(ValueError):
            lv.BootstrapConfig(ci_level=1.0)


class TestConvergenceBand:
    def test_se_from_500_reps_close_to_1999(self):
        config = lv.flat_config(applicants=40)
        lottery, employment, _ = lv.generate(config, seed=10)
        sample = lv.build_evaluation_sample(lv.link_records(lottery, employment))
        fn = lv.make_pipeline_fn(sample)
        res = lv.cluster_bootstrap(
            sample, fn,
            lv.BootstrapConfig(replications=1999, seed=15, keep_replicates=True))
        reps = res["late/employed"].replicates
        assert reps.shape[0] > 1900
        se_500 = np.std(reps[:500], ddof=1)
        se_full = np.std(reps, ddof=1)
        assert abs(se_500 - se_full) / se_full < 0.15
