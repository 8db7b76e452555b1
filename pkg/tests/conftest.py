"""Shared fixtures: crafted micro-samples and one calibrated synthetic draw."""

import numpy as np
import pytest

import lotteryiv as lv


def make_sample(z, d, rows_per_person, outcomes=None, t0=None, commuter=None,
                row_t=None):
    """Hand-build an EvaluationSample from participant-level arrays.

    ``rows_per_person`` gives each participant's outcome-row count;
    ``outcomes`` is an (n_rows, 5) matrix (defaults to zeros).
    """
    z = np.asarray(z, dtype=np.int8)
    n = z.shape[0]
    d = np.asarray(d, dtype=np.int8)
    counts = np.asarray(rows_per_person, dtype=np.int64)
    n_rows = int(counts.sum())
    row_person = np.repeat(np.arange(n), counts)
    if row_t is None:
        row_t = np.concatenate([np.arange(2, 2 + c) for c in counts]) \
            if n_rows else np.zeros(0, dtype=np.int64)
    if outcomes is None:
        outcomes = np.zeros((n_rows, 5))
    return lv.EvaluationSample(
        person_ids=[f"P{i}" for i in range(n)],
        t0=np.asarray(t0, dtype=np.int64) if t0 is not None
        else np.full(n, 2010, dtype=np.int64),
        z=z,
        d=d,
        commuter=np.asarray(commuter, dtype=bool) if commuter is not None
        else np.zeros(n, dtype=bool),
        age=np.full(n, 40.0),
        nationality=np.array(["AT"] * n, dtype=object),
        female=np.zeros(n),
        age_missing=np.zeros(n, dtype=bool),
        nationality_missing=np.zeros(n, dtype=bool),
        gender_missing=np.zeros(n, dtype=bool),
        row_person=row_person,
        row_t=np.asarray(row_t, dtype=np.int64),
        outcomes=np.asarray(outcomes, dtype=np.float64).reshape(n_rows, 5),
    )


@pytest.fixture(scope="session")
def default_draw():
    """One calibrated synthetic draw, linked and built."""
    config = lv.DgpConfig()
    lottery, employment, truth = lv.generate(config, seed=20240)
    panel = lv.link_records(lottery, employment)
    sample = lv.build_evaluation_sample(panel)
    return config, sample, truth


@pytest.fixture(scope="session")
def default_fit(default_draw):
    """Year-dummy probit fit and propensity scores on the default draw."""
    _, sample, _ = default_draw
    design = lv.build_design(sample, lv.CovariateSpec())
    fit = lv.fit_probit(design, sample.z)
    pscores = lv.predict_pscore(fit, design)
    return design, fit, pscores
