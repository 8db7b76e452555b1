"""Synthetic residence-permit lottery with known ground truth.

Each applicant has a latent compliance type (complier, never-taker, or,
optionally, defier), a baseline cross-border-commuter flag, and demographic
attributes. Winners of a year's pre-draw are a fixed quota drawn at random
within the year (or Bernoulli draws when per-year win probabilities are
configured instead), so assignment is independent of everything but the
year. Compliers move the year after their first win; losers may reapply in
later years. Residence and employment in later years follow per-period
Bernoulli outcome models with a persistence mixture that leaves all
per-period marginals equal to the configured probabilities, which keeps the
implied effects in closed form.

``true_late`` evaluates those closed forms; ``mc_true_late`` cross-checks
them by direct simulation of compliers.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.stats import truncnorm

from .linkage import (
    NATIONALITIES,
    OUTCOME_ORDER,
    SEASONS,
    EmploymentRecord,
    LotteryRecord,
    OutcomeKind,
)


class DgpConfigError(ValueError):
    """Invalid generator configuration."""


# In-window applicant and winner counts whose funnel reproduces the published
# aggregates exactly: 3,145 participants, 350 winners, 20,009 outcome rows
# (row count per person is last_outcome_year - t0 - 1).
CALIBRATED_APPLICANTS = {
    2006: 328, 2007: 314, 2008: 425, 2009: 283, 2010: 270, 2011: 283,
    2012: 236, 2013: 204, 2014: 267, 2015: 252, 2016: 283,
}
CALIBRATED_WINNERS = {
    2006: 32, 2007: 32, 2008: 32, 2009: 35, 2010: 21, 2011: 38,
    2012: 31, 2013: 28, 2014: 35, 2015: 33, 2016: 33,
}


@dataclass(frozen=True)
class OutcomeParams:
    """Per-period outcome probabilities for compliers, by treatment arm."""

    reside_treated: float = 0.75
    reside_untreated: float = 0.04
    employed_treated: float = 0.59
    employed_untreated: float = 0.35
    activity_full_share: float = 0.70
    part_time_level: float = 50.0
    persistence: float = 0.80

    @property
    def mean_activity_level(self) -> float:
        return 100.0 * self.activity_full_share + self.part_time_level * (
            1.0 - self.activity_full_share
        )


@dataclass(frozen=True)
class NeverTakerParams:
    """Outcome probabilities for never-takers (one regime: they never move)."""

    employed_commuter: float = 0.80
    employed_non_commuter: float = 0.15
    reside: float = 0.02


@dataclass(frozen=True)
class DgpConfig:
    first_year: int = 2006
    last_year: int = 2016
    applicants_per_year: dict[int, int] = field(
        default_factory=lambda: dict(CALIBRATED_APPLICANTS))
    winners_per_year: dict[int, int] | None = field(
        default_factory=lambda: dict(CALIBRATED_WINNERS))
    win_prob_per_year: dict[int, float] | None = None
    complier_share: float = 0.36
    complier_share_commuter: float | None = None
    complier_share_non_commuter: float | None = None
    defier_share: float = 0.0
    commuter_share: float = 0.51
    female_share: float = 0.30
    nationality_shares: dict[str, float] = field(default_factory=lambda: {
        "AT": 0.37, "DE": 0.41, "IT": 0.07, "CH": 0.01, "OTHER": 0.14})
    age_mean: float = 37.5
    age_sd: float = 9.6
    age_min: float = 18.0
    age_max: float = 65.0
    outcomes: OutcomeParams = OutcomeParams()
    outcomes_commuter: OutcomeParams | None = None
    outcomes_non_commuter: OutcomeParams | None = None
    never_taker: NeverTakerParams = NeverTakerParams()
    reapply_prob: float = 0.0
    reapply_boost_complier: float = 1.5
    out_of_window_first: dict[int, int] = field(default_factory=dict)
    out_of_window_win_prob: float = 0.11
    missing_nationality_prob: float = 0.04
    missing_age_prob: float = 0.05
    missing_gender_prob: float = 0.0
    employment_first_year: int = 2005
    employment_last_year: int = 2018
    last_outcome_year: int = 2018
    last_lottery_year: int = 2019

    def validate(self) -> None:
        years = range(self.first_year, self.last_year + 1)
        if sorted(self.applicants_per_year) != list(years):
            raise DgpConfigError("applicants_per_year must cover every lottery year")
        if (self.winners_per_year is None) == (self.win_prob_per_year is None):
            raise DgpConfigError(
                "exactly one of winners_per_year and win_prob_per_year must be set"
            )
        if self.winners_per_year is not None:
            if sorted(self.winners_per_year) != list(years):
                raise DgpConfigError("winners_per_year must cover every lottery year")
            for y in years:
                k, n = self.winners_per_year[y], self.applicants_per_year[y]
                if not 0 < k < n:
                    raise DgpConfigError(
                        f"{y}: winner count {k} must be strictly between 0 and {n}"
                    )
        else:
            if sorted(self.win_prob_per_year) != list(years):
                raise DgpConfigError("win_prob_per_year must cover every lottery year")
            for y, q in self.win_prob_per_year.items():
                if not 0.0 < q < 1.0:
                    raise DgpConfigError(f"{y}: win probability {q} must lie in (0, 1)")
        probs = {
            "complier_share": self.complier_share,
            "defier_share": self.defier_share,
            "commuter_share": self.commuter_share,
            "female_share": self.female_share,
            "reapply_prob": self.reapply_prob,
            "out_of_window_win_prob": self.out_of_window_win_prob,
            "missing_nationality_prob": self.missing_nationality_prob,
            "missing_age_prob": self.missing_age_prob,
            "missing_gender_prob": self.missing_gender_prob,
        }
        for name, value in probs.items():
            if not 0.0 <= value <= 1.0:
                raise DgpConfigError(f"{name}={value} is not a probability")
        if self.complier_share + self.defier_share > 1.0:
            raise DgpConfigError("complier_share + defier_share exceeds 1")
        if abs(sum(self.nationality_shares.values()) - 1.0) > 1e-9:
            raise DgpConfigError("nationality_shares must sum to 1")
        if set(self.nationality_shares) != set(NATIONALITIES):
            raise DgpConfigError(f"nationality_shares must cover {NATIONALITIES}")
        for params in self._all_outcome_params():
            for name in ("reside_treated", "reside_untreated", "employed_treated",
                         "employed_untreated", "activity_full_share", "persistence"):
                v = getattr(params, name)
                if not 0.0 <= v <= 1.0:
                    raise DgpConfigError(f"outcome parameter {name}={v} is not a probability")
        for y in self.out_of_window_first:
            if self.first_year <= y <= self.last_year:
                raise DgpConfigError(f"out_of_window_first year {y} lies inside the window")

    def _all_outcome_params(self) -> list[OutcomeParams]:
        return [p for p in (self.outcomes, self.outcomes_commuter,
                            self.outcomes_non_commuter) if p is not None]

    def outcome_params(self, commuter: bool) -> OutcomeParams:
        override = self.outcomes_commuter if commuter else self.outcomes_non_commuter
        return override if override is not None else self.outcomes

    def complier_prob(self, commuter: bool) -> float:
        override = (self.complier_share_commuter if commuter
                    else self.complier_share_non_commuter)
        return override if override is not None else self.complier_share

    def overall_complier_share(self) -> float:
        return (self.commuter_share * self.complier_prob(True)
                + (1.0 - self.commuter_share) * self.complier_prob(False))

    def win_odds(self, year: int) -> float:
        if self.first_year <= year <= self.last_year:
            if self.winners_per_year is not None:
                return self.winners_per_year[year] / self.applicants_per_year[year]
            return self.win_prob_per_year[year]
        return self.out_of_window_win_prob


def flat_config(applicants: int = 286, win_prob: float = 0.11) -> DgpConfig:
    """Flat applicant counts and win odds across all lottery years."""
    years = range(2006, 2017)
    return DgpConfig(
        applicants_per_year={y: applicants for y in years},
        winners_per_year=None,
        win_prob_per_year={y: win_prob for y in years},
    )


def historical_config() -> DgpConfig:
    """Full record history: pre/post-window first-timers and reapplications.

    Adds out-of-window first participations and a loser reapplication chain
    sized so the raw record count lands near the published total of 9,906,
    on top of the exactly calibrated in-window funnel.
    """
    return replace(
        DgpConfig(),
        out_of_window_first={2003: 450, 2004: 450, 2005: 450,
                             2017: 200, 2018: 200, 2019: 196},
        reapply_prob=0.52,
        reapply_boost_complier=1.25,
    )


def heterogeneous_effects_config() -> DgpConfig:
    """Subgroup-specific employment effects (0.34 among new entrants versus
    0.11 among baseline commuters) with matching first-stage contrast."""
    return replace(
        DgpConfig(),
        complier_share_commuter=0.42,
        complier_share_non_commuter=0.28,
        outcomes_commuter=OutcomeParams(
            reside_treated=0.73, reside_untreated=0.04,
            employed_treated=0.76, employed_untreated=0.65,
        ),
        outcomes_non_commuter=OutcomeParams(
            reside_treated=0.75, reside_untreated=0.04,
            employed_treated=0.52, employed_untreated=0.18,
        ),
    )


PRESETS = {
    "default": DgpConfig,
    "flat": flat_config,
    "historical": historical_config,
    "heterogeneous": heterogeneous_effects_config,
}


@dataclass
class GroundTruth:
    """Implied true effects of a configuration, in closed form."""

    first_stage: float
    pooled_late: dict[OutcomeKind, float]
    period_late: dict[OutcomeKind, dict[int, float]]
    pooled_complier_y0: dict[OutcomeKind, float]
    period_complier_y0: dict[OutcomeKind, dict[int, float]]


def _move_probs(config: DgpConfig, y0: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Move chances for a complier who lost the first draw at ``y0``.

    Returns ``(mu, m)`` indexed by relative year t = 0..horizon, where
    ``mu[t]`` is the probability of moving exactly at y0 + t (a move at t
    follows a rewin at t - 1) and ``m[t]`` the probability of having moved
    by y0 + t. The reapplication chain runs one year at a time with
    probability ``reapply_prob * reapply_boost_complier`` until a win, a
    skipped year, or the last lottery year.
    """
    r = min(1.0, config.reapply_prob * config.reapply_boost_complier)
    mu = np.zeros(horizon + 1)
    if r > 0.0:
        survive = 1.0
        chain = 1.0
        for j in range(1, horizon):
            year = y0 + j
            if year > config.last_lottery_year:
                break
            q = config.win_odds(year)
            chain *= r
            mu[j + 1] = chain * survive * q
            survive *= 1.0 - q
    return mu, np.cumsum(mu)


def _odds_table(config: DgpConfig, base_year: int, span: int) -> np.ndarray:
    """Win odds by year offset from ``base_year``, for vectorized lookups."""
    return np.array([config.win_odds(base_year + k) for k in range(span + 1)])


def _complier_mix(config: DgpConfig) -> list[tuple[float, OutcomeParams]]:
    """Commuter/non-commuter weights within the complier population."""
    cs_c = config.complier_prob(True)
    cs_nc = config.complier_prob(False)
    total = config.commuter_share * cs_c + (1.0 - config.commuter_share) * cs_nc
    return [
        (config.commuter_share * cs_c / total, config.outcome_params(True)),
        ((1.0 - config.commuter_share) * cs_nc / total, config.outcome_params(False)),
    ]


def _cohort_paths(config: DgpConfig, y0: int, horizon: int):
    """Per-period complier means E[Y_t(1)], E[Y_t(0)] for one cohort.

    Returns two (horizon - 1, 5) arrays for outcome periods t = 2..horizon
    in outcome-column order.
    """
    mix = _complier_mix(config)
    mu, m = _move_probs(config, y0, horizon)
    ts = np.arange(2, horizon + 1)
    y1 = np.zeros((ts.size, 5))
    y0_arr = np.zeros((ts.size, 5))
    for w, params in mix:
        act = params.mean_activity_level
        res1 = np.full(ts.size, params.reside_treated)
        emp1 = np.full(ts.size, params.employed_treated)
        res0 = (mu[ts] * 1.0
                + (m[ts] - mu[ts]) * params.reside_treated
                + (1.0 - m[ts]) * params.reside_untreated)
        emp0 = (m[ts] * params.employed_treated
                + (1.0 - m[ts]) * params.employed_untreated)
        y1 += w * np.column_stack([
            res1, emp1, emp1 * act, np.cumsum(res1), np.cumsum(emp1)])
        y0_arr += w * np.column_stack([
            res0, emp0, emp0 * act, np.cumsum(res0), np.cumsum(emp0)])
    return y1, y0_arr


def true_late(config: DgpConfig) -> GroundTruth:
    """Closed-form effects implied by the configuration.

    Per-period effects are complier mean differences of the outcome model,
    weighted over cohorts observed at that period; pooled effects weight by
    each cohort's row count. A complier who lost and later rewins moves and
    switches regime, which the nontreatment path accounts for exactly.
    """
    config.validate()
    cohorts = sorted(config.applicants_per_year)
    sizes = {y: config.applicants_per_year[y] for y in cohorts}
    per_period_num = {}
    per_period_den = {}
    pooled_num = np.zeros(5)
    pooled_y0_num = np.zeros(5)
    pooled_den = 0.0
    period_late: dict[int, np.ndarray] = {}
    period_y0: dict[int, np.ndarray] = {}
    for y0 in cohorts:
        horizon = config.last_outcome_year - y0
        if horizon < 2:
            continue
        y1_path, y0_path = _cohort_paths(config, y0, horizon)
        n = sizes[y0]
        for i, t in enumerate(range(2, horizon + 1)):
            per_period_num.setdefault(t, np.zeros((2, 5)))
            per_period_den.setdefault(t, 0.0)
            per_period_num[t][0] += n * (y1_path[i] - y0_path[i])
            per_period_num[t][1] += n * y0_path[i]
            per_period_den[t] += n
            pooled_num += n * (y1_path[i] - y0_path[i])
            pooled_y0_num += n * y0_path[i]
            pooled_den += n
    for t in sorted(per_period_num):
        period_late[t] = per_period_num[t][0] / per_period_den[t]
        period_y0[t] = per_period_num[t][1] / per_period_den[t]

    def _split(arr_by_t: dict[int, np.ndarray]) -> dict[OutcomeKind, dict[int, float]]:
        return {
            kind: {t: float(arr_by_t[t][j]) for t in sorted(arr_by_t)}
            for j, kind in enumerate(OUTCOME_ORDER)
        }

    pooled = pooled_num / pooled_den
    pooled_y0 = pooled_y0_num / pooled_den
    return GroundTruth(
        first_stage=config.overall_complier_share() - config.defier_share,
        pooled_late={k: float(pooled[j]) for j, k in enumerate(OUTCOME_ORDER)},
        period_late=_split(period_late),
        pooled_complier_y0={k: float(pooled_y0[j]) for j, k in enumerate(OUTCOME_ORDER)},
        period_complier_y0=_split(period_y0),
    )


def _simulate_complier_means(config: DgpConfig, n: int, rng: np.random.Generator):
    """Simulate complier potential-outcome paths; per-chunk pooled estimates."""
    cohorts = sorted(config.applicants_per_year)
    weights = np.array([config.applicants_per_year[y] for y in cohorts], float)
    weights /= weights.sum()
    mix = _complier_mix(config)
    w_commuter = mix[0][0]
    horizon_max = config.last_outcome_year - min(cohorts)
    ts = np.arange(1, horizon_max + 1)

    y0_idx = rng.choice(len(cohorts), size=n, p=weights)
    y0 = np.array(cohorts)[y0_idx]
    horizon = config.last_outcome_year - y0
    commuter = rng.random(n) < w_commuter
    params_c = config.outcome_params(True)
    params_nc = config.outcome_params(False)

    def per_person(attr):
        return np.where(commuter, getattr(params_c, attr), getattr(params_nc, attr))

    p_res1 = per_person("reside_treated")
    p_res0 = per_person("reside_untreated")
    p_emp1 = per_person("employed_treated")
    p_emp0 = per_person("employed_untreated")
    act = np.where(commuter,
                   rng.random(n) < params_c.activity_full_share,
                   rng.random(n) < params_nc.activity_full_share)
    level = np.where(act, 100.0,
                     np.where(commuter, params_c.part_time_level,
                              params_nc.part_time_level))
    rho = per_person("persistence")

    # Rewin chain under nontreatment: the year (relative) of a later move.
    r = min(1.0, config.reapply_prob * config.reapply_boost_complier)
    moved_rel = np.full(n, np.iinfo(np.int64).max)
    if r > 0.0:
        base = int(min(cohorts))
        odds_table = _odds_table(config, base, int(max(cohorts)) - base + horizon_max)
        active = np.ones(n, dtype=bool)
        for j in range(1, horizon_max):
            year = y0 + j
            legal = year <= config.last_lottery_year
            applies = active & legal & (rng.random(n) < r)
            q_vec = odds_table[year - base]
            wins = applies & (rng.random(n) < q_vec)
            moved_rel = np.where(wins & (moved_rel == np.iinfo(np.int64).max),
                                 j + 1, moved_rel)
            active = applies & ~wins

    def process(p_treated, p_untreated, forced_move_one: bool):
        persistent = rng.random(n) < rho
        v1 = rng.random(n) < p_treated
        v0 = rng.random(n) < p_untreated
        iid = rng.random((n, horizon_max))
        treated = ts[None, :] >= moved_rel[:, None]
        p_mat = np.where(treated, p_treated[:, None], p_untreated[:, None])
        base = np.where(treated, v1[:, None], v0[:, None])
        vals = np.where(persistent[:, None], base, iid < p_mat).astype(float)
        if forced_move_one:
            vals[ts[None, :] == moved_rel[:, None]] = 1.0
        return vals

    res0 = process(p_res1, p_res0, forced_move_one=True)
    emp0 = process(p_emp1, p_emp0, forced_move_one=False)

    def process_treated(p):
        persistent = rng.random(n) < rho
        v = rng.random(n) < p
        iid = rng.random((n, horizon_max))
        return np.where(persistent[:, None], v[:, None], iid < p[:, None]).astype(float)

    res1 = process_treated(p_res1)
    emp1 = process_treated(p_emp1)

    def stack(res, emp):
        # Cumulative years accrue from t = 2 on; the t = 1 column is not an
        # outcome period.
        res_out = res.copy()
        emp_out = emp.copy()
        res_out[:, 0] = 0.0
        emp_out[:, 0] = 0.0
        return np.stack([
            res, emp, emp * level[:, None],
            np.cumsum(res_out, axis=1), np.cumsum(emp_out, axis=1),
        ], axis=2)

    paths1 = stack(res1, emp1)
    paths0 = stack(res0, emp0)
    valid = (ts[None, :] >= 2) & (ts[None, :] <= horizon[:, None])

    sums1 = np.einsum("ntk,nt->tk", paths1, valid.astype(float))
    sums0 = np.einsum("ntk,nt->tk", paths0, valid.astype(float))
    counts = valid.sum(axis=0).astype(float)
    return sums1, sums0, counts


def mc_true_late(config: DgpConfig, n: int = 10_000_000, seed: int = 0,
                 chunks: int = 100):
    """Monte Carlo evaluation of the complier effects, with standard errors.

    Simulates ``n`` compliers through the outcome model (including the rewin
    chain) in ``chunks`` batches. Returns nested mappings mirroring
    ``GroundTruth``, with standard errors from batch means.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    per_chunk = max(1, n // chunks)
    pooled_batch = []
    y0_batch = []
    period_num = None
    period_cnt = None
    period_batches = []
    for _ in range(chunks):
        sums1, sums0, counts = _simulate_complier_means(config, per_chunk, rng)
        if period_num is None:
            period_num = np.zeros_like(sums1)
            period_cnt = np.zeros_like(counts)
        period_num += sums1 - sums0
        period_cnt += counts
        with np.errstate(invalid="ignore", divide="ignore"):
            diff = (sums1 - sums0)
            pooled_batch.append(diff.sum(axis=0) / counts.sum())
            y0_batch.append(sums0.sum(axis=0) / counts.sum())
            period_batches.append(diff / counts[:, None])

    def batch_stats(values):
        arr = np.asarray(values)
        with np.errstate(invalid="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mean = np.nanmean(arr, axis=0)
            se = np.nanstd(arr, axis=0, ddof=1) / np.sqrt(arr.shape[0])
        return mean, se

    pooled_mean, pooled_se = batch_stats(pooled_batch)
    y0_mean, y0_se = batch_stats(y0_batch)
    per_mean, per_se = batch_stats(period_batches)

    ts_all = np.arange(1, per_mean.shape[0] + 1)
    observed = period_cnt > 0
    result = {
        "pooled_late": {}, "pooled_late_se": {},
        "pooled_complier_y0": {}, "pooled_complier_y0_se": {},
        "period_late": {}, "period_late_se": {},
    }
    for j, kind in enumerate(OUTCOME_ORDER):
        result["pooled_late"][kind] = float(pooled_mean[j])
        result["pooled_late_se"][kind] = float(pooled_se[j])
        result["pooled_complier_y0"][kind] = float(y0_mean[j])
        result["pooled_complier_y0_se"][kind] = float(y0_se[j])
        result["period_late"][kind] = {
            int(t): float(per_mean[i, j])
            for i, t in enumerate(ts_all) if observed[i] and t >= 2
        }
        result["period_late_se"][kind] = {
            int(t): float(per_se[i, j])
            for i, t in enumerate(ts_all) if observed[i] and t >= 2
        }
    return result


def generate(config: DgpConfig, seed: int
             ) -> tuple[list[LotteryRecord], list[EmploymentRecord], GroundTruth]:
    """Draw one synthetic data set.

    Returns lottery records, employment records, and the configuration's
    ground truth. Identical (config, seed) pairs produce identical records.
    Winner quotas are drawn without replacement within each year among that
    year's first-time applicants; repeat and out-of-window applicants win
    with the year's odds independently.
    """
    config.validate()
    rng = np.random.default_rng(seed)

    first_years = dict(config.applicants_per_year)
    for y, count in config.out_of_window_first.items():
        first_years[y] = first_years.get(y, 0) + count
    y0 = np.concatenate([
        np.full(first_years[y], y, dtype=np.int64) for y in sorted(first_years)
    ])
    n = y0.shape[0]
    in_window = (y0 >= config.first_year) & (y0 <= config.last_year)

    commuter = rng.random(n) < config.commuter_share
    cs = np.where(commuter, config.complier_prob(True), config.complier_prob(False))
    u_type = rng.random(n)
    is_complier = u_type < cs
    is_defier = ~is_complier & (u_type < cs + config.defier_share)

    female = rng.random(n) < config.female_share
    nat_names = list(config.nationality_shares)
    nat_cum = np.cumsum([config.nationality_shares[k] for k in nat_names])
    nationality = np.array(nat_names, dtype=object)[
        np.searchsorted(nat_cum, rng.random(n), side="right").clip(0, len(nat_names) - 1)
    ]
    a = (config.age_min - config.age_mean) / config.age_sd
    b = (config.age_max - config.age_mean) / config.age_sd
    age = truncnorm.rvs(a, b, loc=config.age_mean, scale=config.age_sd,
                        size=n, random_state=rng)
    birth_year = y0 - np.round(age).astype(np.int64)
    nat_missing = rng.random(n) < config.missing_nationality_prob
    age_missing = rng.random(n) < config.missing_age_prob
    gender_missing = rng.random(n) < config.missing_gender_prob

    # First-draw outcome: exact quota inside the window, odds elsewhere.
    z = np.zeros(n, dtype=bool)
    for y in sorted(first_years):
        block = np.flatnonzero(y0 == y)
        if config.first_year <= y <= config.last_year and config.winners_per_year is not None:
            winners = rng.choice(block.shape[0], size=config.winners_per_year[y],
                                 replace=False)
            z[block[winners]] = True
        else:
            z[block] = rng.random(block.shape[0]) < config.win_odds(y)

    horizon_max = max(0, config.employment_last_year - int(y0.min()))
    ts = np.arange(1, horizon_max + 1)

    # Reapplication chain for losers; a complier's first win triggers a move
    # the following year.
    moved_rel = np.full(n, np.iinfo(np.int64).max)
    moved_rel[(is_complier & z)] = 1
    if config.defier_share > 0.0:
        moved_rel[is_defier & ~z] = 1
    reapply_p = np.where(
        is_complier,
        np.minimum(1.0, config.reapply_prob * config.reapply_boost_complier),
        config.reapply_prob,
    )
    repeat_records: list[tuple[int, int, bool]] = []  # (person, year, won)
    if config.reapply_prob > 0.0:
        base = int(y0.min())
        chain_span = 2 + config.last_lottery_year - base
        odds_table = _odds_table(config, base, int(y0.max()) - base + chain_span)
        active = ~z
        for j in range(1, chain_span):
            year = y0 + j
            legal = year <= config.last_lottery_year
            applies = active & legal & (rng.random(n) < reapply_p)
            if not applies.any():
                break
            wins = applies & (rng.random(n) < odds_table[year - base])
            for i in np.flatnonzero(applies):
                repeat_records.append((int(i), int(year[i]), bool(wins[i])))
            newly_moved = wins & is_complier & (moved_rel == np.iinfo(np.int64).max)
            moved_rel[newly_moved] = j + 1
            active = applies & ~wins

    params_c = config.outcome_params(True)
    params_nc = config.outcome_params(False)

    def per_person(attr, nt_c=None, nt_nc=None):
        complier_like = is_complier | is_defier
        val = np.where(commuter, getattr(params_c, attr), getattr(params_nc, attr))
        if nt_c is None:
            return val
        nt_val = np.where(commuter, nt_c, nt_nc)
        return np.where(complier_like, val, nt_val)

    p_res1 = per_person("reside_treated")
    p_res0 = per_person("reside_untreated",
                        config.never_taker.reside, config.never_taker.reside)
    p_emp1 = per_person("employed_treated")
    p_emp0 = per_person("employed_untreated",
                        config.never_taker.employed_commuter,
                        config.never_taker.employed_non_commuter)
    rho = np.where(commuter, params_c.persistence, params_nc.persistence)
    full = np.where(commuter,
                    rng.random(n) < params_c.activity_full_share,
                    rng.random(n) < params_nc.activity_full_share)
    level = np.where(full, 100.0,
                     np.where(commuter, params_c.part_time_level,
                              params_nc.part_time_level))

    treated = ts[None, :] >= moved_rel[:, None]

    def process(p1, p0, force_move_year: bool):
        persistent = rng.random(n) < rho
        v1 = rng.random(n) < p1
        v0 = rng.random(n) < p0
        iid = rng.random((n, horizon_max))
        p_mat = np.where(treated, p1[:, None], p0[:, None])
        base = np.where(treated, v1[:, None], v0[:, None])
        vals = np.where(persistent[:, None], base, iid < p_mat)
        if force_move_year:
            vals = vals | (ts[None, :] == moved_rel[:, None])
        return vals

    resident = process(p_res1, p_res0, force_move_year=True)
    employed = process(p_emp1, p_emp0, force_move_year=False)
    # Residence in the year after a participation exists only by moving;
    # the process above may not say otherwise for t = 1.
    if horizon_max >= 1:
        resident[:, 0] = moved_rel == 1

    lottery_records: list[LotteryRecord] = []
    employment_records: list[EmploymentRecord] = []
    width = len(str(n))
    pids = [f"P{i + 1:0{width}d}" for i in range(n)]
    season_first = rng.integers(0, 2, size=n)
    season_repeat = rng.integers(0, 2, size=max(1, len(repeat_records)))

    for i in range(n):
        by = None if age_missing[i] else int(birth_year[i])
        nat = None if nat_missing[i] else str(nationality[i])
        gender = None if gender_missing[i] else ("female" if female[i] else "male")
        lottery_records.append(LotteryRecord(
            person_id=pids[i], lottery_year=int(y0[i]),
            lottery_season=SEASONS[season_first[i]],
            predraw_won=bool(z[i]), birth_year=by, nationality=nat, gender=gender,
        ))
    for k, (i, year, won) in enumerate(repeat_records):
        by = None if age_missing[i] else int(birth_year[i])
        nat = None if nat_missing[i] else str(nationality[i])
        gender = None if gender_missing[i] else ("female" if female[i] else "male")
        lottery_records.append(LotteryRecord(
            person_id=pids[i], lottery_year=year,
            lottery_season=SEASONS[season_repeat[k]],
            predraw_won=won, birth_year=by, nationality=nat, gender=gender,
        ))
    lottery_records.sort(key=lambda r: (r.person_id, r.lottery_year, r.lottery_season))

    for i in range(n):
        base_year = int(y0[i])
        gender = "female" if female[i] else "male"
        for year in range(max(config.employment_first_year, base_year - 1),
                          min(config.employment_last_year, base_year + horizon_max) + 1):
            t = year - base_year
            if t < 1:
                emp = bool(commuter[i])
                res = False
            else:
                emp = bool(employed[i, t - 1])
                res = bool(resident[i, t - 1])
            if not (emp or res):
                continue
            employment_records.append(EmploymentRecord(
                person_id=pids[i], year=year, employed=emp,
                activity_level=float(level[i]) if emp else 0.0,
                resides_in_li=res, birth_year=int(birth_year[i]),
                nationality=str(nationality[i]), gender=gender,
            ))
    employment_records.sort(key=lambda r: (r.person_id, r.year))

    return lottery_records, employment_records, true_late(config)


def _parse_value(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", ""):
        return None
    if re.fullmatch(r"[+-]?\d+", text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        pass
    if ":" in text:
        pairs = {}
        for part in text.split(","):
            key, _, val = part.partition(":")
            k = key.strip()
            pairs[int(k) if re.fullmatch(r"\d+", k) else k] = _parse_value(val)
        return pairs
    return text


def read_config(path) -> DgpConfig:
    """Read a generator configuration from a key-value file.

    Lines have the form ``name = value``; ``#`` starts a comment. Values may
    be numbers, booleans, ``none``, bare strings, or comma-separated
    ``key:value`` maps. Nested parameters use dotted names
    (``outcomes.employed_treated = 0.6``). A ``preset`` line selects the
    starting configuration (default, flat, historical, heterogeneous).
    """
    entries: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DgpConfigError(f"{path}:{line_no}: expected 'name = value'")
            name, _, value = line.partition("=")
            entries[name.strip()] = _parse_value(value)

    preset = entries.pop("preset", "default")
    if preset not in PRESETS:
        raise DgpConfigError(f"unknown preset {preset!r} (choose from {sorted(PRESETS)})")
    config = PRESETS[preset]()

    top = {f.name: f for f in fields(DgpConfig)}
    nested_types = {"outcomes": OutcomeParams, "outcomes_commuter": OutcomeParams,
                    "outcomes_non_commuter": OutcomeParams,
                    "never_taker": NeverTakerParams}
    updates: dict[str, object] = {}
    nested_updates: dict[str, dict[str, object]] = {}
    for name, value in entries.items():
        if "." in name:
            parent, _, child = name.partition(".")
            if parent not in nested_types:
                raise DgpConfigError(f"unknown parameter group {parent!r}")
            if child not in {f.name for f in fields(nested_types[parent])}:
                raise DgpConfigError(f"unknown parameter {name!r}")
            nested_updates.setdefault(parent, {})[child] = value
        elif name in top:
            updates[name] = value
        else:
            raise DgpConfigError(f"unknown parameter {name!r}")
    for parent, child_updates in nested_updates.items():
        current = getattr(config, parent)
        if current is None:
            current = nested_types[parent]()
        updates[parent] = replace(current, **child_updates)
    # Choosing winner quotas drops the default win-probability mode and
    # vice versa, unless the file sets both explicitly.
    if "winners_per_year" in updates and "win_prob_per_year" not in updates:
        updates["win_prob_per_year"] = None
    if "win_prob_per_year" in updates and "winners_per_year" not in updates:
        updates["winners_per_year"] = None
    config = replace(config, **updates)
    config.validate()
    return config
