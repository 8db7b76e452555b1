"""Inverse-probability-weighted LATE estimation.

Outcomes are reweighted by the inverse of the instrument propensity score.
The ITT contrast over the first-stage contrast identifies the local average
treatment effect among compliers. Weighting comes in two modes: the
unnormalized sample analog

    mean(Y Z / p - Y (1 - Z) / (1 - p)) / mean(D Z / p - D (1 - Z) / (1 - p))

and a normalized mode in which each weight group (Z = 1 and Z = 0, in
numerator and denominator) is rescaled to sum to one before differencing.
The ratio identity late * first_stage == itt holds per mode by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .linkage import OUTCOME_ORDER, EvaluationSample, OutcomeKind
from .propensity import (
    CovariateSpec,
    ProbitRegression,
    build_design,
    fit_probit,
    predict_pscore,
)


class EstimationError(RuntimeError):
    """The estimand is not identified on the data at hand."""


@dataclass(frozen=True)
class TrimRule:
    """Propensity-score bounds outside which observations are dropped."""

    lo: float = 0.05
    hi: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.lo < self.hi <= 1.0:
            raise ValueError(f"invalid trimming bounds [{self.lo}, {self.hi}]")


@dataclass
class LateEstimate:
    """Point estimates for one outcome on one (trimmed) row set."""

    outcome: OutcomeKind
    late: float
    itt: float
    first_stage: float
    complier_y0_mean: float
    n_used: int
    n_trimmed: int


def trim(pscores: np.ndarray, rule: TrimRule = TrimRule()) -> tuple[np.ndarray, int]:
    """Keep mask for observations with lo <= p <= hi, plus the dropped count.

    Trimming is decided at the participant level; applying this to
    participant scores broadcast to outcome rows drops all rows of a trimmed
    participant at once.
    """
    p = np.asarray(pscores, dtype=np.float64)
    keep = (p >= rule.lo) & (p <= rule.hi)
    if not keep.any():
        raise EstimationError("empty sample after trimming")
    return keep, int(p.shape[0] - keep.sum())


def _contrast(values: np.ndarray, w1: np.ndarray, w0: np.ndarray,
              normalize: bool) -> np.ndarray:
    """Weighted Z=1 minus Z=0 contrast of the columns of ``values``."""
    if normalize:
        return w1 @ values / w1.sum() - w0 @ values / w0.sum()
    return (w1 - w0) @ values / values.shape[0]


def _estimate_columns(Y: np.ndarray, d: np.ndarray, z: np.ndarray,
                      pscore: np.ndarray, normalize: bool) -> tuple[np.ndarray, ...]:
    z = np.asarray(z, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    p = np.asarray(pscore, dtype=np.float64)
    w1 = z / p
    w0 = (1.0 - z) / (1.0 - p)
    if w1.sum() == 0.0 or w0.sum() == 0.0:
        raise EstimationError("rows lack winners or losers; contrast undefined")
    itt = _contrast(Y, w1, w0, normalize)
    first_stage = float(_contrast(d[:, None], w1, w0, normalize)[0])
    if first_stage == 0.0:
        raise EstimationError("no identified compliers (zero first stage)")
    late = itt / first_stage
    y0_num = _contrast(Y * (1.0 - d)[:, None], w1, w0, normalize)
    y0_den = float(_contrast((1.0 - d)[:, None], w1, w0, normalize)[0])
    if y0_den == 0.0:
        raise EstimationError("degenerate complier nontreatment mean (zero denominator)")
    complier_y0 = y0_num / y0_den
    return late, itt, first_stage, complier_y0


def ipw_late(y: np.ndarray, d: np.ndarray, z: np.ndarray, pscore: np.ndarray,
             normalize: bool = True, outcome: OutcomeKind | None = None,
             n_trimmed: int = 0) -> LateEstimate:
    """LATE, ITT, and first stage for a single outcome on post-trim rows."""
    y = np.asarray(y, dtype=np.float64)
    late, itt, fs, y0 = _estimate_columns(y[:, None], d, z, pscore, normalize)
    return LateEstimate(
        outcome=outcome,
        late=float(late[0]),
        itt=float(itt[0]),
        first_stage=fs,
        complier_y0_mean=float(y0[0]),
        n_used=int(y.shape[0]),
        n_trimmed=n_trimmed,
    )


def complier_y0_mean(y: np.ndarray, d: np.ndarray, z: np.ndarray,
                     pscore: np.ndarray, normalize: bool = False) -> float:
    """Mean potential outcome among compliers under nontreatment.

    The unnormalized form is
    mean(Y (1-D) (Z/p - (1-Z)/(1-p))) / mean((1-D) (Z/p - (1-Z)/(1-p))).
    """
    y = np.asarray(y, dtype=np.float64)
    _, _, _, y0 = _estimate_columns(y[:, None], d, z, pscore, normalize)
    return float(y0[0])


class IpwLate(BaseEstimator):
    """Instrument-propensity-weighted LATE estimator over one or more outcomes.

    Operates on post-propensity arrays: outcomes ``y`` (one column per
    outcome), treatment ``d``, instrument ``z``, and the propensity score
    ``pscore`` aligned with the rows. Rows with extreme scores are trimmed
    before estimation.

    Attributes (after ``fit``)
    --------------------------
    late_, itt_, complier_y0_ : float or ndarray matching the shape of ``y``
    first_stage_ : float
    n_used_, n_trimmed_ : int
    """

    def __init__(self, normalize: bool = True, trim_lo: float = 0.05,
                 trim_hi: float = 0.95):
        self.normalize = normalize
        self.trim_lo = trim_lo
        self.trim_hi = trim_hi

    def fit(self, y, d, z, pscore):
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        Y = y[:, None] if single else y
        d = np.asarray(d, dtype=np.float64).ravel()
        z = np.asarray(z, dtype=np.float64).ravel()
        p = np.asarray(pscore, dtype=np.float64).ravel()
        n = Y.shape[0]
        if not (d.shape[0] == z.shape[0] == p.shape[0] == n):
            raise ValueError("y, d, z, and pscore must have the same number of rows")
        if not np.all((z == 0.0) | (z == 1.0)) or not np.all((d == 0.0) | (d == 1.0)):
            raise ValueError("d and z must be binary 0/1")

        keep, n_trimmed = trim(p, TrimRule(self.trim_lo, self.trim_hi))
        late, itt, fs, y0 = _estimate_columns(
            Y[keep], d[keep], z[keep], p[keep], self.normalize
        )
        self.late_ = float(late[0]) if single else late
        self.itt_ = float(itt[0]) if single else itt
        self.first_stage_ = fs
        self.complier_y0_ = float(y0[0]) if single else y0
        self.n_used_ = int(keep.sum())
        self.n_trimmed_ = n_trimmed
        return self

    def effects(self) -> dict[str, object]:
        check_is_fitted(self, "late_")
        return {
            "late": self.late_,
            "itt": self.itt_,
            "first_stage": self.first_stage_,
            "complier_y0_mean": self.complier_y0_,
            "n_used": self.n_used_,
            "n_trimmed": self.n_trimmed_,
        }


def _row_arrays(sample: EvaluationSample, pscores: np.ndarray):
    """Broadcast participant-level d, z, p to outcome rows."""
    pscores = np.asarray(pscores, dtype=np.float64)
    if pscores.shape != (sample.n_participants,):
        raise ValueError("need one propensity score per participant")
    owner = sample.row_person
    return (
        sample.outcomes,
        sample.d[owner].astype(np.float64),
        sample.z[owner].astype(np.float64),
        pscores[owner],
    )


def estimate_pooled(sample: EvaluationSample, pscores: np.ndarray,
                    outcomes: tuple[OutcomeKind, ...] = OUTCOME_ORDER,
                    rule: TrimRule = TrimRule(),
                    normalize: bool = True) -> list[LateEstimate]:
    """Estimate every requested outcome on the pooled outcome-period rows.

    One participant-level propensity score is broadcast to all of that
    person's rows; trimming therefore removes whole persons.
    """
    Y, d, z, p = _row_arrays(sample, pscores)
    keep, n_trimmed = trim(p, rule)
    cols = [OUTCOME_ORDER.index(k) for k in outcomes]
    late, itt, fs, y0 = _estimate_columns(
        Y[np.ix_(keep, cols)], d[keep], z[keep], p[keep], normalize
    )
    n_used = int(keep.sum())
    return [
        LateEstimate(
            outcome=kind,
            late=float(late[j]),
            itt=float(itt[j]),
            first_stage=fs,
            complier_y0_mean=float(y0[j]),
            n_used=n_used,
            n_trimmed=n_trimmed,
        )
        for j, kind in enumerate(outcomes)
    ]


def estimate_by_period(sample: EvaluationSample, pscores: np.ndarray,
                       outcomes: tuple[OutcomeKind, ...] = OUTCOME_ORDER,
                       rule: TrimRule = TrimRule(),
                       normalize: bool = True) -> dict[int, list[LateEstimate]]:
    """Estimate each outcome period on its own rows.

    Periods whose rows lack winners or losers after trimming, or where no
    compliers are identified, are skipped with a warning rather than failing
    the run.
    """
    Y, d, z, p = _row_arrays(sample, pscores)
    keep, _ = trim(p, rule)
    cols = [OUTCOME_ORDER.index(k) for k in outcomes]
    results: dict[int, list[LateEstimate]] = {}
    for t in np.unique(sample.row_t).tolist():
        in_period = sample.row_t == t
        sel = keep & in_period
        n_trimmed_t = int(in_period.sum() - sel.sum())
        zt = z[sel]
        if zt.size == 0 or not (zt == 1).any() or not (zt == 0).any():
            warnings.warn(f"period {t}: no winners or no losers; estimate omitted")
            continue
        try:
            late, itt, fs, y0 = _estimate_columns(
                Y[np.ix_(sel, cols)], d[sel], zt, p[sel], normalize
            )
        except EstimationError as exc:
            warnings.warn(f"period {t}: {exc}; estimate omitted")
            continue
        results[t] = [
            LateEstimate(
                outcome=kind,
                late=float(late[j]),
                itt=float(itt[j]),
                first_stage=fs,
                complier_y0_mean=float(y0[j]),
                n_used=int(sel.sum()),
                n_trimmed=n_trimmed_t,
            )
            for j, kind in enumerate(outcomes)
        ]
    return results


@dataclass
class _ParticipantView:
    """Participant-level slice of a sample, enough to rebuild a design."""

    t0: np.ndarray
    age: np.ndarray
    age_missing: np.ndarray
    female: np.ndarray
    gender_missing: np.ndarray
    nationality: np.ndarray
    nationality_missing: np.ndarray
    person_ids: list[str]

    @property
    def n_participants(self) -> int:
        return self.t0.shape[0]


def make_pipeline_fn(sample: EvaluationSample,
                     spec: CovariateSpec = CovariateSpec(),
                     rule: TrimRule = TrimRule(), normalize: bool = True,
                     tol: float = 1e-8, max_iter: int = 100,
                     include_periods: bool = False):
    """Closure rerunning design build, probit fit, trim, and estimation.

    The returned callable maps an array of participant indices (with
    multiplicity, as drawn by the cluster bootstrap) to a flat mapping of
    statistics: ``late/<outcome>``, ``itt/<outcome>``,
    ``complier_y0/<outcome>``, ``first_stage``, and with
    ``include_periods`` also ``period_late/<outcome>/<t>`` and
    ``period_y0/<outcome>/<t>``. Degenerate periods are omitted from the
    mapping rather than raised.
    """
    Y = sample.outcomes

    def fn(idx: np.ndarray) -> dict[str, float]:
        idx = np.asarray(idx)
        view = _ParticipantView(
            t0=sample.t0[idx],
            age=sample.age[idx],
            age_missing=sample.age_missing[idx],
            female=sample.female[idx],
            gender_missing=sample.gender_missing[idx],
            nationality=sample.nationality[idx],
            nationality_missing=sample.nationality_missing[idx],
            person_ids=[],
        )
        design = build_design(view, spec)
        fit = ProbitRegression(tol=tol, max_iter=max_iter).fit(
            design.values, sample.z[idx], column_names=design.columns)
        pscores = fit.predict_pscore(design.values)
        keep, _ = trim(pscores, rule)
        drawn = idx[keep]
        rows, owners = sample.rows_of(drawn)
        owner_participant = drawn[owners]
        d = sample.d[owner_participant].astype(np.float64)
        z = sample.z[owner_participant].astype(np.float64)
        p = pscores[keep][owners]
        late, itt, fs, y0 = _estimate_columns(Y[rows], d, z, p, normalize)
        stats = {"first_stage": fs}
        for j, kind in enumerate(OUTCOME_ORDER):
            stats[f"late/{kind.value}"] = float(late[j])
            stats[f"itt/{kind.value}"] = float(itt[j])
            stats[f"complier_y0/{kind.value}"] = float(y0[j])
        if include_periods:
            row_t = sample.row_t[rows]
            for t in np.unique(row_t).tolist():
                sel = row_t == t
                zt = z[sel]
                if not (zt == 1.0).any() or not (zt == 0.0).any():
                    continue
                try:
                    l_t, _, _, y0_t = _estimate_columns(
                        Y[rows[sel]], d[sel], zt, p[sel], normalize)
                except EstimationError:
                    continue
                for j, kind in enumerate(OUTCOME_ORDER):
                    stats[f"period_late/{kind.value}/{t}"] = float(l_t[j])
                    stats[f"period_y0/{kind.value}/{t}"] = float(y0_t[j])
        return stats

    return fn


def subgroup_mask(sample: EvaluationSample, predicate) -> np.ndarray:
    """Participant mask for a subgroup predicate.

    Accepts ``"commuter"``, ``"non_commuter"``, ``"all"``, or an explicit
    boolean mask over participants.
    """
    if isinstance(predicate, str):
        name = predicate.replace("-", "_")
        if name == "commuter":
            return sample.commuter.copy()
        if name == "non_commuter":
            return ~sample.commuter
        if name == "all":
            return np.ones(sample.n_participants, dtype=bool)
        raise ValueError(f"unknown subgroup predicate {predicate!r}")
    return np.asarray(predicate, dtype=bool)


def estimate_subgroup(sample: EvaluationSample, predicate,
                      spec: CovariateSpec = CovariateSpec(),
                      outcomes: tuple[OutcomeKind, ...] = OUTCOME_ORDER,
                      rule: TrimRule = TrimRule(), normalize: bool = True,
                      tol: float = 1e-8, max_iter: int = 100) -> list[LateEstimate]:
    """Rerun the whole pipeline (propensity fit, trim, estimate) in a subgroup."""
    mask = subgroup_mask(sample, predicate)
    if not mask.any():
        raise EstimationError("empty subgroup")
    sub = sample.subset(mask)
    design = build_design(sub, spec)
    fit = fit_probit(design, sub.z, tol=tol, max_iter=max_iter)
    pscores = predict_pscore(fit, design)
    return estimate_pooled(sub, pscores, outcomes=outcomes, rule=rule,
                           normalize=normalize)
