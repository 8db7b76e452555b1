"""Instrument propensity estimation: design matrices and probit maximum likelihood.

The main specification controls for participation-year dummies only. That
design is one-hot over years without an intercept, so the probit is
saturated and the fitted probabilities equal within-year winner shares. The
robustness specification adds age, gender, nationality, and missing-value
flags around a reference category for each block.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np
from scipy.linalg import qr
from scipy.special import log_ndtr, ndtr
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .linkage import NATIONALITIES

if TYPE_CHECKING:  # pragma: no cover
    from .linkage import EvaluationSample

PSCORE_CLIP = 1e-12


class SeparationError(RuntimeError):
    """The likelihood has no maximum because a column separates the outcome."""


class ConvergenceError(RuntimeError):
    """Newton iterations exhausted without meeting the gradient tolerance."""


class CovariateMode(str, Enum):
    YEAR_ONLY = "year"
    YEAR_PLUS_DEMOGRAPHICS = "full"


@dataclass(frozen=True)
class CovariateSpec:
    """Which covariates enter the instrument propensity model.

    ``years`` restricts the dummy levels (default: all years in the sample);
    ``reference_year`` is only used in the demographic mode, which carries an
    intercept (default: earliest year present).
    """

    mode: CovariateMode = CovariateMode.YEAR_ONLY
    years: tuple[int, ...] | None = None
    reference_year: int | None = None


@dataclass
class DesignMatrix:
    values: np.ndarray
    columns: list[str]
    person_ids: list[str]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _check_collinearity(values: np.ndarray, columns: list[str]) -> None:
    zero = [c for c, col in zip(columns, values.T) if not np.any(col)]
    if zero:
        raise ValueError(f"all-zero design columns: {', '.join(zero)}")
    _, r, pivot = qr(values, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(values.shape) * np.finfo(float).eps
    rank = int(np.sum(diag > tol))
    if rank < values.shape[1]:
        offending = sorted(columns[j] for j in pivot[rank:])
        raise ValueError(f"collinear design columns: {', '.join(offending)}")


def build_design(sample: "EvaluationSample", spec: CovariateSpec) -> DesignMatrix:
    """Build the participant-level design matrix for the propensity model.

    One row per participant. Missing demographics enter as value zero plus a
    one on the corresponding missing-flag dummy. Dummy levels absent from
    the sample are omitted so no column is all-zero; a rank-deficient design
    raises with the offending column names.
    """
    if sample.n_participants == 0:
        raise ValueError("cannot build a design for an empty sample")
    years_present = np.unique(sample.t0)
    if spec.years is not None:
        years = [y for y in spec.years if y in set(years_present.tolist())]
    else:
        years = years_present.tolist()
    if not years:
        raise ValueError("no participation years left for the design")

    cols: list[np.ndarray] = []
    names: list[str] = []
    t0 = sample.t0

    if spec.mode is CovariateMode.YEAR_ONLY:
        # Disjoint nonempty indicators: full rank by construction, no QR needed.
        for y in years:
            cols.append((t0 == y).astype(np.float64))
            names.append(f"year_{y}")
        values = np.column_stack(cols)
        return DesignMatrix(values=values, columns=names,
                            person_ids=list(sample.person_ids))
    else:
        reference = spec.reference_year if spec.reference_year is not None else years[0]
        cols.append(np.ones(sample.n_participants))
        names.append("intercept")
        for y in years:
            if y == reference:
                continue
            cols.append((t0 == y).astype(np.float64))
            names.append(f"year_{y}")
        age = np.where(sample.age_missing, 0.0, sample.age)
        cols.append(age)
        names.append("age")
        cols.append(sample.age_missing.astype(np.float64))
        names.append("age_missing")
        cols.append(np.where(sample.gender_missing, 0.0, sample.female))
        names.append("female")
        for nat in NATIONALITIES:
            if nat == "OTHER":
                continue
            cols.append((sample.nationality == nat).astype(np.float64))
            names.append(f"nationality_{nat}")
        cols.append(sample.nationality_missing.astype(np.float64))
        names.append("nationality_missing")
        keep = [i for i, c in enumerate(cols) if np.any(c)]
        cols = [cols[i] for i in keep]
        names = [names[i] for i in keep]

    values = np.column_stack(cols)
    _check_collinearity(values, names)
    return DesignMatrix(values=values, columns=names, person_ids=list(sample.person_ids))


_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _log_phi_ratio(eta: np.ndarray) -> np.ndarray:
    """phi(eta) / Phi(eta), computed in log space for tail stability."""
    return np.exp(-0.5 * eta * eta - _LOG_SQRT_2PI - log_ndtr(eta))


def probit_loglik(X: np.ndarray, z: np.ndarray, beta: np.ndarray) -> float:
    """Probit log-likelihood sum(z log Phi(X b) + (1 - z) log Phi(-X b))."""
    eta = X @ beta
    return float(z @ log_ndtr(eta) + (1.0 - z) @ log_ndtr(-eta))


def probit_score(X: np.ndarray, z: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Analytic gradient of the probit log-likelihood."""
    eta = X @ beta
    s = z * _log_phi_ratio(eta) - (1.0 - z) * _log_phi_ratio(-eta)
    return X.T @ s


def _newton_quantities(X, z, one_minus_z, eta):
    """Log-likelihood, score, and negative Hessian at the current iterate."""
    logcdf1 = log_ndtr(eta)
    logcdf0 = log_ndtr(-eta)
    loglik = float(z @ logcdf1 + one_minus_z @ logcdf0)
    logpdf = -0.5 * eta * eta - _LOG_SQRT_2PI
    g1 = np.exp(logpdf - logcdf1)
    g0 = np.exp(logpdf - logcdf0)
    s = z * g1 - one_minus_z * g0
    w = z * g1 * (eta + g1) + one_minus_z * g0 * (g0 - eta)
    return loglik, X.T @ s, X.T @ (w[:, None] * X)


def _diagnose_separation(X, z, columns):
    """Find a single column whose supports under z=1 and z=0 are disjoint."""
    z1 = z == 1
    for j in range(X.shape[1]):
        col = X[:, j]
        a, b = col[z1], col[~z1]
        if a.size == 0 or b.size == 0:
            continue
        if a.min() > b.max() or b.min() > a.max():
            return columns[j] if columns is not None else f"column {j}"
    return None


class ProbitRegression(BaseEstimator):
    """Probit model of a binary outcome, fit by Newton-Raphson from a zero start.

    Uses the analytic gradient and observed Hessian; accepted steps never
    decrease the log-likelihood (the step is halved if a full Newton step
    would). Convergence requires the gradient max-norm to fall below ``tol``
    within ``max_iter`` iterations; anything else raises.

    Parameters
    ----------
    tol : float
        Gradient max-norm at which the fit is declared converged.
    max_iter : int
        Maximum number of Newton steps.
    clip : float
        Predicted probabilities are clamped to (clip, 1 - clip).
    divergence_norm : float
        Coefficient max-norm beyond which perfect separation is declared.

    Attributes
    ----------
    coef_ : ndarray of shape (n_columns,)
    loglik_ : float
    n_iter_ : int
    converged_ : bool
    grad_norm_ : float
    """

    def __init__(self, tol: float = 1e-8, max_iter: int = 100,
                 clip: float = PSCORE_CLIP, divergence_norm: float = 1e3):
        self.tol = tol
        self.max_iter = max_iter
        self.clip = clip
        self.divergence_norm = divergence_norm

    def fit(self, X, y, column_names: list[str] | None = None):
        X = check_array(X, dtype=np.float64)
        z = np.asarray(y, dtype=np.float64).ravel()
        if z.shape[0] != X.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        if not np.all((z == 0.0) | (z == 1.0)):
            raise ValueError("outcome must be binary 0/1")
        self.columns_ = list(column_names) if column_names is not None else None

        beta = np.zeros(X.shape[1])
        one_minus_z = 1.0 - z
        loglik, score, neg_hess = _newton_quantities(X, z, one_minus_z, X @ beta)
        n_steps = 0
        while True:
            grad_norm = float(np.max(np.abs(score))) if score.size else 0.0
            if grad_norm <= self.tol:
                break
            if n_steps >= self.max_iter:
                sep = _diagnose_separation(X, z, self.columns_)
                if sep is not None:
                    raise SeparationError(
                        f"perfect separation by design column {sep!r}"
                    )
                raise ConvergenceError(
                    f"no convergence in {self.max_iter} iterations "
                    f"(gradient max-norm {grad_norm:.3e}, log-likelihood {loglik:.6f})"
                )
            try:
                step = np.linalg.solve(neg_hess, score)
            except np.linalg.LinAlgError:
                raise ValueError(
                    "singular Hessian: design is rank-deficient"
                ) from None
            # Halve overshooting steps so the likelihood never decreases.
            for _ in range(60):
                candidate = beta + step
                cand = _newton_quantities(X, z, one_minus_z, X @ candidate)
                if cand[0] >= loglik - 1e-12 * (1.0 + abs(loglik)):
                    break
                step = step / 2.0
            beta = candidate
            loglik, score, neg_hess = cand
            n_steps += 1
            if float(np.max(np.abs(beta))) > self.divergence_norm:
                sep = _diagnose_separation(X, z, self.columns_)
                raise SeparationError(
                    "coefficients diverged"
                    + (f"; perfect separation by design column {sep!r}" if sep else "")
                )

        # A separating column drives the index into the far tails, where the
        # gradient vanishes numerically although no maximum exists; confirm
        # by support disjointness before accepting such a fit.
        if beta.size and float(np.max(np.abs(X @ beta))) > 6.0:
            sep = _diagnose_separation(X, z, self.columns_)
            if sep is not None:
                raise SeparationError(
                    f"perfect separation by design column {sep!r}"
                )

        self.coef_ = beta
        self.loglik_ = loglik
        self.n_iter_ = n_steps
        self.converged_ = True
        self.grad_norm_ = grad_norm
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_

    def predict_pscore(self, X) -> np.ndarray:
        """Fitted probabilities Phi(X b), clamped into (clip, 1 - clip)."""
        p = ndtr(self.decision_function(X))
        return np.clip(p, self.clip, 1.0 - self.clip)

    def predict_proba(self, X) -> np.ndarray:
        p = self.predict_pscore(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_pscore(X) >= 0.5).astype(int)


def fit_probit(design: DesignMatrix, z: np.ndarray,
               tol: float = 1e-8, max_iter: int = 100) -> ProbitRegression:
    """Fit the instrument propensity probit on a built design."""
    model = ProbitRegression(tol=tol, max_iter=max_iter)
    return model.fit(design.values, z, column_names=design.columns)


def predict_pscore(fit: ProbitRegression, design: DesignMatrix) -> np.ndarray:
    """Instrument propensity scores for the rows of a design."""
    return fit.predict_pscore(design.values)
