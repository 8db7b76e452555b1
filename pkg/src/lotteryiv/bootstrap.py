"""Cluster (block) bootstrap inference.

Persons are resampled with replacement together with all of their outcome
rows, so within-person dependence across outcome periods is respected. Each
replicate reruns the full pipeline (propensity fit, trimming, estimation)
supplied as a callable; replicate randomness comes from counter-based
streams keyed by (seed, replicate index) so results are bit-identical for
any worker count and execution order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.stats import norm

from .estimator import EstimationError
from .propensity import ConvergenceError, SeparationError

#: Exceptions that mark a replicate as failed instead of aborting the run.
_REPLICATE_FAILURES = (
    EstimationError,
    SeparationError,
    ConvergenceError,
    ValueError,
    np.linalg.LinAlgError,
)


class BootstrapError(RuntimeError):
    """Inference is unreliable (too many failed replicates)."""


@dataclass(frozen=True)
class BootstrapConfig:
    replications: int = 1999
    seed: int = 0
    ci_level: float = 0.95
    n_jobs: int = 1
    max_failure_share: float = 0.10
    keep_replicates: bool = False

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie strictly between 0 and 1")


@dataclass
class BootstrapResult:
    estimate: float
    se: float
    p_value: float
    ci: tuple[float, float]
    ci_percentile: tuple[float, float]
    n_failed_replicates: int
    n_replicates_used: int
    degenerate: bool = False
    replicates: np.ndarray | None = None


def resample_indices(n_clusters: int, seed: int, replicate: int) -> np.ndarray:
    """The participant draw of one replicate: n_clusters ids with replacement."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(replicate,)))
    return rng.integers(0, n_clusters, size=n_clusters)


def cluster_bootstrap(sample, pipeline_fn: Callable[[np.ndarray], Mapping[str, float]],
                      config: BootstrapConfig = BootstrapConfig()) -> dict[str, BootstrapResult]:
    """Bootstrap every statistic produced by ``pipeline_fn``.

    ``pipeline_fn`` receives an array of participant indices (the point
    estimate uses the identity draw) and returns a mapping from statistic
    name to value. Replicates raising an estimation-type error are counted
    in ``n_failed_replicates`` and excluded; a statistic missing from a
    replicate (e.g. a degenerate period) is excluded for that statistic
    only. Standard errors are the sample standard deviation of replicate
    values, p-values use the normal approximation 2 (1 - Phi(|t|)), and the
    interval is estimate +/- z * se with a percentile interval alongside.
    """
    n_clusters = sample.n_participants
    if n_clusters < 2:
        raise ValueError("cluster bootstrap needs at least 2 clusters")

    point = dict(pipeline_fn(np.arange(n_clusters)))
    names = list(point)
    reps = config.replications

    def run_one(r: int):
        idx = resample_indices(n_clusters, config.seed, r)
        try:
            return dict(pipeline_fn(idx))
        except _REPLICATE_FAILURES:
            return None

    if config.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
            outcomes = list(pool.map(run_one, range(reps)))
    else:
        outcomes = [run_one(r) for r in range(reps)]

    n_failed = sum(1 for o in outcomes if o is None)
    if n_failed > config.max_failure_share * reps:
        raise BootstrapError(
            f"{n_failed} of {reps} bootstrap replicates failed; "
            "inference unreliable"
        )

    draws = np.full((reps, len(names)), np.nan)
    for r, out in enumerate(outcomes):
        if out is None:
            continue
        for j, name in enumerate(names):
            if name in out:
                draws[r, j] = out[name]

    z_crit = float(norm.ppf(0.5 + config.ci_level / 2.0))
    alpha = 1.0 - config.ci_level
    results: dict[str, BootstrapResult] = {}
    for j, name in enumerate(names):
        vals = draws[:, j]
        vals = vals[np.isfinite(vals)]
        est = float(point[name])
        if vals.size >= 2:
            se = float(np.std(vals, ddof=1))
        else:
            se = float("nan")
        degenerate = False
        if se == 0.0:
            degenerate = True
            p = 0.0 if est != 0.0 else 1.0
        elif np.isnan(se):
            p = float("nan")
        else:
            p = float(2.0 * norm.sf(abs(est / se)))
        ci = (est - z_crit * se, est + z_crit * se)
        if vals.size:
            ci_pct = (
                float(np.quantile(vals, alpha / 2.0)),
                float(np.quantile(vals, 1.0 - alpha / 2.0)),
            )
        else:
            ci_pct = (float("nan"), float("nan"))
        results[name] = BootstrapResult(
            estimate=est,
            se=se,
            p_value=p,
            ci=ci,
            ci_percentile=ci_pct,
            n_failed_replicates=n_failed,
            n_replicates_used=int(vals.size),
            degenerate=degenerate,
            replicates=vals.copy() if config.keep_replicates else None,
        )
    return results
