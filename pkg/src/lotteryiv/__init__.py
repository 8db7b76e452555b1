"""Instrumental-variable evaluation of a residence-permit lottery.

The pre-draw of an annual migration lottery serves as the instrument for
moving to the country, measured one year after a person's first
participation. Outcomes from two years after the participation onward are
reweighted by the inverse of the instrument propensity score, estimated by
probit on participation-year dummies (optionally plus demographics), to
identify the local average treatment effect among lottery compliers.
Inference is by cluster bootstrap over persons. A calibrated synthetic
generator with closed-form true effects backs validation end to end.
"""

from .bootstrap import (
    BootstrapConfig,
    BootstrapError,
    BootstrapResult,
    cluster_bootstrap,
    resample_indices,
)
from .dgp import (
    DgpConfig,
    DgpConfigError,
    GroundTruth,
    NeverTakerParams,
    OutcomeParams,
    flat_config,
    generate,
    heterogeneous_effects_config,
    historical_config,
    mc_true_late,
    read_config,
    true_late,
)
from .estimator import (
    EstimationError,
    IpwLate,
    LateEstimate,
    TrimRule,
    complier_y0_mean,
    estimate_by_period,
    estimate_pooled,
    estimate_subgroup,
    ipw_late,
    make_pipeline_fn,
    subgroup_mask,
    trim,
)
from .linkage import (
    OUTCOME_LABELS,
    OUTCOME_ORDER,
    EmploymentRecord,
    EvaluationSample,
    LinkageError,
    LinkedPanel,
    LinkedPerson,
    LotteryRecord,
    OutcomeKind,
    build_evaluation_sample,
    link_records,
    load_employment_csv,
    load_lottery_csv,
    select_participation,
    write_employment_csv,
    write_lottery_csv,
)
from .propensity import (
    ConvergenceError,
    CovariateMode,
    CovariateSpec,
    DesignMatrix,
    ProbitRegression,
    SeparationError,
    build_design,
    fit_probit,
    predict_pscore,
    probit_loglik,
    probit_score,
)
from .report import (
    BalanceRow,
    BalanceTable,
    RunConfig,
    StageError,
    balance_table,
    run_analysis,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
