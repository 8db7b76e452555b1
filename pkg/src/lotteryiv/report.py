"""Analysis orchestration and report emission.

``run_analysis`` drives the full pipeline on either CSV inputs or a
synthetic draw, bootstraps every reported statistic, and writes four files
into the output directory: ``report.json`` (full precision),
``tables.txt`` (aligned text, two decimals), ``periods.csv``
(period-by-period series), and ``balance.csv``. Outputs are byte-identical
across reruns of the same configuration.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import t as student_t

from . import dgp as dgp_mod
from .bootstrap import BootstrapConfig, BootstrapResult, cluster_bootstrap
from .estimator import (
    EstimationError,
    TrimRule,
    make_pipeline_fn,
    subgroup_mask,
    trim,
)
from .linkage import (
    OUTCOME_LABELS,
    OUTCOME_ORDER,
    EvaluationSample,
    build_evaluation_sample,
    link_records,
    load_employment_csv,
    load_lottery_csv,
    select_participation,
    write_employment_csv,
    write_lottery_csv,
)
from .propensity import CovariateMode, CovariateSpec, build_design, fit_probit, predict_pscore

NATIONALITY_LABELS = {
    "AT": "Austria", "DE": "Germany", "IT": "Italy",
    "CH": "Switzerland", "OTHER": "Other",
}


class StageError(RuntimeError):
    """An analysis stage failed; the original error is the __cause__."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class BalanceRow:
    variable: str
    mean_z1: float
    sd_z1: float
    mean_z0: float
    sd_z0: float
    diff: float
    t_value: float
    p_value: float
    n: int


@dataclass
class BalanceTable:
    rows: list[BalanceRow]


def _welch(x1: np.ndarray, x0: np.ndarray) -> tuple[float, float]:
    """Welch two-sample t statistic and p-value (Satterthwaite df)."""
    n1, n0 = x1.size, x0.size
    if n1 < 2 or n0 < 2:
        return float("nan"), float("nan")
    v1 = float(np.var(x1, ddof=1))
    v0 = float(np.var(x0, ddof=1))
    denom_sq = v1 / n1 + v0 / n0
    if denom_sq == 0.0:
        return float("nan"), float("nan")
    t = (float(np.mean(x1)) - float(np.mean(x0))) / math.sqrt(denom_sq)
    df = denom_sq ** 2 / (
        (v1 / n1) ** 2 / (n1 - 1) + (v0 / n0) ** 2 / (n0 - 1)
    )
    return t, float(2.0 * student_t.sf(abs(t), df))


def _sd(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if x.size > 1 else float("nan")


def _balance_row(name: str, values: np.ndarray, z: np.ndarray,
                 mask: np.ndarray) -> BalanceRow:
    vals = np.asarray(values, dtype=np.float64)[mask]
    zin = z[mask]
    x1, x0 = vals[zin == 1], vals[zin == 0]
    t, p = _welch(x1, x0)
    m1 = float(np.mean(x1)) if x1.size else float("nan")
    m0 = float(np.mean(x0)) if x0.size else float("nan")
    return BalanceRow(
        variable=name, mean_z1=m1, sd_z1=_sd(x1), mean_z0=m0, sd_z0=_sd(x0),
        diff=m1 - m0, t_value=t, p_value=p, n=int(mask.sum()),
    )


def balance_table(sample: EvaluationSample) -> BalanceTable:
    """Winner/loser means, differences, and Welch t-tests per covariate.

    Covers gender, the nationality dummies with their missing flag, age with
    its missing flag, and the participation-year dummies. Each variable uses
    the observations where it is observed; the missing flags themselves use
    the full sample. Zero-variance variables get an undefined (NaN) t.
    """
    z = sample.z.astype(np.int64)
    full = np.ones(sample.n_participants, dtype=bool)
    rows = [
        _balance_row("Female", sample.female, z, ~sample.gender_missing),
        _balance_row("Nationality missing", sample.nationality_missing.astype(float),
                     z, full),
    ]
    for code, label in NATIONALITY_LABELS.items():
        rows.append(_balance_row(
            label, (sample.nationality == code).astype(float), z,
            ~sample.nationality_missing,
        ))
    rows.append(_balance_row("Age missing", sample.age_missing.astype(float), z, full))
    rows.append(_balance_row("Age", np.where(sample.age_missing, 0.0, sample.age),
                             z, ~sample.age_missing))
    for year in np.unique(sample.t0).tolist():
        rows.append(_balance_row(f"First participation {year}",
                                 (sample.t0 == year).astype(float), z, full))
    return BalanceTable(rows=rows)


@dataclass
class RunConfig:
    """One analysis run: exactly one input source plus estimation knobs."""

    lottery_csv: str | None = None
    employment_csv: str | None = None
    dgp_config: str | dgp_mod.DgpConfig | None = None
    seed: int = 1
    covariates: CovariateMode = CovariateMode.YEAR_ONLY
    participation: int = 1
    subgroup: str = "all"
    normalize: bool = True
    trim_rule: TrimRule = field(default_factory=TrimRule)
    replications: int = 1999
    n_jobs: int = 1
    out_dir: str = "lotteryiv-out"
    window: tuple[int, int] = (2006, 2016)
    last_outcome_year: int = 2018
    probit_tol: float = 1e-8
    probit_max_iter: int = 100

    def validate(self) -> None:
        have_files = self.lottery_csv is not None or self.employment_csv is not None
        if have_files and (self.lottery_csv is None or self.employment_csv is None):
            raise ValueError("file input needs both --lottery-csv and --employment-csv")
        if have_files == (self.dgp_config is not None):
            raise ValueError(
                "exactly one input source required: CSV files or a generator config"
            )
        if self.participation < 1:
            raise ValueError("participation must be >= 1")
        if self.subgroup not in ("all", "commuter", "non-commuter", "non_commuter"):
            raise ValueError(f"unknown subgroup {self.subgroup!r}")


def _fmt(x: float, digits: int = 2) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "n/a"
    return f"{x:.{digits}f}"


def _jsonable(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def _result_dict(res: BootstrapResult) -> dict:
    return {
        "estimate": _jsonable(res.estimate),
        "se": _jsonable(res.se),
        "p_value": _jsonable(res.p_value),
        "ci_lo": _jsonable(res.ci[0]),
        "ci_hi": _jsonable(res.ci[1]),
        "ci_percentile_lo": _jsonable(res.ci_percentile[0]),
        "ci_percentile_hi": _jsonable(res.ci_percentile[1]),
        "n_replicates_used": res.n_replicates_used,
        "degenerate": res.degenerate,
    }


def _results_table_text(title: str, stats: dict[str, BootstrapResult],
                        n_rows_used: int, n_trimmed: int) -> str:
    kinds = list(OUTCOME_ORDER)
    label_w = 16
    col_w = max(len(OUTCOME_LABELS[k]) for k in kinds) + 2
    lines = [title, "=" * len(title), ""]
    header = " " * label_w + "".join(OUTCOME_LABELS[k].rjust(col_w) for k in kinds)
    lines.append(header)

    def panel(name: str, key_of) -> None:
        lines.append(name)
        for rowname, attr in (("Effect", "estimate"), ("Standard error", "se"),
                              ("P-value", "p_value")):
            cells = []
            for k in kinds:
                res = stats.get(key_of(k))
                cells.append(_fmt(getattr(res, attr)) if res else "n/a")
            lines.append(rowname.ljust(label_w) + "".join(c.rjust(col_w) for c in cells))

    panel("LATE", lambda k: f"late/{k.value}")
    lines.append("First stage")
    fs = stats.get("first_stage")
    for rowname, attr in (("Effect", "estimate"), ("Standard error", "se"),
                          ("P-value", "p_value")):
        val = _fmt(getattr(fs, attr)) if fs else "n/a"
        lines.append(rowname.ljust(label_w) + val.rjust(col_w))
    panel("ITT", lambda k: f"itt/{k.value}")
    lines.append("")
    lines.append(f"{'Number of observations'.ljust(26)}{n_rows_used:,}")
    lines.append(f"{'Trimmed observations'.ljust(26)}{n_trimmed:,}")
    return "\n".join(lines)


def _balance_text(table: BalanceTable) -> str:
    headers = ["Variable", "Mean Z=1", "Sd Z=1", "Mean Z=0", "Sd Z=0",
               "Diff", "t-value", "p-value", "N"]
    body = []
    for r in table.rows:
        body.append([
            r.variable, _fmt(r.mean_z1), _fmt(r.sd_z1), _fmt(r.mean_z0),
            _fmt(r.sd_z0), _fmt(r.diff), _fmt(r.t_value), _fmt(r.p_value),
            f"{r.n:,}",
        ])
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(headers)]
    lines = ["Covariate balance by pre-draw outcome",
             "=" * 38, ""]
    lines.append("  ".join(h.ljust(widths[i]) if i == 0 else h.rjust(widths[i])
                           for i, h in enumerate(headers)))
    for row in body:
        lines.append("  ".join(c.ljust(widths[i]) if i == 0 else c.rjust(widths[i])
                               for i, c in enumerate(row)))
    return "\n".join(lines)


def run_analysis(config: RunConfig) -> dict:
    """Run the full pipeline and write report files; returns the report dict.

    Exit-code mapping for the CLI rests on the exception chain: input
    problems raise from the load stages, estimation problems from the
    model stages, each wrapped in a StageError naming the stage.
    """
    with _stage("config"):
        config.validate()
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    generated = None
    if config.dgp_config is not None:
        with _stage("generate"):
            if isinstance(config.dgp_config, dgp_mod.DgpConfig):
                dgp_config = config.dgp_config
            else:
                dgp_config = dgp_mod.read_config(config.dgp_config)
            lottery_rows, employment_rows, truth = dgp_mod.generate(
                dgp_config, config.seed)
            data_dir = out_dir / "data"
            data_dir.mkdir(exist_ok=True)
            lottery_path = data_dir / "lottery.csv"
            employment_path = data_dir / "employment.csv"
            write_lottery_csv(lottery_rows, lottery_path)
            write_employment_csv(employment_rows, employment_path)
            generated = truth
    else:
        lottery_path = config.lottery_csv
        employment_path = config.employment_csv

    with _stage("load"):
        lottery = load_lottery_csv(lottery_path)
        employment = load_employment_csv(employment_path)
    with _stage("link"):
        panel = link_records(lottery, employment)
    with _stage("sample"):
        if config.participation == 1:
            sample = build_evaluation_sample(panel, config.window,
                                             config.last_outcome_year)
        else:
            sample = select_participation(panel, config.participation,
                                          config.window, config.last_outcome_year)
        if sample.n_participants == 0:
            raise EstimationError("evaluation sample is empty")

    with _stage("subgroup"):
        if config.subgroup != "all":
            mask = subgroup_mask(sample, config.subgroup)
            if not mask.any():
                raise EstimationError(f"subgroup {config.subgroup!r} is empty")
            sample = sample.subset(mask)

    with _stage("balance"):
        balance = balance_table(sample)

    spec = CovariateSpec(mode=config.covariates)
    with _stage("propensity"):
        design = build_design(sample, spec)
        fit = fit_probit(design, sample.z, tol=config.probit_tol,
                         max_iter=config.probit_max_iter)
        pscores = predict_pscore(fit, design)
    with _stage("trim"):
        keep, _ = trim(pscores, config.trim_rule)
        keep_rows = keep[sample.row_person]
        n_rows_used = int(keep_rows.sum())
        n_rows_trimmed = int(sample.n_rows - n_rows_used)

    with _stage("estimate"):
        pipeline = make_pipeline_fn(
            sample, spec=spec, rule=config.trim_rule, normalize=config.normalize,
            tol=config.probit_tol, max_iter=config.probit_max_iter,
            include_periods=True,
        )
        boot_config = BootstrapConfig(
            replications=config.replications, seed=config.seed,
            n_jobs=config.n_jobs,
        )
        stats = cluster_bootstrap(sample, pipeline, boot_config)

    with _stage("report"):
        periods_present = sorted(
            {int(k.rsplit("/", 1)[1]) for k in stats if k.startswith("period_late/")}
        )
        period_n = {
            t: int(np.sum(keep_rows & (sample.row_t == t))) for t in periods_present
        }
        period_trimmed = {
            t: int(np.sum(~keep_rows & (sample.row_t == t))) for t in periods_present
        }

        report = {
            "run": {
                "input": ("generated" if config.dgp_config is not None else "files"),
                "seed": config.seed,
                "covariates": config.covariates.value,
                "participation": config.participation,
                "subgroup": config.subgroup,
                "normalize": config.normalize,
                "trim": [config.trim_rule.lo, config.trim_rule.hi],
                "replications": config.replications,
            },
            "funnel": {
                "lottery_records": sample.n_lottery_records,
                "persons": sample.n_persons_linked,
                "participants": sample.n_participants,
                "winners": int(sample.z.sum()),
                "outcome_rows": sample.n_rows,
                "exclusions": dict(sample.exclusions),
                "monotonicity_violations": sample.monotonicity_violations,
            },
            "propensity": {
                "columns": design.columns,
                "coefficients": [float(c) for c in fit.coef_],
                "log_likelihood": fit.loglik_,
                "iterations": fit.n_iter_,
                "converged": fit.converged_,
                "gradient_norm": fit.grad_norm_,
                "pscore_min": float(pscores.min()),
                "pscore_max": float(pscores.max()),
            },
            "observations": {"used": n_rows_used, "trimmed": n_rows_trimmed},
            "first_stage": _result_dict(stats["first_stage"]),
            "estimates": {
                kind.value: {
                    "late": _result_dict(stats[f"late/{kind.value}"]),
                    "itt": _result_dict(stats[f"itt/{kind.value}"]),
                    "complier_y0": _result_dict(stats[f"complier_y0/{kind.value}"]),
                }
                for kind in OUTCOME_ORDER
            },
            "periods": {
                kind.value: [
                    {
                        "period": t,
                        "late": _result_dict(stats[f"period_late/{kind.value}/{t}"]),
                        "complier_y0": _result_dict(
                            stats[f"period_y0/{kind.value}/{t}"]),
                        "n": period_n[t],
                        "n_trimmed": period_trimmed[t],
                    }
                    for t in periods_present
                    if f"period_late/{kind.value}/{t}" in stats
                ]
                for kind in OUTCOME_ORDER
            },
            "balance": [
                {
                    "variable": r.variable,
                    "mean_z1": _jsonable(r.mean_z1), "sd_z1": _jsonable(r.sd_z1),
                    "mean_z0": _jsonable(r.mean_z0), "sd_z0": _jsonable(r.sd_z0),
                    "diff": _jsonable(r.diff), "t_value": _jsonable(r.t_value),
                    "p_value": _jsonable(r.p_value), "n": r.n,
                }
                for r in balance.rows
            ],
            "bootstrap": {
                "replications": config.replications,
                "seed": config.seed,
                "failed_replicates": stats["first_stage"].n_failed_replicates,
            },
        }
        if generated is not None:
            report["ground_truth"] = {
                "first_stage": generated.first_stage,
                "pooled_late": {k.value: v for k, v in generated.pooled_late.items()},
            }

        with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")

        variant = {1: "first", 2: "second", 3: "third"}.get(
            config.participation, f"{config.participation}-th")
        title = (
            f"Effects based on {variant} participation, "
            + ("year dummies" if config.covariates is CovariateMode.YEAR_ONLY
               else "year dummies and demographics")
            + (f", subgroup: {config.subgroup}" if config.subgroup != "all" else "")
        )
        text = _balance_text(balance) + "\n\n" + _results_table_text(
            title, stats, n_rows_used, n_rows_trimmed)
        with open(out_dir / "tables.txt", "w", encoding="utf-8") as fh:
            fh.write(text + "\n")

        def cell(value) -> str:
            return "" if value is None else repr(value)

        with open(out_dir / "periods.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write("outcome,period,late,se,ci_lo,ci_hi,complier_y0,n\n")
            for kind in OUTCOME_ORDER:
                for entry in report["periods"][kind.value]:
                    late = entry["late"]
                    fh.write(
                        f"{kind.value},{entry['period']},{cell(late['estimate'])},"
                        f"{cell(late['se'])},{cell(late['ci_lo'])},{cell(late['ci_hi'])},"
                        f"{cell(entry['complier_y0']['estimate'])},{entry['n']}\n"
                    )

        with open(out_dir / "balance.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write("variable,mean_z1,sd_z1,mean_z0,sd_z0,diff,t_value,p_value,n\n")
            for r in balance.rows:
                cells = [r.variable] + [
                    "" if (isinstance(v, float) and math.isnan(v)) else repr(v)
                    for v in (r.mean_z1, r.sd_z1, r.mean_z0, r.sd_z0, r.diff,
                              r.t_value, r.p_value)
                ] + [str(r.n)]
                fh.write(",".join(cells) + "\n")

    return report
