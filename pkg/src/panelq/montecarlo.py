"""Monte Carlo replications of the grouped quantile panel estimator.

Designs: three equally sized groups with intercepts 1, 2, 3, a covariate
``X_it = rho * alpha_i + g_i + v_it`` (``g_i``, ``v_it`` standard normal),
slope 1 and errors that are standard normal or raw Student t with 3 degrees
of freedom.  The location-scale model multiplies the error by
``1 + 0.1 * X_it``.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .inference import CovarianceError, fe_covariance, sandwich_covariance
from .panel import PanelData, validate_tau
from .path import GroupStructure, LambdaGrid, default_grid, match_metrics, run_lambda_path
from .selection import (DEFAULT_PNT_CONSTANT, SelectionError, candidate_refits,
                        ic_constants, penalty_rate, select_from_candidates)
from .solver import solve_fe

GROUP_LEVELS = (1.0, 2.0, 3.0)
TRUE_BETA = 1.0
SCALE_GAMMA = 0.1
DGP_RHO = {1: 0.0, 2: 0.5}
MODELS = ("location", "location-scale")
ERRORS = ("normal", "t3")
K_BUCKETS = ("1", "2", "3", "4", "5+")
FAILURE_FLAG_RATE = 0.01


@dataclass(frozen=True)
class SimConfig:
    """One simulation cell."""

    dgp: int = 1
    model: str = "location"
    error: str = "normal"
    n: int = 30
    t: int = 60
    tau: float = 0.5
    reps: int = 200
    seed: int = 42
    grid: LambdaGrid = field(default_factory=default_grid)
    pnt_constant: float = DEFAULT_PNT_CONSTANT
    bandwidth_rule: str = "hall-sheather"
    level: float = 0.95

    def __post_init__(self):
        if self.dgp not in DGP_RHO:
            raise ValueError(f"dgp must be one of {sorted(DGP_RHO)}")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.error not in ERRORS:
            raise ValueError(f"error must be one of {ERRORS}")
        if self.n < len(GROUP_LEVELS):
            raise ValueError(f"need at least {len(GROUP_LEVELS)} individuals")
        if self.t < 1 or self.reps < 1:
            raise ValueError("t and reps must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.pnt_constant <= 0:
            raise ValueError("pnt_constant must be positive")
        validate_tau(self.tau)
        if not isinstance(self.grid, LambdaGrid):
            object.__setattr__(self, "grid", LambdaGrid(self.grid))

    @property
    def rho(self) -> float:
        return DGP_RHO[self.dgp]

    @property
    def true_k(self) -> int:
        return len(GROUP_LEVELS)

    def error_quantile(self, q: float) -> float:
        dist = stats.norm if self.error == "normal" else stats.t(3)
        return float(dist.ppf(q))

    def true_beta_tau(self) -> float:
        beta = TRUE_BETA
        if self.model == "location-scale":
            beta += SCALE_GAMMA * self.error_quantile(self.tau)
        return beta

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = self.grid.values.tolist()
        return out


def group_sizes(n: int, k: int = len(GROUP_LEVELS)) -> np.ndarray:
    """Sizes differing by at most one, extras going to the lowest groups."""
    return np.array([n // k + (g < n % k) for g in range(k)])


def rep_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent stream for replication ``rep``, keyed on ``(seed, rep)``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))


@dataclass(frozen=True)
class SimulatedPanel:
    data: PanelData
    truth: GroupStructure
    true_beta_tau: float


def generate_panel(config: SimConfig, rep_index: int) -> SimulatedPanel:
    """Draw replication ``rep_index`` of a cell; deterministic in ``(seed, rep_index)``.

    ``truth`` holds the tau-specific intercepts ``alpha_g + F^-1(tau)``.
    """
    rng = rep_rng(config.seed, rep_index)
    n, t = config.n, config.t
    membership = np.repeat(np.arange(len(GROUP_LEVELS)), group_sizes(n))
    alpha = np.asarray(GROUP_LEVELS)[membership]
    ids = np.repeat(np.arange(n), t)
    g = rng.standard_normal(n)
    v = rng.standard_normal(n * t)
    if config.error == "normal":
        u = rng.standard_normal(n * t)
    else:
        u = rng.standard_t(3, size=n * t)
    x = config.rho * alpha[ids] + g[ids] + v
    scale = 1.0 + SCALE_GAMMA * x if config.model == "location-scale" else 1.0
    y = alpha[ids] + TRUE_BETA * x + scale * u
    data = PanelData(y=y, x=x.reshape(-1, 1), ids=ids, n=n,
                     times=np.tile(np.arange(1, t + 1), n))
    shift = config.error_quantile(config.tau)
    truth = GroupStructure(np.asarray(GROUP_LEVELS) + shift, membership)
    return SimulatedPanel(data=data, truth=truth, true_beta_tau=config.true_beta_tau())


# -- one replication ------------------------------------------------------------

@dataclass(frozen=True)
class RepRecord:
    """Audit record of one replication under one IC constant.

    ``status`` is ``ok`` or a short failure reason; estimates are NaN and
    flags False for failed replications.  ``matched`` says whether the path
    reached the true number of groups; ``perfect`` and ``frac_correct``
    describe the membership at the first such tuning value.
    """

    rep: int
    status: str
    k_hat: int = 0
    beta_hat: float = math.nan
    std_error: float = math.nan
    ci_lo: float = math.nan
    ci_hi: float = math.nan
    covered: bool = False
    matched: bool = False
    perfect: bool = False
    frac_correct: float = math.nan
    path_failures: int = 0
    fe_beta_hat: float = math.nan
    fe_std_error: float = math.nan
    fe_covered: bool = False
    max_gap: float = math.nan
    max_infeasibility: float = math.nan

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _track(reports):
    gaps = [r.duality_gap for r in reports if r.converged]
    infs = [r.dual_infeasibility for r in reports if r.converged]
    return max(gaps, default=math.nan), max(infs, default=math.nan)


def simulate_rep(config: SimConfig, rep: int, constants) -> list:
    """Run the full pipeline on one replication for every IC constant.

    The fixed-effects fit, path and candidate refits are shared across
    constants; covariances are cached per selected group count, so any
    constant reproduces exactly what a single-constant run computes.
    """
    sim = generate_panel(config, rep)
    data, tau = sim.data, config.tau
    fe = solve_fe(data, tau)
    if not fe.converged:
        return [RepRecord(rep=rep, status="fe-" + fe.status) for _ in constants]
    path = run_lambda_path(data, tau, config.grid, fe)
    candidates = candidate_refits(path, data, tau)
    base = ic_constants(data, tau, fe, constants[0])
    reports = [e.report for e in path] + [c.refit.report for c in candidates]
    # membership is judged on the first path entry with the true group count,
    # whatever the criterion selects
    hit = next((e for e in path if e.converged and e.k == sim.truth.k), None)
    matched = hit is not None
    perfect, frac = match_metrics(hit.grouping, sim.truth) if matched else (False, math.nan)
    fe_fields = {"fe_beta_hat": float(fe.beta[0])}
    fe_reports = [fe.report]
    try:
        fe_cov = fe_covariance(data, tau, fe, rule=config.bandwidth_rule)
    except CovarianceError:
        fe_cov = None
    if fe_cov is not None:
        n = data.n
        lo, hi = fe_cov.intervals(np.r_[fe.alpha, fe.beta], config.level)[n]
        fe_fields.update(fe_std_error=float(fe_cov.std_errors[n]),
                         fe_covered=bool(lo <= sim.true_beta_tau <= hi))
        fe_reports += list(fe_cov.aux_reports)
    covariances = {}
    out = []
    for c in constants:
        try:
            sel = select_from_candidates(candidates, base.c_hat, penalty_rate(data, c))
        except SelectionError:
            out.append(RepRecord(rep=rep, status="no-candidate",
                                 path_failures=path.n_failed))
            continue
        k = sel.k
        if k not in covariances:
            try:
                covariances[k] = sandwich_covariance(data, tau, sel.grouping, sel.best.refit,
                                                     rule=config.bandwidth_rule)
            except CovarianceError:
                covariances[k] = None
        cov = covariances[k]
        if cov is None:
            out.append(RepRecord(rep=rep, status="covariance", k_hat=k,
                                 path_failures=path.n_failed))
            continue
        beta = float(sel.beta[0])
        lo, hi = cov.intervals(np.r_[sel.best.refit.centers, sel.beta], config.level)[k]
        gap, infeas = _track(reports + fe_reports + list(cov.aux_reports))
        out.append(RepRecord(
            rep=rep, status="ok", k_hat=k, beta_hat=beta,
            std_error=float(cov.std_errors[k]), ci_lo=float(lo), ci_hi=float(hi),
            covered=bool(lo <= sim.true_beta_tau <= hi), matched=matched,
            perfect=bool(perfect), frac_correct=frac, path_failures=path.n_failed,
            **fe_fields,
            max_gap=gap, max_infeasibility=infeas))
    return out


# -- aggregation ------------------------------------------------------------------

def _prop(hits, total):
    if total == 0:
        return math.nan, math.nan
    p = hits / total
    return p, math.sqrt(p * (1.0 - p) / total)


def _mean_se(values):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return math.nan, math.nan
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else math.nan
    return float(values.mean()), se


def _error_summary(errors):
    """Bias and RMSE of estimation errors with their Monte Carlo standard errors."""
    errors = np.asarray(errors, dtype=float)
    bias, bias_se = _mean_se(errors)
    mse, mse_se = _mean_se(errors ** 2)
    rmse = math.sqrt(mse) if errors.size else math.nan
    rmse_se = mse_se / (2.0 * rmse) if errors.size and rmse > 0 else math.nan
    return bias, bias_se, rmse, rmse_se


def _k_bucket(k: int) -> str:
    return str(k) if k < 5 else "5+"


@dataclass(frozen=True)
class SimReport:
    """Aggregates over the successful replications of a cell.

    Every aggregate ``x`` has a Monte Carlo standard error ``x_se``: binomial
    for proportions, ``sd / sqrt(R)`` for means and the delta method for the
    RMSE and the standard deviation of the match rate.  Membership metrics
    are averaged over replications whose path reached the true group count.
    """

    config: SimConfig
    records: tuple
    n_ok: int
    n_failed: int
    failure_rate: float
    flagged: bool
    k_frequency: dict
    k_frequency_se: dict
    beta_mean: float
    beta_bias: float
    beta_bias_se: float
    beta_rmse: float
    beta_rmse_se: float
    coverage: float
    coverage_se: float
    mean_ci_length: float
    fe_beta_bias: float
    fe_beta_bias_se: float
    fe_beta_rmse: float
    fe_beta_rmse_se: float
    fe_coverage: float
    fe_coverage_se: float
    n_matched: int
    perfect_match: float
    perfect_match_se: float
    avg_match: float
    avg_match_se: float
    match_sd: float
    match_sd_se: float
    max_gap: float
    max_infeasibility: float

    @classmethod
    def from_records(cls, config: SimConfig, records) -> "SimReport":
        records = tuple(sorted(records, key=lambda r: r.rep))
        ok = [r for r in records if r.ok]
        r_ok = len(ok)
        n_failed = len(records) - r_ok
        counts = {b: 0 for b in K_BUCKETS}
        for r in ok:
            counts[_k_bucket(r.k_hat)] += 1
        freq, freq_se = {}, {}
        for b in K_BUCKETS:
            freq[b], freq_se[b] = _prop(counts[b], r_ok)

        truth = config.true_beta_tau()
        bias, bias_se, rmse, rmse_se = _error_summary([r.beta_hat - truth for r in ok])
        coverage, coverage_se = _prop(sum(r.covered for r in ok), r_ok)
        fe_ok = [r for r in ok if not math.isnan(r.fe_std_error)]
        fe_bias, fe_bias_se, fe_rmse, fe_rmse_se = _error_summary(
            [r.fe_beta_hat - truth for r in ok])
        fe_cov, fe_cov_se = _prop(sum(r.fe_covered for r in fe_ok), len(fe_ok))
        ci_len = float(np.mean([r.ci_hi - r.ci_lo for r in ok])) if r_ok else math.nan

        matched = [r for r in ok if r.matched]
        perfect, perfect_se = _prop(sum(r.perfect for r in matched), len(matched))
        fracs = np.array([r.frac_correct for r in matched])
        avg, avg_se = _mean_se(fracs)
        sd = float(fracs.std(ddof=1)) if fracs.size > 1 else math.nan
        sd_se = sd / math.sqrt(2.0 * (fracs.size - 1)) if fracs.size > 1 else math.nan

        gaps = [r.max_gap for r in ok if not math.isnan(r.max_gap)]
        infs = [r.max_infeasibility for r in ok if not math.isnan(r.max_infeasibility)]
        failure_rate = n_failed / len(records) if records else math.nan
        return cls(
            config=config, records=records, n_ok=r_ok, n_failed=n_failed,
            failure_rate=failure_rate, flagged=failure_rate >= FAILURE_FLAG_RATE,
            k_frequency=freq, k_frequency_se=freq_se,
            beta_mean=float(np.mean([r.beta_hat for r in ok])) if r_ok else math.nan,
            beta_bias=bias, beta_bias_se=bias_se, beta_rmse=rmse, beta_rmse_se=rmse_se,
            coverage=coverage, coverage_se=coverage_se, mean_ci_length=ci_len,
            fe_beta_bias=fe_bias, fe_beta_bias_se=fe_bias_se, fe_beta_rmse=fe_rmse,
            fe_beta_rmse_se=fe_rmse_se, fe_coverage=fe_cov, fe_coverage_se=fe_cov_se,
            n_matched=len(matched), perfect_match=perfect, perfect_match_se=perfect_se,
            avg_match=avg, avg_match_se=avg_se, match_sd=sd, match_sd_se=sd_se,
            max_gap=max(gaps, default=math.nan),
            max_infeasibility=max(infs, default=math.nan))

    def to_dict(self, include_records: bool = True) -> dict:
        """JSON-ready dictionary; NaN becomes ``None``."""
        out = {}
        for name in self.__dataclass_fields__:
            if name in ("config", "records"):
                continue
            out[name] = _clean(getattr(self, name))
        out = {"config": self.config.to_dict(), **out}
        if include_records:
            out["records"] = [_clean(asdict(r)) for r in self.records]
        return out


def _clean(value):
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return None if math.isnan(value) else value
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


# -- drivers ----------------------------------------------------------------------

def resolve_workers(workers: int = None) -> int:
    """Worker count: explicit value, else ``PANELQ_THREADS``, else the CPU count."""
    if workers is None:
        env = os.environ.get("PANELQ_THREADS", "").strip()
        if env:
            try:
                workers = int(env)
            except ValueError:
                raise ValueError(f"PANELQ_THREADS must be an integer, got {env!r}") from None
        else:
            workers = os.cpu_count() or 1
    if workers < 1:
        raise ValueError("worker count must be at least 1")
    return workers


def _rep_task(args):
    config, rep, constants = args
    return simulate_rep(config, rep, constants)


def _run_reps(config: SimConfig, constants, workers):
    tasks = [(config, rep, tuple(constants)) for rep in range(config.reps)]
    workers = min(resolve_workers(workers), len(tasks))
    if workers == 1:
        return [_rep_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_rep_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def constant_sweep(config: SimConfig, constants, workers: int = None) -> dict:
    """Reports for several ``p_nT`` constants sharing every path and refit.

    Returns ``{constant: SimReport}``; each report's config carries its constant.
    """
    constants = [float(c) for c in constants]
    if not constants:
        raise ValueError("no constants to sweep")
    if any(c <= 0 for c in constants):
        raise ValueError("constants must be positive")
    per_rep = _run_reps(config, constants, workers)
    return {c: SimReport.from_records(replace(config, pnt_constant=c),
                                      [recs[j] for recs in per_rep])
            for j, c in enumerate(constants)}


def run_cell(config: SimConfig, workers: int = None) -> SimReport:
    """Replicate the full estimation pipeline ``config.reps`` times."""
    return constant_sweep(config, [config.pnt_constant], workers)[config.pnt_constant]


AUDIT_COLUMNS = tuple(RepRecord.__dataclass_fields__)


def write_audit_csv(report: SimReport, path) -> None:
    """One row per replication with the fields of :class:`RepRecord`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(AUDIT_COLUMNS)
        for rec in report.records:
            row = asdict(rec)
            writer.writerow([_csv_cell(row[c]) for c in AUDIT_COLUMNS])


def _csv_cell(value):
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return value
