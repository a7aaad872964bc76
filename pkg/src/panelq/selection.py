"""Group-conditional refits and information-criterion selection of the grouping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .panel import FixedEffectsFit, PanelData, validate_tau
from .path import GroupStructure, LambdaPathResult
from .solver import SolverReport, SolverSettings, build_grouped_problem, solve_weighted_qr

C_HAT_FLOOR = 1e-3
DEFAULT_PNT_CONSTANT = 0.1
DEFAULT_ALPHA_LEVEL = 0.05


class SelectionError(RuntimeError):
    """No usable candidate remained on the path."""


@dataclass(frozen=True)
class RefitResult:
    """Unpenalized QR with one intercept per group.

    ``centers[g]`` is the intercept of group ``g`` of the grouping it was fit on.
    """

    centers: np.ndarray
    beta: np.ndarray
    objective: float
    report: SolverReport

    @property
    def converged(self) -> bool:
        return self.report.converged


def refit(data: PanelData, tau: float, grouping: GroupStructure,
          settings: SolverSettings = None) -> RefitResult:
    """Re-estimate group intercepts and slopes given a membership."""
    if grouping.n != data.n:
        raise ValueError(f"grouping covers {grouping.n} individuals, panel has {data.n}")
    problem = build_grouped_problem(data, tau, grouping.membership, grouping.k)
    rep = solve_weighted_qr(problem, settings)
    k = grouping.k
    return RefitResult(centers=rep.solution[:k], beta=rep.solution[k:],
                       objective=rep.primal_objective, report=rep)


# -- bandwidths and sparsity ---------------------------------------------------

def _fit_inside(tau, h):
    # shrink the way quantreg does, so that tau +/- h stays a valid level
    while tau - h <= 0 or tau + h >= 1:
        h /= 2.0
    return h


def hall_sheather_bandwidth(tau: float, m: float,
                            alpha_level: float = DEFAULT_ALPHA_LEVEL) -> float:
    """Hall-Sheather bandwidth ``m^(-1/3) z^(2/3) [1.5 phi(z_tau)^2 / (2 z_tau^2 + 1)]^(1/3)``.

    ``z`` is the ``1 - alpha_level/2`` normal quantile.  The result is halved
    until ``tau - h`` and ``tau + h`` both lie inside (0, 1).
    """
    tau = validate_tau(tau)
    if m < 2:
        raise ValueError("bandwidth needs at least two observations")
    z_tau = stats.norm.ppf(tau)
    z_a = stats.norm.ppf(1.0 - alpha_level / 2.0)
    h = (m ** (-1.0 / 3.0) * z_a ** (2.0 / 3.0)
         * (1.5 * stats.norm.pdf(z_tau) ** 2 / (2.0 * z_tau ** 2 + 1.0)) ** (1.0 / 3.0))
    return _fit_inside(tau, float(h))


def bofinger_bandwidth(tau: float, m: float) -> float:
    """Bofinger bandwidth ``m^(-1/5) [4.5 phi(z_tau)^4 / (2 z_tau^2 + 1)^2]^(1/5)``."""
    tau = validate_tau(tau)
    if m < 2:
        raise ValueError("bandwidth needs at least two observations")
    z_tau = stats.norm.ppf(tau)
    h = m ** (-0.2) * (4.5 * stats.norm.pdf(z_tau) ** 4
                       / (2.0 * z_tau ** 2 + 1.0) ** 2) ** 0.2
    return _fit_inside(tau, float(h))


BANDWIDTH_RULES = {
    "hall-sheather": hall_sheather_bandwidth,
    "bofinger": bofinger_bandwidth,
}


def bandwidth(rule: str, tau: float, m: float) -> float:
    try:
        fn = BANDWIDTH_RULES[rule]
    except KeyError:
        raise ValueError(f"unknown bandwidth rule {rule!r}; "
                         f"choose from {sorted(BANDWIDTH_RULES)}") from None
    return fn(tau, m)


def residual_sparsity(resid, tau: float, h: float) -> float:
    """Difference quotient of empirical residual quantiles.

    ``(Q(tau + h) - Q(tau - h)) / (2h)`` with ``Q`` the left-continuous inverse
    of the empirical cdf, ``Q(q) = min{r : F(r) >= q}``.
    """
    tau = validate_tau(tau)
    if not (0 < tau - h and tau + h < 1):
        raise ValueError("tau +/- h must stay inside (0, 1)")
    resid = np.asarray(resid, dtype=float)
    lo, hi = np.quantile(resid, [tau - h, tau + h], method="inverted_cdf")
    return max(float(hi - lo) / (2.0 * h), 0.0)


def sparsity_estimate(fe_fit: FixedEffectsFit, data: PanelData, tau: float, h: float) -> float:
    """Sparsity ``s(tau)`` estimated from the fixed-effects residuals."""
    return residual_sparsity(data.residuals(fe_fit.alpha, fe_fit.beta), tau, h)


@dataclass(frozen=True)
class IcConstants:
    c_hat: float
    p_nt: float
    s_hat: float
    bandwidth: float


def penalty_rate(data: PanelData, constant: float = DEFAULT_PNT_CONSTANT) -> float:
    """``p_nT = constant * n * Tbar^(1/4)`` with ``Tbar = N / n``."""
    return float(constant * data.n * data.t_bar ** 0.25)


def ic_constants(data: PanelData, tau: float, fe_fit: FixedEffectsFit,
                 pnt_constant: float = DEFAULT_PNT_CONSTANT,
                 alpha_level: float = DEFAULT_ALPHA_LEVEL) -> IcConstants:
    """Scale ``C = tau (1 - tau) s(tau)`` (floored) and rate ``p_nT`` of the IC penalty."""
    h = hall_sheather_bandwidth(tau, data.n_obs, alpha_level)
    s_hat = sparsity_estimate(fe_fit, data, tau, h)
    c_hat = max(tau * (1.0 - tau) * s_hat, C_HAT_FLOOR)
    return IcConstants(c_hat=c_hat, p_nt=penalty_rate(data, pnt_constant),
                       s_hat=s_hat, bandwidth=h)


# -- selection ---------------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    """First path entry reaching a group count, with its refit."""

    k: int
    lam: float
    grouping: GroupStructure
    refit: RefitResult


@dataclass(frozen=True)
class IcEntry:
    k: int
    lam: float
    ic_value: float
    grouping: GroupStructure
    refit: RefitResult


@dataclass(frozen=True)
class IcSelection:
    """IC values over distinct group counts and the chosen model."""

    entries: tuple
    chosen: int
    c_hat: float
    p_nt: float

    @property
    def best(self) -> IcEntry:
        return self.entries[self.chosen]

    @property
    def k(self) -> int:
        return self.best.k

    @property
    def grouping(self) -> GroupStructure:
        return self.best.grouping

    @property
    def alpha(self) -> np.ndarray:
        """Selected intercept of every individual."""
        return self.best.grouping.expand(self.best.refit.centers)

    @property
    def beta(self) -> np.ndarray:
        return self.best.refit.beta


def candidate_refits(path: LambdaPathResult, data: PanelData, tau: float,
                     settings: SolverSettings = None) -> list:
    """Refit the first converged path entry of each distinct group count.

    Candidates whose refit does not converge are dropped.
    """
    seen = set()
    out = []
    for entry in path:
        if not entry.converged or entry.k in seen:
            continue
        seen.add(entry.k)
        fit = refit(data, tau, entry.grouping, settings)
        if fit.converged:
            out.append(Candidate(k=entry.k, lam=entry.lam, grouping=entry.grouping, refit=fit))
    return out


def select_from_candidates(candidates, c_hat: float, p_nt: float) -> IcSelection:
    """Minimize ``refit objective + c_hat * K * p_nt``; ties go to the smaller K."""
    if not candidates:
        raise SelectionError("no converged path entry to select from")
    entries = tuple(sorted(
        (IcEntry(k=c.k, lam=c.lam, ic_value=c.refit.objective + c_hat * c.k * p_nt,
                 grouping=c.grouping, refit=c.refit) for c in candidates),
        key=lambda e: e.k))
    values = np.array([e.ic_value for e in entries])
    # entries are sorted by k, so argmin's first-occurrence rule favours small K
    chosen = int(np.argmin(values))
    return IcSelection(entries=entries, chosen=chosen, c_hat=float(c_hat), p_nt=float(p_nt))


def select_by_ic(path: LambdaPathResult, data: PanelData, tau: float,
                 fe_fit: FixedEffectsFit, pnt_constant: float = DEFAULT_PNT_CONSTANT,
                 constants: IcConstants = None,
                 settings: SolverSettings = None) -> IcSelection:
    """Pick the number of groups along a path by the information criterion."""
    if constants is None:
        constants = ic_constants(data, tau, fe_fit, pnt_constant)
    return select_from_candidates(candidate_refits(path, data, tau, settings),
                                  constants.c_hat, constants.p_nt)
