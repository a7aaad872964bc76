"""Sandwich covariance for grouped and fixed-effects quantile regression.

Standard errors are conditional on the estimated grouping.  They do not
account for the uncertainty of model selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .panel import FixedEffectsFit, PanelData, validate_tau
from .path import GroupStructure
from .selection import RefitResult, bandwidth, refit
from .solver import SolverSettings, panel_design

DENSITY_FLOOR = 1e-6


class CovarianceError(RuntimeError):
    """The density-weighted Gram matrix could not be inverted."""


@dataclass(frozen=True)
class CovarianceEstimate:
    """Covariance of ``(group intercepts, slopes)``.

    ``matrix`` is ``(k + p, k + p)``; the first ``k`` rows belong to the
    intercepts in the grouping's label order.
    """

    matrix: np.ndarray
    k: int
    method: str
    bandwidth: float
    rule: str
    aux_reports: tuple = field(default=(), repr=False, compare=False)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.matrix), 0.0))

    @property
    def beta_block(self) -> np.ndarray:
        return self.matrix[self.k:, self.k:]

    @property
    def alpha_block(self) -> np.ndarray:
        return self.matrix[: self.k, : self.k]

    def intervals(self, estimate, level: float = 0.95) -> np.ndarray:
        """Normal-approximation intervals, one ``(lo, hi)`` row per coefficient."""
        estimate = np.asarray(estimate, dtype=float)
        z = stats.norm.ppf(0.5 + level / 2.0)
        half = z * self.std_errors
        return np.column_stack([estimate - half, estimate + half])


def sandwich_covariance(data: PanelData, tau: float, grouping: GroupStructure,
                        fit: RefitResult, rule: str = "hall-sheather",
                        settings: SolverSettings = None) -> CovarianceEstimate:
    """Difference-quotient ("nid") sandwich covariance of a grouped refit.

    Local densities come from two auxiliary refits at ``tau -/+ h`` on the
    same grouping: ``f_r = 2h / (z_r' (b_hi - b_lo))``, truncated at zero and
    floored at ``DENSITY_FLOOR``.  With ``S1 = tau(1-tau) Z'Z / N`` and
    ``S2 = Z' diag(f) Z / N`` the result is ``S2^-1 S1 S2^-1 / N``.
    """
    if not fit.converged:
        raise ValueError("covariance requires a converged refit")
    return _nid_covariance(data, tau, grouping, rule, settings)


def _nid_covariance(data, tau, grouping, rule, settings):
    tau = validate_tau(tau)
    h = bandwidth(rule, tau, data.n_obs)
    hi = refit(data, tau + h, grouping, settings)
    lo = refit(data, tau - h, grouping, settings)
    if not (hi.converged and lo.converged):
        raise CovarianceError("auxiliary refit at tau +/- h did not converge")
    k = grouping.k
    z = panel_design(data, grouping.membership[data.ids], k)
    b_hi = np.concatenate([hi.centers, hi.beta])
    b_lo = np.concatenate([lo.centers, lo.beta])
    dq = z @ (b_hi - b_lo)
    with np.errstate(divide="ignore"):
        f = np.where(dq > 0, 2.0 * h / np.where(dq > 0, dq, 1.0), 0.0)
    f = np.maximum(f, DENSITY_FLOOR)

    n_obs = data.n_obs
    s1 = tau * (1.0 - tau) * (z.T @ z).toarray() / n_obs
    s2 = (z.T @ z.multiply(f[:, None])).toarray() / n_obs
    try:
        s2_inv = np.linalg.inv(s2)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError("density-weighted Gram matrix is singular") from exc
    if not np.all(np.isfinite(s2_inv)) or np.linalg.cond(s2) > 1e14:
        raise CovarianceError("density-weighted Gram matrix is singular")
    cov = s2_inv @ s1 @ s2_inv / n_obs
    cov = 0.5 * (cov + cov.T)
    return CovarianceEstimate(matrix=cov, k=k, method="sandwich-nid", bandwidth=h, rule=rule,
                              aux_reports=(lo.report, hi.report))


def fe_covariance(data: PanelData, tau: float, fe_fit: FixedEffectsFit,
                  rule: str = "hall-sheather",
                  settings: SolverSettings = None) -> CovarianceEstimate:
    """Sandwich covariance of the fixed-effects fit (every individual its own group)."""
    if not fe_fit.converged:
        raise ValueError("covariance requires a converged fit")
    singletons = GroupStructure(np.arange(data.n, dtype=float), np.arange(data.n))
    return _nid_covariance(data, tau, singletons, rule, settings)
