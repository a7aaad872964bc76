"""Interior-point solver for weighted quantile-regression linear programs.

The primal problem is

    min_b  sum_r  w_r * rho_{tau_r}(y_r - z_r' b)

with one quantile level ``tau_r`` and weight ``w_r`` per row.  Rows of the
fixed-effects problem touch one intercept plus the common slopes; rows of the
convex-clustering penalty are pseudo-observations with response 0, design
``e_i - e_j``, level 1/2 and weight ``2 * lambda_ij``, so that each contributes
``lambda_ij * |alpha_i - alpha_j|``.

Written with the usual splitting ``y - Zb = u - v`` (``u, v >= 0``), the dual
is the bounded LP

    max_a  y~' a   s.t.  Z~' a = Z~' (1 - tau),   0 <= a <= 1,

where ``Z~`` and ``y~`` are the weight-scaled rows.  It is solved by a
Frisch-Newton primal-dual method with Mehrotra predictor-corrector steps;
the regression coefficients are the (negated) multipliers of the equality
constraints.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .panel import FixedEffectsFit, PanelData, check_loss, validate_tau

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERATIONS = "max-iterations"
NUMERICAL_FAILURE = "numerical-failure"

DEFAULT_WEIGHT_CAP = 1e8


@dataclass(frozen=True)
class SolverSettings:
    gap_tol: float = 1e-8
    max_iter: int = 100
    step_fraction: float = 0.9995
    # normal equations are factored densely up to this many parameters
    dense_max_dim: int = 600


@dataclass(frozen=True)
class QrProblem:
    """A weighted quantile-regression LP.

    Parameters
    ----------
    design : (m, dim) sparse matrix
        One row per observation or penalty pseudo-row.
    response : (m,) array
    tau : (m,) array
        Per-row quantile level in (0, 1).
    weight : (m,) array
        Positive per-row weights.
    """

    design: sp.csr_matrix
    response: np.ndarray
    tau: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        design = sp.csr_matrix(self.design, dtype=float)
        m = design.shape[0]
        response = np.asarray(self.response, dtype=float).reshape(-1)
        tau = np.broadcast_to(np.asarray(self.tau, dtype=float), (m,)).copy()
        weight = np.broadcast_to(np.asarray(self.weight, dtype=float), (m,)).copy()
        if response.size != m:
            raise ValueError(f"design has {m} rows but response has {response.size}")
        if design.shape[1] < 1:
            raise ValueError("problem needs at least one parameter")
        if np.any(~(weight > 0)) or not np.all(np.isfinite(weight)):
            raise ValueError("row weights must be positive and finite")
        if np.any(~((tau > 0) & (tau < 1))):
            raise ValueError("row quantile levels must lie in (0, 1)")
        if not np.all(np.isfinite(response)):
            raise ValueError("responses must be finite")
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "response", response)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "weight", weight)

    @property
    def dim(self) -> int:
        return self.design.shape[1]

    @property
    def n_rows(self) -> int:
        return self.design.shape[0]

    def objective(self, solution) -> float:
        """Weighted check loss of a coefficient vector."""
        resid = self.response - self.design @ np.asarray(solution, dtype=float)
        return float(np.sum(self.weight * resid * (self.tau - (resid < 0))))


@dataclass(frozen=True)
class SolverReport:
    """Outcome of an interior-point solve.

    ``dual`` holds the QR dual variables ``d_r`` in ``w_r * [tau_r - 1, tau_r]``;
    ``duality_gap`` is ``|primal - d'y| / (1 + |primal|)`` evaluated on those
    reconstructed quantities, not the internal complementarity measure.
    """

    solution: np.ndarray
    primal_objective: float
    dual_objective: float
    duality_gap: float
    iterations: int
    status: str
    dual: np.ndarray = field(repr=False, default=None)
    dual_infeasibility: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def _certified(gap, infeas, settings):
    return gap <= settings.gap_tol and infeas <= settings.gap_tol


def _step_length(v, dv):
    ratio = np.divide(v, -dv, out=np.full_like(v, np.inf), where=dv < 0)
    return float(ratio.min())


def _row_blocks(design: sp.csr_matrix):
    """Group rows by sparsity pattern for block-wise QR compression.

    Returns ``(batches, loose)``: each batch is a pair of index arrays
    ``rows (b, g)`` and ``cols (b, k)`` covering ``b`` groups of ``g > k`` rows
    that share the same ``k`` nonzero columns; ``loose`` lists the remaining
    rows, which are carried through uncompressed.
    """
    indptr, indices = design.indptr, design.indices
    nnz = np.diff(indptr)
    batches, loose = [], []
    for k in np.unique(nnz):
        rows_k = np.flatnonzero(nnz == k)
        if k == 0:
            continue
        pos = indptr[rows_k][:, None] + np.arange(k)[None, :]
        pats = np.sort(indices[pos], axis=1)
        uniq, inverse, counts = np.unique(pats, axis=0, return_inverse=True,
                                          return_counts=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        for g in np.unique(counts):
            sel = np.flatnonzero(counts == g)
            if g <= k:
                for u in sel:
                    loose.append(rows_k[order[starts[u]:starts[u] + g]])
                continue
            rows = np.stack([rows_k[order[starts[u]:starts[u] + g]] for u in sel])
            batches.append((rows, uniq[sel]))
    loose = np.concatenate(loose) if loose else np.zeros(0, dtype=np.int64)
    return batches, loose


class _NewtonSystem:
    """Solves ``(Z' Q Z) dy = Z' Q g + rp`` for the current scaling ``Q = diag(q)``.

    Late iterations put fused pseudo-rows many orders of magnitude above the
    data rows, so the normal matrix is numerically singular long before the
    LP is solved.  The dense path therefore works with the triangular factor
    R of the column-equilibrated ``sqrt(q) * Z`` and the corrected semi-normal
    equations (one ``R'R`` solve plus one refinement step against the
    unfactored operator).  R is computed by first reducing each group of rows
    sharing a sparsity pattern (one individual's observations) with a small
    batched QR, then factoring the stacked reduced rows.
    """

    def __init__(self, zw_sparse, dense):
        self.dense = dense
        self.d = zw_sparse.shape[1]
        if dense:
            self.zw = zw_sparse.toarray()
            self._batches, self._loose = _row_blocks(zw_sparse)
            self._n_reduced = sum(r.shape[0] * c.shape[1] for r, c in self._batches) \
                + self._loose.size
        else:
            self.zw = zw_sparse

    def factor(self, q):
        self.q = q
        if not self.dense:
            zw = self.zw
            self._lu = spla.splu((zw.T @ sp.diags(q) @ zw).tocsc())
            return
        sq = np.sqrt(q)
        self._sq = sq
        zw = self.zw
        reduced = np.zeros((self._n_reduced, self.d))
        at = 0
        for rows, cols in self._batches:
            b, k = cols.shape
            block = zw[rows[:, :, None], cols[:, None, :]] * sq[rows][:, :, None]
            r = np.linalg.qr(block, mode="r")
            slots = at + np.arange(b * k).reshape(b, k)
            reduced[slots[:, :, None], np.broadcast_to(cols[:, None, :], (b, k, k))] = r
            at += b * k
        loose = self._loose
        reduced[at:] = zw[loose] * sq[loose, None]
        norms = np.sqrt(np.einsum("ij,ij->j", reduced, reduced))
        if not np.all(norms > 0):
            raise np.linalg.LinAlgError("empty column in scaled design")
        self._cs = 1.0 / norms
        reduced *= self._cs
        if reduced.shape[0] < self.d:
            raise np.linalg.LinAlgError("fewer rows than parameters")
        self._r = scipy.linalg.qr(reduced, mode="r", check_finite=False)[0][: self.d]
        diag = np.abs(np.diag(self._r))
        if diag.min() <= 1e-14 * diag.max():
            raise np.linalg.LinAlgError("scaled design is numerically rank deficient")

    def _rtr_solve(self, v):
        t = scipy.linalg.solve_triangular(self._r, v, trans="T", check_finite=False)
        return scipy.linalg.solve_triangular(self._r, t, check_finite=False)

    def solve(self, g, rp):
        if not self.dense:
            return self._lu.solve(self.zw.T @ (self.q * g) + rp)
        cs, zw, q = self._cs, self.zw, self.q
        rhs = cs * (zw.T @ (q * g) + rp)
        u = self._rtr_solve(rhs)
        u += self._rtr_solve(rhs - cs * (zw.T @ (q * (zw @ (cs * u)))))
        return cs * u


def solve_weighted_qr(problem: QrProblem, settings: SolverSettings = None) -> SolverReport:
    """Solve a weighted, per-row-tau quantile regression LP.

    Returns a report whose status is ``converged`` once the relative duality gap
    falls below ``settings.gap_tol``; otherwise the best iterate found is
    returned with status ``max-iterations`` or ``numerical-failure``.
    """
    settings = settings or SolverSettings()
    m, dim = problem.design.shape
    dense = dim <= settings.dense_max_dim
    w = problem.weight
    tau = problem.tau
    zw_sparse = sp.csr_matrix(sp.diags(w) @ problem.design)
    zw_sparse.sum_duplicates()
    newton = _NewtonSystem(zw_sparse, dense)
    zw = newton.zw
    yw = problem.response * w
    c = -yw
    frac = settings.step_fraction

    # start from the centre of the box-feasible dual point a = 1 - tau
    x = 1.0 - tau
    s = tau.copy()
    b = zw.T @ x

    col_mass = np.asarray(abs(zw).sum(axis=0)).reshape(-1)

    def certificate(y_dual, a):
        # primal objective against the LP dual objective d'y; an equality
        # residual in Z~'d shows up here as well as in the infeasibility
        beta = -y_dual
        resid = problem.response - problem.design @ beta
        primal = float(np.sum(w * resid * (tau - (resid < 0))))
        d = a - (1.0 - tau)
        dual = float(d @ (problem.response * w))
        gap = abs(primal - dual) / (1.0 + abs(primal))
        infeas = max(float(np.max(np.maximum(-a, a - 1.0), initial=0.0)),
                     float(np.max(np.abs(zw.T @ d) / (1.0 + col_mass), initial=0.0)))
        return beta, primal, dual, gap, infeas

    def report(y_dual, a, iterations, status):
        beta, primal, dual, gap, infeas = certificate(y_dual, a)
        if status == CONVERGED and not _certified(gap, infeas, settings):
            status = MAX_ITERATIONS
        return SolverReport(
            solution=beta, primal_objective=primal, dual_objective=dual,
            duality_gap=gap, iterations=iterations, status=status,
            dual=w * (a - (1.0 - tau)), dual_infeasibility=infeas)

    try:
        newton.factor(np.ones(m))
        y = newton.solve(c, 0.0)
    except (np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
        logger.debug("initial least-squares solve failed: %s", exc)
        return report(np.zeros(dim), x, 0, NUMERICAL_FAILURE)

    r = c - zw @ y
    shift = max(1e-6, 0.1 * float(np.mean(np.abs(r))))
    z = np.maximum(r, 0.0) + shift
    wd = np.maximum(-r, 0.0) + shift

    best = None
    status = MAX_ITERATIONS
    it = 0
    def project(a):
        # weighted least-squares correction restoring Z~'a = b under the
        # current scaling; rows pinned at a bound have small q and barely move
        try:
            u = newton.solve(np.zeros(m), b - zw.T @ a)
        except (np.linalg.LinAlgError, RuntimeError, ValueError):
            return None
        a = a + newton.q * (zw @ u)
        return a if np.all(np.isfinite(a)) else None

    while it < settings.max_iter:
        beta, primal, dual, gap, infeas = certificate(y, x)
        if best is None or max(gap, infeas) < best[0]:
            best = (max(gap, infeas), y.copy(), x.copy(), it)
        if _certified(gap, infeas, settings):
            status = CONVERGED
            break
        if it > 0 and gap <= settings.gap_tol:
            cleaned = project(x)
            if cleaned is not None and _certified(*certificate(y, cleaned)[3:], settings):
                x = cleaned
                status = CONVERGED
                break
        it += 1
        try:
            q = x * s / (z * s + wd * x)
            rz = z - wd
            rp = b - zw.T @ x
            newton.factor(q)
            # affine-scaling predictor
            dy = newton.solve(rz, rp)
            dx = q * (zw @ dy - rz)
            ds = -dx
            dz = -z * (dx / x + 1.0)
            dw = -wd * (ds / s + 1.0)
            fp = min(frac * min(_step_length(x, dx), _step_length(s, ds)), 1.0)
            fd = min(frac * min(_step_length(z, dz), _step_length(wd, dw)), 1.0)
            if min(fp, fd) < 1.0:
                # Mehrotra centering-corrector
                mu = z @ x + wd @ s
                g = (z + fd * dz) @ (x + fp * dx) + (wd + fd * dw) @ (s + fp * ds)
                mu = mu * (g / mu) ** 3 / (2 * m)
                dxdz = dx * dz
                dsdw = ds * dw
                xinv = 1.0 / x
                sinv = 1.0 / s
                v = mu * (xinv - sinv) - rz - dxdz * xinv + dsdw * sinv
                dy = newton.solve(-v, rp)
                dx = q * (zw @ dy + v)
                ds = -dx
                dz = mu * xinv - z - xinv * z * dx - xinv * dxdz
                dw = mu * sinv - wd - sinv * wd * ds - sinv * dsdw
                fp = min(frac * min(_step_length(x, dx), _step_length(s, ds)), 1.0)
                fd = min(frac * min(_step_length(z, dz), _step_length(wd, dw)), 1.0)
        except (np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
            logger.debug("factorization failed at iteration %d: %s", it, exc)
            status = NUMERICAL_FAILURE
            break
        if not (np.isfinite(fp) and np.isfinite(fd)) or fp <= 0 or fd <= 0:
            status = NUMERICAL_FAILURE
            break
        x = x + fp * dx
        s = s + fp * ds
        y = y + fd * dy
        z = z + fd * dz
        wd = wd + fd * dw
        if not (np.all(np.isfinite(y)) and np.all(x > 0) and np.all(s > 0)):
            status = NUMERICAL_FAILURE
            break
    else:
        beta, primal, dual, gap, infeas = certificate(y, x)
        if max(gap, infeas) < best[0]:
            best = (max(gap, infeas), y.copy(), x.copy(), it)
        status = CONVERGED if _certified(gap, infeas, settings) else MAX_ITERATIONS

    _, y_best, x_best, _ = best
    if status == CONVERGED:
        y_best, x_best = y, x
    return report(y_best, x_best, it, status)


def kkt_violation(problem: QrProblem, report: SolverReport, zero_tol: float = 1e-6) -> float:
    """Largest violation of the subgradient optimality conditions.

    Checks the dual in ``report``: box membership, ``Z' d = 0`` and that rows
    with residual beyond ``zero_tol`` carry the one-sided ``psi_tau`` value.
    Values are relative to the row weights.
    """
    d = report.dual
    w, tau = problem.weight, problem.tau
    resid = problem.response - problem.design @ report.solution
    box = np.maximum(d - w * tau, w * (tau - 1.0) - d) / w
    balance = np.abs(problem.design.T @ d) / (1.0 + np.abs(problem.design).T @ w)
    pos = resid > zero_tol
    neg = resid < -zero_tol
    slack = np.concatenate([np.abs(d[pos] / w[pos] - tau[pos]),
                            np.abs(d[neg] / w[neg] - (tau[neg] - 1.0))])
    return float(max(np.max(box, initial=0.0), np.max(balance, initial=0.0),
                     np.max(slack, initial=0.0)))


# -- problem builders --------------------------------------------------------

def panel_design(data: PanelData, columns, n_cols):
    """Rows ``e_{columns[row]}`` next to the covariates."""
    n_obs, p = data.n_obs, data.p
    rows = np.arange(n_obs)
    alpha_part = sp.csr_matrix((np.ones(n_obs), (rows, columns)), shape=(n_obs, n_cols))
    if p == 0:
        return alpha_part
    return sp.hstack([alpha_part, sp.csr_matrix(data.x)], format="csr")


def build_fe_problem(data: PanelData, tau: float) -> QrProblem:
    """Fixed-effects QR: one intercept per individual plus common slopes."""
    tau = validate_tau(tau)
    design = panel_design(data, data.ids, data.n)
    return QrProblem(design, data.y, np.full(data.n_obs, tau), np.ones(data.n_obs))


def build_grouped_problem(data: PanelData, tau: float, membership, k: int) -> QrProblem:
    """QR with one intercept per group; ``membership[i]`` is the group of individual i."""
    tau = validate_tau(tau)
    membership = np.asarray(membership, dtype=np.int64)
    if membership.size != data.n:
        raise ValueError(f"membership must cover all {data.n} individuals")
    if membership.min() < 0 or membership.max() >= k:
        raise ValueError(f"group labels must lie in 0..{k - 1}")
    design = panel_design(data, membership[data.ids], k)
    return QrProblem(design, data.y, np.full(data.n_obs, tau), np.ones(data.n_obs))


@dataclass(frozen=True)
class PenaltyGraph:
    """Pairwise fusion weights over individuals ``i < j``."""

    i: np.ndarray
    j: np.ndarray
    weight: np.ndarray
    n: int

    def __post_init__(self):
        i = np.asarray(self.i, dtype=np.int64)
        j = np.asarray(self.j, dtype=np.int64)
        wt = np.asarray(self.weight, dtype=float)
        if not (i.shape == j.shape == wt.shape):
            raise ValueError("edge arrays must have equal length")
        if i.size:
            if np.any(i >= j) or i.min() < 0 or j.max() >= self.n:
                raise ValueError("edges must satisfy 0 <= i < j < n")
            if np.unique(i * self.n + j).size != i.size:
                raise ValueError("duplicate edge")
            if np.any(~(wt > 0)) or not np.all(np.isfinite(wt)):
                raise ValueError("edge weights must be positive and finite")
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "j", j)
        object.__setattr__(self, "weight", wt)

    def __len__(self):
        return self.i.size

    def as_dict(self):
        return {(int(a), int(b)): float(v) for a, b, v in zip(self.i, self.j, self.weight)}

    def penalty(self, alpha) -> float:
        alpha = np.asarray(alpha, dtype=float)
        return float(np.sum(self.weight * np.abs(alpha[self.i] - alpha[self.j])))


def build_penalty_graph(alpha_check, lam: float, cap: float = DEFAULT_WEIGHT_CAP) -> PenaltyGraph:
    """Adaptive weights ``min(lam / (a_i - a_j)^2, cap * lam)`` for all pairs.

    ``alpha_check`` is a :class:`FixedEffectsFit` or the preliminary intercepts.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    alpha = np.asarray(getattr(alpha_check, "alpha", alpha_check), dtype=float)
    n = alpha.size
    if lam == 0 or n < 2:
        empty = np.zeros(0)
        return PenaltyGraph(empty, empty, empty, n)
    i, j = np.triu_indices(n, k=1)
    diff2 = (alpha[i] - alpha[j]) ** 2
    with np.errstate(divide="ignore"):
        wt = np.where(diff2 > 0, lam / np.where(diff2 > 0, diff2, 1.0), np.inf)
    wt = np.minimum(wt, cap * lam)
    return PenaltyGraph(i, j, wt, n)


def build_penalized_problem(data: PanelData, tau: float, graph: PenaltyGraph) -> QrProblem:
    """Fixed-effects rows plus one median pseudo-row of weight ``2*lambda_ij`` per edge."""
    base = build_fe_problem(data, tau)
    if len(graph) == 0:
        return base
    if graph.n != data.n:
        raise ValueError("penalty graph and panel disagree on the number of individuals")
    n_edges = len(graph)
    rows = np.repeat(np.arange(n_edges), 2)
    cols = np.column_stack([graph.i, graph.j]).reshape(-1)
    vals = np.tile([1.0, -1.0], n_edges)
    pen = sp.csr_matrix((vals, (rows, cols)), shape=(n_edges, base.dim))
    return QrProblem(
        sp.vstack([base.design, pen], format="csr"),
        np.concatenate([base.response, np.zeros(n_edges)]),
        np.concatenate([base.tau, np.full(n_edges, 0.5)]),
        np.concatenate([base.weight, 2.0 * graph.weight]),
    )


def solve_fe(data: PanelData, tau: float, settings: SolverSettings = None) -> FixedEffectsFit:
    """Fixed-effects quantile regression estimates ``(alpha_check, beta_check)``."""
    rep = solve_weighted_qr(build_fe_problem(data, tau), settings)
    n = data.n
    return FixedEffectsFit(alpha=rep.solution[:n], beta=rep.solution[n:],
                           objective=rep.primal_objective, tau=float(tau),
                           iterations=rep.iterations, status=rep.status, report=rep)


def penalty_scale(data: PanelData, lam_tilde: float) -> float:
    """Convert a normalized tuning value to the per-pair multiplier of the raw LP.

    The normalized objective ``(1/N) sum rho + lam_tilde/(n(n-1)) sum_{i != j} ...``
    counts each unordered pair twice; multiplying through by ``N`` gives a
    weight of ``2 N lam_tilde / (n (n-1))`` per pair ``i < j``.
    """
    n = data.n
    if n < 2:
        return 0.0
    return 2.0 * data.n_obs * float(lam_tilde) / (n * (n - 1))


@dataclass(frozen=True)
class PenalizedFit:
    alpha: np.ndarray
    beta: np.ndarray
    report: SolverReport
    graph: PenaltyGraph
    lam_tilde: float


def solve_penalized(data: PanelData, tau: float, lam_tilde: float, fe_fit,
                    cap: float = DEFAULT_WEIGHT_CAP,
                    settings: SolverSettings = None) -> PenalizedFit:
    """Convex-clustering penalized QR at one normalized tuning value.

    Minimizes ``(1/N) sum rho_tau(resid) + lam_tilde/(n(n-1)) sum_{i != j}
    |alpha_i - alpha_j| / (a_i - a_j)^2`` where ``a`` are the fixed-effects
    intercepts in ``fe_fit``.  The report's objective is on the raw
    (multiplied by N) scale.
    """
    if lam_tilde < 0:
        raise ValueError("lambda must be non-negative")
    if getattr(fe_fit, "tau", tau) != tau:
        raise ValueError("preliminary fit was computed at a different quantile level")
    graph = build_penalty_graph(fe_fit, penalty_scale(data, lam_tilde), cap)
    problem = build_penalized_problem(data, tau, graph)
    rep = solve_weighted_qr(problem, settings)
    n = data.n
    return PenalizedFit(alpha=rep.solution[:n], beta=rep.solution[n:], report=rep,
                        graph=graph, lam_tilde=float(lam_tilde))
