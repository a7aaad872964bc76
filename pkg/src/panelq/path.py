"""Tuning grids, group extraction from fused intercepts, and the lambda path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .panel import FixedEffectsFit, PanelData
from .solver import (DEFAULT_WEIGHT_CAP, SolverReport, SolverSettings,
                     solve_penalized)

DEFAULT_FUSE_TOL = 1e-4


@dataclass(frozen=True)
class LambdaGrid:
    """Strictly ascending, non-negative normalized tuning values."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size == 0:
            raise ValueError("lambda grid is empty")
        if not np.all(np.isfinite(v)) or v[0] < 0:
            raise ValueError("lambda values must be finite and non-negative")
        if np.any(np.diff(v) == 0) or np.unique(v).size != v.size:
            raise ValueError("lambda grid contains duplicate values")
        if np.any(np.diff(v) < 0):
            raise ValueError("lambda grid must be ascending")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def __iter__(self):
        return iter(self.values.tolist())

    @classmethod
    def from_range(cls, lo: float, hi: float, step: float) -> "LambdaGrid":
        """Evenly spaced grid from ``lo`` to ``hi`` inclusive.

        The number of points is rounded so that ``0:0.35:0.005`` yields 71
        values regardless of floating point drift.
        """
        if step <= 0:
            raise ValueError("grid step must be positive")
        if hi < lo:
            raise ValueError("grid maximum is below its minimum")
        count = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return cls(np.round(lo + step * np.arange(count), 12))

    @classmethod
    def parse(cls, text: str) -> "LambdaGrid":
        """Parse ``min:max:step`` or a comma-separated list of values."""
        text = text.strip()
        sep = ":" if ":" in text else ","
        try:
            parts = [float(p) for p in text.split(sep)]
        except ValueError:
            parts = None
        if parts is None or (sep == ":" and len(parts) != 3):
            raise ValueError(f"cannot parse lambda grid {text!r}; "
                             "expected min:max:step or v1,v2,...")
        return cls.from_range(*parts) if sep == ":" else cls(parts)


DEFAULT_GRID_SPEC = "0:0.35:0.005"


def default_grid() -> LambdaGrid:
    return LambdaGrid.parse(DEFAULT_GRID_SPEC)


@dataclass(frozen=True)
class GroupStructure:
    """Partition of individuals into ``k`` groups ordered by center.

    ``membership`` holds 0-based labels: individual ``i`` belongs to the group
    with center ``centers[membership[i]]``.
    """

    centers: np.ndarray
    membership: np.ndarray

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float).reshape(-1)
        membership = np.asarray(self.membership, dtype=np.int64).reshape(-1)
        k = centers.size
        if k == 0 or membership.size == 0:
            raise ValueError("a grouping needs at least one group and one individual")
        if np.any(np.diff(centers) <= 0):
            raise ValueError("group centers must be strictly ascending")
        if membership.min() < 0 or membership.max() >= k:
            raise ValueError(f"membership labels must lie in 0..{k - 1}")
        if np.unique(membership).size != k:
            raise ValueError("every group must have at least one member")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "membership", membership)

    @property
    def k(self) -> int:
        return self.centers.size

    @property
    def n(self) -> int:
        return self.membership.size

    def sizes(self) -> np.ndarray:
        return np.bincount(self.membership, minlength=self.k)

    def expand(self, centers=None) -> np.ndarray:
        """Per-individual values of ``centers`` (defaults to the group centers)."""
        centers = self.centers if centers is None else np.asarray(centers, dtype=float)
        return centers[self.membership]

    def same_partition(self, other: "GroupStructure") -> bool:
        return self.k == other.k and np.array_equal(self.membership, other.membership)


def fuse_tolerance(alpha_check, base: float = DEFAULT_FUSE_TOL) -> float:
    """Fusion threshold ``max(base, 1e-6 * range(alpha_check))``."""
    alpha_check = np.asarray(alpha_check, dtype=float)
    spread = float(np.ptp(alpha_check)) if alpha_check.size else 0.0
    return max(base, 1e-6 * spread)


def extract_groups(alpha, fuse_tol: float = DEFAULT_FUSE_TOL) -> GroupStructure:
    """Single-linkage grouping of intercepts closer than ``fuse_tol``.

    In one dimension the connected components of the ``|a_i - a_j| <= tol``
    graph are the runs of the sorted values separated by gaps above ``tol``.
    """
    if not fuse_tol > 0:
        raise ValueError("fuse_tol must be positive")
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if alpha.size == 0:
        raise ValueError("no intercepts to group")
    order = np.argsort(alpha, kind="stable")
    sorted_alpha = alpha[order]
    breaks = np.diff(sorted_alpha) > fuse_tol
    run = np.concatenate([[0], np.cumsum(breaks)])
    membership = np.empty(alpha.size, dtype=np.int64)
    membership[order] = run
    k = int(run[-1]) + 1
    # runs are separated by more than fuse_tol, so their means ascend
    centers = np.bincount(run, weights=sorted_alpha, minlength=k) / np.bincount(run, minlength=k)
    return GroupStructure(centers, membership)


@dataclass(frozen=True)
class PathEntry:
    lam: float
    alpha: np.ndarray
    beta: np.ndarray
    grouping: GroupStructure
    report: SolverReport

    @property
    def converged(self) -> bool:
        return self.report.converged

    @property
    def k(self) -> int:
        return self.grouping.k


@dataclass(frozen=True)
class LambdaPathResult:
    """Penalized fits along a tuning grid, aligned with the grid order."""

    entries: tuple
    tau: float
    fuse_tol: float

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([e.lam for e in self.entries])

    @property
    def group_counts(self) -> np.ndarray:
        return np.array([e.k for e in self.entries])

    def converged_entries(self):
        return [e for e in self.entries if e.converged]

    @property
    def n_failed(self) -> int:
        return sum(not e.converged for e in self.entries)


def run_lambda_path(data: PanelData, tau: float, grid: LambdaGrid,
                    fe_fit: FixedEffectsFit, fuse_tol: float = None,
                    cap: float = DEFAULT_WEIGHT_CAP,
                    settings: SolverSettings = None) -> LambdaPathResult:
    """Solve the penalized problem independently at every grid value.

    Entries whose solve does not converge keep their report status and are
    skipped by :func:`panelq.selection.select_by_ic`.
    """
    if not isinstance(grid, LambdaGrid):
        grid = LambdaGrid(grid)
    if fuse_tol is None:
        fuse_tol = fuse_tolerance(fe_fit.alpha)
    entries = []
    for lam in grid:
        fit = solve_penalized(data, tau, lam, fe_fit, cap=cap, settings=settings)
        entries.append(PathEntry(lam=lam, alpha=fit.alpha, beta=fit.beta,
                                 grouping=extract_groups(fit.alpha, fuse_tol),
                                 report=fit.report))
    return LambdaPathResult(entries=tuple(entries), tau=float(tau), fuse_tol=float(fuse_tol))


def match_metrics(estimated: GroupStructure, truth: GroupStructure):
    """Membership agreement after aligning groups by ascending center.

    Returns ``(perfect, frac_correct)``.  Both structures must have the same
    number of groups and individuals.
    """
    if estimated.n != truth.n:
        raise ValueError(f"groupings cover {estimated.n} and {truth.n} individuals")
    if estimated.k != truth.k:
        raise ValueError(f"group counts differ ({estimated.k} vs {truth.k}); "
                         "membership is only compared when they agree")
    frac = float(np.mean(estimated.membership == truth.membership))
    return frac == 1.0, frac
