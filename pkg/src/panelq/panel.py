"""Panel data containers and the quantile check loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def check_loss(u, tau: float):
    """Quantile check function ``u * (tau - 1{u < 0})``.

    Works elementwise on arrays; returns a float for scalar input.
    """
    validate_tau(tau)
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0))
    return float(out) if out.ndim == 0 else out


def validate_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {tau}")
    return tau


@dataclass(frozen=True)
class PanelData:
    """Long-format panel: one row per (individual, period) observation.

    Parameters
    ----------
    y : (N,) array
        Responses.
    x : (N, p) array
        Covariates; ``p`` may be zero.
    ids : (N,) int array
        Individual index of each row, in ``0..n-1``.
    n : int, optional
        Number of individuals. Inferred from ``ids`` when omitted.
    labels : sequence, optional
        External identifiers of the individuals (e.g. from a CSV file).
    times : (N,) array, optional
        Period of each row; carried for ordering and output only.
    covariate_names : sequence of str, optional
    """

    y: np.ndarray
    x: np.ndarray
    ids: np.ndarray
    n: int = None
    labels: tuple = None
    times: np.ndarray = None
    covariate_names: tuple = None
    t_lengths: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = np.zeros((y.size, 0)) if self.x is None else np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else np.zeros((y.size, 0))
        ids = np.asarray(self.ids)
        if ids.size and not np.issubdtype(ids.dtype, np.integer):
            if not np.all(ids == np.round(ids)):
                raise ValueError("individual ids must be integers")
        ids = ids.astype(np.int64).reshape(-1)
        if x.shape[0] != y.size or ids.size != y.size:
            raise ValueError(
                f"row count mismatch: y={y.size}, x={x.shape[0]}, ids={ids.size}")
        if y.size == 0:
            raise ValueError("panel has no observations")
        n = int(ids.max()) + 1 if self.n is None else int(self.n)
        if ids.min() < 0 or ids.max() >= n:
            raise ValueError(f"individual ids must lie in 0..{n - 1}")
        t_lengths = np.bincount(ids, minlength=n)
        if np.any(t_lengths == 0):
            missing = np.flatnonzero(t_lengths == 0)[:5].tolist()
            raise ValueError(f"individuals without observations: {missing}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("responses and covariates must be finite")

        labels = tuple(range(n)) if self.labels is None else tuple(self.labels)
        if len(labels) != n:
            raise ValueError("labels must have one entry per individual")
        names = self.covariate_names
        if names is None:
            names = tuple(f"x{j + 1}" for j in range(x.shape[1]))
        names = tuple(names)
        if len(names) != x.shape[1]:
            raise ValueError("covariate_names must have one entry per column")
        times = self.times
        if times is not None:
            times = np.asarray(times).reshape(-1)
            if times.size != y.size:
                raise ValueError("times must be row-aligned with y")

        for name, value in [("y", y), ("x", x), ("ids", ids), ("n", n),
                            ("labels", labels), ("times", times),
                            ("covariate_names", names), ("t_lengths", t_lengths)]:
            object.__setattr__(self, name, value)

    @property
    def n_obs(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def t_bar(self) -> float:
        """Average number of periods per individual, ``N / n``."""
        return self.n_obs / self.n

    def residuals(self, alpha, beta) -> np.ndarray:
        return residuals(self, alpha, beta)

    def subset(self, individuals) -> "PanelData":
        """Panel restricted to the given individuals, re-indexed in that order."""
        individuals = np.asarray(individuals, dtype=np.int64)
        remap = np.full(self.n, -1)
        remap[individuals] = np.arange(individuals.size)
        keep = remap[self.ids] >= 0
        rows = np.flatnonzero(keep)
        rows = rows[np.argsort(remap[self.ids[rows]], kind="stable")]
        return PanelData(
            y=self.y[rows], x=self.x[rows], ids=remap[self.ids[rows]],
            n=individuals.size,
            labels=tuple(self.labels[i] for i in individuals),
            times=None if self.times is None else self.times[rows],
            covariate_names=self.covariate_names,
        )


def residuals(data: PanelData, alpha, beta) -> np.ndarray:
    """Row-aligned residuals ``y - x @ beta - alpha[id]``."""
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if alpha.size != data.n:
        raise ValueError(f"expected {data.n} intercepts, got {alpha.size}")
    if beta.size != data.p:
        raise ValueError(f"expected {data.p} slopes, got {beta.size}")
    return data.y - data.x @ beta - alpha[data.ids]


def total_check_loss(data: PanelData, tau: float, alpha, beta) -> float:
    return float(np.sum(check_loss(residuals(data, alpha, beta), tau)))


@dataclass(frozen=True)
class FixedEffectsFit:
    """Fixed-effects quantile regression estimates."""

    alpha: np.ndarray
    beta: np.ndarray
    objective: float
    tau: float
    iterations: int = 0
    status: str = "converged"
    report: object = field(default=None, repr=False, compare=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"
