"""Domain types for BSDE problems and empirical process-norm estimators.

The estimators are the plug-in Monte Carlo versions of the S^p / M^p norms

    ||Y||_{S^p} = (E[sup_t |Y_t|^p])^(1 ^ 1/p)
    ||Z||_{M^p} = (E[(int_0^T |Z_t|^2 dt)^{p/2}])^(1 ^ 1/p)

with the time integral taken left endpoint on the grid so that norm values
agree bit-for-bit with the solver's internal quadrature.  Every estimator
reports a jackknife standard error over paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from .errors import MalformedInputError, NumericContaminationError

if TYPE_CHECKING:  # pragma: no cover
    from .stochastic import PathBundle, TimeGrid

__all__ = [
    "Dimensions",
    "TerminalSpec",
    "BSDEProblem",
    "SolutionField",
    "NormEstimates",
    "ClassDReport",
    "estimate_norms",
    "classD_diagnostic",
    "jackknife_se",
]


@dataclass(frozen=True)
class Dimensions:
    """State dimension k and Brownian dimension d."""

    k: int
    d: int

    def __post_init__(self):
        if self.k < 1 or self.d < 1:
            raise MalformedInputError("dimensions must satisfy k >= 1 and d >= 1")


@dataclass(frozen=True)
class TerminalSpec:
    """Measurable map from a discrete Brownian path bundle to R^k per path."""

    name: str
    k: int
    fn: Callable = field(repr=False)
    params: dict = field(default_factory=dict)

    def __call__(self, bundle: "PathBundle") -> np.ndarray:
        out = np.asarray(self.fn(bundle), dtype=np.float64)
        if out.ndim == 1:
            out = out[:, None]
        if out.shape != (bundle.path_count, self.k):
            raise MalformedInputError(
                f"terminal {self.name!r} returned shape {out.shape}, "
                f"expected {(bundle.path_count, self.k)}")
        return out


@dataclass(frozen=True)
class BSDEProblem:
    """Parameters (terminal, horizon, generator) of the backward equation."""

    terminal: TerminalSpec
    horizon: float
    generator: object  # GeneratorSpec; duck-typed to avoid an import cycle
    dims: Dimensions

    def __post_init__(self):
        if not (self.horizon >= 0.0 and np.isfinite(self.horizon)):
            raise MalformedInputError("horizon must be a nonnegative real")
        if self.terminal.k != self.dims.k:
            raise MalformedInputError("terminal output dimension must equal k")
        gdims = getattr(self.generator, "dims", None)
        if gdims is not None and gdims.k != self.dims.k:
            raise MalformedInputError("generator output dimension must equal k")


@dataclass
class SolutionField:
    """Per-grid-time representation of (y, z) over a path bundle.

    y_values: (N+1, M, k); z_values: (N+1, M, k, d).  The last z row mirrors
    z at t_{N-1} for display and is never used in any recursion or norm.
    y_coeffs / z_coeffs hold per-time regression fits for evaluating the
    conditional expectations at new states (None at the terminal time).
    """

    grid: "TimeGrid"
    y_values: np.ndarray
    z_values: np.ndarray
    y_coeffs: list = field(default_factory=list, repr=False)
    z_coeffs: list = field(default_factory=list, repr=False)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n1 = self.grid.times.size
        if self.y_values.shape[0] != n1 or self.z_values.shape[0] != n1:
            raise MalformedInputError("field arrays inconsistent with grid length")
        if self.y_values.shape[1] != self.z_values.shape[1]:
            raise MalformedInputError("path counts of y and z differ")

    @property
    def path_count(self) -> int:
        return self.y_values.shape[1]

    @property
    def k(self) -> int:
        return self.y_values.shape[2]


@dataclass
class NormEstimates:
    """Empirical norms with jackknife standard errors, keyed by exponent."""

    s_beta: dict
    m_beta: dict
    s_beta_se: dict
    m_beta_se: dict
    sup_mean_abs: float
    sup_mean_abs_se: float
    classD_proxy: float


@dataclass
class ClassDReport:
    """Threshold ladder tail expectations E[|Y_{tau*}| 1{|Y_{tau*}| > u}]."""

    values: dict
    standard_errors: dict

    def passes(self, epsilon: float) -> bool:
        top = max(self.values)
        return self.values[top] <= epsilon


def jackknife_se(per_path: np.ndarray, statistic=None) -> float:
    """Leave-one-out standard error of mean-type statistics over paths.

    With statistic=None this is the SE of the sample mean.  Otherwise
    ``statistic`` maps leave-one-out means to the estimate (delta-method
    style jackknife for smooth functions of a mean).
    """
    x = np.asarray(per_path, dtype=np.float64)
    m = x.shape[0]
    if m < 2:
        raise MalformedInputError("jackknife needs at least two paths")
    loo = (x.sum(axis=0) - x) / (m - 1)
    theta = statistic(loo) if statistic is not None else loo
    center = theta.mean(axis=0)
    return float(np.sqrt((m - 1) / m * ((theta - center) ** 2).sum(axis=0)))


def _check_field(fld: SolutionField) -> None:
    if fld.path_count < 2:
        raise MalformedInputError("field needs at least two paths")
    for name, arr in (("y", fld.y_values), ("z", fld.z_values)):
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))
            raise NumericContaminationError(
                f"non-finite {name} values at (time, path, ...) indices "
                f"{bad[:8].tolist()}", indices=bad)


def path_sup_abs_y(fld: SolutionField) -> np.ndarray:
    """(M,) per-path sup over grid times of |y_t| (Euclidean in R^k)."""
    return np.linalg.norm(fld.y_values, axis=2).max(axis=0)


def path_z_square_integral(fld: SolutionField) -> np.ndarray:
    """(M,) left-endpoint quadrature of int_0^T |z_t|^2 dt per path."""
    zsq = (fld.z_values[:-1] ** 2).sum(axis=(2, 3))  # (N, M)
    return np.tensordot(fld.grid.dt, zsq, axes=(0, 0))


def estimate_norms(field: SolutionField, betas) -> NormEstimates:
    """Plug-in Monte Carlo estimates of S^beta and M^beta norms.

    Deterministic given the field; reductions over paths use numpy's
    pairwise summation so results do not depend on worker count.
    """
    _check_field(field)
    betas = list(betas)
    if not betas:
        raise MalformedInputError("betas must be nonempty")
    for b in betas:
        if not (0.0 < b <= 2.0):
            raise MalformedInputError(f"beta {b} outside (0, 2]")

    sup_abs = path_sup_abs_y(field)          # (M,)
    zint = path_z_square_integral(field)     # (M,)

    s_beta, m_beta, s_se, m_se = {}, {}, {}, {}
    for b in betas:
        expo = min(1.0, 1.0 / b)
        ws = sup_abs ** b
        wm = zint ** (b / 2.0)
        s_beta[b] = float(ws.mean() ** expo)
        m_beta[b] = float(wm.mean() ** expo)
        s_se[b] = jackknife_se(ws, statistic=lambda mu, e=expo: mu ** e)
        m_se[b] = jackknife_se(wm, statistic=lambda mu, e=expo: mu ** e)

    abs_y = np.linalg.norm(field.y_values, axis=2)  # (N+1, M)
    mean_t = abs_y.mean(axis=1)
    sup_mean = float(mean_t.max())
    # jackknife of sup_t of leave-one-out means
    m = field.path_count
    loo = (abs_y.sum(axis=1, keepdims=True) - abs_y) / (m - 1)  # (N+1, M)
    sup_loo = loo.max(axis=0)
    sup_se = float(np.sqrt((m - 1) / m * ((sup_loo - sup_loo.mean()) ** 2).sum()))

    default_ladder = [2.0 ** j for j in range(6)]
    proxy = classD_diagnostic(field, default_ladder)
    return NormEstimates(s_beta=s_beta, m_beta=m_beta, s_beta_se=s_se, m_beta_se=m_se,
                         sup_mean_abs=sup_mean, sup_mean_abs_se=sup_se,
                         classD_proxy=proxy.values[max(proxy.values)])


def classD_diagnostic(field: SolutionField, thresholds) -> ClassDReport:
    """Tail mass of |y| at grid-hitting times of a threshold ladder.

    For each threshold u, tau* is the first grid time with |y| > u (T if
    never); the reported value is E[|y_{tau*}| 1{|y_{tau*}| > u}].  Class (D)
    cannot be tested over all stopping times; these hitting times are the
    extremal discrete ones for tail mass and are computable per path.
    """
    _check_field(field)
    thresholds = [float(u) for u in thresholds]
    if not thresholds:
        raise MalformedInputError("threshold list must be nonempty")
    if any(u <= 0 for u in thresholds) or any(
            b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise MalformedInputError("thresholds must be strictly increasing and positive")

    abs_y = np.linalg.norm(field.y_values, axis=2)  # (N+1, M)
    n1, m = abs_y.shape
    values, ses = {}, {}
    for u in thresholds:
        exceed = abs_y > u
        hit = exceed.any(axis=0)
        first = np.where(hit, exceed.argmax(axis=0), n1 - 1)
        at_tau = abs_y[first, np.arange(m)]
        contrib = np.where(hit & (at_tau > u), at_tau, 0.0)
        values[u] = float(contrib.mean())
        ses[u] = jackknife_se(contrib)
    return ClassDReport(values=values, standard_errors=ses)
