"""Constructive backward solver pipeline.

Four layers, composed bottom-up:

  truncate_problem   radial clamp q_n(x) = x n / (n v |x|) applied to the
                     terminal and to the generator's value at the origin;
                     generator increments in y are untouched.
  solve_z_free       backward recursion for generators that ignore z:
                     y_N = xi, then per step an implicit-in-y solve
                     y = E[y_{i+1}|F_i] + g(t_i, y) dt via damped fixed
                     point with a per-component bisection fallback, and
                     z_i = E[(y_{i+1} - E[y_{i+1}|F_i]) dB_i' | F_i] / dt_i.
  picard_solve       outer iteration freezing z^{n-1} inside g and calling
                     the z-free solver, on subintervals of length at most
                     deltaT chosen so each window's iteration contracts.
  solve_L1           truncation ladder n_1 < ... < n_J with inter-level
                     distance diagnostics.

The subinterval length follows the contraction arithmetic: with A the
linear-growth constant of the Osgood modulus and lam the z-Lipschitz
constant,

  alpha <  1/2:  deltaT = min(ln2 / C, 1 / (16 lam^2), ln2 / (2A))
  alpha >= 1/2:  deltaT = min(ln2 / C, (1 / (16 lam^q))^{2/q}, ln2 / (2A)),
                 q = (1 + min(pbar, 1/alpha)) / 2

C is not computable from first principles (it inherits non-constructive
apriori-estimate constants); it is exposed as config C_split with default
2 (A + lam + lam^2), and smaller deltaT is always admissible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import BSDEProblem, SolutionField, TerminalSpec, jackknife_se
from .conditions import GeneratorSpec
from .errors import (ConfigurationError, MalformedInputError,
                     SolverDivergenceError)
from .stochastic import (PathBundle, RegressionBasis, build_design,
                         conditional_expectation, design_fit)

__all__ = [
    "TruncationLevel",
    "SolveConfig",
    "PicardTrace",
    "LadderDiagnostics",
    "truncate_problem",
    "solve_z_free",
    "picard_solve",
    "solve_L1",
    "coupled_distances",
]

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class TruncationLevel:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise MalformedInputError("truncation level must be >= 1")


@dataclass(frozen=True)
class SolveConfig:
    """Numerical knobs for the backward pipeline."""

    n_steps: int = 100
    n_paths: int = 10_000
    basis: RegressionBasis = RegressionBasis()
    ridge: float = 1e-8
    picard_max_iter: int = 40
    picard_tol: float = 1e-7       # in the beta = 1/2 metric E sup|dy|^.5 + M^.5(dz)
    z_init: float = 0.0
    c_split: Optional[float] = None
    inner_max_iter: int = 60
    damping: float = 0.5
    max_subintervals: int = 10_000

    def __post_init__(self):
        if self.n_steps < 1 or self.n_paths < 2:
            raise ConfigurationError("n_steps must be >= 1 and n_paths >= 2")
        if self.picard_tol <= 0 or self.picard_max_iter < 1:
            raise ConfigurationError("picard limits must be positive")
        if not (0.0 < self.damping <= 1.0):
            raise ConfigurationError("damping must lie in (0, 1]")
        if self.c_split is not None and self.c_split <= 0:
            raise ConfigurationError("c_split must be positive when given")


@dataclass
class PicardTrace:
    """Per-outer-iteration distances to the previous iterate.

    Columns: subinterval index (0 = latest window), iteration number within
    the window, sup_t mean|dy|, E sup|dy|^{1/2}, M^{1/2}(dz), wall seconds.
    Iteration 1's distance is measured against the initialization
    (y = 0, z = z_init), mirroring a Picard scheme started at zero.
    """

    rows: list = field(default_factory=list)

    def append(self, subinterval, iteration, sup_mean, s_half, m_half, seconds):
        self.rows.append({"subinterval": subinterval, "iteration": iteration,
                          "sup_mean_abs_dy": sup_mean, "s_half_dy": s_half,
                          "m_half_dz": m_half, "seconds": seconds})

    def window_rows(self, subinterval):
        return [r for r in self.rows if r["subinterval"] == subinterval]

    def combined(self, row):
        return row["s_half_dy"] + row["m_half_dz"]


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------

def radial_clamp(x: np.ndarray, n: float) -> np.ndarray:
    """q_n(x) = x n / (n v |x|), rows clamped to the ball of radius n."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x * (n / np.maximum(n, norms))


def truncate_problem(problem: BSDEProblem, level: TruncationLevel) -> BSDEProblem:
    """Clamp the terminal and the generator's origin value at radius n.

    The new generator is g(t,y,z) - g(t,0,0) + q_n(g(t,0,0)): bounded at the
    origin by n, with all y- and z-increments of g unchanged, so every
    declared one-sided condition carries over verbatim.  A declared additive
    time singularity cancels inside the subtraction and is dropped.
    """
    n = float(level.n)
    base_term = problem.terminal
    base_gen = problem.generator

    terminal = TerminalSpec(
        name=f"qn{level.n}({base_term.name})", k=base_term.k,
        fn=lambda bundle: radial_clamp(base_term(bundle), n),
        params={**base_term.params, "truncation": level.n})

    def evaluate(t, y, z, b, _g=base_gen):
        val = np.asarray(_g.evaluate(t, y, z, b), dtype=np.float64)
        if val.ndim == 1:
            val = val[:, None]
        origin = np.asarray(
            _g.evaluate(t, np.zeros_like(y), np.zeros_like(z), b), dtype=np.float64)
        if origin.ndim == 1:
            origin = origin[:, None]
        return val - origin + radial_clamp(origin, n)

    gen = replace(base_gen, name=f"qn{level.n}({base_gen.name})",
                  evaluate=evaluate, singular=None,
                  params={**base_gen.params, "truncation": level.n})
    return BSDEProblem(terminal=terminal, horizon=problem.horizon,
                       generator=gen, dims=problem.dims)


# ---------------------------------------------------------------------------
# z-free backward recursion on an index window
# ---------------------------------------------------------------------------

def _implicit_y_step(gen, t_i, dt, base, z_frozen, b_state, config):
    """Solve y = base + g(t_i, y, z_frozen, b) dt per path.

    Damped fixed point from an explicit start; paths that fail to settle
    fall back to per-component bisection (one-sided drifts make the
    residual monotone in each component whenever dt is small enough).
    """
    damp = config.damping

    def rhs(yv):
        return base + gen(t_i, yv, z_frozen, b_state) * dt

    y = rhs(base)  # explicit start
    for _ in range(config.inner_max_iter):
        resid = rhs(y) - y
        if np.all(np.abs(resid) <= 1e-12 * (1.0 + np.abs(y))):
            return y, np.empty(0, dtype=np.int64)
        y = y + damp * resid

    resid = rhs(y) - y
    bad = np.flatnonzero(np.any(np.abs(resid) > 1e-12 * (1.0 + np.abs(y)), axis=1))
    still_bad = []
    for j in bad:
        base_j = base[j:j + 1]
        z_j = z_frozen[j:j + 1]
        b_j = b_state[j:j + 1]

        def rhs_j(y_row):
            return base_j + gen(t_i, y_row[None, :], z_j, b_j)[0] * dt

        yj = y[j].copy()
        solved = True
        for _sweep in range(4):
            done = True
            for comp in range(y.shape[1]):
                r = rhs_j(yj)[0, comp] - yj[comp]
                if abs(r) <= 1e-12 * (1.0 + abs(yj[comp])):
                    continue
                done = False
                val = _bisect_component(
                    lambda v, cc=comp, yy=yj: _component_residual(rhs_j, yy, cc, v),
                    yj[comp])
                if val is None:
                    solved = False
                    break
                yj[comp] = val
            if not solved or done:
                break
        final_resid = rhs_j(yj)[0] - yj
        if solved and np.all(np.abs(final_resid) <= 1e-10 * (1.0 + np.abs(yj))):
            y[j] = yj
        else:
            still_bad.append(int(j))
    return y, np.asarray(sorted(set(still_bad)), dtype=np.int64)


def _component_residual(rhs_j, y_row, comp, v):
    y_try = y_row.copy()
    y_try[comp] = v
    return v - rhs_j(y_try)[0, comp]


def _bisect_component(resid, v0):
    h = max(1.0, abs(v0))
    lo, hi = v0 - h, v0 + h
    f_lo, f_hi = resid(lo), resid(hi)
    for _ in range(60):
        if f_lo == 0.0:
            return lo
        if f_hi == 0.0:
            return hi
        if f_lo * f_hi < 0.0:
            break
        h *= 2.0
        lo, hi = v0 - h, v0 + h
        f_lo, f_hi = resid(lo), resid(hi)
    else:
        return None
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        f_mid = resid(mid)
        if f_mid == 0.0:
            return mid
        if f_lo * f_mid < 0.0:
            hi, f_hi = mid, f_mid
        else:
            lo, f_lo = mid, f_mid
    return 0.5 * (lo + hi)


def _zfree_window(gen, bundle, config, i_lo, i_hi, y_terminal, z_frozen,
                  designs=None):
    """Backward recursion on grid indices [i_lo, i_hi].

    y_terminal: (M, k) values at t_{i_hi}; z_frozen: per window step
    (i_hi - i_lo, M, k, d) values substituted for z inside the generator.
    ``designs`` optionally maps global grid index to a prebuilt
    RegressionDesign, shared across Picard iterations.  Returns
    window-local y (steps+1, M, k), z (steps, M, k, d) and per-step fits.
    """
    times = bundle.grid.times
    m, k = y_terminal.shape
    d = bundle.d
    steps = i_hi - i_lo
    y = np.empty((steps + 1, m, k))
    y[steps] = y_terminal
    z = np.empty((steps, m, k, d))
    y_fits = [None] * steps
    z_fits = [None] * steps
    failures = []

    for s in range(steps - 1, -1, -1):
        i = i_lo + s
        dt = times[i + 1] - times[i]
        info = designs[i] if designs is not None else build_design(
            bundle, i, config.basis, ridge=config.ridge)
        cont_fit = design_fit(info, y[s + 1])
        cont = cont_fit.fitted
        # two-stage martingale-increment regression: centering by the
        # projected mean and subtracting the first-pass fitted z times the
        # zero-mean quadratic bracket leave the conditional expectation
        # unchanged while removing the dominant noise terms
        db = bundle.increments[i]
        centered = y[s + 1] - cont
        prod = (centered[:, :, None] * db[:, None, :]).reshape(m, k * d) / dt
        z1 = design_fit(info, prod).fitted.reshape(m, k, d)
        bracket = (db[:, :, None] * db[:, None, :]
                   - dt * np.eye(d)[None, :, :]) / dt      # (M, d, d)
        ctrl = np.einsum("mcp,mpj->mcj", z1, bracket).reshape(m, k * d)
        z_fit = design_fit(info, prod - ctrl)
        z[s] = z_fit.fitted.reshape(m, k, d)

        t_i = times[i]
        b_state = bundle.cumulative[i]
        base = cont
        if gen.singular is not None:
            sing_val = gen.singular.value(t_i)
            sing_int = gen.singular.integral(t_i, times[i + 1])
            base = cont + (sing_int - sing_val * dt)
            # the pointwise term re-enters through evaluate; only the
            # difference between exact and left-endpoint quadrature is added
        y_i, bad = _implicit_y_step(gen, t_i, dt, base, z_frozen[s], b_state, config)
        if bad.size:
            failures.extend((i, int(j)) for j in bad)
        y[s] = y_i
        y_fits[s] = cont_fit.slim()
        z_fits[s] = z_fit.slim()

    if failures:
        raise SolverDivergenceError(
            f"implicit step failed to converge at {len(failures)} (time, path) "
            f"pairs, first {failures[:5]}", where=failures)
    return y, z, y_fits, z_fits


def solve_z_free(problem: BSDEProblem, config: SolveConfig,
                 bundle: PathBundle) -> SolutionField:
    """Backward solve for a generator declared independent of z."""
    gen = problem.generator
    if not gen.z_independent:
        raise MalformedInputError(
            f"generator {gen.name!r} is not declared z-independent")
    _check_problem_bundle(problem, bundle)
    n = bundle.grid.n_steps
    m, k, d = bundle.path_count, problem.dims.k, problem.dims.d
    xi = problem.terminal(bundle)
    z_frozen = np.zeros((n, m, k, d))
    y, z, y_fits, z_fits = _zfree_window(gen, bundle, config, 0, n, xi, z_frozen)
    z_full = np.concatenate([z, z[-1:]], axis=0)
    return SolutionField(grid=bundle.grid, y_values=y, z_values=z_full,
                         y_coeffs=y_fits + [None], z_coeffs=z_fits + [None],
                         metadata={"solver": "z_free", "seed": bundle.seed})


# ---------------------------------------------------------------------------
# Picard iteration with time-interval splitting
# ---------------------------------------------------------------------------

def compute_delta_T(gen: GeneratorSpec, config: SolveConfig) -> float:
    """Contraction window length; infinity when no term constrains it."""
    a_const = gen.rho.linear_constant if gen.rho is not None else 0.0
    lam = gen.lam
    c_split = config.c_split if config.c_split is not None \
        else 2.0 * (a_const + lam + lam * lam)
    terms = []
    if c_split > 0.0:
        terms.append(LN2 / c_split)
    if lam > 0.0:
        if gen.alpha < 0.5:
            terms.append(1.0 / (16.0 * lam * lam))
        else:
            if gen.pbar is None:
                raise ConfigurationError(
                    f"generator {gen.name!r}: alpha = {gen.alpha} >= 1/2 requires "
                    "a declared pbar > 1")
            q = 0.5 * (1.0 + min(gen.pbar, 1.0 / gen.alpha))
            terms.append((1.0 / (16.0 * lam ** q)) ** (2.0 / q))
    if a_const > 0.0:
        terms.append(LN2 / (2.0 * a_const))
    return min(terms) if terms else np.inf


def _window_indices(grid, delta_t: float, max_windows: int):
    """Backward greedy split of grid indices into windows of length <= deltaT.

    Windows degenerate to single steps where the grid is coarser than
    deltaT; the count cap guards against absurd configurations.
    """
    times = grid.times
    windows = []
    hi = times.size - 1
    while hi > 0:
        lo = int(np.searchsorted(times, times[hi] - delta_t, side="left"))
        if lo >= hi:
            lo = hi - 1
        windows.append((lo, hi))
        hi = lo
        if len(windows) > max_windows:
            raise ConfigurationError(
                f"subinterval count exceeds {max_windows}; deltaT = {delta_t:g} "
                "is too small for this grid")
    return windows


def _check_problem_bundle(problem, bundle):
    if abs(bundle.grid.horizon - problem.horizon) > 1e-12:
        raise MalformedInputError("bundle horizon does not match problem horizon")
    if bundle.d != problem.dims.d:
        raise MalformedInputError("bundle Brownian dimension does not match problem")


def _window_distances(y_new, y_old, z_new, z_old, dts):
    dy = np.linalg.norm(y_new - y_old, axis=2)          # (steps+1, M)
    sup_mean = float(dy.mean(axis=1).max())
    s_half = float(np.sqrt(dy.max(axis=0)).mean())
    dz_sq = ((z_new - z_old) ** 2).sum(axis=(2, 3))     # (steps, M)
    zint = np.tensordot(dts, dz_sq, axes=(0, 0))
    m_half = float((zint ** 0.25).mean())
    return sup_mean, s_half, m_half


def picard_solve(problem: BSDEProblem, config: SolveConfig,
                 bundle: PathBundle) -> tuple:
    """Full backward solve: freeze z^{n-1}, solve z-free, repeat per window.

    Windows are processed from the horizon towards 0; each takes its
    terminal values from the window solved before it.  Divergence (distance
    increasing for three consecutive iterations well above tolerance) aborts
    with the trace attached.
    """
    gen = problem.generator
    _check_problem_bundle(problem, bundle)
    delta_t = compute_delta_T(gen, config)
    windows = _window_indices(bundle.grid, delta_t, config.max_subintervals)

    n = bundle.grid.n_steps
    m, k, d = bundle.path_count, problem.dims.k, problem.dims.d
    y_full = np.empty((n + 1, m, k))
    z_full = np.empty((n + 1, m, k, d))
    y_fits_full = [None] * (n + 1)
    z_fits_full = [None] * (n + 1)
    y_full[n] = problem.terminal(bundle)

    trace = PicardTrace()
    for w_idx, (lo, hi) in enumerate(windows):
        steps = hi - lo
        dts = bundle.grid.dt[lo:hi]
        y_term = y_full[hi]
        # designs are shared across this window's Picard iterations and
        # released afterwards (they hold O(paths x features) arrays)
        designs = None
        if not gen.z_independent:
            designs = {i: build_design(bundle, i, config.basis, ridge=config.ridge)
                       for i in range(lo, hi)}
        z_frozen = np.full((steps, m, k, d), float(config.z_init))
        y_prev = np.zeros((steps + 1, m, k))
        z_prev = z_frozen.copy()
        history = []
        t_start = time.perf_counter()
        for it in range(1, config.picard_max_iter + 1):
            y_w, z_w, y_fits, z_fits = _zfree_window(
                gen, bundle, config, lo, hi, y_term, z_frozen, designs=designs)
            sup_mean, s_half, m_half = _window_distances(y_w, y_prev, z_w, z_prev, dts)
            trace.append(w_idx, it, sup_mean, s_half, m_half,
                         time.perf_counter() - t_start)
            metric = s_half + m_half
            history.append(metric)
            y_prev, z_prev = y_w, z_w
            z_frozen = z_w
            if gen.z_independent or metric <= config.picard_tol:
                break
            if (len(history) >= 4
                    and history[-1] > history[-2] > history[-3] > history[-4]
                    and history[-1] > 10.0 * config.picard_tol):
                raise SolverDivergenceError(
                    f"Picard distances increased for 3 consecutive iterations "
                    f"in window {w_idx} ({history[-4]:.3e} -> {history[-1]:.3e})",
                    trace=trace)
        y_full[lo:hi] = y_prev[:steps]
        z_full[lo:hi] = z_prev
        for s in range(steps):
            y_fits_full[lo + s] = y_fits[s]
            z_fits_full[lo + s] = z_fits[s]
        designs = None

    z_full[n] = z_full[n - 1]  # display only; never used in recursions
    field = SolutionField(
        grid=bundle.grid, y_values=y_full, z_values=z_full,
        y_coeffs=y_fits_full, z_coeffs=z_fits_full,
        metadata={"solver": "picard", "delta_T": float(delta_t),
                  "subintervals": len(windows), "seed": bundle.seed,
                  "z_init": float(config.z_init)})
    return field, trace


# ---------------------------------------------------------------------------
# truncation ladder
# ---------------------------------------------------------------------------

def coupled_distances(field_a: SolutionField, field_b: SolutionField) -> dict:
    """Pathwise distances between two fields on the same bundle.

    Returns sup_t mean|dy|, E sup|dy|^{1/2}, M^{1/2}(dz), each with a
    jackknife standard error over paths.
    """
    dy = np.linalg.norm(field_a.y_values - field_b.y_values, axis=2)  # (N+1, M)
    m = dy.shape[1]
    mean_t = dy.mean(axis=1)
    i_star = int(mean_t.argmax())
    sup_mean = float(mean_t[i_star])
    sup_mean_se = jackknife_se(dy[i_star])

    sup_path = np.sqrt(dy.max(axis=0))
    s_half = float(sup_path.mean())
    s_half_se = jackknife_se(sup_path)

    dz_sq = ((field_a.z_values[:-1] - field_b.z_values[:-1]) ** 2).sum(axis=(2, 3))
    zint = np.tensordot(field_a.grid.dt, dz_sq, axes=(0, 0)) ** 0.25
    m_half = float(zint.mean())
    m_half_se = jackknife_se(zint)
    return {"sup_mean_abs_dy": sup_mean, "sup_mean_abs_dy_se": sup_mean_se,
            "s_half_dy": s_half, "s_half_dy_se": s_half_se,
            "m_half_dz": m_half, "m_half_dz_se": m_half_se}


@dataclass
class LadderDiagnostics:
    levels: list
    distances: list          # one dict per consecutive level pair
    nonincreasing: dict      # metric name -> bool (within 2 SE)
    traces: list = field(default_factory=list, repr=False)


def solve_L1(problem: BSDEProblem, config: SolveConfig, bundle: PathBundle,
             ladder=(2, 4, 8, 16, 32, 64)) -> tuple:
    """Truncate at each ladder level, Picard-solve, report level distances.

    The returned field is the finest level's; the diagnostics mirror the
    contraction of consecutive approximants and should be nonincreasing
    (up to twice their standard errors) for data satisfying the standing
    assumptions.
    """
    levels = [int(n) for n in ladder]
    if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
        raise MalformedInputError("ladder must be nonempty and increasing")

    # only consecutive fields are needed at once; streaming keeps the peak
    # footprint at two fields regardless of ladder length
    distances, traces = [], []
    prev_field = None
    fld = None
    for n in levels:
        truncated = truncate_problem(problem, TruncationLevel(n))
        fld, tr = picard_solve(truncated, config, bundle)
        traces.append(tr)
        if prev_field is not None:
            distances.append(coupled_distances(fld, prev_field))
        prev_field = fld
    nonincreasing = {}
    for key in ("sup_mean_abs_dy", "s_half_dy", "m_half_dz"):
        flags = [distances[j + 1][key] <= distances[j][key]
                 + 2.0 * (distances[j][key + "_se"] + distances[j + 1][key + "_se"])
                 for j in range(len(distances) - 1)]
        nonincreasing[key] = all(flags) if flags else True
    diag = LadderDiagnostics(levels=levels, distances=distances,
                             nonincreasing=nonincreasing, traces=traces)
    return fld, diag
