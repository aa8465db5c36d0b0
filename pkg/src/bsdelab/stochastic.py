"""Brownian path bundles and regression-based conditional expectations.

Path generation is counter based: every (path, step, component) triple maps
to a fixed position in a Philox-4x64 counter stream, so path ``j`` comes out
bit-identical no matter how the work is chunked and no matter how many paths
are requested in total.  That prefix property is what makes common-random-
number couplings and path-doubling diagnostics meaningful.

Conditional expectations E[. | F_{t_i}] are computed as least-squares
projections onto basis functions of the current Brownian state B_{t_i}
(Markovian regression; built-in terminal conditions are functions of the
Brownian state at grid times).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .errors import MalformedInputError, NumericContaminationError

__all__ = [
    "TimeGrid",
    "PathBundle",
    "RegressionBasis",
    "RegressionFit",
    "simulate_paths",
    "prefix_bundle",
    "conditional_expectation",
    "save_bundle",
    "load_bundle",
]

_INV53 = 2.0 ** -53


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing grid t_0 = 0 < ... < t_N = T."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or t.size < 2:
            raise MalformedInputError("time grid needs at least two points")
        if not np.all(np.isfinite(t)):
            raise MalformedInputError("time grid contains non-finite entries")
        if t[0] != 0.0:
            raise MalformedInputError("time grid must start at 0")
        if np.any(np.diff(t) <= 0.0):
            raise MalformedInputError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        if n_steps < 1:
            raise MalformedInputError("n_steps must be >= 1")
        if not (horizon > 0.0 and np.isfinite(horizon)):
            raise MalformedInputError("horizon must be positive and finite")
        return cls(np.linspace(0.0, horizon, n_steps + 1))

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)


@dataclass(frozen=True)
class PathBundle:
    """Brownian increments and cumulative states on a grid.

    increments: (N, M, d) array of dB over each step.
    cumulative: (N+1, M, d) array of B at each grid time, B_0 = 0.
    """

    grid: TimeGrid
    increments: np.ndarray
    cumulative: np.ndarray
    seed: int
    path_count: int

    @property
    def d(self) -> int:
        return self.increments.shape[2]


def _philox_uniforms(seed: int, first_path: int, n_paths: int, words_per_path: int) -> np.ndarray:
    """Open-interval uniforms for paths [first_path, first_path + n_paths).

    Each path owns ``ceil(words_per_path / 4)`` whole Philox counter blocks,
    so its draws do not depend on which other paths are generated alongside.
    """
    blocks_per_path = (words_per_path + 3) // 4
    bg = np.random.Philox(key=np.uint64(seed), counter=int(first_path) * blocks_per_path)
    raw = bg.random_raw(n_paths * blocks_per_path * 4)
    raw = raw.reshape(n_paths, blocks_per_path * 4)[:, :words_per_path]
    # 53-bit mantissa, shifted into (0, 1) so the normal quantile stays finite
    return (np.right_shift(raw, 11) + 0.5) * _INV53


def simulate_paths(grid: TimeGrid, dims, path_count: int, seed: int,
                   chunk_size: int = 65536) -> PathBundle:
    """Simulate `path_count` d-dimensional Brownian paths on `grid`.

    Reproducible: identical (grid, dims, path_count, seed) give identical
    bundles; path j is also unchanged when path_count grows, so bundles with
    more paths extend smaller ones.
    """
    if path_count < 2:
        raise MalformedInputError("path_count must be >= 2")
    d = int(dims.d)
    n = grid.n_steps
    words = n * d
    sqrt_dt = np.sqrt(grid.dt)  # (N,)

    increments = np.empty((n, path_count, d))
    for start in range(0, path_count, chunk_size):
        stop = min(start + chunk_size, path_count)
        u = _philox_uniforms(seed, start, stop - start, words)
        z = ndtri(u).reshape(stop - start, n, d)
        increments[:, start:stop, :] = np.transpose(z, (1, 0, 2)) * sqrt_dt[:, None, None]

    cumulative = np.empty((n + 1, path_count, d))
    cumulative[0] = 0.0
    np.cumsum(increments, axis=0, out=cumulative[1:])
    return PathBundle(grid=grid, increments=increments, cumulative=cumulative,
                      seed=int(seed), path_count=int(path_count))


def prefix_bundle(bundle: PathBundle, path_count: int) -> PathBundle:
    """View of the first `path_count` paths; valid because paths are counter-aligned."""
    if path_count > bundle.path_count:
        raise MalformedInputError("prefix larger than bundle")
    return PathBundle(grid=bundle.grid,
                      increments=bundle.increments[:, :path_count, :],
                      cumulative=bundle.cumulative[:, :path_count, :],
                      seed=bundle.seed, path_count=path_count)


# ---------------------------------------------------------------------------
# serialization: flat little-endian binary for caching between CLI runs
# ---------------------------------------------------------------------------

_MAGIC = b"BSDL"


def save_bundle(bundle: PathBundle, path: str, k: int = 1) -> None:
    """Header: magic, k, d, N, M, seed (int64 LE), grid times, then
    row-major (step, path, component) increments as float64 LE."""
    n = bundle.grid.n_steps
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<5q", k, bundle.d, n, bundle.path_count, bundle.seed))
        fh.write(bundle.grid.times.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.increments, dtype="<f8").tobytes())


def load_bundle(path: str) -> PathBundle:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise MalformedInputError(f"{path}: not a bundle file")
        _k, d, n, m, seed = struct.unpack("<5q", fh.read(40))
        times = np.frombuffer(fh.read(8 * (n + 1)), dtype="<f8")
        inc = np.frombuffer(fh.read(8 * n * m * d), dtype="<f8").reshape(n, m, d)
    grid = TimeGrid(times.copy())
    cumulative = np.empty((n + 1, m, d))
    cumulative[0] = 0.0
    np.cumsum(inc, axis=0, out=cumulative[1:])
    return PathBundle(grid=grid, increments=inc.copy(), cumulative=cumulative,
                      seed=int(seed), path_count=int(m))


# ---------------------------------------------------------------------------
# regression engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionBasis:
    """Feature map of the current Brownian state.

    kind="polynomial": all monomials of total degree <= degree (constant
    included).  kind="piecewise-constant": indicator of equal-width bins per
    axis over the sample range, plus the constant function; the indicators
    sum to one, so the design is rank deficient by construction and the
    ridge fallback is exercised.
    """

    kind: str = "polynomial"
    degree: int = 3
    bins: int = 8

    def __post_init__(self):
        if self.kind not in ("polynomial", "piecewise-constant"):
            raise MalformedInputError(f"unknown basis kind {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 0:
            raise MalformedInputError("polynomial degree must be >= 0")
        if self.kind == "piecewise-constant" and self.bins < 1:
            raise MalformedInputError("bins must be >= 1")

    def features(self, state: np.ndarray, edges: Optional[list] = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(state, dtype=np.float64))
        m, d = x.shape
        if self.kind == "polynomial":
            cols = [np.ones(m)]
            # monomials grouped by total degree, lexicographic in exponents
            for exps in _monomial_exponents(d, self.degree):
                if sum(exps) == 0:
                    continue
                col = np.ones(m)
                for axis, e in enumerate(exps):
                    if e:
                        col = col * x[:, axis] ** e
                cols.append(col)
            return np.column_stack(cols)
        # piecewise constant
        if edges is None:
            edges = self.bin_edges(x)
        idx = np.zeros(m, dtype=np.int64)
        for axis in range(d):
            pos = np.clip(np.searchsorted(edges[axis], x[:, axis], side="right") - 1,
                          0, self.bins - 1)
            idx = idx * self.bins + pos
        feats = np.zeros((m, 1 + self.bins ** d))
        feats[:, 0] = 1.0
        feats[np.arange(m), 1 + idx] = 1.0
        return feats

    def bin_edges(self, state: np.ndarray) -> list:
        x = np.atleast_2d(state)
        edges = []
        for axis in range(x.shape[1]):
            lo, hi = float(x[:, axis].min()), float(x[:, axis].max())
            if hi <= lo:
                hi = lo + 1.0
            edges.append(np.linspace(lo, hi, self.bins + 1))
        return edges


def _monomial_exponents(d: int, degree: int):
    """All exponent tuples with total degree <= degree, ordered by degree."""
    out = []

    def rec(prefix, remaining, axes_left):
        if axes_left == 0:
            out.append(tuple(prefix))
            return
        for e in range(remaining + 1):
            rec(prefix + [e], remaining - e, axes_left - 1)

    for total in range(degree + 1):
        block = []

        def rec_total(prefix, rem, axes_left):
            if axes_left == 1:
                block.append(tuple(prefix + [rem]))
                return
            for e in range(rem + 1):
                rec_total(prefix + [e], rem - e, axes_left - 1)

        rec_total([], total, d)
        out.extend(block)
    return out


@dataclass
class RegressionDesign:
    """Standardized design matrix at one grid time with its factorization.

    Solver loops build this once per time step and reuse it for every
    regression target at that step (continuation values and both z passes
    share the same basis functions of B_{t_i}).
    """

    design: np.ndarray = field(repr=False)
    basis: RegressionBasis
    ridge: float
    mu: np.ndarray = field(repr=False)
    sd: np.ndarray = field(repr=False)
    edges: Optional[list] = field(repr=False)
    chol: Optional[np.ndarray] = field(repr=False)
    ridge_gram: Optional[np.ndarray] = field(repr=False)
    rank: int = 0
    mean_only: bool = False

    def slim(self) -> "RegressionDesign":
        """Copy without the O(paths) arrays, for storage inside fields."""
        return RegressionDesign(design=None, basis=self.basis, ridge=self.ridge,
                                mu=self.mu, sd=self.sd, edges=self.edges,
                                chol=None, ridge_gram=None, rank=self.rank,
                                mean_only=self.mean_only)


def build_design(bundle: PathBundle, time_index: int, basis: RegressionBasis,
                 ridge: float = 1e-8) -> RegressionDesign:
    """Assemble and factor the normal equations at grid time t_i.

    The plain least-squares path uses a Cholesky factor of the Gram matrix;
    a rank-deficient (or numerically near-deficient) design switches to the
    ridge-regularized Gram, which callers surface as ``ridge_used``.
    """
    if time_index >= bundle.grid.n_steps:
        raise MalformedInputError("time_index must be < N")
    if time_index == 0:
        return RegressionDesign(design=None, basis=basis, ridge=ridge, mu=None,
                                sd=None, edges=None, chol=None, ridge_gram=None,
                                rank=1, mean_only=True)
    state = bundle.cumulative[time_index]
    edges = basis.bin_edges(state) if basis.kind == "piecewise-constant" else None
    design = basis.features(state, edges=edges)
    mu = design.mean(axis=0)
    sd = design.std(axis=0)
    sd[sd < 1e-300] = 1.0
    design = (design - mu) / sd
    design[:, 0] = 1.0

    p = design.shape[1]
    gram = design.T @ design
    chol = None
    ridge_gram = None
    rank = p
    try:
        chol = np.linalg.cholesky(gram)
        diag = np.diag(chol)
        if diag.min() <= 1e-7 * diag.max():
            raise np.linalg.LinAlgError("near rank-deficient design")
    except np.linalg.LinAlgError:
        chol = None
        rank = int(np.linalg.matrix_rank(gram))
        m = design.shape[0]
        ridge_gram = gram / m + ridge * np.eye(p)
    return RegressionDesign(design=design, basis=basis, ridge=ridge, mu=mu, sd=sd,
                            edges=edges, chol=chol, ridge_gram=ridge_gram, rank=rank)


@dataclass
class RegressionFit:
    """Least-squares projection result.

    fitted has the shape of the input values; coeffs live on the normalized
    design.  ridge_used flags the fallback for rank-deficient designs.
    """

    fitted: np.ndarray
    coeffs: np.ndarray
    ridge_used: bool
    rank: int
    _design: RegressionDesign = field(repr=False, default=None)
    _squeeze: bool = field(repr=False, default=False)

    def slim(self) -> "RegressionFit":
        """Coefficients-only copy (predict still works; fitted dropped)."""
        return RegressionFit(fitted=None, coeffs=self.coeffs,
                             ridge_used=self.ridge_used, rank=self.rank,
                             _design=None if self._design is None
                             else self._design.slim(), _squeeze=self._squeeze)

    def predict(self, state: np.ndarray) -> np.ndarray:
        """Evaluate the fitted conditional expectation at new states."""
        info = self._design
        if info is None or info.mean_only:
            m = np.atleast_2d(state).shape[0]
            out = np.broadcast_to(self.coeffs, (m,) + self.coeffs.shape).copy()
            return out[:, 0] if self._squeeze else out
        design = info.basis.features(state, edges=info.edges)
        design = (design - info.mu) / info.sd
        design[:, 0] = 1.0
        fitted = design @ self.coeffs
        return fitted[:, 0] if self._squeeze else fitted


def design_fit(info: RegressionDesign, values: np.ndarray) -> RegressionFit:
    """Project values onto a prebuilt design (see build_design)."""
    from scipy.linalg import cho_solve

    vals = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))
        raise NumericContaminationError(
            f"non-finite regression targets at {bad[:8].tolist()}", indices=bad)
    squeeze = vals.ndim == 1
    v2 = vals[:, None] if squeeze else vals

    if info.mean_only:
        mean = v2.mean(axis=0)
        fitted = np.broadcast_to(mean, v2.shape).copy()
        return RegressionFit(fitted=fitted[:, 0] if squeeze else fitted,
                             coeffs=mean, ridge_used=False, rank=1, _design=info,
                             _squeeze=squeeze)

    rhs = info.design.T @ v2
    if info.chol is not None:
        coeffs = cho_solve((info.chol, True), rhs)
        ridge_used = False
    else:
        m = info.design.shape[0]
        coeffs = np.linalg.solve(info.ridge_gram, rhs / m)
        ridge_used = True
    fitted = info.design @ coeffs
    return RegressionFit(fitted=fitted[:, 0] if squeeze else fitted, coeffs=coeffs,
                         ridge_used=ridge_used, rank=info.rank, _design=info,
                         _squeeze=squeeze)


def conditional_expectation(values: np.ndarray, bundle: PathBundle, time_index: int,
                            basis: RegressionBasis, ridge: float = 1e-8) -> RegressionFit:
    """Project per-path values onto basis functions of B_{t_i}.

    At i = 0 the sigma-algebra is trivial and the plain sample mean is
    returned.  Rank-deficient designs fall back to a ridge solve with the
    configured epsilon on the per-feature-standardized design, flagged in
    the output.
    """
    return design_fit(build_design(bundle, time_index, basis, ridge), values)
