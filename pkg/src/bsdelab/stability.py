"""Desk-scale reproduction of the solution-stability limit theorems.

A perturbation family (xi^m, g^m) -> (xi^0, g^0) is solved on one shared
path bundle (common random numbers), and three families of distances are
tracked as the index m grows:

  metric_61        sup_t E|y^m_t - y^0_t|
  metric_62[beta]  E sup_t |dy|^beta + E (int |dz|^2 dt)^{beta/2},
                   beta in {1/4, 1/2, 3/4}
  metric_128       E sup_t |dy| + E (int |dz|^2 dt)^{1/2}

"Converges to zero" is operationalized against two reference scales,
because common random numbers make a literal re-solve reproduce the base
field exactly: the *floor* is the same problem re-solved on an independent
bundle and compared path-by-index (the distance scale at which coupled
differences are indistinguishable from independent sampling), and the
*standard errors* are those of the corresponding norm estimators applied
to the base solution (the Monte Carlo resolution of the functionals).
A metric's verdict is true when it is nonincreasing in m within 2 SE and
its final value is within 3 SE of the floor.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import BSDEProblem, SolutionField, jackknife_se
from .conditions import (SamplerConfig, check_H4, estimate_sup_conditional,
                         perturbation_distance)
from .errors import ConfigurationError, MalformedInputError, SolverDivergenceError
from .solver import SolveConfig, picard_solve
from .stochastic import PathBundle, simulate_paths

__all__ = [
    "PerturbationFamily",
    "StabilityReport",
    "run_stability",
    "run_stability_S1M1",
    "stability_metrics",
]

BETAS = (0.25, 0.5, 0.75)
FLOOR_SEED_MIX = 0x9E3779B97F4A7C15  # golden-ratio mix for the independent re-solve


@dataclass(frozen=True)
class PerturbationFamily:
    """Base problem plus index-parametrized terminals and generators.

    All perturbed generators must share the base's declared condition
    parameters, and |g^m - g^0| <= a_m must hold on the sample cloud;
    ``certify`` checks both.
    """

    base: BSDEProblem
    indices: tuple
    terminal_for: Callable = field(repr=False)
    generator_for: Callable = field(repr=False)
    a_m: dict = field(default_factory=dict)

    def __post_init__(self):
        idx = tuple(self.indices)
        if not idx or any(b <= a for a, b in zip(idx, idx[1:])):
            raise MalformedInputError("indices must be nonempty and increasing")
        object.__setattr__(self, "indices", idx)

    def problem_for(self, m: int) -> BSDEProblem:
        return BSDEProblem(terminal=self.terminal_for(m), horizon=self.base.horizon,
                           generator=self.generator_for(m), dims=self.base.dims)

    def certify(self, sampler: SamplerConfig = SamplerConfig(samples=6000)) -> dict:
        base_gen = self.base.generator
        shared = {}
        for m in self.indices:
            gen_m = self.generator_for(m)
            for attr in ("lam", "gamma", "alpha"):
                if getattr(gen_m, attr) != getattr(base_gen, attr):
                    raise MalformedInputError(
                        f"perturbed generator m={m} changes declared {attr}")
            if (gen_m.rho is None) != (base_gen.rho is None) or (
                    gen_m.rho is not None and gen_m.rho.name != base_gen.rho.name):
                raise MalformedInputError(
                    f"perturbed generator m={m} changes the declared modulus")
            dist = perturbation_distance(gen_m, base_gen, sampler)
            declared = float(self.a_m.get(m, 0.0))
            if dist > declared + 1e-9 * (1.0 + declared):
                raise MalformedInputError(
                    f"perturbation m={m}: sampled |g^m - g^0| = {dist:g} exceeds "
                    f"declared a_m = {declared:g}")
            shared[m] = dist
        return shared


def stability_metrics(field_m: SolutionField, field_0: SolutionField,
                      betas=BETAS, with_128: bool = False) -> dict:
    """Coupled distance metrics between two fields on the same bundle."""
    dy = np.linalg.norm(field_m.y_values - field_0.y_values, axis=2)  # (N+1, M)
    mean_t = dy.mean(axis=1)
    i_star = int(mean_t.argmax())
    out = {"metric_61": float(mean_t[i_star]),
           "metric_61_se": jackknife_se(dy[i_star])}

    sup_path = dy.max(axis=0)
    dz_sq = ((field_m.z_values[:-1] - field_0.z_values[:-1]) ** 2).sum(axis=(2, 3))
    zint = np.tensordot(field_0.grid.dt, dz_sq, axes=(0, 0))
    for b in betas:
        per_path = sup_path ** b + zint ** (b / 2.0)
        out[f"metric_62[{b:g}]"] = float(per_path.mean())
        out[f"metric_62[{b:g}]_se"] = jackknife_se(per_path)
    if with_128:
        per_path = sup_path + np.sqrt(zint)
        out["metric_128"] = float(per_path.mean())
        out["metric_128_se"] = jackknife_se(per_path)
    return out


def _scale_ses(field_0: SolutionField, betas=BETAS, with_128: bool = False) -> dict:
    """Monte Carlo resolution of each metric: the jackknife SE of the same
    functional applied to the base solution itself.

    For the sup-of-means metric the SE is taken as the largest per-time SE
    (the time-0 row is a plain sample mean, constant across paths, whose
    jackknife degenerates to zero).
    """
    ay = np.linalg.norm(field_0.y_values, axis=2)
    m = ay.shape[1]
    loo = (ay.sum(axis=1, keepdims=True) - ay) / (m - 1)
    per_time_se = np.sqrt((m - 1) / m * ((loo - loo.mean(axis=1, keepdims=True)) ** 2)
                          .sum(axis=1))
    out = {"metric_61": float(per_time_se.max())}
    sup_path = ay.max(axis=0)
    z_sq = (field_0.z_values[:-1] ** 2).sum(axis=(2, 3))
    zint = np.tensordot(field_0.grid.dt, z_sq, axes=(0, 0))
    for b in betas:
        out[f"metric_62[{b:g}]"] = jackknife_se(sup_path ** b + zint ** (b / 2.0))
    if with_128:
        out["metric_128"] = jackknife_se(sup_path + np.sqrt(zint))
    return out


@dataclass
class StabilityReport:
    indices: list
    metrics: dict            # metric name -> list of values per m
    standard_errors: dict    # metric name -> list of SEs per m
    floors: dict             # metric name -> independent re-solve distance
    scale_ses: dict          # metric name -> MC resolution of the functional
    verdicts: dict           # metric name -> bool
    annotations: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def all_verdicts_true(self) -> bool:
        return all(self.verdicts.values())


def _verdict(values, floor, scale_se) -> bool:
    mono = all(b <= a + 2.0 * scale_se for a, b in zip(values, values[1:]))
    return mono and values[-1] <= floor + 3.0 * scale_se


def _solve_many(problems, config, bundle, workers):
    """Independent per-problem solves on a shared immutable bundle.

    Results are folded in index order regardless of pool size, so reports
    are byte-identical for any worker count.
    """
    if workers is None or workers <= 1 or len(problems) <= 1:
        return [picard_solve(p, config, bundle) for p in problems]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(picard_solve, p, config, bundle) for p in problems]
        return [f.result() for f in futures]


def run_stability(family: PerturbationFamily, config: SolveConfig,
                  bundle: PathBundle, workers: Optional[int] = None,
                  certify: bool = True, with_128: bool = False,
                  sampler: SamplerConfig = SamplerConfig(samples=6000)) -> StabilityReport:
    """Solve the base and all perturbed problems on one bundle and measure
    the convergence metrics; see the module docstring for the verdict rule."""
    if certify:
        family.certify(sampler)

    field_0, _ = picard_solve(family.base, config, bundle)

    # the floor: same problem, independent bundle, paired by path index
    floor_bundle = simulate_paths(bundle.grid, family.base.dims, bundle.path_count,
                                  seed=(bundle.seed ^ FLOOR_SEED_MIX) % 2 ** 63)
    field_floor, _ = picard_solve(family.base, config, floor_bundle)
    floors_all = stability_metrics(field_floor, field_0, with_128=with_128)
    floors = {k: v for k, v in floors_all.items() if not k.endswith("_se")}
    scale_ses = _scale_ses(field_0, with_128=with_128)

    annotations = []
    results = {}
    problems, solvable = [], []
    for m in family.indices:
        problems.append(family.problem_for(m))
    try:
        solved = _solve_many(problems, config, bundle, workers)
        for m, (fld, _tr) in zip(family.indices, solved):
            results[m] = fld
    except SolverDivergenceError as exc:
        # fall back to sequential so the partial report names the offender
        results = {}
        for m, prob in zip(family.indices, problems):
            try:
                results[m], _ = picard_solve(prob, config, bundle)
            except SolverDivergenceError as exc_m:
                annotations.append(f"solver divergence at m={m}: {exc_m}")

    metric_names = list(floors)
    metrics = {name: [] for name in metric_names}
    ses = {name: [] for name in metric_names}
    solved_indices = [m for m in family.indices if m in results]
    for m in solved_indices:
        vals = stability_metrics(results[m], field_0, with_128=with_128)
        for name in metric_names:
            metrics[name].append(vals[name])
            ses[name].append(vals[name + "_se"])

    verdicts = {}
    for name in metric_names:
        if len(metrics[name]) != len(family.indices):
            verdicts[name] = False
        else:
            verdicts[name] = _verdict(metrics[name], floors[name], scale_ses[name])
    return StabilityReport(indices=list(solved_indices), metrics=metrics,
                           standard_errors=ses, floors=floors, scale_ses=scale_ses,
                           verdicts=verdicts, annotations=annotations)


def run_stability_S1M1(family: PerturbationFamily, config: SolveConfig,
                       bundle: PathBundle, workers: Optional[int] = None,
                       sampler: SamplerConfig = SamplerConfig(samples=6000)) -> StabilityReport:
    """Stability in the S^1 x M^1 norms: adds metric_128 and requires the
    sup-conditional integrability certificates up front."""
    rep_h4 = check_H4(family.base, bundle, config.basis)
    if rep_h4.verdict != "pass":
        raise ConfigurationError(
            f"(H4) does not hold for the base problem: verdict {rep_h4.verdict}")
    gaps = {}
    xi_0 = family.base.terminal(bundle)
    for m in family.indices:
        prob_m = family.problem_for(m)
        rep_m = check_H4(prob_m, bundle, config.basis)
        if rep_m.verdict != "pass":
            raise ConfigurationError(
                f"(H4) does not hold for perturbation m={m}: verdict {rep_m.verdict}")
        gap = np.linalg.norm(prob_m.terminal(bundle) - xi_0, axis=1)
        gaps[m], _se = estimate_sup_conditional(gap, bundle, config.basis)
    if len(gaps) >= 2:
        ms = sorted(gaps)
        if gaps[ms[-1]] > gaps[ms[0]] + 1e-9 * (1.0 + gaps[ms[0]]):
            raise ConfigurationError(
                "E[sup_t E[|xi^m - xi^0| | F_t]] is not decreasing along the family")

    report = run_stability(family, config, bundle, workers=workers,
                           with_128=True, sampler=sampler)
    report.extras["terminal_sup_gaps"] = gaps
    return report
