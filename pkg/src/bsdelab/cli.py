"""Batch front door: configure problems, run solves / checks / stability
sweeps / truncation ladders, emit CSV and JSON reports.

One JSON config file per run; any leaf may be overridden on the command
line by dotted path (--set numerics.seed=7).  Exit codes: 0 success,
2 configuration error, 3 solver divergence, 4 assumption-check failure,
5 stability verdict false.

Reports embed the parsed config echo, the seed and the artifact version;
rerunning a command with the same config and seed produces byte-identical
CSV/JSON for any worker count.  Wall-clock timings go to stderr (and into
the JSON only with --timing, since embedded timings would break the
byte-identity contract).
"""

from __future__ import annotations

import argparse
import copy
import inspect
import json
import math
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .catalog import GENERATOR_CATALOG, TERMINAL_CATALOG, make_terminal
from .conditions import (SamplerConfig, check_A_family, check_H1, check_H1a_H1b,
                         check_H2, check_H3, check_H4)
from .core import BSDEProblem, Dimensions, TerminalSpec, classD_diagnostic, estimate_norms
from .errors import (BsdeLabError, ConfigurationError, MalformedInputError,
                     SolverDivergenceError)
from .inequalities import MODULUS_REGISTRY, bihari_bound, bihari_transform, gronwall_bound
from .reports import (fmt, field_full_rows, field_summary_rows, ladder_rows,
                      stability_rows, trace_rows, write_csv, write_json)
from .solver import SolveConfig, picard_solve, solve_L1
from .stability import PerturbationFamily, run_stability, run_stability_S1M1
from .stochastic import RegressionBasis, TimeGrid, simulate_paths

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CHECK_FAILED = 4
EXIT_UNSTABLE = 5

WORKERS_ENV = "BSDELAB_WORKERS"

# schema: {key: (default, type)} with nested dicts; None type = any scalar
_SCHEMA = {
    "problem": {
        "generator": {"name": ("zero", str), "params": ({}, dict)},
        "terminal": {"name": ("constant", str), "params": ({}, dict)},
        "horizon": (1.0, float),
        "dims": {"k": (1, int), "d": (1, int)},
    },
    "numerics": {
        "n_steps": (100, int),
        "n_paths": (10_000, int),
        "seed": (1, int),
        "basis": {"kind": ("polynomial", str), "degree": (3, int), "bins": (8, int)},
        "ridge": (1e-8, float),
        "c_split": (None, float),
        "picard": {"max_iter": (40, int), "tol": (1e-7, float), "z_init": (0.0, float)},
        "inner": {"max_iter": (60, int), "damping": (0.5, float)},
        "truncation_ladder": ([2, 4, 8, 16, 32, 64], list),
    },
    "experiment": {
        "betas": ([0.25, 0.5, 0.75, 1.0], list),
        "thresholds": ([1.0, 2.0, 4.0], list),
        "assumptions": ([], list),
        "p": (2.0, float),
        "sampler": {"samples": (100_000, int), "seed": (20240, int),
                    "t_max": (1.0, float)},
        "stability": {"kind": ("identity", str), "indices": ([1, 2, 4, 8, 16], list),
                      "magnitude": (1.0, float), "s1m1": (False, bool)},
        "bihari": {"u0": (1.0, float), "tau": (1.0, float),
                   "modulus": {"name": ("linear", str), "params": ({}, dict)}},
    },
    "output": {
        "csv": (None, str),
        "json": (None, str),
        "text": (None, str),
        "field_csv": (None, str),
        "trace_csv": (None, str),
    },
}


def _validate(node, schema, path=""):
    if not isinstance(node, dict):
        raise ConfigurationError(f"{path or 'config'}: expected an object")
    out = {}
    for key, value in node.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigurationError(f"unknown key {where!r}")
        spec = schema[key]
        if isinstance(spec, dict) and not isinstance(spec, tuple):
            out[key] = _validate(value, spec, where)
            continue
        default, typ = spec
        if value is None:
            out[key] = None
        elif typ is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigurationError(f"{where}: expected a number")
            out[key] = float(value)
        elif typ is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigurationError(f"{where}: expected an integer")
            out[key] = value
        elif typ is bool:
            if not isinstance(value, bool):
                raise ConfigurationError(f"{where}: expected a boolean")
            out[key] = value
        elif typ is str:
            if not isinstance(value, str):
                raise ConfigurationError(f"{where}: expected a string")
            out[key] = value
        elif typ is list:
            if not isinstance(value, list):
                raise ConfigurationError(f"{where}: expected a list")
            out[key] = value
        elif typ is dict:
            if not isinstance(value, dict):
                raise ConfigurationError(f"{where}: expected an object")
            out[key] = value
        else:
            out[key] = value
    # fill defaults
    for key, spec in schema.items():
        if key in out:
            continue
        if isinstance(spec, dict) and not isinstance(spec, tuple):
            out[key] = _validate({}, spec, f"{path}.{key}" if path else key)
        else:
            out[key] = copy.deepcopy(spec[0])
    return out


def parse_config(raw: dict) -> dict:
    """Validate and normalize a raw config; round-trips through JSON."""
    return _validate(raw, _SCHEMA)


def _apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigurationError(f"--set needs key=value, got {assignment!r}")
    key, _, text = assignment.partition("=")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigurationError(f"--set: no such config section {key!r}")
        node = node[part]
    node[parts[-1]] = value


def _build_generator(cfg: dict):
    name = cfg["problem"]["generator"]["name"]
    params = dict(cfg["problem"]["generator"]["params"])
    dims = cfg["problem"]["dims"]
    entry = GENERATOR_CATALOG.get(name)
    if entry is None:
        raise ConfigurationError(f"problem.generator.name: unknown generator {name!r}")
    declared_overrides = {key: params.pop(key) for key in ("lam", "gamma", "alpha", "pbar")
                          if key in params}
    sig = inspect.signature(entry.factory)
    for key in ("k", "d"):
        if key in sig.parameters and key not in params:
            params[key] = dims[key]
    unknown = set(params) - set(sig.parameters)
    if unknown:
        raise ConfigurationError(
            f"problem.generator.params: unknown key {sorted(unknown)[0]!r} "
            f"for generator {name!r}")
    gen = entry.factory(**params)
    if declared_overrides:
        gen = replace(gen, **declared_overrides)
    if gen.dims.k != dims["k"] or gen.dims.d != dims["d"]:
        raise ConfigurationError(
            f"problem.dims: generator {name!r} has dims (k={gen.dims.k}, "
            f"d={gen.dims.d}), config says (k={dims['k']}, d={dims['d']})")
    return gen


def _build_problem(cfg: dict) -> BSDEProblem:
    gen = _build_generator(cfg)
    dims = Dimensions(k=cfg["problem"]["dims"]["k"], d=cfg["problem"]["dims"]["d"])
    tname = cfg["problem"]["terminal"]["name"]
    if tname not in TERMINAL_CATALOG:
        raise ConfigurationError(f"problem.terminal.name: unknown terminal {tname!r}")
    terminal = make_terminal(tname, k=dims.k, **cfg["problem"]["terminal"]["params"])
    return BSDEProblem(terminal=terminal, horizon=cfg["problem"]["horizon"],
                       generator=gen, dims=dims)


def _build_numerics(cfg: dict) -> SolveConfig:
    num = cfg["numerics"]
    basis = RegressionBasis(kind=num["basis"]["kind"], degree=num["basis"]["degree"],
                            bins=num["basis"]["bins"])
    return SolveConfig(n_steps=num["n_steps"], n_paths=num["n_paths"], basis=basis,
                       ridge=num["ridge"], picard_max_iter=num["picard"]["max_iter"],
                       picard_tol=num["picard"]["tol"], z_init=num["picard"]["z_init"],
                       c_split=num["c_split"], inner_max_iter=num["inner"]["max_iter"],
                       damping=num["inner"]["damping"])


def _build_bundle(cfg: dict, problem: BSDEProblem):
    grid = TimeGrid.uniform(problem.horizon, cfg["numerics"]["n_steps"])
    return simulate_paths(grid, problem.dims, cfg["numerics"]["n_paths"],
                          seed=cfg["numerics"]["seed"])


def _report_skeleton(cfg: dict) -> dict:
    return {"config": cfg, "seed": cfg["numerics"]["seed"], "version": __version__}


def _sampler(cfg: dict) -> SamplerConfig:
    s = cfg["experiment"]["sampler"]
    return SamplerConfig(samples=s["samples"], seed=s["seed"], t_max=s["t_max"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_solve(cfg: dict, args) -> int:
    problem = _build_problem(cfg)
    numerics = _build_numerics(cfg)
    bundle = _build_bundle(cfg, problem)
    t0 = time.perf_counter()
    field, trace = picard_solve(problem, numerics, bundle)
    wall = time.perf_counter() - t0

    betas = [float(b) for b in cfg["experiment"]["betas"]]
    norms = estimate_norms(field, betas)
    classd = classD_diagnostic(field, cfg["experiment"]["thresholds"])

    report = _report_skeleton(cfg)
    report.update({
        "delta_T": field.metadata["delta_T"],
        "subintervals": field.metadata["subintervals"],
        "picard_trace": list(trace_rows(trace, with_seconds=False)),
        "norms": {
            "s_beta": {fmt(b): v for b, v in norms.s_beta.items()},
            "m_beta": {fmt(b): v for b, v in norms.m_beta.items()},
            "s_beta_se": {fmt(b): v for b, v in norms.s_beta_se.items()},
            "m_beta_se": {fmt(b): v for b, v in norms.m_beta_se.items()},
            "sup_mean_abs": norms.sup_mean_abs,
            "sup_mean_abs_se": norms.sup_mean_abs_se,
            "classD_proxy": norms.classD_proxy,
        },
        "classD": {fmt(u): v for u, v in classd.values.items()},
    })
    gen = problem.generator
    if gen.oracle is not None:
        try:
            y_true, z_true = gen.oracle(problem, bundle)
            report["oracle_error_y0"] = float(
                abs(field.y_values[0, 0] - y_true[0, 0]).max())
            report["oracle_error_z_mean_abs"] = float(
                np.abs(field.z_values[:-1] - z_true[:-1]).mean())
        except ConfigurationError:
            pass
    if args.timing:
        report["timing"] = {"wall_seconds": wall}

    out = cfg["output"]
    if out["csv"]:
        write_csv(out["csv"], ["time", "mean_abs_y", "std_abs_y", "mean_abs_z"],
                  field_summary_rows(field))
    if out["field_csv"]:
        k, d = problem.dims.k, problem.dims.d
        header = (["time", "path"] + [f"y{c}" for c in range(k)]
                  + [f"z{c}{j}" for c in range(k) for j in range(d)])
        write_csv(out["field_csv"], header, field_full_rows(field))
    if out["trace_csv"]:
        write_csv(out["trace_csv"],
                  ["subinterval", "iteration", "sup_mean_abs_dy", "s_half_dy",
                   "m_half_dz", "seconds"], trace_rows(trace))
    if out["json"]:
        write_json(out["json"], report)
    print(f"solve: deltaT={fmt(field.metadata['delta_T'])} "
          f"subintervals={field.metadata['subintervals']} "
          f"iterations={len(trace.rows)}", file=sys.stderr)
    print(f"wall: {wall:.3f}s", file=sys.stderr)
    return EXIT_OK


_CHECKS_NEEDING_MODULUS = {"H1", "H1a_p", "H1b_p"}


def cmd_check(cfg: dict, args) -> int:
    assumptions = cfg["experiment"]["assumptions"]
    if not assumptions:
        raise ConfigurationError("experiment.assumptions: empty assumption list")
    problem = _build_problem(cfg)
    gen = problem.generator
    sampler = _sampler(cfg)
    p = cfg["experiment"]["p"]

    t0 = time.perf_counter()
    reports = []
    for name in assumptions:
        if name == "H1":
            reports.append(check_H1(gen, sampler))
        elif name == "H2":
            reports.append(check_H2(gen, sampler))
        elif name == "H3":
            reports.append(check_H3(gen, sampler))
        elif name in ("H1a_p", "H1b_p"):
            variant = "a" if name == "H1a_p" else "b"
            p_used = gen.pbar if gen.pbar is not None else p
            reports.append(check_H1a_H1b(gen, p_used, variant, sampler))
        elif name == "H4":
            numerics = _build_numerics(cfg)
            bundle = _build_bundle(cfg, problem)
            reports.append(check_H4(problem, bundle, numerics.basis))
        elif name in ("A1", "A2", "A3"):
            reports.append(check_A_family(gen, name, p, params={}, sampler_config=sampler))
        else:
            raise ConfigurationError(
                f"experiment.assumptions: unknown assumption {name!r}")
    wall = time.perf_counter() - t0

    report = _report_skeleton(cfg)
    report["checks"] = {r.assumption: {"verdict": r.verdict,
                                       "worst_slack": r.worst_slack,
                                       "diagnostics": r.diagnostics}
                        for r in reports}
    if args.timing:
        report["timing"] = {"wall_seconds": wall}
    out = cfg["output"]
    if out["text"]:
        with open(out["text"], "w") as fh:
            for r in reports:
                fh.write(r.to_text())
                fh.write("\n")
    if out["json"]:
        write_json(out["json"], report)
    for r in reports:
        print(f"check {r.assumption}: {r.verdict}", file=sys.stderr)
    print(f"wall: {wall:.3f}s", file=sys.stderr)
    return EXIT_OK if all(r.verdict == "pass" for r in reports) else EXIT_CHECK_FAILED


def _stability_family(cfg: dict, problem: BSDEProblem) -> PerturbationFamily:
    spec = cfg["experiment"]["stability"]
    kind = spec["kind"]
    indices = tuple(int(m) for m in spec["indices"])
    mag = float(spec["magnitude"])
    base_term = problem.terminal
    base_gen = problem.generator

    def shifted_terminal(m, shift):
        def fn(bundle, s=shift):
            vals = base_term(bundle).copy()
            vals[:, 0] += s
            return vals
        return TerminalSpec(name=f"{base_term.name}+{fmt(shift)}", k=base_term.k,
                            fn=fn, params={**base_term.params, "shift": shift})

    def scaled_terminal(m, factor):
        return TerminalSpec(name=f"{base_term.name}*{fmt(factor)}", k=base_term.k,
                            fn=lambda bundle, f=factor: base_term(bundle) * f,
                            params={**base_term.params, "scale": factor})

    def offset_generator(m, offset):
        def evaluate(t, y, z, b, g=base_gen, off=offset):
            vals = np.asarray(g.evaluate(t, y, z, b), dtype=np.float64)
            if vals.ndim == 1:
                vals = vals[:, None]
            vals = vals.copy()
            vals[:, 0] += off
            return vals
        return replace(base_gen, name=f"{base_gen.name}+{fmt(offset)}",
                       evaluate=evaluate)

    if kind == "identity":
        return PerturbationFamily(base=problem, indices=indices,
                                  terminal_for=lambda m: base_term,
                                  generator_for=lambda m: base_gen,
                                  a_m={m: 0.0 for m in indices})
    if kind == "terminal_shift":
        return PerturbationFamily(base=problem, indices=indices,
                                  terminal_for=lambda m: shifted_terminal(m, mag / m),
                                  generator_for=lambda m: base_gen,
                                  a_m={m: 0.0 for m in indices})
    if kind == "scale_and_offset":
        return PerturbationFamily(base=problem, indices=indices,
                                  terminal_for=lambda m: scaled_terminal(m, 1.0 + mag / m),
                                  generator_for=lambda m: offset_generator(m, mag / m),
                                  a_m={m: mag / m for m in indices})
    if kind == "growing_shift":
        return PerturbationFamily(base=problem, indices=indices,
                                  terminal_for=lambda m: shifted_terminal(m, mag * m),
                                  generator_for=lambda m: base_gen,
                                  a_m={m: 0.0 for m in indices})
    raise ConfigurationError(f"experiment.stability.kind: unknown kind {kind!r}")


def cmd_stability(cfg: dict, args) -> int:
    problem = _build_problem(cfg)
    numerics = _build_numerics(cfg)
    bundle = _build_bundle(cfg, problem)
    family = _stability_family(cfg, problem)
    sampler = _sampler(cfg)
    sampler = SamplerConfig(samples=min(sampler.samples, 6000), seed=sampler.seed,
                            t_max=sampler.t_max)
    t0 = time.perf_counter()
    runner = run_stability_S1M1 if cfg["experiment"]["stability"]["s1m1"] else run_stability
    rep = runner(family, numerics, bundle, workers=args.workers, sampler=sampler)
    wall = time.perf_counter() - t0

    report = _report_skeleton(cfg)
    report.update({
        "indices": rep.indices,
        "metrics": rep.metrics,
        "standard_errors": rep.standard_errors,
        "floors": rep.floors,
        "scale_ses": rep.scale_ses,
        "verdicts": rep.verdicts,
        "annotations": rep.annotations,
        "extras": rep.extras,
    })
    if args.timing:
        report["timing"] = {"wall_seconds": wall}
    out = cfg["output"]
    if out["csv"]:
        write_csv(out["csv"], ["m", "metric", "value", "standard_error"],
                  stability_rows(rep))
    if out["json"]:
        write_json(out["json"], report)
    for name, verdict in sorted(rep.verdicts.items()):
        print(f"stability {name}: {'ok' if verdict else 'NOT CONVERGING'}",
              file=sys.stderr)
    print(f"wall: {wall:.3f}s", file=sys.stderr)
    return EXIT_OK if rep.all_verdicts_true else EXIT_UNSTABLE


def cmd_truncate_study(cfg: dict, args) -> int:
    problem = _build_problem(cfg)
    numerics = _build_numerics(cfg)
    bundle = _build_bundle(cfg, problem)
    ladder = [int(n) for n in cfg["numerics"]["truncation_ladder"]]
    t0 = time.perf_counter()
    field, diag = solve_L1(problem, numerics, bundle, ladder=ladder)
    wall = time.perf_counter() - t0

    report = _report_skeleton(cfg)
    report.update({
        "levels": diag.levels,
        "distances": diag.distances,
        "nonincreasing": diag.nonincreasing,
        "delta_T": field.metadata["delta_T"],
    })
    if args.timing:
        report["timing"] = {"wall_seconds": wall}
    out = cfg["output"]
    if out["csv"]:
        write_csv(out["csv"], ["level_from", "level_to", "metric", "value",
                               "standard_error"], ladder_rows(diag))
    if out["json"]:
        write_json(out["json"], report)
    print(f"truncate-study: levels={diag.levels} "
          f"nonincreasing={diag.nonincreasing}", file=sys.stderr)
    print(f"wall: {wall:.3f}s", file=sys.stderr)
    return EXIT_OK


def cmd_bihari(cfg: dict, args) -> int:
    spec = cfg["experiment"]["bihari"]
    name = spec["modulus"]["name"]
    if name not in MODULUS_REGISTRY:
        raise ConfigurationError(f"experiment.bihari.modulus.name: unknown {name!r}")
    modulus = MODULUS_REGISTRY[name](**spec["modulus"]["params"])
    u0, tau = float(spec["u0"]), float(spec["tau"])
    bound = bihari_bound(u0, modulus, tau)
    report = _report_skeleton(cfg)
    report.update({
        "u0": u0, "tau": tau, "modulus": {"name": name,
                                          "params": spec["modulus"]["params"]},
        "bihari_bound": bound,
        "transform_at_u0": bihari_transform(modulus, u0) if u0 > 0 else None,
        "gronwall_with_A": gronwall_bound(u0, modulus.linear_constant, tau),
    })
    if cfg["output"]["json"]:
        write_json(cfg["output"]["json"], report)
    print(f"bihari_bound({fmt(u0)}, {name}, {fmt(tau)}) = {fmt(bound)}")
    return EXIT_OK


def cmd_list_generators(cfg, args) -> int:
    listing = {"generators": {name: {"params": entry.param_schema,
                                     "expected_verdicts": entry.expected_verdicts,
                                     "description": entry.description}
                              for name, entry in sorted(GENERATOR_CATALOG.items())},
               "terminals": dict(sorted(TERMINAL_CATALOG.items())),
               "version": __version__}
    json.dump(listing, sys.stdout, sort_keys=True, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


_COMMANDS = {
    "solve": cmd_solve,
    "check": cmd_check,
    "stability": cmd_stability,
    "truncate-study": cmd_truncate_study,
    "bihari": cmd_bihari,
    "list-generators": cmd_list_generators,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsdelab",
        description="Monte Carlo lab for backward SDEs with one-sided Osgood "
                    "generators")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        if name != "list-generators":
            p.add_argument("--config", required=(name != "bihari"),
                           help="JSON run configuration")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config leaf by dotted path")
        p.add_argument("--workers", type=int,
                       default=int(os.environ.get(WORKERS_ENV, "1")),
                       help=f"worker pool size (default ${WORKERS_ENV} or 1)")
        p.add_argument("--timing", action="store_true",
                       help="embed wall time in the JSON report (breaks "
                            "byte-identity across reruns)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list-generators":
            return cmd_list_generators(None, args)
        if getattr(args, "config", None):
            with open(args.config) as fh:
                raw = json.load(fh)
        else:
            raw = {}
        for assignment in getattr(args, "set", []):
            _apply_override(raw, assignment)
        cfg = parse_config(raw)
        return _COMMANDS[args.command](cfg, args)
    except json.JSONDecodeError as exc:
        print(f"config error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, MalformedInputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverDivergenceError as exc:
        print(f"solver divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except BsdeLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
