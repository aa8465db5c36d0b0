"""Built-in generators and terminal conditions.

Two nonlinear showcase generators exercise the one-sided Osgood machinery
end to end; a linear family carries closed-form solutions for oracle
comparisons; three designed violators calibrate the condition checkers
(each fails exactly the assumption documented in its catalog entry).

Piecewise drift profile used by both showcase generators, with junction
delta < 1/e:

    profile(x) = -x |ln x|^q        on (0, delta]
                 tangent line       beyond delta
                 0                  at x = 0
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Dimensions, TerminalSpec
from .conditions import GeneratorSpec, TimeSingularity
from .errors import ConfigurationError
from .inequalities import DIVERGES, Modulus, modulus_linear, modulus_xlog

__all__ = [
    "make_example1",
    "make_example2",
    "make_linear",
    "make_zero",
    "make_quadratic_z",
    "make_quadratic_y",
    "make_step_y",
    "make_cubic_decay",
    "make_sqrt_drift",
    "make_sine_z",
    "make_terminal",
    "CatalogEntry",
    "GENERATOR_CATALOG",
    "TERMINAL_CATALOG",
]

_E_INV = math.exp(-1.0)
_DEFAULT_DELTA = math.exp(-2.0)
_EXP_CLAMP = 700.0  # exp argument cap; keeps float64 finite, preserves monotonicity


def _exp(x):
    return np.exp(np.minimum(x, _EXP_CLAMP))


def _xlog_pow(x, q):
    """x |ln x|^q for x > 0, 0 at 0 (vectorized, no warnings)."""
    x = np.asarray(x, dtype=np.float64)
    safe = np.where(x > 0, x, 1.0)
    return np.where(x > 0, x * np.abs(np.log(safe)) ** q, 0.0)


def _profile_neg(x, delta, q):
    """-x |ln x|^q on (0, delta], tangent continuation beyond, 0 at 0."""
    slope = -(np.abs(np.log(delta)) ** q - q * np.abs(np.log(delta)) ** (q - 1.0))
    at_delta = -_xlog_pow(delta, q)
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= delta, -_xlog_pow(x, q), at_delta + slope * (x - delta))


def _profile_abs_modulus(delta: float, q: float, scale: float, name: str) -> Modulus:
    """scale * x |ln x|^q with tangent continuation: concave, nondecreasing,
    vanishing at 0, with int_{0+} du/rho = +infinity for q <= 1."""
    slope = scale * (np.abs(np.log(delta)) ** q - q * np.abs(np.log(delta)) ** (q - 1.0))
    at_delta = scale * _xlog_pow(delta, q)

    def ev(u, d=delta, s=scale, sl=slope, ad=at_delta, qq=q):
        u = np.asarray(u, dtype=np.float64)
        return np.where(u <= d, s * _xlog_pow(u, qq), ad + sl * (u - d))

    return Modulus(evaluator=ev, linear_constant=float(slope + at_delta),
                   divergence_flag=DIVERGES, name=name,
                   params={"delta": delta, "q": q, "scale": scale})


def _power_composed_modulus(base: Modulus, p: float, name: str) -> Modulus:
    """varrho(v) = base(v^{1/p})^p, the p-order companion of a first-order
    modulus: varrho^{1/p}(|dy|^p) = base(|dy|) exactly."""

    def ev(v, b=base, pp=p):
        v = np.asarray(v, dtype=np.float64)
        return np.asarray(b(v ** (1.0 / pp)), dtype=np.float64) ** pp

    ladder = np.geomspace(1e-12, 1e9, 128)
    lin = float(np.max(ev(ladder) / (ladder + 1.0))) * (1.0 + 1e-9)
    return Modulus(evaluator=ev, linear_constant=lin, divergence_flag=DIVERGES,
                   name=name, params={"p": p, "base": base.name})


# ---------------------------------------------------------------------------
# showcase generators
# ---------------------------------------------------------------------------

def make_example1(delta: float = _DEFAULT_DELTA, d: int = 1) -> GeneratorSpec:
    """Scalar generator combining a log-modulated drift near zero, an
    exponentially steep monotone-decreasing term, a bounded oscillation in z
    and an integrable time singularity:

        g = profile(|y|) - exp(|B_t| y) + (exp(-y) ^ 1) sin|z| + t^{-1/2} 1{t>0}

    The time singularity integrates exactly per step: the solver uses
    2(sqrt(t1) - sqrt(t0)) instead of the left-endpoint value, which would
    diverge at t = 0.
    """
    if not (0.0 < delta < _E_INV):
        raise ConfigurationError(f"example1: delta = {delta} outside (0, 1/e)")
    dims = Dimensions(k=1, d=d)

    def evaluate(t, y, z, b):
        t = np.asarray(t, dtype=np.float64)
        ys = y[:, 0]
        babs = np.linalg.norm(np.atleast_2d(b), axis=1)
        zn = np.linalg.norm(z.reshape(z.shape[0], -1), axis=1)
        drift = _profile_neg(np.abs(ys), delta, 1.0)
        steep = -_exp(babs * ys)
        osc = np.exp(-np.maximum(ys, 0.0)) * np.sin(zn)
        with np.errstate(divide="ignore"):
            sing = np.where(t > 0, 1.0 / np.sqrt(np.where(t > 0, t, 1.0)), 0.0)
        return (drift + steep + osc + sing)[:, None]

    singular = TimeSingularity(
        value=lambda t: (1.0 / math.sqrt(t)) if t > 0 else 0.0,
        integral=lambda t0, t1: 2.0 * (math.sqrt(t1) - math.sqrt(t0)))

    return GeneratorSpec(
        name="example1", dims=dims, evaluate=evaluate, z_independent=False,
        lam=1.0, gamma=1.0, alpha=0.25,
        rho=_profile_abs_modulus(delta, 1.0, 1.0, "xlog"),
        g_process=lambda t, b: np.ones(np.atleast_2d(b).shape[0]),
        singular=singular, params={"delta": delta, "d": d})


def make_example2(p: float = 2.0, delta: float = _DEFAULT_DELTA,
                  k: int = 2, d: int = 2) -> GeneratorSpec:
    """Componentwise generator with a shared log-modulated drift and a
    capped power growth in z:

        g_i = exp(-y_i) + profile_q(|y|) + (|z|^2 ^ |z|^{2/3}) + |B_t|

    with q = 1/p.  Declared to satisfy the p-order one-sided Mao condition
    with modulus varrho(v) = (sqrt(k) * profile_abs(v^{1/p}))^p.  The z-term
    min(r^2, r^{2/3}) has sharp Lipschitz constant 2 (attained as r -> 1)
    and enters every component, so the declared constants carry a sqrt(k):
    lam = 2 sqrt(k), gamma = sqrt(k).
    """
    if p <= 1.0:
        raise ConfigurationError(f"example2: p = {p} must exceed 1")
    if not (0.0 < delta < _E_INV):
        raise ConfigurationError(f"example2: delta = {delta} outside (0, 1/e)")
    dims = Dimensions(k=k, d=d)
    q = 1.0 / p

    def evaluate(t, y, z, b):
        yn = np.linalg.norm(y, axis=1)
        zn = np.linalg.norm(z.reshape(z.shape[0], -1), axis=1)
        babs = np.linalg.norm(np.atleast_2d(b), axis=1)
        common = _profile_neg(yn, delta, q) + np.minimum(zn ** 2, zn ** (2.0 / 3.0)) + babs
        return _exp(-y) + common[:, None]

    base = _profile_abs_modulus(delta, q, math.sqrt(k), "xlog-pow")
    return GeneratorSpec(
        name="example2", dims=dims, evaluate=evaluate, z_independent=False,
        lam=2.0 * math.sqrt(k), gamma=math.sqrt(k), alpha=2.0 / 3.0,
        rho=base, pbar=p,
        rho_p=_power_composed_modulus(base, p, "xlog-pow-composed"),
        params={"p": p, "delta": delta, "k": k, "d": d})


# ---------------------------------------------------------------------------
# linear family with closed-form oracle
# ---------------------------------------------------------------------------

def _linear_oracle(a: float, b: float, c: float):
    """Closed forms for g = a y + b sum_j z_j + c at k = d = 1.

    With u(t) = exp(a (T - t)) and tau = T - t:
      xi constant:  y = u xi + c I(tau),          z = 0
      xi = B_T:     y = u B_t + b tau u + c I,    z = u
      xi = B_T^2:   y = u (B_t^2 + b tau)^... see below, z = u (2 B_t + 2 b tau)
    where I(tau) = (exp(a tau) - 1)/a (tau at a = 0).
    """

    def integral_c(tau):
        return tau if a == 0.0 else (np.exp(a * tau) - 1.0) / a

    def oracle(problem, bundle):
        times = bundle.grid.times
        tau = problem.horizon - times
        u = np.exp(a * tau)[:, None]
        bt = bundle.cumulative[:, :, 0]
        name = problem.terminal.name
        if name == "constant":
            xi = problem.terminal.params["value"]
            y = u * xi + c * integral_c(tau)[:, None]
            z = np.zeros_like(bt)
        elif name == "bm":
            y = u * bt + (b * tau * np.exp(a * tau) + c * integral_c(tau))[:, None]
            z = np.broadcast_to(u, bt.shape).copy()
        elif name == "bm_squared":
            y = u * (bt + b * tau[:, None]) ** 2 + u * tau[:, None] \
                + (c * integral_c(tau))[:, None]
            z = u * 2.0 * (bt + b * tau[:, None])
        else:
            raise ConfigurationError(
                f"linear oracle supports terminals constant/bm/bm_squared, "
                f"not {name!r}")
        return y[:, :, None], z[:, :, None, None]

    return oracle


def make_linear(a: float = 0.0, b: float = 0.0, c: float = 0.0,
                k: int = 1, d: int = 1) -> GeneratorSpec:
    """g(t, y, z) = a y + b (row sums of z) + c, with a closed-form oracle
    attached when k = d = 1."""
    for nm, v in (("a", a), ("b", b), ("c", c)):
        if not np.isfinite(v):
            raise ConfigurationError(f"linear: coefficient {nm} must be finite")
    dims = Dimensions(k=k, d=d)

    def evaluate(t, y, z, bb):
        return a * y + b * z.sum(axis=2) + c

    oracle = _linear_oracle(a, b, c) if (k == 1 and d == 1) else None
    return GeneratorSpec(
        name="linear", dims=dims, evaluate=evaluate,
        z_independent=(b == 0.0), lam=abs(b) * math.sqrt(d), gamma=max(abs(b), 1.0),
        alpha=0.25, rho=modulus_linear(max(abs(a), 1.0)), oracle=oracle,
        params={"a": a, "b": b, "c": c, "k": k, "d": d})


def make_zero(k: int = 1, d: int = 1) -> GeneratorSpec:
    return GeneratorSpec(
        name="zero", dims=Dimensions(k=k, d=d),
        evaluate=lambda t, y, z, b: np.zeros_like(y), z_independent=True,
        lam=0.0, gamma=0.0, alpha=0.25, rho=modulus_linear(1.0),
        params={"k": k, "d": d})


# ---------------------------------------------------------------------------
# designed violators and small helpers for checker calibration
# ---------------------------------------------------------------------------

def make_quadratic_z(k: int = 1, d: int = 1, lam: float = 1.0) -> GeneratorSpec:
    """g = |z|^2: quadratic growth beats any declared z-Lipschitz constant."""
    return GeneratorSpec(
        name="quadratic_z", dims=Dimensions(k=k, d=d),
        evaluate=lambda t, y, z, b: np.broadcast_to(
            (z.reshape(z.shape[0], -1) ** 2).sum(axis=1)[:, None], y.shape).copy(),
        lam=lam, gamma=1.0, alpha=0.5, rho=modulus_linear(1.0),
        params={"k": k, "d": d, "lam": lam})


def make_quadratic_y() -> GeneratorSpec:
    """g = y^2 (k=1): superlinear drift violating every concave one-sided bound."""
    return GeneratorSpec(
        name="quadratic_y", dims=Dimensions(k=1, d=1),
        evaluate=lambda t, y, z, b: y ** 2, z_independent=True,
        lam=0.0, gamma=1.0, alpha=0.25, rho=modulus_xlog(),
        kappa_p=modulus_xlog(), params={})


def make_step_y() -> GeneratorSpec:
    """g = 1{y >= 0} (k=1): the jump at 0 breaks continuity in y.

    No Osgood modulus is declared: the entry documents only its continuity
    failure, and check_H1 refuses to run without a modulus.
    """
    return GeneratorSpec(
        name="step_y", dims=Dimensions(k=1, d=1),
        evaluate=lambda t, y, z, b: (y >= 0.0).astype(np.float64),
        z_independent=True, lam=0.0, gamma=1.0, alpha=0.25, params={})


def make_cubic_decay() -> GeneratorSpec:
    """g = -y^3 (k=1): monotone decreasing, passes (H1) with any valid modulus."""
    return GeneratorSpec(
        name="cubic_decay", dims=Dimensions(k=1, d=1),
        evaluate=lambda t, y, z, b: -y ** 3, z_independent=True,
        lam=0.0, gamma=1.0, alpha=0.25, rho=modulus_linear(1.0),
        kappa_p=modulus_linear(1.0), params={})


def make_sqrt_drift() -> GeneratorSpec:
    """g = sqrt(|y|) sign(y) (k=1): unbounded difference quotient near 0."""
    return GeneratorSpec(
        name="sqrt_drift", dims=Dimensions(k=1, d=1),
        evaluate=lambda t, y, z, b: np.sqrt(np.abs(y)) * np.sign(y),
        z_independent=True, lam=0.0, gamma=1.0, alpha=0.25,
        rho=modulus_linear(1.0), params={})


def make_sine_z(k: int = 1, d: int = 1) -> GeneratorSpec:
    """g = sin|z|: 1-Lipschitz and bounded in z."""
    return GeneratorSpec(
        name="sine_z", dims=Dimensions(k=k, d=d),
        evaluate=lambda t, y, z, b: np.broadcast_to(
            np.sin(np.linalg.norm(z.reshape(z.shape[0], -1), axis=1))[:, None],
            y.shape).copy(),
        lam=1.0, gamma=1.0, alpha=0.5,
        g_process=lambda t, b: np.ones(np.atleast_2d(b).shape[0]),
        rho=modulus_linear(1.0), params={"k": k, "d": d})


# ---------------------------------------------------------------------------
# terminal conditions
# ---------------------------------------------------------------------------

def _scalar_terminal(name, k, fn, params):
    """Broadcast a scalar path functional to all k components."""
    return TerminalSpec(name=name, k=k,
                        fn=lambda bundle: np.repeat(fn(bundle)[:, None], k, axis=1),
                        params=params)


def make_terminal(name: str, k: int = 1, **params) -> TerminalSpec:
    from scipy.special import ndtr

    if name == "constant":
        value = float(params.get("value", 0.0))
        return _scalar_terminal(name, k, lambda bundle: np.full(bundle.path_count, value),
                                {"value": value})
    if name == "bm":
        return _scalar_terminal(name, k, lambda bundle: bundle.cumulative[-1][:, 0], {})
    if name == "bm_squared":
        return _scalar_terminal(name, k,
                                lambda bundle: bundle.cumulative[-1][:, 0] ** 2, {})
    if name == "abs_bm":
        return _scalar_terminal(name, k,
                                lambda bundle: np.abs(bundle.cumulative[-1][:, 0]), {})
    if name == "abs_bm_capped":
        cap = float(params.get("cap", 5.0))
        if cap <= 0:
            raise ConfigurationError("abs_bm_capped: cap must be positive")
        return _scalar_terminal(
            name, k,
            lambda bundle: np.minimum(np.abs(bundle.cumulative[-1][:, 0]), cap),
            {"cap": cap})
    if name == "pareto":
        tail = float(params.get("tail", 1.5))
        if tail <= 1.0:
            raise ConfigurationError("pareto: tail must exceed 1 so E|xi| is finite")

        def fn(bundle, tt=tail):
            bt = bundle.cumulative[-1][:, 0]
            u = ndtr(bt / math.sqrt(bundle.grid.horizon))
            return np.maximum(1.0 - u, 1e-16) ** (-1.0 / tt)

        return _scalar_terminal(name, k, fn, {"tail": tail})
    if name == "exp_bm_squared":
        coef = float(params.get("coef", 0.25))
        return _scalar_terminal(
            name, k,
            lambda bundle: np.exp(coef * bundle.cumulative[-1][:, 0] ** 2), {"coef": coef})
    if name == "heavy_loglog":
        # E|xi| finite but E[xi ln+ xi] infinite: the canonical terminal whose
        # running conditional expectation has non-integrable supremum
        def fn(bundle):
            bt = bundle.cumulative[-1][:, 0]
            tt = bundle.grid.horizon
            return np.exp(bt ** 2 / (2.0 * tt)) / (1.0 + bt ** 2 / tt)

        return _scalar_terminal(name, k, fn, {})
    raise ConfigurationError(f"unknown terminal {name!r}")


# ---------------------------------------------------------------------------
# catalog registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CatalogEntry:
    """A generator factory with its documented checker verdicts."""

    name: str
    factory: Callable = field(repr=False)
    param_schema: dict = field(default_factory=dict)
    expected_verdicts: dict = field(default_factory=dict)
    description: str = ""


GENERATOR_CATALOG = {
    "example1": CatalogEntry(
        name="example1", factory=make_example1,
        param_schema={"delta": "float in (0, 1/e), default exp(-2)",
                      "d": "int >= 1, default 1"},
        expected_verdicts={"H1": "pass", "H2": "pass", "H3": "pass"},
        description="log-modulated drift, steep monotone term, bounded z "
                    "oscillation, exact t^{-1/2} step integral"),
    "example2": CatalogEntry(
        name="example2", factory=make_example2,
        param_schema={"p": "float > 1, default 2", "delta": "float in (0, 1/e)",
                      "k": "int >= 1, default 2", "d": "int >= 1, default 2"},
        expected_verdicts={"H1b_p": "pass", "H2": "pass", "H3": "pass"},
        description="componentwise exp decay plus shared |ln|^{1/p} drift and "
                    "capped z power growth"),
    "linear": CatalogEntry(
        name="linear", factory=make_linear,
        param_schema={"a": "float", "b": "float", "c": "float",
                      "k": "int >= 1", "d": "int >= 1"},
        expected_verdicts={"H1": "pass", "H2": "pass"},
        description="a y + b (z row sums) + c with closed-form oracle at k=d=1"),
    "zero": CatalogEntry(
        name="zero", factory=make_zero,
        param_schema={"k": "int >= 1", "d": "int >= 1"},
        expected_verdicts={"H1": "pass", "H2": "pass", "H3": "pass"},
        description="identically zero generator"),
    "quadratic_z": CatalogEntry(
        name="quadratic_z", factory=make_quadratic_z,
        param_schema={"k": "int >= 1", "d": "int >= 1", "lam": "float >= 0"},
        expected_verdicts={"H3": "fail", "H1": "pass", "H2": "pass"},
        description="|z|^2 violator: quadratic z growth"),
    "quadratic_y": CatalogEntry(
        name="quadratic_y", factory=make_quadratic_y,
        expected_verdicts={"H1": "fail", "H2": "pass", "H3": "pass"},
        description="y^2 violator: superlinear one-sided drift"),
    "step_y": CatalogEntry(
        name="step_y", factory=make_step_y,
        expected_verdicts={"H2": "fail", "H3": "pass"},
        description="1{y >= 0} violator: jump discontinuity in y"),
    "cubic_decay": CatalogEntry(
        name="cubic_decay", factory=make_cubic_decay,
        expected_verdicts={"H1": "pass", "H2": "pass", "H3": "pass"},
        description="-y^3: strongly dissipative drift"),
    "sine_z": CatalogEntry(
        name="sine_z", factory=make_sine_z,
        expected_verdicts={"H1": "pass", "H2": "pass", "H3": "pass"},
        description="sin|z|: bounded 1-Lipschitz z dependence"),
    "sqrt_drift": CatalogEntry(
        name="sqrt_drift", factory=make_sqrt_drift,
        expected_verdicts={"H2": "pass", "H3": "pass"},
        description="sqrt(|y|) sign(y): infinite slope at 0, Osgood-violating "
                    "against linear moduli"),
}

TERMINAL_CATALOG = {
    "constant": {"value": "float, default 0"},
    "bm": {},
    "bm_squared": {},
    "abs_bm": {},
    "abs_bm_capped": {"cap": "float > 0, default 5"},
    "pareto": {"tail": "float > 1, default 1.5"},
    "exp_bm_squared": {"coef": "float, default 0.25"},
    "heavy_loglog": {},
}
