"""Computable bound functions: Gronwall, backward Bihari, linear envelopes.

The central object is a concave modulus rho with rho(0) = 0.  The Bihari
machinery works through the reciprocal antiderivative

    Psi(x) = int_1^x du / rho(u),

a strictly increasing map; the backward inequality
u(t) <= u0 + int_t^T rho(u(s)) ds then gives u(t) <= Psi^{-1}(Psi(u0) + T - t).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .errors import MalformedInputError, RangeOverflowError, SingularIntegrandError

__all__ = [
    "Modulus",
    "gronwall_bound",
    "bihari_transform",
    "bihari_bound",
    "linear_envelope",
    "divergence_test",
    "modulus_linear",
    "modulus_xlog",
    "modulus_sqrt",
    "modulus_log1p",
]

DIVERGES = "diverges"
CONVERGES = "converges"
UNDETERMINED = "undetermined"

# geometric ladders start inside every built-in modulus's small-argument regime
LADDER_EPS0 = 0.5
LADDER_STEPS = 48


@dataclass(frozen=True)
class Modulus:
    """Nondecreasing concave rho: R+ -> R+ with rho(0) = 0.

    linear_constant A satisfies rho(x) <= A (x + 1); divergence_flag is the
    declared verdict for int_{0+} du / rho(u).  Both are declarations that
    the conditions module re-checks on sampled ladders.
    """

    evaluator: Callable = field(repr=False)
    linear_constant: float
    divergence_flag: str = UNDETERMINED
    name: str = "modulus"
    params: dict = field(default_factory=dict)

    def __call__(self, u):
        return self.evaluator(np.asarray(u, dtype=np.float64))


def gronwall_bound(u0: float, a: float, tau: float) -> float:
    """Bound u0 * exp(a tau) for u(t) <= u0 + a int_t^T u(s) ds, tau = T - t."""
    for name, v in (("u0", u0), ("a", a), ("tau", tau)):
        if not (np.isfinite(v) and v >= 0.0):
            raise MalformedInputError(f"{name} must be finite and nonnegative")
    return float(u0 * np.exp(a * tau))


def _rho_positive(modulus: Modulus, lo: float, hi: float) -> None:
    probe = np.geomspace(max(lo, 1e-300), hi, 64)
    vals = modulus(probe)
    if np.any(vals <= 0.0) or not np.all(np.isfinite(vals)):
        raise SingularIntegrandError(
            f"modulus {modulus.name!r} not strictly positive on ({lo:g}, {hi:g})")


def bihari_transform(modulus: Modulus, x: float) -> float:
    """Psi(x) = int_1^x du / rho(u) by adaptive quadrature (rel. error 1e-8)."""
    if not (x > 0.0 and np.isfinite(x)):
        raise MalformedInputError("x must be positive and finite")
    if x == 1.0:
        return 0.0
    lo, hi = (x, 1.0) if x < 1.0 else (1.0, x)
    _rho_positive(modulus, lo, hi)
    val, _err = quad(lambda u: 1.0 / float(modulus(u)), lo, hi,
                     epsrel=1e-10, epsabs=0.0, limit=200)
    return float(val if x > 1.0 else -val)


def bihari_bound(u0: float, modulus: Modulus, tau: float) -> float:
    """Psi^{-1}(Psi(u0) + tau); returns 0 when u0 = 0.

    The inverse uses bracketed bisection (Psi is strictly monotone but its
    derivative 1/rho can blow up near 0) followed by one Newton polish.
    """
    if not (np.isfinite(u0) and u0 >= 0.0) or not (np.isfinite(tau) and tau >= 0.0):
        raise MalformedInputError("u0 and tau must be finite and nonnegative")
    if u0 == 0.0:
        if modulus.divergence_flag != DIVERGES:
            raise MalformedInputError(
                "u0 = 0 requires a modulus with divergent integral at 0+")
        return 0.0
    if tau == 0.0:
        return float(u0)

    target = bihari_transform(modulus, u0) + tau
    lo, hi = u0, max(2.0 * u0, 2.0)
    psi_hi = bihari_transform(modulus, hi)
    while psi_hi < target:
        if hi > 1e300:
            raise RangeOverflowError(
                f"Psi({hi:g}) = {psi_hi:g} below target {target:g}; "
                "transform saturates before reaching it", bracket=(lo, hi))
        lo, hi = hi, hi * 4.0
        psi_hi = bihari_transform(modulus, hi)

    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if bihari_transform(modulus, mid) < target:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    # one Newton step: Psi'(x) = 1 / rho(x)
    rho_x = float(modulus(x))
    if rho_x > 0.0 and np.isfinite(rho_x):
        x_new = x - (bihari_transform(modulus, x) - target) * rho_x
        if lo <= x_new <= hi:
            x = x_new
    return float(x)


def linear_envelope(modulus: Modulus, m: int, x: float) -> float:
    """(m + 2A) x + rho(2A / (m + 2A)): a family of linear upper bounds.

    Each member dominates rho pointwise; the intercept shrinks to rho(0+) = 0
    as m grows while the slope steepens.
    """
    if m < 1:
        raise MalformedInputError("m must be a positive integer")
    if not (np.isfinite(x) and x >= 0.0):
        raise MalformedInputError("x must be finite and nonnegative")
    a = modulus.linear_constant
    if not (np.isfinite(a) and a >= 0.0):
        raise MalformedInputError("modulus lacks a valid linear constant")
    slope = m + 2.0 * a
    return float(slope * x + modulus(2.0 * a / slope))


def divergence_test(modulus: Modulus, pbar: float = 1.0,
                    big_threshold: float = 1e4, cauchy_tol: float = 1e-6) -> str:
    """Tri-state estimate of whether int_{0+} u^{pbar-1} / rho^{pbar}(u) du diverges.

    Partial integrals are accumulated on the geometric ladder
    eps_j = eps0 * 2^-j, j = 1..48.  "converges" needs the increments to
    decay geometrically with the projected tail below `cauchy_tol`;
    "diverges" needs the partial sums to keep growing without flattening
    (increment decay ratio >= 0.95) or to exceed `big_threshold`.  Anything
    else is "undetermined" -- which condition checkers treat as a failure,
    never as a pass, since divergence of an improper integral is not
    numerically decidable.
    """
    if pbar < 1.0:
        raise MalformedInputError("pbar must be >= 1")
    _rho_positive(modulus, LADDER_EPS0 * 2.0 ** -LADDER_STEPS, LADDER_EPS0)

    def integrand(u):
        return u ** (pbar - 1.0) / float(modulus(u)) ** pbar

    eps = LADDER_EPS0
    increments = []
    total = 0.0
    for _j in range(1, LADDER_STEPS + 1):
        nxt = eps * 0.5
        val, _err = quad(integrand, nxt, eps, epsrel=1e-9, epsabs=1e-300, limit=200)
        if not np.isfinite(val):
            raise SingularIntegrandError("integrand not integrable on ladder rung")
        increments.append(val)
        total += val
        eps = nxt
        if total > big_threshold:
            return DIVERGES

    tail = np.array(increments[-8:])
    if np.all(tail <= 1e-300):
        return CONVERGES
    ratios = tail[1:] / np.maximum(tail[:-1], 1e-300)
    rbar = float(np.median(ratios))
    if rbar >= 0.95:
        return DIVERGES
    if rbar < 0.9:
        projected_tail = tail[-1] * rbar / max(1.0 - rbar, 1e-12)
        if projected_tail < cauchy_tol:
            return CONVERGES
    return UNDETERMINED


# ---------------------------------------------------------------------------
# built-in modulus family
# ---------------------------------------------------------------------------

def modulus_linear(slope: float = 1.0) -> Modulus:
    if slope <= 0:
        raise MalformedInputError("slope must be positive")
    return Modulus(evaluator=lambda u, s=slope: s * u, linear_constant=float(slope),
                   divergence_flag=DIVERGES, name="linear", params={"slope": slope})


def modulus_xlog(scale: float = 1.0, delta: float = float(np.exp(-2.0))) -> Modulus:
    """scale * u |ln u| on (0, delta], linear continuation beyond.

    Requires delta < 1/e so the junction sits in the regime where u |ln u|
    is nondecreasing and concave; the continuation slope is the one-sided
    derivative scale * (|ln delta| - 1).
    """
    if not (0.0 < delta < np.exp(-1.0)):
        raise MalformedInputError("delta must lie in (0, 1/e)")
    if scale <= 0:
        raise MalformedInputError("scale must be positive")
    slope = scale * (-np.log(delta) - 1.0)
    at_delta = scale * delta * (-np.log(delta))

    def ev(u, d=delta, s=scale, sl=slope, ad=at_delta):
        u = np.asarray(u, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            small = np.where(u > 0, s * u * np.abs(np.log(np.where(u > 0, u, 1.0))), 0.0)
        return np.where(u <= d, small, ad + sl * (u - d))

    return Modulus(evaluator=ev, linear_constant=float(slope + at_delta),
                   divergence_flag=DIVERGES, name="xlog",
                   params={"scale": scale, "delta": delta})


def modulus_sqrt(scale: float = 1.0) -> Modulus:
    return Modulus(evaluator=lambda u, s=scale: s * np.sqrt(u),
                   linear_constant=float(scale), divergence_flag=CONVERGES,
                   name="sqrt", params={"scale": scale})


def modulus_log1p(scale: float = 1.0) -> Modulus:
    return Modulus(evaluator=lambda u, s=scale: s * np.log1p(u),
                   linear_constant=float(scale), divergence_flag=DIVERGES,
                   name="log1p", params={"scale": scale})


MODULUS_REGISTRY = {
    "linear": modulus_linear,
    "xlog": modulus_xlog,
    "sqrt": modulus_sqrt,
    "log1p": modulus_log1p,
}
