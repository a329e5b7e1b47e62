"""Scalar special functions and quadrature helpers.

Everything here is pure: the same arguments (and the same QuadratureSpec)
always give bit-identical results, so the functions are safe to call from
any number of worker threads.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy import integrate, special

logger = logging.getLogger(__name__)

# e^{-745} is below the smallest subnormal double.
UNDERFLOW_EXPONENT = 745.0
# Amplitude cut used on the shifted Macdonald contour.
_SHIFTED_EXPONENT = 36.0


class DomainError(ValueError):
    """Argument outside the domain of an operation."""


class ConvergenceError(RuntimeError):
    """Refinement did not meet the requested tolerance."""

    def __init__(self, message: str, previous: float, last: float) -> None:
        super().__init__(f"{message} (previous={previous!r}, last={last!r})")
        self.previous = previous
        self.last = last


@dataclass(frozen=True, slots=True)
class QuadratureSpec:
    """Tolerance and truncation policy for semi-infinite integrals.

    Attributes:
        abs_tol: Absolute tolerance handed to the adaptive rule
        rel_tol: Relative tolerance handed to the adaptive rule
        truncation_bound: First upper cut tried for [0, inf) integrands
        max_refinements: How many times the cut may be doubled
        panel_limit: Subinterval budget of a single adaptive call
    """
    abs_tol: float = 1e-10
    rel_tol: float = 1e-9
    truncation_bound: float = 50.0
    max_refinements: int = 30
    panel_limit: int = 500

    def __post_init__(self) -> None:
        if not self.abs_tol > 0:
            raise DomainError("abs_tol must be positive")
        if not self.rel_tol > 0:
            raise DomainError("rel_tol must be positive")
        if not self.truncation_bound > 0:
            raise DomainError("truncation_bound must be positive")
        if self.max_refinements < 1:
            raise DomainError("max_refinements must be at least 1")
        if self.panel_limit < 1:
            raise DomainError("panel_limit must be at least 1")

    def with_bound(self, bound: float) -> "QuadratureSpec":
        return replace(self, truncation_bound=bound)

    def tightened(self, factor: float) -> "QuadratureSpec":
        return replace(self, abs_tol=self.abs_tol * factor, rel_tol=self.rel_tol * factor)


DEFAULT_SPEC = QuadratureSpec()
# Used where finite differences of the result are taken downstream.
TIGHT_SPEC = QuadratureSpec(abs_tol=1e-15, rel_tol=1e-13)


def quad(f: Callable[[float], float], lo: float, hi: float, spec: QuadratureSpec, **kwargs) -> float:
    """One adaptive QUADPACK call with the given tolerances.

    QUADPACK diagnostics are logged at debug level rather than raised; only a
    non-finite value is treated as a failure.
    """
    out = integrate.quad(
        f, lo, hi,
        epsabs=spec.abs_tol, epsrel=spec.rel_tol, limit=spec.panel_limit,
        full_output=1, **kwargs,
    )
    value, err = out[0], out[1]
    if len(out) > 3:
        logger.debug("[QUAD] [%g, %g] err=%.3g: %s", lo, hi, err, str(out[3]).splitlines()[0])
    if not math.isfinite(value):
        raise ConvergenceError(f"non-finite quadrature on [{lo}, {hi}]", float("nan"), value)
    return value


def ln_gamma(x: float) -> float:
    """Natural log of the gamma function for x > 0."""
    if not (x > 0 and math.isfinite(x)):
        raise DomainError(f"ln_gamma needs a finite positive argument, got {x!r}")
    return float(special.gammaln(x))


def hyp_u(a: float, b: float, z: float, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Tricomi confluent hypergeometric function U(a, b, z) for a > 0, z > 0.

    Uses the Laplace representation rescaled by t = s/z,

        U = z^{-a} / Gamma(a) * int_0^inf e^{-s} s^{a-1} (1 + s/z)^{b-a-1} ds,

    with the algebraic endpoint weight s^{a-1} handled by QUADPACK's QAWS rule
    on [0, 1].
    """
    if not a > 0:
        raise DomainError(f"hyp_u needs a > 0, got {a!r}")
    if not (z > 0 and math.isfinite(z)):
        raise DomainError(f"hyp_u needs a finite z > 0, got {z!r}")
    c = b - a - 1.0

    def smooth(s: float) -> float:
        return math.exp(-s + c * math.log1p(s / z))

    head = quad(smooth, 0.0, 1.0, spec, weight="alg", wvar=(a - 1.0, 0.0))
    tail = quad(lambda s: smooth(s) * s ** (a - 1.0), 1.0, np.inf, spec)
    total = head + tail
    if not total > 0:
        raise ConvergenceError("U integral lost positivity", head, total)
    return math.exp(-a * math.log(z) - ln_gamma(a)) * total


def hyp_u_asymptotic(a: float, b: float, z: np.ndarray | float, terms: int = 8) -> np.ndarray:
    """Large-z expansion z^{-a} sum_k (a)_k (a-b+1)_k / k! (-z)^{-k}, vectorised."""
    z = np.asarray(z, dtype=float)
    term = np.ones_like(z)
    total = np.ones_like(z)
    for k in range(terms):
        term = term * (a + k) * (a - b + 1.0 + k) / ((k + 1) * (-z))
        total = total + term
    return z ** (-a) * total


def bessel_k_imag(gamma: float, a: float, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Macdonald function K_{i gamma}(a) of purely imaginary order.

    For gamma <= max(1, a) the real integral int_0^inf e^{-a cosh t} cos(gamma t) dt
    is taken with QUADPACK's cosine-weighted rule, truncated where a cosh t passes
    the double underflow threshold. Beyond that the result is exponentially
    smaller than the integrand, so the contour is moved to Im t = pi/2 - 1/gamma:

        K = e^{-gamma alpha} int_0^inf e^{-a cos(alpha) cosh t} cos(gamma t - a sin(alpha) sinh t) dt.
    """
    if not (a > 0 and math.isfinite(a)):
        raise DomainError(f"bessel_k_imag needs a > 0, got {a!r}")
    gamma = abs(float(gamma))
    if gamma <= max(1.0, a):
        if a >= UNDERFLOW_EXPONENT:
            return 0.0
        t_max = math.acosh(UNDERFLOW_EXPONENT / a)
        if gamma == 0.0:
            return quad(lambda t: math.exp(-a * math.cosh(t)), 0.0, t_max, spec)
        return quad(lambda t: math.exp(-a * math.cosh(t)), 0.0, t_max, spec, weight="cos", wvar=gamma)

    alpha = 0.5 * math.pi - 1.0 / gamma
    damp = a * math.cos(alpha)
    swing = a * math.sin(alpha)
    t_max = math.acosh(max(1.0, _SHIFTED_EXPONENT / damp))

    def integrand(t: float) -> float:
        return math.exp(-damp * math.cosh(t)) * math.cos(gamma * t - swing * math.sinh(t))

    # Panels between phase turning points keep the oscillations resolved.
    turning = math.acosh(gamma / swing) if gamma > swing else 0.0
    edges = sorted({0.0, min(turning, t_max), t_max})
    wide = replace(spec, panel_limit=max(spec.panel_limit, 2000))
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi > lo:
            total += quad(integrand, lo, hi, wide)
    return math.exp(-gamma * alpha) * total


def sech_pow_cos_transform(k: int, u: float) -> float:
    """Closed form of int_0^inf cos(gamma u) / cosh(pi gamma / 3)^k d gamma.

    Odd k = 2p - 1:
        2^{2p-3} / (2(p-1))! * 3 / cosh(3u/2) * prod_{r=1}^{p-1} (9u^2/4pi^2 + (r - 1/2)^2)
    Even k = 2p:
        4^{p-1} / (2 pi (2p-1)!) * 9u / sinh(3u/2) * prod_{r=1}^{p-1} (9u^2/4pi^2 + r^2)
    The empty product is 1.
    """
    if int(k) != k or k < 1:
        raise DomainError(f"sech power must be a positive integer, got {k!r}")
    k = int(k)
    u = abs(float(u))
    w = 9.0 * u * u / (4.0 * math.pi ** 2)
    decay = math.exp(-1.5 * u)
    if k % 2 == 1:
        p = (k + 1) // 2
        prod = math.prod(w + (r - 0.5) ** 2 for r in range(1, p))
        sech = 2.0 * decay / (1.0 + decay * decay)
        return 2.0 ** (2 * p - 3) / math.factorial(2 * (p - 1)) * 3.0 * sech * prod
    p = k // 2
    prod = math.prod(w + r * r for r in range(1, p))
    # u / sinh(3u/2) -> 2/3 at u = 0
    ratio = 2.0 / 3.0 if u == 0.0 else 2.0 * u * decay / -math.expm1(-3.0 * u)
    return 4.0 ** (p - 1) / (2.0 * math.pi * math.factorial(2 * p - 1)) * 9.0 * ratio * prod


def integrate_semi_infinite(f: Callable[[float], float], spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Integral of f over [0, inf) by doubling a truncation cut until it settles.

    Raises:
        ConvergenceError: if max_refinements doublings do not meet the tolerances
    """
    bound = spec.truncation_bound
    previous = quad(f, 0.0, bound, spec)
    for _ in range(spec.max_refinements):
        extra = quad(f, bound, 2.0 * bound, spec)
        current = previous + extra
        if abs(extra) <= max(spec.abs_tol, spec.rel_tol * abs(current)):
            return current
        previous, bound = current, 2.0 * bound
    raise ConvergenceError("semi-infinite integral did not settle", previous - extra, current)


# ---------- Macdonald-function integrals ----------

def macdonald_kernel(k: int, u: float) -> float:
    """Kernel G_k(u) with int gamma K_{i gamma}(a) sinh/cosh^k = a int sinh(u) e^{-a cosh u} G_k(u) du.

    k = 1 gives (3/2) / sinh(3u/2); k >= 2 gives 3u/(pi(k-1)) times the
    sech^{k-1} cosine transform.
    """
    if k == 1:
        return 1.5 / math.sinh(1.5 * u) if u > 0 else math.inf
    if k < 1:
        raise DomainError(f"kernel defined for k >= 1, got {k!r}")
    return 3.0 * u / (math.pi * (k - 1)) * sech_pow_cos_transform(k - 1, u)


def _kernel_weight(k: int, u: float) -> float:
    # sinh(u) * G_k(u), finite at u = 0 for every k
    if k == 1:
        return 1.5 * math.sinh(u) / math.sinh(1.5 * u) if u > 0 else 1.0
    return math.sinh(u) * macdonald_kernel(k, u)


def kernel_constant(k: int, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """C_{k-1} = int_0^inf Gamma_{k-1}(Argcosh(1+s)) ds for k >= 2, and C_0 for k = 1."""
    if k == 1:
        return integrate_semi_infinite(lambda u: math.sinh(u) / math.sinh(1.5 * u) if u > 0 else 2.0 / 3.0, spec)
    return integrate_semi_infinite(lambda u: _kernel_weight(k, u), spec)


def kernel_alpha(k: int, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Slope of the Macdonald integral at a = 0: (3/2) C_0 for k = 1, C_{k-1} otherwise."""
    if k == 1:
        return 1.5 * kernel_constant(1, spec)
    return kernel_constant(k, spec)


def kernel_beta(k: int) -> float:
    """beta_k as displayed for the normalised frame z = b = 1 (beta_0 = 0)."""
    if k == 0:
        return 0.0
    if k < 0:
        raise DomainError(f"beta_k defined for k >= 0, got {k!r}")
    return 9.0 * math.sqrt(2.0) / (math.sqrt(math.pi) * math.factorial(k - 1)) * (9.0 / (4.0 * math.pi ** 2)) ** (k / 2.0 - 1.0)


def small_a_coefficient(k: int) -> float:
    """Coefficient of -a^{3/2} (-ln a)^{k-1} in the Macdonald integral as a -> 0.

    Read off the exact large-s tail of the kernel, where 1/cosh(3u/2) behaves
    like 2 (2s)^{-3/2}. It is twice the displayed beta_k once beta_k is moved
    from the t frame to the a frame.
    """
    if k < 1:
        raise DomainError(f"coefficient defined for k >= 1, got {k!r}")
    return 2.0 * kernel_beta(k) * 2.0 ** (k - 4)


def lebedev_closed_form(a: float) -> float:
    """int_0^inf gamma K_{i gamma}(a) sinh(pi gamma / 3) d gamma = (sqrt(3) pi / 4) a e^{-a/2}.

    Follows from int K_{i gamma}(a) cosh(beta gamma) d gamma = (pi/2) e^{-a cos beta}
    differentiated at beta = pi/3.
    """
    if not a > 0:
        raise DomainError(f"a must be positive, got {a!r}")
    return math.sqrt(3.0) * math.pi / 4.0 * a * math.exp(-0.5 * a)


def lebedev_integral(k: int, a: float, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """I_k(a) = int_0^inf gamma K_{i gamma}(a) sinh(pi gamma/3) / cosh(pi gamma/3)^k d gamma.

    k >= 1 goes through the kernel representation (no Macdonald evaluations),
    k = 0 is the closed form and k = -1 is the value continued from
    (pi/2) a sin(beta) e^{-a cos beta} at beta = 2 pi / 3.
    """
    if not a > 0:
        raise DomainError(f"a must be positive, got {a!r}")
    if k == 0:
        return lebedev_closed_form(a)
    if k == -1:
        return math.sqrt(3.0) * math.pi / 8.0 * a * math.exp(0.5 * a)
    if k < -1:
        raise DomainError(f"k must be >= -1, got {k!r}")
    u_max = math.acosh(max(1.0, UNDERFLOW_EXPONENT / a))
    return a * quad(lambda u: math.exp(-a * math.cosh(u)) * _kernel_weight(k, u), 0.0, u_max, spec)


def lebedev_integral_direct(k: int, a: float, spec: QuadratureSpec = DEFAULT_SPEC, gamma_max: float | None = None) -> float:
    """I_k(a) by quadrature in gamma with Macdonald values from bessel_k_imag."""
    if k < 0:
        raise DomainError(f"direct route needs k >= 0, got {k!r}")
    x = math.pi / 3.0
    if gamma_max is None:
        # integrand decays like e^{-(pi/2 + (k-1) pi/3) gamma}
        rate = 0.5 * math.pi + (k - 1) * x
        gamma_max = 32.0 / rate + 8.0

    def integrand(g: float) -> float:
        if g == 0.0:
            return 0.0
        return g * bessel_k_imag(g, a, spec) * math.sinh(x * g) / math.cosh(x * g) ** k

    edges = np.linspace(0.0, gamma_max, int(math.ceil(gamma_max / 4.0)) + 1)
    return sum(quad(integrand, lo, hi, spec) for lo, hi in zip(edges[:-1], edges[1:]))


def small_a_deficit(k: int, a: float, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """alpha_k a - I_k(a), computed without cancellation.

    With L(a) = int e^{-a s} G ds and D(a) = a int (1 - e^{-a s}) G ds,
    I_k = e^{-a} (a alpha_k - D) so the deficit is D e^{-a} + a alpha_k (1 - e^{-a}).
    """
    if not a > 0:
        raise DomainError(f"a must be positive, got {a!r}")
    alpha = kernel_alpha(k, spec)

    def integrand(u: float) -> float:
        return -math.expm1(-a * (math.cosh(u) - 1.0)) * _kernel_weight(k, u)

    knee = math.log(2.0 / a) if a < 1.0 else 1.0
    head = quad(integrand, 0.0, knee, spec.tightened(1e-3))
    tail = integrate_semi_infinite(lambda s: integrand(knee + s), spec.tightened(1e-3).with_bound(10.0))
    deficit = a * (head + tail)
    return deficit * math.exp(-a) - a * alpha * math.expm1(-a)


def passage_kernel_integral(n: int, a: float, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """int_0^inf K_{i gamma}(a) gamma sinh(pi gamma) / (2 cosh(pi gamma/3))^n d gamma.

    sinh(3x) = 4 cosh^2(x) sinh(x) - sinh(x) splits it into
    I_{n-2} / 2^{n-2} - I_n / 2^n; for n = 1 this is the continued value.
    """
    if n < 1:
        raise DomainError(f"passage index must be >= 1, got {n!r}")
    return lebedev_integral(n - 2, a, spec) / 2.0 ** (n - 2) - lebedev_integral(n, a, spec) / 2.0 ** n
