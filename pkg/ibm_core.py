"""Closed-form laws of integrated Brownian motion (X, B) and its penalisations.

The pair (X, B) has generator G = (1/2) d^2/dy^2 + y d/dx. The function h below
is G-harmonic on {x > 0}; it drives the process conditioned never to hit 0,
the passage-time laws under that conditioning and the two penalisation
martingales (last zero before a horizon, running supremum).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Literal, Protocol, Sequence

import numpy as np
from scipy import special
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from specfun import (
    DEFAULT_SPEC,
    DomainError,
    QuadratureSpec,
    hyp_u,
    hyp_u_asymptotic,
    passage_kernel_integral,
    ln_gamma,
    quad,
)

logger = logging.getLogger(__name__)

# h(1, eta) = H(eta) building blocks
_C6 = (2.0 / 9.0) ** (1.0 / 6.0)
# math.cbrt is 3.11+; real cube root fallback for older interpreters.
_cbrt = getattr(math, "cbrt", lambda v: math.copysign(abs(v) ** (1.0 / 3.0), v))

H_AT_ZERO = (2.0 / 9.0) ** (-1.0 / 6.0) * math.exp(ln_gamma(1.0 / 3.0) - ln_gamma(1.0 / 6.0))
# Band |eta| < DRIFT_BAND where the branch formulas for H'/H are replaced by differences.
DRIFT_BAND = 1e-3
_FD_STEP = 1e-2

SURVIVAL_CONSTANT = 3.0 * math.exp(ln_gamma(0.25)) / (2.0 ** 0.75 * math.pi ** 1.5)
_PASSAGE_RATE = 9.0 / (4.0 * math.pi ** 2)

_PROFILE_SPEC = QuadratureSpec(abs_tol=1e-15, rel_tol=1e-12)


# ---------- Domain types ----------

@dataclass(frozen=True, slots=True)
class PhaseState:
    """Position-velocity pair (x, y) of the Markov pair (X, B)."""
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DomainError(f"phase state must be finite, got ({self.x!r}, {self.y!r})")

    def reflected(self) -> "PhaseState":
        return PhaseState(-self.x, -self.y)


@dataclass(frozen=True, slots=True)
class PenaltyWeight:
    """Continuous, compactly supported, piecewise-linear weight phi >= 0.

    Left of the first breakpoint phi is held at the first value; right of the
    last breakpoint it is 0. The last value must therefore be 0.
    """
    breakpoints: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        pts = tuple((float(z), float(v)) for z, v in self.breakpoints)
        object.__setattr__(self, "breakpoints", pts)
        if len(pts) < 2:
            raise DomainError("penalty weight needs at least two breakpoints")
        zs = [z for z, _ in pts]
        vs = [v for _, v in pts]
        if any(not (math.isfinite(z) and math.isfinite(v)) for z, v in pts):
            raise DomainError("penalty weight breakpoints must be finite")
        if any(b <= a for a, b in zip(zs, zs[1:])):
            raise DomainError("penalty weight breakpoints must be strictly increasing")
        if any(v < 0 for v in vs):
            raise DomainError("penalty weight values must be non-negative")
        if vs[-1] != 0.0:
            raise DomainError("penalty weight must vanish at its last breakpoint")
        if max(vs) <= 0:
            raise DomainError("penalty weight needs a strictly positive value")

    @classmethod
    def parse(cls, text: str) -> "PenaltyWeight":
        """Build from a "z0:v0,z1:v1,..." breakpoint string."""
        try:
            pairs = [item.split(":") for item in text.replace(" ", "").split(",") if item]
            return cls(tuple((float(z), float(v)) for z, v in pairs))
        except ValueError as exc:
            if isinstance(exc, DomainError):
                raise
            raise DomainError(f"cannot parse penalty weight {text!r}: {exc}") from exc

    @classmethod
    def triangular(cls, peak: float, end: float, start: float = 0.0) -> "PenaltyWeight":
        """phi = peak at start, decreasing linearly to 0 at end."""
        return cls(((start, peak), (end, 0.0)))

    def as_string(self) -> str:
        return ",".join(f"{z!r}:{v!r}" for z, v in self.breakpoints)

    @property
    def zs(self) -> np.ndarray:
        return np.array([z for z, _ in self.breakpoints])

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.breakpoints])

    @property
    def support_end(self) -> float:
        """First abscissa from which phi is identically 0."""
        end = self.breakpoints[-1][0]
        for z, v in reversed(self.breakpoints):
            if v != 0.0:
                break
            end = z
        return end

    def __call__(self, z):
        vs = self.values
        out = np.interp(z, self.zs, vs, left=vs[0], right=0.0)
        return float(out) if np.ndim(out) == 0 else out

    def segments(self) -> list[tuple[float, float, float]]:
        """(lo, hi, slope) for every breakpoint interval with nonzero slope."""
        out = []
        for (z0, v0), (z1, v1) in zip(self.breakpoints, self.breakpoints[1:]):
            slope = (v1 - v0) / (z1 - z0)
            if slope != 0.0:
                out.append((z0, z1, slope))
        return out


@dataclass(frozen=True, slots=True)
class AsymptoticCoeffs:
    """value(t) = leading_constant * (ln t)^log_power * t^time_power."""
    n: int
    leading_constant: float
    log_power: int
    time_power: float = -0.25

    def __post_init__(self) -> None:
        if self.n < 1:
            raise DomainError("passage index must be >= 1")
        if not self.leading_constant > 0:
            raise DomainError("leading constant must be positive")

    def value(self, t: float) -> float:
        return self.leading_constant * math.log(t) ** self.log_power * t ** self.time_power


class BinnedDensity(Protocol):
    """Piecewise-constant density estimate on a (u, v) grid."""
    u_edges: np.ndarray
    v_edges: np.ndarray
    density: np.ndarray


class CellFamily(Protocol):
    """Killed cell probabilities K(r, z) from (0, z), with their standard errors."""

    def along_z(self, r: float, z) -> tuple[np.ndarray, np.ndarray]: ...


KilledDensity = Callable[[float, float, float, float], float]
"""(r, z, u, v) -> density at (u, v) after time r of the process started at (0, z) and killed at 0."""


# ---------- Gaussian transition law ----------

def transition_density(t: float, src: PhaseState, dst: PhaseState) -> float:
    """p_t(x, y; u, v) = sqrt(3)/(pi t^2) exp(-6(u-x)^2/t^3 + 6(u-x)(v+y)/t^2 - 2(v^2+vy+y^2)/t)."""
    if not t > 0:
        raise DomainError(f"t must be positive, got {t!r}")
    return float(transition_density_array(t, src.x, src.y, dst.x, dst.y))


def transition_density_array(t, x, y, u, v):
    """Vectorised p_t(x, y; u, v)."""
    d = np.subtract(u, x)
    expo = -6.0 * d * d / t ** 3 + 6.0 * d * (np.add(v, y)) / t ** 2 - 2.0 * (np.square(v) + np.multiply(v, y) + np.square(y)) / t
    return math.sqrt(3.0) / (math.pi * t * t) * np.exp(expo)


def q_density(t: float, src: PhaseState, dst: PhaseState) -> float:
    """q_t(x, y; u, v) = p_t(x, y; u, v) - p_t(x, y; u, -v)."""
    return transition_density(t, src, dst) - transition_density(t, src, PhaseState(dst.x, -dst.y))


def _zero_crossing_law(s, x, y):
    """Density of X_s at 0 and the conditional mean and variance of B_s there."""
    s = np.asarray(s, dtype=float)
    mean_x = x + y * s
    var_x = s ** 3 / 3.0
    dens = np.exp(-0.5 * mean_x * mean_x / var_x) / np.sqrt(2.0 * math.pi * var_x)
    cond_mean = -0.5 * y - 1.5 * x / s
    return dens, cond_mean, s / 4.0


def gaussian_abs_moment(mean, var, p: float = 1.5):
    """E|Z|^p for Z ~ N(mean, var), vectorised."""
    mean = np.asarray(mean, dtype=float)
    sigma = np.sqrt(var)
    ratio = np.abs(mean) / sigma
    with np.errstate(over="ignore", invalid="ignore"):
        exact = sigma ** p * 2.0 ** (p / 2) * math.gamma((p + 1) / 2) / math.sqrt(math.pi) * special.hyp1f1(
            -p / 2, 0.5, -0.5 * ratio * ratio)
        r2 = np.where(ratio > 0, 1.0 / (ratio * ratio), 0.0)
        far = np.abs(mean) ** p * (1.0 + p * (p - 1) / 2.0 * r2 + p * (p - 1) * (p - 2) * (p - 3) / 8.0 * r2 * r2)
    out = np.where(ratio > 60.0, far, exact)
    return float(out) if out.ndim == 0 else out


def crossing_intensity(s, x, y):
    """int |z|^{3/2} p_s(x, y; 0, z) dz, vectorised over s (or over x, y)."""
    dens, m, var = _zero_crossing_law(s, x, y)
    return dens * gaussian_abs_moment(m, var)


# ---------- The harmonic function h ----------

def _snap(eta: float) -> float:
    return 0.0 if abs(eta) < 1e-12 else eta


def harmonic_profile(eta: float, spec: QuadratureSpec = _PROFILE_SPEC) -> float:
    """H(eta) = h(1, eta)."""
    eta = _snap(eta)
    if eta == 0.0:
        return H_AT_ZERO
    zeta = 2.0 * eta ** 3 / 9.0
    if eta > 0:
        return _C6 * eta * hyp_u(1.0 / 6.0, 4.0 / 3.0, zeta, spec)
    return math.exp(log_harmonic_profile(eta, spec))


def log_harmonic_profile(eta: float, spec: QuadratureSpec = _PROFILE_SPEC) -> float:
    """log H(eta); finite where H itself underflows."""
    eta = _snap(eta)
    if eta >= 0.0:
        return math.log(harmonic_profile(eta, spec))
    zeta = 2.0 * eta ** 3 / 9.0
    return math.log(-_C6 * eta / 6.0) + zeta + math.log(hyp_u(7.0 / 6.0, 4.0 / 3.0, -zeta, spec))


def _profile_derivative_fd(eta: float, spec: QuadratureSpec) -> float:
    e = _FD_STEP
    f = [harmonic_profile(eta + k * e, spec) for k in (-2, -1, 1, 2)]
    return (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * e)


def profile_log_derivative(eta: float, spec: QuadratureSpec = _PROFILE_SPEC) -> float:
    """H'(eta) / H(eta).

    eta > 0: 1/eta - (eta^2/9) U(7/6, 7/3, z) / U(1/6, 4/3, z)
    eta < 0: 1/eta + (2 eta^2/3) (1 + (7/6) U(13/6, 7/3, -z) / U(7/6, 4/3, -z))
    with z = 2 eta^3 / 9; differences of H inside the band |eta| < DRIFT_BAND.
    """
    if abs(eta) < DRIFT_BAND:
        return _profile_derivative_fd(eta, spec) / harmonic_profile(eta, spec)
    zeta = 2.0 * eta ** 3 / 9.0
    if eta > 0:
        ratio = hyp_u(7.0 / 6.0, 7.0 / 3.0, zeta, spec) / hyp_u(1.0 / 6.0, 4.0 / 3.0, zeta, spec)
        return 1.0 / eta - eta * eta / 9.0 * ratio
    w = -zeta
    ratio = hyp_u(13.0 / 6.0, 7.0 / 3.0, w, spec) / hyp_u(7.0 / 6.0, 4.0 / 3.0, w, spec)
    return 1.0 / eta + 2.0 * eta * eta / 3.0 * (1.0 + 7.0 / 6.0 * ratio)


def h_eval(s: PhaseState) -> float:
    """Harmonic function h(x, y) on x >= 0; h(0, y) = sqrt(y+).

    Raises:
        DomainError: for x < 0 (use h(-x, -y) on the negative side)
    """
    if s.x < 0:
        raise DomainError(f"h is defined for x >= 0, got x={s.x!r}")
    if s.x == 0.0:
        return math.sqrt(max(s.y, 0.0))
    cx = float(np.cbrt(s.x))
    return math.sqrt(cx) * harmonic_profile(s.y / cx)


def two_sided_h(s: PhaseState) -> float:
    """h(x, y) 1{x >= 0} + h(-x, -y) 1{x <= 0}; sqrt(|y|) at x = 0."""
    if s.x > 0:
        return h_eval(s)
    if s.x < 0:
        return h_eval(s.reflected())
    return math.sqrt(abs(s.y))


def h_grad(s: PhaseState) -> tuple[float, float]:
    """(dh/dx, dh/dy) on x > 0, from h(x, y) = x^{1/6} H(y / x^{1/3})."""
    if not s.x > 0:
        raise DomainError(f"h_grad needs x > 0, got x={s.x!r}")
    cx = float(np.cbrt(s.x))
    eta = s.y / cx
    H = harmonic_profile(eta)
    dH = H * profile_log_derivative(eta)
    dh_dy = dH / math.sqrt(cx)
    dh_dx = (H / 6.0 - eta * dH / 3.0) / (math.sqrt(cx) * cx * cx)
    return dh_dx, dh_dy


def conditioned_drift(s: PhaseState) -> float:
    """Drift (1/h) dh/dy of the velocity under the conditioned law."""
    if not s.x > 0:
        raise DomainError(f"drift needs x > 0, got x={s.x!r}")
    cx = float(np.cbrt(s.x))
    return profile_log_derivative(s.y / cx) / cx


def generator_residual(s: PhaseState, step: float = 2e-2) -> float:
    """(1/2) h_yy + y h_x by five-point central differences.

    step is relative to the local length scale of h: x^{1/3} / (1 + |H'/H|) in y
    and x / (1 + |d log h / d log x|) in x.
    """
    x, y = s.x, s.y
    if not x > 0 or not 0 < step < 0.25:
        raise DomainError("generator residual needs x > 0 and 0 < step < 0.25")
    cx = _cbrt(x)
    eta = y / cx
    g = profile_log_derivative(eta)
    ey = step * cx / (1.0 + abs(g))
    ex = step * x / (1.0 + abs(1.0 / 6.0 - eta * g / 3.0))

    def h(a: float, b: float) -> float:
        return h_eval(PhaseState(a, b))

    hyy = (-h(x, y + 2 * ey) + 16 * h(x, y + ey) - 30 * h(x, y) + 16 * h(x, y - ey) - h(x, y - 2 * ey)) / (12 * ey * ey)
    hx = (-h(x + 2 * ex, y) + 8 * h(x + ex, y) - 8 * h(x - ex, y) + h(x - 2 * ex, y)) / (12 * ex)
    return 0.5 * hyy + y * hx


# ---------- Vectorised table of H for simulation ----------

@dataclass(frozen=True)
class HarmonicTable:
    """Splines of log H and H'/H on [-eta_max, eta_max], asymptotic series outside."""
    eta_max: float
    log_h: CubicHermiteSpline
    ratio: CubicSpline

    def log_profile(self, eta) -> np.ndarray:
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        out = np.empty_like(eta)
        inside = np.abs(eta) <= self.eta_max
        out[inside] = self.log_h(eta[inside])
        hi = eta > self.eta_max
        if hi.any():
            e = eta[hi]
            out[hi] = np.log(_C6 * e) + np.log(hyp_u_asymptotic(1 / 6, 4 / 3, 2 * e ** 3 / 9))
        lo = eta < -self.eta_max
        if lo.any():
            e = eta[lo]
            z = 2 * e ** 3 / 9
            out[lo] = np.log(-_C6 * e / 6) + z + np.log(hyp_u_asymptotic(7 / 6, 4 / 3, -z))
        return out

    def ratio_profile(self, eta) -> np.ndarray:
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        out = np.empty_like(eta)
        inside = np.abs(eta) <= self.eta_max
        out[inside] = self.ratio(eta[inside])
        hi = eta > self.eta_max
        if hi.any():
            e = eta[hi]
            z = 2 * e ** 3 / 9
            out[hi] = 1 / e - e * e / 9 * hyp_u_asymptotic(7 / 6, 7 / 3, z) / hyp_u_asymptotic(1 / 6, 4 / 3, z)
        lo = eta < -self.eta_max
        if lo.any():
            e = eta[lo]
            w = -2 * e ** 3 / 9
            r = hyp_u_asymptotic(13 / 6, 7 / 3, w) / hyp_u_asymptotic(7 / 6, 4 / 3, w)
            out[lo] = 1 / e + 2 * e * e / 3 * (1 + 7 / 6 * r)
        return out

    def h(self, x, y) -> np.ndarray:
        """Vectorised h on x >= 0 (NaN for x < 0)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.broadcast_to(np.asarray(y, dtype=float), x.shape)
        out = np.full(x.shape, np.nan)
        edge = x == 0
        out[edge] = np.sqrt(np.maximum(y[edge], 0.0))
        pos = x > 0
        cx = np.cbrt(x[pos])
        out[pos] = np.sqrt(cx) * np.exp(self.log_profile(y[pos] / cx))
        return out

    def two_sided(self, x, y) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.broadcast_to(np.asarray(y, dtype=float), x.shape)
        return np.where(x == 0, np.sqrt(np.abs(y)), self.h(np.abs(x), np.where(x >= 0, y, -y)))

    def drift(self, x, y) -> np.ndarray:
        """(1/h) dh/dy on x > 0."""
        x = np.asarray(x, dtype=float)
        cx = np.cbrt(x)
        return self.ratio_profile(np.asarray(y) / cx) / cx


@lru_cache(maxsize=4)
def harmonic_table(eta_max: float = 12.0, step: float = 0.04) -> HarmonicTable:
    """Build (once per process) the interpolation table used by the simulators."""
    n = int(round(2 * eta_max / step)) + 1
    grid = np.linspace(-eta_max, eta_max, n)
    grid[np.abs(grid) < 1e-12] = 0.0
    logs = np.array([log_harmonic_profile(e) for e in grid])
    ratios = np.array([profile_log_derivative(e) for e in grid])
    logger.debug("[TABLE] harmonic profile on %d nodes, eta in [%g, %g]", n, -eta_max, eta_max)
    return HarmonicTable(eta_max, CubicHermiteSpline(grid, logs, ratios), CubicSpline(grid, ratios))


# ---------- Survival and passage asymptotics ----------

def survival_asymptotic(t: float, s: PhaseState) -> float:
    """P_{(x,y)}(T_0 > t) ~ C h(x, y) t^{-1/4}, C = 3 Gamma(1/4) / (2^{3/4} pi^{3/2})."""
    if not t > 0:
        raise DomainError(f"t must be positive, got {t!r}")
    if not (s.x > 0 or (s.x == 0 and s.y > 0)):
        raise DomainError("survival asymptotic needs x > 0, or x = 0 and y > 0")
    return SURVIVAL_CONSTANT * h_eval(s) * t ** -0.25


def nth_passage_coeffs(n: int, b: float, decomposed: bool = False) -> AsymptoticCoeffs:
    """Constant 2^{1/4} Gamma(1/4) sqrt|b| / (sqrt(pi) (n-1)!) (9/4pi^2)^{n/2}.

    decomposed=True applies the 2^{1-n} carried by splitting
    sinh(pi gamma) / (2 cosh(pi gamma/3))^n into sech powers.
    """
    if n < 1:
        raise DomainError(f"passage index must be >= 1, got {n!r}")
    if b == 0:
        raise DomainError("n-th passage asymptotic needs b != 0")
    c = 2.0 ** 0.25 * math.exp(ln_gamma(0.25)) * math.sqrt(abs(b)) / (math.sqrt(math.pi) * math.factorial(n - 1))
    c *= _PASSAGE_RATE ** (n / 2.0)
    if decomposed:
        c *= 2.0 ** (1 - n)
    return AsymptoticCoeffs(n=n, leading_constant=c, log_power=n - 1)


def nth_passage_asymptotic(t: float, n: int, b: float, decomposed: bool = False) -> float:
    """P_{(0,b)}(T_0^{(n)} > t) for large t."""
    if not t > 1:
        raise DomainError(f"t must exceed 1, got {t!r}")
    return nth_passage_coeffs(n, b, decomposed).value(t)


def general_nth_passage_asymptotic(t: float, n: int, s: PhaseState, decomposed: bool = False) -> float:
    """Same law from any start, with sqrt|b| replaced by the two-sided h."""
    weight = two_sided_h(s)
    if weight <= 0:
        raise DomainError("start has zero harmonic weight")
    return nth_passage_asymptotic(t, n, weight * weight, decomposed)


def nth_passage_joint_density(n: int, b: float, t: float, z: float, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Joint density of (T_0^{(n)}, |B_{T_0^{(n)}}| / sqrt(t)) from (0, b).

    The Macdonald-integral display is the density of |B| evaluated at
    |B| = z sqrt(t); the factor sqrt(t) turns it into a density in z.
    """
    if n < 1 or not b > 0 or not t > 0 or not z > 0:
        raise DomainError("need n >= 1, b > 0, t > 0, z > 0")
    a = 4.0 * b * z / math.sqrt(t)
    pref = math.exp(-2.0 * b * b / t - 2.0 * z * z) / (math.pi ** 2 * b * math.sqrt(t))
    return max(pref * passage_kernel_integral(n, a, spec), 0.0)


def nth_passage_density_asymptotic(n: int, b: float, t: float, z: float, decomposed: bool = False) -> float:
    """Large-t form of nth_passage_joint_density."""
    c = 4.0 * math.sqrt(2.0 * b) / (math.sqrt(math.pi) * math.factorial(n - 1)) * _PASSAGE_RATE ** (n / 2.0)
    if decomposed:
        c *= 2.0 ** (1 - n)
    return c * math.log(t) ** (n - 1) * t ** -1.25 * math.exp(-2.0 * z * z) * z ** 1.5


def first_passage_density(y: float, t: float, z: float) -> float:
    """P_{(0,y)}(T_0 in dt, B_{T_0} in dz) for y > 0 and z <= 0 (mirrored for y < 0)."""
    if y < 0:
        return first_passage_density(-y, t, -z)
    if not y > 0 or not t > 0 or z > 0:
        return 0.0
    w = -z
    expo = -2.0 / t * (y * y - y * w + w * w)
    upper = 4.0 * y * w / t
    # int_0^L theta^{-1/2} e^{-3 theta/2} d theta / sqrt(pi) = sqrt(2/3) erf(sqrt(3L/2))
    inner = math.sqrt(2.0 / 3.0) * math.erf(math.sqrt(1.5 * upper))
    return 3.0 * w / (t * t * math.pi * math.sqrt(2.0)) * math.exp(expo) * inner


def unit_survival(omega: float, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """P_{(0,omega)}(T_0 > 1); by scaling P_{(0,w)}(T_0 > r) = unit_survival(|w| / sqrt(r))."""
    omega = abs(omega)
    if omega == 0.0:
        return 0.0

    def in_time(t: float) -> float:
        if t <= 0:
            return 0.0
        return quad(lambda w: first_passage_density(omega, t, -w), 0.0, np.inf, spec)

    return min(max(1.0 - quad(in_time, 0.0, 1.0, spec), 0.0), 1.0)


@lru_cache(maxsize=1)
def _unit_survival_spline() -> CubicSpline:
    grid = np.concatenate([[0.0], np.geomspace(1e-6, 12.0, 120)])
    values = np.array([unit_survival(w) for w in grid])
    # smooth in sqrt(omega): S ~ c sqrt(omega) near 0
    return CubicSpline(np.sqrt(grid), values)


def self_start_survival(w: float, r: float) -> float:
    """P_{(0,w)}(T_0 > r) from the tabulated unit survival."""
    if r <= 0:
        return 1.0
    omega = abs(w) / math.sqrt(r)
    if omega >= 12.0:
        return 1.0
    return float(np.clip(_unit_survival_spline()(math.sqrt(omega)), 0.0, 1.0))


# ---------- Laws under the conditioned measure ----------

def q_hit_probability(s: PhaseState, a: float) -> float:
    """Q(T_a < inf) = 1 - h(x - a, y) / h(x, y) for 0 <= a < x."""
    if not 0 <= a < s.x:
        raise DomainError(f"need 0 <= a < x, got a={a!r}, x={s.x!r}")
    return 1.0 - h_eval(PhaseState(s.x - a, s.y)) / h_eval(s)


def lemma_hbta_rhs(s: PhaseState, a: float) -> float:
    """E[h(a, B_{T_a})] = h(x, y) - h(x - a, y) for 0 <= a < x."""
    if not 0 <= a < s.x:
        raise DomainError(f"need 0 <= a < x, got a={a!r}, x={s.x!r}")
    return h_eval(s) - h_eval(PhaseState(s.x - a, s.y))


def passage_weight_q(s: PhaseState, a: float, z):
    """Density ratio of (T_a, B_{T_a}) under Q against P: h(a, z) / h(x, y).

    An array of velocities z is weighted through the harmonic table.
    """
    if not 0 <= a < s.x:
        raise DomainError(f"need 0 <= a < x, got a={a!r}, x={s.x!r}")
    if np.ndim(z) == 0:
        return h_eval(PhaseState(a, float(z))) / h_eval(s)
    return harmonic_table().h(np.full(np.shape(z), float(a)), z) / h_eval(s)


def sigma_weight_q(s: PhaseState, b: float, u):
    """Density ratio of (sigma_b, X_{sigma_b}) under Q against P: h(u, b) / h(x, y), zero for u < 0."""
    if np.ndim(u) == 0:
        return 0.0 if u < 0 else h_eval(PhaseState(float(u), b)) / h_eval(s)
    u = np.asarray(u, dtype=float)
    return np.where(u >= 0, harmonic_table().h(np.maximum(u, 0.0), b), 0.0) / h_eval(s)


def qa_selfstart_density(a: float, y: float, t: float, z: float) -> float:
    """Q_{(a,y)}(T_a in dt, B_{T_a} in dz) for a > 0, y > 0, z <= 0."""
    if not (a > 0 and y > 0 and t > 0):
        raise DomainError("need a > 0, y > 0, t > 0")
    if z > 0:
        raise DomainError("velocity at the passage must be <= 0")
    if z == 0:
        return 0.0
    weight = h_eval(PhaseState(a, z)) / h_eval(PhaseState(a, y))
    return weight * first_passage_density(y, t, z)


def lastpassage_cdf(s: PhaseState, a: float, killed: BinnedDensity) -> float:
    """Q(g_a <= t) = (1/h(x,y)) int int h(u, v) pbar_t(x, y; u + a, v) du dv.

    `killed` is a binned estimate of pbar_t(x, y; ., .) at the horizon t.
    """
    if not 0 <= a < s.x:
        raise DomainError(f"need 0 <= a < x, got a={a!r}, x={s.x!r}")
    uc = 0.5 * (killed.u_edges[1:] + killed.u_edges[:-1])
    vc = 0.5 * (killed.v_edges[1:] + killed.v_edges[:-1])
    area = np.outer(np.diff(killed.u_edges), np.diff(killed.v_edges))
    U, V = np.meshgrid(uc - a, vc, indexing="ij")
    keep = U > 0
    weights = np.zeros_like(U)
    weights[keep] = harmonic_table().h(U[keep], V[keep])
    return float(np.sum(weights * killed.density * area) / h_eval(s))


# ---------- Penalisation by the last zero before t ----------

def _lastpassage_tail(phi: PenaltyWeight, x: float, y: float, offset: float, spec: QuadratureSpec) -> float:
    """int |z|^{3/2} int_0^inf phi(offset + s) p_s(x, y; 0, z) ds dz."""
    end = phi.support_end - offset
    if end <= 0:
        return 0.0
    knots = sorted({0.0, end, *(z - offset for z in phi.zs if 0 < z - offset < end)})
    total = 0.0
    for lo, hi in zip(knots[:-1], knots[1:]):
        total += quad(lambda r: phi(offset + r) * crossing_intensity(r, x, y) if r > 0 else 0.0, lo, hi, spec)
    return total


def phi_cap_lastpassage(s: PhaseState, phi: PenaltyWeight, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Phi(x, y) = phi(0) (two-sided h) + int |z|^{3/2} int phi(s) p_s(x, y; 0, z) ds dz."""
    return phi(0.0) * two_sided_h(s) + _lastpassage_tail(phi, s.x, s.y, 0.0, spec)


def lastpassage_future(t: float, s: PhaseState, phi: PenaltyWeight, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """N_t = int |z|^{3/2} int phi(t + s) p_s(X_t, B_t; 0, z) ds dz."""
    return _lastpassage_tail(phi, s.x, s.y, t, spec)


def martingale_lastpassage(t: float, g0t: float | None, s: PhaseState, phi: PenaltyWeight,
                           spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """M_t = phi(g_0^{(t)}) (two-sided h)(X_t, B_t) + N_t.

    g0t=None marks a path that has not touched 0 by time t; it carries phi(0).
    """
    if t < 0:
        raise DomainError("t must be non-negative")
    if g0t is not None and not 0 <= g0t <= t:
        raise DomainError(f"need 0 <= g0t <= t, got {g0t!r}")
    g = 0.0 if g0t is None else g0t
    return phi(g) * two_sided_h(s) + lastpassage_future(t, s, phi, spec)


def azema_ratio(t: float, g0t: float | None, s: PhaseState, phi: PenaltyWeight,
                spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Z_t = N_t / M_t, in [0, 1]."""
    future = lastpassage_future(t, s, phi, spec)
    if future == 0.0:
        return 0.0
    total = martingale_lastpassage(t, g0t, s, phi, spec)
    if not total > 0:
        raise DomainError("martingale vanished where the future term is positive")
    return min(future / total, 1.0)


def lastpassage_future_array(t: float, x, y, phi: PenaltyWeight, nodes: int = 48) -> np.ndarray:
    """Vectorised N_t by Gauss-Legendre in s after the map s = lo + (hi - lo) tau^4."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    end = phi.support_end - t
    out = np.zeros(np.broadcast(x, y).shape)
    if end <= 0:
        return out
    tau, w = np.polynomial.legendre.leggauss(nodes)
    tau = 0.5 * (tau + 1.0)
    w = 0.5 * w
    knots = sorted({0.0, end, *(z - t for z in phi.zs if 0 < z - t < end)})
    for lo, hi in zip(knots[:-1], knots[1:]):
        r = lo + (hi - lo) * tau ** 4
        jac = 4.0 * (hi - lo) * tau ** 3
        weights = phi(t + r) * jac * w
        for rk, wk in zip(r, weights):
            if wk != 0.0:
                out += wk * crossing_intensity(rk, x, y)
    return out


# ---------- Penalisation by the running supremum ----------

def _integral_of_h(lo: float, hi: float, x: float, y: float, spec: QuadratureSpec) -> float:
    """int_lo^hi h(z - x, -y) dz for lo >= x."""
    return quad(lambda z: h_eval(PhaseState(max(z - x, 0.0), -y)), lo, hi, spec)


def _supremum_parts(phi: PenaltyWeight, lower: float, x: float, y: float, spec: QuadratureSpec) -> float:
    """-int_lower^inf phi'(z) h(z - x, -y) dz."""
    total = 0.0
    for lo, hi, slope in phi.segments():
        lo = max(lo, lower)
        if hi > lo:
            total -= slope * _integral_of_h(lo, hi, x, y, spec)
    return total


def phi_cap_supremum(s: PhaseState, phi: PenaltyWeight, spec: QuadratureSpec = DEFAULT_SPEC,
                     route: Literal["parts", "direct"] = "parts") -> float:
    """Phi(x, y) = phi(x) h(0, -y) + int_x^inf phi(z) d/dz h(z - x, -y) dz.

    route="parts" integrates by parts against phi'; route="direct" integrates
    phi times the x-derivative of h.
    """
    if route == "parts":
        return _supremum_parts(phi, s.x, s.x, s.y, spec)
    if route != "direct":
        raise DomainError(f"unknown route {route!r}")
    atom = phi(s.x) * math.sqrt(max(-s.y, 0.0))
    end = phi.support_end
    if end <= s.x:
        return atom
    knots = sorted({s.x, end, *(z for z in phi.zs if s.x < z < end)})
    body = 0.0
    for lo, hi in zip(knots[:-1], knots[1:]):
        body += quad(lambda z: phi(z) * h_grad(PhaseState(z - s.x, -s.y))[0] if z > s.x else 0.0, lo, hi, spec)
    return atom + body


def martingale_supremum(s_run: float, s: PhaseState, phi: PenaltyWeight, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """M = phi(S) h(S - X, -B) + int_S^inf phi(z) d/dz h(z - X, -B) dz."""
    if s_run < s.x:
        raise DomainError(f"running supremum {s_run!r} below position {s.x!r}")
    return _supremum_parts(phi, s_run, s.x, s.y, spec)


def s_infinity_atom(s: PhaseState, phi: PenaltyWeight, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Q^phi(S_inf = x) = phi(x) h(0, -y) / Phi(x, y)."""
    return phi(s.x) * math.sqrt(max(-s.y, 0.0)) / phi_cap_supremum(s, phi, spec)


def s_infinity_law(s: PhaseState, phi: PenaltyWeight, c: float, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Q^phi(S_inf > c) = int_c^inf phi(z) d/dz h(z - x, -y) dz / Phi(x, y) for c > x."""
    if not c > s.x:
        raise DomainError(f"need c > x, got c={c!r}, x={s.x!r}")
    if c >= phi.support_end:
        return 0.0
    tail = -phi(c) * h_eval(PhaseState(c - s.x, -s.y)) + _supremum_parts(phi, c, s.x, s.y, spec)
    return min(max(tail / phi_cap_supremum(s, phi, spec), 0.0), 1.0)


def supremum_integral_array(lower, x, y, phi: PenaltyWeight, nodes: int = 24) -> np.ndarray:
    """Vectorised -int_lower^inf phi'(z) h(z - x, -y) dz with per-path lower limits."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    x = np.broadcast_to(np.asarray(x, dtype=float), lower.shape)
    y = np.broadcast_to(np.asarray(y, dtype=float), lower.shape)
    table = harmonic_table()
    tau, w = np.polynomial.legendre.leggauss(nodes)
    out = np.zeros(lower.shape)
    for lo, hi, slope in phi.segments():
        a = np.maximum(lo, lower)
        span = np.maximum(hi - a, 0.0)
        if not span.any():
            continue
        for tk, wk in zip(tau, w):
            z = a + 0.5 * (tk + 1.0) * span
            out -= slope * 0.5 * wk * span * table.h(np.maximum(z - x, 0.0), -y)
    return out


def supremum_tail_array(c: float, b, phi: PenaltyWeight) -> np.ndarray:
    """int_c^inf phi(z) d/dz h(z - c, -b) dz at an upward passage of c (b >= 0)."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    return supremum_integral_array(np.full(b.shape, c), c, b, phi)


# ---------- Last zero before t ----------

def triplet_density_g0(t: float, sfrom: PhaseState, s_split: float, sto: PhaseState,
                       killed_density: KilledDensity, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Density of (g_0^{(t)}, X_t, B_t) at (s_split, u, v):

        int |z| p_s(0, z; -x, y) pbar_{t-s}(0, z; u, v) dz.
    """
    if not 0 < s_split < t:
        raise DomainError(f"need 0 < s < t, got s={s_split!r}, t={t!r}")
    s = s_split
    _, m, var = _zero_crossing_law(s, sfrom.x, sfrom.y)
    sd = math.sqrt(float(var))
    m = float(m)
    origin = PhaseState(-sfrom.x, sfrom.y)

    def integrand(z: float) -> float:
        if z == 0.0:
            return 0.0
        return abs(z) * transition_density(s, PhaseState(0.0, z), origin) * killed_density(t - s, z, sto.x, sto.y)

    lo, hi = m - 9 * sd, m + 9 * sd
    pts = [0.0] if lo < 0 < hi else None
    return quad(integrand, lo, hi, spec, points=pts)


def triplet_cell_probability(t: float, s_lo: float, s_hi: float, sfrom: PhaseState, family: CellFamily,
                             z_max: float = 3.5, z_points: int = 351, nodes: int = 10) -> tuple[float, float]:
    """P(g_0^{(t)} in (s_lo, s_hi), (X_t, B_t) in cell) and the same integral over the table errors:

        int_{s_lo}^{s_hi} int_0^inf z p_s(x, y; 0, z) K(t - s, z) dz ds.

    Only upward crossings (z > 0) can end in a cell on the positive side.
    """
    if not 0 < s_lo < s_hi < t:
        raise DomainError(f"need 0 < s_lo < s_hi < t, got ({s_lo!r}, {s_hi!r}), t={t!r}")
    zs = np.linspace(0.0, z_max, z_points)
    tau, w = np.polynomial.legendre.leggauss(nodes)
    half = 0.5 * (s_hi - s_lo)
    prob = spread = 0.0
    for tk, wk in zip(tau, w):
        s = s_lo + half * (tk + 1.0)
        crossing = zs * transition_density_array(s, sfrom.x, sfrom.y, 0.0, zs)
        k, err = family.along_z(t - s, zs)
        prob += wk * np.trapezoid(crossing * k, zs)
        spread += wk * np.trapezoid(crossing * err, zs)
    return float(half * prob), float(half * spread)


def g0_marginal_density(t: float, s_split: float, sfrom: PhaseState, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Density of g_0^{(t)} on (0, t): int |z| p_s(x, y; 0, z) P_{(0,z)}(T_0 > t - s) dz."""
    if not 0 < s_split < t:
        raise DomainError(f"need 0 < s < t, got s={s_split!r}, t={t!r}")
    dens, m, var = _zero_crossing_law(s_split, sfrom.x, sfrom.y)
    dens, m, sd = float(dens), float(m), math.sqrt(float(var))
    if dens == 0.0:
        return 0.0
    r = t - s_split

    def integrand(z: float) -> float:
        g = math.exp(-0.5 * ((z - m) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
        return abs(z) * g * self_start_survival(z, r)

    lo, hi = m - 9 * sd, m + 9 * sd
    pts = [0.0] if lo < 0 < hi else None
    return dens * quad(integrand, lo, hi, spec, points=pts)


def penalised_mean_asymptotic(t: float, s: PhaseState, phi: PenaltyWeight,
                              kind: Literal["lastpassage", "supremum"] = "lastpassage",
                              spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """E[phi(g_0^{(t)})] or E[phi(S_t)] ~ C t^{-1/4} Phi(x, y)."""
    if not t > 0:
        raise DomainError("t must be positive")
    cap = phi_cap_lastpassage(s, phi, spec) if kind == "lastpassage" else phi_cap_supremum(s, phi, spec)
    return SURVIVAL_CONSTANT * t ** -0.25 * cap


def growth_bound_holds(points: Sequence[PhaseState], a: float = 1.0, b: float = 1.0) -> bool:
    """h(x, y) <= a x^{1/6} + b sqrt|y| on every point."""
    return all(h_eval(p) <= a * p.x ** (1 / 6) + b * math.sqrt(abs(p.y)) for p in points)
