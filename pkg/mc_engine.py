"""Monte Carlo simulation of integrated Brownian motion.

Unconditioned paths use the exact Gaussian law of (int_0^h B, B_h) on each
step, so sampled states carry no discretisation bias; passage times are placed
by the cubic Hermite interpolant of X (X is C^1 with X' = B at both ends of a
step). The conditioned process is integrated with Euler-Maruyama on an
adaptive per-path step. Estimators fan out over Philox streams and merge in
shard order so a result depends only on (seed, stream, n_paths, shards).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple, Sequence, TypeVar

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from ibm_core import PhaseState, harmonic_table
from specfun import DomainError
from utility import thread_cap

logger = logging.getLogger(__name__)

DT_MIN = 1e-8
DEFAULT_SHARDS = 8
_BISECTION_STEPS = 48
_SQRT3 = math.sqrt(3.0)

T = TypeVar("T")


class StepCollapseError(RuntimeError):
    """Adaptive conditioned step fell below dt_min."""

    def __init__(self, message: str, time: float, state: PhaseState):
        super().__init__(f"{message} (t={time!r}, x={state.x!r}, y={state.y!r})")
        self.time = time
        self.state = state


class BarrierCrossingError(RuntimeError):
    """A conditioned path reached or crossed 0."""

    def __init__(self, message: str, paths: int):
        super().__init__(f"{message} ({paths} path(s))")
        self.paths = paths


# ---------- Configuration types ----------

@dataclass(frozen=True, slots=True)
class RngSpec:
    """(seed, stream) naming a family of independent Philox generators, one per shard."""
    seed: int
    stream: int = 0

    def __post_init__(self) -> None:
        for name in ("seed", "stream"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or not 0 <= value < 2 ** 64:
                raise DomainError(f"{name} must be a 64-bit unsigned integer, got {value!r}")

    def generator(self, shard: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream), int(shard)))
        return np.random.Generator(np.random.Philox(seq))

    def child(self, offset: int) -> "RngSpec":
        return RngSpec(self.seed, (self.stream + offset) % 2 ** 64)


@dataclass(frozen=True, slots=True)
class PathGrid:
    """Time stepping: step dt * (1 + growth * t) up to horizon; growth=0 is uniform."""
    dt: float
    horizon: float
    growth: float = 0.0

    def __post_init__(self) -> None:
        if not (self.dt > 0 and self.horizon > 0):
            raise DomainError("dt and horizon must be positive")
        if self.dt > self.horizon:
            raise DomainError(f"dt={self.dt!r} exceeds horizon={self.horizon!r}")
        if self.horizon / self.dt > 1e9:
            raise DomainError("more than 1e9 steps requested")
        if self.growth < 0:
            raise DomainError("growth must be non-negative")

    def step_at(self, t: float) -> float:
        return self.dt * (1.0 + self.growth * t)

    def stops(self, checkpoints: Sequence[float] = ()) -> list[float]:
        inside = {float(c) for c in checkpoints if 0 < c < self.horizon}
        if any(c > self.horizon for c in checkpoints):
            raise DomainError("checkpoint beyond horizon")
        return sorted(inside | {float(self.horizon)})


@dataclass(frozen=True, slots=True)
class EstimateCI:
    mean: float
    stderr: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise DomainError("estimate needs n >= 1")
        if not self.stderr >= 0:
            raise DomainError("stderr must be non-negative")

    @classmethod
    def from_values(cls, values) -> "EstimateCI":
        m = _Moments.of(np.asarray(values, dtype=float))
        return m.estimate()

    def z_score(self, expected: float, extra: float = 0.0) -> float:
        spread = math.hypot(self.stderr, extra)
        if spread == 0:
            return 0.0 if self.mean == expected else math.inf
        return (self.mean - expected) / spread

    def agrees(self, expected: float, k: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.mean - expected) <= k * self.stderr + slack


class _Moments(NamedTuple):
    n: int
    mean: float
    m2: float

    @classmethod
    def of(cls, v: np.ndarray) -> "_Moments":
        n = int(v.size)
        if n == 0:
            return cls(0, 0.0, 0.0)
        if not np.all(np.isfinite(v)):
            raise DomainError("functional returned non-finite values")
        if np.all(v == v[0]):
            return cls(n, float(v[0]), 0.0)
        mean = math.fsum(v.tolist()) / n
        return cls(n, mean, math.fsum(((v - mean) ** 2).tolist()))

    def merge(self, other: "_Moments") -> "_Moments":
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        return _Moments(n, mean, self.m2 + other.m2 + delta * delta * self.n * other.n / n)

    def estimate(self) -> EstimateCI:
        if self.n < 2:
            return EstimateCI(self.mean, 0.0, max(self.n, 1))
        return EstimateCI(self.mean, math.sqrt(self.m2 / (self.n - 1) / self.n), self.n)


# ---------- Paths and ensembles ----------

@dataclass(frozen=True)
class Path:
    """One trajectory: samples (t, x, y) and the crossings found between them."""
    times: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    crossings: tuple[tuple[float, float, float], ...]
    ran_to: float

    def __post_init__(self) -> None:
        if not (self.times.shape == self.xs.shape == self.ys.shape) or self.times.size == 0:
            raise DomainError("path samples must be non-empty and aligned")
        if np.any(np.diff(self.times) <= 0):
            raise DomainError("path sample times must be strictly increasing")

    @property
    def samples(self) -> list[tuple[float, float, float]]:
        return list(zip(self.times.tolist(), self.xs.tolist(), self.ys.tolist()))

    @property
    def start(self) -> PhaseState:
        return PhaseState(float(self.xs[0]), float(self.ys[0]))


@dataclass(frozen=True)
class Snapshot:
    """State of every path at time t; retired paths carry NaN positions."""
    t: float
    x: np.ndarray
    y: np.ndarray
    last_zero: np.ndarray
    sup: np.ndarray
    retired: np.ndarray
    min_gap: np.ndarray | None = None

    @property
    def touched(self) -> np.ndarray:
        return ~np.isnan(self.last_zero)


@dataclass(frozen=True)
class EnsembleResult:
    start: PhaseState
    n_paths: int
    ran_to: float
    passage_times: dict[float, np.ndarray]
    passage_velocities: dict[float, np.ndarray]
    crossing_counts: dict[float, np.ndarray]
    sigma_times: dict[float, np.ndarray]
    sigma_positions: dict[float, np.ndarray]
    snapshots: dict[float, Snapshot]
    record: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def first_passage(self, level: float = 0.0) -> np.ndarray:
        return self.passage_times[level][:, 0]

    def survived(self, t: float, level: float = 0.0) -> np.ndarray:
        """No passage through level on [0, t] (t <= ran_to)."""
        first = self.first_passage(level)
        return np.isnan(first) | (first > t)

    def snapshot(self, t: float) -> Snapshot:
        for key, snap in self.snapshots.items():
            if abs(key - t) <= 1e-12 * max(1.0, abs(t)):
                return snap
        raise KeyError(f"no snapshot at t={t!r}")

    @property
    def final(self) -> Snapshot:
        return self.snapshots[self.ran_to]


# ---------- Step kernels ----------

def sample_increment(dt: float, rng: np.random.Generator, size: int | None = None):
    """(dX, dB) from velocity 0: Var dB = dt, Var dX = dt^3/3, Cov = dt^2/2."""
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt!r}")
    z = rng.standard_normal((2,) if size is None else (2, size))
    return _increment(dt, z[0], z[1])


def _increment(h: float, z1, z2):
    db = math.sqrt(h) * z1
    dx = h ** 1.5 * (0.5 * z1 + z2 / (2.0 * _SQRT3))
    return dx, db


def _hermite(s, h, x0, y0, x1, y1):
    s2 = s * s
    s3 = s2 * s
    return (2 * s3 - 3 * s2 + 1) * x0 + (s3 - 2 * s2 + s) * h * y0 + (3 * s2 - 2 * s3) * x1 + (s3 - s2) * h * y1


def _hermite_slope(s, h, x0, y0, x1, y1):
    s2 = s * s
    return 6 * (s2 - s) * (x0 - x1) / h + (3 * s2 - 4 * s + 1) * y0 + (3 * s2 - 2 * s) * y1


def _crossing_mask(d0, y0, d1):
    """Steps whose Hermite cubic changes sign; a step leaving the level counts when it returns."""
    return (d0 * d1 < 0) | ((d0 == 0) & (d1 * y0 < 0)) | ((d1 == 0) & (d0 != 0))


def _locate_crossing(h, d0, y0, d1, y1):
    """Fraction s in (0, 1] of the step where the cubic first changes sign (bisection)."""
    lead = np.where(d0 == 0, np.sign(y0), np.sign(d0))
    lo = np.zeros_like(d0)
    hi = np.ones_like(d0)
    for _ in range(_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        same = np.sign(_hermite(mid, h, d0, y0, d1, y1)) == lead
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    return hi


def _step_maximum(h, x0, y0, x1, y1):
    """max of the Hermite cubic over the step."""
    a = 6 * x0 + 3 * h * y0 - 6 * x1 + 3 * h * y1
    b = -6 * x0 - 4 * h * y0 + 6 * x1 - 2 * h * y1
    c = h * y0
    best = np.maximum(x0, x1)
    disc = b * b - 4 * a * c
    root = np.sqrt(np.where(disc >= 0, disc, 0.0))
    flat = a == 0
    safe_a = np.where(flat, 1.0, a)
    safe_b = np.where(b == 0, 1.0, b)
    for sign in (-1.0, 1.0):
        s = np.where(flat, np.where(b != 0, -c / safe_b, -1.0), (-b + sign * root) / (2 * safe_a))
        inside = (disc >= 0) & (s > 0) & (s < 1)
        value = _hermite(np.clip(s, 0.0, 1.0), h, x0, y0, x1, y1)
        best = np.where(inside, np.maximum(best, value), best)
    return best


def _as_generator(rng: np.random.Generator | RngSpec) -> np.random.Generator:
    return rng.generator() if isinstance(rng, RngSpec) else rng


def _substeps(grid: PathGrid, t: float, stop: float):
    """Yield (t, h) steps covering [t, stop] without a sliver at the end."""
    while t < stop:
        remaining = stop - t
        k = max(1, math.ceil(remaining / grid.step_at(t) - 1e-9))
        h = remaining / k
        nxt = stop if k == 1 else t + h
        yield t, nxt - t
        t = nxt


def simulate_ensemble(start: PhaseState, grid: PathGrid, n_paths: int, rng: np.random.Generator | RngSpec, *,
                      levels: Sequence[float] = (0.0,), count: int = 1, sigma_levels: Sequence[float] = (),
                      checkpoints: Sequence[float] = (), antithetic: bool = False, track_sup: bool = False,
                      stop_when_done: bool = False, record: bool = False) -> EnsembleResult:
    """Simulate n_paths exact-law paths of (X, B) on the grid.

    Args:
        levels: X-levels whose first `count` passages are recorded
        sigma_levels: B-levels whose first passage time and X there are recorded
        checkpoints: times at which a Snapshot of all paths is kept (plus the horizon)
        antithetic: second half of the paths uses the negated normals of the first half
        stop_when_done: retire a path once all its passages are found
        record: keep every sample (small ensembles only)
    """
    if n_paths < 1:
        raise DomainError("n_paths must be >= 1")
    if count < 1:
        raise DomainError("count must be >= 1")
    gen = _as_generator(rng)
    levels = tuple(float(v) for v in levels)
    sigma_levels = tuple(float(v) for v in sigma_levels)
    n = n_paths

    X = np.full(n, float(start.x))
    Y = np.full(n, float(start.y))
    last_zero = np.full(n, 0.0 if start.x == 0 else np.nan)
    sup = np.full(n, float(start.x))
    retired = np.zeros(n, dtype=bool)
    p_times = {v: np.full((n, count), np.nan) for v in levels}
    p_vels = {v: np.full((n, count), np.nan) for v in levels}
    counts = {v: np.zeros(n, dtype=np.int64) for v in levels}
    s_times = {b: np.full(n, 0.0 if start.y == b else np.nan) for b in sigma_levels}
    s_pos = {b: np.full(n, float(start.x) if start.y == b else np.nan) for b in sigma_levels}
    scan = sorted(set(levels) | {0.0})
    idx = np.arange(n)
    snapshots: dict[float, Snapshot] = {}
    trace = [(0.0, X.copy(), Y.copy())] if record else None
    half = (n + 1) // 2

    logger.debug("[SIM] %d paths from (%g, %g) to t=%g", n, start.x, start.y, grid.horizon)
    previous = 0.0
    for stop in grid.stops(checkpoints):
        for t, h in _substeps(grid, previous, stop):
            if idx.size == 0:
                break
            if antithetic:
                z = gen.standard_normal((2, half))
                z = np.concatenate([z, -z], axis=1)[:, :n][:, idx]
            else:
                z = gen.standard_normal((2, idx.size))
            x0, y0 = X[idx], Y[idx]
            dx, db = _increment(h, z[0], z[1])
            y1 = y0 + db
            x1 = x0 + y0 * h + dx

            for level in scan:
                d0, d1 = x0 - level, x1 - level
                hit = _crossing_mask(d0, y0, d1)
                if not hit.any():
                    continue
                s = _locate_crossing(h, d0[hit], y0[hit], d1[hit], y1[hit])
                when = t + s * h
                rows = idx[hit]
                if level == 0.0:
                    last_zero[rows] = when
                if level in counts:
                    seen = counts[level][rows]
                    room = seen < count
                    vel = _hermite_slope(s, h, d0[hit], y0[hit], d1[hit], y1[hit])
                    p_times[level][rows[room], seen[room]] = when[room]
                    p_vels[level][rows[room], seen[room]] = vel[room]
                    counts[level][rows] += 1

            if track_sup:
                sup[idx] = np.maximum(sup[idx], _step_maximum(h, x0, y0, x1, y1))
            for b in sigma_levels:
                pending = np.isnan(s_times[b][idx])
                hit = pending & ((y0 - b) * (y1 - b) <= 0) & (y1 != y0)
                if hit.any():
                    s = (b - y0[hit]) / (y1[hit] - y0[hit])
                    rows = idx[hit]
                    s_times[b][rows] = t + s * h
                    s_pos[b][rows] = _hermite(s, h, x0[hit], y0[hit], x1[hit], y1[hit])

            X[idx], Y[idx] = x1, y1
            if trace is not None:
                trace.append((t + h, X.copy(), Y.copy()))
            if stop_when_done and (levels or sigma_levels):
                done = np.ones(idx.size, dtype=bool)
                for level in levels:
                    done &= counts[level][idx] >= count
                for b in sigma_levels:
                    done &= ~np.isnan(s_times[b][idx])
                if done.any():
                    retired[idx[done]] = True
                    idx = idx[~done]
        snapshots[stop] = Snapshot(
            t=stop,
            x=np.where(retired, np.nan, X),
            y=np.where(retired, np.nan, Y),
            last_zero=last_zero.copy(),
            sup=sup.copy(),
            retired=retired.copy(),
        )
        previous = stop

    record_arrays = None
    if trace is not None:
        record_arrays = (np.array([r[0] for r in trace]), np.stack([r[1] for r in trace]), np.stack([r[2] for r in trace]))
    return EnsembleResult(start, n, float(grid.horizon), p_times, p_vels, counts, s_times, s_pos, snapshots, record_arrays)


# ---------- Single paths ----------

def _scan_crossings(times: np.ndarray, xs: np.ndarray, ys: np.ndarray, level: float) -> list[tuple[float, float]]:
    h = np.diff(times)
    d0, d1 = xs[:-1] - level, xs[1:] - level
    y0, y1 = ys[:-1], ys[1:]
    hit = _crossing_mask(d0, y0, d1)
    if not hit.any():
        return []
    s = _locate_crossing(h[hit], d0[hit], y0[hit], d1[hit], y1[hit])
    when = times[:-1][hit] + s * h[hit]
    vel = _hermite_slope(s, h[hit], d0[hit], y0[hit], d1[hit], y1[hit])
    return list(zip(when.tolist(), vel.tolist()))


def simulate_path(start: PhaseState, grid: PathGrid, rng: np.random.Generator | RngSpec,
                  levels: Sequence[float] = (0.0,)) -> Path:
    """One exact-law path with every crossing of the given levels."""
    result = simulate_ensemble(start, grid, 1, rng, levels=(), record=True)
    times, xs, ys = result.record
    xs, ys = xs[:, 0], ys[:, 0]
    crossings = [(float(level), when, vel) for level in levels for when, vel in _scan_crossings(times, xs, ys, level)]
    return Path(times, xs, ys, tuple(sorted(crossings, key=lambda c: c[1])), result.ran_to)


def passage_times(path: Path, level: float, count: int) -> list[tuple[float, float]]:
    """First `count` (time, velocity) crossings of X through level; fewer if the path ends first."""
    if count < 1:
        raise DomainError("count must be >= 1")
    return _scan_crossings(path.times, path.xs, path.ys, level)[:count]


class PathFunctionals(NamedTuple):
    g0t: float
    touched: bool
    sup: float
    sigma_b_times: tuple[float, ...]


def track_functionals(path: Path, sigma_levels: Sequence[float] = ()) -> PathFunctionals:
    """Last zero up to ran_to, running supremum and first B-passage of each sigma level.

    A path that never touches 0 reports g0t = 0 with touched=False; a start on 0
    counts as touched at time 0.
    """
    zeros = _scan_crossings(path.times, path.xs, path.ys, 0.0)
    touched = bool(zeros) or path.xs[0] == 0.0
    g0t = zeros[-1][0] if zeros else 0.0
    h = np.diff(path.times)
    if h.size:
        sup = float(np.max(_step_maximum(h, path.xs[:-1], path.ys[:-1], path.xs[1:], path.ys[1:])))
        sup = max(sup, float(path.xs[0]))
    else:
        sup = float(path.xs[0])
    sigma = []
    for b in sigma_levels:
        d = path.ys - b
        if d[0] == 0:
            sigma.append(float(path.times[0]))
            continue
        k = np.flatnonzero(d[:-1] * d[1:] <= 0)
        if k.size == 0:
            sigma.append(math.nan)
            continue
        i = int(k[0])
        s = (b - path.ys[i]) / (path.ys[i + 1] - path.ys[i])
        sigma.append(float(path.times[i] + s * h[i]))
    return PathFunctionals(g0t, touched, sup, tuple(sigma))


# ---------- Conditioned process ----------

def _conditioned_admissible(start: PhaseState, sign: int) -> PhaseState:
    if sign not in (1, -1):
        raise DomainError("sign must be +1 or -1")
    s = start if sign == 1 else start.reflected()
    if not (s.x > 0 or (s.x == 0 and s.y > 0)):
        raise DomainError("conditioned start needs x > 0, or x = 0 and y > 0 (mirrored for sign=-1)")
    return s


def simulate_conditioned_ensemble(start: PhaseState, grid: PathGrid, n_paths: int,
                                  rng: np.random.Generator | RngSpec, *, sign: int = 1,
                                  levels: Sequence[float] = (), checkpoints: Sequence[float] = (),
                                  sigma_levels: Sequence[float] = (),
                                  dt_min: float = DT_MIN, stop_when_done: bool = False,
                                  record: bool = False) -> EnsembleResult:
    """Euler-Maruyama paths of dX = B dt, dB = dW + (1/h) dh/dy dt.

    Each path steps dt * min(1, x^{2/3} / (1 + y^2)), halved while x + y*step <= 0.
    sign=-1 simulates the process conditioned to stay negative.
    Snapshots carry min_gap, the running minimum of sign*X; a start on x = 0 is not counted.

    Raises:
        StepCollapseError: a step fell below dt_min
        BarrierCrossingError: a path reached 0
    """
    pos = _conditioned_admissible(start, sign)
    gen = _as_generator(rng)
    table = harmonic_table()
    n = n_paths
    # work on the positive copy; levels and outputs are mirrored back at the end
    lv = tuple(float(v) for v in levels)
    internal = tuple(sign * v for v in lv)
    X = np.full(n, pos.x)
    Y = np.full(n, pos.y)
    clock = np.zeros(n)
    sup = np.full(n, pos.x)
    inf = np.full(n, pos.x)
    gap = np.full(n, pos.x if pos.x > 0 else np.inf)
    p_times = {v: np.full((n, 1), np.nan) for v in lv}
    p_vels = {v: np.full((n, 1), np.nan) for v in lv}
    counts = {v: np.zeros(n, dtype=np.int64) for v in lv}
    sl = tuple(float(b) for b in sigma_levels)
    s_times = {b: np.full(n, 0.0 if sign * pos.y == b else np.nan) for b in sl}
    s_pos = {b: np.full(n, float(start.x) if sign * pos.y == b else np.nan) for b in sl}
    stops = grid.stops(checkpoints)
    target = np.zeros(n, dtype=np.int64)
    snap_x = {s: np.full(n, np.nan) for s in stops}
    snap_y = {s: np.full(n, np.nan) for s in stops}
    snap_sup = {s: np.full(n, np.nan) for s in stops}
    snap_gap = {s: np.full(n, np.nan) for s in stops}
    retired = np.zeros(n, dtype=bool)
    trace = [(0.0, float(X[0]), float(Y[0]))] if record else None
    idx = np.arange(n)
    stop_arr = np.array(stops)

    while idx.size:
        x, y, t = X[idx], Y[idx], clock[idx]
        goal = stop_arr[target[idx]]
        ratio = np.where(x > 0, x ** (2.0 / 3.0) / (1.0 + y * y), 1.0)
        h = np.minimum(grid.step_at(t) * np.minimum(1.0, ratio), goal - t)
        bad = x + y * h <= 0
        while bad.any():
            h = np.where(bad, 0.5 * h, h)
            if np.any(h[bad] < dt_min):
                k = int(np.flatnonzero(bad & (h < dt_min))[0])
                raise StepCollapseError("conditioned step collapsed", float(t[k]), PhaseState(float(x[k]), float(y[k])))
            bad = x + y * h <= 0
        # at x = 0 (start only, y > 0) h = sqrt(y) gives drift 1/(2y)
        inner = x > 0
        drift = np.where(inner, table.drift(np.where(inner, x, 1.0), y), 0.5 / np.where(inner, 1.0, y))
        z = gen.standard_normal(idx.size)
        x1 = x + y * h
        y1 = y + drift * h + np.sqrt(h) * z
        broken = ~(x1 > 0) | ~np.isfinite(y1)
        if broken.any():
            raise BarrierCrossingError("conditioned path left the positive half-plane", int(broken.sum()))

        for level, inner in zip(lv, internal):
            d0, d1 = x - inner, x1 - inner
            hit = (d0 * d1 < 0) | ((d1 == 0) & (d0 != 0))
            rows = idx[hit]
            fresh = counts[level][rows] == 0
            if fresh.any():
                s = d0[hit][fresh] / (d0[hit][fresh] - d1[hit][fresh])
                p_times[level][rows[fresh], 0] = t[hit][fresh] + s * h[hit][fresh]
                p_vels[level][rows[fresh], 0] = sign * (y[hit][fresh] + s * (y1[hit][fresh] - y[hit][fresh]))
            counts[level][rows] += 1

        for b in sl:
            yb = sign * b
            pending = np.isnan(s_times[b][idx])
            hit = pending & ((y - yb) * (y1 - yb) <= 0) & (y1 != y)
            if hit.any():
                s = (yb - y[hit]) / (y1[hit] - y[hit])
                rows = idx[hit]
                s_times[b][rows] = t[hit] + s * h[hit]
                s_pos[b][rows] = sign * (x[hit] + s * (x1[hit] - x[hit]))

        X[idx], Y[idx] = x1, y1
        clock[idx] = np.where(goal - (t + h) <= 1e-12 * np.maximum(1.0, goal), goal, t + h)
        sup[idx] = np.maximum(sup[idx], x1)
        inf[idx] = np.minimum(inf[idx], x1)
        gap[idx] = np.minimum(gap[idx], x1)
        if trace is not None:
            trace.append((float(clock[0]), float(X[0]), float(Y[0])))

        arrived = idx[clock[idx] >= stop_arr[target[idx]]]
        for k in np.unique(target[arrived]):
            rows = arrived[target[arrived] == k]
            when = stops[k]
            snap_x[when][rows] = X[rows]
            snap_y[when][rows] = Y[rows]
            snap_sup[when][rows] = sup[rows] if sign == 1 else -inf[rows]
            snap_gap[when][rows] = gap[rows]
        target[arrived] += 1
        finished = target[idx] >= len(stops)
        if stop_when_done and (lv or sl):
            done = np.ones(idx.size, dtype=bool)
            for level in lv:
                done &= counts[level][idx] >= 1
            for b in sl:
                done &= ~np.isnan(s_times[b][idx])
            retired[idx[done & ~finished]] = True
            finished |= done
        idx = idx[~finished]

    snapshots = {
        s: Snapshot(t=s, x=sign * snap_x[s], y=sign * snap_y[s], last_zero=np.full(n, np.nan),
                    sup=snap_sup[s], retired=np.isnan(snap_x[s]), min_gap=snap_gap[s])
        for s in stops
    }
    record_arrays = None
    if trace is not None:
        arr = np.array(trace)
        record_arrays = (arr[:, 0], sign * arr[:, 1:2], sign * arr[:, 2:3])
    logger.debug("[SIM] conditioned ensemble of %d paths done (retired %d early)", n, int(retired.sum()))
    return EnsembleResult(start, n, float(grid.horizon), p_times, p_vels, counts, s_times, s_pos, snapshots,
                          record_arrays)


def simulate_conditioned(start: PhaseState, grid: PathGrid, rng: np.random.Generator | RngSpec, *,
                         sign: int = 1, dt_min: float = DT_MIN) -> Path:
    """One conditioned path, every accepted step recorded."""
    result = simulate_conditioned_ensemble(start, grid, 1, rng, sign=sign, dt_min=dt_min, record=True)
    times, xs, ys = result.record
    keep = np.concatenate([[True], np.diff(times) > 0])
    return Path(times[keep], xs[keep, 0], ys[keep, 0], (), result.ran_to)


# ---------- Sharded estimators ----------

def _shard_sizes(n_paths: int, shards: int) -> list[int]:
    shards = max(1, min(shards, n_paths))
    base, extra = divmod(n_paths, shards)
    return [base + (1 if i < extra else 0) for i in range(shards)]


def run_shards(task: Callable[[int, int, np.random.Generator], T], n_paths: int, rng: RngSpec,
               shards: int = DEFAULT_SHARDS, threads: int | None = None) -> list[T]:
    """Run task(shard, size, generator) per shard; results come back in shard order."""
    sizes = _shard_sizes(n_paths, shards)
    workers = max(1, min(threads or thread_cap(), len(sizes)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(task, i, size, rng.generator(i)) for i, size in enumerate(sizes)]
        return [f.result() for f in futures]


Simulator = Callable[..., EnsembleResult]


def estimate_many(functional: Callable[[EnsembleResult], np.ndarray], start: PhaseState, grid: PathGrid,
                  n_paths: int, rng: RngSpec, *, shards: int = DEFAULT_SHARDS, threads: int | None = None,
                  simulator: Simulator = simulate_ensemble, **sim_kwargs) -> list[EstimateCI]:
    """Mean and standard error of each column of functional(ensemble).

    functional maps an EnsembleResult with m paths to an (m,) or (m, k) array.
    """
    if n_paths < 2:
        raise DomainError("estimate needs n_paths >= 2")

    def task(shard: int, size: int, gen: np.random.Generator) -> list[_Moments]:
        values = np.asarray(functional(simulator(start, grid, size, gen, **sim_kwargs)), dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != size:
            raise DomainError(f"functional returned {values.shape[0]} rows for {size} paths")
        return [_Moments.of(values[:, j]) for j in range(values.shape[1])]

    parts = run_shards(task, n_paths, rng, shards, threads)
    merged = parts[0]
    for part in parts[1:]:
        merged = [a.merge(b) for a, b in zip(merged, part)]
    out = [m.estimate() for m in merged]
    logger.info("[SIM] %d paths in %d shard(s), %d estimate(s)", n_paths, len(parts), len(out))
    return out


def estimate(functional: Callable[[EnsembleResult], np.ndarray], start: PhaseState, grid: PathGrid,
             n_paths: int, rng: RngSpec, **kwargs) -> EstimateCI:
    """Single-column estimate_many."""
    return estimate_many(functional, start, grid, n_paths, rng, **kwargs)[0]


# ---------- Killed densities ----------

@dataclass(frozen=True)
class HistogramBins:
    u_edges: np.ndarray
    v_edges: np.ndarray

    def __post_init__(self) -> None:
        for edges in (self.u_edges, self.v_edges):
            if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
                raise DomainError("bin edges must be strictly increasing with at least two entries")

    @classmethod
    def uniform(cls, u_range: tuple[float, float], v_range: tuple[float, float], nu: int, nv: int) -> "HistogramBins":
        return cls(np.linspace(*u_range, nu + 1), np.linspace(*v_range, nv + 1))

    @property
    def area(self) -> np.ndarray:
        return np.outer(np.diff(self.u_edges), np.diff(self.v_edges))


@dataclass(frozen=True)
class KilledHistogram:
    """Binned estimate of pbar_t(x, y; u, v) from survivor counts."""
    u_edges: np.ndarray
    v_edges: np.ndarray
    counts: np.ndarray
    n_paths: int
    survivors: int

    @property
    def density(self) -> np.ndarray:
        return self.counts / (self.n_paths * HistogramBins(self.u_edges, self.v_edges).area)

    @property
    def stderr(self) -> np.ndarray:
        p = self.counts / self.n_paths
        sd = np.sqrt(p * (1 - p) * self.n_paths / max(self.n_paths - 1, 1))
        return sd / math.sqrt(self.n_paths) / HistogramBins(self.u_edges, self.v_edges).area

    @property
    def mass(self) -> float:
        return float(self.counts.sum()) / self.n_paths

    @property
    def survival(self) -> EstimateCI:
        p = self.survivors / self.n_paths
        n = self.n_paths
        return EstimateCI(p, math.sqrt(p * (1 - p) / max(n - 1, 1)), n)

    def cell(self, i: int, j: int) -> EstimateCI:
        return EstimateCI(float(self.density[i, j]), float(self.stderr[i, j]), self.n_paths)

    def __call__(self, u: float, v: float) -> float:
        i = int(np.searchsorted(self.u_edges, u, side="right")) - 1
        j = int(np.searchsorted(self.v_edges, v, side="right")) - 1
        if 0 <= i < self.counts.shape[0] and 0 <= j < self.counts.shape[1]:
            return float(self.density[i, j])
        return 0.0


def killed_density_histogram(start: PhaseState, t: float, bins: HistogramBins, n_paths: int, rng: RngSpec, *,
                             dt: float = 0.01, shards: int = DEFAULT_SHARDS,
                             threads: int | None = None) -> KilledHistogram:
    """Histogram of (X_t, B_t) over paths with T_0 > t."""
    if not (start.x > 0 or (start.x == 0 and start.y > 0)):
        raise DomainError("killed density needs x > 0, or x = 0 and y > 0")
    grid = PathGrid(min(dt, t), t)

    def task(shard: int, size: int, gen: np.random.Generator) -> tuple[np.ndarray, int]:
        result = simulate_ensemble(start, grid, size, gen, levels=(0.0,), stop_when_done=True)
        alive = result.survived(t)
        snap = result.final
        counts, _, _ = np.histogram2d(snap.x[alive], snap.y[alive], bins=(bins.u_edges, bins.v_edges))
        return counts.astype(np.int64), int(alive.sum())

    parts = run_shards(task, n_paths, rng, shards, threads)
    counts = sum((p[0] for p in parts[1:]), parts[0][0].copy())
    survivors = sum(p[1] for p in parts)
    return KilledHistogram(bins.u_edges, bins.v_edges, counts, n_paths, survivors)


@dataclass(frozen=True)
class KilledCellTable:
    """K(r, z) = P_{(0,z)}(T_0 > r, (X_r, B_r) in cell) on a (z, r) node grid."""
    z_nodes: np.ndarray
    r_nodes: np.ndarray
    prob: np.ndarray
    stderr: np.ndarray

    @cached_property
    def _interpolators(self) -> tuple[RegularGridInterpolator, RegularGridInterpolator]:
        grid = (self.z_nodes, self.r_nodes)
        return (RegularGridInterpolator(grid, self.prob, bounds_error=False, fill_value=0.0),
                RegularGridInterpolator(grid, self.stderr, bounds_error=False, fill_value=0.0))

    def __call__(self, r: float, z: float) -> float:
        if z <= 0:
            return 0.0
        return float(self._interpolators[0]((z, r)))

    def along_z(self, r: float, z) -> tuple[np.ndarray, np.ndarray]:
        """(K, stderr of K) at one r for an array of z; zero for z <= 0."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        points = np.column_stack([z, np.full(z.shape, r)])
        prob, err = (np.where(z > 0, interp(points), 0.0) for interp in self._interpolators)
        return prob, err

    def as_density(self, cell: tuple[float, float, float, float]) -> Callable[[float, float, float, float], float]:
        """(r, z, u, v) -> K(r, z) / area inside cell, 0 outside: the killed density flattened over the cell."""
        u_lo, u_hi, v_lo, v_hi = cell
        area = (u_hi - u_lo) * (v_hi - v_lo)
        if not area > 0:
            raise DomainError(f"cell {cell!r} has no area")

        def density(r: float, z: float, u: float, v: float) -> float:
            if not (u_lo <= u < u_hi and v_lo <= v < v_hi):
                return 0.0
            return self(r, z) / area

        return density


def killed_cell_family(z_nodes: Sequence[float], r_nodes: Sequence[float],
                       cell: tuple[float, float, float, float], n_paths: int, rng: RngSpec, *,
                       dt: float = 0.01, threads: int | None = None) -> KilledCellTable:
    """Killed-process cell probabilities from (0, z), z > 0, at the times r_nodes.

    A z = 0 row and an r = 0 column are added so interpolation reaches the edges.
    """
    u_lo, u_hi, v_lo, v_hi = cell
    zs = np.array(sorted(float(z) for z in z_nodes if z > 0))
    rs = np.array(sorted(float(r) for r in r_nodes if r > 0))
    if zs.size == 0 or rs.size == 0:
        raise DomainError("need positive z and r nodes")
    grid = PathGrid(min(dt, rs[-1]), float(rs[-1]))

    def node(j: int) -> tuple[np.ndarray, np.ndarray]:
        result = simulate_ensemble(PhaseState(0.0, float(zs[j])), grid, n_paths, rng.generator(j),
                                   levels=(0.0,), checkpoints=rs[:-1].tolist(), stop_when_done=True)
        probs, errs = [], []
        for r in rs:
            snap = result.snapshot(float(r))
            inside = result.survived(float(r)) & (snap.x >= u_lo) & (snap.x < u_hi) & (snap.y >= v_lo) & (snap.y < v_hi)
            est = EstimateCI.from_values(inside.astype(float))
            probs.append(est.mean)
            errs.append(est.stderr)
        return np.array(probs), np.array(errs)

    with ThreadPoolExecutor(max_workers=max(1, threads or thread_cap())) as pool:
        rows = list(pool.map(node, range(zs.size)))
    prob = np.array([r[0] for r in rows])
    err = np.array([r[1] for r in rows])
    at_zero = np.array([1.0 if (u_lo <= 0.0 < u_hi and v_lo <= z < v_hi) else 0.0 for z in zs])
    prob = np.column_stack([at_zero, prob])
    err = np.column_stack([np.zeros(zs.size), err])
    prob = np.vstack([np.zeros(prob.shape[1]), prob])
    err = np.vstack([np.zeros(err.shape[1]), err])
    return KilledCellTable(np.concatenate([[0.0], zs]), np.concatenate([[0.0], rs]), prob, err)
