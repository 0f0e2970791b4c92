"""Step paths on [0, T] with constant extension, Skorokhod J1 / locally uniform /
uniform distances, jump-time sequences and jump functionals."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


INFINITE = math.inf
DEFAULT_GRID_FRACTION = 2.0 ** -12


class CadlagPath:
    """Right-continuous step path in R^l on [0, T], constant after T.

    Stored as an initial value, strictly increasing jump times in (0, T] and the
    value of the pure-jump part just after each jump. An optional continuous
    part is given by samples (linear interpolation, zero at time 0).
    """

    __slots__ = ("horizon", "initial", "times", "values", "drift_times", "drift_values")

    def __init__(self, horizon, initial, times=(), values=None,
                 drift_times=None, drift_values=None):
        horizon = float(horizon)
        if not horizon > 0:
            raise ValueError("horizon must be positive")
        initial = np.atleast_1d(np.asarray(initial, dtype=float)).copy()
        if initial.ndim != 1:
            raise ValueError("initial value must be a vector")
        dim = initial.shape[0]
        times = np.asarray(times, dtype=float).reshape(-1)
        if values is None:
            values = np.empty((0, dim))
        values = np.asarray(values, dtype=float).reshape(len(times), dim)
        if len(times):
            if times[0] <= 0 or times[-1] > horizon:
                raise ValueError("jump times must lie in (0, T]")
            if np.any(np.diff(times) <= 0):
                raise ValueError("jump times must be strictly increasing")
        # drop zero jumps
        prev = np.vstack([initial[None, :], values[:-1]]) if len(times) else values
        keep = np.any(values != prev, axis=1)
        self.horizon = horizon
        self.initial = initial
        self.times = times[keep].copy()
        self.values = values[keep].copy()
        if drift_times is not None:
            dt_ = np.asarray(drift_times, dtype=float).reshape(-1)
            dv = np.asarray(drift_values, dtype=float).reshape(len(dt_), dim)
            if len(dt_) < 2 or dt_[0] != 0.0 or np.any(np.diff(dt_) <= 0):
                raise ValueError("drift samples need increasing times starting at 0")
            dv = dv - dv[0]
            if np.any(dv != 0):
                self.drift_times, self.drift_values = dt_.copy(), dv.copy()
            else:
                self.drift_times = self.drift_values = None
        else:
            self.drift_times = self.drift_values = None
        for arr in (self.initial, self.times, self.values):
            arr.flags.writeable = False

    # construction helpers
    @classmethod
    def from_jumps(cls, horizon, initial, times, sizes, **kw):
        initial = np.atleast_1d(np.asarray(initial, dtype=float))
        times = np.asarray(times, dtype=float).reshape(-1)
        sizes = np.asarray(sizes, dtype=float).reshape(len(times), initial.shape[0])
        return cls(horizon, initial, times, initial + np.cumsum(sizes, axis=0), **kw)

    @classmethod
    def constant(cls, horizon, value):
        return cls(horizon, value)

    @property
    def dimension(self) -> int:
        return self.initial.shape[0]

    @property
    def jumps(self) -> np.ndarray:
        if not len(self.times):
            return np.empty((0, self.dimension))
        prev = np.vstack([self.initial[None, :], self.values[:-1]])
        return self.values - prev

    @property
    def has_drift(self) -> bool:
        return self.drift_times is not None

    @property
    def terminal(self) -> np.ndarray:
        return self(self.horizon)

    def drift_at(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (self.dimension,))
        if self.has_drift:
            for c in range(self.dimension):
                out[..., c] = np.interp(np.minimum(t, self.horizon), self.drift_times,
                                        self.drift_values[:, c])
        return out

    def __call__(self, t):
        """Vectorized evaluation; returns shape t.shape + (l,)."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ValueError("t must be nonnegative")
        idx = np.searchsorted(self.times, t, side="right")
        table = np.vstack([self.initial[None, :], self.values])
        out = table[idx]
        if self.has_drift:
            out = out + self.drift_at(t)
        return out

    def component(self, i: int) -> "CadlagPath":
        dt_ = self.drift_times
        dv = None if dt_ is None else self.drift_values[:, [i]]
        return CadlagPath(self.horizon, self.initial[[i]], self.times, self.values[:, [i]],
                          dt_, dv)

    def __eq__(self, other):
        if not isinstance(other, CadlagPath):
            return NotImplemented
        same = (self.horizon == other.horizon and np.array_equal(self.initial, other.initial)
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.values, other.values))
        if not same or self.has_drift != other.has_drift:
            return False
        if self.has_drift:
            return (np.array_equal(self.drift_times, other.drift_times)
                    and np.array_equal(self.drift_values, other.drift_values))
        return True

    def __repr__(self):
        return (f"CadlagPath(dim={self.dimension}, T={self.horizon}, jumps={len(self.times)}"
                f"{', drift' if self.has_drift else ''})")

    def __add__(self, other):
        return combine([self, other], lambda v: v[0] + v[1])

    def __sub__(self, other):
        return combine([self, other], lambda v: v[0] - v[1])

    def __neg__(self):
        return self.scale(-1.0)

    def scale(self, c: float) -> "CadlagPath":
        dv = None if not self.has_drift else c * self.drift_values
        return CadlagPath(self.horizon, c * self.initial, self.times, c * self.values,
                          self.drift_times, dv)


def combine(paths: Sequence[CadlagPath], fn) -> CadlagPath:
    """Pointwise combination of step paths; fn maps a list of value arrays to one."""
    horizon = max(p.horizon for p in paths)
    if any(p.has_drift for p in paths):
        grids = [p.drift_times for p in paths if p.has_drift]
        dgrid = np.unique(np.concatenate(grids + [[0.0]]))
        drifts = [p.drift_at(dgrid) for p in paths]
        zero_jumps = [CadlagPath(p.horizon, p.initial, p.times, p.values) for p in paths]
        base = combine(zero_jumps, fn)
        dv = fn(drifts)  # combinations used here are linear
        return CadlagPath(horizon, base.initial, base.times, base.values, dgrid, dv)
    times = np.unique(np.concatenate([p.times for p in paths] + [np.empty(0)]))
    init = fn([p.initial for p in paths])
    vals = fn([p(times) for p in paths]) if len(times) else np.empty((0, len(init)))
    return CadlagPath(horizon, init, times, vals)


def stack(paths: Sequence[CadlagPath]) -> CadlagPath:
    """Product-space path (a^1, ..., a^q) from paths sharing a horizon."""
    return combine(list(paths), lambda v: np.concatenate(v, axis=-1))


def evaluate(path: CadlagPath, t: float) -> np.ndarray:
    return path(float(t))


# ---------------------------------------------------------------------------
# distances


@njit(cache=True)
def _bottleneck(A, S, B, U, hi):
    # A: (n+1, l) values of a after i events, S: a event times; same for B, U.
    # Minimal bottleneck over monotone event orderings / matchings.
    n = S.shape[0]
    m = U.shape[0]
    prev = np.empty(m + 1)
    cur = np.empty(m + 1)
    for i in range(n + 1):
        for j in range(m + 1):
            node = _norm_diff(A, i, B, j)
            if i == 0 and j == 0:
                cur[j] = node
                continue
            best = np.inf
            if i > 0:
                lo = U[j - 1] if j > 0 else 0.0
                up = U[j] if j < m else hi
                s = S[i - 1]
                if s < lo:
                    e = lo - s
                elif s > up:
                    e = s - up
                else:
                    e = 0.0
                v = prev[j] if prev[j] > e else e
                if v < best:
                    best = v
            if j > 0:
                if cur[j - 1] < best:
                    best = cur[j - 1]
            if i > 0 and j > 0:
                e = abs(S[i - 1] - U[j - 1])
                v = prev[j - 1] if prev[j - 1] > e else e
                if v < best:
                    best = v
            cur[j] = node if node > best else best
        for j in range(m + 1):
            prev[j] = cur[j]
    return prev[m]


def _table(p: CadlagPath) -> np.ndarray:
    return np.vstack([p.initial[None, :], p.values])


def _rownorm(x, axis=-1):
    x = np.asarray(x, dtype=float)
    m = np.max(np.abs(x), axis=axis, keepdims=True)
    safe = np.where(m > 0, m, 1.0)
    return np.squeeze(m, axis) * np.sqrt(np.sum((x / safe) ** 2, axis=axis))


@njit(cache=True)
def _norm_diff(A, i, B, j):
    # scaled so that tiny differences do not underflow to zero
    m = 0.0
    for c in range(A.shape[1]):
        m = max(m, abs(A[i, c] - B[j, c]))
    if m == 0.0 or A.shape[1] == 1:
        return m
    d = 0.0
    for c in range(A.shape[1]):
        x = (A[i, c] - B[j, c]) / m
        d += x * x
    return m * math.sqrt(d)


@njit(cache=True)
def _sup_merged(A, S, B, U, n, m):
    # sup of |a - b| over the first n events of a and m of b, in time order
    i = 0
    j = 0
    best = _norm_diff(A, 0, B, 0)
    while i < n or j < m:
        ta = S[i] if i < n else np.inf
        tb = U[j] if j < m else np.inf
        if ta <= tb:
            i += 1
        if tb <= ta:
            j += 1
        v = _norm_diff(A, i, B, j)
        if v > best:
            best = v
    return best


def _horizons(horizon: float):
    """(weight, k or inf) pairs: individual integer horizons k <= T, then the tail."""
    out = []
    kmax = int(math.floor(horizon))
    for k in range(1, kmax + 1):
        out.append((2.0 ** -k, float(k)))
    out.append((2.0 ** -kmax, math.inf))
    return out


def _check_dims(a: CadlagPath, b: CadlagPath):
    if a.dimension != b.dimension:
        raise ValueError(f"dimension mismatch: {a.dimension} vs {b.dimension}")


def to_step(path: CadlagPath, resolution: float) -> CadlagPath:
    """Step approximation: continuous part frozen on a uniform grid, jumps kept."""
    if not path.has_drift:
        return path
    n = int(math.ceil(path.horizon / resolution - 1e-9))
    grid = np.minimum(np.arange(1, n + 1) * resolution, path.horizon)
    times = np.unique(np.concatenate([grid, path.times]))
    floor_grid = np.floor(times / resolution + 1e-9) * resolution
    floor_grid = np.minimum(floor_grid, path.horizon)
    jump_part = CadlagPath(path.horizon, path.initial, path.times, path.values)
    vals = jump_part(times) + path.drift_at(floor_grid)
    return CadlagPath(path.horizon, path.initial, times, vals)


@dataclass(frozen=True)
class DistanceInfo:
    j1: float
    lu: float
    method: str
    resolution: float
    error_bound: float


def _modulus_bound(p: CadlagPath) -> float:
    if not p.has_drift:
        return 0.0
    slopes = np.diff(p.drift_values, axis=0) / np.diff(p.drift_times)[:, None]
    return float(np.max(_rownorm(slopes, axis=1)))


def distances(a: CadlagPath, b: CadlagPath, grid: float | None = None) -> DistanceInfo:
    """J1 and locally uniform distances computed from one shared value table,
    so that j1 <= lu holds exactly."""
    _check_dims(a, b)
    horizon = max(a.horizon, b.horizon)
    method, res, bound = "exact", 0.0, 0.0
    if a.has_drift or b.has_drift:
        res = (grid if grid is not None else DEFAULT_GRID_FRACTION * horizon)
        bound = (_modulus_bound(a) + _modulus_bound(b)) * res
        a, b = to_step(a, res), to_step(b, res)
        method = "grid"
    A, S, B, U = _table(a), a.times, _table(b), b.times
    j1_terms, lu_terms = [], []
    for w, k in _horizons(horizon):
        n_le = int(np.searchsorted(S, k, side="right"))
        m_le = int(np.searchsorted(U, k, side="right"))
        n_free = int(np.searchsorted(S, k, side="left"))
        m_free = int(np.searchsorted(U, k, side="left"))
        lu_k = _sup_merged(A, S, B, U, n_le, m_le)
        dp = _bottleneck(A[: n_free + 1], S[:n_free], B[: m_free + 1], U[:m_free], k)
        end = _norm_diff(A, n_le, B, m_le)
        j1_k = max(dp, end)
        j1_k = min(j1_k, lu_k)  # identity time change is always admissible
        j1_terms.append(w * min(1.0, j1_k))
        lu_terms.append(w * min(1.0, lu_k))
    return DistanceInfo(math.fsum(j1_terms), math.fsum(lu_terms), method, res, bound)


def j1_distance(a: CadlagPath, b: CadlagPath, grid: float | None = None) -> float:
    return distances(a, b, grid).j1


def lu_distance(a: CadlagPath, b: CadlagPath, grid: float | None = None) -> float:
    return distances(a, b, grid).lu


def uniform_distance(a: CadlagPath, b: CadlagPath) -> float:
    _check_dims(a, b)
    pts = [np.array([0.0]), a.times, b.times]
    for p in (a, b):
        if p.has_drift:
            pts.append(p.drift_times)
    pts.append(np.array([max(a.horizon, b.horizon)]))
    t = np.unique(np.concatenate(pts))
    right = _rownorm(a(t) - b(t), axis=-1)
    best = float(np.max(right))
    if a.has_drift or b.has_drift:
        # left limits matter only where a continuous part bends next to a jump
        tl = t[t > 0]
        left = _rownorm(_left(a, tl) - _left(b, tl), axis=-1)
        best = max(best, float(np.max(left, initial=0.0)))
    return best


def _left(p: CadlagPath, t):
    idx = np.searchsorted(p.times, t, side="left")
    table = _table(p)
    return table[idx] + p.drift_at(t)


# ---------------------------------------------------------------------------
# jump windows and jump functionals


class JumpWindow:
    """Per-coordinate open intervals (v, w) with v*w > 0, or None for the full line."""

    def __init__(self, intervals: Sequence[tuple[float, float] | None]):
        ivs = []
        for iv in intervals:
            if iv is None:
                ivs.append(None)
                continue
            v, w = float(iv[0]), float(iv[1])
            if not (v < w and v * w > 0):
                raise ValueError(f"invalid window interval {iv}: need v < w and v*w > 0")
            ivs.append((v, w))
        if not ivs or all(iv is None for iv in ivs):
            raise ValueError("window must restrict at least one coordinate")
        self.intervals = tuple(ivs)

    @property
    def dimension(self) -> int:
        return len(self.intervals)

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(i for i, iv in enumerate(self.intervals) if iv is not None)

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.dimension:
            raise ValueError("window dimension mismatch")
        ok = np.ones(x.shape[0], dtype=bool)
        for i in self.active:
            v, w = self.intervals[i]
            ok &= (x[:, i] > v) & (x[:, i] < w)
        return ok

    def __repr__(self):
        return f"JumpWindow({self.intervals})"


def jump_time(path: CadlagPath, window: JumpWindow, n: int) -> float:
    """Time of the n-th jump whose active coordinates all lie in the window."""
    if n < 1:
        raise ValueError("n must be >= 1")
    hits = path.times[window.contains(path.jumps)] if len(path.times) else path.times
    return float(hits[n - 1]) if len(hits) >= n else INFINITE


def jump_functional(path: CadlagPath, g: Callable, window: JumpWindow,
                    joint: bool = False) -> CadlagPath:
    """t -> sum of g(jump) over jumps up to t lying in the window (1-d path);
    with joint=True the input path with this coordinate appended."""
    J = path.jumps
    if len(J):
        mask = window.contains(J)
        gv = np.array([float(g(x)) for x in J]) * mask
    else:
        gv = np.empty(0)
    f = CadlagPath.from_jumps(path.horizon, [0.0], path.times, gv[:, None])
    return stack([path, f]) if joint else f


def r_p(x, p: float) -> float:
    if not p > 0:
        raise ValueError("p must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(np.sum(np.minimum(np.abs(x), 1.0) ** p))


# ---------------------------------------------------------------------------
# joint convergence


@dataclass(frozen=True)
class JointCheck:
    verdict: str  # "joint", "separate-only" or "none"
    component_distances: tuple
    partial_sum_distances: tuple
    product_distance: float


def joint_j1_check(sequences: Sequence[Sequence[CadlagPath]], limits: Sequence[CadlagPath],
                   eps: float) -> JointCheck:
    """Classify J1 convergence of (a^{n,1}, ..., a^{n,q}) at the final index n.

    Product-space convergence holds iff every component and every partial sum
    a^{n,1} + ... + a^{n,p} converges; the product distance is reported as a
    cross-check.
    """
    if not sequences or any(len(s) == 0 for s in sequences):
        raise ValueError("empty input")
    if len(limits) != len(sequences):
        raise ValueError("one limit per sequence required")
    last = [s[-1] for s in sequences]
    comp = tuple(j1_distance(a, b) for a, b in zip(last, limits))
    partial, sa, sb = [], last[0], limits[0]
    for p in range(1, len(last)):
        sa, sb = sa + last[p], sb + limits[p]
        partial.append(j1_distance(sa, sb))
    prod = j1_distance(stack(last), stack(list(limits)))
    if all(d < eps for d in comp):
        verdict = "joint" if all(d < eps for d in partial) else "separate-only"
    else:
        verdict = "none"
    return JointCheck(verdict, comp, tuple(partial), prod)


# ---------------------------------------------------------------------------
# serialization


def write_csv(path: CadlagPath, filename) -> None:
    if path.has_drift:
        raise ValueError("CSV serialization covers step paths only")
    ell = path.dimension
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(ell)] + ["is_jump"])
        w.writerow([repr(0.0)] + [repr(float(v)) for v in path.initial] + [0])
        for t, v in zip(path.times, path.values):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in v] + [1])
        if not len(path.times) or path.times[-1] < path.horizon:
            w.writerow([repr(path.horizon)] + [repr(float(x)) for x in path(path.horizon)] + [0])


def read_csv(filename) -> CadlagPath:
    with open(filename, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "t" or header[-1] != "is_jump":
        raise ValueError(f"{filename}: unexpected header {header}")
    data = np.array([[float(x) for x in r[:-1]] for r in body])
    flags = np.array([int(r[-1]) for r in body], dtype=bool)
    horizon = float(data[-1, 0])
    return CadlagPath(horizon, data[0, 1:], data[flags, 0], data[flags, 1:])
