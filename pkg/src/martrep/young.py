"""Young functions on [0, inf): power laws, piecewise-linear functions and the
composition with x^2/2; conjugation, Delta-2 constants and growth indices."""

from __future__ import annotations

import math

import numpy as np

UNBOUNDED = math.inf
MODERATE_THRESHOLD = 1e6


class YoungFunction:
    """Convex nondecreasing f on [0, inf) with f(0) = 0."""

    def __call__(self, x):
        raise NotImplementedError

    def derivative(self, x):
        """Right derivative."""
        raise NotImplementedError


class PowerYoung(YoungFunction):
    """f(x) = coef * x**p with p > 1; coef defaults to 1/p."""

    def __init__(self, p: float, coef: float | None = None):
        if not p > 1:
            raise ValueError("power must exceed 1")
        self.p = float(p)
        self.coef = 1.0 / self.p if coef is None else float(coef)
        if not self.coef > 0:
            raise ValueError("coefficient must be positive")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.coef * np.power(np.abs(x), self.p)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        return self.coef * self.p * np.power(np.abs(x), self.p - 1)

    @property
    def conjugate_exponent(self) -> float:
        return self.p / (self.p - 1)

    def __repr__(self):
        return f"PowerYoung(p={self.p}, coef={self.coef})"


class PiecewiseLinearYoung(YoungFunction):
    """f with f(0) = 0, slope slopes[i] on [knots[i], knots[i+1]) and the last
    slope continuing past the last knot. knots[0] must be 0."""

    def __init__(self, knots, slopes):
        knots = np.asarray(knots, dtype=float)
        slopes = np.asarray(slopes, dtype=float)
        if knots.ndim != 1 or len(knots) != len(slopes) or knots[0] != 0:
            raise ValueError("need knots starting at 0 and one slope per knot")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must increase")
        if np.any(slopes < 0) or np.any(np.diff(slopes) < 0):
            raise ValueError("slopes must be nonnegative and nondecreasing")
        if slopes[-1] <= 0:
            raise ValueError("f must eventually increase")
        self.knots = knots
        self.slopes = slopes
        self.values = np.concatenate([[0.0], np.cumsum(slopes[:-1] * np.diff(knots))])

    def __call__(self, x):
        x = np.abs(np.asarray(x, dtype=float))
        i = np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, len(self.knots) - 1)
        return self.values[i] + self.slopes[i] * (x - self.knots[i])

    def derivative(self, x):
        x = np.abs(np.asarray(x, dtype=float))
        i = np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, len(self.knots) - 1)
        return self.slopes[i]

    @classmethod
    def identity(cls):
        return cls([0.0], [1.0])

    def __repr__(self):
        return f"PiecewiseLinearYoung({len(self.knots)} knots)"


class ComposedQuadYoung(YoungFunction):
    """x -> f(x^2 / 2)."""

    def __init__(self, outer: YoungFunction):
        self.outer = outer

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.outer(0.5 * x * x)

    def derivative(self, x):
        x = np.abs(np.asarray(x, dtype=float))
        return x * self.outer.derivative(0.5 * x * x)

    def __repr__(self):
        return f"ComposedQuadYoung({self.outer!r})"


def compose_quad(f: YoungFunction) -> YoungFunction:
    """f o quad with quad(x) = x^2/2; closed form for power laws."""
    if isinstance(f, PowerYoung):
        return PowerYoung(2 * f.p, f.coef * 0.5 ** f.p)
    return ComposedQuadYoung(f)


def conjugate(f: YoungFunction, grid=None, cap: float | None = None) -> YoungFunction:
    """f*(y) = sup_{x >= 0} (x y - f(x)).

    Power laws map to power laws. A piecewise-linear f is conjugated exactly on
    [0, cap] (default: last knot, or 1 if there is none), giving a piecewise-
    linear f* whose final slope equals the cap. Other functions are replaced by
    their piecewise-linear interpolant on ``grid`` first.
    """
    if isinstance(f, PowerYoung):
        q = f.conjugate_exponent
        # sup_x (xy - c x^p) = (p - 1) c (y / (c p))^q
        c = (f.p - 1) * f.coef * (f.coef * f.p) ** (-q)
        return PowerYoung(q, c)
    if not isinstance(f, PiecewiseLinearYoung):
        if grid is None:
            raise ValueError("a grid is needed to conjugate this function")
        f = interpolate(f, grid)
    cap = (f.knots[-1] if len(f.knots) > 1 else 1.0) if cap is None else float(cap)
    if cap < f.knots[-1]:
        raise ValueError("cap must not cut off knots")
    a = np.concatenate([f.knots, [cap]]) if cap > f.knots[-1] else f.knots.copy()
    # f* has knots at the slopes of f and slope a[i+1] on [s_i, s_{i+1})
    s = f.slopes[: len(a) - 1]
    s = np.unique(s)
    # for repeated slopes the largest abscissa wins
    last = np.array([np.max(np.nonzero(f.slopes[: len(a) - 1] == v)[0]) for v in s])
    ys = np.concatenate([[0.0], s]) if s[0] > 0 else s
    sl = np.concatenate([[0.0], a[last + 1]]) if s[0] > 0 else a[last + 1]
    return PiecewiseLinearYoung(ys, sl)


def interpolate(f: YoungFunction, grid) -> PiecewiseLinearYoung:
    grid = np.unique(np.concatenate([[0.0], np.asarray(grid, dtype=float)]))
    v = f(grid)
    sl = np.diff(v) / np.diff(grid)
    sl = np.maximum.accumulate(np.maximum(sl, 0.0))
    return PiecewiseLinearYoung(grid[:-1], sl)


def legendre_on_grid(f: YoungFunction, x, y) -> np.ndarray:
    """Discrete conjugate max_i (x_i y - f(x_i)) for each y."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    fx = f(x)
    return np.max(np.outer(y, x) - fx[None, :], axis=1)


def moderate_constant(f: YoungFunction, lo: float = 1e-6, hi: float = 1e6, n: int = 4001):
    """sup_x f(2x)/f(x) over a geometric grid; UNBOUNDED above 1e6 or where f
    vanishes at x but not at 2x."""
    if isinstance(f, PowerYoung):
        return 2.0 ** f.p
    x = np.geomspace(lo, hi, n)
    if isinstance(f, PiecewiseLinearYoung):
        x = np.unique(np.concatenate([x, f.knots[f.knots > 0], f.knots[f.knots > 0] / 2]))
    a, b = f(x), f(2 * x)
    if np.any((a == 0) & (b > 0)):
        return UNBOUNDED
    pos = a > 0
    if not pos.any():
        return UNBOUNDED
    c = float(np.max(b[pos] / a[pos]))
    return UNBOUNDED if c > MODERATE_THRESHOLD else c


def growth_indices(f: YoungFunction, lo: float = 1e-6, hi: float = 1e6, n: int = 4001):
    """(inf, sup) of x f'(x) / f(x) over a geometric grid; both equal p for x^p/p."""
    if isinstance(f, PowerYoung):
        return f.p, f.p
    x = np.geomspace(lo, hi, n)
    fx = f(x)
    pos = fx > 0
    r = x[pos] * f.derivative(x[pos]) / fx[pos]
    return float(np.min(r)), float(np.max(r))


def is_subquadratic(f: YoungFunction) -> bool:
    """True if f grows strictly slower than x^2 at infinity (upper index < 2)."""
    if isinstance(f, PowerYoung):
        return f.p < 2
    x = np.geomspace(1e3, 1e6, 200)
    r = x * f.derivative(x) / np.maximum(f(x), np.finfo(float).tiny)
    return bool(r[-1] < 2)


def young_gap(f: YoungFunction, fstar: YoungFunction, x, y) -> np.ndarray:
    """f(x) + f*(y) - x y, nonnegative by Young's inequality."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return f(x) + fstar(y) - x * y
