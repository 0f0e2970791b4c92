"""Optional and predictable quadratic covariation, total variation and trace,
pathwise on step paths and exactly on lattices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cadlag_paths import CadlagPath
from .finite_basis import (DRIFT_TOL, LatticeBasis, as_increments, conditional_mean,
                           martingale_drift)


@dataclass(frozen=True)
class BracketMatrix:
    """Right-continuous matrix-valued step process, zero at time 0."""

    horizon: float
    times: np.ndarray
    values: np.ndarray  # (n, p, q): value after each event

    def at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, t, side="right")
        zero = np.zeros((1,) + self.values.shape[1:])
        return np.concatenate([zero, self.values])[idx]

    @property
    def terminal(self) -> np.ndarray:
        return self.at(self.horizon)

    def scalar(self) -> CadlagPath:
        if self.values.shape[1:] != (1, 1):
            raise ValueError("bracket is not scalar")
        return CadlagPath(self.horizon, [0.0], self.times, self.values[:, 0, :])

    def trace(self) -> CadlagPath:
        return trace(self)


def _steps_of(p: CadlagPath):
    """Jump times and sizes; a sampled continuous part contributes its sampled increments."""
    if not p.has_drift:
        return p.times, p.jumps
    t = np.unique(np.concatenate([p.times, p.drift_times[1:]]))
    v = p(t)
    prev = np.vstack([p.initial[None, :], v[:-1]])
    return t, v - prev


def _pathwise(a: CadlagPath, b: CadlagPath) -> BracketMatrix:
    if a.horizon != b.horizon:
        raise ValueError("paths must share a horizon")
    ta, ja = _steps_of(a)
    tb, jb = _steps_of(b)
    common, ia, ib = np.intersect1d(ta, tb, return_indices=True)
    prod = ja[ia][:, :, None] * jb[ib][:, None, :]
    return BracketMatrix(a.horizon, common, np.cumsum(prod, axis=0))


# ---------------------------------------------------------------------------
# lattice brackets


@dataclass
class LatticeBracket:
    """Bracket on a lattice. Optional brackets store per-transition increments,
    predictable ones per-source-state conditional increments."""

    basis: LatticeBasis
    inc: list
    predictable: bool

    def mean(self) -> np.ndarray:
        """E[bracket_{t_j}] for j = 0..K (exact, full-state expectation)."""
        pi = self.basis.forward_probabilities()
        out = [np.zeros(self.inc[0].shape[1:]) if self.inc else np.zeros(())]
        for j, s in enumerate(self.basis.steps):
            if self.predictable:
                w = pi[j]
            else:
                w = pi[j][s.src] * s.prob
            out.append(out[-1] + np.tensordot(w, self.inc[j], axes=(0, 0)))
        return np.stack(out)

    def along(self, states: np.ndarray, trans: np.ndarray) -> np.ndarray:
        """Values at t_0..t_K on sampled paths, shape (R, K+1, ...)."""
        states, trans = np.atleast_2d(states), np.atleast_2d(trans)
        R = trans.shape[0]
        parts = [np.zeros((R,) + self.inc[0].shape[1:])]
        for j in range(self.basis.K):
            idx = states[:, j] if self.predictable else trans[:, j]
            parts.append(self.inc[j][idx])
        return np.cumsum(np.stack(parts, axis=1), axis=1)

    def __sub__(self, other):
        if self.predictable != other.predictable:
            raise ValueError("cannot subtract brackets of different kinds")
        return LatticeBracket(self.basis, [a - b for a, b in zip(self.inc, other.inc)],
                              self.predictable)

    def __add__(self, other):
        return LatticeBracket(self.basis, [a + b for a, b in zip(self.inc, other.inc)],
                              self.predictable)

    def __rmul__(self, c):
        return LatticeBracket(self.basis, [c * a for a in self.inc], self.predictable)


def _outer(x, y):
    x, y = np.asarray(x), np.asarray(y)
    if x.ndim == 1 and y.ndim == 1:
        return x * y
    x = x.reshape(len(x), -1)
    y = y.reshape(len(y), -1)
    return x[:, :, None] * y[:, None, :]


def quadratic_covariation(a, b=None, basis: LatticeBasis | None = None):
    """[a, b]: pathwise for CadlagPath inputs, per-transition on a lattice."""
    if b is None:
        b = a
    if isinstance(a, CadlagPath):
        return _pathwise(a, b)
    if basis is None:
        raise ValueError("lattice processes need their basis")
    ia, ib = as_increments(basis, a), as_increments(basis, b)
    if len(ia.inc) != len(ib.inc):
        raise ValueError("grid mismatch")
    return LatticeBracket(basis, [_outer(x, y) for x, y in zip(ia.inc, ib.inc)], False)


def predictable_covariation(basis: LatticeBasis, a, b=None, check: bool = True) -> LatticeBracket:
    """<a, b>_{t_j} = sum_{m<j} E[da db | state at t_m]; inputs must be martingales."""
    if b is None:
        b = a
    ia, ib = as_increments(basis, a), as_increments(basis, b)
    if check:
        for name, x in (("first", ia), ("second", ib)):
            d = martingale_drift(basis, x)
            if d > DRIFT_TOL:
                raise ValueError(f"{name} argument is not a martingale (drift {d:.3e})")
    inc = [conditional_mean(basis, j, _outer(x, y))
           for j, (x, y) in enumerate(zip(ia.inc, ib.inc))]
    return LatticeBracket(basis, inc, True)


def total_variation(a) -> CadlagPath | np.ndarray:
    """Var(a)_t: summed absolute increments per coordinate.

    Accepts a step path, a scalar bracket, or sampled values on a time grid
    with shape (K+1,) or (R, K+1).
    """
    if isinstance(a, BracketMatrix):
        a = a.scalar()
    if isinstance(a, CadlagPath):
        t, j = _steps_of(a)
        return CadlagPath.from_jumps(a.horizon, np.zeros(a.dimension), t, np.abs(j))
    v = np.asarray(a, dtype=float)
    axis = 0 if v.ndim == 1 else 1
    d = np.abs(np.diff(v, axis=axis))
    zero = np.zeros_like(np.take(v, [0], axis=axis))
    return np.cumsum(np.concatenate([zero, d], axis=axis), axis=axis)


def trace(B) -> CadlagPath | np.ndarray:
    if isinstance(B, BracketMatrix):
        tr = np.trace(B.values, axis1=1, axis2=2)
        return CadlagPath(B.horizon, [0.0], B.times, tr[:, None])
    B = np.asarray(B)
    return np.trace(B, axis1=-2, axis2=-1)


def polarization(bracket_fn, a, b):
    """1/4 (<a+b> - <a-b>) using a bracket function of one argument."""
    return 0.25 * (bracket_fn(a + b) - bracket_fn(a - b))


def kunita_watanabe_gap(da: np.ndarray, db: np.ndarray) -> np.ndarray:
    """sqrt([a]_T [b]_T) - Var([a,b])_T from scalar increments along paths (R, K)."""
    da, db = np.atleast_2d(da), np.atleast_2d(db)
    var = np.sum(np.abs(da * db), axis=1)
    return np.sqrt(np.sum(da * da, axis=1) * np.sum(db * db, axis=1)) - var
