"""Brute-force reference implementations used to freeze and cross-check values.

Nothing here imports the algorithmic parts of martrep: each oracle works from
first principles (enumeration, dense linear algebra, grid sups)."""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# Skorokhod J1 for step paths by enumerating event interleavings


def _step_values(initial, times, sizes):
    initial = np.atleast_1d(np.asarray(initial, dtype=float))
    sizes = np.asarray(sizes, dtype=float).reshape(len(times), initial.size)
    vals = [initial]
    for s in sizes:
        vals.append(vals[-1] + s)
    return np.asarray(times, dtype=float), np.array(vals)


def _interleavings(n, m):
    """All monotone lattice paths (0,0)->(n,m) with steps (1,0),(0,1),(1,1)."""
    def rec(i, j):
        if i == n and j == m:
            yield [(i, j)]
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di <= n and j + dj <= m:
                for rest in rec(i + di, j + dj):
                    yield [(i, j)] + rest
    return list(rec(0, 0))


def _feasible(path, S, U, eps, hi):
    """Is there an increasing assignment x_i = lambda(s_i) with |x_i - s_i| <= eps
    compatible with the interleaving (x_i = u_j on diagonal steps, strictly between
    b events otherwise)? Greedy smallest choice."""
    last = 0.0
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        if i1 == i0:
            continue
        s = S[i1 - 1]
        if j1 > j0:  # matched with b event j1
            lo = up = U[j1 - 1]
        else:  # a event alone while b has made j1 events
            lo = U[j1 - 1] if j1 > 0 else 0.0
            up = U[j1] if j1 < len(U) else hi
        lo = max(lo, s - eps, last)
        up = min(up, s + eps)
        if lo > up + 1e-15:
            return False
        last = lo
    return True


def j1_horizon(a, b, horizon):
    """Finite-horizon J1 distance on [0, horizon] (horizon may be inf) between
    step paths given as (initial, times, sizes)."""
    ta, va = _step_values(*a)
    tb, vb = _step_values(*b)
    free_a, free_b = np.sum(ta < horizon), np.sum(tb < horizon)
    na, nb = np.sum(ta <= horizon), np.sum(tb <= horizon)
    end = float(np.linalg.norm(va[na] - vb[nb]))
    S, U = ta[:free_a], tb[:free_b]
    best = math.inf
    for path in _interleavings(free_a, free_b):
        val = max(float(np.linalg.norm(va[i] - vb[j])) for i, j in path)
        if val >= best:
            continue
        cands = sorted({0.0} | {abs(s - u) for s in S for u in U} | {abs(s - u) for s in S
                                                                     for u in (0.0, horizon)
                                                                     if math.isfinite(u)})
        eps = next((e for e in cands if _feasible(path, S, U, e, horizon)), math.inf)
        best = min(best, max(val, eps))
    return max(best, end)


def j1_bruteforce(a, b, T):
    """sum_k 2^-k (1 ^ d_[0,k]) with paths constant after T."""
    kmax = int(math.floor(T))
    total = 0.0
    for k in range(1, kmax + 1):
        total += 2.0 ** -k * min(1.0, j1_horizon(a, b, float(k)))
    total += 2.0 ** -kmax * min(1.0, j1_horizon(a, b, math.inf))
    return total


def sup_bruteforce(a, b, T, n=20001):
    """sup_t |a(t) - b(t)| on a fine grid plus all event times."""
    ta, va = _step_values(*a)
    tb, vb = _step_values(*b)
    t = np.union1d(np.linspace(0, T, n), np.concatenate([ta, tb]))
    ia = np.searchsorted(ta, t, side="right")
    ib = np.searchsorted(tb, t, side="right")
    return float(np.max(np.linalg.norm(va[ia] - vb[ib], axis=-1)))


# ---------------------------------------------------------------------------
# finite spaces by full path enumeration


def enumerate_paths(basis):
    """All paths of a lattice as (probability, states, transitions)."""
    out = []

    def rec(j, state, prob, states, trans):
        if j == basis.K:
            out.append((prob, states, trans))
            return
        s = basis.steps[j]
        for t in np.nonzero(s.src == state)[0]:
            rec(j + 1, int(s.dst[t]), prob * float(s.prob[t]), states + [int(s.dst[t])],
                trans + [int(t)])

    rec(0, 0, 1.0, [0], [])
    return out


def node_projection(dy, dxo, onehot, nu, prob):
    """Weighted least squares of dy on [dxo, onehot - nu] over one node's successors."""
    B = np.hstack([dxo, onehot - nu[None, :]])
    w = np.sqrt(prob)
    coef, *_ = np.linalg.lstsq(B * w[:, None], dy * w, rcond=None)
    return coef, B @ coef


def node_normal_equations(dy, dxo, prob):
    """Z = E[dY dX] / E[dX^2] for scalar X without jumps."""
    return float(np.sum(prob * dy * dxo[:, 0]) / np.sum(prob * dxo[:, 0] ** 2))


# ---------------------------------------------------------------------------
# Legendre transform on a grid


def legendre_grid(f, y, x_max=50.0, n=200001):
    x = np.linspace(0.0, x_max, n)
    fx = f(x)
    return np.array([float(np.max(x * yy - fx)) for yy in np.atleast_1d(y)])
