"""Finite filtered probability spaces: recombining Markov lattices and scenario
trees with exact conditional expectation, jump measures and compensators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .cadlag_paths import CadlagPath, JumpWindow, r_p

PROB_TOL = 1e-12
DRIFT_TOL = 1e-10


@dataclass(frozen=True)
class Step:
    """Transitions from the states at t_j to the states at t_{j+1}.

    ``code`` labels the move (walk move and mark slot) so coupled samplers can
    look a transition up by (source state, code).
    """

    src: np.ndarray
    dst: np.ndarray
    prob: np.ndarray
    dxo: np.ndarray  # (n_trans, l) diffusive increment
    dxn: np.ndarray  # (n_trans, l) jump mark, zero row = no jump
    code: np.ndarray
    n_src: int
    n_dst: int

    @property
    def n_trans(self) -> int:
        return len(self.src)


class LatticeBasis:
    """Time grid, per-step transition tables and optional state coordinates."""

    def __init__(self, times, steps: Sequence[Step], coords=None, coord_names=None,
                 pii: bool = False, label: str = "lattice"):
        self.times = np.asarray(times, dtype=float)
        self.steps = list(steps)
        if len(self.times) != len(self.steps) + 1:
            raise ValueError("need one more time than steps")
        if self.times[0] != 0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must start at 0 and increase")
        self.n_states = [1] + [s.n_dst for s in self.steps]
        self.coords = coords
        self.coord_names = coord_names
        self.pii = pii
        self.label = label
        self.dim = self.steps[0].dxo.shape[1] if self.steps else 1
        self._cache: dict = {}
        self._validate()

    @property
    def K(self) -> int:
        return len(self.steps)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def _validate(self):
        for j, s in enumerate(self.steps):
            if s.n_src != self.n_states[j]:
                raise ValueError(f"step {j}: source count mismatch")
            if np.any(s.prob <= 0):
                raise ValueError(f"step {j}: transition probabilities must be positive")
            tot = np.bincount(s.src, weights=s.prob, minlength=s.n_src)
            if np.max(np.abs(tot - 1.0)) > PROB_TOL:
                raise ValueError(f"step {j}: outgoing probabilities do not sum to 1")
            if len(np.unique(s.dst)) != s.n_dst:
                raise ValueError(f"step {j}: unreachable state")
            pair = s.src.astype(np.int64) * s.n_dst + s.dst
            if len(np.unique(pair)) != s.n_trans:
                raise ValueError(f"step {j}: two transitions share source and target")

    # cached per-step structures
    def marks(self, j: int):
        """(marks (M, l), mark index per transition with -1 for no jump)."""
        key = ("marks", j)
        if key not in self._cache:
            s = self.steps[j]
            jump = np.any(s.dxn != 0, axis=1)
            if jump.any():
                mk, inv = np.unique(s.dxn[jump], axis=0, return_inverse=True)
                idx = -np.ones(s.n_trans, dtype=np.int64)
                idx[jump] = inv.reshape(-1)
            else:
                mk = np.empty((0, self.dim))
                idx = -np.ones(s.n_trans, dtype=np.int64)
            self._cache[key] = (mk, idx)
        return self._cache[key]

    def lookup(self, j: int) -> np.ndarray:
        """Dense table (n_src, n_codes) -> transition index, -1 if absent."""
        key = ("lookup", j)
        if key not in self._cache:
            s = self.steps[j]
            tab = -np.ones((s.n_src, int(s.code.max()) + 1), dtype=np.int64)
            tab[s.src, s.code] = np.arange(s.n_trans)
            self._cache[key] = tab
        return self._cache[key]

    def forward_probabilities(self) -> list[np.ndarray]:
        if "forward" not in self._cache:
            pi = [np.ones(1)]
            for s in self.steps:
                pi.append(np.bincount(s.dst, weights=pi[-1][s.src] * s.prob, minlength=s.n_dst))
            self._cache["forward"] = pi
        return self._cache["forward"]


# ---------------------------------------------------------------------------
# processes


@dataclass
class AdaptedProcess:
    """Node values per time index; predictable processes store at index m the
    value used on the step t_m -> t_{m+1} (attached to the predecessor state)."""

    values: list
    predictable: bool = False

    def at(self, j: int) -> np.ndarray:
        return self.values[j]

    def __add__(self, other):
        return AdaptedProcess([a + b for a, b in zip(self.values, other.values)], self.predictable)

    def __sub__(self, other):
        return AdaptedProcess([a - b for a, b in zip(self.values, other.values)], self.predictable)

    def __rmul__(self, c):
        return AdaptedProcess([c * a for a in self.values], self.predictable)

    def increments(self, basis: LatticeBasis) -> "Increments":
        if self.predictable:
            raise ValueError("increments are defined for adapted processes")
        inc = [self.values[j + 1][s.dst] - self.values[j][s.src] for j, s in enumerate(basis.steps)]
        return Increments(np.asarray(self.values[0][0], dtype=float), inc)


@dataclass
class Increments:
    """A path-dependent process given by its initial value and per-transition
    increments (e.g. stochastic integrals and the residual martingale)."""

    initial: np.ndarray
    inc: list

    def __add__(self, other):
        return Increments(self.initial + other.initial, [a + b for a, b in zip(self.inc, other.inc)])

    def __sub__(self, other):
        return Increments(self.initial - other.initial, [a - b for a, b in zip(self.inc, other.inc)])

    def __rmul__(self, c):
        return Increments(c * self.initial, [c * a for a in self.inc])

    def along(self, trans: np.ndarray) -> np.ndarray:
        """Values on sampled paths; trans has shape (R, K) of transition indices.
        Returns (R, K+1) or (R, K+1, d)."""
        trans = np.atleast_2d(trans)
        steps = [self.inc[j][trans[:, j]] for j in range(trans.shape[1])]
        first = np.broadcast_to(self.initial, (trans.shape[0],) + np.shape(self.initial))
        return np.cumsum(np.stack([first] + steps, axis=1), axis=1)


def as_increments(basis: LatticeBasis, a) -> Increments:
    if isinstance(a, Increments):
        return a
    if isinstance(a, AdaptedProcess):
        return a.increments(basis)
    raise TypeError(f"expected AdaptedProcess or Increments, got {type(a)}")


def _averaging_operator(basis: LatticeBasis, j: int):
    """Sparse (n_src, n_trans) matrix with the transition probabilities."""
    key = ("avg", j)
    if key not in basis._cache:
        s = basis.steps[j]
        basis._cache[key] = sparse.csr_matrix((s.prob, (s.src, np.arange(s.n_trans))),
                                              shape=(s.n_src, s.n_trans))
    return basis._cache[key]


def conditional_mean(basis: LatticeBasis, j: int, field_on_trans: np.ndarray) -> np.ndarray:
    """E[f(transition) | state at t_j] for a per-transition array (n_trans,) or (n_trans, ...)."""
    P = _averaging_operator(basis, j)
    f = np.asarray(field_on_trans, dtype=float)
    if f.ndim == 1:
        return P @ f
    out = P @ f.reshape(len(f), -1)
    return out.reshape((P.shape[0],) + f.shape[1:])


def conditional_expectation(basis: LatticeBasis, rv, j: int, from_index: int | None = None):
    """E[rv | G_{t_j}] by backward induction; rv lives on the states at from_index (default K)."""
    K = basis.K
    top = K if from_index is None else from_index
    if not 0 <= j <= top <= K:
        raise ValueError("need 0 <= j <= from_index <= K")
    v = np.asarray(rv, dtype=float)
    if v.shape[0] != basis.n_states[top]:
        raise ValueError(f"random variable must be defined on all {basis.n_states[top]} states")
    for m in range(top - 1, j - 1, -1):
        s = basis.steps[m]
        v = conditional_mean(basis, m, v[s.dst])
    return v


def martingale_from_terminal(basis: LatticeBasis, xi) -> AdaptedProcess:
    v = np.asarray(xi, dtype=float)
    if v.shape[0] != basis.n_states[-1]:
        raise ValueError(f"terminal variable must be defined on all {basis.n_states[-1]} states")
    vals = [v]
    for m in range(basis.K - 1, -1, -1):
        s = basis.steps[m]
        vals.append(conditional_mean(basis, m, vals[-1][s.dst]))
    return AdaptedProcess(vals[::-1])


def martingale_drift(basis: LatticeBasis, a) -> float:
    """max over states of |E[increment | state]|."""
    a = as_increments(basis, a)
    worst = 0.0
    for j in range(basis.K):
        d = conditional_mean(basis, j, a.inc[j])
        if d.size:
            worst = max(worst, float(np.max(np.abs(d))))
    return worst


def expectation(basis: LatticeBasis, j: int, node_values) -> float | np.ndarray:
    pi = basis.forward_probabilities()[j]
    v = np.asarray(node_values, dtype=float)
    return np.tensordot(pi, v, axes=(0, 0))


# ---------------------------------------------------------------------------
# jump measure


@dataclass
class JumpMeasureView:
    """Marks per step and nu({t_{j+1}} x {x} | state at t_j) as (n_src, M) arrays."""

    marks: list
    nu: list
    mark_index: list = field(repr=False)
    sources: list = field(repr=False)

    def is_empty(self) -> bool:
        return all(len(m) == 0 for m in self.marks)

    def mark_function_table(self, u: Callable) -> list:
        """Evaluate u(j, x) (scalar) on every step's marks -> list of (M,) arrays."""
        return [np.array([float(u(j, x)) for x in mk]) for j, mk in enumerate(self.marks)]

    def integral_against_mu(self, table) -> list:
        """Per-transition increments of u*mu; table entries (M,) or (n_src, M)."""
        out = []
        for j, (idx, tab) in enumerate(zip(self.mark_index, table)):
            tab = np.asarray(tab, dtype=float)
            val = np.zeros(len(idx))
            hit = idx >= 0
            if tab.ndim == 1:
                val[hit] = tab[idx[hit]]
            else:
                val[hit] = tab[self.sources[j][hit], idx[hit]]
            out.append(val)
        return out

    def integral_against_nu(self, table) -> list:
        """Per-source-state increments of u*nu."""
        out = []
        for tab, nu in zip(table, self.nu):
            tab = np.asarray(tab, dtype=float)
            out.append((nu * tab).sum(axis=1) if tab.ndim == 2 else nu @ tab)
        return out

    def compensated(self, table) -> list:
        """Per-transition increments of the martingale u*mu - u*nu."""
        mu = self.integral_against_mu(table)
        nu = self.integral_against_nu(table)
        return [m - n[src] for m, n, src in zip(mu, nu, self.sources)]


def compensator(basis: LatticeBasis) -> JumpMeasureView:
    marks, nus, idxs, srcs = [], [], [], []
    for j, s in enumerate(basis.steps):
        mk, idx = basis.marks(j)
        nu = np.zeros((s.n_src, len(mk)))
        hit = idx >= 0
        np.add.at(nu, (s.src[hit], idx[hit]), s.prob[hit])
        marks.append(mk)
        nus.append(nu)
        idxs.append(idx)
        srcs.append(s.src)
    return JumpMeasureView(marks, nus, idxs, srcs)


def special_decomposition_check(basis: LatticeBasis, window: JumpWindow) -> dict:
    """R_{2,I}*mu = R_{2,I}(*)mu~ + R_{2,I}*nu: pathwise residual and the
    martingale residual of the compensated middle term."""
    view = compensator(basis)
    table = [np.array([r_p(x, 2) if window.contains(x)[0] else 0.0 for x in mk])
             for mk in view.marks]
    mu = view.integral_against_mu(table)
    nu = view.integral_against_nu(table)
    mid = view.compensated(table)
    ident, mart = 0.0, 0.0
    for j, s in enumerate(basis.steps):
        if s.n_trans:
            ident = max(ident, float(np.max(np.abs(mu[j] - (mid[j] + nu[j][s.src])))))
            mart = max(mart, float(np.max(np.abs(conditional_mean(basis, j, mid[j])))))
    return {"identity_residual": ident, "martingale_residual": mart,
            "compensator_increments": nu}


# ---------------------------------------------------------------------------
# construction


def build_markov_lattice(times, dxo_codes, dxn_codes, probs: Callable, root_coords,
                         update: Callable | None = None, coord_names=None,
                         pii: bool = False, label: str = "lattice",
                         decimals: int = 10) -> LatticeBasis:
    """Generic forward builder.

    dxo_codes, dxn_codes: (C, l) labels per move code. probs(j, coords) returns
    (n_src, C) transition probabilities (zeros drop the move). update(coords_src,
    codes) returns successor coordinates; default adds (dxo, dxn) to the first
    2l coordinates. States at each time are identified by rounded coordinates.
    """
    dxo_codes = np.asarray(dxo_codes, dtype=float)
    dxn_codes = np.asarray(dxn_codes, dtype=float)
    C = dxo_codes.shape[0]
    coords = np.atleast_2d(np.asarray(root_coords, dtype=float))
    all_coords = [coords]
    steps = []
    delta = np.hstack([dxo_codes, dxn_codes])
    for j in range(len(times) - 1):
        p = np.asarray(probs(j, coords), dtype=float)
        src, code = np.nonzero(p > 0)
        pr = p[src, code]
        if update is None:
            nxt = coords[src].copy()
            nxt[:, : delta.shape[1]] += delta[code]
        else:
            nxt = update(coords[src], code)
        key = np.round(nxt, decimals) + 0.0
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        # keep unrounded coordinates of the first representative
        first = np.zeros(len(uniq), dtype=np.int64)
        first[inv[::-1]] = np.arange(len(inv))[::-1]
        coords = nxt[first]
        steps.append(Step(src.astype(np.int64), inv.astype(np.int64), pr, dxo_codes[code],
                          dxn_codes[code], code.astype(np.int64), all_coords[-1].shape[0],
                          len(uniq)))
        all_coords.append(coords)
    return LatticeBasis(times, steps, all_coords, coord_names, pii=pii, label=label)


def expand_to_tree(basis: LatticeBasis, max_nodes: int = 2_000_000) -> tuple[LatticeBasis, list]:
    """Full scenario tree of a lattice; returns (tree, lattice state of every tree node)."""
    steps, node_state = [], [np.zeros(1, dtype=np.int64)]
    total = 1
    for j, s in enumerate(basis.steps):
        order = np.argsort(s.src, kind="stable")
        counts = np.bincount(s.src, minlength=s.n_src)
        offs = np.concatenate([[0], np.cumsum(counts)])
        parents = node_state[-1]
        k = counts[parents]
        total += int(k.sum())
        if total > max_nodes:
            raise ValueError(f"tree exceeds {max_nodes} nodes")
        src = np.repeat(np.arange(len(parents)), k)
        within = np.arange(len(src)) - np.repeat(np.cumsum(k) - k, k)
        tr = order[offs[parents[src]] + within]
        steps.append(Step(src, np.arange(len(src)), s.prob[tr], s.dxo[tr], s.dxn[tr], s.code[tr],
                          len(parents), len(src)))
        node_state.append(s.dst[tr])
    coords = None
    if basis.coords is not None:
        coords = [basis.coords[j][ns] for j, ns in enumerate(node_state)]
    tree = LatticeBasis(basis.times, steps, coords, basis.coord_names, basis.pii,
                        label=basis.label + "-tree")
    return tree, node_state


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SampledPaths:
    states: np.ndarray  # (R, K+1)
    trans: np.ndarray  # (R, K)
    dxo: np.ndarray  # (R, K, l)
    dxn: np.ndarray

    def path(self, basis: LatticeBasis, r: int, which: str = "X") -> CadlagPath:
        inc = {"X": self.dxo + self.dxn, "Xo": self.dxo, "Xn": self.dxn}[which][r]
        return CadlagPath.from_jumps(basis.horizon, np.zeros(inc.shape[1]), basis.times[1:], inc)

    def triple(self, basis: LatticeBasis, r: int = 0):
        return tuple(self.path(basis, r, w) for w in ("X", "Xo", "Xn"))


def follow(basis: LatticeBasis, codes: np.ndarray) -> SampledPaths:
    """Walk the lattice along prescribed move codes (R, K)."""
    codes = np.atleast_2d(codes)
    R = codes.shape[0]
    states = np.zeros((R, basis.K + 1), dtype=np.int64)
    trans = np.zeros((R, basis.K), dtype=np.int64)
    for j, s in enumerate(basis.steps):
        tab = basis.lookup(j)
        if np.any((codes[:, j] < 0) | (codes[:, j] >= tab.shape[1])):
            raise ValueError(f"step {j}: unknown move code")
        t = tab[states[:, j], codes[:, j]]
        if np.any(t < 0):
            raise ValueError(f"step {j}: move code not available from sampled state")
        trans[:, j] = t
        states[:, j + 1] = s.dst[t]
    return _collect(basis, states, trans)


def _collect(basis, states, trans):
    R = states.shape[0]
    ell = basis.dim
    dxo = np.zeros((R, basis.K, ell))
    dxn = np.zeros((R, basis.K, ell))
    for j, s in enumerate(basis.steps):
        dxo[:, j] = s.dxo[trans[:, j]]
        dxn[:, j] = s.dxn[trans[:, j]]
    return SampledPaths(states, trans, dxo, dxn)


def sample_paths(basis: LatticeBasis, seed, n: int = 1) -> SampledPaths:
    """n independent paths; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    states = np.zeros((n, basis.K + 1), dtype=np.int64)
    trans = np.zeros((n, basis.K), dtype=np.int64)
    for j, s in enumerate(basis.steps):
        key = ("cdf", j)
        if key not in basis._cache:
            order = np.lexsort((np.arange(s.n_trans), s.src))
            cum = np.zeros(s.n_trans)
            csum = np.cumsum(s.prob[order])
            start = np.concatenate([[0], np.cumsum(np.bincount(s.src, minlength=s.n_src))])
            base = np.concatenate([[0.0], csum])[start[:-1]]
            cum = csum - base[s.src[order]]
            basis._cache[key] = (order, s.src[order] + np.minimum(cum, 1.0), start)
        order, keys, start = basis._cache[key]
        u = rng.random(n)
        pos = np.searchsorted(keys, states[:, j] + u, side="right")
        pos = np.minimum(pos, start[states[:, j] + 1] - 1)
        trans[:, j] = order[pos]
        states[:, j + 1] = s.dst[trans[:, j]]
    return _collect(basis, states, trans)


def sample_path(basis: LatticeBasis, seed):
    """(X, X^o, X^n) step paths of one sampled path plus the sampled states."""
    sp = sample_paths(basis, seed, 1)
    return sp.triple(basis, 0), sp
