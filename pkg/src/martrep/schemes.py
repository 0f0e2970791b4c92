"""Level-k lattices for random-walk / thinned compound Poisson schemes, a coupled
sampler tying each level to one Brownian path and one compound Poisson path,
payoffs and closed-form limit references."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit
from scipy import stats

from .cadlag_paths import CadlagPath
from .finite_basis import LatticeBasis, build_markov_lattice

KINDS = ("trinomial_bm", "binomial_bm", "thinned_compound_poisson", "levy_mixed")
PAYOFFS = ("linear", "square", "indicator", "call")
MAX_JUMP_PROB = 0.5


@dataclass(frozen=True)
class SchemeSpec:
    kind: str
    horizon: float = 1.0
    levels: tuple = (16, 32, 64)
    sigma: float = 0.0
    intensity: float = 0.0
    marks: tuple = ()
    mark_probs: tuple = ()
    payoff: str = "square"
    payoff_param: float = 0.0  # barrier for indicator, strike for call
    walk: str = "trinomial"  # diffusive walk of levy_mixed

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(k) for k in self.levels))
        object.__setattr__(self, "marks", tuple(float(x) for x in self.marks))
        object.__setattr__(self, "mark_probs", tuple(float(p) for p in self.mark_probs))
        if self.kind not in KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.payoff not in PAYOFFS:
            raise ValueError(f"unknown payoff {self.payoff!r}")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.levels or any(k <= 0 for k in self.levels):
            raise ValueError("levels must be positive")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must be strictly increasing")
        if self.sigma < 0 or self.intensity < 0:
            raise ValueError("sigma and intensity must be nonnegative")
        if self.has_walk and not self.sigma > 0:
            raise ValueError(f"{self.kind} needs sigma > 0")
        if self.has_jumps:
            if not self.intensity > 0 or not self.marks:
                raise ValueError(f"{self.kind} needs a positive intensity and marks")
            if len(self.marks) != len(self.mark_probs) or any(x == 0 for x in self.marks):
                raise ValueError("marks must be nonzero with one probability each")
            if any(p <= 0 for p in self.mark_probs) or abs(sum(self.mark_probs) - 1) > 1e-12:
                raise ValueError("mark probabilities must be positive and sum to 1")
        if self.walk not in ("trinomial", "binomial"):
            raise ValueError("walk must be trinomial or binomial")

    @property
    def has_walk(self) -> bool:
        return self.kind != "thinned_compound_poisson"

    @property
    def has_jumps(self) -> bool:
        return self.kind in ("thinned_compound_poisson", "levy_mixed")

    @property
    def walk_kind(self) -> str | None:
        if not self.has_walk:
            return None
        return {"trinomial_bm": "trinomial", "binomial_bm": "binomial"}.get(self.kind, self.walk)

    @property
    def is_pii(self) -> bool:
        # every scheme here has i.i.d. increments
        return True

    @property
    def mark_mean(self) -> float:
        return float(np.dot(self.marks, self.mark_probs)) if self.has_jumps else 0.0

    @property
    def mark_second_moment(self) -> float:
        return float(np.dot(np.square(self.marks), self.mark_probs)) if self.has_jumps else 0.0

    def step_size(self, k: int) -> float:
        """Walk spacing h at level k."""
        if self.walk_kind == "trinomial":
            return self.sigma * math.sqrt(2 * self.horizon / k)
        if self.walk_kind == "binomial":
            return self.sigma * math.sqrt(self.horizon / k)
        return 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        d["marks"] = list(self.marks)
        d["mark_probs"] = list(self.mark_probs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SchemeSpec":
        allowed = set(cls.__dataclass_fields__)
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"unknown scheme fields {sorted(extra)}")
        return cls(**d)


def _walk_table(spec: SchemeSpec):
    """(integer moves, probabilities) of the diffusive walk."""
    wk = spec.walk_kind
    if wk == "trinomial":
        return np.array([-1, 0, 1]), np.array([0.25, 0.5, 0.25]), 2
    if wk == "binomial":
        return np.array([-1, 1]), np.array([0.5, 0.5]), 1
    return np.array([0]), np.array([1.0]), 0


def build_level(spec: SchemeSpec, k: int) -> LatticeBasis:
    """Recombining lattice with state (walk index, jump sum)."""
    if k <= 0:
        raise ValueError("k must be positive")
    T = spec.horizon
    q = spec.intensity * T / k
    if spec.has_jumps and q > MAX_JUMP_PROB:
        raise ValueError(f"jump probability per step {q} exceeds {MAX_JUMP_PROB}: refine the level")
    moves, wprob, _ = _walk_table(spec)
    h = spec.step_size(k)
    marks = np.array(spec.marks) if spec.has_jumps else np.empty(0)
    slot_prob = np.concatenate([[1 - q], q * np.array(spec.mark_probs)]) if spec.has_jumps \
        else np.array([1.0])
    slot_mark = np.concatenate([[0.0], marks])
    W, S = len(moves), len(slot_prob)
    dxo = np.repeat(moves * h, S)[:, None]
    dxn = np.tile(slot_mark, W)[:, None]
    p_code = (wprob[:, None] * slot_prob[None, :]).reshape(-1)
    delta = np.stack([np.repeat(moves, S).astype(float), np.tile(slot_mark, W)], axis=1)

    def probs(j, coords):
        return np.broadcast_to(p_code, (coords.shape[0], len(p_code)))

    def update(c, code):
        return c + delta[code]

    basis = build_markov_lattice(np.linspace(0.0, T, k + 1), dxo, dxn, probs, [[0.0, 0.0]],
                                 update=update, coord_names=("walk_index", "jump_sum"),
                                 pii=True, label=f"{spec.kind}-k{k}")
    basis.spacing = h
    return basis


def state_values(spec: SchemeSpec, basis: LatticeBasis, j: int) -> np.ndarray:
    """X = X^o + X^n at the states of time index j."""
    c = basis.coords[j]
    return c[:, 0] * basis.spacing + c[:, 1]


def payoff(spec: SchemeSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if spec.payoff == "linear":
        return x.copy()
    if spec.payoff == "square":
        return x * x
    if spec.payoff == "indicator":
        return (x > spec.payoff_param).astype(float)
    if spec.payoff == "call":
        return np.maximum(x - spec.payoff_param, 0.0)
    raise ValueError(f"unknown payoff {spec.payoff!r}")


def terminal_payoff(spec: SchemeSpec, basis: LatticeBasis) -> np.ndarray:
    return payoff(spec, state_values(spec, basis, basis.K))


# ---------------------------------------------------------------------------
# negative-test constructor


def build_m2prime_violating(k: int = 4, h: float = 0.5, mark: float = 1.0, q: float = 0.25,
                            T: float = 1.0) -> LatticeBasis:
    """Walk that moves +h exactly when a jump fires (breaks (M2'))."""
    # codes: 0 = (-h, none), 1 = (+h, none), 2 = (+h, jump)
    dxo = np.array([[-h], [h], [h]])
    dxn = np.array([[0.0], [0.0], [mark]])
    p_up = 0.5 - q
    p = np.array([0.5, p_up, q])
    if p_up <= 0:
        raise ValueError("need q < 1/2")
    delta = np.array([[-1.0, 0.0], [1.0, 0.0], [1.0, mark]])

    def probs(j, coords):
        return np.broadcast_to(p, (coords.shape[0], 3))

    b = build_markov_lattice(np.linspace(0, T, k + 1), dxo, dxn, probs, [[0.0, 0.0]],
                             update=lambda c, code: c + delta[code], label="m2prime-violating")
    b.spacing = h
    return b


# ---------------------------------------------------------------------------
# coupled sampling


def master_resolution(spec: SchemeSpec, k: int) -> int:
    return math.lcm(*spec.levels, k)


def replication_rngs(seed: int, r: int, k: int):
    """Independent streams for replication r: Brownian, compound Poisson, level-k thinning."""
    return (np.random.default_rng([seed, r, 0]), np.random.default_rng([seed, r, 1]),
            np.random.default_rng([seed, r, 2, k]))


@njit(cache=True)
def _hypergeom_ppf(u, N, K, n):
    """Smallest x with P(H <= x) >= u for H hypergeometric (population N, K
    successes, n draws), elementwise. Weights are built outward from the mode
    so that large populations do not underflow."""
    out = np.empty(u.shape, dtype=np.int64)
    for i in range(u.size):
        NN, KK, nn = N.flat[i], K.flat[i], n.flat[i]
        lo, hi = max(0, nn + KK - NN), min(nn, KK)
        if lo == hi:
            out.flat[i] = lo
            continue
        mode = min(max((nn + 1) * (KK + 1) // (NN + 2), lo), hi)
        w = np.zeros(hi - lo + 1)
        w[mode - lo] = 1.0
        for x in range(mode, hi):
            w[x + 1 - lo] = w[x - lo] * (KK - x) * (nn - x) / ((x + 1.0) * (NN - KK - nn + x + 1.0))
            if w[x + 1 - lo] < 1e-300:
                break
        for x in range(mode, lo, -1):
            w[x - 1 - lo] = w[x - lo] * x * (NN - KK - nn + x) / ((KK - x + 1.0) * (nn - x + 1.0))
            if w[x - 1 - lo] < 1e-300:
                break
        target = u.flat[i] * w.sum()
        acc = 0.0
        x = lo
        while x < hi:
            acc += w[x - lo]
            if acc >= target:
                break
            x += 1
        out.flat[i] = x
    return out


def _dyadic_counts(Wm: np.ndarray, M: int, k: int, trials: int, sigma: float, T: float):
    """Walk step counts (R, k) coupled to Brownian values on the master grid.

    The walk is binomial-count based: each step has Bin(trials, 1/2) successes.
    The total over [0, T] is the quantile transform of the Brownian terminal
    value; every segment is then split by the conditional (hypergeometric) law
    of its left half, quantile-coupled to the Brownian bridge at the split time.
    """
    R = Wm.shape[0]
    stride = M // k
    dt = T / k
    counts = np.zeros((R, k), dtype=np.int64)
    u = stats.norm.cdf(Wm[:, -1] / (sigma * math.sqrt(T)))
    tot = stats.binom.ppf(np.clip(u, 1e-300, 1 - 1e-16), trials * k, 0.5).astype(np.int64)
    segs = [(0, k)]
    totals = [tot]
    while segs:
        nxt_segs, nxt_tot = [], []
        split = [(a, b, c) for (a, b), c in zip(segs, totals) if b - a > 1]
        for (a, b), c in zip(segs, totals):
            if b - a == 1:
                counts[:, a] = c
        if not split:
            break
        A = np.array([s[0] for s in split])
        B = np.array([s[1] for s in split])
        mid = A + (B - A) // 2
        C = np.stack([s[2] for s in split], axis=1)  # (R, S)
        wl, wm_, wr = Wm[:, A * stride], Wm[:, mid * stride], Wm[:, B * stride]
        tl, tm, tr = A * dt, mid * dt, B * dt
        mean = wl + (tm - tl) / (tr - tl) * (wr - wl)
        sd = sigma * np.sqrt((tm - tl) * (tr - tm) / (tr - tl))
        uu = np.clip(stats.norm.cdf((wm_ - mean) / sd), 1e-300, 1 - 1e-16)
        shape = uu.shape
        left = _hypergeom_ppf(uu, np.broadcast_to(trials * (B - A), shape).astype(np.int64),
                              np.ascontiguousarray(C, dtype=np.int64),
                              np.broadcast_to(trials * (mid - A), shape).astype(np.int64))
        for i, (a, b, _) in enumerate(split):
            m = mid[i]
            nxt_segs += [(a, m), (m, b)]
            nxt_tot += [left[:, i], C[:, i] - left[:, i]]
        segs, totals = nxt_segs, nxt_tot
    return counts


@dataclass
class CoupledSample:
    """R coupled replications at level k."""

    spec: SchemeSpec
    k: int
    seed: int
    replications: np.ndarray
    codes: np.ndarray  # (R, k) lattice move codes
    dxo: np.ndarray  # (R, k)
    dxn: np.ndarray  # (R, k)
    master_times: np.ndarray
    brownian: np.ndarray  # (R, M+1) sigma * W on the master grid
    cp_times: list = field(default_factory=list)
    cp_marks: list = field(default_factory=list)
    collisions: np.ndarray = None  # (R,) any step where thinning and Poisson disagree

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.spec.horizon, self.k + 1)

    @property
    def brownian_on_grid(self) -> np.ndarray:
        stride = (len(self.master_times) - 1) // self.k
        return self.brownian[:, ::stride]

    def cp_on(self, r: int, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        c = np.concatenate([[0.0], np.cumsum(self.cp_marks[r])])
        return c[np.searchsorted(self.cp_times[r], t, side="right")]

    def limit_on_grid(self) -> np.ndarray:
        """Raw limit X at the level-k grid times, (R, k+1)."""
        g = self.grid
        return self.brownian_on_grid + np.stack([self.cp_on(r, g) for r in range(len(self.replications))])

    def discrete_paths(self, r: int):
        T, g = self.spec.horizon, self.grid[1:]
        xo = CadlagPath.from_jumps(T, [0.0], g, self.dxo[r][:, None])
        xn = CadlagPath.from_jumps(T, [0.0], g, self.dxn[r][:, None])
        return xo + xn, xo, xn

    def limit_paths(self, r: int, continuous: bool = False):
        """(X, X^c, X^d) of the limit. The continuous part is sampled on the
        level-k grid as a step path, or on the master grid as a continuous
        part when continuous=True; compound Poisson jumps keep their times."""
        T = self.spec.horizon
        if continuous:
            xc = CadlagPath(T, [0.0], drift_times=self.master_times,
                            drift_values=self.brownian[r][:, None])
        else:
            xc = CadlagPath(T, [0.0], self.grid[1:], self.brownian_on_grid[r][1:, None])
        xd = CadlagPath.from_jumps(T, [0.0], self.cp_times[r], np.asarray(self.cp_marks[r])[:, None])
        return xc + xd, xc, xd


def sample_coupled(spec: SchemeSpec, k: int, seed: int, replications=1) -> CoupledSample:
    """Coupled discrete/limit replications. ``replications`` is a count or an
    iterable of replication indices; replication r depends only on (seed, r)
    and, for the jump thinning, on k."""
    reps = np.arange(replications) if np.isscalar(replications) else np.asarray(replications)
    T = spec.horizon
    M = master_resolution(spec, k)
    mt = np.linspace(0.0, T, M + 1)
    R = len(reps)
    Wm = np.zeros((R, M + 1))
    cp_t, cp_m = [], []
    extra_u = np.zeros((R, k))
    extra_mark_u = np.zeros((R, k))
    for i, r in enumerate(reps):
        rw, rc, ra = replication_rngs(seed, int(r), k)
        if spec.has_walk:
            Wm[i, 1:] = np.cumsum(rw.standard_normal(M)) \
                * spec.sigma * math.sqrt(T / M)
        if spec.has_jumps:
            n = rc.poisson(spec.intensity * T)
            t = np.sort(T - rc.random(n) * T)  # uniform on (0, T]
            cp_t.append(t)
            cp_m.append(np.asarray(spec.marks)[rc.choice(len(spec.marks), size=n,
                                                         p=spec.mark_probs)])
            extra_u[i] = ra.random(k)
            extra_mark_u[i] = ra.random(k)
        else:
            cp_t.append(np.empty(0))
            cp_m.append(np.empty(0))
    moves, _, trials = _walk_table(spec)
    h = spec.step_size(k)
    if spec.has_walk:
        cnt = _dyadic_counts(Wm, M, k, trials, spec.sigma, T)
        widx = cnt  # move index equals the count
        dxo = moves[widx] * h
    else:
        widx = np.zeros((R, k), dtype=np.int64)
        dxo = np.zeros((R, k))
    slot = np.zeros((R, k), dtype=np.int64)
    dxn = np.zeros((R, k))
    collisions = np.zeros(R, dtype=bool)
    if spec.has_jumps:
        q = spec.intensity * T / k
        if q > MAX_JUMP_PROB:
            raise ValueError(f"jump probability per step {q} exceeds {MAX_JUMP_PROB}")
        extra_p = (q - (1 - math.exp(-q))) / math.exp(-q)
        cum = np.cumsum(spec.mark_probs)
        mark_of = {x: i + 1 for i, x in enumerate(spec.marks)}
        for i in range(R):
            step = np.clip(np.ceil(cp_t[i] * k / T).astype(np.int64) - 1, 0, k - 1)
            n_in = np.bincount(step, minlength=k)
            first = np.full(k, -1)
            first[step[::-1]] = np.arange(len(step))[::-1]
            hit = n_in >= 1
            slot[i, hit] = [mark_of[x] for x in cp_m[i][first[hit]]]
            extra = (~hit) & (extra_u[i] < extra_p)
            slot[i, extra] = np.searchsorted(cum, extra_mark_u[i, extra], side="right") + 1
            slot[i] = np.minimum(slot[i], len(spec.marks))
            collisions[i] = bool(np.any(n_in >= 2) or np.any(extra))
        marks0 = np.concatenate([[0.0], spec.marks])
        dxn = marks0[slot]
    S = len(spec.marks) + 1 if spec.has_jumps else 1
    codes = widx * S + slot
    return CoupledSample(spec, k, seed, reps, codes, dxo, dxn, mt, Wm, cp_t, cp_m, collisions)


# ---------------------------------------------------------------------------
# closed-form limits


def has_closed_form(spec: SchemeSpec) -> bool:
    return spec.payoff in ("linear", "square") or not spec.has_jumps


def limit_value(spec: SchemeSpec, t, x) -> np.ndarray:
    """E[xi(X_T) | X_t = x] for the limit (sigma W plus compound Poisson)."""
    t, x = np.asarray(t, dtype=float), np.asarray(x, dtype=float)
    tau = np.maximum(spec.horizon - t, 0.0)
    lam, m1, m2, s = spec.intensity, spec.mark_mean, spec.mark_second_moment, spec.sigma
    if spec.payoff == "linear":
        return x + lam * m1 * tau
    if spec.payoff == "square":
        c = x + lam * m1 * tau
        return c * c + s * s * tau + lam * m2 * tau
    if spec.has_jumps:
        raise ValueError("no closed form for this payoff with jumps")
    sd = s * np.sqrt(tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = (x - spec.payoff_param) / sd
    if spec.payoff == "indicator":
        return np.where(tau > 0, stats.norm.cdf(d), (x > spec.payoff_param).astype(float))
    return np.where(tau > 0, (x - spec.payoff_param) * stats.norm.cdf(d) + sd * stats.norm.pdf(d),
                    np.maximum(x - spec.payoff_param, 0.0))


def limit_delta(spec: SchemeSpec, t, x) -> np.ndarray:
    """Integrand Z = d/dx of the limit value (w.r.t. the continuous part sigma W)."""
    t, x = np.asarray(t, dtype=float), np.asarray(x, dtype=float)
    tau = np.maximum(spec.horizon - t, 0.0)
    if spec.payoff == "linear":
        return np.ones_like(x)
    if spec.payoff == "square":
        return 2 * (x + spec.intensity * spec.mark_mean * tau)
    if spec.has_jumps:
        raise ValueError("no closed form for this payoff with jumps")
    sd = spec.sigma * np.sqrt(tau)
    d = (x - spec.payoff_param) / sd
    if spec.payoff == "indicator":
        return stats.norm.pdf(d) / sd
    return stats.norm.cdf(d)


def limit_jump_response(spec: SchemeSpec, t, x, mark) -> np.ndarray:
    """U(t, mark) = f(t, x + mark) - f(t, x)."""
    return limit_value(spec, t, np.asarray(x) + mark) - limit_value(spec, t, x)


def limit_bracket_references(spec: SchemeSpec, grid: np.ndarray, x_grid: np.ndarray) -> dict:
    """Left-point sums on the grid of the limit predictable brackets
    <Y>, <Y,X>, <Y,X^c>, <Y,X^d> along limit paths x_grid (R, k+1)."""
    dt = np.diff(grid)
    t = grid[:-1]
    xl = x_grid[:, :-1]
    s2 = spec.sigma ** 2
    z = limit_delta(spec, t, xl)
    yc = z * s2 * dt
    yy = z * z * s2 * dt
    yd = np.zeros_like(yc)
    if spec.has_jumps:
        for x, p in zip(spec.marks, spec.mark_probs):
            u = limit_jump_response(spec, t, xl, x)
            yd = yd + spec.intensity * p * x * u * dt
            yy = yy + spec.intensity * p * u * u * dt
    zero = np.zeros((x_grid.shape[0], 1))

    def cum(a):
        return np.concatenate([zero, np.cumsum(a, axis=1)], axis=1)

    return {"Y": cum(yy), "YX": cum(yc + yd), "YXo": cum(yc), "YXn": cum(yd)}
