"""Orthogonal decomposition Y = Y0 + Z.X^o + U*(mu - nu) + N of a lattice
martingale, computed node by node as an exact L^2 projection."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .brackets import LatticeBracket, predictable_covariation
from .finite_basis import (DRIFT_TOL, AdaptedProcess, Increments, LatticeBasis,
                           as_increments, compensator, conditional_mean)

RCOND = 1e-12


@dataclass(frozen=True)
class M2Check:
    passed: bool
    worst: float
    witness: tuple | None  # (step, state, mark vector, coordinate)

    def __bool__(self):
        return self.passed


def validate_m2prime(basis: LatticeBasis, tol: float = 1e-12) -> M2Check:
    """E[dX^o_i 1{dX^n = x} | state] = 0 for every state, coordinate and mark."""
    worst, witness = 0.0, None
    for j, s in enumerate(basis.steps):
        mk, idx = basis.marks(j)
        if not len(mk):
            continue
        onehot = (idx[:, None] == np.arange(len(mk))[None, :]).astype(float)
        m = conditional_mean(basis, j, onehot[:, :, None] * s.dxo[:, None, :])
        scale = max(1.0, float(np.max(np.abs(s.dxo))))
        k = np.unravel_index(np.argmax(np.abs(m)), m.shape)
        if abs(m[k]) > worst:
            worst = float(abs(m[k]))
            if worst > tol * scale:
                witness = (j, int(k[0]), tuple(float(v) for v in mk[k[1]]), int(k[2]))
    return M2Check(witness is None, worst, witness)


@dataclass
class Decomposition:
    Y: AdaptedProcess
    Y0: float
    Z: AdaptedProcess  # predictable, values[j] of shape (n_states_j, l)
    U: list  # per step (n_states_j, M_j) coefficients on marks[j]
    marks: list
    ZX: Increments
    Umu: Increments
    N: Increments
    diagnostics: dict = field(default_factory=dict)

    def U_at(self, j: int, state: int) -> dict:
        return {tuple(float(v) for v in x): float(c)
                for x, c in zip(self.marks[j], self.U[j][state])}


@dataclass
class _Flat:
    """All steps of a basis stacked into one transition axis, with the per-node
    projector. Mark columns are padded with zeros up to the largest mark set."""

    t_off: np.ndarray  # transition offset of each step
    s_off: np.ndarray  # source offset of each step
    gsrc: np.ndarray  # global source node of each transition
    P: sparse.csr_matrix  # (nodes, transitions) averaging operator
    dxo: np.ndarray
    onehot: np.ndarray  # (transitions, Mmax)
    B: np.ndarray  # (transitions, l + Mmax)
    Ginv: np.ndarray  # (nodes, D, D)
    rank: np.ndarray
    width: np.ndarray  # true number of basis columns per node
    n_marks: list
    weight: np.ndarray  # unconditional probability of each transition

    def split(self, flat: np.ndarray) -> list:
        return np.split(flat, self.t_off[1:-1])


def _flat(basis: LatticeBasis) -> _Flat:
    if "flat" in basis._cache:
        return basis._cache["flat"]
    ell = basis.dim
    view = compensator_cached(basis)
    steps = basis.steps
    n_marks = [len(m) for m in view.marks]
    Mmax = max(n_marks, default=0)
    t_off = np.concatenate([[0], np.cumsum([st.n_trans for st in steps])]).astype(np.int64)
    s_off = np.concatenate([[0], np.cumsum([st.n_src for st in steps])]).astype(np.int64)
    gsrc = np.concatenate([st.src + s_off[j] for j, st in enumerate(steps)])
    prob = np.concatenate([st.prob for st in steps])
    nT, nS = int(t_off[-1]), int(s_off[-1])
    P = sparse.csr_matrix((prob, (gsrc, np.arange(nT))), shape=(nS, nT))
    dxo = np.concatenate([st.dxo for st in steps])
    onehot = np.zeros((nT, Mmax))
    nu = np.zeros((nS, Mmax))
    width = np.empty(nS, dtype=np.int64)
    for j, st in enumerate(steps):
        _, idx = basis.marks(j)
        hit = idx >= 0
        onehot[t_off[j] + np.nonzero(hit)[0], idx[hit]] = 1.0
        nu[s_off[j]:s_off[j + 1], : n_marks[j]] = view.nu[j]
        width[s_off[j]:s_off[j + 1]] = ell + n_marks[j]
    B = np.hstack([dxo, onehot - nu[gsrc]])
    D = B.shape[1]
    G = (P @ (B[:, :, None] * B[:, None, :]).reshape(nT, D * D)).reshape(nS, D, D)
    G = 0.5 * (G + np.swapaxes(G, 1, 2))
    Ginv = np.linalg.pinv(G, rcond=RCOND, hermitian=True)
    ev = np.linalg.eigvalsh(G)
    top = np.maximum(ev[:, -1:], np.finfo(float).tiny)
    rank = np.sum(ev > RCOND * top, axis=1)
    pi = basis.forward_probabilities()
    weight = np.concatenate([pi[j][st.src] * st.prob for j, st in enumerate(steps)])
    f = _Flat(t_off, s_off, gsrc, P, dxo, onehot, B, Ginv, rank, width, n_marks, weight)
    basis._cache["flat"] = f
    return f


def compensator_cached(basis: LatticeBasis):
    if "compensator" not in basis._cache:
        basis._cache["compensator"] = compensator(basis)
    return basis._cache["compensator"]


def _flat_increments(basis: LatticeBasis, a) -> np.ndarray:
    inc = as_increments(basis, a).inc
    return np.concatenate(inc) if inc else np.empty(0)


def decompose(basis: LatticeBasis, Y: AdaptedProcess, check: bool = True) -> Decomposition:
    """Project each increment of Y onto span{dX^o} + span{1{dX^n=x} - nu(x)}; the
    residual is the increment of N."""
    if check:
        m2 = validate_m2prime(basis)
        if not m2:
            raise ValueError(f"condition (M2') violated at step/state/mark/coord {m2.witness}")
    if len(Y.values) != basis.K + 1:
        raise ValueError("process does not live on this basis")
    f = _flat(basis)
    ell = basis.dim
    dy = _flat_increments(basis, Y)
    drift = float(np.max(np.abs(f.P @ dy), initial=0.0))
    if drift > DRIFT_TOL:
        raise ValueError(f"Y is not a martingale (conditional drift {drift:.3e})")
    c = f.P @ (f.B * dy[:, None])
    coef = np.einsum("sij,sj->si", f.Ginv, c)
    cs = coef[f.gsrc]
    zx = np.einsum("ti,ti->t", cs[:, :ell], f.dxo)
    um = np.einsum("ti,ti->t", cs[:, ell:], f.B[:, ell:])
    n = dy - zx - um
    Z, U = [], []
    for j in range(basis.K):
        block = coef[f.s_off[j]:f.s_off[j + 1]]
        Z.append(block[:, :ell])
        U.append(block[:, ell:ell + f.n_marks[j]])
    Z.append(np.full((basis.n_states[-1], ell), np.nan))
    view = compensator_cached(basis)
    y0 = float(Y.values[0][0])
    d = Decomposition(Y, y0, AdaptedProcess(Z, predictable=True), U, list(view.marks),
                      Increments(np.float64(0.0), f.split(zx)),
                      Increments(np.float64(0.0), f.split(um)),
                      Increments(np.float64(0.0), f.split(n)))
    d.diagnostics = diagnostics(basis, d)
    d.diagnostics["rank_deficient_nodes"] = int(np.sum(f.rank < f.width))
    return d


def diagnostics(basis: LatticeBasis, d: Decomposition) -> dict:
    """Residuals of the defining properties and the energy identity."""
    f = _flat(basis)
    dy = _flat_increments(basis, d.Y)
    cat = (lambda x: np.concatenate(x) if len(x) else np.empty(0))
    n, zx, um = cat(d.N.inc), cat(d.ZX.inc), cat(d.Umu.inc)

    def amax(x):
        return float(np.max(np.abs(x), initial=0.0))

    recon = amax(dy - (zx + um + n))
    orth = amax(f.P @ (f.dxo * n[:, None]))
    mark = amax(f.P @ (f.onehot * n[:, None])) if f.onehot.shape[1] else 0.0
    cross = amax(f.P @ (zx * um))
    e_zx = float(f.weight @ zx ** 2)
    e_um = float(f.weight @ um ** 2)
    e_n = float(f.weight @ n ** 2)
    pi = basis.forward_probabilities()
    yT = d.Y.values[-1] - d.Y0
    total = float(pi[-1] @ yT ** 2)
    return {
        "reconstruction_error": recon,
        "orthogonality_residual": orth,
        "mark_residual": mark,
        "integral_cross_residual": cross,
        "energy_total": total,
        "energy_ZX": e_zx,
        "energy_Umu": e_um,
        "energy_N": e_n,
        "energy_identity_error": abs(total - (e_zx + e_um + e_n)),
    }


def compensated_mark_process(basis: LatticeBasis) -> Increments:
    """X^n minus its compensator (vector, per transition)."""
    view = compensator_cached(basis)
    inc = []
    for j, s in enumerate(basis.steps):
        mean = view.nu[j] @ view.marks[j] if len(view.marks[j]) else np.zeros((s.n_src, basis.dim))
        inc.append(s.dxn - mean[s.src])
    return Increments(np.zeros(basis.dim), inc)


def diffusive_process(basis: LatticeBasis) -> Increments:
    return Increments(np.zeros(basis.dim), [s.dxo for s in basis.steps])


@dataclass
class BracketRecord:
    Y: LatticeBracket
    YX: LatticeBracket
    N: LatticeBracket
    YXo: LatticeBracket
    YXn: LatticeBracket
    ZX: LatticeBracket
    Umu: LatticeBracket
    YN: LatticeBracket

    def identity_residuals(self) -> dict:
        """<Y,N> = <N> and <Y> = <Z.X^o> + <U*mu~> + <N>, node by node."""
        yn = max((float(np.max(np.abs(a - b), initial=0.0))
                  for a, b in zip(self.YN.inc, self.N.inc)), default=0.0)
        add = max((float(np.max(np.abs(y - (z + u + n)), initial=0.0))
                   for y, z, u, n in zip(self.Y.inc, self.ZX.inc, self.Umu.inc, self.N.inc)),
                  default=0.0)
        return {"angle_YN_minus_N": yn, "additivity": add}


def angle_brackets_of_decomposition(basis: LatticeBasis, d: Decomposition) -> BracketRecord:
    if len(d.N.inc) != basis.K or any(len(n) != s.n_trans for n, s in zip(d.N.inc, basis.steps)):
        raise ValueError("decomposition belongs to a different basis")
    dY = d.Y.increments(basis)
    Xo = diffusive_process(basis)
    Xn = compensated_mark_process(basis)
    X = Xo + Xn

    def pc(a, b):
        return predictable_covariation(basis, a, b, check=False)

    return BracketRecord(Y=pc(dY, dY), YX=pc(dY, X), N=pc(d.N, d.N), YXo=pc(dY, Xo),
                         YXn=pc(dY, Xn), ZX=pc(d.ZX, d.ZX), Umu=pc(d.Umu, d.Umu),
                         YN=pc(dY, d.N))


def write_decomposition(basis: LatticeBasis, d: Decomposition, csv_path, json_path) -> None:
    """CSV rows per (time index < K, state): Z, conditional mean of N given the
    state, and U per mark; diagnostics go to JSON."""
    ell = basis.dim
    all_marks = sorted({tuple(map(float, x)) for mk in d.marks for x in mk})
    pi = basis.forward_probabilities()
    n_mean = np.zeros(1)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "state"] + [f"Z_{i + 1}" for i in range(ell)] + ["N"]
                   + ["U@" + ":".join(repr(v) for v in x) for x in all_marks])
        for j, s in enumerate(basis.steps):
            col = {tuple(map(float, x)): c for c, x in enumerate(d.marks[j])}
            for st in range(s.n_src):
                u = [repr(float(d.U[j][st, col[x]])) if x in col else "" for x in all_marks]
                w.writerow([repr(float(basis.times[j])), st]
                           + [repr(float(v)) for v in d.Z.values[j][st]]
                           + [repr(float(n_mean[st]))] + u)
            wt = pi[j][s.src] * s.prob
            acc = np.bincount(s.dst, weights=wt * (n_mean[s.src] + d.N.inc[j]), minlength=s.n_dst)
            n_mean = acc / pi[j + 1]
    with open(json_path, "w") as fh:
        json.dump({k: float(v) for k, v in d.diagnostics.items()}, fh, indent=2, sort_keys=True)
