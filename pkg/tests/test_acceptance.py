"""Acceptance suite: one group of tests per criterion, each at its stated
tolerance and time budget. conftest.py prints a PASS/FAIL line per criterion."""

import dataclasses
import time

import numpy as np
import pytest

from martrep.cadlag_paths import (CadlagPath, distances, joint_j1_check, j1_distance,
                                  lu_distance, uniform_distance)
from martrep.finite_basis import martingale_from_terminal
from martrep.gkw import angle_brackets_of_decomposition, decompose
from martrep.harness import ExperimentConfig, filtration_weak_convergence_diagnostic, run
from martrep.schemes import PAYOFFS, SchemeSpec, build_level, terminal_payoff
from martrep.young import (PiecewiseLinearYoung, PowerYoung, conjugate, legendre_on_grid,
                           moderate_constant, young_gap)

from lattices import random_levy_lattice
from oracles import j1_bruteforce

CRITERIA = {
    1: "decomposition exact on 100 random lattices x 20 martingales",
    2: "binomial control has zero residual",
    3: "trinomial square payoff: residual bracket, J1 and bracket convergence",
    4: "thinned compound Poisson: U(x) = x, N = 0, coupled jump times",
    5: "metric ordering, triangle inequality, shifted unit jump",
    6: "joint-convergence detector",
    7: "identity suite on every harness run",
    8: "Young function battery",
    9: "filtration diagnostic decreases over levels",
}

# E<N^k>_1 for criterion 3, frozen from the first exact run
C3_EXPECTED_N = {16: 0.0625, 32: 0.03125, 64: 0.015625, 128: 0.0078125, 256: 0.00390625}


def unit(t, T=1.0):
    return CadlagPath.from_jumps(T, [0.0], [t], [[1.0]])


# --- 1 -----------------------------------------------------------------------------

def test_criterion_1_random_lattices():
    rng = np.random.default_rng(20240)
    t0 = time.perf_counter()
    worst = dict.fromkeys(("reconstruction_error", "orthogonality_residual", "mark_residual",
                           "energy_identity_error"), 0.0)
    for it in range(100):
        ell = 1 if it % 2 == 0 else 2
        k = int(rng.integers(2, 65)) if ell == 1 else int(rng.integers(2, 9))
        b = random_levy_lattice(rng, k, ell, int(rng.integers(1, 4)))
        for i in range(20):
            xi = rng.normal(size=b.n_states[-1]) * rng.uniform(0.1, 10)
            d = decompose(b, martingale_from_terminal(b, xi), check=(i == 0))
            for key in worst:
                worst[key] = max(worst[key], d.diagnostics[key])
    elapsed = time.perf_counter() - t0
    print(f"criterion 1 worst residuals {worst} in {elapsed:.1f} s")
    for key, v in worst.items():
        assert v <= 1e-9, key
    assert elapsed < 30


# --- 2 -----------------------------------------------------------------------------

def test_criterion_2_binomial_control():
    t0 = time.perf_counter()
    base = SchemeSpec("binomial_bm", levels=(16, 32, 64, 128, 256), sigma=1.0)
    for name in PAYOFFS:
        spec = dataclasses.replace(base, payoff=name, payoff_param=0.1)
        for k in spec.levels:
            b = build_level(spec, k)
            # oracle: residual dimension per node = (#successors - 1) - rank of the
            # centred one-dimensional increments, which is 1 iff their variance is positive
            for s in b.steps:
                n_succ = np.bincount(s.src, minlength=s.n_src)
                m1 = np.bincount(s.src, weights=s.prob * s.dxo[:, 0], minlength=s.n_src)
                m2 = np.bincount(s.src, weights=s.prob * s.dxo[:, 0] ** 2, minlength=s.n_src)
                rank = (m2 - m1 ** 2 > 0).astype(int)
                assert np.all(n_succ - 1 - rank == 0)
            d = decompose(b, martingale_from_terminal(b, terminal_payoff(spec, b)))
            nbr = angle_brackets_of_decomposition(b, d).N
            assert all(np.all(np.abs(v) <= 1e-24) for v in nbr.inc)
    elapsed = time.perf_counter() - t0
    assert elapsed < 5


# --- 3 -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def c3_report():
    spec = SchemeSpec("trinomial_bm", levels=(16, 32, 64, 128, 256), sigma=1.0, payoff="square")
    t0 = time.perf_counter()
    rep = run(ExperimentConfig(spec, replications=400, seed=12345, epsilons=(0.1, 0.2, 0.5)))
    return rep, time.perf_counter() - t0


def test_criterion_3_exact_residual_bracket(c3_report):
    rep, _ = c3_report
    vals = [lv["exact"]["expected_N_bracket"] for lv in rep.data["levels"]]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] <= 0.02
    for lv in rep.data["levels"]:
        assert lv["exact"]["expected_N_bracket"] == pytest.approx(C3_EXPECTED_N[lv["k"]],
                                                                  rel=1e-9)


def test_criterion_3_j1_decreasing(c3_report):
    rep, _ = c3_report
    j1 = [lv["monte_carlo"]["j1_Y"]["mean"] for lv in rep.data["levels"]]
    print(f"criterion 3 mean J1(Y^k, Y): {j1}")
    assert all(b < a for a, b in zip(j1, j1[1:]))


def test_criterion_3_j1_fivefold_reduction(c3_report):
    rep, _ = c3_report
    j1 = [lv["monte_carlo"]["j1_Y"]["mean"] for lv in rep.data["levels"]]
    print(f"criterion 3 J1 reduction factor {j1[0] / j1[-1]:.2f}")
    assert j1[-1] * 5 <= j1[0]


def test_criterion_3_bracket_l1(c3_report):
    rep, _ = c3_report
    err = [lv["monte_carlo"]["bracket_L1_error"]["YXo"] for lv in rep.data["levels"]]
    print(f"criterion 3 L1 error of <Y, X^o>: {err}")
    assert all(b < a for a, b in zip(err, err[1:]))
    assert err[-1] <= 0.05


def test_criterion_3_runtime(c3_report):
    _, elapsed = c3_report
    assert elapsed < 180


# --- 4 -----------------------------------------------------------------------------

C4_SPEC = SchemeSpec("thinned_compound_poisson", levels=(8, 16, 32, 64, 128), intensity=2.0,
                     marks=(-1.0, 1.0), mark_probs=(0.5, 0.5), payoff="linear")


@pytest.fixture(scope="module")
def c4_report():
    t0 = time.perf_counter()
    rep = run(ExperimentConfig(C4_SPEC, replications=200, seed=4, epsilons=(0.1,)))
    return rep, time.perf_counter() - t0


def test_criterion_4_decomposition(c4_report):
    t0 = time.perf_counter()
    for k in C4_SPEC.levels:
        b = build_level(C4_SPEC, k)
        d = decompose(b, martingale_from_terminal(b, terminal_payoff(C4_SPEC, b)))
        for j in range(b.K):
            U = d.U[j]
            marks = d.marks[j][:, 0]
            assert np.all(np.abs(U - marks[None, :]) <= 1e-12)
        assert all(np.all(np.abs(n) <= 1e-12) for n in d.N.inc)
    assert time.perf_counter() - t0 + c4_report[1] < 30


def test_criterion_4_jump_times(c4_report):
    rep, _ = c4_report
    for lv in rep.data["levels"]:
        jt = lv["monte_carlo"]["jump_times"]
        assert jt["all_matched"], lv["k"]
        assert jt["replications_without_collision"] > 0
        assert lv["exact"]["expected_N_bracket"] <= 1e-24


# --- 5 -----------------------------------------------------------------------------

def _random_step_path(rng, T):
    n = int(rng.integers(0, 6))
    times = np.sort(rng.choice(np.arange(1, 200), n, replace=False) * T / 200)
    sizes = rng.choice([-2.0, -1.0, -0.25, 0.5, 1.0, 3.0], (n, 1))
    return CadlagPath.from_jumps(T, [float(rng.uniform(-1, 1))], times, sizes)


def test_criterion_5_metric_suite():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    for _ in range(500):
        T = float(rng.choice([1.0, 2.5, 4.0]))
        a, b, c = (_random_step_path(rng, T) for _ in range(3))
        d = distances(a, b)
        assert d.j1 <= d.lu <= min(1.0, uniform_distance(a, b))
        for f in (j1_distance, lu_distance, uniform_distance):
            assert f(a, c) <= f(a, b) + f(b, c) + 1e-9
    for _ in range(25):
        t1, t2 = rng.uniform(0.01, 0.99, 2)
        got = j1_distance(unit(t1), unit(t2))
        oracle = j1_bruteforce((0.0, [t1], [1.0]), (0.0, [t2], [1.0]), 1.0)
        assert got == pytest.approx(abs(t1 - t2), abs=1e-9)
        assert oracle == pytest.approx(abs(t1 - t2), abs=1e-9)
    assert time.perf_counter() - t0 < 20


# --- 6 -----------------------------------------------------------------------------

def test_criterion_6_joint_detector():
    t0 = time.perf_counter()
    t = 0.5
    for n in range(4, 41):
        a = [unit(t - 1 / m) for m in range(4, n + 1)]
        b = [unit(t + 1 / m) for m in range(4, n + 1)]
        assert joint_j1_check([a, b], [unit(t), unit(t)], eps=0.3).verdict == "separate-only"
        assert joint_j1_check([a, a], [unit(t), unit(t)], eps=0.3).verdict == "joint"
    assert time.perf_counter() - t0 < 5


# --- 7 -----------------------------------------------------------------------------

@pytest.mark.parametrize("which", ["c3", "c4"])
def test_criterion_7_identity_suite(which, request):
    rep, _ = request.getfixturevalue(which + "_report")
    for lv in rep.data["levels"]:
        ident = lv["identities"]
        assert ident["passed"]
        assert ident["angle_YN_minus_N"] <= 1e-12 * ident["scale"]
        assert ident["polarization"] <= 1e-12 * ident["scale"]
        assert ident["special_decomposition_identity"] <= 1e-12
        assert ident["special_decomposition_martingale"] <= 1e-12
        assert lv["monte_carlo"]["kunita_watanabe"]["passed"]
    assert not rep.violations


# --- 8 -----------------------------------------------------------------------------

def test_criterion_8_young_battery():
    rng = np.random.default_rng(8)
    fs = [PowerYoung(p) for p in (1.25, 1.5, 2.0, 3.0)]
    x, y = rng.exponential(3.0, 10_000), rng.exponential(3.0, 10_000)
    for f in fs:
        assert np.all(young_gap(f, conjugate(f), x, y) >= -1e-12 * np.maximum(1, x * y))
    pl = PiecewiseLinearYoung([0, 0.5, 1, 3], [0.2, 0.5, 1.5, 4.0])
    xs = rng.uniform(0, 10, 10_000)
    assert np.all(young_gap(pl, conjugate(pl, cap=10.0), xs, y) >= -1e-12 * np.maximum(1, xs * y))
    for p in (1.25, 1.5, 2.0, 2.5, 3.0):
        f = PowerYoung(p)
        g = conjugate(f)
        xg = np.linspace(0, 2, 41)
        ys = np.linspace(0, float(f.derivative(2.0)) * 1.01, 400_001)
        assert np.max(np.abs(legendre_on_grid(g, ys, xg) - f(xg))) <= 1e-6
        assert np.allclose(conjugate(g)(xg), f(xg), rtol=1e-12, atol=1e-15)
        assert moderate_constant(f) == 2.0 ** p


# --- 9 -----------------------------------------------------------------------------

def test_criterion_9_filtration_diagnostic():
    spec = SchemeSpec("trinomial_bm", levels=(16, 64, 256), sigma=1.0, payoff="square")
    t0 = time.perf_counter()
    out = filtration_weak_convergence_diagnostic(
        ExperimentConfig(spec, replications=400, seed=9), ("square",))
    elapsed = time.perf_counter() - t0
    j1 = [row["j1_mean"] for row in out["square"]["levels"]]
    print(f"criterion 9 mean J1 of conditional-expectation paths: {j1}")
    assert not out["square"]["self_referenced"]
    assert all(b < a for a, b in zip(j1, j1[1:]))
    assert elapsed < 120
