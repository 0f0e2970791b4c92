import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from martrep.cadlag_paths import JumpWindow
from martrep.finite_basis import (
    AdaptedProcess, Increments, LatticeBasis, Step, build_markov_lattice, compensator, conditional_expectation,
    expand_to_tree, expectation, follow, martingale_drift, martingale_from_terminal, sample_path,
    sample_paths, special_decomposition_check)

from lattices import binomial, jump_lattice, random_levy_lattice, trinomial
from oracles import enumerate_paths


def x_of(basis, j):
    return basis.coords[j][:, 0]


# --- conditional expectation -----------------------------------------------------

def test_binomial_terminal_value_examples():
    b = binomial(2)
    xi = x_of(b, 2)
    assert np.allclose(conditional_expectation(b, xi, 1), x_of(b, 1), atol=0)
    assert conditional_expectation(b, xi, 0) == pytest.approx([0.0], abs=0)
    assert np.array_equal(conditional_expectation(b, xi, 2), xi)


@pytest.mark.parametrize("h", [1.0, 0.3, 2.5])
def test_binomial_square(h):
    b = binomial(2, h=h)
    got = conditional_expectation(b, x_of(b, 2) ** 2, 1)
    assert np.allclose(got, x_of(b, 1) ** 2 + h * h, rtol=1e-14, atol=1e-14)


def test_martingale_from_terminal_matches_conditional_expectation():
    b = binomial(2, h=0.3)
    xi = x_of(b, 2) ** 2
    Y = martingale_from_terminal(b, xi)
    for j in range(3):
        assert np.array_equal(Y.at(j), conditional_expectation(b, xi, j))
    assert np.array_equal(Y.at(2), xi)


def test_undefined_terminal_state_rejected():
    b = binomial(3)
    with pytest.raises(ValueError):
        conditional_expectation(b, np.zeros(2), 1)
    with pytest.raises(ValueError):
        martingale_from_terminal(b, np.zeros(5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 8), st.integers(1, 2), st.integers(1, 3))
def test_tower_property(seed, k, ell, n_marks):
    rng = np.random.default_rng(seed)
    b = random_levy_lattice(rng, k, ell, n_marks)
    xi = rng.normal(size=b.n_states[-1])
    for i in range(k + 1):
        inner = conditional_expectation(b, xi, i)
        for j in range(i + 1):
            lhs = conditional_expectation(b, inner, j, from_index=i)
            rhs = conditional_expectation(b, xi, j)
            assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_conditional_expectation_against_path_enumeration():
    rng = np.random.default_rng(7)
    b = random_levy_lattice(rng, 4, 1, 2)
    xi = rng.normal(size=b.n_states[-1])
    paths = enumerate_paths(b)
    assert math.fsum(p for p, *_ in paths) == pytest.approx(1.0, abs=1e-14)
    for j in range(b.K + 1):
        num = np.zeros(b.n_states[j])
        den = np.zeros(b.n_states[j])
        for p, states, _ in paths:
            num[states[j]] += p * xi[states[-1]]
            den[states[j]] += p
        assert np.allclose(conditional_expectation(b, xi, j), num / den, atol=1e-13)


def test_tree_expansion_agrees_with_lattice():
    rng = np.random.default_rng(11)
    b = random_levy_lattice(rng, 5, 1, 2)
    tree, node_state = expand_to_tree(b)
    assert tree.n_states[-1] == len(enumerate_paths(b))
    xi = rng.normal(size=b.n_states[-1])
    for j in range(b.K + 1):
        lat = conditional_expectation(b, xi, j)
        tr = conditional_expectation(tree, xi[node_state[-1]], j)
        assert np.allclose(tr, lat[node_state[j]], atol=1e-13)


def test_tree_size_cap():
    with pytest.raises(ValueError):
        expand_to_tree(binomial(12), max_nodes=100)


def test_pii_lattice_deterministic_terminal_gives_deterministic_means():
    b = trinomial(6)
    xi = np.full(b.n_states[-1], 3.25)
    for j in range(7):
        v = conditional_expectation(b, xi, j)
        assert np.all(v == v[0])
        assert v[0] == pytest.approx(3.25, abs=1e-14)


# --- compensator -----------------------------------------------------------------

def test_bernoulli_jump_compensator():
    lam, K = 2.0, 8
    dt = 1.0 / K
    b = jump_lattice(K, [0.7], [lam * dt])
    view = compensator(b)
    for j in range(K):
        assert view.marks[j].ravel().tolist() == [0.7]
        assert np.allclose(view.nu[j], lam * dt, atol=1e-15)


def test_symmetric_marks_compensator():
    b = jump_lattice(3, [-1.0, 1.0], [0.25, 0.25])
    view = compensator(b)
    for j in range(3):
        assert view.marks[j].ravel().tolist() == [-1.0, 1.0]
        assert np.allclose(view.nu[j], 0.25, atol=0)


def test_no_jump_lattice_empty_view():
    b = binomial(4)
    view = compensator(b)
    assert view.is_empty()
    table = view.mark_function_table(lambda j, x: 1.0)
    for inc in view.compensated(table):
        assert np.all(inc == 0)


def test_compensated_integrals_are_martingales():
    rng = np.random.default_rng(3)
    for _ in range(100):
        b = random_levy_lattice(rng, int(rng.integers(2, 6)), int(rng.integers(1, 3)),
                                int(rng.integers(1, 4)))
        view = compensator(b)
        coef = rng.normal(size=3)
        # a predictable mark function depending on the source state
        table = [coef[0] * np.sin(coef[1] * np.arange(s.n_src)[:, None] + mk.sum(axis=1)[None, :])
                 + coef[2] * mk[:, 0][None, :] for s, mk in zip(b.steps, view.marks)]
        inc = view.compensated(table)
        assert martingale_drift(b, Increments(np.zeros(()), inc)) <= 1e-12


# --- special decomposition ----------------------------------------------------------

def test_special_decomposition_residuals_on_random_lattices():
    rng = np.random.default_rng(5)
    for _ in range(20):
        ell = int(rng.integers(1, 3))
        b = random_levy_lattice(rng, 6, ell, 3)
        w = JumpWindow([(0.1, 1.7)] + [None] * (ell - 1))
        out = special_decomposition_check(b, w)
        assert out["identity_residual"] <= 1e-12
        assert out["martingale_residual"] <= 1e-12


def test_special_decomposition_without_jumps():
    b = trinomial(5)
    out = special_decomposition_check(b, JumpWindow([(0.1, 2.0)]))
    assert out["identity_residual"] == 0 and out["martingale_residual"] == 0
    assert all(np.all(v == 0) for v in out["compensator_increments"])


def test_special_decomposition_two_mark_slope():
    # marks 0.5 and 2.0; the window only sees 0.5
    K, lam_a, lam_b = 5, 1.5, 0.8
    dt = 1.0 / K
    b = jump_lattice(K, [0.5, 2.0], [lam_a * dt, lam_b * dt])
    out = special_decomposition_check(b, JumpWindow([(0.2, 1.0)]))
    # oracle: E[sum of r(mark)^2 over jumps in the window] by path enumeration
    paths = enumerate_paths(b)
    total = math.fsum(p * sum(0.25 for j, t in enumerate(tr) if b.steps[j].dxn[t, 0] == 0.5)
                      for p, _, tr in paths)
    assert total == pytest.approx(K * lam_a * dt * 0.25, abs=1e-14)
    for inc in out["compensator_increments"]:
        assert np.allclose(inc, lam_a * min(0.5, 1.0) ** 2 * dt, atol=1e-15)


# --- sampling --------------------------------------------------------------------

def test_one_state_lattice_constant_path():
    st = Step(np.array([0]), np.array([0]), np.array([1.0]), np.zeros((1, 1)), np.zeros((1, 1)),
              np.array([0]), 1, 1)
    b = LatticeBasis([0.0, 0.5, 1.0], [st, st])
    (X, Xo, Xn), _ = sample_path(b, 9)
    t = np.linspace(0, 1, 11)
    assert np.all(X(t) == 0) and np.all(Xo(t) == 0) and np.all(Xn(t) == 0)


def test_sampling_is_deterministic():
    rng = np.random.default_rng(0)
    b = random_levy_lattice(rng, 6, 2, 3)
    a1 = sample_paths(b, 42, 50)
    a2 = sample_paths(b, 42, 50)
    assert np.array_equal(a1.trans, a2.trans)
    p1, _ = sample_path(b, 5)
    p2, _ = sample_path(b, 5)
    assert p1 == p2


def test_sampling_frequencies():
    b = jump_lattice(1, [1.0, -1.0], [0.2, 0.3])
    sp = sample_paths(b, 1, 40000)
    mk = sp.dxn[:, 0, 0]
    assert np.mean(mk == 1.0) == pytest.approx(0.2, abs=0.01)
    assert np.mean(mk == -1.0) == pytest.approx(0.3, abs=0.01)


def test_binomial_up_up_path():
    h = 0.4
    b = binomial(2, h=h, T=1.0)
    up = int(b.steps[0].code[b.steps[0].dxo[:, 0] > 0][0])
    sp = follow(b, np.array([[up, up]]))
    X = sp.path(b, 0)
    assert X.times.tolist() == [0.5, 1.0]
    assert X(np.array([0.25, 0.5, 1.0]))[:, 0] == pytest.approx([0.0, h, 2 * h])


def test_follow_rejects_missing_move():
    b = binomial(2)
    with pytest.raises(ValueError):
        follow(b, np.array([[0, 7]]))


# --- validation ------------------------------------------------------------------

def test_probabilities_must_sum_to_one():
    st = Step(np.array([0, 0]), np.array([0, 1]), np.array([0.5, 0.4]), np.array([[1.0], [-1.0]]),
              np.zeros((2, 1)), np.array([0, 1]), 1, 2)
    with pytest.raises(ValueError):
        LatticeBasis([0.0, 1.0], [st])


def test_zero_probability_moves_are_dropped_or_rejected():
    b = build_markov_lattice([0.0, 1.0], [[1.0], [-1.0]], [[0.0], [0.0]],
                             lambda j, c: np.array([[1.0, 0.0]]), [[0.0, 0.0]])
    assert b.steps[0].n_trans == 1
    st = Step(np.array([0, 0]), np.array([0, 1]), np.array([1.0, 0.0]), np.array([[1.0], [-1.0]]),
              np.zeros((2, 1)), np.array([0, 1]), 1, 2)
    with pytest.raises(ValueError):
        LatticeBasis([0.0, 1.0], [st])


def test_time_grid_validation():
    st = Step(np.array([0]), np.array([0]), np.array([1.0]), np.zeros((1, 1)), np.zeros((1, 1)),
              np.array([0]), 1, 1)
    with pytest.raises(ValueError):
        LatticeBasis([0.0, 0.0], [st])
    with pytest.raises(ValueError):
        LatticeBasis([0.0, 1.0, 2.0], [st])


def test_expectation_and_adapted_arithmetic():
    b = trinomial(4)
    Y = martingale_from_terminal(b, x_of(b, 4) ** 2)
    assert expectation(b, 4, Y.at(4)) == pytest.approx(2.0, abs=1e-14)
    assert expectation(b, 0, Y.at(0)) == pytest.approx(2.0, abs=1e-14)
    Z = 2.0 * Y - Y
    assert all(np.array_equal(a, c) for a, c in zip(Z.values, Y.values))
    with pytest.raises(ValueError):
        AdaptedProcess(Y.values, predictable=True).increments(b)
