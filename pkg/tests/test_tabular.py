import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmdp_lab.errors import (
    DimensionMismatch,
    InvalidContext,
    PerturbationTooLarge,
    SingularSystem,
)
from cmdp_lab.measures import is_probability
from cmdp_lab.tabular import (
    TabularCMDP,
    apply_bellman_operator,
    build_cebe_tabular,
    build_cliffwalker,
    default_eval_policy,
    error_scaling_experiment,
    expected_reward,
    fit_loglog,
    greedy_policy,
    linearized_transitions,
    mdp_policy_return,
    policy_eval_exact,
    policy_return,
    q_gap,
    scaling_perturbations,
    uniform_policy,
    value_iteration,
    verify_policy_transfer,
)


def random_instance(rng, n_s, n_a):
    T = rng.dirichlet(np.ones(n_s), size=(n_s, n_a))
    R = rng.uniform(-1, 1, (n_s, n_a))
    pi = rng.dirichlet(np.ones(n_a), size=n_s)
    return T, R, pi


def fixed_point_iteration(T, R, pi, gamma, sweeps):
    """Independent oracle: iterate Q <- R + gamma A Q."""
    r = expected_reward(T, R)
    Q = np.zeros_like(r)
    for _ in range(sweeps):
        Q_next = r + gamma * apply_bellman_operator(T, pi, Q)
        if np.array_equal(Q_next, Q):
            break
        Q = Q_next
    return Q


# --- Bellman operator -------------------------------------------------------------


def test_operator_identity_dynamics():
    T = np.ones((1, 1, 1))
    Q = np.array([[3.5]])
    np.testing.assert_array_equal(apply_bellman_operator(T, np.ones((1, 1)), Q), Q)


def test_operator_swap():
    T = np.zeros((2, 2, 2))
    T[0, :, 1] = 1.0
    T[1, :, 0] = 1.0
    Q = np.array([[1.0, 1.0], [2.0, 2.0]])
    out = apply_bellman_operator(T, uniform_policy(2, 2), Q)
    np.testing.assert_array_equal(out, [[2.0, 2.0], [1.0, 1.0]])


def test_operator_is_nonexpansive_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        T, _, pi = random_instance(rng, 5, 3)
        Q = rng.normal(size=(5, 3)) * 10
        assert np.max(np.abs(apply_bellman_operator(T, pi, Q))) <= np.max(np.abs(Q)) + 1e-12


def test_operator_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        apply_bellman_operator(np.ones((2, 2, 2)) / 2, np.ones((3, 2)) / 2, np.zeros((2, 2)))


# --- exact policy evaluation ------------------------------------------------------


def test_policy_eval_geometric():
    Q = policy_eval_exact(np.ones((1, 1, 1)), np.ones((1, 1)), np.ones((1, 1)), 0.9)
    assert Q[0, 0] == pytest.approx(10.0, abs=1e-12)


def test_policy_eval_absorbing_chain():
    T = np.zeros((2, 1, 2))
    T[:, 0, 1] = 1.0
    Q = policy_eval_exact(T, np.array([[1.0], [0.0]]), np.ones((2, 1)), 0.5)
    assert Q[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert Q[1, 0] == 0.0


def test_policy_eval_rejects_bad_gamma():
    with pytest.raises(SingularSystem):
        policy_eval_exact(np.ones((1, 1, 1)), np.ones((1, 1)), np.ones((1, 1)), 1.0)


def test_policy_eval_matches_fixed_point_on_cliffwalker():
    mdp = build_cliffwalker(5, 6, "A", 0.1, 0.9)
    T, R = mdp.tables_at(mdp.c0)
    pi = default_eval_policy(mdp)
    Q = policy_eval_exact(T, R, pi, mdp.gamma)
    oracle = fixed_point_iteration(T, R, pi, mdp.gamma, 1_000_000)
    assert np.max(np.abs(Q - oracle)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_policy_eval_oracle_and_bound(n_s, n_a, gamma, seed):
    T, R, pi = random_instance(np.random.default_rng(seed), n_s, n_a)
    Q = policy_eval_exact(T, R, pi, gamma)
    assert np.max(np.abs(Q)) <= np.max(np.abs(R)) / (1 - gamma) + 1e-9
    oracle = fixed_point_iteration(T, R, pi, gamma, 100_000)
    assert np.max(np.abs(Q - oracle)) <= 1e-9


# --- value iteration ------------------------------------------------------------


def test_value_iteration_zero_rewards():
    rng = np.random.default_rng(1)
    T, _, _ = random_instance(rng, 4, 2)
    Q, pi = value_iteration(T, np.zeros((4, 2)), 0.9)
    assert np.all(Q == 0)
    np.testing.assert_array_equal(pi[:, 0], 1.0)


def test_value_iteration_two_actions():
    T = np.ones((1, 2, 1))
    Q, pi = value_iteration(T, np.array([[0.0, 1.0]]), 0.9)
    np.testing.assert_allclose(Q, [[9.0, 10.0]], atol=1e-9)
    np.testing.assert_array_equal(pi, [[0.0, 1.0]])


@pytest.mark.parametrize("variant", ["A", "B"])
def test_value_iteration_cross_checks_policy_eval(variant):
    mdp = build_cliffwalker(5, 6, variant, 0.1, 0.9)
    T, R = mdp.tables_at(mdp.c0)
    Q, pi = value_iteration(T, R, mdp.gamma)
    np.testing.assert_allclose(Q, policy_eval_exact(T, R, pi, mdp.gamma), atol=1e-10)
    r = expected_reward(T, R)
    residual = np.max(np.abs(Q - r - mdp.gamma * T @ Q.max(axis=1)))
    assert residual <= 1e-9
    np.testing.assert_array_equal(pi, greedy_policy(Q))


def test_optimal_beats_uniform_on_cliffwalker():
    mdp = build_cliffwalker()
    T, R = mdp.tables_at(mdp.c0)
    _, pi = value_iteration(T, R, mdp.gamma)
    assert mdp_policy_return(mdp, mdp.c0, pi) >= mdp_policy_return(
        mdp, mdp.c0, uniform_policy(mdp.n_states, 4)
    )


def test_policy_return_examples():
    assert policy_return(np.ones((1, 1, 1)), np.ones((1, 1)), np.ones((1, 1)), 0.9, [1.0]) == (
        pytest.approx(10.0)
    )
    # one step from the cell above the goal straight into it
    mdp = build_cliffwalker(5, 6, "A", 0.1)
    T = np.zeros_like(mdp.transition_at(mdp.c0))
    T[np.arange(mdp.n_states), :, np.arange(mdp.n_states)] = 1.0
    above = mdp.info["goal"] - 6
    T[above, 2] = 0.0
    T[above, 2, mdp.info["goal"]] = 1.0
    s0 = np.zeros(mdp.n_states)
    s0[above] = 1.0
    pi = np.zeros((mdp.n_states, 4))
    pi[:, 2] = 1.0
    R = mdp.reward_at(mdp.c0)
    assert policy_return(T, R, pi, 0.9, s0) == pytest.approx(0.1**-2)


# --- Cliffwalker construction ---------------------------------------------------


def test_cliffwalker_layout_and_rewards():
    mdp = build_cliffwalker(5, 6, "A", 0.1, 0.9)
    assert (mdp.n_states, mdp.n_actions) == (30, 4)
    assert mdp.info["start"] == 24 and mdp.info["goal"] == 29
    assert mdp.info["cliff"] == [25, 26, 27, 28]
    R = mdp.reward_at(mdp.c0)
    start = mdp.info["start"]
    assert R[start, 1, 25] == pytest.approx(-1000.0)
    assert mdp.dR[start, 1, 25, 0] == pytest.approx(10000.0)
    assert R[23, 2, 29] == pytest.approx(100.0)


def test_cliffwalker_variant_b_rewards():
    mdp = build_cliffwalker(5, 6, "B", 0.1)
    R = mdp.reward_at(mdp.c0)
    assert R[24, 1, 25] == pytest.approx(-10 / 1.1)
    assert R[23, 2, 29] == pytest.approx(1.1**-1.5)


@pytest.mark.parametrize("c", [0.01, 0.1, 0.5, 0.99])
def test_cliffwalker_conservation(c):
    mdp = build_cliffwalker(5, 6, "A", c)
    T = mdp.transition_at(mdp.c0)
    assert is_probability(T)
    assert np.max(np.abs(mdp.dT.sum(axis=2))) <= 1e-12
    # terminal states absorb with zero reward
    R = mdp.reward_at(mdp.c0)
    for s in np.flatnonzero(mdp.terminal_mask):
        np.testing.assert_array_equal(T[s, :, s], 1.0)
        assert np.all(R[s] == 0)


def test_cliffwalker_derivatives_match_finite_differences():
    mdp = build_cliffwalker(5, 6, "A", 0.3)
    h = 1e-6
    T_p, R_p = mdp.tables_at(0.3 + h)
    T_m, R_m = mdp.tables_at(0.3 - h)
    np.testing.assert_allclose((T_p - T_m) / (2 * h), mdp.dT[..., 0], atol=1e-8)
    np.testing.assert_allclose((R_p - R_m) / (2 * h), mdp.dR[..., 0], rtol=1e-6, atol=1e-6)
    d2 = (mdp.dR_at(0.3 + h) - mdp.dR_at(0.3 - h)) / (2 * h)
    np.testing.assert_allclose(d2, mdp.d2R_at(0.3)[..., 0], rtol=1e-6, atol=1e-4)


@pytest.mark.parametrize("c", [0.0, 1.0, -0.1])
def test_cliffwalker_invalid_context(c):
    with pytest.raises(InvalidContext):
        build_cliffwalker(c=c)
    mdp = build_cliffwalker()
    with pytest.raises(InvalidContext):
        mdp.tables_at(c)


def test_slip_neighbours_uniform():
    mdp = build_cliffwalker(5, 6, "A", 0.2)
    T = mdp.transition_at(mdp.c0)
    # corner (0,0) has 2 neighbours; moving up hits the wall
    np.testing.assert_allclose(T[0, 0, 0], 0.8)
    np.testing.assert_allclose(T[0, 0, 1], 0.1)
    np.testing.assert_allclose(T[0, 0, 6], 0.1)


# --- CEBE -----------------------------------------------------------------------


def test_cebe_at_zero_is_identity():
    mdp = build_cliffwalker()
    T_ce, R_ce = build_cebe_tabular(mdp, mdp.c0)
    T, R = mdp.tables_at(mdp.c0)
    assert np.array_equal(T_ce, T) and np.array_equal(R_ce, R)


def two_state_family(c0):
    def T_at(c):
        c = float(np.squeeze(c))
        row = np.array([1 - c, c])
        return np.broadcast_to(row, (2, 1, 2)).copy()

    dT = np.broadcast_to(np.array([-1.0, 1.0]), (2, 1, 2)).copy()[..., None]
    return TabularCMDP(
        n_states=2,
        n_actions=1,
        c0=c0,
        transition_at=T_at,
        reward_at=lambda c: np.zeros((2, 1, 2)),
        dT=dT,
        dR=np.zeros((2, 1, 2, 1)),
        gamma=0.5,
    )


def test_cebe_projection_toy():
    mdp = two_state_family(0.2)
    np.testing.assert_allclose(linearized_transitions(mdp, -0.1)[0, 0], [1.1, -0.1])
    T_ce, _ = build_cebe_tabular(mdp, -0.1)
    np.testing.assert_allclose(T_ce[0, 0], [1.0, 0.0])


def test_cebe_perturbation_too_large():
    mdp = two_state_family(0.2)
    mdp.dT = np.broadcast_to(np.array([-1.0, -1.0]), (2, 1, 2)).copy()[..., None]
    with pytest.raises(PerturbationTooLarge):
        build_cebe_tabular(mdp, 2.0)


@pytest.mark.parametrize("c", [0.05, 0.15, 0.3, 0.9])
def test_cebe_exact_for_affine_transitions(c):
    mdp = build_cliffwalker(5, 6, "A", 0.1)
    T_ce, _ = build_cebe_tabular(mdp, c)
    np.testing.assert_allclose(T_ce, mdp.transition_at(c), atol=1e-14)
    T_lin = linearized_transitions(mdp, c)
    assert np.max(np.abs(T_lin.sum(axis=-1) - 1)) <= 1e-12


# --- scaling experiment -----------------------------------------------------------


def test_fit_loglog_exact_power():
    x = np.logspace(-3, 0, 20)
    slope, intercept, r2, n = fit_loglog(x, 3 * x**2, 10)
    assert slope == pytest.approx(2.0)
    assert intercept == pytest.approx(np.log(3))
    assert r2 == pytest.approx(1.0) and n == 10


def test_scaling_grid():
    g = scaling_perturbations(100, 1e-4, 1e-1, include_zero=True)
    assert g[0] == 0 and len(g) == 101
    assert g[1] == pytest.approx(1e-4) and g[-1] == pytest.approx(1e-1)


@pytest.mark.parametrize("variant", ["A", "B"])
@pytest.mark.parametrize("mode", ["policy_eval", "control"])
def test_scaling_slope_two(variant, mode):
    mdp = build_cliffwalker(5, 6, variant, 0.1, 0.9)
    res = error_scaling_experiment(mdp, scaling_perturbations(30), mode=mode, fit_points=10)
    assert 1.85 <= res.slope <= 2.15
    assert res.monotone


def test_q_gap_zero_at_base():
    mdp = build_cliffwalker()
    assert q_gap(mdp, mdp.c0, default_eval_policy(mdp)) <= 1e-10


def test_policy_transfer_cliffwalker():
    mdp = build_cliffwalker(5, 6, "A", 0.1)
    recs = verify_policy_transfer(mdp, [[0.1]] + [[c] for c in np.linspace(0.11, 0.2, 10)])
    assert recs[0].gap == 0.0
    assert all(r.gap <= r.bound + 1e-9 for r in recs)
