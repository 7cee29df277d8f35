import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coagents.comdp import verify_properties
from coagents.fixtures import two_bit_network, async_fixtures, chain_network, random_mdp
from coagents.mdp import SizeOverflowError, TabularMdp, build_gridworld, exact_objective, exact_state_values
from coagents.network import CoagentNetwork, CoagentSpec, Execution, state_action_policy
from coagents.reduction import (async_marginals, augmented_marginals, build_augmented_mdp, build_sync_network,
                                exact_async_objective, solve_augmented, verify_behavior_equivalence,
                                verify_objective_equivalence)

ASYNC = async_fixtures()
IDS = [name for name, _, _ in ASYNC]


def small_mdp(seed=0, discount=1.0):
    return random_mdp(3, 2, np.random.default_rng(seed), discount=discount)


def test_two_bit_augmented_size(grid, bit_net):
    aug = build_augmented_mdp(grid, bit_net)
    assert aug.n_states == 160
    assert aug.n_actions == 4 * 16 * 8


def test_singleton_outputs_leave_mdp_unchanged():
    mdp = small_mdp()
    one = TabularMdp(mdp.transition[:, :1], mdp.reward_dist[:, :1], mdp.reward_support, mdp.initial_dist,
                     mdp.discount, mdp.terminal_states)
    aug = build_augmented_mdp(one, CoagentNetwork([CoagentSpec(1)], one.n_observations))
    assert aug.n_states == one.n_states
    assert np.allclose(aug.initial_dist, one.initial_dist)
    # two execution bits per action, identical transitions
    P = aug.transition.reshape(one.n_states, 1, 2, one.n_states)
    assert np.allclose(P[:, :, 0], one.transition) and np.allclose(P[:, :, 1], one.transition)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augmented_initial_law_is_product(seed):
    rng = np.random.default_rng(seed)
    mdp = small_mdp()
    h0, h1 = rng.dirichlet(np.ones(2)), rng.dirichlet(np.ones(3))
    net = CoagentNetwork([CoagentSpec(2, init_dist=h0), CoagentSpec(3, init_dist=h1)], mdp.n_observations)
    aug = build_augmented_mdp(mdp, net)
    assert abs(aug.initial_dist.sum() - 1) < 1e-12
    for x, p in enumerate(aug.initial_dist):
        s, u = aug.decode_state(x)
        u0, u1 = divmod(u, 3)
        assert p == pytest.approx(mdp.initial_dist[s] * h0[u0] * h1[u1], abs=1e-15)


def test_augmented_tables_structure():
    mdp = small_mdp(1)
    net = ASYNC[1][2]
    aug = build_augmented_mdp(mdp, net)
    P, R = aug.transition, aug.reward_dist
    for x in range(aug.n_states):
        s, u = aug.decode_state(x)
        for act in range(0, aug.n_actions, 3):
            a, w, e = aug.decode_action(act)
            for y in range(aug.n_states):
                s2, u2 = aug.decode_state(y)
                if mdp.terminal_mask[s]:
                    assert P[x, act, y] == float(x == y)
                    continue
                assert P[x, act, y] == (mdp.transition[s, a, s2] if u2 == w else 0.0)
                assert np.array_equal(R[x, act, y], mdp.reward_dist[s, a, s2])
    assert np.allclose(P.sum(-1), 1.0)


def test_sync_network_layout(bit_net):
    sync = build_sync_network(bit_net)
    assert len(sync.coagents) == 6
    assert sync.n_params == 52
    for i in range(3):
        assert sync.execution_id(i) < sync.policy_id(i)
        assert sync.execution_id(i) in sync.coagents[sync.policy_id(i)].feedforward_inputs


def test_hand_computed_bernoulli_law():
    mdp = small_mdp(2)
    net = CoagentNetwork([CoagentSpec(2, execution=Execution.bernoulli(0.5))], mdp.n_observations)
    params = net.random_params(np.random.default_rng(0))
    sync = build_sync_network(net).policy(params, mdp)
    pi = np.exp(params[0]) / np.exp(params[0]).sum(1, keepdims=True)
    expected = np.zeros_like(sync)
    for s in range(mdp.n_states):
        o = mdp.observations[s]
        row = pi[o] if o >= 0 else np.full(2, 0.5)
        for u in range(2):
            x = s * 2 + u
            p_exec = 0.5 if o >= 0 else 1.0
            for w in range(2):
                expected[x, w, w, 1] = p_exec * row[w]
                expected[x, w, w, 0] = (1 - p_exec) * (w == u)
    assert np.abs(sync - expected).max() < 1e-12
    assert verify_behavior_equivalence(mdp, net, params)["max_deviation"] < 1e-12


@pytest.mark.parametrize("name,mdp,net", ASYNC, ids=IDS)
def test_behavior_equivalence_fixtures(name, mdp, net):
    rng = np.random.default_rng(1)
    for _ in range(5):
        params = net.random_params(rng)
        rep = verify_behavior_equivalence(mdp, net, params)
        assert rep["passed"] and rep["max_deviation"] < 1e-12
        pol = build_sync_network(net).policy(params, mdp)
        assert np.abs(pol.sum(axis=(1, 2, 3)) - 1).max() < 1e-12


def test_behavior_equivalence_two_bit(grid, bit_net):
    rng = np.random.default_rng(2)
    sync = build_sync_network(bit_net)
    for _ in range(20):
        rep = verify_behavior_equivalence(grid, bit_net, bit_net.random_params(rng), sync)
        assert rep["max_deviation"] < 1e-10


def test_always_executing_collapses_to_synchronous_law():
    mdp = small_mdp(3)
    sync_net = chain_network(mdp.n_observations, 2)
    as_async = CoagentNetwork([CoagentSpec(c.output_arity, c.uses_state, c.feedforward_inputs,
                                           execution=Execution.bernoulli(1.0)) for c in sync_net.coagents],
                              mdp.n_observations)
    params = sync_net.random_params(np.random.default_rng(4))
    pol = build_sync_network(as_async).policy(params, mdp)
    flat = pol.sum(axis=(2, 3)).reshape(mdp.n_states, -1, mdp.n_actions)
    direct = state_action_policy(sync_net, params, mdp.observations)
    assert np.abs(flat - direct[:, None, :]).max() < 1e-12
    assert verify_behavior_equivalence(mdp, as_async, params)["max_deviation"] < 1e-12
    J, J_aug, dev = verify_objective_equivalence(mdp, as_async, params)
    J_sync = exact_objective(mdp, direct)
    assert max(abs(J - J_aug), abs(J - J_sync), abs(J_aug - J_sync)) < 1e-10


def test_frozen_network_is_copy_map():
    mdp = random_mdp(2, 2, np.random.default_rng(5), discount=0.9)
    h0 = (0.3, 0.7)
    net = CoagentNetwork([CoagentSpec(2, execution=Execution.bernoulli(0.0), init_dist=h0)], mdp.n_observations)
    params = net.random_params(np.random.default_rng(6))
    pol = build_sync_network(net).policy(params, mdp)
    live = np.repeat(~mdp.terminal_mask, 2)
    for x in np.flatnonzero(live):
        u = x % 2
        assert pol[x, u, u, 0] == 1.0
    J, J_aug, dev = verify_objective_equivalence(mdp, net, params)
    fixed = [exact_state_values(mdp, np.eye(2)[[u] * mdp.n_states]) @ mdp.initial_dist for u in range(2)]
    closed = h0[0] * fixed[0] + h0[1] * fixed[1]
    assert abs(J_aug - closed) < 1e-10 and abs(J - closed) < 1e-10


@pytest.mark.parametrize("name,mdp,net", ASYNC, ids=IDS)
def test_objective_and_marginals_match(name, mdp, net):
    rng = np.random.default_rng(7)
    for _ in range(5):
        params = net.random_params(rng)
        J, J_aug, dev = verify_objective_equivalence(mdp, net, params)
        assert dev < 1e-10
        sol = solve_augmented(mdp, net, params)
        s1, r1 = async_marginals(mdp, net, params, 10)
        s2, r2 = augmented_marginals(sol.aug, sol.policy, sol.start_policy, 10)
        assert np.abs(s1 - s2).max() < 1e-10
        assert np.abs(r1 - r2).max() < 1e-10


def test_objective_equivalence_two_bit(grid, bit_net):
    rng = np.random.default_rng(8)
    for _ in range(20):
        J, J_aug, dev = verify_objective_equivalence(grid, bit_net, bit_net.random_params(rng))
        assert dev < 1e-10


def test_objective_matches_direct_chain_solve(grid, bit_net):
    params = bit_net.random_params(np.random.default_rng(9))
    assert abs(solve_augmented(grid, bit_net, params).objective - exact_async_objective(grid, bit_net, params)) < 1e-10


@pytest.mark.parametrize("name,mdp,net", ASYNC[:3], ids=IDS[:3])
def test_sync_network_coagents_satisfy_conjugate_properties(name, mdp, net):
    params = net.random_params(np.random.default_rng(10))
    aug = build_augmented_mdp(mdp, net)
    sync = build_sync_network(net)
    for node in range(len(sync.coagents)):
        rep = verify_properties(aug, sync, params, node, horizon=10, tol=1e-10)
        assert all(ok for _, ok in rep.values()), rep


def test_size_guard():
    big = build_gridworld(30, 30)
    net = CoagentNetwork([CoagentSpec(40), CoagentSpec(40), CoagentSpec(4, feedforward_inputs=(0,))],
                         big.n_observations)
    with pytest.raises(SizeOverflowError, match="augmented"):
        build_augmented_mdp(big, net)
