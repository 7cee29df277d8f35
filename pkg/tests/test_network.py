import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coagents.comdp import build_comdp
from coagents.fixtures import two_bit_network, chain_network, fork_network, random_mdp, sync_fixtures
from coagents.mdp import TabularMdp, build_gridworld, sample_episode
from coagents.network import (CoagentNetwork, CoagentSpec, Execution, TopologyError, atomic_step, coagent_policy,
                              logprob_gradient, run_episode, softmax, state_action_policy, validate_topology)


def test_chain_order():
    specs = [CoagentSpec(2), CoagentSpec(2, feedforward_inputs=(0,)), CoagentSpec(2, feedforward_inputs=(1,))]
    assert validate_topology(specs) == [0, 1, 2]


def test_two_cycle_rejected():
    specs = [CoagentSpec(2, feedforward_inputs=(1,)), CoagentSpec(2, feedforward_inputs=(0,))]
    with pytest.raises(TopologyError, match="cycle"):
        validate_topology(specs)


def test_recurrent_edges_are_exempt():
    specs = [CoagentSpec(2, recurrent_inputs=(1,)), CoagentSpec(2, feedforward_inputs=(0,))]
    assert validate_topology(specs) == [0, 1]


def test_two_bit_layout():
    net = two_bit_network(0.5)
    assert net.order == [0, 1, 2]
    assert net.param_shapes == [(9, 2), (9, 2), (4, 4)]
    assert net.n_params == 52


def test_gate_must_be_feedforward_input():
    with pytest.raises(TopologyError, match="gated"):
        CoagentNetwork([CoagentSpec(2), CoagentSpec(2, execution=Execution.gated(0))], 3)


def test_softmax_closed_forms():
    assert np.allclose(coagent_policy(np.zeros((1, 4)), 0), 0.25)
    assert np.allclose(coagent_policy(np.array([[np.log(3.0), 0.0]]), 0), [0.75, 0.25])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=6), st.floats(-100, 100))
def test_softmax_shift_invariant(row, shift):
    row = np.array(row)
    p = softmax(row)
    assert abs(p.sum() - 1) < 1e-12
    assert np.allclose(softmax(row + shift), p, atol=1e-12)


def test_logprob_gradient_closed_form():
    g = logprob_gradient(np.zeros((3, 2)), 1, 0)
    assert np.allclose(g[1], [0.5, -0.5])
    assert not g[[0, 2]].any()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_logprob_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(rng.integers(1, 5), rng.integers(2, 5)))
    row, u = rng.integers(table.shape[0]), rng.integers(table.shape[1])
    g = logprob_gradient(table, row, u)
    assert abs(g[row].sum()) < 1e-12
    h = 1e-6
    fd = np.zeros_like(table)
    for idx in np.ndindex(table.shape):
        tp, tm = table.copy(), table.copy()
        tp[idx] += h
        tm[idx] -= h
        fd[idx] = (np.log(softmax(tp[row])[u]) - np.log(softmax(tm[row])[u])) / (2 * h)
    assert np.abs(fd - g).max() < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_local_state_round_trip(seed):
    rng = np.random.default_rng(seed)
    net = CoagentNetwork([
        CoagentSpec(int(rng.integers(1, 4)), recurrent_inputs=(2,)),
        CoagentSpec(int(rng.integers(1, 4)), uses_state=bool(rng.integers(2)), feedforward_inputs=(0,)),
        CoagentSpec(3, feedforward_inputs=(0, 1), recurrent_inputs=(1,)),
    ], int(rng.integers(1, 5)))
    for i in range(net.m):
        for row in range(net.n_rows(i)):
            x = net.decode(i, row)
            assert net.encode(i, x.obs, x.feedforward_values, x.recurrent_values) == row


def test_encoding_is_state_major():
    net = two_bit_network(0.5)
    # output coagent reads (u0, u1), no state
    assert net.encode(2, None, (1, 0)) == 2
    assert net.encode(0, 4) == 4


def test_always_execution_is_synchronous(rng):
    net = chain_network(3, 2)
    params = net.random_params(rng)
    for _ in range(50):
        e, u, _ = atomic_step(net, params, 1, [0, 0], rng)
        assert e.all()


def test_frozen_network_repeats(rng):
    net = two_bit_network(0.0)
    params = net.random_params(rng)
    for _ in range(50):
        prev = rng.integers(0, [2, 2, 4])
        e, u, _ = atomic_step(net, params, int(rng.integers(9)), prev, rng)
        assert not e.any()
        assert np.array_equal(u, prev)


def test_bernoulli_execution_rate():
    net = two_bit_network(0.5)
    rng = np.random.default_rng(5)
    params = net.zero_params()
    n = 100_000
    u = np.zeros(3, dtype=np.int64)
    count = np.zeros(3)
    for _ in range(n):
        e, u, _ = atomic_step(net, params, 0, u, rng)
        count += e
    sigma = np.sqrt(n * 0.25)
    assert np.all(np.abs(count - n / 2) < 3 * sigma)


def test_idle_at_start_keeps_initial_output(rng):
    net = CoagentNetwork([CoagentSpec(2, init_dist=(0.0, 1.0), idle_at_start=True), CoagentSpec(2)], 2)
    params = [np.full((2, 2), [5.0, -5.0]), np.zeros((2, 2))]
    e, u, _ = atomic_step(net, params, 0, [1, 0], rng, start=True)
    assert not e[0] and u[0] == 1


def test_single_coagent_matches_flat_agent():
    # two live states, stochastic moves, uniform policy on both sides
    P = np.zeros((3, 2, 3))
    P[0, 0] = [0.5, 0.3, 0.2]
    P[0, 1] = [0.1, 0.6, 0.3]
    P[1, 0] = [0.4, 0.4, 0.2]
    P[1, 1] = [0.2, 0.2, 0.6]
    P[2, :, 2] = 1.0
    R = np.zeros((3, 2, 3, 1)) + 1.0
    mdp = TabularMdp(P, R, np.array([0.0]), np.array([1.0, 0, 0]), 1.0, frozenset({2}))
    net = CoagentNetwork([CoagentSpec(2)], mdp.n_observations)
    params = net.zero_params()
    n = 20_000
    rng_a, rng_b = np.random.default_rng(1), np.random.default_rng(2)
    visits_net = np.zeros((n, 2))
    visits_flat = np.zeros((n, 2))
    flat = np.full((3, 2), 0.5)
    for k in range(n):
        traj = run_episode(mdp, net, params, rng=rng_a)
        visits_net[k] = np.bincount(traj.states, minlength=2)[:2]
        steps, _ = sample_episode(mdp, flat, rng_b)
        visits_flat[k] = np.bincount([s.state for s in steps], minlength=2)[:2]
    diff = visits_net.mean(0) - visits_flat.mean(0)
    sigma = np.sqrt(visits_net.var(0, ddof=1) / n + visits_flat.var(0, ddof=1) / n)
    assert np.all(np.abs(diff) < 3 * sigma)


def test_frozen_deterministic_rollouts_depend_only_on_init():
    mdp = build_gridworld(3, 3)
    net = two_bit_network(0.0)
    params = net.zero_params()
    rng = np.random.default_rng(8)
    seen = {}
    for _ in range(200):
        traj = run_episode(mdp, net, params, horizon=30, rng=rng)
        key = tuple(traj.initial_outputs)
        rewards = tuple(traj.rewards)
        assert seen.setdefault(key, rewards) == rewards


def test_two_bit_episodes_terminate():
    mdp = build_gridworld(3, 3)
    net = two_bit_network(0.5)
    params = net.zero_params()
    rng = np.random.default_rng(9)
    n = 10_000
    done = sum(not run_episode(mdp, net, params, rng=rng).truncated for _ in range(n))
    assert done >= 0.99 * n


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3]))
def test_outputs_change_only_when_executing(seed, n_atomic):
    rng = np.random.default_rng(seed)
    mdp = build_gridworld(3, 3)
    net = two_bit_network(0.5)
    traj = run_episode(mdp, net, net.random_params(rng), n_atomic=n_atomic, horizon=50, rng=rng)
    prev = np.vstack([traj.initial_outputs, traj.outputs[:-1]])
    changed = traj.outputs != prev
    assert not (changed & ~traj.executions).any()
    off_beat = np.arange(len(traj)) % n_atomic != 0
    assert not traj.rewards[off_beat].any()
    assert (traj.env_actions[off_beat] == -1).all()
    assert abs(traj.atomic_discount ** n_atomic - mdp.discount) < 1e-12


def test_trajectory_jsonl(rng):
    mdp = build_gridworld(1, 2)
    net = CoagentNetwork([CoagentSpec(4)], mdp.n_observations)
    traj = run_episode(mdp, net, net.zero_params(), rng=rng)
    lines = traj.to_jsonl().splitlines()
    assert len(lines) == len(traj)
    rec = json.loads(lines[0])
    assert set(rec) == {"t", "s", "E", "U", "a", "r"}


@pytest.mark.parametrize("name,mdp,net", sync_fixtures(), ids=lambda v: v if isinstance(v, str) else "")
def test_joint_policy_equals_three_stage_composition(name, mdp, net):
    params = net.random_params(np.random.default_rng(3))
    direct = state_action_policy(net, params, mdp.observations)
    for i in range(net.m):
        c = build_comdp(mdp, net, params, i)
        pre, post = c.marginals.pre, c.marginals.post
        pi = c.fixed_policy.reshape(pre.shape + (-1,))
        composed = np.einsum("sv,svu,svua->sa", pre, pi, post)
        assert np.abs(composed - direct).max() < 1e-12


def test_config_round_trip():
    net = fork_network(3, 2)
    again = CoagentNetwork.from_dict(json.loads(json.dumps(net.to_dict())), 3)
    assert again.to_dict() == net.to_dict()


def test_random_mdp_fixture_is_valid():
    m = random_mdp(5, 3, np.random.default_rng(0))
    assert m.terminal_states == {4}
