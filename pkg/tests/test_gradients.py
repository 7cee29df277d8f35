import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coagents.comdp import build_comdp, comdp_objective_and_gradient
from coagents.fixtures import async_fixtures, chain_network, random_mdp, single_network, sync_fixtures
from coagents.gradients import (GradientVector, cosine_distance, estimate_gradient, exact_gradient,
                                exact_objective_of, finite_difference_gradient, mc_global_gradient,
                                mc_local_gradient, mean_block_cosine_distance)
from coagents.mdp import NumericError, TabularMdp, build_gridworld, discounted_occupancy, exact_state_values
from coagents.network import CoagentNetwork, CoagentSpec, Execution, run_episode, softmax, state_action_policy

from conftest import rel_err


def exit_mdp(discount=0.9):
    """One live state, two actions, leaves with probability 0.5 or 0.3."""
    P = np.zeros((2, 2, 2))
    P[0, 0] = [0.5, 0.5]
    P[0, 1] = [0.7, 0.3]
    P[1, :, 1] = 1.0
    R = np.zeros((2, 2, 2, 3))
    R[..., 1] = 1.0
    R[0, 0, 0] = [0.5, 0.0, 0.5]
    R[0, 1, 1] = [0.0, 0.0, 1.0]
    return TabularMdp(P, R, np.array([-1.0, 0.0, 1.0]), np.array([1.0, 0.0]), discount, frozenset({1}))


def flat_reinforce(trajectories, table):
    """Textbook REINFORCE for a single state-conditioned softmax policy."""
    grad = np.zeros_like(table)
    probs = softmax(table, axis=1)
    for traj in trajectories:
        T = len(traj)
        G = np.zeros(T)
        acc = 0.0
        for t in reversed(range(T)):
            acc = traj.rewards[t] + traj.atomic_discount * acc
            G[t] = acc
        for t in range(T):
            s, a = traj.rows[t, 0], traj.outputs[t, 0]
            score = -probs[s]
            score[a] += 1.0
            grad[s] += traj.atomic_discount ** t * G[t] * score
    return grad / len(trajectories)


def test_matches_flat_reinforce_bit_for_bit():
    mdp = random_mdp(4, 2, np.random.default_rng(0), discount=0.95)
    net = single_network(mdp.n_observations, 2)
    params = net.random_params(np.random.default_rng(1))
    rng = np.random.default_rng(2)
    trajs = [run_episode(mdp, net, params, rng=rng) for _ in range(200)]
    assert np.array_equal(mc_local_gradient(trajs, net, params, 0), flat_reinforce(trajs, params[0]))


def test_never_executing_coagent_has_zero_block(grid):
    net = CoagentNetwork([CoagentSpec(2, execution=Execution.bernoulli(0.0)), CoagentSpec(2),
                          CoagentSpec(4, uses_state=False, feedforward_inputs=(0, 1))], grid.n_observations)
    params = net.random_params(np.random.default_rng(3))
    rng = np.random.default_rng(4)
    trajs = [run_episode(grid, net, params, rng=rng) for _ in range(50)]
    assert not mc_local_gradient(trajs, net, params, 0).any()
    frozen = CoagentNetwork([CoagentSpec(4, execution=Execution.bernoulli(0.0))], grid.n_observations)
    fp = frozen.random_params(rng)
    trajs = [run_episode(grid, frozen, fp, horizon=20, rng=rng) for _ in range(20)]
    assert not mc_global_gradient(trajs, frozen, fp).values.any()


def test_global_is_stack_of_local(grid, bit_net):
    params = bit_net.random_params(np.random.default_rng(5))
    rng = np.random.default_rng(6)
    trajs = [run_episode(grid, bit_net, params, rng=rng) for _ in range(30)]
    g = mc_global_gradient(trajs, bit_net, params)
    for i in range(3):
        assert np.array_equal(g.block(i), mc_local_gradient(trajs, bit_net, params, i).ravel())


def test_off_policy_batch_rejected(grid, bit_net):
    params = bit_net.zero_params()
    traj = run_episode(grid, bit_net, params, rng=np.random.default_rng(0))
    other = [p + 0.1 for p in params]
    with pytest.raises(ValueError, match="off-policy"):
        mc_global_gradient([traj], bit_net, other)


def test_global_estimate_unbiased_on_small_problem():
    mdp = exit_mdp()
    net = chain_network(mdp.n_observations, 2)
    params = net.random_params(np.random.default_rng(7))
    exact = exact_gradient(mdp, net, params).values
    rng = np.random.default_rng(8)
    n = 100_000
    per = np.array([mc_global_gradient([run_episode(mdp, net, params, rng=rng)], net, params).values
                    for _ in range(n)])
    z = (per.mean(0) - exact) / (per.std(0, ddof=1) / np.sqrt(n))
    assert np.all(np.abs(z) < 3)


@pytest.mark.parametrize("n_atomic", [1, 2])
def test_vectorised_sampler_agrees_with_episode_sampler(n_atomic):
    _, mdp, net = async_fixtures()[2]
    params = net.random_params(np.random.default_rng(9))
    n = 20_000
    fast = estimate_gradient(mdp, net, params, n, seed=10, n_atomic=n_atomic)[0]
    rng = np.random.default_rng(11)
    per = np.array([mc_global_gradient([run_episode(mdp, net, params, n_atomic, rng=rng)], net, params).values
                    for _ in range(n)])
    se = np.sqrt(fast.variance / n + per.var(0, ddof=1) / n)
    assert np.all(np.abs(fast.mean.values - per.mean(0)) <= 3.5 * se)
    if n_atomic == 1:
        z = fast.z_scores(exact_gradient(mdp, net, params))
        assert np.all(np.abs(z) < 3.5)


def test_estimates_are_seeded_and_nested():
    _, mdp, net = async_fixtures()[1]
    params = net.random_params(np.random.default_rng(12))
    a = estimate_gradient(mdp, net, params, 3000, seed=5, checkpoints=[1000, 3000], chunk=1000)
    b = estimate_gradient(mdp, net, params, 1000, seed=5, chunk=1000)
    assert np.array_equal(a[0].mean.values, b[0].mean.values)
    c = estimate_gradient(mdp, net, params, 3000, seed=5, checkpoints=[1000, 3000], chunk=1000)
    assert np.array_equal(a[1].mean.values, c[1].mean.values)
    assert [e.n_episodes for e in a] == [1000, 3000]


def test_saturated_optimal_policy_is_stationary():
    mdp = build_gridworld(3, 3)
    net = single_network(mdp.n_observations, 4)
    table = np.zeros((9, 4))
    for s in range(9):
        table[s, 3 if s % 3 < 2 else 1] = 30.0
    g = exact_gradient(mdp, net, [table])
    assert np.abs(g.values).max() < 1e-8


def test_single_coagent_matches_flat_policy_gradient():
    mdp = random_mdp(5, 3, np.random.default_rng(13), discount=0.9)
    net = single_network(mdp.n_observations, 3)
    params = net.random_params(np.random.default_rng(14))
    pol = state_action_policy(net, params, mdp.observations)
    v = exact_state_values(mdp, pol)
    q = mdp.expected_reward + mdp.discount * mdp.transition @ v
    d = discounted_occupancy(mdp.policy_kernel(pol), mdp.initial_dist, mdp.discount, mdp.terminal_mask)
    live = ~mdp.terminal_mask
    flat = d[live, None] * pol[live] * (q[live] - v[live, None])
    assert np.abs(exact_gradient(mdp, net, params).values - flat.ravel()).max() < 1e-10


@pytest.mark.parametrize("name,mdp,net", sync_fixtures(), ids=lambda v: v if isinstance(v, str) else "")
def test_reduction_and_conjugate_paths_agree(name, mdp, net):
    params = net.random_params(np.random.default_rng(15))
    g = exact_gradient(mdp, net, params)
    for i in range(net.m):
        _, gi = comdp_objective_and_gradient(build_comdp(mdp, net, params, i), params[i])
        assert np.abs(g.block(i) - gi.ravel()).max() < 1e-8


@pytest.mark.parametrize("name,mdp,net", async_fixtures(), ids=lambda v: v if isinstance(v, str) else "")
def test_async_gradient_matches_finite_differences(name, mdp, net):
    rng = np.random.default_rng(16)
    f = exact_objective_of(mdp, net)
    for _ in range(3):
        params = net.random_params(rng)
        fd = finite_difference_gradient(f, net.flatten(params), 1e-5)
        assert rel_err(exact_gradient(mdp, net, params).values, fd) < 1e-6


def test_finite_differences_closed_forms():
    g = finite_difference_gradient(lambda x: float((x ** 2).sum()), np.array([1.0, -2.0]), 1e-5)
    assert np.allclose(g, [2.0, -4.0], atol=1e-8)
    assert not finite_difference_gradient(lambda x: 3.0, np.ones(4)).any()
    with pytest.raises(NumericError, match="coordinate 1"):
        finite_difference_gradient(lambda x: np.inf if x[1] > 0 else 0.0, np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=8).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.floats(0.1, 100))
def test_cosine_distance_identities(v, scale):
    g = np.array(v)
    assert abs(cosine_distance(g, g)) < 1e-12
    assert abs(cosine_distance(g, -g) - 2) < 1e-12
    assert abs(cosine_distance(g, scale * g)) < 1e-12


def test_cosine_blocks_and_zero_flag():
    a = GradientVector.from_blocks([np.array([1.0, 0.0]), np.zeros(3)])
    b = GradientVector.from_blocks([np.array([0.0, 2.0]), np.ones(3)])
    d, flags = cosine_distance(a, b, per_coagent=True)
    assert np.allclose(d, [1.0, 1.0]) and list(flags) == [False, True]
    assert mean_block_cosine_distance(a, a) == pytest.approx(0.5)
    with pytest.raises(ValueError, match="layout"):
        cosine_distance(a, GradientVector.from_blocks([np.ones(5)]), per_coagent=True)


def test_gradient_csv():
    g = GradientVector.from_blocks([np.array([1.5]), np.array([-2.0, 0.25])])
    assert g.to_csv().splitlines() == ["coordinate,block,value", "0,0,1.5", "1,1,-2.0", "2,1,0.25"]
