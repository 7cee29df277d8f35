"""Small MDPs and networks shared by the verification suites and tests."""

from __future__ import annotations

import numpy as np

from .mdp import TabularMdp, build_gridworld
from .network import CoagentNetwork, CoagentSpec, Execution


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator, discount: float = 1.0,
               reward_support=(-1.0, 0.0, 1.0), exit_prob: float = 0.2) -> TabularMdp:
    """Random MDP whose last state is terminal. Every other state reaches it
    with probability at least ``exit_prob`` under any action, so the chain is
    absorbing even when ``discount`` is 1."""
    n_live = n_states - 1
    P = np.zeros((n_states, n_actions, n_states))
    P[:, :, :n_live] = rng.dirichlet(np.ones(n_live), size=(n_states, n_actions)) * (1 - exit_prob)
    P[:, :, -1] = exit_prob
    P[-1] = 0.0
    P[-1, :, -1] = 1.0
    support = np.asarray(reward_support, float)
    R = rng.dirichlet(np.ones(len(support)), size=(n_states, n_actions, n_states))
    zero = int(np.argmin(np.abs(support)))
    R[-1] = 0.0
    R[-1, :, :, zero] = 1.0
    d0 = np.zeros(n_states)
    d0[:n_live] = rng.dirichlet(np.ones(n_live))
    return TabularMdp(P, R, support, d0, discount, frozenset({n_states - 1}))


def default_gridworld() -> TabularMdp:
    return build_gridworld(3, 3)


def two_bit_network(exec_prob: float = 0.5, n_observations: int = 9, n_actions: int = 4) -> CoagentNetwork:
    """Two state-reading binary coagents feeding an action coagent that sees
    only their bits; every coagent executes with ``exec_prob`` per step."""
    ex = Execution.bernoulli(exec_prob) if exec_prob < 1 else Execution.always()
    return CoagentNetwork([
        CoagentSpec(2, execution=ex, name="input_a"),
        CoagentSpec(2, execution=ex, name="input_b"),
        CoagentSpec(n_actions, uses_state=False, feedforward_inputs=(0, 1), execution=ex, name="output"),
    ], n_observations)


def single_network(n_obs: int, n_actions: int) -> CoagentNetwork:
    return CoagentNetwork([CoagentSpec(n_actions)], n_obs)


def chain_network(n_obs: int, n_actions: int) -> CoagentNetwork:
    return CoagentNetwork([CoagentSpec(2), CoagentSpec(n_actions, feedforward_inputs=(0,))], n_obs)


def deep_chain_network(n_obs: int, n_actions: int) -> CoagentNetwork:
    return CoagentNetwork([
        CoagentSpec(2),
        CoagentSpec(2, uses_state=False, feedforward_inputs=(0,)),
        CoagentSpec(n_actions, feedforward_inputs=(1,)),
    ], n_obs)


def fork_network(n_obs: int, n_actions: int) -> CoagentNetwork:
    return CoagentNetwork([
        CoagentSpec(2),
        CoagentSpec(3, feedforward_inputs=(0,)),
        CoagentSpec(n_actions, uses_state=False, feedforward_inputs=(0, 1)),
    ], n_obs)


def sync_fixtures():
    """(name, mdp, network) triples of synchronous acyclic networks, each
    with at most 3 coagents on at most 10 states."""
    rng = np.random.default_rng(20240501)
    out = []
    mdp2 = random_mdp(2, 2, rng, discount=0.9)
    out.append(("single-2state", mdp2, single_network(mdp2.n_observations, 2)))
    mdp3 = random_mdp(3, 2, rng, discount=1.0)
    out.append(("chain-3state", mdp3, chain_network(mdp3.n_observations, 2)))
    mdp4 = random_mdp(4, 3, rng, discount=0.95)
    out.append(("deep-chain-4state", mdp4, deep_chain_network(mdp4.n_observations, 3)))
    out.append(("fork-4state", mdp4, fork_network(mdp4.n_observations, 3)))
    grid = build_gridworld(2, 2)
    out.append(("two-inputs-2x2-grid", grid, two_bit_network(1.0, grid.n_observations)))
    grid3 = default_gridworld()
    out.append(("two-inputs-3x3-grid", grid3, two_bit_network(1.0)))
    return out


def async_fixtures():
    """(name, mdp, network) triples of asynchronous/recurrent networks small
    enough for exact reduction checks."""
    rng = np.random.default_rng(20240502)
    out = []
    mdp = random_mdp(3, 2, rng, discount=1.0)
    n = mdp.n_observations
    out.append(("bernoulli-single", mdp, CoagentNetwork([CoagentSpec(2, execution=Execution.bernoulli(0.5))], n)))
    out.append(("recurrent-chain", mdp, CoagentNetwork([
        CoagentSpec(2, recurrent_inputs=(1,), execution=Execution.bernoulli(0.7)),
        CoagentSpec(2, feedforward_inputs=(0,), execution=Execution.bernoulli(0.4), init_dist=(0.3, 0.7)),
    ], n)))
    table = rng.uniform(0.1, 0.9, size=n * 2)
    out.append(("table-and-gated", mdp, CoagentNetwork([
        CoagentSpec(2, recurrent_inputs=(0,), execution=Execution.from_table(table)),
        CoagentSpec(2, feedforward_inputs=(0,), execution=Execution.gated(0)),
    ], n)))
    mdp4 = random_mdp(4, 3, rng, discount=0.9)
    out.append(("mixed-4state", mdp4, CoagentNetwork([
        CoagentSpec(2, execution=Execution.bernoulli(0.25)),
        CoagentSpec(3, uses_state=False, feedforward_inputs=(0,), recurrent_inputs=(1,),
                    execution=Execution.bernoulli(0.6)),
    ], mdp4.n_observations)))
    grid = build_gridworld(2, 2)
    out.append(("two-inputs-2x2-grid", grid, two_bit_network(0.5, grid.n_observations)))
    return out
