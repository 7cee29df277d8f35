"""Reduction of an asynchronous recurrent network to a synchronous acyclic one.

The augmented MDP carries every coagent's previous output in its state:
states are ``(s, u_prev)`` and actions ``(a, u, e)``. The synchronous
network replaces each coagent by an execution coagent (a parameterless
Bernoulli draw of its execution bit) followed by a policy coagent that
samples from the original softmax when the bit is 1 and copies the previous
output, read from the augmented state, when it is 0.

Everything exact about an asynchronous network (objective, action values,
discounted occupancies, gradients) is computed on this augmented chain.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .mdp import TabularMdp, check_size, discounted_occupancy, exact_state_values, solve_chain
from .network import CoagentNetwork, _flat_grid, policy_tables, transition_law

MAX_AUGMENTED_STATES = 10**6


class AugmentedMdp:
    """The MDP over ``S x U_all`` with actions ``A x U_all x E``.

    Transition and reward tables are structured; dense copies are built on
    demand for small instances. Terminal states of the base MDP are lifted:
    every ``(s_terminal, u)`` is an absorbing zero-reward state.
    """

    def __init__(self, base: TabularMdp, network: CoagentNetwork):
        self.base = base
        self.arities = network.arities
        self.m = network.m
        self.n_joint = int(np.prod(self.arities))
        self.n_exec = 2 ** self.m
        self.n_states = base.n_states * self.n_joint
        self.n_actions = base.n_actions * self.n_joint * self.n_exec
        check_size("augmented state set", self.n_states, MAX_AUGMENTED_STATES)
        h0 = np.ones(1)
        for i in range(self.m):
            h0 = np.kron(h0, network.init_probs(i))
        self.init_output_dist = h0
        self.initial_dist = np.outer(base.initial_dist, h0).ravel()
        if abs(self.initial_dist.sum() - 1) > 1e-12:
            raise ValueError("augmented initial distribution does not sum to 1")
        self.discount = base.discount
        self.reward_support = base.reward_support
        self.terminal_mask = np.repeat(base.terminal_mask, self.n_joint)
        self.terminal_states = frozenset(np.flatnonzero(self.terminal_mask).tolist())
        self.observations = np.repeat(base.observations, self.n_joint)

    def state_index(self, s: int, u: int) -> int:
        return s * self.n_joint + u

    def decode_state(self, idx: int) -> tuple[int, int]:
        return divmod(int(idx), self.n_joint)

    def action_index(self, a: int, u: int, e: int) -> int:
        return (a * self.n_joint + u) * self.n_exec + e

    def decode_action(self, idx: int) -> tuple[int, int, int]:
        au, e = divmod(int(idx), self.n_exec)
        a, u = divmod(au, self.n_joint)
        return a, u, e

    def _split(self, policy):
        nS, nU = self.base.n_states, self.n_joint
        return np.asarray(policy).reshape(nS, nU, self.base.n_actions, nU, self.n_exec).sum(-1)

    def policy_kernel(self, policy: np.ndarray) -> np.ndarray:
        pi = self._split(policy)
        k = np.einsum("suaw,sat->sutw", pi, self.base.transition)
        k = k.reshape(self.n_states, self.n_states)
        term = self.terminal_mask
        k[term] = 0.0
        k[term, np.flatnonzero(term)] = 1.0
        return k

    def policy_reward(self, policy: np.ndarray) -> np.ndarray:
        pi = self._split(policy)
        r = np.einsum("suaw,sa->su", pi, self.base.expected_reward).ravel()
        r[self.terminal_mask] = 0.0
        return r

    @cached_property
    def expected_reward(self) -> np.ndarray:
        r = np.broadcast_to(self.base.expected_reward[:, None, :, None, None],
                            (self.base.n_states, self.n_joint, self.base.n_actions, self.n_joint, self.n_exec))
        r = r.reshape(self.n_states, self.n_actions).copy()
        r[self.terminal_mask] = 0.0
        return r

    @cached_property
    def transition(self) -> np.ndarray:
        check_size("dense augmented transition", self.n_states ** 2 * self.n_actions, 10**7)
        nS, nU, nA, nE = self.base.n_states, self.n_joint, self.base.n_actions, self.n_exec
        P = np.zeros((nS, nU, nA, nU, nE, nS, nU))
        for w in range(nU):
            P[:, :, :, w, :, :, w] = self.base.transition[:, None, :, None, :]
        P = P.reshape(self.n_states, self.n_actions, self.n_states)
        for x in self.terminal_states:
            P[x] = 0.0
            P[x, :, x] = 1.0
        return P

    @cached_property
    def reward_dist(self) -> np.ndarray:
        nR = len(self.reward_support)
        check_size("dense augmented reward table", self.n_states ** 2 * self.n_actions * nR, 10**7)
        nS, nU, nA, nE = self.base.n_states, self.n_joint, self.base.n_actions, self.n_exec
        R = np.broadcast_to(self.base.reward_dist[:, None, :, None, None, :, None, :],
                            (nS, nU, nA, nU, nE, nS, nU, nR))
        R = R.reshape(self.n_states, self.n_actions, self.n_states, nR).copy()
        zero = int(np.argmin(np.abs(self.reward_support)))
        for x in self.terminal_states:
            R[x] = 0.0
            R[x, :, :, zero] = 1.0
        return R

    def to_tabular(self) -> TabularMdp:
        return TabularMdp(self.transition, self.reward_dist, self.reward_support,
                          self.initial_dist, self.discount, self.terminal_states)


def build_augmented_mdp(mdp: TabularMdp, network: CoagentNetwork) -> AugmentedMdp:
    return AugmentedMdp(mdp, network)


@dataclass(frozen=True)
class SyncCoagent:
    kind: str  # "execution" or "policy"
    source: int  # id of the asynchronous coagent it represents
    feedforward_inputs: tuple  # ids in the synchronous network
    output_arity: int


class SyncNetwork:
    """Synchronous acyclic network with an execution and a policy coagent per
    asynchronous coagent. Uses the original parameter tables unchanged."""

    def __init__(self, network: CoagentNetwork):
        self.original = network
        self._exec_id, self._policy_id = {}, {}
        nodes = []
        for i in network.order:
            c = network.coagents[i]
            ff = tuple(self._policy_id[j] for j in c.feedforward_inputs)
            self._exec_id[i] = len(nodes)
            nodes.append(SyncCoagent("execution", i, ff, 2))
            self._policy_id[i] = len(nodes)
            nodes.append(SyncCoagent("policy", i, ff + (self._exec_id[i],), c.output_arity))
        self.coagents = tuple(nodes)

    @property
    def n_params(self) -> int:
        return self.original.n_params

    def execution_id(self, i: int) -> int:
        return self._exec_id[i]

    def policy_id(self, i: int) -> int:
        return self._policy_id[i]

    def factors(self, params, observations, n_joint_prev: int, start: bool = False) -> list[np.ndarray]:
        """Per-node conditional laws as arrays broadcastable to the joint
        shape ``(n_aug_states, *node arities)``; node k owns axis k + 1."""
        net = self.original
        observations = np.asarray(observations)
        nS = len(observations)
        nd = len(self.coagents) + 1

        def axis(values, d):
            shape = [1] * nd
            shape[d] = -1
            return np.asarray(values).reshape(shape)

        obs = axis(np.repeat(observations, n_joint_prev), 0)
        term = obs < 0
        obs0 = np.where(term, 0, obs)
        prev = {j: axis(np.tile(g, nS), 0) for j, g in enumerate(_flat_grid(net.arities))}
        cur = {i: axis(np.arange(net.arities[i]), 1 + self._policy_id[i]) for i in range(net.m)}
        tables = policy_tables(params)
        out = []
        for k, node in enumerate(self.coagents):
            i = node.source
            c = net.coagents[i]
            row = net.row_index(i, obs0, cur, prev)
            if node.kind == "execution":
                if start and c.idle_at_start:
                    p1 = np.zeros_like(obs, dtype=float)
                else:
                    p1 = np.where(term, 1.0, net.execution_prob(i, row, cur))
                bit = axis(np.arange(2), 1 + k)
                out.append(np.where(bit == 1, p1, 1.0 - p1))
            else:
                bit = axis(np.arange(2), 1 + self._exec_id[i])
                u = cur[i]
                soft = np.where(term, 1.0 / c.output_arity, tables[i][row, u])
                out.append(np.where(bit == 1, soft, (u == prev[i]).astype(float)))
        return out

    def policy_rows(self, i: int, observations, n_joint_prev: int) -> np.ndarray:
        """Parameter row used by policy node of coagent ``i``, broadcast over
        the joint axes; -1 where the node's law is parameter-free (terminal
        states or execution bit 0)."""
        net = self.original
        observations = np.asarray(observations)
        nS = len(observations)
        nd = len(self.coagents) + 1

        def axis(values, d):
            shape = [1] * nd
            shape[d] = -1
            return np.asarray(values).reshape(shape)

        obs = axis(np.repeat(observations, n_joint_prev), 0)
        prev = {j: axis(np.tile(g, nS), 0) for j, g in enumerate(_flat_grid(net.arities))}
        cur = {j: axis(np.arange(net.arities[j]), 1 + self._policy_id[j]) for j in range(net.m)}
        row = net.row_index(i, np.where(obs < 0, 0, obs), cur, prev)
        bit = axis(np.arange(2), 1 + self._exec_id[i])
        return np.where((obs < 0) | (bit == 0), -1, row)

    def joint(self, params, observations, n_joint_prev: int, start: bool = False) -> np.ndarray:
        """Joint law of all synchronous outputs given the augmented state,
        shape ``(n_aug_states, *node arities)``."""
        n_aug = len(observations) * n_joint_prev
        check_size("synchronous joint law", n_aug * int(np.prod([c.output_arity for c in self.coagents])), 10**7)
        D = np.ones((n_aug,) + (1,) * len(self.coagents))
        for f in self.factors(params, observations, n_joint_prev, start):
            D = D * f
        return D

    def policy(self, params, mdp: TabularMdp, start: bool = False) -> np.ndarray:
        """The synchronous network's action law over the augmented MDP, shape
        ``(n_aug_states, n_actions, n_joint, 2**m)`` indexed ``[x, a, u, e]``."""
        net = self.original
        n_joint = int(np.prod(net.arities))
        D = self.joint(params, mdp.observations, n_joint, start)
        # reorder axes from (x, e_o0, u_o0, e_o1, u_o1, ...) to (x, u_0..u_m-1, e_0..e_m-1)
        u_axes = [1 + self._policy_id[i] for i in range(net.m)]
        e_axes = [1 + self._exec_id[i] for i in range(net.m)]
        D = D.transpose([0] + u_axes + e_axes).reshape(D.shape[0], n_joint, 2 ** net.m)
        act = _flat_grid(net.arities)[net.action_coagent]
        pi = np.zeros((D.shape[0], net.n_actions, n_joint, 2 ** net.m))
        for a in range(net.n_actions):
            pi[:, a, act == a, :] = D[:, act == a, :]
        return pi


def build_sync_network(network: CoagentNetwork) -> SyncNetwork:
    return SyncNetwork(network)


def async_policy(mdp: TabularMdp, network: CoagentNetwork, params, start: bool = False) -> np.ndarray:
    """``Pr(A_t = a, U_t = u', E_t = e | S_t = s, U_{t-1} = u)`` from the
    asynchronous atomic-step law, laid out like :meth:`SyncNetwork.policy`."""
    law = transition_law(network, params, mdp.observations, start)
    nS, nU, nE, _ = law.shape
    law = law.transpose(0, 1, 3, 2).reshape(nS * nU, nU, nE)
    act = _flat_grid(network.arities)[network.action_coagent]
    pi = np.zeros((nS * nU, network.n_actions, nU, nE))
    for a in range(network.n_actions):
        pi[:, a, act == a, :] = law[:, act == a, :]
    return pi


def verify_behavior_equivalence(mdp: TabularMdp, network: CoagentNetwork, params,
                                sync: SyncNetwork | None = None, tol: float = 1e-10) -> dict:
    sync = build_sync_network(network) if sync is None else sync
    out = {}
    for start in (False, True):
        dev = float(np.abs(sync.policy(params, mdp, start) - async_policy(mdp, network, params, start)).max())
        out["start_step" if start else "step"] = dev
    out["max_deviation"] = max(out.values())
    out["passed"] = out["max_deviation"] < tol
    return out


@dataclass
class ExactSolution:
    """Exact quantities of an asynchronous network on its augmented chain.

    ``occupancy[x, a, u, e]`` is ``sum_t gamma^t Pr(S_t, U_{t-1} = x; A_t = a,
    U_t = u, E_t = e)``; ``action_values[x, a, u]`` is the expected return
    after that outcome.
    """

    aug: AugmentedMdp
    policy: np.ndarray
    start_policy: np.ndarray
    values: np.ndarray
    action_values: np.ndarray
    state_occupancy: np.ndarray
    occupancy: np.ndarray
    objective: float


def _action_values(aug: AugmentedMdp, values: np.ndarray) -> np.ndarray:
    base = aug.base
    V = values.reshape(base.n_states, aug.n_joint)
    q = base.expected_reward[:, :, None] + aug.discount * np.einsum("sat,tw->saw", base.transition, V)
    q = np.repeat(q, aug.n_joint, axis=0)
    q[aug.terminal_mask] = 0.0
    return q


def solve_augmented(mdp: TabularMdp, network: CoagentNetwork, params,
                    aug: AugmentedMdp | None = None, sync: SyncNetwork | None = None) -> ExactSolution:
    aug = build_augmented_mdp(mdp, network) if aug is None else aug
    sync = build_sync_network(network) if sync is None else sync
    pi = sync.policy(params, mdp)
    pi0 = sync.policy(params, mdp, start=True)
    flat = pi.reshape(aug.n_states, -1)
    values = exact_state_values(aug, flat)
    q = _action_values(aug, values)
    live = ~aug.terminal_mask
    first = aug.initial_dist[:, None, None, None] * pi0
    first[~live] = 0.0
    objective = float(np.einsum("xaue,xau->", first, q))
    # distribution of the augmented state after the first step
    nS, nU = mdp.n_states, aug.n_joint
    after = np.einsum("suaw,sat->tw", first.sum(-1).reshape(nS, nU, mdp.n_actions, nU), mdp.transition).ravel()
    later = aug.discount * discounted_occupancy(aug.policy_kernel(flat), after, aug.discount, aug.terminal_mask)
    occupancy = first + later[:, None, None, None] * pi
    state_occ = aug.initial_dist * live + later
    return ExactSolution(aug, pi, pi0, values, q, state_occ, occupancy, objective)


def exact_async_objective(mdp: TabularMdp, network: CoagentNetwork, params) -> float:
    """J by direct evaluation of the asynchronous chain on (s, u_prev),
    built from the atomic-step law without the reduction objects."""
    law = transition_law(network, params, mdp.observations).sum(axis=2)
    law0 = transition_law(network, params, mdp.observations, start=True).sum(axis=2)
    nS, nU, _ = law.shape
    act = _flat_grid(network.arities)[network.action_coagent]
    P = mdp.transition[:, act, :]  # (s, u', s')
    r = mdp.expected_reward[:, act]  # (s, u')
    K = np.einsum("suw,swt->sutw", law, P).reshape(nS * nU, nS * nU)
    term = np.repeat(mdp.terminal_mask, nU)
    rew = np.einsum("suw,sw->su", law, r).ravel()
    V = solve_chain(K, rew, mdp.discount, term).reshape(nS, nU)
    cont = r + mdp.discount * np.einsum("swt,tw->sw", P, V)
    h0 = np.ones(1)
    for i in range(network.m):
        h0 = np.kron(h0, network.init_probs(i))
    live = ~mdp.terminal_mask
    return float(np.einsum("s,u,suw,sw->", mdp.initial_dist * live, h0, law0, cont))


def verify_objective_equivalence(mdp: TabularMdp, network: CoagentNetwork, params, tol: float = 1e-10):
    J = exact_async_objective(mdp, network, params)
    J_aug = solve_augmented(mdp, network, params).objective
    return J, J_aug, abs(J - J_aug)


def async_marginals(mdp: TabularMdp, network: CoagentNetwork, params, horizon: int = 10):
    """Exact ``Pr(S_t = s)`` and ``Pr(R_t = r)`` for t < horizon, by forward
    propagation of the asynchronous chain."""
    law = transition_law(network, params, mdp.observations).sum(axis=2)
    law0 = transition_law(network, params, mdp.observations, start=True).sum(axis=2)
    act = _flat_grid(network.arities)[network.action_coagent]
    h0 = np.ones(1)
    for i in range(network.m):
        h0 = np.kron(h0, network.init_probs(i))
    P = mdp.transition[:, act, :]
    Rd = mdp.reward_dist[:, act]  # (s, u', s', r)
    p = np.outer(mdp.initial_dist, h0)
    states, rewards = [], []
    for t in range(horizon):
        states.append(p.sum(1))
        step = np.einsum("su,suw->sw", p, law0 if t == 0 else law)
        rewards.append(np.einsum("sw,swtk->k", step, Rd * P[..., None]))
        p = np.einsum("sw,swt->tw", step, P)
    return np.array(states), np.array(rewards)


def augmented_marginals(aug: AugmentedMdp, policy: np.ndarray, start_policy: np.ndarray, horizon: int = 10):
    """The same marginals read off the augmented MDP under the synchronous
    network's policy, projected onto the base state."""
    base = aug.base
    nS, nU = base.n_states, aug.n_joint
    p = aug.initial_dist.copy()
    states, rewards = [], []
    for t in range(horizon):
        states.append(p.reshape(nS, nU).sum(1))
        pi = (start_policy if t == 0 else policy).sum(-1).reshape(nS, nU, base.n_actions, nU)
        step = p.reshape(nS, nU)[:, :, None, None] * pi
        sa = step.sum(axis=(1, 3))
        rewards.append(np.einsum("sa,sat,satk->k", sa, base.transition, base.reward_dist))
        p = np.einsum("suaw,sat->tw", step, base.transition).ravel()
    return np.array(states), np.array(rewards)
