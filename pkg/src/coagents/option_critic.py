"""The option-critic architecture as a three-coagent asynchronous network.

Coagents, in execution order:

0. termination: reads (s_t, omega_{t-1}) and outputs e_t. e_t = 1 means the
   current option terminated, which makes the option selector execute;
   e_t = 0 means the option continues. On the first step it does not
   execute and emits e_0 = 1, so an initial option is always chosen.
1. option selector: reads (s_t, e_t), outputs omega_t, executes iff e_t = 1.
2. intra-option policy: reads (s_t, omega_t), outputs the action.

The termination tables below use the other common convention for the
termination policy, beta(x, 0) = probability of terminating and
beta(x, 1) = probability of continuing. So beta(x, 0) is the probability of
e = 1, and ``q_beta[..., 0]`` is the value of terminating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradients import mc_local_gradient
from .mdp import TabularMdp
from .network import CoagentNetwork, CoagentSpec, Execution, policy_tables
from .reduction import ExactSolution, solve_augmented

TERMINATION, SELECTOR, INTRA = 0, 1, 2


@dataclass(frozen=True)
class OptionCriticNet:
    network: CoagentNetwork
    n_options: int

    @property
    def n_actions(self) -> int:
        return self.network.n_actions

    def zero_params(self):
        return self.network.zero_params()


def build_option_critic(mdp: TabularMdp, n_options: int) -> OptionCriticNet:
    if n_options < 1:
        raise ValueError("need at least one option")
    n_obs = mdp.n_observations
    coagents = [
        CoagentSpec(2, recurrent_inputs=(SELECTOR,), execution=Execution.always(),
                    init_dist=(0.0, 1.0), idle_at_start=True, name="termination"),
        CoagentSpec(n_options, feedforward_inputs=(TERMINATION,), execution=Execution.gated(TERMINATION),
                    name="option_selector"),
        CoagentSpec(mdp.n_actions, feedforward_inputs=(SELECTOR,), execution=Execution.always(),
                    name="intra_option"),
    ]
    return OptionCriticNet(CoagentNetwork(coagents, n_obs, action_coagent=INTRA), n_options)


@dataclass
class OptionValueTables:
    """Exact option-level quantities, indexed by base state and option.

    ``d_omega[s, w]``: sum_t g^t Pr(s_t = s, omega_t = w).
    ``d_beta[s, w]``: the same weighting of (s_t, omega_{t-1}) over t >= 1,
    the local states where the termination coagent executes.
    ``d_select[s]``: weighting of the steps where the selector executes.
    ``q_beta[s, w, 0]`` is the value of terminating, ``[..., 1]`` of continuing.
    """

    d_omega: np.ndarray
    d_beta: np.ndarray
    d_select: np.ndarray
    q_u: np.ndarray
    q_omega: np.ndarray
    v_omega: np.ndarray
    a_omega: np.ndarray
    q_beta: np.ndarray
    arrival: np.ndarray
    select_probs: np.ndarray
    terminate_probs: np.ndarray
    solution: ExactSolution


def exact_option_tables(mdp: TabularMdp, net: OptionCriticNet, params) -> OptionValueTables:
    network = net.network
    nS, nO, nA = mdp.n_states, net.n_options, net.n_actions
    sol = solve_augmented(mdp, network, params)
    live = ~mdp.terminal_mask
    obs = np.where(live, mdp.observations, 0)
    tabs = policy_tables(params)
    # joint outputs are flattened as (e, omega, a)
    V = sol.values.reshape(nS, 2, nO, nA)
    arrival = V[:, 0, :, 0]  # value depends on the previous outputs only through omega
    q_u = mdp.expected_reward[:, None, :] + mdp.discount * np.einsum("sat,tw->swa", mdp.transition, arrival)
    q_u[~live] = 0.0
    intra = tabs[INTRA].reshape(-1, nO, nA)[obs]
    q_omega = (intra * q_u).sum(-1)
    select = tabs[SELECTOR].reshape(-1, 2, nO)[obs, 1]
    v_omega = (select * q_omega).sum(-1)
    a_omega = q_omega - v_omega[:, None]
    q_beta = np.stack([np.broadcast_to(v_omega[:, None], q_omega.shape), q_omega], axis=-1)
    terminate = tabs[TERMINATION].reshape(-1, nO, 2)[obs, :, 1]

    occ = sol.occupancy.sum(axis=1).reshape(nS, 2 * nO * nA, 2, nO, nA, 2, 2, 2)
    d_omega = occ.sum(axis=(1, 2, 4, 5, 6, 7))
    d_select = occ[..., 1, :].sum(axis=(1, 2, 3, 4, 5, 6))
    later = (sol.state_occupancy - sol.aug.initial_dist * np.repeat(live, 2 * nO * nA)).reshape(nS, 2, nO, nA)
    d_beta = later.sum(axis=(1, 3))
    for arr in (d_omega, d_beta, d_select):
        arr[~live] = 0.0
    return OptionValueTables(d_omega, d_beta, d_select, q_u, q_omega, v_omega, a_omega, q_beta,
                             arrival, select, terminate, sol)


def intra_option_gradient(tables: OptionValueTables, net: OptionCriticNet, params, mdp: TabularMdp) -> np.ndarray:
    """sum_{s,w} d_omega(s, w) sum_a dpi_w(s, a) Q_U(s, w, a)."""
    live = ~mdp.terminal_mask
    pi = policy_tables(params)[INTRA].reshape(-1, net.n_options, net.n_actions)
    d = tables.d_omega[live]
    adv = tables.q_u[live] - tables.q_omega[live][..., None]
    return (d[..., None] * pi * adv).reshape(-1, net.n_actions)


def termination_gradient(tables: OptionValueTables, net: OptionCriticNet, params, mdp: TabularMdp,
                         form: str = "qbeta") -> np.ndarray:
    """Gradient for the termination coagent's table.

    ``qbeta``: sum_x d(x) sum_u dbeta(x, u) Q_beta(x, u).
    ``advantage``: -sum_x d(x) dbeta(x, 0) A_Omega(x.s, x.w).
    Here beta(x, 0) is the terminate probability, i.e. the coagent's output 1.
    """
    live = ~mdp.terminal_mask
    p = policy_tables(params)[TERMINATION].reshape(-1, net.n_options, 2)
    d = tables.d_beta[live][..., None]
    if form == "qbeta":
        # network output e: 0 continue (value Q_Omega), 1 terminate (value V_Omega)
        # q_e - sum_e p_e q_e, written for two outputs to avoid cancellation
        gap = tables.q_beta[live][..., 1] - tables.q_beta[live][..., 0]
        centred = np.stack([p[..., 1] * gap, -p[..., 0] * gap], axis=-1)
        grad = d * p * centred
    elif form == "advantage":
        p_term = p[..., 1:]
        dterm = p_term * (np.array([0.0, 1.0]) - p)  # d beta(x, 0) / d logits
        grad = -d * dterm * tables.a_omega[live][..., None]
    else:
        raise ValueError(f"unknown termination-gradient form {form!r}; use 'qbeta' or 'advantage'")
    return grad.reshape(-1, 2)


def selector_gradient(tables: OptionValueTables, net: OptionCriticNet, params, mdp: TabularMdp) -> np.ndarray:
    """sum_s d_select(s) sum_w dpi_Omega(s, w) Q_Omega(s, w); rows read with
    e = 0 are never used and get zero."""
    live = ~mdp.terminal_mask
    pi = policy_tables(params)[SELECTOR].reshape(-1, 2, net.n_options)[:, 1]
    grad = np.zeros((mdp.n_observations, 2, net.n_options))
    grad[:, 1] = tables.d_select[live][:, None] * pi * tables.a_omega[live]
    return grad.reshape(-1, net.n_options)


def option_policy_gradient(trajectories, net: OptionCriticNet, params) -> np.ndarray:
    """Monte Carlo estimate of the selector's gradient; the selector's
    execution bits mask the steps where no option was chosen."""
    return mc_local_gradient(trajectories, net.network, params, SELECTOR)
