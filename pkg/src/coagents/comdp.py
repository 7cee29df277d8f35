"""Per-coagent conjugate MDPs of synchronous acyclic networks.

Coagent i sees local states ``x = (s, u_pre)``, where ``u_pre`` are the
outputs of its direct feedforward inputs. Its conjugate MDP has

* ``P_i(x, u, x') = pre(x'.s, x'.u_pre) * sum_a P(x.s, a, x'.s) post(x, u, a)``
* ``R_i(x, u, x', r)`` = the reward law given the same event, as a ratio,
* ``d0_i(x) = d0(x.s) * pre(x.s, x.u_pre)``,

with ``pre`` the law of ``u_pre`` given the state and ``post`` the law of
the action given the coagent's local state and output. Everything is
computed by exact summation over the network's joint output space.

Both an ordinary synchronous :class:`CoagentNetwork` and the paired
network of the asynchronous reduction are handled through
:class:`SyncView`, a list of per-node conditional factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularMdp, check_size, discounted_occupancy, exact_objective, exact_state_values
from .network import CoagentNetwork, TopologyError, _flat_grid, policy_tables, softmax
from .reduction import AugmentedMdp, SyncNetwork

CONDITIONING_FLOOR = 1e-4
MAX_ENUMERATION = 10**6

PROPERTY_NAMES = {
    "stochastic": "conjugate MDP tables are stochastic",
    "initial_law": "d0_i(x) = Pr(S_0, U_pre_0 = x)",
    "initial_state_marginal": "Pr(X_0.s = s) = d0(s)",
    "input_transition": "P_i matches the real input transition law",
    "reward_law": "R_i matches the real reward law",
    "local_state_marginal": "Pr(X_t = x) = Pr(S_t, U_pre_t = x)",
    "state_marginal": "Pr(X_t.s = s) = Pr(S_t = s)",
    "inputs_given_state": "Pr(X_t.u_pre | X_t.s) = pre",
    "next_state_law": "next-state law given (x, u) matches",
    "next_inputs_given_state": "next u_pre independent of (x, u) given next state",
    "reward_marginal": "Pr(R_t = r) matches",
    "objective": "J = J_i",
}


@dataclass
class SyncView:
    """A synchronous acyclic network on a dense MDP, as conditional factors.

    ``factors[k]`` broadcasts to ``(n_states, *arities)`` and depends only on
    the state, node k's inputs ``pre_inputs[k]`` and node k's own axis.
    ``rows[k]`` (same broadcasting) gives the parameter-table row node k
    uses, -1 where its law is parameter-free; ``tables[k]`` is that table of
    logits or None for parameterless nodes.
    """

    mdp: object
    arities: tuple
    pre_inputs: list
    factors: list
    rows: list
    tables: list
    action: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.arities)

    @property
    def full_shape(self) -> tuple:
        return (self.mdp.n_states,) + tuple(self.arities)

    def joint(self, skip: int | None = None) -> np.ndarray:
        """Joint output law given the state; with ``skip`` the factor of that
        node is replaced by a uniform law."""
        check_size("joint output law", int(np.prod(self.full_shape)), MAX_ENUMERATION * 10)
        D = np.ones(self.full_shape)
        for k, f in enumerate(self.factors):
            D = D * (1.0 / self.arities[k] if k == skip else f)
        return D

    def local_slice(self, array, i: int) -> np.ndarray:
        """Restrict an array over the joint axes to (state, node i's inputs,
        node i's own axis), flattened to ``(n_local_states, arity_i)``."""
        a = np.broadcast_to(array, self.full_shape)
        keep = set(self.pre_inputs[i]) | {i}
        idx = tuple(slice(None) if k == 0 or (k - 1) in keep else 0 for k in range(a.ndim))
        a = a[idx]
        return a.reshape(-1, self.arities[i])

    def state_action_policy(self) -> np.ndarray:
        D = self.joint().reshape(self.mdp.n_states, -1)
        onehot = np.eye(self.mdp.n_actions)[self.action.ravel()]
        return D @ onehot


def view_of_network(mdp: TabularMdp, network: CoagentNetwork, params) -> SyncView:
    if not network.is_synchronous:
        raise TopologyError("network has recurrent inputs or asynchronous execution; "
                            "reduce it with build_augmented_mdp/build_sync_network first")
    m = network.m
    nd = m + 1

    def axis(values, d):
        shape = [1] * nd
        shape[d] = -1
        return np.asarray(values).reshape(shape)

    obs = axis(mdp.observations, 0)
    term = obs < 0
    obs0 = np.where(term, 0, obs)
    cur = {i: axis(np.arange(a), i + 1) for i, a in enumerate(network.arities)}
    tables = policy_tables(params)
    factors, rows = [], []
    for i, c in enumerate(network.coagents):
        row = network.row_index(i, obs0, cur, {})
        factors.append(np.where(term, 1.0 / c.output_arity, tables[i][row, cur[i]]))
        rows.append(np.where(term, -1, row))
    action = _flat_grid(network.arities)[network.action_coagent].reshape(network.arities)
    pre = [tuple(sorted(set(c.feedforward_inputs))) for c in network.coagents]
    return SyncView(mdp, network.arities, pre, factors, rows, [np.asarray(p, float) for p in params], action)


def view_of_sync_network(aug: AugmentedMdp, sync: SyncNetwork, params) -> SyncView:
    net = sync.original
    if any(c.idle_at_start for c in net.coagents):
        raise ValueError("the step-0 law of idle_at_start coagents is not stationary; "
                         "conjugate MDPs need a stationary synchronous policy")
    n_joint = aug.n_joint
    obs = aug.base.observations
    factors = sync.factors(params, obs, n_joint)
    arities = tuple(c.output_arity for c in sync.coagents)
    rows, tables = [], []
    for node in sync.coagents:
        if node.kind == "policy":
            rows.append(sync.policy_rows(node.source, obs, n_joint))
            tables.append(np.asarray(params[node.source], float))
        else:
            rows.append(np.full((1,) * (len(arities) + 1), -1))
            tables.append(None)
    grid = _flat_grid(arities)
    u_flat = np.ravel_multi_index([grid[sync.policy_id(i)] for i in range(net.m)], net.arities)
    e_flat = np.ravel_multi_index([grid[sync.execution_id(i)] for i in range(net.m)], (2,) * net.m)
    a = grid[sync.policy_id(net.action_coagent)]
    action = ((a * n_joint + u_flat) * aug.n_exec + e_flat).reshape(arities)
    pre = [tuple(sorted(set(c.feedforward_inputs))) for c in sync.coagents]
    return SyncView(aug, arities, pre, factors, rows, tables, action)


def as_view(mdp, network, params) -> SyncView:
    if isinstance(network, SyncView):
        return network
    if isinstance(network, SyncNetwork):
        if not isinstance(mdp, AugmentedMdp):
            raise TypeError("a SyncNetwork runs on the AugmentedMdp built for its network")
        return view_of_sync_network(mdp, network, params)
    return view_of_network(mdp, network, params)


@dataclass
class NetworkMarginals:
    """``pre[s, v]`` = law of node i's input tuple v given state s;
    ``post[s, v, u, a]`` = law of the action given (s, v) and node i's output u.
    ``defined[s, v]`` is False where ``pre`` is zero and ``post`` was filled
    uniformly."""

    pre: np.ndarray
    post: np.ndarray
    defined: np.ndarray


def _move_local_axes(view: SyncView, array: np.ndarray, i: int) -> tuple[np.ndarray, int, int]:
    """Transpose a joint-shaped array to (state, pre axes, own axis, rest) and
    flatten to (n_states, n_pre, arity_i, n_rest)."""
    pre = list(view.pre_inputs[i])
    rest = [k for k in range(view.n_nodes) if k not in pre and k != i]
    a = np.broadcast_to(array, view.full_shape[:1] + tuple(view.arities)) if array.ndim == len(view.full_shape) else array
    perm = [0] + [1 + k for k in pre] + [1 + i] + [1 + k for k in rest]
    n_pre = int(np.prod([view.arities[k] for k in pre], dtype=np.int64))
    return a.transpose(perm).reshape(a.shape[0], n_pre, view.arities[i], -1), n_pre, len(rest)


def compute_marginals(mdp, network, params, i: int) -> NetworkMarginals:
    view = as_view(mdp, network, params)
    nS, nA = view.mdp.n_states, view.mdp.n_actions
    joint, n_pre, _ = _move_local_axes(view, view.joint(), i)
    pre = joint.sum(axis=(2, 3))
    inter, _, _ = _move_local_axes(view, view.joint(skip=i), i)
    act, _, _ = _move_local_axes(view, np.broadcast_to(view.action, view.full_shape)[:1], i)
    act = act[0]
    check_size("post-marginal table", nS * n_pre * view.arities[i] * nA * act.shape[-1], MAX_ENUMERATION * 50)
    post = np.zeros((nS, n_pre, view.arities[i], nA))
    for a in np.unique(act):
        post[..., a] = (inter * (act == a)).sum(-1)
    z = post.sum(-1, keepdims=True)
    defined = pre > 0
    post = np.where(z > 0, post / np.where(z > 0, z, 1.0), 1.0 / nA)
    return NetworkMarginals(pre, post, defined)


@dataclass
class CoMdp:
    """Conjugate MDP of one coagent.

    Local states are enumerated as ``index = s * n_pre + v`` with ``v`` the
    C-order flattening of the input tuple in ascending node order.
    ``reward_defined[x, u, s']`` is False where the reward ratio has a zero
    denominator; those rows of ``reward_dist`` are left at zero.
    """

    coagent: int
    local_states: np.ndarray
    n_outputs: int
    reward_support: np.ndarray
    transition: np.ndarray
    reward_dist: np.ndarray
    reward_defined: np.ndarray
    expected_reward: np.ndarray
    initial_dist: np.ndarray
    discount: float
    terminal_mask: np.ndarray
    policy_rows: np.ndarray
    fixed_policy: np.ndarray
    marginals: NetworkMarginals = field(repr=False)

    @property
    def n_states(self) -> int:
        return len(self.local_states)

    @property
    def n_pre(self) -> int:
        return self.marginals.pre.shape[1]

    def policy(self, params_i=None) -> np.ndarray:
        """The coagent's policy over local states; parameter-driven rows use
        ``params_i`` (its logit table), the rest keep their fixed law."""
        pol = self.fixed_policy.copy()
        if params_i is not None:
            live = self.policy_rows >= 0
            pol[live] = softmax(np.asarray(params_i, float)[self.policy_rows[live]])
        return pol

    def policy_kernel(self, policy: np.ndarray) -> np.ndarray:
        k = np.einsum("xu,xuy->xy", policy, self.transition)
        term = self.terminal_mask
        k[term] = 0.0
        k[term, np.flatnonzero(term)] = 1.0
        return k

    def policy_reward(self, policy: np.ndarray) -> np.ndarray:
        r = np.einsum("xu,xu->x", policy, self.expected_reward)
        r[self.terminal_mask] = 0.0
        return r


def build_comdp(mdp, network, params, i: int) -> CoMdp:
    view = as_view(mdp, network, params)
    base = view.mdp
    nS = base.n_states
    marg = compute_marginals(mdp, view, params, i)
    pre, post = marg.pre, marg.post
    n_pre, n_u = pre.shape[1], view.arities[i]
    n_x = nS * n_pre
    nR = len(base.reward_support)
    check_size("conjugate reward table", n_x * n_u * nS * nR, MAX_ENUMERATION * 10)
    P, Rd = base.transition, base.reward_dist
    # law of the next base state given (x, u): sum_a P(s, a, s') post(x, u, a)
    next_s = np.einsum("sat,svua->svut", P, post)
    trans = (next_s[..., None] * pre[None, None, None]).reshape(n_x, n_u, n_x)
    joint_r = np.einsum("sat,satk,svua->svutk", P, Rd, post)
    defined = next_s > 0
    reward = np.where(defined[..., None], joint_r / np.where(defined, next_s, 1.0)[..., None], 0.0)
    reward = np.broadcast_to(reward[:, :, :, :, None, :], (nS, n_pre, n_u, nS, n_pre, nR)).reshape(n_x, n_u, n_x, nR)
    exp_r = np.einsum("sa,svua->svu", base.expected_reward, post).reshape(n_x, n_u)
    local_states = np.stack(np.divmod(np.arange(n_x), n_pre), axis=1)
    rows = view.local_slice(view.rows[i], i)[:, 0]
    fixed = view.local_slice(view.factors[i], i).astype(float)
    return CoMdp(
        coagent=i, local_states=local_states, n_outputs=n_u,
        reward_support=np.asarray(base.reward_support, float),
        transition=trans, reward_dist=np.ascontiguousarray(reward),
        reward_defined=np.repeat(defined, n_pre, axis=-1).reshape(n_x, n_u, n_x),
        expected_reward=exp_r, initial_dist=(base.initial_dist[:, None] * pre).ravel(),
        discount=base.discount, terminal_mask=np.repeat(base.terminal_mask, n_pre),
        policy_rows=np.asarray(rows, dtype=np.int64), fixed_policy=fixed, marginals=marg)


def comdp_objective_and_gradient(comdp: CoMdp, params_i) -> tuple[float, np.ndarray | None]:
    """J_i and dJ_i/dtheta_i by the exact sum form ``sum_x d(x) sum_u
    dpi(x, u) Q_i(x, u)``. The gradient is None for parameterless coagents."""
    pol = comdp.policy(params_i)
    V = exact_state_values(comdp, pol)
    J = float(comdp.initial_dist @ V)
    if params_i is None:
        return J, None
    params_i = np.asarray(params_i, float)
    live = ~comdp.terminal_mask
    Q = comdp.expected_reward + comdp.discount * comdp.transition @ V
    d = discounted_occupancy(comdp.policy_kernel(pol), comdp.initial_dist, comdp.discount, comdp.terminal_mask)
    grad = np.zeros_like(params_i)
    use = live & (comdp.policy_rows >= 0)
    # for a softmax row, sum_u dpi(x,u)/dtheta[row,k] Q(x,u) = pi(x,k) (Q(x,k) - V_pi(x))
    adv = Q[use] - (pol[use] * Q[use]).sum(1, keepdims=True)
    np.add.at(grad, comdp.policy_rows[use], d[use, None] * pol[use] * adv)
    return J, grad


def _real_and_conjugate(view: SyncView, comdp: CoMdp, horizon: int):
    """Yield per-step joint tables ``(real, conj)`` over (x, u, x', r) and the
    local-state marginals, for t = 0 .. horizon-1."""
    base = view.mdp
    i = comdp.coagent
    nS, nA = base.n_states, base.n_actions
    n_pre, n_u = comdp.n_pre, comdp.n_outputs
    n_x, nR = comdp.n_states, len(comdp.reward_support)
    check_size("per-step joint enumeration", n_x * n_u * n_x * nR, MAX_ENUMERATION)
    joint = view.joint()
    J4, _, _ = _move_local_axes(view, joint, i)
    act, _, _ = _move_local_axes(view, np.broadcast_to(view.action, view.full_shape)[:1], i)
    act = act[0]
    by_action = np.zeros((nS, n_pre, n_u, nA))
    for a in np.unique(act):
        by_action[..., a] = (J4 * (act == a)).sum(-1)
    pre = J4.sum(axis=(2, 3))
    P, Rd = base.transition, base.reward_dist
    live = ~base.terminal_mask
    rho = base.initial_dist.copy()
    conj_x = comdp.initial_dist.copy()
    pol = comdp.fixed_policy
    for t in range(horizon):
        # the real process is memoryless given the state, so Pr(S_t, U_t) = rho(s) * joint(s, u)
        sv = rho[:, None, None, None] * by_action
        A = np.einsum("svua,sat,satk->svutk", sv, P, Rd)
        real = (A[:, :, :, :, None, :] * pre[None, None, None, :, :, None]).reshape(n_x, n_u, n_x, nR)
        conj = (conj_x[:, None, None, None] * pol[:, :, None, None]
                * comdp.transition[..., None] * np.where(comdp.reward_defined[..., None], comdp.reward_dist, 0.0))
        yield t, real, conj, rho * 1.0, conj_x * 1.0
        rho = np.einsum("svua,sat->t", sv, P)
        conj_x = np.einsum("xu,xuy->y", conj_x[:, None] * pol, comdp.transition)
    del live


def _cond(joint: np.ndarray, axes: tuple, floor: float):
    """Conditional of ``joint`` given all axes not in ``axes`` and the mask
    of conditioning events whose mass reaches ``floor``."""
    mass = joint.sum(axis=axes, keepdims=True)
    ok = mass >= floor
    return np.where(ok, joint / np.where(ok, mass, 1.0), 0.0), ok


def verify_properties(mdp, network, params, i: int, horizon: int = 10, tol: float = 1e-10,
                      comdp: CoMdp | None = None, floor: float = CONDITIONING_FLOOR) -> dict:
    """Check the conjugate-MDP properties for coagent ``i`` by exact
    enumeration of both chains for ``horizon`` steps.

    Returns ``{key: (max deviation, passed)}`` with keys from
    :data:`PROPERTY_NAMES`. Conditional properties are compared only where
    the conditioning event has probability at least ``floor``. Pass a
    prebuilt (possibly altered) ``comdp`` to check it instead of a fresh one.
    """
    view = as_view(mdp, network, params)
    comdp = build_comdp(mdp, view, params, i) if comdp is None else comdp
    base = view.mdp
    nS, n_pre, n_u = base.n_states, comdp.n_pre, comdp.n_outputs
    dev = {k: 0.0 for k in PROPERTY_NAMES}

    # stochasticity of the tables
    rows = np.abs(comdp.transition.sum(-1) - 1).max()
    rsum = comdp.reward_dist.sum(-1)
    rrows = np.abs(rsum - 1)[comdp.reward_defined].max(initial=0.0)
    dev["stochastic"] = float(max(rows, rrows, abs(comdp.initial_dist.sum() - 1)))

    for t, real, conj, rho, conj_x in _real_and_conjugate(view, comdp, horizon):
        real_x = real.sum(axis=(1, 2, 3))
        if t == 0:
            dev["initial_law"] = float(np.abs(comdp.initial_dist - real_x).max())
            dev["initial_state_marginal"] = float(np.abs(comdp.initial_dist.reshape(nS, n_pre).sum(1) - base.initial_dist).max())
        dev["local_state_marginal"] = max(dev["local_state_marginal"], float(np.abs(conj_x - real_x).max()))
        dev["state_marginal"] = max(dev["state_marginal"], float(np.abs(conj_x.reshape(nS, n_pre).sum(1) - rho).max()))
        cx = conj_x.reshape(nS, n_pre)
        cpre, ok = _cond(cx, (1,), floor)
        dev["inputs_given_state"] = max(dev["inputs_given_state"], float((np.abs(cpre - comdp.marginals.pre) * ok).max()))

        # P_i and R_i against the real conditionals
        trans_real, ok = _cond(real.sum(-1), (2,), floor)
        dev["input_transition"] = max(dev["input_transition"], float((np.abs(trans_real - comdp.transition) * ok).max()))
        rew_real, ok = _cond(real, (3,), floor)
        ok = ok & comdp.reward_defined[..., None]
        dev["reward_law"] = max(dev["reward_law"], float((np.abs(rew_real - comdp.reward_dist) * ok).max()))

        # next base state given (x, u)
        real_s = real.sum(-1).reshape(-1, n_u, nS, n_pre).sum(-1)
        conj_s = conj.sum(-1).reshape(-1, n_u, nS, n_pre).sum(-1)
        rs, ok_r = _cond(real_s, (2,), floor)
        cs, ok_c = _cond(conj_s, (2,), floor)
        dev["next_state_law"] = max(dev["next_state_law"], float((np.abs(rs - cs) * (ok_r & ok_c)).max()))

        # next u_pre given next state, with and without (x, u)
        nxt = conj.sum(-1).reshape(-1, n_u, nS, n_pre)
        given_all, ok = _cond(nxt, (3,), floor)
        given_s, ok_s = _cond(nxt.sum(axis=(0, 1), keepdims=True), (3,), floor)
        dev["next_inputs_given_state"] = max(dev["next_inputs_given_state"], float((np.abs(given_all - given_s) * (ok & ok_s)).max()))

        dev["reward_marginal"] = max(dev["reward_marginal"], float(np.abs(real.sum(axis=(0, 1, 2)) - conj.sum(axis=(0, 1, 2))).max()))

    J = exact_objective(base, view.state_action_policy())
    Ji, _ = comdp_objective_and_gradient(comdp, view.tables[i] if view.tables[i] is not None else None)
    dev["objective"] = abs(J - Ji)
    return {k: (v, bool(v < tol)) for k, v in dev.items()}


def format_report(report: dict, prefix: str = "") -> str:
    """One ``key=value`` line per property: id, deviation, verdict."""
    lines = []
    for k, (d, ok) in report.items():
        lines.append(f"{prefix}property={k} max_deviation={d:.3e} status={'pass' if ok else 'fail'}")
    return "\n".join(lines)
