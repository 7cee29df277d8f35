"""Exact, finite-difference and Monte Carlo policy gradients of coagent networks.

The Monte Carlo estimator of a coagent's local gradient is

    sum_t E_t * g^t * G_t * d ln pi_i(X_t, U_t) / d theta_i,

with ``g`` the atomic discount, ``G_t`` the discounted return from atomic
step t and ``E_t`` the coagent's execution bit. Stacking the local estimates
of all coagents estimates the gradient of the objective. The exact gradient
evaluates the same expectation in closed form on the augmented chain.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .mdp import DEFAULT_HORIZON, NumericError, TabularMdp
from .network import AtomicTrajectory, CoagentNetwork, _flat_grid, params_key, policy_tables
from .reduction import ExactSolution, exact_async_objective, solve_augmented

log = logging.getLogger(__name__)

DEFAULT_LADDER = (10**3, 10**4, 10**5, 10**6)


@dataclass
class GradientVector:
    """Flat gradient with the network's per-coagent block layout."""

    values: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        if self.values.shape != (self.offsets[-1],):
            raise ValueError(f"gradient has {self.values.size} entries, layout expects {self.offsets[-1]}")

    @classmethod
    def from_blocks(cls, blocks):
        blocks = [np.asarray(b, dtype=float).ravel() for b in blocks]
        return cls(np.concatenate(blocks), np.concatenate([[0], np.cumsum([b.size for b in blocks])]))

    @property
    def n_blocks(self) -> int:
        return len(self.offsets) - 1

    def block(self, i: int) -> np.ndarray:
        return self.values[self.offsets[i]:self.offsets[i + 1]]

    def blocks(self) -> list[np.ndarray]:
        return [self.block(i) for i in range(self.n_blocks)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["coordinate", "block", "value"])
        for i in range(self.n_blocks):
            for j in range(self.offsets[i], self.offsets[i + 1]):
                w.writerow([j, i, repr(float(self.values[j]))])
        return buf.getvalue()


def _check_on_policy(trajectories, params):
    key = params_key(params)
    for k, traj in enumerate(trajectories):
        if traj.params_key != key:
            raise ValueError(f"trajectory {k} was sampled under different parameters (off-policy batch)")


def mc_local_gradient(trajectories, network: CoagentNetwork, params, i: int) -> np.ndarray:
    """Average local-gradient estimate for coagent ``i``, shaped like its table."""
    trajectories = list(trajectories)
    _check_on_policy(trajectories, params)
    table = np.asarray(params[i], dtype=float)
    probs = policy_tables([table])[0]
    grad = np.zeros_like(table)
    for traj in trajectories:
        weight = traj.atomic_discount ** np.arange(len(traj)) * traj.returns()
        for t in np.flatnonzero(traj.executions[:, i]):
            row, u = traj.rows[t, i], traj.outputs[t, i]
            score = -probs[row]
            score[u] += 1.0
            grad[row] += weight[t] * score
    return grad / max(len(trajectories), 1)


def mc_global_gradient(trajectories, network: CoagentNetwork, params) -> GradientVector:
    trajectories = list(trajectories)
    return GradientVector.from_blocks([mc_local_gradient(trajectories, network, params, i)
                                       for i in range(network.m)])


def exact_gradient(mdp: TabularMdp, network: CoagentNetwork, params,
                   solution: ExactSolution | None = None) -> GradientVector:
    """Exact gradient by the sum form ``sum_x d(x) sum_u dpi_i(x, u) Q(x, u)``
    on the augmented chain, one block per coagent."""
    sol = solve_augmented(mdp, network, params) if solution is None else solution
    aug = sol.aug
    nS, nU, m = mdp.n_states, aug.n_joint, network.m
    # discounted weight of each (state, previous outputs, new outputs, execution bits) outcome
    W = np.einsum("xaue,xau->xue", sol.occupancy, sol.action_values).reshape(nS, nU, nU, 2 ** m)
    bits = _flat_grid((2,) * m)
    cur = [g[None, None, :] for g in _flat_grid(network.arities)]
    prev = [g[None, :, None] for g in _flat_grid(network.arities)]
    obs = mdp.observations
    live = obs >= 0
    obs0 = np.where(live, obs, 0)[:, None, None]
    blocks = []
    for i in range(m):
        table = np.asarray(params[i], dtype=float)
        rows = np.broadcast_to(network.row_index(i, obs0, cur, prev), (nS, nU, nU))
        u_i = np.broadcast_to(cur[i], (nS, nU, nU))
        Wi = W[..., bits[i] == 1].sum(-1)
        M = np.zeros_like(table)
        np.add.at(M, (rows[live].ravel(), u_i[live].ravel()), Wi[live].ravel())
        pi = policy_tables([table])[0]
        blocks.append(M - pi * M.sum(1, keepdims=True))
    return GradientVector.from_blocks(blocks)


def finite_difference_gradient(objective, params, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_j) - f(x - h e_j)) / 2h`` per coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(params, dtype=float).copy()
    grad = np.zeros_like(x)
    for j in np.ndindex(x.shape):
        orig = x[j]
        x[j] = orig + h
        up = objective(x)
        x[j] = orig - h
        down = objective(x)
        x[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"objective is not finite at coordinate {j if len(j) > 1 else j[0]}")
        grad[j] = (up - down) / (2 * h)
    return grad


def exact_objective_of(mdp: TabularMdp, network: CoagentNetwork):
    """J as a function of the flat parameter vector."""
    return lambda vec: exact_async_objective(mdp, network, network.unflatten(vec))


def _cosine(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0, True
    return float(1.0 - a @ b / (na * nb)), False


def cosine_distance(g1, g2, per_coagent: bool = False):
    """``1 - cos`` between two gradients. With ``per_coagent`` returns
    ``(distances, zero_norm_flags)`` per block; a zero-norm block has
    distance 1 and its flag set."""
    if per_coagent:
        if not (isinstance(g1, GradientVector) and isinstance(g2, GradientVector)):
            raise TypeError("per-coagent distances need GradientVector inputs")
        if not np.array_equal(g1.offsets, g2.offsets):
            raise ValueError("gradient layouts differ")
        out = [_cosine(a, b) for a, b in zip(g1.blocks(), g2.blocks())]
        return np.array([d for d, _ in out]), np.array([f for _, f in out])
    a = g1.values if isinstance(g1, GradientVector) else np.asarray(g1, float)
    b = g2.values if isinstance(g2, GradientVector) else np.asarray(g2, float)
    if a.shape != b.shape:
        raise ValueError("gradient layouts differ")
    return _cosine(a, b)[0]


def mean_block_cosine_distance(g1: GradientVector, g2: GradientVector) -> float:
    """Unweighted average over coagents of the per-block cosine distance."""
    return float(cosine_distance(g1, g2, per_coagent=True)[0].mean())


@dataclass
class GradientEstimate:
    """Mean and per-coordinate sample variance of per-episode estimates."""

    n_episodes: int
    mean: GradientVector
    variance: np.ndarray
    mean_return: float
    truncated: int

    def stderr(self) -> np.ndarray:
        return np.sqrt(self.variance / self.n_episodes)

    def z_scores(self, exact: GradientVector) -> np.ndarray:
        se = self.stderr()
        diff = self.mean.values - exact.values
        return np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.inf))


def _draw_rows(cum: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a cumulative-probability matrix."""
    x = rng.random(cum.shape[0])[:, None]
    return np.minimum((x >= cum).sum(1), cum.shape[1] - 1)


def simulate_batch(mdp: TabularMdp, network: CoagentNetwork, params, n: int, rng: np.random.Generator,
                   n_atomic: int = 1, horizon: int = DEFAULT_HORIZON):
    """Run ``n`` episodes side by side and return per-episode gradient
    estimates ``(n, n_params)``, per-episode environment returns and the
    number of truncated episodes."""
    m = network.m
    off = network.offsets
    ar = network.arities
    tables = policy_tables(params)
    cum_tables = [np.cumsum(t, axis=1) for t in tables]
    obs_of = mdp.observations
    term = mdp.terminal_mask
    cumP = np.cumsum(mdp.transition, -1)
    cumR = np.cumsum(mdp.reward_dist, -1)
    support = np.asarray(mdp.reward_support, float)
    atomic_discount = mdp.discount ** (1.0 / n_atomic)

    s = _draw_rows(np.broadcast_to(np.cumsum(mdp.initial_dist), (n, mdp.n_states)), rng)
    u_prev = np.stack([_draw_rows(np.broadcast_to(np.cumsum(network.init_probs(i)), (n, ar[i])), rng)
                       for i in range(m)], axis=1)
    active = np.flatnonzero(~term[s])
    s, u_prev = s[active], u_prev[active]
    env_steps = np.zeros(len(active), dtype=np.int64)
    # g^t G_t = (total discounted reward) - (discounted reward before t), so the
    # estimate is total * S1 - S2 with S1 = sum of scores and S2 = sum of
    # prefix-weighted scores, both accumulated online
    n_params = network.n_params
    S1 = np.zeros((n, n_params))
    S2 = np.zeros((n, n_params))
    prefix = np.zeros(n)
    returns = np.zeros(n)
    t = 0
    truncated = 0
    while active.size:
        k = active.size
        o = obs_of[s]
        cur = u_prev.copy()
        cur_map = {j: cur[:, j] for j in range(m)}
        prev_map = {j: u_prev[:, j] for j in range(m)}
        for i in network.order:
            c = network.coagents[i]
            row = np.broadcast_to(network.row_index(i, o, cur_map, prev_map), (k,))
            if t == 0 and c.idle_at_start:
                p_exec = 0.0
            else:
                p_exec = network.execution_prob(i, row, cur_map)
            ex = rng.random(k) < p_exec
            if ex.any():
                r_ex = row[ex]
                u = _draw_rows(cum_tables[i][r_ex], rng)
                cur[ex, i] = u
                eps = active[ex][:, None]
                cols = (off[i] + r_ex * ar[i])[:, None] + np.arange(ar[i])
                score = -tables[i][r_ex]
                score[np.arange(len(u)), u] += 1.0
                S1[eps, cols] += score
                S2[eps, cols] += prefix[eps] * score
            cur_map[i] = cur[:, i]
        if t % n_atomic == 0:
            a = cur[:, network.action_coagent]
            s_next = _draw_rows(cumP[s, a], rng)
            r = support[_draw_rows(cumR[s, a, s_next], rng)]
            prefix[active] += r * atomic_discount ** t
            returns[active] += r
            s = s_next
            env_steps += 1
        u_prev = cur
        t += 1
        done = term[s]
        cut = ~done & (env_steps >= horizon)
        truncated += int(cut.sum())
        keep = ~done & ~cut
        active, s, u_prev, env_steps = active[keep], s[keep], u_prev[keep], env_steps[keep]
    if truncated:
        log.info("%d of %d episodes truncated after %d environment steps", truncated, n, horizon)
    return prefix[:, None] * S1 - S2, returns, truncated


def estimate_gradient(mdp: TabularMdp, network: CoagentNetwork, params, n_episodes: int, seed: int,
                      checkpoints=None, chunk: int = 10_000, n_atomic: int = 1,
                      horizon: int = DEFAULT_HORIZON) -> list[GradientEstimate]:
    """Monte Carlo gradient estimates at nested batch sizes.

    Episodes are simulated in chunks; chunk ``[a, b)`` draws from a generator
    seeded with ``(seed, a)``, so estimates are reproducible from the seed and
    each checkpoint's estimate is a prefix of the next one's.
    """
    checkpoints = sorted(set([n_episodes] if checkpoints is None else checkpoints))
    if checkpoints[-1] > n_episodes or checkpoints[0] < 2:
        raise ValueError("checkpoints must lie in [2, n_episodes]")
    bounds = sorted(set(checkpoints) | set(range(chunk, checkpoints[-1], chunk)))
    total = np.zeros(network.n_params)
    total_sq = np.zeros(network.n_params)
    ret_sum = 0.0
    trunc = 0
    out = []
    start = 0
    for stop in bounds:
        rng = np.random.default_rng([seed, start])
        g, ret, tr = simulate_batch(mdp, network, params, stop - start, rng, n_atomic, horizon)
        total += g.sum(0)
        total_sq += (g * g).sum(0)
        ret_sum += ret.sum()
        trunc += tr
        start = stop
        if stop in checkpoints:
            mean = total / stop
            var = (total_sq - stop * mean * mean) / (stop - 1)
            out.append(GradientEstimate(stop, GradientVector(mean, network.offsets), np.maximum(var, 0.0),
                                        ret_sum / stop, trunc))
    return out
