"""Finite MDPs, the gridworld, and exact (linear-solve) policy evaluation.

Every exact quantity in the package bottoms out in :func:`solve_chain`, which
solves ``v = r + gamma * K v`` over the non-absorbing states of a Markov
chain. Absorbing (terminal) states carry value zero by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

DEFAULT_HORIZON = 1000
ACTIONS = ("up", "down", "left", "right")
_MOVES = {0: (0, -1), 1: (0, 1), 2: (-1, 0), 3: (1, 0)}


class NumericError(RuntimeError):
    """A numerical failure: singular solve, size overflow."""


class SingularSystemError(NumericError):
    pass


class SizeOverflowError(NumericError):
    pass


def check_size(what: str, size: int, limit: int = 10**6) -> None:
    if size > limit:
        raise SizeOverflowError(f"{what} has {size} entries, limit is {limit}")


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """A finite MDP with distributional rewards over a finite support.

    ``transition[s, a, s']`` and ``reward_dist[s, a, s', k]`` (probability of
    ``reward_support[k]``) follow the usual conventions. Terminal states must
    be zero-reward self-loops.
    """

    transition: np.ndarray
    reward_dist: np.ndarray
    reward_support: np.ndarray
    initial_dist: np.ndarray
    discount: float
    terminal_states: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        for name in ("transition", "reward_dist", "reward_support", "initial_dist"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "terminal_states", frozenset(int(s) for s in self.terminal_states))
        self._validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def _validate(self):
        nS, nA = self.n_states, self.n_actions
        nR = len(self.reward_support)
        if self.transition.shape != (nS, nA, nS):
            raise ValueError(f"transition must have shape (S, A, S), got {self.transition.shape}")
        if self.reward_dist.shape != (nS, nA, nS, nR):
            raise ValueError(f"reward_dist must have shape {(nS, nA, nS, nR)}, got {self.reward_dist.shape}")
        if self.initial_dist.shape != (nS,):
            raise ValueError("initial_dist must be a vector over states")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError(f"discount must lie in [0, 1], got {self.discount}")
        if (self.transition < 0).any() or np.abs(self.transition.sum(-1) - 1).max() > 1e-12:
            raise ValueError("transition rows must be probability vectors")
        if (self.reward_dist < 0).any() or np.abs(self.reward_dist.sum(-1) - 1).max() > 1e-12:
            raise ValueError("reward_dist rows must be probability vectors")
        if (self.initial_dist < 0).any() or abs(self.initial_dist.sum() - 1) > 1e-12:
            raise ValueError("initial_dist must be a probability vector")
        zero = np.isclose(self.reward_support, 0.0)
        for s in self.terminal_states:
            if not 0 <= s < nS:
                raise ValueError(f"terminal state {s} out of range")
            if not np.all(self.transition[s, :, s] == 1.0):
                raise ValueError(f"terminal state {s} must self-loop with probability 1")
            if not np.allclose(self.reward_dist[s, :, s][:, zero].sum(-1), 1.0, atol=1e-12):
                raise ValueError(f"terminal state {s} must pay reward 0")
        if self.discount == 1.0:
            self._check_absorbing()

    def _check_absorbing(self):
        if not self.terminal_states:
            raise ValueError("discount = 1 requires at least one terminal state")
        uniform = np.full((self.n_states, self.n_actions), 1.0 / self.n_actions)
        transient = ~self.terminal_mask
        k = self.policy_kernel(uniform)[np.ix_(transient, transient)]
        radius = max(np.abs(np.linalg.eigvals(k))) if k.size else 0.0
        if radius >= 1 - 1e-9:
            raise ValueError(f"discount = 1 but the chain is not absorbing (spectral radius {radius:.12f})")

    @cached_property
    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminal_states)] = True
        mask.setflags(write=False)
        return mask

    @cached_property
    def observations(self) -> np.ndarray:
        """Row index each state presents to coagents; -1 for terminal states."""
        obs = np.full(self.n_states, -1, dtype=np.int64)
        live = ~self.terminal_mask
        obs[live] = np.arange(live.sum())
        obs.setflags(write=False)
        return obs

    @property
    def n_observations(self) -> int:
        return int((~self.terminal_mask).sum())

    @cached_property
    def mean_reward(self) -> np.ndarray:
        """Expected reward given (s, a, s')."""
        return self.reward_dist @ self.reward_support

    @cached_property
    def expected_reward(self) -> np.ndarray:
        """Expected reward given (s, a)."""
        return np.einsum("sat,sat->sa", self.transition, self.mean_reward)

    def policy_kernel(self, policy: np.ndarray) -> np.ndarray:
        return np.einsum("sa,sat->st", policy, self.transition)

    def policy_reward(self, policy: np.ndarray) -> np.ndarray:
        return np.einsum("sa,sa->s", policy, self.expected_reward)


@dataclass(frozen=True)
class EpisodeStep:
    state: int
    action: int
    reward: float


def build_gridworld(width: int, height: int, start=(0, 0), goal=None,
                    step_reward: float = -1.0, goal_reward: float = 0.0,
                    discount: float = 1.0) -> TabularMdp:
    """Deterministic four-action gridworld with an absorbing terminal state.

    Cells are ``(x, y)`` pairs, indexed ``y * width + x``; the terminal is the
    last state. Actions are up/down/left/right; moves off the grid leave the
    agent in place. Every move pays ``step_reward``; a move into ``goal``
    additionally pays ``goal_reward`` and ends the episode.
    """
    if goal is None:
        goal = (width - 1, height - 1)
    start, goal = tuple(start), tuple(goal)
    if width < 1 or height < 1 or width * height < 2:
        raise ValueError("gridworld needs at least two cells")
    for name, (x, y) in (("start", start), ("goal", goal)):
        if not (0 <= x < width and 0 <= y < height):
            raise ValueError(f"{name} cell {(x, y)} is outside the {width}x{height} grid")
    if start == goal:
        raise ValueError("start and goal must differ")

    n_cells = width * height
    terminal = n_cells
    goal_idx = goal[1] * width + goal[0]
    support = np.unique([0.0, step_reward, step_reward + goal_reward])
    k_step = int(np.searchsorted(support, step_reward))
    k_goal = int(np.searchsorted(support, step_reward + goal_reward))
    k_zero = int(np.searchsorted(support, 0.0))

    nS, nA = n_cells + 1, len(ACTIONS)
    P = np.zeros((nS, nA, nS))
    R = np.zeros((nS, nA, nS, len(support)))
    R[..., k_step] = 1.0  # law for impossible (s, a, s') triples, kept stochastic
    for s in range(n_cells):
        x, y = s % width, s // width
        for a, (dx, dy) in _MOVES.items():
            nx, ny = x + dx, y + dy
            if not (0 <= nx < width and 0 <= ny < height):
                nx, ny = x, y
            nxt = ny * width + nx
            if nxt == goal_idx or s == goal_idx:
                P[s, a, terminal] = 1.0
                R[s, a, terminal] = 0.0
                R[s, a, terminal, k_goal] = 1.0
            else:
                P[s, a, nxt] = 1.0
    P[terminal, :, terminal] = 1.0
    R[terminal] = 0.0
    R[terminal, :, :, k_zero] = 1.0
    d0 = np.zeros(nS)
    d0[start[1] * width + start[0]] = 1.0
    return TabularMdp(P, R, support, d0, discount, frozenset({terminal}))


def _categorical(p: np.ndarray, rng: np.random.Generator) -> int:
    idx = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(idx, len(p) - 1)


def sample_step(mdp: TabularMdp, s: int, a: int, rng: np.random.Generator) -> tuple[int, float]:
    if not (0 <= s < mdp.n_states and 0 <= a < mdp.n_actions):
        raise IndexError(f"invalid (state, action) = ({s}, {a})")
    s_next = _categorical(mdp.transition[s, a], rng)
    k = _categorical(mdp.reward_dist[s, a, s_next], rng)
    return s_next, float(mdp.reward_support[k])


def _closed_classes(kernel: np.ndarray, transient: np.ndarray) -> list[list[int]]:
    idx = np.flatnonzero(transient)
    sub = kernel[np.ix_(idx, idx)]
    n, labels = connected_components(sub > 0, directed=True, connection="strong")
    closed = []
    for c in range(n):
        members = np.flatnonzero(labels == c)
        if np.allclose(sub[np.ix_(members, members)].sum(1), 1.0, atol=1e-12):
            closed.append([int(i) for i in idx[members]])
    return closed


def solve_chain(kernel: np.ndarray, reward: np.ndarray, discount: float,
                terminal: np.ndarray | None = None) -> np.ndarray:
    """Solve ``v = reward + discount * kernel @ v`` with ``v = 0`` on terminals."""
    n = kernel.shape[0]
    transient = np.ones(n, dtype=bool) if terminal is None else ~np.asarray(terminal, dtype=bool)
    if discount >= 1.0:
        closed = _closed_classes(kernel, transient)
        if closed:
            raise SingularSystemError(
                f"undiscounted chain never terminates from recurrent class {closed[0]}")
    v = np.zeros(n)
    idx = np.flatnonzero(transient)
    a = np.eye(len(idx)) - discount * kernel[np.ix_(idx, idx)]
    v[idx] = np.linalg.solve(a, reward[idx])
    return v


def discounted_occupancy(kernel: np.ndarray, initial: np.ndarray, discount: float,
                         terminal: np.ndarray | None = None) -> np.ndarray:
    """``sum_t discount^t Pr(X_t = x)`` over non-terminal states (0 on terminals)."""
    n = kernel.shape[0]
    transient = np.ones(n, dtype=bool) if terminal is None else ~np.asarray(terminal, dtype=bool)
    if discount >= 1.0:
        closed = _closed_classes(kernel, transient)
        if closed:
            raise SingularSystemError(
                f"undiscounted chain never terminates from recurrent class {closed[0]}")
    d = np.zeros(n)
    idx = np.flatnonzero(transient)
    a = np.eye(len(idx)) - discount * kernel[np.ix_(idx, idx)]
    d[idx] = np.linalg.solve(a.T, initial[idx])
    return d


def exact_state_values(mdp, policy: np.ndarray) -> np.ndarray:
    """Exact ``v^pi`` by direct linear solve. Works for any object exposing
    ``policy_kernel``, ``policy_reward``, ``discount`` and ``terminal_mask``."""
    policy = np.asarray(policy, dtype=float)
    if np.abs(policy.sum(-1) - 1).max() > 1e-9:
        raise ValueError("policy rows must sum to 1")
    return solve_chain(mdp.policy_kernel(policy), mdp.policy_reward(policy),
                       mdp.discount, mdp.terminal_mask)


def exact_objective(mdp, policy: np.ndarray) -> float:
    return float(mdp.initial_dist @ exact_state_values(mdp, policy))


def bellman_residual(mdp, policy: np.ndarray, values: np.ndarray) -> float:
    rhs = mdp.policy_reward(policy) + mdp.discount * mdp.policy_kernel(policy) @ values
    live = ~mdp.terminal_mask
    return float(np.abs(values - rhs)[live].max(initial=0.0))


def sample_episode(mdp: TabularMdp, policy: np.ndarray, rng: np.random.Generator,
                   horizon: int = DEFAULT_HORIZON) -> tuple[list[EpisodeStep], bool]:
    """Roll out a flat state-conditioned policy. Returns (steps, truncated)."""
    s = _categorical(mdp.initial_dist, rng)
    steps = []
    terminal = mdp.terminal_mask
    while not terminal[s]:
        if len(steps) >= horizon:
            log.info("episode truncated at horizon %d", horizon)
            return steps, True
        a = _categorical(policy[s], rng)
        s_next, r = sample_step(mdp, s, a, rng)
        steps.append(EpisodeStep(s, a, r))
        s = s_next
    return steps, False
