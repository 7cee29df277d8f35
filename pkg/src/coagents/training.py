"""Learning rules for coagent networks.

``reinforce_update`` applies every coagent's own local-gradient estimate from
one episode. ``actor_critic_step`` is the online actor-critic with eligibility
traces and one state-value critic shared by all coagents; a coagent only adds
to its actor trace on steps where it executed.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .gradients import mc_local_gradient
from .mdp import DEFAULT_HORIZON, TabularMdp, sample_step
from .network import AtomicTrajectory, CoagentNetwork, _draw, atomic_step, policy_tables, run_episode

log = logging.getLogger(__name__)

ALGORITHMS = ("reinforce", "actor_critic_traces")
SCHEDULES = ("constant", "harmonic")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    With the ``harmonic`` schedule every step size is multiplied by
    ``a / (b + k)`` on episode k, which sums to infinity while its squares
    do not.
    """

    algorithm: str = "actor_critic_traces"
    step_sizes: tuple = (0.1,)
    critic_step: float = 0.1
    trace_decay: float = 0.0
    episodes: int = 100
    schedule: str = "constant"
    harmonic_a: float = 1.0
    harmonic_b: float = 1.0
    seed: int = 0
    n_atomic: int = 1
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        object.__setattr__(self, "step_sizes", tuple(float(a) for a in self.step_sizes))
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if any(a < 0 for a in self.step_sizes) or self.critic_step < 0:
            raise ValueError("step sizes must be non-negative")
        if not 0.0 <= self.trace_decay <= 1.0:
            raise ValueError(f"trace_decay must lie in [0, 1], got {self.trace_decay}")
        if self.schedule == "harmonic" and (self.harmonic_a <= 0 or self.harmonic_b <= 0):
            raise ValueError("harmonic schedule needs a > 0 and b > 0")
        if self.episodes < 0 or self.n_atomic < 1 or self.horizon < 1:
            raise ValueError("episodes must be >= 0, n_atomic and horizon >= 1")

    def rate_scale(self, episode: int) -> float:
        if self.schedule == "harmonic":
            return self.harmonic_a / (self.harmonic_b + episode)
        return 1.0

    def coagent_steps(self, m: int) -> tuple:
        if len(self.step_sizes) == 1:
            return self.step_sizes * m
        if len(self.step_sizes) != m:
            raise ValueError(f"need 1 or {m} coagent step sizes, got {len(self.step_sizes)}")
        return self.step_sizes

    def header(self) -> dict:
        return asdict(self)


@dataclass
class CriticState:
    """Shared state-value table and the eligibility traces of the critic and
    of each coagent."""

    values: np.ndarray
    critic_trace: np.ndarray
    actor_traces: list = field(default_factory=list)

    @classmethod
    def fresh(cls, n_states: int, params) -> "CriticState":
        return cls(np.zeros(n_states), np.zeros(n_states), [np.zeros_like(p, dtype=float) for p in params])

    def reset_traces(self):
        self.critic_trace[:] = 0.0
        for z in self.actor_traces:
            z[:] = 0.0


@dataclass(frozen=True)
class StepRecord:
    """One atomic step as seen by the learner; ``terminal`` refers to ``next_state``."""

    state: int
    executions: np.ndarray
    rows: np.ndarray
    outputs: np.ndarray
    reward: float
    next_state: int
    terminal: bool


def reinforce_update(params, trajectory: AtomicTrajectory, step_sizes, network: CoagentNetwork):
    """theta_i += alpha_i * (the episode's local-gradient estimate for coagent i)."""
    steps = tuple(step_sizes) if np.ndim(step_sizes) else (float(step_sizes),) * network.m
    out = []
    for i, p in enumerate(params):
        if steps[i] == 0.0:
            out.append(np.array(p, dtype=float))
            continue
        out.append(np.asarray(p, dtype=float) + steps[i] * mc_local_gradient([trajectory], network, params, i))
    return out


def actor_critic_step(params, critic: CriticState, record: StepRecord, config: TrainConfig,
                      discount: float, scale: float = 1.0, tables=None):
    """One online update; mutates and returns ``(params, critic)``.

    ``discount`` is the per-atomic-step discount. No extra discount-power
    factor multiplies the actor traces.
    """
    tables = policy_tables(params) if tables is None else tables
    lam = config.trace_decay
    v = critic.values
    target = record.reward + (0.0 if record.terminal else discount * v[record.next_state])
    delta = target - v[record.state]
    critic.critic_trace *= discount * lam
    critic.critic_trace[record.state] += 1.0
    v += scale * config.critic_step * delta * critic.critic_trace
    for i, alpha in enumerate(config.coagent_steps(len(params))):
        z = critic.actor_traces[i]
        z *= discount * lam
        if record.executions[i]:
            row, u = record.rows[i], record.outputs[i]
            z[row] -= tables[i][row]
            z[row, u] += 1.0
        if alpha:
            params[i] += scale * alpha * delta * z
    return params, critic


@dataclass
class TrainResult:
    returns: np.ndarray
    params: list
    header: dict
    truncated: int = 0
    snapshots: list = field(default_factory=list)


def _actor_critic_episode(mdp, network, params, critic, config, rng, scale):
    critic.reset_traces()
    n_atomic = config.n_atomic
    discount = mdp.discount ** (1.0 / n_atomic)
    obs_of = mdp.observations
    terminal = mdp.terminal_mask
    s = _draw(mdp.initial_dist, rng)
    u_prev = np.array([_draw(network.init_probs(i), rng) for i in range(network.m)], dtype=np.int64)
    t = env_steps = 0
    total = 0.0
    while not terminal[s]:
        if env_steps >= config.horizon:
            log.info("episode truncated after %d environment steps", config.horizon)
            return total, True
        tables = policy_tables(params)
        e, u, rows = atomic_step(network, params, int(obs_of[s]), u_prev, rng, start=(t == 0), tables=tables)
        if t % n_atomic == 0:
            s_next, r = sample_step(mdp, s, int(u[network.action_coagent]), rng)
            env_steps += 1
        else:
            s_next, r = s, 0.0
        total += r
        rec = StepRecord(s, e, rows, u, r, s_next, bool(terminal[s_next]))
        actor_critic_step(params, critic, rec, config, discount, scale, tables)
        s, u_prev = s_next, u
        t += 1
    return total, False


def train(mdp: TabularMdp, network: CoagentNetwork, config: TrainConfig, params=None,
          snapshot_every: int = 0) -> TrainResult:
    """Train for ``config.episodes`` episodes; returns the per-episode
    undiscounted return, the final parameters and the config header.

    With ``snapshot_every = k`` a copy of the parameters is kept before
    episode 0 and after every k-th episode.
    """
    rng = np.random.default_rng(config.seed)
    params = network.zero_params() if params is None else [np.array(p, dtype=float) for p in params]
    steps = config.coagent_steps(network.m)
    critic = CriticState.fresh(mdp.n_states, params)
    curve = np.zeros(config.episodes)
    truncated = 0
    snapshots = []
    for k in range(config.episodes):
        if snapshot_every and k % snapshot_every == 0:
            snapshots.append([p.copy() for p in params])
        scale = config.rate_scale(k)
        if config.algorithm == "reinforce":
            traj = run_episode(mdp, network, params, config.n_atomic, config.horizon, rng)
            params = reinforce_update(params, traj, [scale * a for a in steps], network)
            curve[k] = traj.env_return()
            truncated += traj.truncated
        else:
            curve[k], cut = _actor_critic_episode(mdp, network, params, critic, config, rng, scale)
            truncated += cut
    if snapshot_every and config.episodes % snapshot_every == 0:
        snapshots.append([p.copy() for p in params])
    return TrainResult(curve, params, config.header(), truncated, snapshots)
