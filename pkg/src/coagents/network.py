"""Tabular-softmax coagent networks and their atomic-time-step dynamics.

A coagent's local state is the tuple (observation, feedforward input values,
recurrent input values), flattened to a table row by a mixed-radix encoding
with the observation most significant, then the feedforward inputs and then
the recurrent inputs, each in declared order. Recurrent inputs read the
outputs of the previous atomic step.

At an atomic step every coagent, in topological order, first draws an
execution bit from its execution function and then either samples a fresh
output from its softmax policy (bit 1) or repeats its previous output
(bit 0). Terminal (absorbing) states present no observation; there every
coagent executes and samples uniformly, so nothing about them depends on the
parameters.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .mdp import DEFAULT_HORIZON, TabularMdp, check_size, sample_step

log = logging.getLogger(__name__)


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Execution:
    """Execution function: probability that a coagent executes on a step.

    ``kind`` is one of ``always``, ``bernoulli`` (fixed ``prob``), ``table``
    (per local-state row probabilities) or ``gated`` (executes iff the
    ``source`` coagent's output on the current step equals 1).
    """

    kind: str = "always"
    prob: float = 1.0
    table: tuple | None = None
    source: int | None = None

    def __post_init__(self):
        if self.kind not in ("always", "bernoulli", "table", "gated"):
            raise ValueError(f"unknown execution kind {self.kind!r}")
        if self.kind == "bernoulli" and not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"execution probability {self.prob} outside [0, 1]")
        if self.kind == "table":
            if self.table is None or any(not 0.0 <= p <= 1.0 for p in self.table):
                raise ValueError("table execution needs probabilities in [0, 1]")
            object.__setattr__(self, "table", tuple(float(p) for p in self.table))
        if self.kind == "gated" and self.source is None:
            raise ValueError("gated execution needs a source coagent")

    @classmethod
    def always(cls):
        return cls("always")

    @classmethod
    def bernoulli(cls, p: float):
        return cls("bernoulli", prob=float(p))

    @classmethod
    def from_table(cls, probs):
        return cls("table", table=tuple(probs))

    @classmethod
    def gated(cls, source: int):
        return cls("gated", source=int(source))

    def to_dict(self) -> dict:
        if self.kind == "bernoulli":
            return {"kind": "bernoulli", "prob": self.prob}
        if self.kind == "table":
            return {"kind": "table", "table": list(self.table)}
        if self.kind == "gated":
            return {"kind": "gated", "source": self.source}
        return {"kind": "always"}

    @classmethod
    def from_dict(cls, d: dict):
        return cls(d.get("kind", "always"), prob=float(d.get("prob", 1.0)),
                   table=d.get("table"), source=d.get("source"))


@dataclass(frozen=True)
class CoagentSpec:
    """One coagent. ``init_dist`` is the law of its output before step 0
    (uniform when omitted). With ``idle_at_start`` the coagent never executes
    on atomic step 0 and so emits a draw from ``init_dist`` there."""

    output_arity: int
    uses_state: bool = True
    feedforward_inputs: tuple = ()
    recurrent_inputs: tuple = ()
    execution: Execution = field(default_factory=Execution)
    init_dist: tuple | None = None
    idle_at_start: bool = False
    name: str = ""

    def __post_init__(self):
        if self.output_arity < 1:
            raise ValueError("output_arity must be at least 1")
        object.__setattr__(self, "feedforward_inputs", tuple(int(j) for j in self.feedforward_inputs))
        object.__setattr__(self, "recurrent_inputs", tuple(int(j) for j in self.recurrent_inputs))
        if self.init_dist is not None:
            d = tuple(float(p) for p in self.init_dist)
            if len(d) != self.output_arity or min(d) < 0 or abs(sum(d) - 1) > 1e-12:
                raise ValueError("init_dist must be a probability vector over the outputs")
            object.__setattr__(self, "init_dist", d)

    def to_dict(self) -> dict:
        d = {"output_arity": self.output_arity, "uses_state": self.uses_state,
             "feedforward_inputs": list(self.feedforward_inputs),
             "recurrent_inputs": list(self.recurrent_inputs),
             "execution": self.execution.to_dict()}
        if self.init_dist is not None:
            d["init_dist"] = list(self.init_dist)
        if self.idle_at_start:
            d["idle_at_start"] = True
        if self.name:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict):
        return cls(output_arity=int(d["output_arity"]), uses_state=bool(d.get("uses_state", True)),
                   feedforward_inputs=tuple(d.get("feedforward_inputs", ())),
                   recurrent_inputs=tuple(d.get("recurrent_inputs", ())),
                   execution=Execution.from_dict(d.get("execution", {})),
                   init_dist=d.get("init_dist"), idle_at_start=bool(d.get("idle_at_start", False)),
                   name=d.get("name", ""))


@dataclass(frozen=True)
class LocalState:
    obs: int | None
    feedforward_values: tuple
    recurrent_values: tuple
    index: int


def validate_topology(coagents) -> list[int]:
    """Execution order consistent with feedforward edges (recurrent edges exempt)."""
    m = len(coagents)
    for i, c in enumerate(coagents):
        for j in c.feedforward_inputs + c.recurrent_inputs:
            if not 0 <= j < m:
                raise TopologyError(f"coagent {i} reads unknown coagent {j}")
        if i in c.feedforward_inputs:
            raise TopologyError(f"feedforward cycle: [{i}, {i}]")
    indegree = [len(set(c.feedforward_inputs)) for c in coagents]
    children = {i: sorted({k for k, c in enumerate(coagents) if i in c.feedforward_inputs}) for i in range(m)}
    ready = sorted(i for i in range(m) if indegree[i] == 0)
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for k in children[i]:
            indegree[k] -= 1
            if indegree[k] == 0:
                ready.append(k)
        ready.sort()
    if len(order) < m:
        raise TopologyError(f"feedforward cycle: {_find_cycle(coagents, set(range(m)) - set(order))}")
    return order


def _find_cycle(coagents, nodes) -> list[int]:
    # walk backwards along feedforward edges inside the unresolved set until a node repeats
    node = min(nodes)
    path = []
    while node not in path:
        path.append(node)
        node = next(j for j in coagents[node].feedforward_inputs if j in nodes)
    cycle = path[path.index(node):]
    return list(reversed(cycle)) + [cycle[-1]]


class CoagentNetwork:
    """An acyclic-feedforward (possibly recurrent) network of softmax coagents.

    Parameters are kept outside the network as a list of tables, one
    ``(n_rows(i), output_arity)`` array of logits per coagent.
    """

    def __init__(self, coagents, n_observations: int, action_coagent: int | None = None):
        self.coagents = tuple(coagents)
        self.n_observations = int(n_observations)
        self.m = len(self.coagents)
        if self.m == 0:
            raise ValueError("a network needs at least one coagent")
        self.action_coagent = self.m - 1 if action_coagent is None else int(action_coagent)
        self.order = validate_topology(self.coagents)
        self._position = {i: k for k, i in enumerate(self.order)}
        for i, c in enumerate(self.coagents):
            ex = c.execution
            if ex.kind == "gated":
                if ex.source not in c.feedforward_inputs:
                    raise TopologyError(f"coagent {i} is gated on {ex.source}, which is not a feedforward input")
                if self.coagents[ex.source].output_arity < 2:
                    raise TopologyError(f"gate source {ex.source} cannot output 1")
            if ex.kind == "table" and len(ex.table) != self.n_rows(i):
                raise ValueError(f"coagent {i}: execution table has {len(ex.table)} entries, "
                                 f"expected {self.n_rows(i)}")

    @property
    def arities(self) -> tuple:
        return tuple(c.output_arity for c in self.coagents)

    @property
    def n_actions(self) -> int:
        return self.coagents[self.action_coagent].output_arity

    @property
    def is_synchronous(self) -> bool:
        return all(c.execution.kind == "always" and not c.recurrent_inputs and not c.idle_at_start
                   for c in self.coagents)

    def radices(self, i: int) -> list[int]:
        c = self.coagents[i]
        r = [self.n_observations] if c.uses_state else []
        r += [self.coagents[j].output_arity for j in c.feedforward_inputs]
        r += [self.coagents[j].output_arity for j in c.recurrent_inputs]
        return r

    def n_rows(self, i: int) -> int:
        return int(np.prod(self.radices(i), dtype=np.int64))

    @property
    def param_shapes(self) -> list[tuple]:
        return [(self.n_rows(i), c.output_arity) for i, c in enumerate(self.coagents)]

    @property
    def block_sizes(self) -> list[int]:
        return [r * a for r, a in self.param_shapes]

    @property
    def n_params(self) -> int:
        return sum(self.block_sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.block_sizes)])

    def init_probs(self, i: int) -> np.ndarray:
        c = self.coagents[i]
        if c.init_dist is None:
            return np.full(c.output_arity, 1.0 / c.output_arity)
        return np.array(c.init_dist)

    def zero_params(self) -> list[np.ndarray]:
        return [np.zeros(shape) for shape in self.param_shapes]

    def random_params(self, rng: np.random.Generator, scale: float = 1.0) -> list[np.ndarray]:
        return [scale * rng.standard_normal(shape) for shape in self.param_shapes]

    def flatten(self, params) -> np.ndarray:
        return np.concatenate([np.asarray(p, dtype=float).ravel() for p in params])

    def unflatten(self, vec) -> list[np.ndarray]:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        off = self.offsets
        return [vec[off[i]:off[i + 1]].reshape(shape) for i, shape in enumerate(self.param_shapes)]

    def row_index(self, i: int, obs, current, previous):
        """Flattened local-state row. ``current``/``previous`` map coagent id to
        output values (scalars or broadcastable arrays)."""
        c = self.coagents[i]
        row = 0
        if c.uses_state:
            row = obs
        for j in c.feedforward_inputs:
            row = row * self.coagents[j].output_arity + current[j]
        for j in c.recurrent_inputs:
            row = row * self.coagents[j].output_arity + previous[j]
        return row

    def encode(self, i: int, obs, feedforward_values=(), recurrent_values=()) -> int:
        c = self.coagents[i]
        digits = ([obs] if c.uses_state else []) + list(feedforward_values) + list(recurrent_values)
        if len(digits) != len(self.radices(i)):
            raise ValueError(f"coagent {i} expects {len(self.radices(i))} local-state digits")
        if not digits:
            return 0
        return int(np.ravel_multi_index(tuple(digits), tuple(self.radices(i))))

    def decode(self, i: int, index: int) -> LocalState:
        c = self.coagents[i]
        radices = self.radices(i)
        if not 0 <= index < self.n_rows(i):
            raise IndexError(f"row {index} out of range for coagent {i}")
        digits = [int(d) for d in np.unravel_index(index, radices)] if radices else []
        obs = digits.pop(0) if c.uses_state else None
        nff = len(c.feedforward_inputs)
        return LocalState(obs, tuple(digits[:nff]), tuple(digits[nff:]), int(index))

    def execution_prob(self, i: int, row, current):
        ex = self.coagents[i].execution
        if ex.kind == "always":
            return 1.0
        if ex.kind == "bernoulli":
            return ex.prob
        if ex.kind == "table":
            return np.asarray(ex.table)[row]
        return (np.asarray(current[ex.source]) == 1).astype(float)

    def to_dict(self) -> dict:
        return {"coagents": [c.to_dict() for c in self.coagents],
                "action_coagent": self.action_coagent}

    @classmethod
    def from_dict(cls, d: dict, n_observations: int):
        return cls([CoagentSpec.from_dict(c) for c in d["coagents"]], n_observations,
                   d.get("action_coagent"))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def policy_tables(params) -> list[np.ndarray]:
    return [softmax(p, axis=1) for p in params]


def coagent_policy(table: np.ndarray, row: int) -> np.ndarray:
    return softmax(table[row])


def logprob_gradient(table: np.ndarray, row: int, u: int) -> np.ndarray:
    """d ln pi(row, u) / d table: zero outside ``row``, ``onehot(u) - softmax`` inside."""
    grad = np.zeros_like(table, dtype=float)
    grad[row] = -softmax(table[row])
    grad[row, u] += 1.0
    return grad


def params_key(params) -> str:
    h = hashlib.sha1()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype=float).tobytes())
    return h.hexdigest()


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    idx = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(idx, len(p) - 1)


def atomic_step(network: CoagentNetwork, params, obs: int, u_prev, rng: np.random.Generator,
                start: bool = False, tables=None):
    """One atomic step. ``obs`` is the coagents' observation (-1 at terminal
    states). Returns (execution bits, outputs, local-state rows)."""
    m = network.m
    if len(u_prev) != m:
        raise ValueError(f"u_prev must have {m} entries")
    tables = policy_tables(params) if tables is None else tables
    executions = np.zeros(m, dtype=bool)
    outputs = np.array(u_prev, dtype=np.int64)
    rows = np.zeros(m, dtype=np.int64)
    for i in network.order:
        c = network.coagents[i]
        if obs < 0:
            rows[i] = 0
            p_exec = 0.0 if (start and c.idle_at_start) else 1.0
            probs = np.full(c.output_arity, 1.0 / c.output_arity)
        else:
            rows[i] = network.row_index(i, obs, outputs, u_prev)
            p_exec = 0.0 if (start and c.idle_at_start) else float(network.execution_prob(i, rows[i], outputs))
            probs = tables[i][rows[i]]
        # a degenerate probability still consumes one uniform so streams stay aligned
        executions[i] = rng.random() < p_exec
        if executions[i]:
            outputs[i] = _draw(probs, rng)
    return executions, outputs, rows


@dataclass
class AtomicTrajectory:
    """Per-atomic-step record of one episode.

    ``env_actions`` is -1 on atomic steps where the environment does not
    update; ``rewards`` is 0 there.
    """

    states: np.ndarray
    executions: np.ndarray
    outputs: np.ndarray
    rows: np.ndarray
    env_actions: np.ndarray
    rewards: np.ndarray
    initial_outputs: np.ndarray
    n_atomic: int
    atomic_discount: float
    truncated: bool
    params_key: str

    def __len__(self):
        return len(self.states)

    def returns(self) -> np.ndarray:
        """G_t = sum_k atomic_discount^k R_{t+k}, by one backward pass."""
        g = np.zeros(len(self.rewards))
        acc = 0.0
        for t in range(len(self.rewards) - 1, -1, -1):
            acc = self.rewards[t] + self.atomic_discount * acc
            g[t] = acc
        return g

    def env_return(self) -> float:
        return float(self.rewards.sum())

    def to_jsonl(self) -> str:
        lines = []
        for t in range(len(self.states)):
            lines.append(json.dumps({
                "t": t, "s": int(self.states[t]),
                "E": [int(e) for e in self.executions[t]],
                "U": [int(u) for u in self.outputs[t]],
                "a": int(self.env_actions[t]), "r": float(self.rewards[t])}))
        return "\n".join(lines) + ("\n" if lines else "")


def run_episode(mdp: TabularMdp, network: CoagentNetwork, params, n_atomic: int = 1,
                horizon: int = DEFAULT_HORIZON, rng: np.random.Generator | None = None) -> AtomicTrajectory:
    """Sample one episode. The environment updates on atomic steps ``t`` with
    ``t % n_atomic == 0``, using the action coagent's output at that step."""
    if n_atomic < 1:
        raise ValueError("n_atomic must be at least 1")
    if network.n_actions != mdp.n_actions:
        raise ValueError(f"action coagent has {network.n_actions} outputs, MDP has {mdp.n_actions} actions")
    rng = np.random.default_rng() if rng is None else rng
    tables = policy_tables(params)
    obs_of = mdp.observations
    terminal = mdp.terminal_mask
    s = _draw(mdp.initial_dist, rng)
    u_prev = np.array([_draw(network.init_probs(i), rng) for i in range(network.m)], dtype=np.int64)
    initial = u_prev.copy()
    rec = {k: [] for k in ("states", "executions", "outputs", "rows", "env_actions", "rewards")}
    t = env_steps = 0
    truncated = False
    while not terminal[s]:
        if env_steps >= horizon:
            truncated = True
            log.info("episode truncated after %d environment steps", horizon)
            break
        e, u, rows = atomic_step(network, params, int(obs_of[s]), u_prev, rng, start=(t == 0), tables=tables)
        rec["states"].append(s)
        rec["executions"].append(e)
        rec["outputs"].append(u)
        rec["rows"].append(rows)
        if t % n_atomic == 0:
            a = int(u[network.action_coagent])
            s, r = sample_step(mdp, s, a, rng)
            env_steps += 1
        else:
            a, r = -1, 0.0
        rec["env_actions"].append(a)
        rec["rewards"].append(r)
        u_prev = u
        t += 1
    m = network.m
    return AtomicTrajectory(
        states=np.array(rec["states"], dtype=np.int64),
        executions=np.array(rec["executions"], dtype=bool).reshape(-1, m),
        outputs=np.array(rec["outputs"], dtype=np.int64).reshape(-1, m),
        rows=np.array(rec["rows"], dtype=np.int64).reshape(-1, m),
        env_actions=np.array(rec["env_actions"], dtype=np.int64),
        rewards=np.array(rec["rewards"], dtype=float),
        initial_outputs=initial, n_atomic=n_atomic,
        atomic_discount=mdp.discount ** (1.0 / n_atomic),
        truncated=truncated, params_key=params_key(params))


def _flat_grid(shape) -> list[np.ndarray]:
    n = int(np.prod(shape, dtype=np.int64))
    return [g.astype(np.int64) for g in np.unravel_index(np.arange(n), shape)] if shape else []


def transition_law(network: CoagentNetwork, params, observations, start: bool = False) -> np.ndarray:
    """Exact law ``Pr(E_t = e, U_t = u' | S_t = s, U_{t-1} = u)``.

    Returned with shape ``(n_states, n_joint, 2**m, n_joint)`` indexed
    ``[s, u, e, u']``; joint outputs and execution vectors are flattened in
    C order with coagent 0 most significant.
    """
    observations = np.asarray(observations)
    ar = network.arities
    m = network.m
    nS, nU, nE = len(observations), int(np.prod(ar)), 2 ** m
    check_size("transition law", nS * nU * nE * nU, 10**7)
    prev = [g[None, :, None, None] for g in _flat_grid(ar)]
    cur = [g[None, None, None, :] for g in _flat_grid(ar)]
    bits = [g[None, None, :, None] for g in _flat_grid((2,) * m)]
    obs = observations[:, None, None, None]
    term = obs < 0
    obs0 = np.where(term, 0, obs)
    tables = policy_tables(params)
    law = np.ones((nS, nU, nE, nU))
    for i, c in enumerate(network.coagents):
        row = network.row_index(i, obs0, cur, prev)
        if start and c.idle_at_start:
            p_exec = np.zeros(1)
        else:
            p_exec = np.where(term, 1.0, network.execution_prob(i, row, cur))
        pi = np.where(term, 1.0 / c.output_arity, tables[i][row, cur[i]])
        factor = np.where(bits[i] == 1, p_exec * pi, (1.0 - p_exec) * (cur[i] == prev[i]))
        law = law * factor
    return law


def state_action_policy(network: CoagentNetwork, params, observations) -> np.ndarray:
    """``Pr(A_t = a | S_t = s)`` for a synchronous feedforward network."""
    if not network.is_synchronous:
        raise TopologyError("state_action_policy needs a synchronous network without recurrent inputs")
    law = transition_law(network, params, observations)[:, 0].sum(axis=1)
    act = _flat_grid(network.arities)[network.action_coagent]
    pol = np.zeros((law.shape[0], network.n_actions))
    for a in range(network.n_actions):
        pol[:, a] = law[:, act == a].sum(axis=1)
    return pol
