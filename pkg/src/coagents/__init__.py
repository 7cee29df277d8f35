"""Coagent networks: exact and sampled policy gradients for synchronous and
asynchronous networks of softmax coagents on tabular MDPs."""

from .mdp import (NumericError, SingularSystemError, SizeOverflowError, TabularMdp, build_gridworld,
                  exact_objective, exact_state_values, sample_episode)
from .network import (AtomicTrajectory, CoagentNetwork, CoagentSpec, Execution, TopologyError, atomic_step,
                      run_episode, transition_law)

__all__ = [
    "AtomicTrajectory", "CoagentNetwork", "CoagentSpec", "Execution", "NumericError", "SingularSystemError",
    "SizeOverflowError", "TabularMdp", "TopologyError", "atomic_step", "build_gridworld", "exact_objective",
    "exact_state_values", "run_episode", "sample_episode", "transition_law",
]
