"""RF-powered backscatter transmitter: slotted simulator, exact solver, online learner."""

from .env import (
    Action,
    EnvParams,
    InfeasibleActionError,
    SlotOutcome,
    State,
    enumerate_states,
    executable_actions,
    expected_reward,
    feasible_actions,
    state_index,
    step,
    transition_distribution,
)
from .oracle import (
    ChainAssumptionError,
    ExactMetrics,
    NonConvergenceError,
    Policy,
    Solution,
    TransitionModel,
    build_model,
    evaluate_policy_exact,
    solve_optimal,
)

__all__ = [
    "Action",
    "EnvParams",
    "InfeasibleActionError",
    "SlotOutcome",
    "State",
    "enumerate_states",
    "executable_actions",
    "expected_reward",
    "feasible_actions",
    "state_index",
    "step",
    "transition_distribution",
    "ChainAssumptionError",
    "ExactMetrics",
    "NonConvergenceError",
    "Policy",
    "Solution",
    "TransitionModel",
    "build_model",
    "evaluate_policy_exact",
    "solve_optimal",
]
