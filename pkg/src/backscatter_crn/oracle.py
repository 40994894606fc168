"""Exact average-reward analysis of the transmitter MDP.

Builds the full transition model from the environment's slot distribution,
computes the gain-optimal policy by relative value iteration, and evaluates
any fixed stationary policy exactly through its balance equations. Dense
linear algebra is used for the stationary solves, which is comfortable at
the few-hundred-state sizes this model takes on a desk machine.

Everything here is a pure function over immutable inputs; evaluating many
policies in parallel is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from . import env
from .env import Action, EnvParams, State

N_ACTIONS = 4

# Span-seminorm stopping tolerance and sweep cap for the optimal solve.
DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITERS = 100_000


class NonConvergenceError(RuntimeError):
    """Value iteration ran out of sweeps; carries the last span seminorm."""

    def __init__(self, iters: int, span: float):
        super().__init__(f"no convergence after {iters} sweeps, span={span:.3e}")
        self.iters = iters
        self.span = span


class ChainAssumptionError(RuntimeError):
    """The induced chain violates the recurrence assumption.

    The analysis needs a single aperiodic recurrent class (there must be a
    recurrent state the process keeps revisiting); the message names the
    specific property that failed.
    """


@dataclass
class TransitionModel:
    """Tabular MDP: per (state, action) sparse transition rows and expected rewards.

    Rows are stored for every executable pair, padded to the maximal
    support of 8 successors so that sweeps are plain numpy gathers:
    ``next_idx[s, k, :]`` and ``next_p[s, k, :]`` describe action index k
    (action number k+1) at state s. ``feasible_mask`` marks the decision
    sets the solver optimizes over; ``executable_mask`` additionally allows
    idling everywhere, which fixed benchmark policies use.
    """

    params: EnvParams
    states: list[State]
    next_idx: np.ndarray  # (n, 4, 8) int32
    next_p: np.ndarray  # (n, 4, 8) float64, zero-padded
    rewards: np.ndarray  # (n, 4) float64, 0 where not executable
    feasible_mask: np.ndarray  # (n, 4) bool
    executable_mask: np.ndarray  # (n, 4) bool

    @property
    def n_states(self) -> int:
        return len(self.states)

    def row(self, s_idx: int, a: Action) -> tuple[np.ndarray, np.ndarray]:
        """Sparse transition row for an executable pair: (successor indices, probabilities)."""
        if not self.executable_mask[s_idx, a - 1]:
            raise env.InfeasibleActionError(
                f"action {Action(a).name} not executable in state {self.states[s_idx]}"
            )
        p = self.next_p[s_idx, a - 1]
        keep = p > 0.0
        return self.next_idx[s_idx, a - 1][keep], p[keep]

    def reward(self, s_idx: int, a: Action) -> float:
        if not self.executable_mask[s_idx, a - 1]:
            raise env.InfeasibleActionError(
                f"action {Action(a).name} not executable in state {self.states[s_idx]}"
            )
        return float(self.rewards[s_idx, a - 1])


def build_model(params: EnvParams) -> TransitionModel:
    """Assemble the exact model from the environment's per-slot distribution."""
    states = env.enumerate_states(params)
    n = len(states)
    next_idx = np.zeros((n, N_ACTIONS, 8), dtype=np.int32)
    next_p = np.zeros((n, N_ACTIONS, 8), dtype=np.float64)
    rewards = np.zeros((n, N_ACTIONS), dtype=np.float64)
    feas = np.zeros((n, N_ACTIONS), dtype=bool)
    execu = np.zeros((n, N_ACTIONS), dtype=bool)

    for i, s in enumerate(states):
        for a in env.feasible_actions(s, params):
            feas[i, a - 1] = True
        for a in env.executable_actions(s, params):
            execu[i, a - 1] = True
            rewards[i, a - 1] = env.expected_reward(s, a, params)
            dist = env.transition_distribution(s, a, params)
            for k, (nxt, p) in enumerate(dist):
                next_idx[i, a - 1, k] = env.state_index(nxt, params)
                next_p[i, a - 1, k] = p
    return TransitionModel(params, states, next_idx, next_p, rewards, feas, execu)


@dataclass
class Policy:
    """Stationary randomized policy: per-state distribution over the four actions.

    Rows sum to one and put no mass on non-executable actions. Deterministic
    policies are one-hot rows.
    """

    probs: np.ndarray  # (n, 4)

    def validate(self, model: TransitionModel, atol: float = 1e-12) -> None:
        if self.probs.shape != (model.n_states, N_ACTIONS):
            raise ValueError(f"policy shape {self.probs.shape} does not match model")
        if np.any(self.probs < -atol):
            raise ValueError("negative action probability")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("policy rows must sum to 1")
        stray = self.probs * ~model.executable_mask
        if np.any(stray > atol):
            s_idx, a_idx = np.argwhere(stray > atol)[0]
            raise env.InfeasibleActionError(
                f"policy puts mass {stray[s_idx, a_idx]:.3g} on "
                f"{Action(a_idx + 1).name} in state {model.states[s_idx]}"
            )

    def action_at(self, s_idx: int) -> Action:
        """Deterministic action at a state (the argmax row entry)."""
        return Action(int(np.argmax(self.probs[s_idx])) + 1)

    @staticmethod
    def from_callable(model: TransitionModel, fn) -> "Policy":
        """One-hot policy table from a rule ``fn(state, params) -> Action``."""
        probs = np.zeros((model.n_states, N_ACTIONS))
        for i, s in enumerate(model.states):
            probs[i, fn(s, model.params) - 1] = 1.0
        pol = Policy(probs)
        pol.validate(model)
        return pol

    @staticmethod
    def uniform_feasible(model: TransitionModel) -> "Policy":
        """Uniform distribution over each state's decision set."""
        probs = model.feasible_mask / model.feasible_mask.sum(axis=1, keepdims=True)
        return Policy(probs.astype(np.float64))


@dataclass
class Solution:
    """Output of the optimal solve: gain, relative values, and the greedy policy.

    ``bias`` is anchored so bias[0] == 0; it is otherwise unique only up to
    an additive constant.
    """

    gain: float
    bias: np.ndarray
    policy: Policy
    iterations: int = 0
    span: float = 0.0
    residual: float = field(default=float("nan"))


def _q_values(model: TransitionModel, v: np.ndarray) -> np.ndarray:
    """Backup r(s,a) + sum_{s'} P(s'|s,a) v(s') over the decision sets; -inf elsewhere."""
    cont = np.einsum("sak,sak->sa", model.next_p, v[model.next_idx])
    q = model.rewards + cont
    return np.where(model.feasible_mask, q, -np.inf)


def solve_optimal(
    model: TransitionModel,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> Solution:
    """Gain-optimal deterministic policy via relative value iteration.

    Sweeps the average-reward Bellman operator, re-anchoring values at
    state 0 each pass, and stops when the span seminorm of successive value
    differences drops below ``tol``. The gain estimate is the midpoint of
    the span bounds, which bracket the optimal gain. Greedy ties go to the
    lowest action number.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    v = np.zeros(model.n_states)
    for it in range(1, max_iters + 1):
        w = _q_values(model, v).max(axis=1)
        diff = w - v
        lo, hi = diff.min(), diff.max()
        v = w - w[0]
        if hi - lo < tol:
            gain = 0.5 * (hi + lo)
            q = _q_values(model, v)
            greedy = np.argmax(q, axis=1)  # first max = lowest action number
            probs = np.zeros((model.n_states, N_ACTIONS))
            probs[np.arange(model.n_states), greedy] = 1.0
            residual = float(np.max(np.abs(q.max(axis=1) - v - gain)))
            return Solution(
                gain=float(gain),
                bias=v.copy(),
                policy=Policy(probs),
                iterations=it,
                span=float(hi - lo),
                residual=residual,
            )
    raise NonConvergenceError(max_iters, float(hi - lo))


@dataclass
class ExactMetrics:
    """Stationary performance of a fixed policy on the exact chain."""

    throughput: float
    stationary: np.ndarray
    avg_queue: float
    blocking_prob: float


def _policy_transition_matrix(model: TransitionModel, policy: Policy) -> np.ndarray:
    n = model.n_states
    P = np.zeros((n, n))
    w = policy.probs[:, :, None] * model.next_p  # (n, 4, 8); zero where unused
    rows = np.repeat(np.arange(n), N_ACTIONS * 8)
    np.add.at(P, (rows, model.next_idx.reshape(-1)), w.reshape(-1))
    return P


def _recurrent_class(P: np.ndarray, start: np.ndarray) -> np.ndarray:
    """Indices of the recurrent class the chain enters from ``start``.

    Entries of P are exact probability products, so the P > 0 edge set is
    noise-free and the class structure is a pure graph computation. Raises
    if several recurrent classes are reachable from the start (long-run
    averages would then depend on chance) or if the class is periodic.
    """
    g = nx.from_numpy_array(P > 0.0, create_using=nx.DiGraph)
    cond = nx.condensation(g)
    comp_of = cond.graph["mapping"]
    sinks = {n for n in cond.nodes if cond.out_degree(n) == 0}
    reachable: set[int] = set()
    for s0 in start:
        c0 = comp_of[int(s0)]
        reachable |= ({c0} | nx.descendants(cond, c0)) & sinks
    if len(reachable) != 1:
        raise ChainAssumptionError(
            f"{len(reachable)} recurrent classes reachable from the start; "
            "expected a single recurrent class revisited from everywhere"
        )
    members = sorted(cond.nodes[reachable.pop()]["members"])
    if not nx.is_aperiodic(g.subgraph(members)):
        raise ChainAssumptionError(
            "induced chain is periodic on its recurrent class; the analysis "
            "requires an aperiodic chain"
        )
    return np.asarray(members, dtype=int)


def _start_indices(params: EnvParams) -> np.ndarray:
    """Canonical indices of the standard trajectory start (empty queue and storage)."""
    starts = []
    if params.eta > 0.0:
        starts.append(env.state_index(State(0, 0, 0), params))
    if params.eta < 1.0:
        starts.append(env.state_index(State(1, 0, 0), params))
    return np.asarray(starts, dtype=int)


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Solve pi P = pi, sum(pi) = 1 for a unichain transition matrix."""
    n = P.shape[0]
    A = np.vstack([np.eye(n) - P.T, np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    if np.min(pi) < -1e-9:
        raise ChainAssumptionError(
            f"stationary solve produced negative mass ({np.min(pi):.3e}); "
            "chain is not a clean unichain"
        )
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    resid = float(np.max(np.abs(pi @ P - pi)))
    if resid > 1e-10:
        raise ChainAssumptionError(
            f"balance equations unsolved to tolerance (residual {resid:.3e}); "
            "chain may be periodic or reducible"
        )
    return pi


def evaluate_policy_exact(
    model: TransitionModel,
    policy: Policy,
    start_states: list[State] | None = None,
) -> ExactMetrics:
    """Exact long-run metrics of a fixed policy.

    Solves the balance equations of the induced chain on the recurrent
    class entered from the standard start (empty queue and storage, either
    channel state) and takes stationary expectations: throughput is the
    mean expected reward per slot, queue occupancy is the mean slot-start
    queue level, and blocking probability is the fraction of offered
    arrivals dropped at a full queue (the arrival probability cancels
    between dropped and offered). ``start_states`` overrides the anchor
    used to pick the recurrent class.
    """
    policy.validate(model)
    P = _policy_transition_matrix(model, policy)
    if start_states is None:
        start = _start_indices(model.params)
    else:
        start = np.asarray(
            [env.state_index(s, model.params) for s in start_states], dtype=int
        )
    recurrent = _recurrent_class(P, start)
    pi = np.zeros(model.n_states)
    pi[recurrent] = stationary_distribution(P[np.ix_(recurrent, recurrent)])

    reward_by_state = (policy.probs * model.rewards).sum(axis=1)
    throughput = float(pi @ reward_by_state)

    d_vec = np.array([s.d for s in model.states], dtype=float)
    avg_queue = float(pi @ d_vec)

    full_p = np.zeros((model.n_states, N_ACTIONS))
    for i, s in enumerate(model.states):
        if s.d < model.params.D:
            continue  # queue can only be full post-action if full pre-action
        for a in env.executable_actions(s, model.params):
            full_p[i, a - 1] = env.full_after_action_probability(s, a, model.params)
    blocking = float(pi @ (policy.probs * full_p).sum(axis=1))
    return ExactMetrics(throughput, pi, avg_queue, max(0.0, min(1.0, blocking)))


def evaluate_gain(model: TransitionModel, policy: Policy) -> float:
    """Average reward of a fixed policy (shorthand for the exact evaluation)."""
    return evaluate_policy_exact(model, policy).throughput
