"""Slotted single-transmitter environment.

Models an RF-powered secondary transmitter sharing a primary channel.
While the channel is busy the device can harvest energy from the primary
signal or backscatter it to deliver queued data; while the channel is idle
it can spend stored energy on an active transmission. State is the triple
(channel flag, data queue level, energy level) on integer grids.

All types are immutable values; every operation is pure given the random
source, so independent instances may run in parallel as long as each owns
its own seeded generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, NamedTuple


class Action(IntEnum):
    """The four control actions, numbered as used throughout the policy tables."""

    IDLE = 1
    TRANSMIT = 2
    HARVEST = 3
    BACKSCATTER = 4


class State(NamedTuple):
    """Slot-start state: channel flag (1 = busy, 0 = idle), queued data units, stored energy units."""

    c: int
    d: int
    e: int


class SlotOutcome(NamedTuple):
    """Realized result of one slot: successor state plus the slot's event record."""

    next: State
    throughput: int
    arrived: bool
    blocked: bool
    action_succeeded: bool


class InfeasibleActionError(ValueError):
    """Raised when an operation is asked to perform an action the state does not allow."""


@dataclass(frozen=True)
class EnvParams:
    """Environment probabilities, quanta, and capacities.

    alpha   packet arrival probability per slot (one packet = one data unit)
    eta     probability the primary channel is idle in a slot
    beta    backscatter success probability
    gamma   harvest success probability
    sigma   active-transmit success probability
    d_b     data units delivered per successful backscatter
    d_t     data units delivered per successful active transmission
    e_h     energy units gained per successful harvest
    e_t     energy units consumed per active-transmit attempt
    D       data queue capacity (units)
    E       energy storage capacity (units)
    """

    alpha: float = 0.5
    eta: float = 0.5
    beta: float = 0.9
    gamma: float = 0.9
    sigma: float = 0.9
    d_b: int = 1
    d_t: int = 2
    e_h: int = 1
    e_t: int = 1
    D: int = 10
    E: int = 10

    def __post_init__(self) -> None:
        for name in ("alpha", "eta", "beta", "gamma", "sigma"):
            p = getattr(self, name)
            if not (isinstance(p, (int, float)) and math.isfinite(p) and 0.0 <= p <= 1.0):
                raise ValueError(f"{name} out of [0,1]: {p!r}")
        if not (self.D >= self.d_t >= 1):
            raise ValueError(f"need D >= d_t >= 1, got D={self.D}, d_t={self.d_t}")
        if not (self.D >= self.d_b >= 1):
            raise ValueError(f"need D >= d_b >= 1, got D={self.D}, d_b={self.d_b}")
        if not (self.E >= self.e_t >= 1):
            raise ValueError(f"need E >= e_t >= 1, got E={self.E}, e_t={self.e_t}")
        if not (self.E >= self.e_h >= 1):
            raise ValueError(f"need E >= e_h >= 1, got E={self.E}, e_h={self.e_h}")

    @property
    def n_states(self) -> int:
        return 2 * (self.D + 1) * (self.E + 1)


def enumerate_states(params: EnvParams) -> list[State]:
    """All states in canonical order: c-major, then d, then e.

    The position of a state in this list is its canonical index, used by
    every matrix and policy table in the package.
    """
    return [
        State(c, d, e)
        for c in (0, 1)
        for d in range(params.D + 1)
        for e in range(params.E + 1)
    ]


def state_index(s: State, params: EnvParams) -> int:
    """Canonical index of ``s`` under the c-major ordering of enumerate_states."""
    return (s.c * (params.D + 1) + s.d) * (params.E + 1) + s.e


def index_to_state(i: int, params: EnvParams) -> State:
    de = (params.D + 1) * (params.E + 1)
    c, rest = divmod(i, de)
    d, e = divmod(rest, params.E + 1)
    return State(c, d, e)


def validate_state(s: State, params: EnvParams) -> None:
    if s.c not in (0, 1) or not (0 <= s.d <= params.D) or not (0 <= s.e <= params.E):
        raise ValueError(f"state out of range: {s} for D={params.D}, E={params.E}")


def feasible_actions(s: State, params: EnvParams) -> tuple[Action, ...]:
    """Decision set of the MDP at state ``s`` (never empty).

    Idle channel: transmit only with enough data and energy, otherwise idle.
    Busy channel: harvest while storage has room, backscatter while data is
    queued; with full storage and nothing to backscatter, idle.
    """
    if s.c == 0:
        if s.d >= params.d_t and s.e >= params.e_t:
            return (Action.IDLE, Action.TRANSMIT)
        return (Action.IDLE,)
    if s.d < params.d_b:
        return (Action.HARVEST,) if s.e < params.E else (Action.IDLE,)
    if s.e == params.E:
        return (Action.BACKSCATTER,)
    return (Action.HARVEST, Action.BACKSCATTER)


def executable_actions(s: State, params: EnvParams) -> tuple[Action, ...]:
    """Actions the hardware can physically carry out at ``s``.

    This is ``feasible_actions(s) | {IDLE}``: doing nothing is always
    possible, even where the decision set omits it because acting is never
    worse. Fixed benchmark policies (and the always-idle policy) rely on
    the wider set; the solver and the learner use the decision set only.
    """
    acts = feasible_actions(s, params)
    if Action.IDLE in acts:
        return acts
    return (Action.IDLE,) + acts


def _check_executable(s: State, a: Action, params: EnvParams) -> None:
    if a == Action.IDLE:
        return
    if a == Action.TRANSMIT:
        if s.c == 0 and s.d >= params.d_t and s.e >= params.e_t:
            return
    elif a == Action.HARVEST:
        if s.c == 1 and s.e < params.E:
            return
    elif a == Action.BACKSCATTER:
        if s.c == 1 and s.d >= params.d_b:
            return
    raise InfeasibleActionError(f"action {Action(a).name} not executable in state {s}")


def expected_reward(s: State, a: Action, params: EnvParams) -> float:
    """Expected data units delivered in one slot by taking ``a`` at ``s``."""
    _check_executable(s, a, params)
    if a == Action.TRANSMIT:
        return params.sigma * params.d_t
    if a == Action.BACKSCATTER:
        return params.beta * params.d_b
    return 0.0


def _success_probability(a: Action, params: EnvParams) -> float:
    if a == Action.TRANSMIT:
        return params.sigma
    if a == Action.BACKSCATTER:
        return params.beta
    if a == Action.HARVEST:
        return params.gamma
    return 0.0


def step(s: State, a: Action, params: EnvParams, rng) -> SlotOutcome:
    """Advance one slot; returns the realized outcome.

    Event order within the slot is fixed:
      1. action resolution. Transmit deducts e_t energy whether or not the
         packet gets through; data leaves the queue only on success.
         Backscatter removes and delivers d_b on success. Harvest adds e_h
         capped at E on success. Idle changes nothing.
      2. arrival. One data unit with probability alpha; dropped (blocked)
         if the post-action queue is already full.
      3. channel redraw. Busy with probability 1 - eta, independent of all
         other events.

    Exactly three uniforms are consumed per call, in the order
    (action outcome, arrival, channel), so trajectories are reproducible
    from the generator seed. Tests may substitute a scripted source.
    """
    _check_executable(s, a, params)
    u_act = rng.random()
    u_arr = rng.random()
    u_ch = rng.random()

    d, e = s.d, s.e
    throughput = 0
    succeeded = False
    if a == Action.TRANSMIT:
        e -= params.e_t
        if u_act < params.sigma:
            succeeded = True
            d -= params.d_t
            throughput = params.d_t
    elif a == Action.BACKSCATTER:
        if u_act < params.beta:
            succeeded = True
            d -= params.d_b
            throughput = params.d_b
    elif a == Action.HARVEST:
        if u_act < params.gamma:
            succeeded = True
            e = min(params.E, e + params.e_h)

    arrived = u_arr < params.alpha
    blocked = False
    if arrived:
        if d == params.D:
            blocked = True
        else:
            d += 1

    c_next = 1 if u_ch < 1.0 - params.eta else 0
    return SlotOutcome(State(c_next, d, e), throughput, arrived, blocked, succeeded)


def initial_state(params: EnvParams, rng) -> State:
    """Start-of-trajectory state: empty queue and storage, channel drawn from its slot law."""
    c = 1 if rng.random() < 1.0 - params.eta else 0
    return State(c, 0, 0)


def transition_distribution(
    s: State, a: Action, params: EnvParams
) -> list[tuple[State, float]]:
    """Exact one-slot distribution of the successor state.

    Matches ``step`` outcome for outcome: the support is the product of
    action success/failure, arrival/no-arrival, and busy/idle, merged over
    coinciding successors (at most 8 entries), returned in canonical state
    order. Probabilities sum to 1.
    """
    _check_executable(s, a, params)
    p_succ = _success_probability(a, params)
    acc: dict[State, float] = {}
    for succeeded, p1 in ((True, p_succ), (False, 1.0 - p_succ)):
        if p1 == 0.0:
            continue
        d, e = s.d, s.e
        if a == Action.TRANSMIT:
            e -= params.e_t
            if succeeded:
                d -= params.d_t
        elif a == Action.BACKSCATTER and succeeded:
            d -= params.d_b
        elif a == Action.HARVEST and succeeded:
            e = min(params.E, e + params.e_h)
        for arrived, p2 in ((True, params.alpha), (False, 1.0 - params.alpha)):
            if p2 == 0.0:
                continue
            d_post = d if (not arrived or d == params.D) else d + 1
            for c_next, p3 in ((1, 1.0 - params.eta), (0, params.eta)):
                if p3 == 0.0:
                    continue
                nxt = State(c_next, d_post, e)
                acc[nxt] = acc.get(nxt, 0.0) + p1 * p2 * p3
    return sorted(acc.items(), key=lambda kv: state_index(kv[0], params))


def full_after_action_probability(s: State, a: Action, params: EnvParams) -> float:
    """Probability the queue is at capacity after the action phase of a slot.

    An arrival in that slot is dropped exactly in this event, so the
    per-slot blocked-arrival probability is alpha times this value.
    """
    _check_executable(s, a, params)
    if s.d < params.D:
        return 0.0
    # Queue is full now; it stays full unless the action removes data.
    p_succ = _success_probability(a, params)
    if a in (Action.TRANSMIT, Action.BACKSCATTER):
        return 1.0 - p_succ
    return 1.0


def iter_state_actions(
    params: EnvParams, executable: bool = False
) -> Iterable[tuple[int, State, tuple[Action, ...]]]:
    """Yield (canonical index, state, action set) over the whole state space."""
    pick = executable_actions if executable else feasible_actions
    for i, s in enumerate(enumerate_states(params)):
        yield i, s, pick(s, params)
