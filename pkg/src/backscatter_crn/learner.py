"""Online policy-gradient learner.

Learns a softmax policy over the per-state decision sets from realized
throughput alone: the learner never reads the environment's probability
parameters, only the capacities and thresholds that define which actions
exist. Two update schemes are provided, one that fires on every return to
a designated recurrent state (cycle form) and an equivalent per-slot form
that carries an eligibility trace instead of a cycle buffer.

A learner instance is strictly sequential; run independent replications
with independent generators for parallelism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import env, oracle
from .env import Action, EnvParams, State


class DivergenceError(RuntimeError):
    """Learner produced a non-finite parameter or throughput estimate."""

    def __init__(self, slot: int, what: str):
        super().__init__(f"divergence at slot {slot}: {what}")
        self.slot = slot


class RecurrenceError(RuntimeError):
    """The designated recurrent state was not revisited within the cap."""


@dataclass(frozen=True)
class ParamLayout:
    """Index map for one parameter per (state, feasible action) pair."""

    params: EnvParams
    feasible: tuple[tuple[Action, ...], ...]
    offsets: np.ndarray  # (n_states + 1,)

    @staticmethod
    def build(params: EnvParams) -> "ParamLayout":
        feas = tuple(
            env.feasible_actions(s, params) for s in env.enumerate_states(params)
        )
        offsets = np.zeros(len(feas) + 1, dtype=np.int64)
        np.cumsum([len(a) for a in feas], out=offsets[1:])
        return ParamLayout(params, feas, offsets)

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    def slot_of(self, s_idx: int, a: Action) -> int:
        """Flat position of the (state, action) parameter."""
        return int(self.offsets[s_idx]) + self.feasible[s_idx].index(a)


@dataclass
class PolicyParams:
    """Softmax parameter vector, one entry per feasible (state, action) pair."""

    layout: ParamLayout
    theta: np.ndarray

    @staticmethod
    def zeros(params: EnvParams) -> "PolicyParams":
        layout = ParamLayout.build(params)
        return PolicyParams(layout, np.zeros(layout.dim))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.layout, self.theta.copy())


def action_distribution(pp: PolicyParams, s: State) -> np.ndarray:
    """Softmax choice probabilities over the decision set at ``s``.

    Normalization runs over the feasible actions only, with the usual
    max-subtraction so large parameters cannot overflow. Entries are
    strictly positive and sum to one; order matches feasible_actions.
    """
    i = env.state_index(s, pp.layout.params)
    block = pp.theta[pp.layout.offsets[i] : pp.layout.offsets[i + 1]]
    z = np.exp(block - block.max())
    return z / z.sum()


def score_vector(pp: PolicyParams, s: State, a: Action) -> np.ndarray:
    """Gradient of log choice probability of ``a`` at ``s`` w.r.t. theta.

    Only the state's block is nonzero: 1 - p at the taken action and -p at
    every other feasible action, so the block sums to zero. For a
    single-action state the vector vanishes (a forced action carries no
    signal).
    """
    layout = pp.layout
    i = env.state_index(s, layout.params)
    if a not in layout.feasible[i]:
        raise env.InfeasibleActionError(f"action {Action(a).name} infeasible in state {s}")
    probs = action_distribution(pp, s)
    g = np.zeros(layout.dim)
    off = layout.offsets[i]
    g[off : off + probs.size] = -probs
    g[off + layout.feasible[i].index(a)] += 1.0
    return g


def policy_table(pp: PolicyParams) -> oracle.Policy:
    """Evaluate the softmax policy into a full per-state probability table."""
    layout = pp.layout
    n = len(layout.feasible)
    probs = np.zeros((n, oracle.N_ACTIONS))
    for i in range(n):
        block = pp.theta[layout.offsets[i] : layout.offsets[i + 1]]
        z = np.exp(block - block.max())
        z /= z.sum()
        for k, a in enumerate(layout.feasible[i]):
            probs[i, a - 1] = z[k]
    return oracle.Policy(probs)


@dataclass(frozen=True)
class StepSchedule:
    """Step-size sequence for the parameter updates.

    ``geometric-epoch`` holds the step flat for ``epoch`` updates and then
    scales it by ``decay`` (the factory default). Note this sequence is
    summable, so it does not meet the usual stochastic-approximation
    requirement that the steps sum to infinity; the ``harmonic`` mode
    (rho0 / (1 + k / epoch)) is provided for runs that need it.
    """

    mode: str = "geometric-epoch"
    rho0: float = 1e-5
    decay: float = 0.9
    epoch: int = 18_000

    def __post_init__(self) -> None:
        if self.mode not in ("geometric-epoch", "harmonic"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if not (self.rho0 > 0):
            raise ValueError("rho0 must be positive")
        if self.mode == "geometric-epoch" and not (0.0 < self.decay < 1.0):
            raise ValueError("decay must be in (0,1)")
        if self.epoch < 1:
            raise ValueError("epoch must be >= 1")

    def rho_at(self, k: int) -> float:
        """Step size for update number ``k`` (0-based)."""
        if self.mode == "geometric-epoch":
            return self.rho0 * self.decay ** (k // self.epoch)
        return self.rho0 / (1.0 + k / self.epoch)


@dataclass
class LearnerState:
    """Everything the learner carries between slots."""

    theta: PolicyParams
    z: np.ndarray
    xi_hat: float
    rho: float
    nu: float
    recurrent_state: State
    slot_count: int
    visit_count: int


@dataclass
class LearningCurve:
    """Periodic samples of the run: slot number, throughput estimate, empirical average, step size."""

    slot: np.ndarray
    xi_hat: np.ndarray
    avg_throughput: np.ndarray
    rho: np.ndarray


def _sample_action(feas: tuple[Action, ...], probs_np, u: float) -> Action:
    acc = 0.0
    for k in range(len(feas) - 1):
        acc += probs_np[k]
        if u < acc:
            return feas[k]
    return feas[-1]


def learn_online(
    params: EnvParams,
    schedule: StepSchedule,
    nu: float = 0.01,
    theta0: PolicyParams | None = None,
    s_star: State | None = None,
    total_slots: int = 100_000,
    rng=None,
    record_every: int = 1000,
    step_fn=None,
    start_state: State | None = None,
) -> tuple[LearnerState, LearningCurve]:
    """Per-slot learning with an eligibility trace.

    Each slot: sample an action from the softmax policy, observe the
    realized throughput and successor from the environment, reset the
    trace to the current score vector when the slot started in the
    recurrent state (otherwise accumulate), then nudge the parameters by
    rho * (throughput - xi_hat) along the trace and relax xi_hat toward
    the observed throughput at rate nu * rho.

    The recurrent state defaults to the first state of the trajectory.
    Four uniforms are drawn per slot (action, then the environment's
    three), so runs are reproducible from the generator seed. ``step_fn``
    replaces ``env.step`` in tests that script outcomes.

    Raises DivergenceError if the estimate or any parameter goes
    non-finite (parameters are screened at every recording stride).
    """
    if total_slots < 1:
        raise ValueError("total_slots must be >= 1")
    if rng is None:
        rng = np.random.default_rng()
    if step_fn is None:
        step_fn = env.step
    pp = theta0.copy() if theta0 is not None else PolicyParams.zeros(params)
    layout = pp.layout
    theta = pp.theta
    z = np.zeros(layout.dim)
    xi = 0.0
    nu = float(nu)

    s = start_state if start_state is not None else env.initial_state(params, rng)
    if s_star is None:
        s_star = s
    rho = schedule.rho_at(0)

    delivered = 0
    rec_slots, rec_xi, rec_avg, rec_rho = [], [], [], []
    offsets = layout.offsets
    feasible = layout.feasible
    visits = 0

    for k in range(total_slots):
        i = env.state_index(s, params)
        off = int(offsets[i])
        feas = feasible[i]
        n_a = len(feas)
        u = rng.random()
        if n_a == 1:
            a = feas[0]
            probs = None
        else:
            block = theta[off : off + n_a]
            ex = np.exp(block - block.max())
            probs = ex / ex.sum()
            a = _sample_action(feas, probs, u)

        out = step_fn(s, a, params, rng)
        tp = out.throughput
        delivered += tp

        # Trace update: reset on a recurrent-state slot, else accumulate.
        at_star = s == s_star
        if at_star:
            visits += 1
            z[:] = 0.0
        if n_a > 1:
            a_pos = feas.index(a)
            for j in range(n_a):
                z[off + j] += (1.0 if j == a_pos else 0.0) - probs[j]

        delta = tp - xi
        if delta != 0.0:
            theta += (rho * delta) * z
        xi += nu * rho * delta

        s = out.next
        rho = schedule.rho_at(k + 1)

        if (k + 1) % record_every == 0 or k + 1 == total_slots:
            if not math.isfinite(xi) or not np.all(np.isfinite(theta)):
                raise DivergenceError(k, "theta or xi_hat is not finite")
            rec_slots.append(k + 1)
            rec_xi.append(xi)
            rec_avg.append(delivered / (k + 1))
            rec_rho.append(rho)

    state = LearnerState(
        theta=pp,
        z=z,
        xi_hat=xi,
        rho=rho,
        nu=nu,
        recurrent_state=s_star,
        slot_count=total_slots,
        visit_count=visits,
    )
    curve = LearningCurve(
        np.array(rec_slots, dtype=np.int64),
        np.array(rec_xi),
        np.array(rec_avg),
        np.array(rec_rho),
    )
    return state, curve


def learn_regenerative(
    params: EnvParams,
    schedule: StepSchedule,
    nu: float = 0.01,
    theta0: PolicyParams | None = None,
    s_star: State | None = None,
    total_slots: int = 100_000,
    rng=None,
    record_every: int = 1000,
    step_fn=None,
    start_state: State | None = None,
    visit_cap: int = 1_000_000,
) -> tuple[LearnerState, LearningCurve]:
    """Cycle-form learning: update once per return to the recurrent state.

    Slots between consecutive visits are buffered; on each return the
    buffered rewards are centered on the running estimate, turned into
    suffix sums (the estimated differential throughput of each visited
    pair), folded against the score vectors into one gradient estimate,
    and applied in a single parameter step. The step size advances per
    completed cycle, not per slot.

    Raises RecurrenceError when no return happens within ``visit_cap``
    slots, and DivergenceError on non-finite parameters.
    """
    if total_slots < 1:
        raise ValueError("total_slots must be >= 1")
    if rng is None:
        rng = np.random.default_rng()
    if step_fn is None:
        step_fn = env.step
    pp = theta0.copy() if theta0 is not None else PolicyParams.zeros(params)
    layout = pp.layout
    theta = pp.theta
    xi = 0.0
    nu = float(nu)

    s = start_state if start_state is not None else env.initial_state(params, rng)
    if s_star is None:
        s_star = s
    m = 0
    rho = schedule.rho_at(0)

    delivered = 0
    rec_slots, rec_xi, rec_avg, rec_rho = [], [], [], []
    cycle: list[tuple[State, Action, int]] = []
    slots_since_visit = 0

    for k in range(total_slots):
        if s == s_star and cycle:
            _apply_cycle_update(pp, cycle, xi, rho)
            xi += nu * rho * sum(tp - xi for _, _, tp in cycle)
            cycle.clear()
            m += 1
            rho = schedule.rho_at(m)
            if not math.isfinite(xi) or not np.all(np.isfinite(theta)):
                raise DivergenceError(k, "theta or xi_hat is not finite")
        if s == s_star:
            slots_since_visit = 0
        slots_since_visit += 1
        if slots_since_visit > visit_cap:
            raise RecurrenceError(
                f"no visit to {s_star} within {visit_cap} slots (slot {k}); "
                "the recurrent-state assumption does not hold for this policy"
            )

        i = env.state_index(s, params)
        feas = layout.feasible[i]
        u = rng.random()
        if len(feas) == 1:
            a = feas[0]
        else:
            probs = action_distribution(pp, s)
            a = _sample_action(feas, probs, u)
        out = step_fn(s, a, params, rng)
        delivered += out.throughput
        cycle.append((s, a, out.throughput))
        s = out.next

        if (k + 1) % record_every == 0 or k + 1 == total_slots:
            rec_slots.append(k + 1)
            rec_xi.append(xi)
            rec_avg.append(delivered / (k + 1))
            rec_rho.append(rho)

    state = LearnerState(
        theta=pp,
        z=np.zeros(layout.dim),
        xi_hat=xi,
        rho=rho,
        nu=nu,
        recurrent_state=s_star,
        slot_count=total_slots,
        visit_count=m,
    )
    curve = LearningCurve(
        np.array(rec_slots, dtype=np.int64),
        np.array(rec_xi),
        np.array(rec_avg),
        np.array(rec_rho),
    )
    return state, curve


def cycle_gradient_estimate(
    pp: PolicyParams, cycle: list[tuple[State, Action, int]], xi: float
) -> np.ndarray:
    """Gradient estimate from one regenerative cycle at estimate ``xi``.

    Each visited (state, action) is weighted by the centered reward
    accumulated from that slot to the end of the cycle and folded against
    its score vector.
    """
    centered = np.array([tp for _, _, tp in cycle], dtype=float) - xi
    qtilde = np.cumsum(centered[::-1])[::-1]
    F = np.zeros(pp.layout.dim)
    for (s, a, _), q in zip(cycle, qtilde):
        F += q * score_vector(pp, s, a)
    return F


def _apply_cycle_update(pp, cycle, xi, rho) -> None:
    pp.theta += rho * cycle_gradient_estimate(pp, cycle, xi)


# ---------------------------------------------------------------------------
# Exact gradient of the stationary throughput, and its verification


def exact_gradient(
    model: oracle.TransitionModel, pp: PolicyParams, s_star_idx: int
) -> tuple[np.ndarray, float, np.ndarray]:
    """Analytic gradient of average throughput w.r.t. theta.

    Composes the stationary distribution, the per-pair differential
    throughput (centered reward accumulated until the next visit to the
    anchor state, from the linear system of the chain killed at the
    anchor), and the score vectors. Returns (gradient, throughput,
    stationary distribution).
    """
    pol = policy_table(pp)
    ev = oracle.evaluate_policy_exact(model, pol)
    pi, xi = ev.stationary, ev.throughput
    n = model.n_states

    P = oracle._policy_transition_matrix(model, pol)
    T_pi = (pol.probs * model.rewards).sum(axis=1)
    Pk = P.copy()
    Pk[:, s_star_idx] = 0.0  # kill returns to the anchor
    d = np.linalg.solve(np.eye(n) - Pk, T_pi - xi)

    layout = pp.layout
    grad = np.zeros(layout.dim)
    cont = np.einsum("sak,sak->sa", model.next_p, d[model.next_idx])
    for i in range(n):
        if pi[i] == 0.0:
            continue
        feas = layout.feasible[i]
        off = int(layout.offsets[i])
        a_idx = np.array([a - 1 for a in feas])
        chi = pol.probs[i, a_idx]
        q = model.rewards[i, a_idx] - xi + cont[i, a_idx]
        w = chi * q
        # sum_a chi_a q_a (e_a - chi) accumulated into the state's block
        grad[off : off + len(feas)] += pi[i] * (w - w.sum() * chi)
    return grad, xi, pi


def finite_difference_gradient(
    model: oracle.TransitionModel, pp: PolicyParams, eps: float = 1e-6
) -> np.ndarray:
    """Central finite differences of the exact stationary throughput."""
    g = np.zeros(pp.layout.dim)
    work = pp.copy()
    for i in range(pp.layout.dim):
        work.theta[i] = pp.theta[i] + eps
        hi = oracle.evaluate_policy_exact(model, policy_table(work)).throughput
        work.theta[i] = pp.theta[i] - eps
        lo = oracle.evaluate_policy_exact(model, policy_table(work)).throughput
        work.theta[i] = pp.theta[i]
        g[i] = (hi - lo) / (2.0 * eps)
    return g


@dataclass
class GradientReport:
    """Cross-check of the three gradient routes at a fixed parameter vector."""

    analytic: np.ndarray
    finite_diff: np.ndarray
    max_rel_error_fd: float
    mc_mean: np.ndarray
    mc_se: np.ndarray
    expected_cycle_length: float
    n_cycles: int
    max_sigma_deviation: float = field(default=float("nan"))


def gradient_estimate_check(
    model: oracle.TransitionModel,
    pp: PolicyParams,
    horizon: int = 2_000_000,
    replications: int = 10_000,
    rng=None,
    eps: float = 1e-6,
    s_star: State | None = None,
) -> GradientReport:
    """Verify the analytic gradient against finite differences and simulation.

    Finite differences perturb every coordinate of theta through the exact
    stationary evaluation. The simulation route runs ``replications``
    regenerative cycles of the fixed policy (capped at ``horizon`` slots
    in total), holding the throughput estimate at its exact value, and
    compares the mean per-cycle gradient estimate divided by the exact
    expected cycle length against the analytic gradient; the report's
    ``max_sigma_deviation`` is the worst componentwise deviation in units
    of estimated standard errors.
    """
    if rng is None:
        rng = np.random.default_rng()
    params = model.params
    pol = policy_table(pp)
    ev = oracle.evaluate_policy_exact(model, pol)
    if s_star is None:
        s_star_idx = int(np.argmax(ev.stationary))
        s_star = model.states[s_star_idx]
    else:
        s_star_idx = env.state_index(s_star, params)
    if ev.stationary[s_star_idx] <= 0.0:
        raise RecurrenceError(f"anchor state {s_star} has zero stationary mass")

    analytic, xi, pi = exact_gradient(model, pp, s_star_idx)
    fd = finite_difference_gradient(model, pp, eps)
    scale = max(float(np.max(np.abs(analytic))), 1e-12)
    max_rel_fd = float(np.max(np.abs(fd - analytic)) / scale)

    expected_T = 1.0 / float(pi[s_star_idx])
    layout = pp.layout
    sum_F = np.zeros(layout.dim)
    sum_F2 = np.zeros(layout.dim)
    n_done = 0
    slots_used = 0

    s = s_star
    cycle: list[tuple[State, Action, int]] = []
    while n_done < replications and slots_used < horizon:
        i = env.state_index(s, params)
        feas = layout.feasible[i]
        u = rng.random()
        if len(feas) == 1:
            a = feas[0]
        else:
            probs = action_distribution(pp, s)
            a = _sample_action(feas, probs, u)
        out = env.step(s, a, params, rng)
        cycle.append((s, a, out.throughput))
        slots_used += 1
        s = out.next
        if s == s_star:
            F = cycle_gradient_estimate(pp, cycle, xi)
            sum_F += F
            sum_F2 += F * F
            n_done += 1
            cycle.clear()

    if n_done < 2:
        raise RecurrenceError(
            f"only {n_done} completed cycles within {horizon} slots; "
            "anchor state revisits are too rare"
        )
    mean_F = sum_F / n_done
    var_F = np.maximum(sum_F2 / n_done - mean_F**2, 0.0) * n_done / (n_done - 1)
    se = np.sqrt(var_F / n_done) / expected_T
    mc = mean_F / expected_T
    dev = np.abs(mc - analytic) / np.maximum(se, 1e-300)
    return GradientReport(
        analytic=analytic,
        finite_diff=fd,
        max_rel_error_fd=max_rel_fd,
        mc_mean=mc,
        mc_se=se,
        expected_cycle_length=expected_T,
        n_cycles=n_done,
        max_sigma_deviation=float(np.max(dev)),
    )
