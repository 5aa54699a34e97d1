"""Q-WITS3: two-timescale asynchronous Q-learning of Whittle indices.

Each source keeps primary Q-values ``Qb[., E, K-1, b]``, intermediate
Q-values ``Qa[., E, K-1, j, a]`` and a per-state index estimate
``mu[E, K-1]``.  Q-values move on the fast step ``d(n)`` of their own visit
count, index estimates on the slow step ``f(n)`` of the state's visit count.

The probe update is ``Qb[s,1] += d * (mu + min_a Qa[s,j,a] - Qb[s,1])``: the
charge sits inside the bracket, so the fixed point is
``mu + sum_j q_j min_a Qa*`` and the iterates stay bounded.

Two couplings between charges and Q-tables are available:

``"state"`` (default)
    One Q-table per source.  The probe update at ``s`` charges ``mu[s]`` and
    bootstraps from neighbouring entries learned under their own charges.
``"reference"``
    One Q-table per probe-feasible reference state, each learned under the
    constant charge ``mu[ref]``.  Every slot updates the visited pair in all
    reference tables; ``mu[ref]`` moves only when ``ref`` is visited.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numba import njit

from .model import SourceParams
from .policies import Policy
from .sim import POLICY_KEY, Environment, SlotOutcome, stream


class TransitionError(RuntimeError):
    """An observed transition lies outside the model's support."""


@dataclass(frozen=True)
class StepSchedule:
    fast_exponent: float = 0.6
    slow_exponent: float = 0.9
    fast_scale: float = 1.0
    slow_scale: float = 1.0

    def __post_init__(self):
        if not 0.5 < self.fast_exponent <= 1.0 or not 0.5 < self.slow_exponent <= 1.0:
            raise ValueError("step-size exponents must lie in (0.5, 1]")
        if self.slow_exponent <= self.fast_exponent:
            raise ValueError("slow exponent must exceed fast exponent so that f = o(d)")
        if self.fast_scale <= 0 or self.slow_scale <= 0:
            raise ValueError("step-size scales must be positive")


def step_size(schedule: StepSchedule, which: str, n: int) -> float:
    if n < 0:
        raise ValueError("visit count must be nonnegative")
    if which == "fast":
        return schedule.fast_scale * (n + 1) ** -schedule.fast_exponent
    if which == "slow":
        return schedule.slow_scale * (n + 1) ** -schedule.slow_exponent
    raise ValueError(f"which must be 'fast' or 'slow' (got {which!r})")


def schedule_from_config(lc) -> StepSchedule:
    return StepSchedule(lc.fast_exponent, lc.slow_exponent, lc.fast_scale, lc.slow_scale)


@dataclass
class SourceTables:
    """Tables of one source.  ``Qb`` and ``Qa`` carry a leading axis over
    charge references: one slice per probe-feasible state under the
    ``"reference"`` coupling, a single slice under ``"state"``."""

    Qb: np.ndarray
    Qa: np.ndarray
    mu: np.ndarray
    nu_b: np.ndarray
    nu_a: np.ndarray
    nu_s: np.ndarray

    @classmethod
    def zeros(cls, p: SourceParams, refs: int, mu0: float = 0.0) -> "SourceTables":
        nE, nK = p.shape
        return cls(np.zeros((refs, nE, nK, 2)), np.zeros((refs, nE, nK, p.m, 2)),
                   np.full((nE, nK), float(mu0)),
                   np.zeros((nE, nK, 2), dtype=np.int64), np.zeros((nE, nK, p.m, 2), dtype=np.int64),
                   np.zeros((nE, nK), dtype=np.int64))

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k).tolist() for k in ("Qb", "Qa", "mu", "nu_b", "nu_a", "nu_s")}

    @classmethod
    def from_dict(cls, d: dict) -> "SourceTables":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("Qb", "Qa", "mu")),
                   *(np.asarray(d[k], dtype=np.int64) for k in ("nu_b", "nu_a", "nu_s")))


COUPLINGS = ("reference", "state")


def _refs(p: SourceParams, coupling: str) -> int:
    return (p.buffer + 1 - p.sampling_cost) * p.age_cap if coupling == "reference" else 1


@dataclass
class LearnerState:
    params: list[SourceParams]
    tables: list[SourceTables]
    alpha: float
    schedule: StepSchedule
    epsilon: float
    know_p: bool
    mu_max: list[float]
    coupling: str = "state"
    freeze_mu: bool = False
    updates: int = 0

    @classmethod
    def create(cls, params: Sequence[SourceParams], alpha: float = 0.99,
               schedule: StepSchedule | None = None, epsilon: float = 0.1, know_p: bool = True,
               mu_max: Sequence[float] | None = None, frozen_mu: float | None = None,
               coupling: str = "state") -> "LearnerState":
        if coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS} (got {coupling!r})")
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        params = list(params)
        if mu_max is None:
            mu_max = [p.age_cap / (1.0 - alpha) for p in params]
        mu0 = 0.0 if frozen_mu is None else frozen_mu
        tables = [SourceTables.zeros(p, _refs(p, coupling), mu0) for p in params]
        return cls(params, tables, alpha, schedule or StepSchedule(), epsilon, know_p,
                   list(mu_max), coupling, frozen_mu is not None)

    def ref(self, i: int, e: int, k: int) -> int:
        """Slice of source ``i``'s tables that holds the charge of state ``(e, k)``."""
        p = self.params[i]
        return (e - p.sampling_cost) * p.age_cap + k - 1 if self.coupling == "reference" else 0

    def q_values(self, i: int, e: int, k: int) -> tuple[np.ndarray, np.ndarray]:
        """``Qb[e,k,:]`` and ``Qa[e,k,:,:]`` under the charge of state ``(e, k)``."""
        t = self.tables[i]
        r = self.ref(i, e, k) if e >= self.params[i].sampling_cost else 0
        return t.Qb[r, e, k - 1], t.Qa[r, e, k - 1]

    def whittle_estimates(self) -> list[np.ndarray]:
        out = []
        for p, t in zip(self.params, self.tables):
            m = t.mu.copy()
            m[: p.sampling_cost] = np.nan
            out.append(m)
        return out

    def to_dict(self) -> dict[str, Any]:
        s = self.schedule
        return {
            "alpha": self.alpha, "epsilon": self.epsilon, "know_p": self.know_p,
            "coupling": self.coupling, "freeze_mu": self.freeze_mu, "mu_max": self.mu_max,
            "updates": self.updates,
            "schedule": {"fast_exponent": s.fast_exponent, "slow_exponent": s.slow_exponent,
                         "fast_scale": s.fast_scale, "slow_scale": s.slow_scale},
            "initialization": "zeros",
            "sources": [{"id": p.id, **t.to_dict()} for p, t in zip(self.params, self.tables)],
        }

    def load_tables(self, d: dict) -> None:
        self.tables = [SourceTables.from_dict(s) for s in d["sources"]]
        self.updates = d["updates"]


@njit(cache=True, nogil=True)
def _jhat(Qb, r, e, k, es):
    if e >= es:
        return min(Qb[r, e, k, 0], Qb[r, e, k, 1])
    return Qb[r, e, k, 0]


@njit(cache=True, nogil=True)
def _update_source(Qb, Qa, mu, nu_b, nu_a, nu_s, e, k, ne, nk, probed, j, a, success, pj,
                   es, kmax, alpha, dexp, dsc, fexp, fsc, know_p, learn_mu, mu_max, by_ref):
    # k, nk are 0-based age indices; every target is built from time-t values
    R = Qb.shape[0]
    diff = 0.0
    if e >= es:
        r0 = (e - es) * kmax + k if by_ref else 0
        diff = Qb[r0, e, k, 0] - Qb[r0, e, k, 1]
    age = k + 1.0
    if probed:
        d_b = dsc * (nu_b[e, k, 1] + 1.0) ** -dexp
        d_a = dsc * (nu_a[e, k, j, a] + 1.0) ** -dexp
        k_fail = min(k + 1, kmax - 1)
        for r in range(R):
            charge = mu[r // kmax + es, r % kmax] if by_ref else mu[e, k]
            tb = charge + min(Qa[r, e, k, j, 0], Qa[r, e, k, j, 1])
            if a == 0:
                ta = age + alpha * _jhat(Qb, r, ne, nk, es)
            elif know_p:
                # ne is the realized post-sample energy, shared by both outcomes
                ta = age * (1.0 - pj) + alpha * (pj * _jhat(Qb, r, ne, 0, es)
                                                 + (1.0 - pj) * _jhat(Qb, r, ne, k_fail, es))
            else:
                s = 1.0 if success else 0.0
                ta = age * (1.0 - s) + alpha * _jhat(Qb, r, ne, nk, es)
            Qb[r, e, k, 1] += d_b * (tb - Qb[r, e, k, 1])
            Qa[r, e, k, j, a] += d_a * (ta - Qa[r, e, k, j, a])
        nu_b[e, k, 1] += 1
        nu_a[e, k, j, a] += 1
    else:
        d_b = dsc * (nu_b[e, k, 0] + 1.0) ** -dexp
        for r in range(R):
            target = age + alpha * _jhat(Qb, r, ne, nk, es)
            Qb[r, e, k, 0] += d_b * (target - Qb[r, e, k, 0])
        nu_b[e, k, 0] += 1
    n = nu_s[e, k]
    nu_s[e, k] = n + 1
    if e >= es and learn_mu:
        # raise the charge when not probing costs more than probing
        m = mu[e, k] + fsc * (n + 1.0) ** -fexp * diff
        mu[e, k] = min(max(m, 0.0), mu_max)


def _check_support(p: SourceParams, o: SlotOutcome, i: int) -> None:
    e, k, ne, nk = o.energy[i], o.age[i], o.next_energy[i], o.next_age[i]
    ka = min(k + 1, p.age_cap)
    probed = o.probed == i
    if probed and o.sampled:
        e0 = e - p.sampling_cost
        ok_e = ne in (e0, min(e0 + 1, p.buffer))
        ok_k = nk == (1 if o.success else ka)
    else:
        ok_e = ne in (e, min(e + 1, p.buffer))
        ok_k = nk == ka
    if probed and e < p.sampling_cost:
        ok_e = False
    if not (ok_e and ok_k):
        raise TransitionError(
            f"source {p.id}: transition ({e},{k}) -> ({ne},{nk}) outside model support")


def qwits3_update(learner: LearnerState, o: SlotOutcome) -> None:
    """Apply one slot's asynchronous updates for every source (in place)."""
    sch = learner.schedule
    by_ref = learner.coupling == "reference"
    for i, (p, t) in enumerate(zip(learner.params, learner.tables)):
        _check_support(p, o, i)
        probed = o.probed == i
        j = o.channel if probed else 0
        _update_source(t.Qb, t.Qa, t.mu, t.nu_b, t.nu_a, t.nu_s,
                       o.energy[i], o.age[i] - 1, o.next_energy[i], o.next_age[i] - 1,
                       probed, j, int(probed and o.sampled), bool(o.success),
                       p.success_probs[j], p.sampling_cost, p.age_cap, learner.alpha,
                       sch.fast_exponent, sch.fast_scale, sch.slow_exponent, sch.slow_scale,
                       learner.know_p, not learner.freeze_mu, learner.mu_max[i], by_ref)
    learner.updates += 1


def qwits3_act(learner: LearnerState, energy: Sequence[int], age: Sequence[int],
               rng: np.random.Generator):
    """Epsilon-greedy probe choice and the matching sampling rule.

    Returns ``(i, sample)`` where ``i`` is a 0-based source index or ``None``
    and ``sample(channel) -> bool`` decides after the channel is revealed.
    """
    i = _probe_choice(learner, energy, age, rng)
    if i is None:
        return None, None
    return i, lambda j: _sample_choice(learner, i, energy[i], age[i], j, rng)


def _probe_choice(learner, energy, age, rng):
    feas = [i for i, p in enumerate(learner.params) if energy[i] >= p.sampling_cost]
    if not feas:
        return None
    if learner.epsilon > 0 and rng.random() < learner.epsilon:
        return feas[int(rng.integers(len(feas)))]
    best, best_x = None, -math.inf
    for i in feas:
        x = learner.tables[i].mu[energy[i], age[i] - 1]
        if x > best_x:
            best, best_x = i, x
    return best


def _sample_choice(learner, i, e, k, j, rng) -> bool:
    if learner.epsilon > 0 and rng.random() < learner.epsilon:
        return bool(rng.random() < 0.5)
    qa = learner.q_values(i, e, k)[1]
    return bool(qa[j, 1] < qa[j, 0])


class QWITS3Policy(Policy):
    """Online Q-WITS3 behind the simulator's slot interface; learns while acting."""

    name = "q-wits3"

    def __init__(self, params, alpha=0.99, schedule=None, epsilon=0.1, know_p=True, mu_max=None,
                 coupling="state"):
        self.params = list(params)
        self.kwargs = dict(alpha=alpha, schedule=schedule, epsilon=epsilon, know_p=know_p,
                           mu_max=mu_max, coupling=coupling)
        self.learner = LearnerState.create(self.params, **self.kwargs)
        self.rng = stream(0, POLICY_KEY)
        self.metadata = {"initialization": "zeros", "epsilon": epsilon, "know_p": know_p,
                         "coupling": coupling}

    def reset(self, rng=None):
        self.learner = LearnerState.create(self.params, **self.kwargs)
        if rng is not None:
            self.rng = rng

    def probe(self, energy, age):
        return _probe_choice(self.learner, energy, age, self.rng)

    def sample(self, i, energy, age, channel):
        return _sample_choice(self.learner, i, energy, age, channel, self.rng)

    def observe(self, outcome):
        qwits3_update(self.learner, outcome)


class DecoupledLearner(Policy):
    """Single-source learner at a frozen charge; explores both probe actions.

    Used to check the fast timescale in isolation: with probability epsilon
    the probe action is uniform, otherwise it minimizes ``Qb``.
    """

    name = "decoupled"

    def __init__(self, p: SourceParams, mu_hat: float, alpha: float, schedule=None,
                 epsilon: float = 0.2, know_p: bool = True):
        self.p = p
        self.learner = LearnerState.create([p], alpha, schedule, epsilon, know_p, frozen_mu=mu_hat,
                                           coupling="state")
        self.rng = stream(0, POLICY_KEY)

    def reset(self, rng=None):
        if rng is not None:
            self.rng = rng

    def probe(self, energy, age):
        e, k = energy[0], age[0] - 1
        if e < self.p.sampling_cost:
            return None
        if self.rng.random() < self.learner.epsilon:
            return 0 if self.rng.random() < 0.5 else None
        qb = self.learner.tables[0].Qb[0]
        return 0 if qb[e, k, 1] < qb[e, k, 0] else None

    def sample(self, i, energy, age, channel):
        return _sample_choice(self.learner, 0, energy, age, channel, self.rng)

    def observe(self, outcome):
        qwits3_update(self.learner, outcome)


def train_decoupled(p: SourceParams, mu_hat: float, alpha: float, T: int, seed: int,
                    schedule: StepSchedule | None = None, epsilon: float = 0.2,
                    know_p: bool = True) -> LearnerState:
    pol = DecoupledLearner(p, mu_hat, alpha, schedule, epsilon, know_p)
    env = Environment([p], seed)
    pol.reset(stream(seed, POLICY_KEY))
    for _ in range(T):
        env.step(pol)
    return pol.learner


# --- training run with curve, snapshots and resume ---------------------------

@dataclass
class TrainingRun:
    learner: LearnerState
    env: Environment
    policy: QWITS3Policy
    stride: int
    curve_t: list[int] = field(default_factory=list)
    curve_sum: list[int] = field(default_factory=list)
    total_age: int = 0
    snapshots: list[dict] = field(default_factory=list)

    @property
    def t(self) -> int:
        return self.env.t

    def curve(self) -> tuple[np.ndarray, np.ndarray]:
        """Slots and running-average AoI at every stride point."""
        t = np.asarray(self.curve_t, dtype=float)
        n = len(self.learner.params)
        return t.astype(np.int64), np.asarray(self.curve_sum, dtype=float) / (t * n)

    def window_average(self, start: int, end: int | None = None) -> float:
        """Average metric AoI over slots ``(start, end]``; both must be stride points (or 0)."""
        end = self.t if end is None else end
        sums = dict(zip(self.curve_t, self.curve_sum))
        sums[0] = 0
        if start not in sums or end not in sums:
            raise ValueError("window endpoints must be stride points")
        return (sums[end] - sums[start]) / ((end - start) * len(self.learner.params))

    def get_state(self) -> dict[str, Any]:
        return {
            "learner": self.learner.to_dict(),
            "env": self.env.get_state(),
            "policy_rng": self.policy.rng.bit_generator.state,
            "stride": self.stride,
            "curve_t": list(self.curve_t),
            "curve_sum": list(self.curve_sum),
            "total_age": self.total_age,
            "snapshots": self.snapshots,
        }


def new_training_run(params: Sequence[SourceParams], seed: int, alpha: float = 0.99,
                     schedule: StepSchedule | None = None, epsilon: float = 0.1,
                     know_p: bool = True, stride: int = 1000, coupling: str = "state",
                     initial_energy=None, initial_age=None) -> TrainingRun:
    pol = QWITS3Policy(params, alpha, schedule, epsilon, know_p, coupling=coupling)
    pol.reset(stream(seed, POLICY_KEY))
    env = Environment(params, seed, initial_energy, initial_age)
    return TrainingRun(pol.learner, env, pol, stride)


def resume_training_run(params: Sequence[SourceParams], state: dict) -> TrainingRun:
    ld = state["learner"]
    sch = StepSchedule(**ld["schedule"])
    run = new_training_run(params, state["env"]["seed"], ld["alpha"], sch, ld["epsilon"],
                           ld["know_p"], state["stride"], ld["coupling"])
    run.learner.load_tables(ld)
    run.learner.mu_max = list(ld["mu_max"])
    run.env.set_state(state["env"])
    run.policy.rng.bit_generator.state = state["policy_rng"]
    run.curve_t = list(state["curve_t"])
    run.curve_sum = list(state["curve_sum"])
    run.total_age = state["total_age"]
    run.snapshots = list(state["snapshots"])
    return run


def advance(run: TrainingRun, slots: int, snapshot_every: int | None = None) -> TrainingRun:
    """Run ``slots`` more slots of live learning."""
    env, pol, stride = run.env, run.policy, run.stride
    total = run.total_age
    for _ in range(slots):
        o = env.step(pol)
        s = sum(o.age)
        if o.success:
            s -= o.age[o.probed]
        total += s
        t = env.t
        if t % stride == 0:
            run.curve_t.append(t)
            run.curve_sum.append(total)
        if snapshot_every and t % snapshot_every == 0:
            run.snapshots.append({
                "t": t, "running_avg_aoi": total / (t * len(o.age)),
                "mu": [m.tolist() for m in run.learner.whittle_estimates()]})
    run.total_age = total
    return run


def qwits3_train(params: Sequence[SourceParams], T: int, schedule: StepSchedule | None = None,
                 epsilon: float = 0.1, seed: int = 0, know_p: bool = True, alpha: float = 0.99,
                 stride: int = 1000, snapshot_every: int | None = None,
                 coupling: str = "state") -> TrainingRun:
    if T < 1:
        raise ValueError("T must be >= 1")
    run = new_training_run(params, seed, alpha, schedule, epsilon, know_p, stride, coupling)
    return advance(run, T, snapshot_every)
