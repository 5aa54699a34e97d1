"""Per-source system model: parameters, states, actions and transition kernels.

A source is described by its Bernoulli energy-arrival rate, a finite energy
buffer, the energy spent per sample, an i.i.d. channel-state distribution with
a success probability per channel state, and an age cap that keeps the state
space finite.  States are ``(energy, age)`` pairs with ``age`` in
``1..age_cap``; after a probe the source sits in an intermediate state that
also carries the observed channel index (0-based).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

PROB_TOL = 1e-12
CONFIG_SUM_TOL = 1e-9


class ConfigError(ValueError):
    """Raised when an experiment description violates a model invariant."""


class InfeasibleAction(ValueError):
    """Raised when probing is requested for a source without enough energy."""


class SourceState(NamedTuple):
    energy: int
    age: int


class IntermediateState(NamedTuple):
    energy: int
    age: int
    channel: int


class Action(NamedTuple):
    probe: bool
    sample: bool


IDLE = Action(False, False)
PROBE = Action(True, False)
PROBE_SAMPLE = Action(True, True)
ACTIONS = (IDLE, PROBE, PROBE_SAMPLE)


@dataclass(frozen=True)
class SourceParams:
    id: int
    lam: float
    buffer: int
    sampling_cost: int
    channel_probs: tuple[float, ...]
    success_probs: tuple[float, ...]
    age_cap: int

    def __post_init__(self):
        errors = _source_errors(self)
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def m(self) -> int:
        return len(self.channel_probs)

    @property
    def q(self) -> np.ndarray:
        return np.asarray(self.channel_probs, dtype=float)

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.success_probs, dtype=float)

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of per-state tables: ``(buffer + 1, age_cap)``."""
        return (self.buffer + 1, self.age_cap)

    def sorted_channels(self) -> np.ndarray:
        """Channel indices ordered by ascending success probability (stable)."""
        return np.argsort(self.p, kind="stable")

    def states(self) -> Iterator[SourceState]:
        for e in range(self.buffer + 1):
            for k in range(1, self.age_cap + 1):
                yield SourceState(e, k)

    def feasible_states(self) -> Iterator[SourceState]:
        for s in self.states():
            if s.energy >= self.sampling_cost:
                yield s

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "lambda": self.lam,
            "buffer": self.buffer,
            "sampling_cost": self.sampling_cost,
            "channel_probs": list(self.channel_probs),
            "success_probs": list(self.success_probs),
            "age_cap": self.age_cap,
        }


def _source_errors(p: SourceParams) -> list[str]:
    errs = []
    if not 0.0 <= p.lam <= 1.0:
        errs.append(f"lambda must lie in [0, 1] (got {p.lam})")
    if p.buffer < 0:
        errs.append(f"buffer must be nonnegative (got {p.buffer})")
    if p.sampling_cost < 1:
        errs.append(f"sampling_cost must be a positive integer (got {p.sampling_cost})")
    elif p.sampling_cost > p.buffer:
        errs.append(f"sampling_cost {p.sampling_cost} exceeds buffer {p.buffer}")
    if p.age_cap < 2:
        errs.append(f"age_cap must be at least 2 (got {p.age_cap})")
    if len(p.channel_probs) == 0:
        errs.append("channel_probs must be nonempty")
    if len(p.channel_probs) != len(p.success_probs):
        errs.append("channel_probs and success_probs must have equal length")
    if any(not 0.0 <= x <= 1.0 for x in p.channel_probs):
        errs.append("channel_probs entries must lie in [0, 1]")
    elif abs(math.fsum(p.channel_probs) - 1.0) > PROB_TOL:
        errs.append(f"channel_probs sum != 1 (got {math.fsum(p.channel_probs)!r})")
    if any(not 0.0 <= x <= 1.0 for x in p.success_probs):
        errs.append("success_probs entries must lie in [0, 1]")
    return errs


@dataclass(frozen=True)
class TransitionDist:
    """Canonical next-state distribution: sorted by state, merged, no zeros."""

    items: tuple[tuple[SourceState, float], ...]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[SourceState, float]]) -> "TransitionDist":
        acc: dict[SourceState, float] = {}
        for s, pr in pairs:
            if pr > 0.0:
                acc[s] = acc.get(s, 0.0) + pr
        return cls(tuple(sorted(acc.items())))

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def as_dict(self) -> dict[SourceState, float]:
        return dict(self.items)

    def prob(self, s: SourceState) -> float:
        return self.as_dict().get(SourceState(*s), 0.0)

    def total(self) -> float:
        return math.fsum(pr for _, pr in self.items)


def _next_age(p: SourceParams, k: int) -> int:
    return min(k + 1, p.age_cap)


def _check_state(p: SourceParams, energy: int, age: int) -> None:
    if not 0 <= energy <= p.buffer or not 1 <= age <= p.age_cap:
        raise ValueError(f"state (E={energy}, K={age}) outside source {p.id} domain")


def _arrival_pairs(p: SourceParams, energy: int, age: int, weight: float = 1.0):
    # arrival-only dynamics from the given energy
    yield SourceState(min(energy + 1, p.buffer), age), weight * p.lam
    yield SourceState(energy, age), weight * (1.0 - p.lam)


def _sample_pairs(p: SourceParams, energy: int, age: int, ps: float, weight: float = 1.0):
    e0 = energy - p.sampling_cost
    e1 = min(e0 + 1, p.buffer)
    ka = _next_age(p, age)
    yield SourceState(e1, 1), weight * p.lam * ps
    yield SourceState(e0, 1), weight * (1.0 - p.lam) * ps
    yield SourceState(e1, ka), weight * p.lam * (1.0 - ps)
    yield SourceState(e0, ka), weight * (1.0 - p.lam) * (1.0 - ps)


def transition_dist(p: SourceParams, s: SourceState, act: Action) -> TransitionDist:
    """Next-state distribution of one source under a primary action."""
    e, k = s
    _check_state(p, e, k)
    if act.sample and not act.probe:
        raise InfeasibleAction("infeasible action: sampling requires probing")
    if act.probe and e < p.sampling_cost:
        raise InfeasibleAction(
            f"infeasible action: probing source {p.id} with E={e} < E_s={p.sampling_cost}"
        )
    ka = _next_age(p, k)
    if not act.sample:
        # b=1, a=0 mixes over channels but the channel does not affect the next state.
        return TransitionDist.from_pairs(_arrival_pairs(p, e, ka))
    pairs = []
    for qj, pj in zip(p.channel_probs, p.success_probs):
        pairs.extend(_sample_pairs(p, e, k, pj, qj))
    return TransitionDist.from_pairs(pairs)


def intermediate_transition_dist(
    p: SourceParams, v: IntermediateState, sample: bool
) -> TransitionDist:
    """Next-state distribution from a probed state with the channel revealed."""
    e, k, j = v
    _check_state(p, e, k)
    if not 0 <= j < p.m:
        raise ValueError(f"channel index {j} outside 0..{p.m - 1}")
    if e < p.sampling_cost:
        raise InfeasibleAction(
            f"infeasible action: intermediate state with E={e} < E_s={p.sampling_cost}"
        )
    if not sample:
        return TransitionDist.from_pairs(_arrival_pairs(p, e, _next_age(p, k)))
    return TransitionDist.from_pairs(_sample_pairs(p, e, k, p.success_probs[j]))


def stage_cost(age: int, act: Action, success_prob_if_sampling: float = 0.0) -> float:
    """Expected one-slot AoI cost; sampling pays only on failure."""
    if age < 1:
        raise ValueError(f"age must be >= 1 (got {age})")
    if act.sample:
        return age * (1.0 - success_prob_if_sampling)
    return float(age)


def joint_transition_prob(
    params: Sequence[SourceParams],
    s: Sequence[SourceState],
    acts: Sequence[Action],
    s_next: Sequence[SourceState],
) -> float:
    """Probability of a system transition; factorizes over sources."""
    if not len(params) == len(s) == len(acts) == len(s_next):
        raise ValueError("params, states, actions and next states must have equal length")
    if sum(1 for a in acts if a.probe) > 1:
        raise InfeasibleAction("collision: more than one source probed in a slot")
    prob = 1.0
    for p, si, ai, sn in zip(params, s, acts, s_next):
        prob *= transition_dist(p, SourceState(*si), ai).prob(sn)
        if prob == 0.0:
            break
    return prob


# --- configuration ---------------------------------------------------------

SOURCE_FIELDS = ("id", "lambda", "buffer", "sampling_cost", "channel_probs", "success_probs", "age_cap")


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 0.99
    tol: float = 1e-9
    max_iter: int = 200_000


@dataclass(frozen=True)
class WhittleConfig:
    tol: float = 1e-4
    mu_max: float | None = None
    audit_grid: tuple[float, ...] = tuple(np.linspace(0.0, 12.0, 40).tolist())


@dataclass(frozen=True)
class SimulationConfig:
    T: int = 100_000
    seeds: tuple[int, ...] = tuple(range(20))
    initial_energy: tuple[int, ...] | None = None
    initial_age: tuple[int, ...] | None = None
    threshold_mode: str = "own-index"
    global_mu: float | None = None


@dataclass(frozen=True)
class LearningConfig:
    T: int = 1_000_000
    seeds: tuple[int, ...] = (0,)
    epsilon: float = 0.1
    know_p: bool = True
    fast_exponent: float = 0.6
    slow_exponent: float = 0.9
    fast_scale: float = 1.0
    slow_scale: float = 1.0
    curve_stride: int = 1000
    snapshot_every: int = 100_000
    coupling: str = "state"


@dataclass(frozen=True)
class ExperimentConfig:
    sources: tuple[SourceParams, ...]
    solver: SolverConfig = field(default_factory=SolverConfig)
    whittle: WhittleConfig = field(default_factory=WhittleConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    output: str = "out"

    def to_dict(self) -> dict[str, Any]:
        def section(obj):
            return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(obj).items()}

        return {
            "sources": [p.to_dict() for p in self.sources],
            "solver": section(self.solver),
            "whittle": section(self.whittle),
            "simulation": section(self.simulation),
            "learning": section(self.learning),
            "output": self.output,
        }


def _num(path: str, x: Any, kind=float) -> Any:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"{path}: expected a number (got {x!r})")
    if kind is int:
        if float(x) != int(x):
            raise ConfigError(f"{path}: expected an integer (got {x!r})")
        return int(x)
    return float(x)


def _vec(path: str, x: Any) -> list[float]:
    if not isinstance(x, (list, tuple)) or not x:
        raise ConfigError(f"{path}: expected a nonempty list of numbers")
    return [_num(f"{path}[{i}]", v) for i, v in enumerate(x)]


def _source_from_raw(raw: dict, index: int, defaults: dict) -> SourceParams:
    path = f"sources[{index}]"
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    merged = {**defaults, **raw}
    unknown = set(merged) - set(SOURCE_FIELDS)
    if unknown:
        raise ConfigError(f"{path}: unknown fields {sorted(unknown)}")
    merged.setdefault("id", index + 1)
    missing = [f for f in SOURCE_FIELDS if f not in merged]
    if missing:
        raise ConfigError(f"{path}: missing fields {missing}")
    q = _vec(f"{path}.channel_probs", merged["channel_probs"])
    p = _vec(f"{path}.success_probs", merged["success_probs"])
    if any(not 0.0 <= v <= 1.0 for v in q):
        raise ConfigError(f"{path}.channel_probs: entries must lie in [0, 1]")
    total = math.fsum(q)
    if abs(total - 1.0) > CONFIG_SUM_TOL:
        raise ConfigError(f"{path}.channel_probs: channel_probs sum != 1 (got {total!r})")
    q = [v / total for v in q]
    try:
        return SourceParams(
            id=_num(f"{path}.id", merged["id"], int),
            lam=_num(f"{path}.lambda", merged["lambda"]),
            buffer=_num(f"{path}.buffer", merged["buffer"], int),
            sampling_cost=_num(f"{path}.sampling_cost", merged["sampling_cost"], int),
            channel_probs=tuple(q),
            success_probs=tuple(p),
            age_cap=_num(f"{path}.age_cap", merged["age_cap"], int),
        )
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _section(raw: dict, name: str, cls, path_fields: dict[str, Any]):
    body = raw.get(name, {}) or {}
    if not isinstance(body, dict):
        raise ConfigError(f"{name}: expected an object")
    unknown = set(body) - set(path_fields)
    if unknown:
        raise ConfigError(f"{name}: unknown fields {sorted(unknown)}")
    kwargs = {}
    for key, conv in path_fields.items():
        if key in body and body[key] is not None:
            kwargs[key] = conv(f"{name}.{key}", body[key])
    return cls(**kwargs)


def _ints(path, x):
    if not isinstance(x, (list, tuple)):
        raise ConfigError(f"{path}: expected a list of integers")
    return tuple(_num(f"{path}[{i}]", v, int) for i, v in enumerate(x))


def _grid(path, x):
    if isinstance(x, dict):
        try:
            start, stop, num = float(x["start"]), float(x["stop"]), int(x["num"])
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"{path}: expected {{start, stop, num}}") from None
        grid = np.linspace(start, stop, num).tolist()
    else:
        grid = _vec(path, x)
    if any(b <= a for a, b in zip(grid, grid[1:])) or any(g < 0 for g in grid):
        raise ConfigError(f"{path}: grid must be strictly increasing and nonnegative")
    return tuple(grid)


def _choice(options):
    def conv(path, x):
        if x not in options:
            raise ConfigError(f"{path}: expected one of {list(options)} (got {x!r})")
        return x

    return conv


def _bool(path, x):
    if not isinstance(x, bool):
        raise ConfigError(f"{path}: expected true/false")
    return x


def validate_config(raw: dict) -> ExperimentConfig:
    """Normalize a parsed JSON experiment description.

    ``source_defaults`` (optional) is merged under every entry of ``sources``.
    Channel distributions within 1e-9 of summing to one are renormalized.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = set(raw) - {"sources", "source_defaults", "solver", "whittle", "simulation",
                          "learning", "output", "name", "description"}
    if unknown:
        raise ConfigError(f"config: unknown top-level fields {sorted(unknown)}")
    defaults = raw.get("source_defaults", {}) or {}
    if not isinstance(defaults, dict):
        raise ConfigError("source_defaults: expected an object")
    srcs = raw.get("sources")
    if not isinstance(srcs, list) or not srcs:
        raise ConfigError("sources: expected a nonempty list")
    sources = tuple(sorted((_source_from_raw(s, i, defaults) for i, s in enumerate(srcs)),
                           key=lambda p: p.id))
    ids = [s.id for s in sources]
    if len(set(ids)) != len(ids) or any(i < 1 for i in ids):
        raise ConfigError(f"sources: ids must be distinct positive integers (got {ids})")

    solver = _section(raw, "solver", SolverConfig, {
        "alpha": _num, "tol": _num, "max_iter": lambda p, x: _num(p, x, int)})
    if not 0.0 < solver.alpha < 1.0:
        raise ConfigError(f"solver.alpha: must lie in (0, 1) (got {solver.alpha})")
    if solver.tol <= 0 or solver.max_iter < 1:
        raise ConfigError("solver: tol and max_iter must be positive")

    whittle = _section(raw, "whittle", WhittleConfig, {
        "tol": _num, "mu_max": _num, "audit_grid": _grid})
    if whittle.tol <= 0:
        raise ConfigError("whittle.tol: must be positive")

    sim = _section(raw, "simulation", SimulationConfig, {
        "T": lambda p, x: _num(p, x, int), "seeds": _ints,
        "initial_energy": _ints, "initial_age": _ints,
        "threshold_mode": _choice(("own-index", "global")), "global_mu": _num})
    if sim.T < 1:
        raise ConfigError("simulation.T: must be >= 1")
    if not sim.seeds:
        raise ConfigError("simulation.seeds: must be nonempty")
    for name, vals in (("initial_energy", sim.initial_energy), ("initial_age", sim.initial_age)):
        if vals is not None and len(vals) != len(sources):
            raise ConfigError(f"simulation.{name}: expected {len(sources)} entries")
    if sim.initial_energy is not None:
        for i, (e, p) in enumerate(zip(sim.initial_energy, sources)):
            if not 0 <= e <= p.buffer:
                raise ConfigError(f"simulation.initial_energy[{i}]: outside [0, {p.buffer}]")
    if sim.initial_age is not None:
        for i, (k, p) in enumerate(zip(sim.initial_age, sources)):
            if not 1 <= k <= p.age_cap:
                raise ConfigError(f"simulation.initial_age[{i}]: outside [1, {p.age_cap}]")
    if sim.threshold_mode == "global" and sim.global_mu is None:
        raise ConfigError("simulation.global_mu: required when threshold_mode is 'global'")

    learning = _section(raw, "learning", LearningConfig, {
        "T": lambda p, x: _num(p, x, int), "seeds": _ints, "epsilon": _num, "know_p": _bool,
        "fast_exponent": _num, "slow_exponent": _num, "fast_scale": _num, "slow_scale": _num,
        "curve_stride": lambda p, x: _num(p, x, int),
        "snapshot_every": lambda p, x: _num(p, x, int),
        "coupling": _choice(("state", "reference"))})
    if not 0.0 <= learning.epsilon <= 1.0:
        raise ConfigError("learning.epsilon: must lie in [0, 1]")
    if not 0.5 < learning.fast_exponent < learning.slow_exponent <= 1.0:
        raise ConfigError("learning: exponents must satisfy 0.5 < fast_exponent < slow_exponent <= 1")
    if learning.fast_scale <= 0 or learning.slow_scale <= 0:
        raise ConfigError("learning: step-size scales must be positive")
    if learning.T < 1 or learning.curve_stride < 1 or learning.snapshot_every < 1:
        raise ConfigError("learning: T, curve_stride and snapshot_every must be positive")

    output = raw.get("output", "out")
    if not isinstance(output, str):
        raise ConfigError("output: expected a path string")
    return ExperimentConfig(sources, solver, whittle, sim, learning, output)
