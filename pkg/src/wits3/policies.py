"""Per-slot scheduling policies: WITS3 and the greedy retransmission baselines.

The pure step functions (``wits3_probe``, ``gma_r_step``, ...) work on
``SourceState`` sequences and 1-based source ids.  The ``*Policy`` classes
wrap the same rules behind the slot interface used by the simulator::

    i = policy.probe(energy, age)            # 0-based source index or None
    a = policy.sample(i, energy[i], age[i], channel)
    policy.observe(outcome)                  # SlotOutcome, after arrivals and aging

and precompute lookup lists so the hot loop stays in plain Python.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import IntermediateState, SourceParams, SourceState
from .solver import ThresholdTable
from .whittle import WhittleTable

POLICY_NAMES = ("wits3", "gma-r", "gme-r", "random", "q-wits3")


@dataclass(frozen=True)
class PolicyDecision:
    probe_target: int | None
    sample_rule: Mapping[int, bool]


@dataclass(frozen=True)
class BaselineLockState:
    locked_source: int | None = None


NO_PROBE = PolicyDecision(None, {})


def _feasible(params: Sequence[SourceParams], system: Sequence[SourceState]) -> list[int]:
    return [i for i, (p, s) in enumerate(zip(params, system)) if s[0] >= p.sampling_cost]


def wits3_probe(
    system: Sequence[SourceState],
    tables: Sequence[WhittleTable],
    params: Sequence[SourceParams],
) -> int | None:
    """Id of the probe-feasible source with the highest Whittle index (ties: lowest id)."""
    best, best_x = None, -math.inf
    for p, s, t in sorted(zip(params, system, tables), key=lambda z: z[0].id):
        if s[0] < p.sampling_cost:
            continue
        x = t.index(s[0], s[1])
        if x > best_x:
            best, best_x = p.id, x
    return best


def wits3_sample(probed: IntermediateState, thresholds: ThresholdTable, p: SourceParams) -> bool:
    """Sample iff the probed channel's success probability reaches the threshold."""
    e, k, j = probed
    if e < p.sampling_cost:
        raise ValueError(f"intermediate state with E={e} < E_s={p.sampling_cost}")
    return p.success_probs[j] >= thresholds.threshold(e, k)


def _greedy_step(key, lock: BaselineLockState, system, params):
    ids = [p.id for p in params]
    if lock.locked_source is not None:
        i = ids.index(lock.locked_source)
        if system[i][0] >= params[i].sampling_cost:
            return PolicyDecision(lock.locked_source, _always(params[i])), lock
    feas = _feasible(params, system)
    if not feas:
        return NO_PROBE, BaselineLockState()
    # max over the key, ties to the lowest id
    i = max(feas, key=lambda n: (key(system[n]), -params[n].id))
    return PolicyDecision(params[i].id, _always(params[i])), BaselineLockState(params[i].id)


def _always(p: SourceParams) -> dict[int, bool]:
    return {j: True for j in range(p.m)}


def gma_r_step(lock: BaselineLockState, system: Sequence[SourceState],
               params: Sequence[SourceParams]) -> tuple[PolicyDecision, BaselineLockState]:
    """Greedy maximum age with retransmission.

    The returned lock names the probed source; call ``release_lock`` with the
    transmission outcome to clear it on success.
    """
    return _greedy_step(lambda s: s[1], lock, system, params)


def gme_r_step(lock: BaselineLockState, system: Sequence[SourceState],
               params: Sequence[SourceParams]) -> tuple[PolicyDecision, BaselineLockState]:
    """Greedy maximum energy with retransmission."""
    return _greedy_step(lambda s: s[0], lock, system, params)


def release_lock(lock: BaselineLockState, success: bool) -> BaselineLockState:
    return BaselineLockState() if success else lock


def random_step(system: Sequence[SourceState], params: Sequence[SourceParams],
                rng: np.random.Generator) -> PolicyDecision:
    feas = _feasible(params, system)
    if not feas:
        return NO_PROBE
    i = feas[int(rng.integers(len(feas)))]
    coin = bool(rng.random() < 0.5)
    return PolicyDecision(params[i].id, {j: coin for j in range(params[i].m)})


# --- slot-interface policies for the simulator ------------------------------

class Policy:
    name = "policy"
    metadata: dict = {}

    def reset(self, rng: np.random.Generator | None = None) -> None:
        pass

    def probe(self, energy: list[int], age: list[int]) -> int | None:
        raise NotImplementedError

    def sample(self, i: int, energy: int, age: int, channel: int) -> bool:
        raise NotImplementedError

    def observe(self, outcome) -> None:
        pass


class WITS3Policy(Policy):
    name = "wits3"

    def __init__(self, params: Sequence[SourceParams], tables: Sequence[WhittleTable],
                 thresholds: Sequence[ThresholdTable], threshold_mode: str = "own-index"):
        self.params = list(params)
        self.es = [p.sampling_cost for p in params]
        self.index = [t.indices.tolist() for t in tables]
        self.p_th = [t.p_th.tolist() for t in thresholds]
        self.p = [list(p.success_probs) for p in params]
        self.metadata = {"threshold_mode": threshold_mode}

    def probe(self, energy, age):
        best, best_x = None, -math.inf
        for i in range(len(energy)):
            e = energy[i]
            if e >= self.es[i]:
                x = self.index[i][e][age[i] - 1]
                if x > best_x:
                    best, best_x = i, x
        return best

    def sample(self, i, energy, age, channel):
        return self.p[i][channel] >= self.p_th[i][energy][age - 1]


class GreedyRetransmitPolicy(Policy):
    def __init__(self, params: Sequence[SourceParams], by: str):
        if by not in ("age", "energy"):
            raise ValueError(by)
        self.name = "gma-r" if by == "age" else "gme-r"
        self.by_age = by == "age"
        self.es = [p.sampling_cost for p in params]
        self.locked = None

    def reset(self, rng=None):
        self.locked = None

    def probe(self, energy, age):
        es = self.es
        if self.locked is not None and energy[self.locked] >= es[self.locked]:
            return self.locked
        self.locked = None
        key = age if self.by_age else energy
        best, best_x = None, -1
        for i in range(len(energy)):
            if energy[i] >= es[i] and key[i] > best_x:
                best, best_x = i, key[i]
        return best

    def sample(self, i, energy, age, channel):
        return True

    def observe(self, outcome):
        if outcome.probed is not None:
            self.locked = outcome.probed if outcome.sampled and not outcome.success else None


class RandomPolicy(Policy):
    name = "random"

    def __init__(self, params: Sequence[SourceParams]):
        self.es = [p.sampling_cost for p in params]
        self.rng = None

    def reset(self, rng=None):
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def probe(self, energy, age):
        feas = [i for i in range(len(energy)) if energy[i] >= self.es[i]]
        if not feas:
            return None
        return feas[int(self.rng.integers(len(feas)))]

    def sample(self, i, energy, age, channel):
        return bool(self.rng.random() < 0.5)


class FixedThresholdPolicy(Policy):
    """Probe the lowest-id feasible source and sample when ``p >= threshold``."""

    name = "fixed-threshold"

    def __init__(self, params: Sequence[SourceParams], threshold: float = 0.0):
        self.es = [p.sampling_cost for p in params]
        self.p = [list(p.success_probs) for p in params]
        self.threshold = threshold

    def probe(self, energy, age):
        for i in range(len(energy)):
            if energy[i] >= self.es[i]:
                return i
        return None

    def sample(self, i, energy, age, channel):
        return self.p[i][channel] >= self.threshold
