"""Slot-based Monte-Carlo simulation of N energy-harvesting sources.

Within a slot: the policy picks a probe target, the target's channel is
revealed, the policy decides whether to sample, a sampled packet succeeds
with the channel's success probability and costs ``E_s`` energy, the metric
age is recorded (0 for a successful sample, else the current age), energy
arrivals are credited with buffer clipping, and ages advance (1 after a
success, ``min(K + 1, K_max)`` otherwise).

Randomness comes from one stream per (source, purpose), seeded with
``SeedSequence(seed, spawn_key=(source_id, purpose))``.  Every stream is
consumed once per slot whether or not the draw is used, so channel and
arrival realizations do not depend on the policy and adding a source leaves
the others' realizations unchanged.  Policy randomness uses the key ``(0, 0)``.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, NamedTuple, Sequence

import numpy as np

from .model import SourceParams

ARRIVAL, CHANNEL, TRANSMISSION = 0, 1, 2
POLICY_KEY = (0, 0)
CHUNK = 4096


def stream(seed: int, key: tuple[int, ...]) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


class SlotOutcome(NamedTuple):
    energy: list       # slot-start energies
    age: list          # slot-start ages
    probed: int | None  # 0-based source index
    channel: int       # -1 when nothing was probed
    sampled: bool
    success: bool
    arrivals: list
    next_energy: list
    next_age: list


class Environment:
    """System state plus the per-source random streams."""

    def __init__(self, params: Sequence[SourceParams], seed: int,
                 initial_energy: Sequence[int] | None = None,
                 initial_age: Sequence[int] | None = None, chunk: int = CHUNK):
        self.params = list(params)
        self.seed = int(seed)
        self.chunk = chunk
        n = len(self.params)
        self.energy = list(initial_energy) if initial_energy is not None else [p.buffer for p in params]
        self.age = list(initial_age) if initial_age is not None else [1] * n
        if len(self.energy) != n or len(self.age) != n:
            raise ValueError("initial conditions must have one entry per source")
        for p, e, k in zip(self.params, self.energy, self.age):
            if not 0 <= e <= p.buffer or not 1 <= k <= p.age_cap:
                raise ValueError(f"initial state (E={e}, K={k}) outside source {p.id} domain")
        self.t = 0
        self._gens = [[stream(self.seed, (p.id, purpose)) for purpose in (ARRIVAL, CHANNEL, TRANSMISSION)]
                      for p in self.params]
        self._lam = [p.lam for p in self.params]
        self._cum = [np.cumsum(p.q) for p in self.params]
        self._m = [p.m for p in self.params]
        self._p = [list(p.success_probs) for p in self.params]
        self._es = [p.sampling_cost for p in self.params]
        self._B = [p.buffer for p in self.params]
        self._kmax = [p.age_cap for p in self.params]
        self._refill()

    def _refill(self):
        self._chunk_states = [[g.bit_generator.state for g in gens] for gens in self._gens]
        self._arr, self._chan, self._tx = [], [], []
        for i, (ga, gc, gt) in enumerate(self._gens):
            self._arr.append((ga.random(self.chunk) < self._lam[i]).tolist())
            ch = np.minimum(np.searchsorted(self._cum[i], gc.random(self.chunk), side="right"),
                            self._m[i] - 1)
            self._chan.append(ch.tolist())
            self._tx.append(gt.random(self.chunk).tolist())
        self._pos = 0

    def step(self, policy) -> SlotOutcome:
        if self._pos == self.chunk:
            self._refill()
        pos = self._pos
        self._pos += 1
        n = len(self.energy)
        E, K = self.energy, self.age
        e0, k0 = list(E), list(K)
        i = policy.probe(e0, k0)
        channel, sampled, success = -1, False, False
        if i is not None:
            if E[i] < self._es[i]:
                raise RuntimeError(f"policy probed source {i} without enough energy")
            channel = self._chan[i][pos]
            sampled = bool(policy.sample(i, E[i], K[i], channel))
            if sampled:
                success = self._tx[i][pos] < self._p[i][channel]
                E[i] -= self._es[i]
        arrivals = [self._arr[s][pos] for s in range(n)]
        for s in range(n):
            if arrivals[s] and E[s] < self._B[s]:
                E[s] += 1
            if success and s == i:
                K[s] = 1
            elif K[s] < self._kmax[s]:
                K[s] += 1
        self.t += 1
        out = SlotOutcome(e0, k0, i, channel, sampled, success, arrivals, list(E), list(K))
        policy.observe(out)
        return out

    def get_state(self) -> dict[str, Any]:
        return {"seed": self.seed, "t": self.t, "chunk": self.chunk, "pos": self._pos,
                "energy": list(self.energy), "age": list(self.age),
                "chunk_states": self._chunk_states}

    def set_state(self, state: dict[str, Any]) -> None:
        if state["seed"] != self.seed or state["chunk"] != self.chunk:
            raise ValueError("environment snapshot does not match this environment")
        for gens, sts in zip(self._gens, state["chunk_states"]):
            for g, st in zip(gens, sts):
                g.bit_generator.state = st
        self._refill()
        self._pos = state["pos"]
        self.energy = list(state["energy"])
        self.age = list(state["age"])
        self.t = state["t"]


@dataclass
class EpisodeTrace:
    """Per-slot records; arrays are ``(T, N)`` unless noted."""

    energy: np.ndarray
    age: np.ndarray
    metric_age: np.ndarray
    probed: np.ndarray    # (T,), source id, 0 when nothing was probed
    sampled: np.ndarray   # (T,)
    channel: np.ndarray   # (T,), -1 when nothing was probed
    success: np.ndarray   # (T,)
    final_energy: np.ndarray
    final_age: np.ndarray
    source_ids: tuple[int, ...]
    seed: int
    config_hash: str = ""

    @property
    def T(self) -> int:
        return self.probed.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "source", "E", "K", "metric_age", "probed", "sampled", "channel", "success"])
        for t in range(self.T):
            pid = int(self.probed[t])
            for n, sid in enumerate(self.source_ids):
                mine = pid == sid
                w.writerow([t + 1, sid, int(self.energy[t, n]), int(self.age[t, n]),
                            int(self.metric_age[t, n]), int(mine),
                            int(mine and self.sampled[t]), int(self.channel[t]) if mine else -1,
                            int(mine and self.success[t])])
        return buf.getvalue()


@dataclass
class Metrics:
    time_avg_aoi: float
    per_source_avg: np.ndarray
    cumulative: np.ndarray
    probe_counts: np.ndarray
    sample_counts: np.ndarray
    success_counts: np.ndarray
    outage_slots: np.ndarray

    def to_dict(self, with_series: bool = False) -> dict[str, Any]:
        d = {
            "time_avg_aoi": self.time_avg_aoi,
            "per_source_avg": self.per_source_avg.tolist(),
            "probe_counts": self.probe_counts.tolist(),
            "sample_counts": self.sample_counts.tolist(),
            "success_counts": self.success_counts.tolist(),
            "outage_slots": self.outage_slots.tolist(),
        }
        if with_series:
            d["cumulative"] = self.cumulative.tolist()
        return d


def cumulative_average_age(trace: EpisodeTrace) -> np.ndarray:
    """Running mean of the metric age over slots and sources."""
    if trace.T == 0:
        raise ValueError("empty trace")
    per_slot = trace.metric_age.sum(axis=1, dtype=float)
    t = np.arange(1, trace.T + 1)
    return np.cumsum(per_slot) / (t * trace.metric_age.shape[1])


def metrics_from_trace(trace: EpisodeTrace, params: Sequence[SourceParams]) -> Metrics:
    ids = np.asarray(trace.source_ids)
    onehot = trace.probed[:, None] == ids[None, :]
    es = np.asarray([p.sampling_cost for p in params])
    return Metrics(
        time_avg_aoi=float(trace.metric_age.mean()),
        per_source_avg=trace.metric_age.mean(axis=0),
        cumulative=cumulative_average_age(trace),
        probe_counts=onehot.sum(axis=0),
        sample_counts=(onehot & trace.sampled[:, None]).sum(axis=0),
        success_counts=(onehot & trace.success[:, None]).sum(axis=0),
        outage_slots=(trace.energy < es[None, :]).sum(axis=0),
    )


def run_episode(
    params: Sequence[SourceParams],
    policy,
    T: int,
    seed: int,
    initial_energy: Sequence[int] | None = None,
    initial_age: Sequence[int] | None = None,
    config_hash: str = "",
) -> tuple[EpisodeTrace, Metrics]:
    if T < 1:
        raise ValueError("T must be >= 1")
    env = Environment(params, seed, initial_energy, initial_age)
    policy.reset(stream(seed, POLICY_KEY))
    ids = [p.id for p in params]
    energy, age, metric = [], [], []
    probed, sampled, channel, success = [], [], [], []
    step = env.step
    for _ in range(T):
        o = step(policy)
        energy.append(o.energy)
        age.append(o.age)
        if o.success:
            m = list(o.age)
            m[o.probed] = 0
            metric.append(m)
        else:
            metric.append(o.age)
        probed.append(0 if o.probed is None else ids[o.probed])
        sampled.append(o.sampled)
        channel.append(o.channel)
        success.append(o.success)
    trace = EpisodeTrace(
        energy=np.asarray(energy, dtype=np.int64),
        age=np.asarray(age, dtype=np.int64),
        metric_age=np.asarray(metric, dtype=np.int64),
        probed=np.asarray(probed, dtype=np.int64),
        sampled=np.asarray(sampled, dtype=bool),
        channel=np.asarray(channel, dtype=np.int64),
        success=np.asarray(success, dtype=bool),
        final_energy=np.asarray(env.energy),
        final_age=np.asarray(env.age),
        source_ids=tuple(ids),
        seed=seed,
        config_hash=config_hash,
    )
    return trace, metrics_from_trace(trace, params)


@dataclass
class ReplicationSummary:
    policy: str
    seeds: tuple[int, ...]
    values: np.ndarray      # time-averaged AoI per seed
    mean_cumulative: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def stderr(self) -> float:
        n = self.values.size
        return float(self.values.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan


def _episode_job(args):
    params, policy, T, seed, init_e, init_k = args
    _, m = run_episode(params, policy, T, seed, init_e, init_k)
    return m.time_avg_aoi, m.cumulative


def default_threads() -> int:
    return max(1, int(os.environ.get("WITS3_THREADS", "1")))


def run_replications(
    params: Sequence[SourceParams],
    policy,
    T: int,
    seeds: Sequence[int],
    initial_energy: Sequence[int] | None = None,
    initial_age: Sequence[int] | None = None,
    threads: int | None = None,
) -> ReplicationSummary:
    """Independent episodes per seed; mean and standard error of the time-averaged AoI."""
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    threads = default_threads() if threads is None else threads
    jobs = [(list(params), policy, T, s, initial_energy, initial_age) for s in seeds]
    if threads > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(threads) as ex:
            results = list(ex.map(_episode_job, jobs))
    else:
        results = [_episode_job(j) for j in jobs]
    values = np.asarray([r[0] for r in results])
    mean_cum = np.mean([r[1] for r in results], axis=0)
    return ReplicationSummary(getattr(policy, "name", "policy"), seeds, values, mean_cum)
