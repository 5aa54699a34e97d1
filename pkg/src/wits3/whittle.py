"""Whittle indices by bisection on the probing charge, and an indexability audit."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .model import SourceParams, SourceState
from .solver import SolverSettings, ThresholdTable, extract_thresholds, probe_preference_set, value_iterate

log = logging.getLogger(__name__)


class NotProbeFeasible(ValueError):
    pass


def default_mu_max(p: SourceParams, alpha: float) -> float:
    """Largest discounted age stream; no probe can save more than this."""
    return p.age_cap / (1.0 - alpha)


@dataclass(frozen=True)
class WhittleTable:
    source: int
    indices: np.ndarray  # [E, K-1]; nan where E < E_s
    alpha: float
    tol: float
    mu_max: float
    saturated: tuple[tuple[int, int], ...] = ()

    def index(self, energy: int, age: int) -> float:
        x = self.indices[energy, age - 1]
        if math.isnan(x):
            raise KeyError(f"no Whittle index for source {self.source} at (E={energy}, K={age})")
        return float(x)

    def rows(self):
        nE, nK = self.indices.shape
        for e in range(nE):
            for k in range(nK):
                if not math.isnan(self.indices[e, k]):
                    yield self.source, e, k + 1, float(self.indices[e, k])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "E", "K", "index"])
        for row in self.rows():
            w.writerow([row[0], row[1], row[2], repr(row[3])])
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {
            "source": self.source,
            "alpha": self.alpha,
            "tol": self.tol,
            "mu_max": self.mu_max,
            "saturated": [{"E": e, "K": k} for e, k in self.saturated],
            "indices": [{"E": e, "K": k, "index": x} for _, e, k, x in self.rows()],
        }

    @classmethod
    def from_dict(cls, d: dict, shape: tuple[int, int]) -> "WhittleTable":
        idx = np.full(shape, np.nan)
        for r in d["indices"]:
            idx[r["E"], r["K"] - 1] = r["index"]
        sat = tuple((r["E"], r["K"]) for r in d.get("saturated", []))
        return cls(d["source"], idx, d["alpha"], d["tol"], d["mu_max"], sat)


class _Gap:
    """g(mu) = v - u at one state, warm-starting every solve from the last J."""

    def __init__(self, p: SourceParams, state: SourceState, alpha: float, solver_tol: float,
                 max_iter: int, warm: bool):
        self.p, self.state = p, state
        self.alpha, self.solver_tol, self.max_iter = alpha, solver_tol, max_iter
        self.warm = warm
        self.J = None
        self.evaluations = 0

    def __call__(self, mu: float) -> float:
        st = SolverSettings(self.alpha, mu, self.solver_tol, self.max_iter)
        sol = value_iterate(self.p, st, J0=self.J if self.warm else None, thresholds=False)
        if not sol.converged:
            raise RuntimeError(f"value iteration did not converge at mu={mu} (residual {sol.residual})")
        if self.warm:
            self.J = sol.J
        self.evaluations += 1
        e, k = self.state
        return float(sol.v[e, k - 1] - sol.u[e, k - 1])


def _bisect(gap: _Gap, tol: float, mu_max: float) -> tuple[float, bool]:
    if gap(0.0) >= 0.0:
        return 0.0, False
    if gap(mu_max) < 0.0:
        return mu_max, True
    lo, hi = 0.0, mu_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gap(mid) >= 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi), False


def whittle_index(
    p: SourceParams,
    state: SourceState,
    alpha: float = 0.99,
    tol: float = 1e-4,
    mu_max: float | None = None,
    solver_tol: float = 1e-9,
    max_iter: int = 200_000,
    warm_start: bool = True,
) -> float:
    """Smallest probing charge at which not probing becomes weakly preferred.

    Returns ``mu_max`` (with a warning) when probing is still strictly
    preferred at ``mu_max``.
    """
    state = SourceState(*state)
    if state.energy < p.sampling_cost:
        raise NotProbeFeasible(
            f"state not probe-feasible: E={state.energy} < E_s={p.sampling_cost}")
    if mu_max is None:
        mu_max = default_mu_max(p, alpha)
    x, saturated = _bisect(_Gap(p, state, alpha, solver_tol, max_iter, warm_start), tol, mu_max)
    if saturated:
        log.warning("source %d state %s: index saturated at mu_max=%g", p.id, tuple(state), mu_max)
    return x


def whittle_table(
    p: SourceParams,
    alpha: float = 0.99,
    tol: float = 1e-4,
    mu_max: float | None = None,
    solver_tol: float = 1e-9,
    max_iter: int = 200_000,
    threads: int = 1,
) -> WhittleTable:
    """Whittle index of every probe-feasible state of one source."""
    if mu_max is None:
        mu_max = default_mu_max(p, alpha)
    states = list(p.feasible_states())

    def one(s):
        return _bisect(_Gap(p, s, alpha, solver_tol, max_iter, True), tol, mu_max)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, states))
    else:
        results = [one(s) for s in states]
    idx = np.full(p.shape, np.nan)
    saturated = []
    for s, (x, sat) in zip(states, results):
        idx[s.energy, s.age - 1] = x
        if sat:
            saturated.append(tuple(s))
    if saturated:
        log.warning("source %d: %d indices saturated at mu_max=%g", p.id, len(saturated), mu_max)
    return WhittleTable(p.id, idx, alpha, tol, mu_max, tuple(saturated))


@dataclass(frozen=True)
class IndexabilityReport:
    source: int
    mu_grid: tuple[float, ...]
    not_probe_sets: tuple[frozenset, ...]
    monotone: bool
    first_violation: tuple[float, float, tuple[int, int]] | None = None
    feasible_count: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "source": self.source,
            "monotone": self.monotone,
            "first_violation": None if self.first_violation is None else {
                "mu_a": self.first_violation[0], "mu_b": self.first_violation[1],
                "E": self.first_violation[2][0], "K": self.first_violation[2][1]},
            "feasible_states": self.feasible_count,
            "grid": [{"mu": mu, "not_probe": [list(s) for s in sorted(ns)]}
                     for mu, ns in zip(self.mu_grid, self.not_probe_sets)],
        }


def indexability_scan(
    p: SourceParams,
    mu_grid: Sequence[float],
    alpha: float = 0.99,
    solver_tol: float = 1e-9,
    max_iter: int = 200_000,
) -> IndexabilityReport:
    """Check that the not-probe set only grows along an increasing charge grid."""
    grid = tuple(float(x) for x in mu_grid)
    if any(b <= a for a, b in zip(grid, grid[1:])) or any(x < 0 for x in grid):
        raise ValueError("mu grid must be strictly increasing and nonnegative")
    sets = []
    J = None
    for mu in grid:
        sol = value_iterate(p, SolverSettings(alpha, mu, solver_tol, max_iter), J0=J, thresholds=False)
        J = sol.J
        sets.append(probe_preference_set(sol, p))
    violation = None
    for a in range(len(grid) - 1):
        lost = sets[a] - sets[a + 1]
        if lost:
            violation = (grid[a], grid[a + 1], min(lost))
            break
    return IndexabilityReport(p.id, grid, tuple(sets), violation is None, violation,
                              sum(1 for _ in p.feasible_states()))


def thresholds_at_own_index(
    p: SourceParams,
    table: WhittleTable,
    solver_tol: float = 1e-9,
    max_iter: int = 200_000,
) -> ThresholdTable:
    """Sampling thresholds where each state uses its own Whittle index as charge."""
    p_th = np.full(p.shape, np.nan)
    chan = np.full(p.shape, -1, dtype=int)
    mu = np.full(p.shape, np.nan)
    J = None
    for s in p.feasible_states():
        e, k = s.energy, s.age - 1
        x = table.indices[e, k]
        sol = value_iterate(p, SolverSettings(table.alpha, x, solver_tol, max_iter), J0=J)
        if not sol.converged:
            raise RuntimeError(f"value iteration did not converge at mu={x}")
        J = sol.J
        p_th[e, k] = sol.thresholds.p_th[e, k]
        chan[e, k] = sol.thresholds.channel[e, k]
        mu[e, k] = x
    return ThresholdTable(p.id, p_th, chan, mu)


def thresholds_at(p: SourceParams, alpha: float, mu_hat: float, solver_tol: float = 1e-9,
                  max_iter: int = 200_000) -> ThresholdTable:
    sol = value_iterate(p, SolverSettings(alpha, mu_hat, solver_tol, max_iter))
    if not sol.converged:
        raise RuntimeError(f"value iteration did not converge at mu={mu_hat}")
    return extract_thresholds(sol, p)
