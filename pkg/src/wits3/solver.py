"""Discounted value iteration for one decoupled source at a fixed probing charge.

Tables are indexed ``[energy, age - 1]`` (and ``[..., channel]`` for
intermediate quantities).  ``u`` is the cost of not probing, ``v`` the cost of
probing (charge included), ``W`` the post-probe cost-to-go per channel and
``S`` the sampling branch of ``W`` so that ``W = min(u, S)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numba import njit

from .model import SourceParams

NEVER = math.inf  # threshold sentinel: sampling never optimal


class ThresholdStructureError(RuntimeError):
    """The optimal sampling set at some state is not upward-closed in p."""

    def __init__(self, state, channels):
        self.state = state
        self.channels = channels
        super().__init__(
            f"non-threshold sampling set at (E={state[0]}, K={state[1]}): optimal channels {channels}"
        )


@dataclass(frozen=True)
class SolverSettings:
    alpha: float = 0.99
    mu_hat: float = 0.0
    tol: float = 1e-9
    max_iter: int = 200_000

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1) (got {self.alpha})")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol and max_iter must be positive")
        if self.mu_hat < 0:
            raise ValueError(f"mu_hat must be nonnegative (got {self.mu_hat})")


@dataclass(frozen=True)
class ThresholdTable:
    """Sampling thresholds per state.

    ``p_th[E, K-1]`` is the success probability of the least reliable channel
    at which sampling is optimal (``inf`` if never, ``nan`` for ``E < E_s``);
    ``channel`` holds that channel's index (-1 when undefined).  ``mu`` is the
    probing charge each entry was computed at.
    """

    source: int
    p_th: np.ndarray
    channel: np.ndarray
    mu: np.ndarray

    def threshold(self, energy: int, age: int) -> float:
        return float(self.p_th[energy, age - 1])

    def rows(self):
        nE, nK = self.p_th.shape
        for e in range(nE):
            for k in range(nK):
                if not math.isnan(self.p_th[e, k]):
                    yield e, k + 1, float(self.p_th[e, k]), int(self.channel[e, k])


@dataclass(frozen=True)
class ValueSolution:
    source: int
    settings: SolverSettings
    J: np.ndarray
    u: np.ndarray
    v: np.ndarray
    W: np.ndarray
    S: np.ndarray
    residuals: np.ndarray
    thresholds: ThresholdTable | None = None
    not_probe_set: frozenset = field(default_factory=frozenset)

    @property
    def iterations(self) -> int:
        return int(self.residuals.size)

    @property
    def residual(self) -> float:
        return float(self.residuals[-1]) if self.residuals.size else math.inf

    @property
    def converged(self) -> bool:
        return self.residual <= self.settings.tol

    def q_star(self) -> tuple[np.ndarray, np.ndarray]:
        """Optimal primary and intermediate Q-tables implied by the solution.

        ``Qb[..., 0] = u``, ``Qb[..., 1] = v`` (``nan`` where probing is
        infeasible); ``Qa[..., j, 0] = u`` and ``Qa[..., j, 1] = S``.
        """
        v = np.where(np.isfinite(self.v), self.v, np.nan)
        Qb = np.stack([self.u, v], axis=-1)
        u_b = np.broadcast_to(self.u[..., None], self.S.shape)
        Qa = np.stack([np.where(np.isnan(self.S), np.nan, u_b), self.S], axis=-1)
        return Qb, Qa

    def to_dict(self) -> dict[str, Any]:
        nE, nK = self.J.shape
        states, inter = [], []
        for e in range(nE):
            for k in range(nK):
                states.append({
                    "E": e, "K": k + 1, "J": float(self.J[e, k]), "u": float(self.u[e, k]),
                    "v": _finite_or_none(self.v[e, k]),
                })
                for j in range(self.W.shape[2]):
                    if not math.isnan(self.W[e, k, j]):
                        inter.append({"E": e, "K": k + 1, "j": j, "W": float(self.W[e, k, j]),
                                      "sample_cost": float(self.S[e, k, j])})
        out = {
            "source": self.source,
            "alpha": self.settings.alpha,
            "mu_hat": self.settings.mu_hat,
            "tol": self.settings.tol,
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "states": states,
            "intermediate": inter,
            "not_probe_set": [{"E": e, "K": k} for e, k in sorted(self.not_probe_set)],
        }
        if self.thresholds is not None:
            out["thresholds"] = [
                {"E": e, "K": k, "p_th": _finite_or_none(pt), "channel": c}
                for e, k, pt, c in self.thresholds.rows()
            ]
        return out


def _finite_or_none(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


@njit(cache=True, nogil=True)
def _bellman(J, lam, es, q, p, alpha, mu, u, v, W, S, Jn):
    nE, nK = J.shape
    B = nE - 1
    m = q.shape[0]
    for e in range(nE):
        eu = min(e + 1, B)
        for k in range(nK):
            age = k + 1.0
            kn = min(k + 1, nK - 1)
            idle = age + alpha * (lam * J[eu, kn] + (1.0 - lam) * J[e, kn])
            u[e, k] = idle
            if e >= es:
                e0 = e - es
                e1 = min(e0 + 1, B)
                ok = lam * J[e1, 0] + (1.0 - lam) * J[e0, 0]
                fail = lam * J[e1, kn] + (1.0 - lam) * J[e0, kn]
                acc = 0.0
                for j in range(m):
                    pj = p[j]
                    samp = age * (1.0 - pj) + alpha * (pj * ok + (1.0 - pj) * fail)
                    S[e, k, j] = samp
                    w = samp if samp <= idle else idle
                    W[e, k, j] = w
                    acc += q[j] * w
                vv = mu + acc
                v[e, k] = vv
                Jn[e, k] = vv if vv < idle else idle
            else:
                v[e, k] = np.inf
                for j in range(m):
                    S[e, k, j] = np.nan
                    W[e, k, j] = np.nan
                Jn[e, k] = idle


@njit(cache=True, nogil=True)
def _iterate(J0, lam, es, q, p, alpha, mu, tol, max_iter):
    nE, nK = J0.shape
    m = q.shape[0]
    J = J0.copy()
    Jn = np.empty_like(J)
    u = np.empty_like(J)
    v = np.empty_like(J)
    W = np.empty((nE, nK, m))
    S = np.empty((nE, nK, m))
    res = np.empty(max_iter)
    n = 0
    while n < max_iter:
        _bellman(J, lam, es, q, p, alpha, mu, u, v, W, S, Jn)
        r = 0.0
        for e in range(nE):
            for k in range(nK):
                d = abs(Jn[e, k] - J[e, k])
                if d > r:
                    r = d
        res[n] = r
        n += 1
        J, Jn = Jn, J
        if r <= tol:
            break
    return J, u, v, W, S, res[:n]


def _kernel_args(p: SourceParams):
    return float(p.lam), int(p.sampling_cost), p.q, p.p


def value_iterate(
    p: SourceParams,
    settings: SolverSettings,
    J0: np.ndarray | None = None,
    thresholds: bool = True,
) -> ValueSolution:
    """Solve the decoupled source MDP at charge ``settings.mu_hat``.

    Synchronous sweeps from ``J0`` (zeros by default).  ``u``, ``v``, ``W``
    and ``S`` are the branches of the final sweep, so ``J == min(u, v)``
    holds exactly on probe-feasible states.  Non-convergence is reported
    through ``converged``; thresholds are only extracted for converged
    solutions.
    """
    if J0 is None:
        J0 = np.zeros(p.shape)
    lam, es, q, pp = _kernel_args(p)
    J, u, v, W, S, res = _iterate(
        np.ascontiguousarray(J0, dtype=float), lam, es, q, pp,
        float(settings.alpha), float(settings.mu_hat), float(settings.tol), int(settings.max_iter),
    )
    sol = ValueSolution(p.id, settings, J, u, v, W, S, res)
    if sol.converged:
        sol = ValueSolution(
            p.id, settings, J, u, v, W, S, res,
            thresholds=extract_thresholds(sol, p) if thresholds else None,
            not_probe_set=probe_preference_set(sol, p),
        )
    return sol


def bellman_branches(p: SourceParams, J: np.ndarray, alpha: float, mu_hat: float):
    """One Bellman application: returns ``(J_new, u, v, W, S)``."""
    nE, nK = J.shape
    u = np.empty_like(J)
    v = np.empty_like(J)
    W = np.empty((nE, nK, p.m))
    S = np.empty((nE, nK, p.m))
    Jn = np.empty_like(J)
    lam, es, q, pp = _kernel_args(p)
    _bellman(np.ascontiguousarray(J, dtype=float), lam, es, q, pp, float(alpha), float(mu_hat),
             u, v, W, S, Jn)
    return Jn, u, v, W, S


def extract_thresholds(sol: ValueSolution, p: SourceParams) -> ThresholdTable:
    """Threshold sampling rule from the two branches of ``W``.

    Sampling is optimal on a channel when its branch does not exceed the idle
    branch (ties sample).  Raises ``ThresholdStructureError`` when the
    optimal channel set at some state is not upward-closed in p.
    """
    nE, nK = p.shape
    order = p.sorted_channels()
    ps = p.p[order]
    p_th = np.full((nE, nK), np.nan)
    chan = np.full((nE, nK), -1, dtype=int)
    for e in range(p.sampling_cost, nE):
        for k in range(nK):
            ok = sol.S[e, k, order] <= sol.u[e, k]
            if not ok.any():
                p_th[e, k] = NEVER
                continue
            first = int(np.argmax(ok))
            if not ok[ps >= ps[first]].all():
                raise ThresholdStructureError((e, k + 1), [int(c) for c in order[ok]])
            p_th[e, k] = ps[first]
            chan[e, k] = order[first]
    mu = np.full((nE, nK), float(sol.settings.mu_hat))
    return ThresholdTable(p.id, p_th, chan, mu)


def sampling_violations(sol: ValueSolution, p: SourceParams) -> list[tuple[int, int]]:
    """States where the optimal sampling set is not upward-closed in p."""
    bad = []
    order = p.sorted_channels()
    ps = p.p[order]
    for e in range(p.sampling_cost, p.buffer + 1):
        for k in range(p.age_cap):
            ok = sol.S[e, k, order] <= sol.u[e, k]
            if ok.any() and not ok[ps >= ps[int(np.argmax(ok))]].all():
                bad.append((e, k + 1))
    return bad


def probe_preference_set(sol: ValueSolution, p: SourceParams, tie_tol: float = 0.0) -> frozenset:
    """States (E >= E_s) where not probing is strictly better than probing."""
    out = set()
    for e in range(p.sampling_cost, p.buffer + 1):
        for k in range(p.age_cap):
            if sol.u[e, k] < sol.v[e, k] - tie_tol:
                out.add((e, k + 1))
    return frozenset(out)


# --- exhaustive oracle ------------------------------------------------------

MAX_ORACLE_STATES = 200
MAX_ORACLE_POLICIES = 200_000


def _policy_system(p: SourceParams, alpha: float, mu: float, choice: dict):
    """Cost vector and transition matrix for one stationary deterministic policy."""
    states = list(p.states())
    pos = {s: i for i, s in enumerate(states)}
    n = len(states)
    P = np.zeros((n, n))
    c = np.zeros(n)
    lam, B = p.lam, p.buffer
    for i, (e, k) in enumerate(states):
        kn = min(k + 1, p.age_cap)
        rule = choice.get((e, k))
        if rule is None:
            c[i] = k
            P[i, pos[(min(e + 1, B), kn)]] += lam
            P[i, pos[(e, kn)]] += 1 - lam
            continue
        c[i] = mu
        e0 = e - p.sampling_cost
        e1 = min(e0 + 1, B)
        for qj, pj, samp in zip(p.channel_probs, p.success_probs, rule):
            if samp:
                c[i] += qj * k * (1 - pj)
                P[i, pos[(e1, 1)]] += qj * lam * pj
                P[i, pos[(e0, 1)]] += qj * (1 - lam) * pj
                P[i, pos[(e1, kn)]] += qj * lam * (1 - pj)
                P[i, pos[(e0, kn)]] += qj * (1 - lam) * (1 - pj)
            else:
                c[i] += qj * k
                P[i, pos[(min(e + 1, B), kn)]] += qj * lam
                P[i, pos[(e, kn)]] += qj * (1 - lam)
    return c, P


def brute_force_solve(p: SourceParams, settings: SolverSettings) -> np.ndarray:
    """Optimal J by enumerating every stationary deterministic policy.

    Each probe-feasible state picks either "do not probe" or "probe" paired
    with an arbitrary per-channel sample/idle rule; every policy's value is
    the exact solution of ``(I - alpha P) J = c``.  Returns the pointwise
    minimum over policies, shaped like the solver's ``J`` table.
    """
    n_states = (p.buffer + 1) * p.age_cap
    if n_states > MAX_ORACLE_STATES:
        raise ValueError(f"state space too large for enumeration ({n_states} > {MAX_ORACLE_STATES})")
    feasible = list(p.feasible_states())
    options = [None] + list(itertools.product((False, True), repeat=p.m))
    n_policies = len(options) ** len(feasible)
    if n_policies > MAX_ORACLE_POLICIES:
        raise ValueError(f"too many policies for enumeration ({n_policies} > {MAX_ORACLE_POLICIES})")
    best = np.full(n_states, np.inf)
    eye = np.eye(n_states)
    for combo in itertools.product(options, repeat=len(feasible)):
        choice = {s: r for s, r in zip(feasible, combo) if r is not None}
        c, P = _policy_system(p, settings.alpha, settings.mu_hat, choice)
        J = np.linalg.solve(eye - settings.alpha * P, c)
        np.minimum(best, J, out=best)
    return best.reshape(p.shape)


def policy_value_by_iteration(c: np.ndarray, P: np.ndarray, alpha: float, tol: float = 1e-13) -> np.ndarray:
    """Fixed point of ``J = c + alpha P J`` by successive substitution."""
    J = np.zeros_like(c)
    while True:
        Jn = c + alpha * (P @ J)
        if np.max(np.abs(Jn - J)) <= tol:
            return Jn
        J = Jn
