import json

import numpy as np
import pytest
from hypothesis import given, settings

from strategies import source_params
from wits3.model import SourceParams
from wits3.solver import (
    NEVER, SolverSettings, ThresholdStructureError, ValueSolution, _policy_system,
    bellman_branches, brute_force_solve, extract_thresholds, policy_value_by_iteration,
    probe_preference_set, sampling_violations, value_iterate,
)


def test_settings_validated():
    for bad in (dict(alpha=1.0), dict(alpha=0.0), dict(tol=0.0), dict(mu_hat=-1.0), dict(max_iter=0)):
        with pytest.raises(ValueError):
            SolverSettings(**bad)


def test_huge_charge_never_probes():
    p = SourceParams(1, 0.5, 3, 1, (0.5, 0.5), (0.9, 0.4), 10)
    sol = value_iterate(p, SolverSettings(alpha=0.9, mu_hat=10 / (1 - 0.9), tol=1e-11))
    assert sol.converged
    np.testing.assert_allclose(sol.J[:, -1], 100.0, atol=1e-8)
    assert sol.not_probe_set == frozenset(p.feasible_states())
    assert np.all(np.isinf(sol.thresholds.p_th[1:]) | (sol.thresholds.p_th[1:] <= 1.0))


def test_free_certain_probe_gives_zero_cost():
    p = SourceParams(1, 1.0, 3, 1, (0.3, 0.7), (1.0, 1.0), 6)
    sol = value_iterate(p, SolverSettings(alpha=0.9, mu_hat=0.0, tol=1e-12))
    np.testing.assert_allclose(sol.J[1:], 0.0, atol=1e-9)
    # thresholds equal 1 everywhere: sampling is optimal on every channel
    assert np.all(sol.thresholds.p_th[1:] == 1.0)


@pytest.mark.parametrize("mu", [0.0, 0.5, 1.0, 2.0, 5.0])
@pytest.mark.parametrize("alpha", [0.9, 0.99])
def test_matches_brute_force(tiny, mu, alpha):
    st = SolverSettings(alpha=alpha, mu_hat=mu, tol=1e-12)
    sol = value_iterate(tiny, st)
    assert sol.converged
    assert np.max(np.abs(sol.J - brute_force_solve(tiny, st))) <= 1e-6


def test_thresholds_match_branches_from_oracle_values(tiny):
    st = SolverSettings(alpha=0.9, mu_hat=1.0, tol=1e-12)
    sol = value_iterate(tiny, st)
    _, u, _, _, S = bellman_branches(tiny, brute_force_solve(tiny, st), st.alpha, st.mu_hat)
    for e in range(1, 2):
        for k in range(3):
            opt = [j for j in range(2) if S[e, k, j] <= u[e, k] + 1e-9]
            th = sol.thresholds.p_th[e, k]
            expect = min(tiny.success_probs[j] for j in opt) if opt else NEVER
            assert th == expect


def test_oracle_linear_solves_agree(tiny):
    choice = {(1, 1): (True, False), (1, 3): (True, True)}
    c, P = _policy_system(tiny, 0.9, 1.0, choice)
    direct = np.linalg.solve(np.eye(len(c)) - 0.9 * P, c)
    np.testing.assert_allclose(policy_value_by_iteration(c, P, 0.9), direct, atol=1e-10)


def test_oracle_never_probe_series():
    p = SourceParams(1, 0.5, 1, 1, (1.0,), (0.5,), 3)
    J = brute_force_solve(p, SolverSettings(alpha=0.9, mu_hat=1e6))
    # from age k the costs are k, k+1, ..., capped at 3
    for k in (1, 2, 3):
        expect = sum(0.9 ** t * min(k + t, 3) for t in range(2000))
        assert J[0, k - 1] == pytest.approx(expect, abs=1e-9)


def test_oracle_without_energy_income():
    # with no arrivals an empty buffer stays empty, so probing is never feasible
    p = SourceParams(1, 0.0, 1, 1, (1.0,), (0.5,), 4)
    J = brute_force_solve(p, SolverSettings(alpha=0.8, mu_hat=0.0))
    for k in range(1, 5):
        expect = sum(0.8 ** t * min(k + t, 4) for t in range(2000))
        assert J[0, k - 1] == pytest.approx(expect, abs=1e-9)


def test_oracle_refuses_large_instances():
    big = SourceParams(1, 0.5, 20, 1, (0.5, 0.5), (0.9, 0.1), 10)
    with pytest.raises(ValueError, match="too large"):
        brute_force_solve(big, SolverSettings())
    many = SourceParams(1, 0.5, 5, 1, (0.5, 0.5), (0.9, 0.1), 10)
    with pytest.raises(ValueError, match="too many"):
        brute_force_solve(many, SolverSettings())


def test_nonconvergence_is_flagged(tiny):
    sol = value_iterate(tiny, SolverSettings(alpha=0.99, tol=1e-12, max_iter=5))
    assert not sol.converged and sol.iterations == 5
    assert sol.thresholds is None


@settings(max_examples=40, deadline=None)
@given(source_params(max_buffer=4, max_age=6))
def test_solution_invariants(p):
    alpha = 0.9
    sol = value_iterate(p, SolverSettings(alpha=alpha, mu_hat=1.5, tol=1e-10))
    assert sol.converged
    es = p.sampling_cost
    np.testing.assert_array_equal(sol.J[es:], np.minimum(sol.u[es:], sol.v[es:]))
    np.testing.assert_array_equal(sol.J[:es], sol.u[:es])
    # one more Bellman application reproduces the branches
    Jn, u, v, _, _ = bellman_branches(p, sol.J, alpha, 1.5)
    assert np.max(np.abs(Jn - sol.J)) <= 1e-9
    assert np.max(np.abs(u - sol.u)) <= 1e-9
    # contraction of the residual trace
    r = sol.residuals
    assert np.all(r[2:] <= alpha * r[1:-1] + 1e-12)
    # nondecreasing in age
    assert np.all(np.diff(sol.J, axis=1) >= -1e-9)
    # W nonincreasing along ascending p
    order = p.sorted_channels()
    W = sol.W[es:][:, :, order]
    assert np.all(np.diff(W, axis=2) <= 1e-9)
    assert sampling_violations(sol, p) == []


def test_preference_set_strict_ties(tiny):
    sol = value_iterate(tiny, SolverSettings(alpha=0.9, mu_hat=1.0, tol=1e-12))
    tied = ValueSolution(sol.source, sol.settings, sol.J, sol.u.copy(), sol.u.copy(), sol.W, sol.S,
                         sol.residuals)
    assert probe_preference_set(tied, tiny) == frozenset()
    assert all(e >= 1 for e, _ in probe_preference_set(sol, tiny))


def test_zero_charge_probes_at_high_age(base_sources):
    p = base_sources[0]
    sol = value_iterate(p, SolverSettings(alpha=0.99, mu_hat=0.0))
    assert sol.u[p.buffer, p.age_cap - 1] >= sol.v[p.buffer, p.age_cap - 1]
    assert (p.buffer, p.age_cap) not in sol.not_probe_set


def test_source1_threshold_decreases_in_energy(base_sources):
    sol = value_iterate(base_sources[0], SolverSettings(alpha=0.99, mu_hat=2.0))
    th = sol.thresholds.p_th[1:]
    assert np.all(np.diff(th, axis=0) <= 0)


def test_non_threshold_structure_raises(tiny):
    sol = value_iterate(tiny, SolverSettings(alpha=0.9, mu_hat=1.0, tol=1e-12))
    S = sol.S.copy()
    # make the low-p channel attractive and the high-p channel not
    S[1, 0, 1] = sol.u[1, 0] - 1.0
    S[1, 0, 0] = sol.u[1, 0] + 1.0
    bad = ValueSolution(sol.source, sol.settings, sol.J, sol.u, sol.v, sol.W, S, sol.residuals)
    with pytest.raises(ThresholdStructureError) as exc:
        extract_thresholds(bad, tiny)
    assert exc.value.state == (1, 1)
    assert sampling_violations(bad, tiny) == [(1, 1)]


def test_json_round_trip(tiny):
    sol = value_iterate(tiny, SolverSettings(alpha=0.9, mu_hat=1.0, tol=1e-12))
    d = json.loads(json.dumps(sol.to_dict()))
    assert d["converged"] and len(d["states"]) == 6
    assert {(s["E"], s["K"]) for s in d["states"]} == set(tiny.states())
    assert all(s["v"] is None for s in d["states"] if s["E"] == 0)


def test_deterministic(tiny):
    st = SolverSettings(alpha=0.95, mu_hat=0.7, tol=1e-10)
    a, b = value_iterate(tiny, st), value_iterate(tiny, st)
    np.testing.assert_array_equal(a.J, b.J)
    np.testing.assert_array_equal(a.residuals, b.residuals)
