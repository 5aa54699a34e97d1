import numpy as np
import pytest

from wits3.model import IDLE, PROBE, PROBE_SAMPLE, IntermediateState, SourceParams, intermediate_transition_dist, transition_dist
from wits3.policies import FixedThresholdPolicy, GreedyRetransmitPolicy, RandomPolicy, WITS3Policy
from wits3.sim import (
    Environment, cumulative_average_age, metrics_from_trace, run_episode, run_replications,
)
from wits3.solver import ThresholdTable
from wits3.whittle import whittle_table


def one(lam, p=1.0, buffer=3, age_cap=10):
    return SourceParams(1, lam, buffer, 1, (1.0,), (p,), age_cap)


def test_no_energy_just_ages():
    trace, m = run_episode([one(0.0)], FixedThresholdPolicy([one(0.0)]), 5, seed=0,
                           initial_energy=[0], initial_age=[1])
    assert trace.metric_age[:, 0].tolist() == [1, 2, 3, 4, 5]
    assert m.time_avg_aoi == 3.0
    assert m.probe_counts.tolist() == [0]


def test_perfect_channel_zero_age():
    p = one(1.0, 1.0)
    tab = whittle_table(p, alpha=0.9)
    zeros = np.zeros(p.shape)
    th = ThresholdTable(1, zeros, np.zeros(p.shape, dtype=int), zeros)
    _, m = run_episode([p], WITS3Policy([p], [tab], [th]), 200, seed=3)
    assert m.time_avg_aoi == 0.0
    assert m.success_counts.tolist() == [200]


def _age_chain_mean(p_succ, kmax):
    # age after a slot: 1 on success, else min(K+1, K_max)
    P = np.zeros((kmax, kmax))
    for k in range(kmax):
        P[k, 0] += p_succ
        P[k, min(k + 1, kmax - 1)] += 1 - p_succ
    A = np.vstack([P.T - np.eye(kmax), np.ones(kmax)])
    b = np.zeros(kmax + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(A, b, rcond=None)[0]
    ages = np.arange(1, kmax + 1)
    return float(pi @ (ages * (1 - p_succ)))


def test_always_sample_matches_stationary_chain():
    p = one(1.0, 0.5, buffer=2, age_cap=10)
    T = 1_000_000
    trace, m = run_episode([p], FixedThresholdPolicy([p], 0.0), T, seed=11)
    exact = _age_chain_mean(0.5, 10)
    batches = trace.metric_age[:, 0].reshape(100, -1).mean(axis=1)
    se = batches.std(ddof=1) / np.sqrt(batches.size)
    assert abs(m.time_avg_aoi - exact) <= 3 * se


def test_cumulative_series(base_sources):
    pol = GreedyRetransmitPolicy(base_sources, "age")
    trace, m = run_episode(base_sources, pol, 2000, seed=4)
    cum = cumulative_average_age(trace)
    assert cum.shape == (2000,)
    assert cum[-1] == pytest.approx(m.time_avg_aoi, abs=1e-12)
    prefix = np.array([trace.metric_age[: t + 1].mean() for t in range(0, 2000, 97)])
    np.testing.assert_allclose(cum[::97], prefix, atol=1e-12)
    const, _ = run_episode([one(0.0, age_cap=2)], FixedThresholdPolicy([one(0.0, age_cap=2)]), 10,
                           seed=0, initial_energy=[0], initial_age=[2])
    assert np.all(cumulative_average_age(const) == 2.0)


def test_replay_through_kernels(base_sources, base_wits3):
    pol = WITS3Policy(base_sources, base_wits3.tables, base_wits3.thresholds)
    trace, _ = run_episode(base_sources, pol, 3000, seed=9)
    E, K = trace.energy, trace.age
    nxt_E = np.vstack([E[1:], trace.final_energy])
    nxt_K = np.vstack([K[1:], trace.final_age])
    for t in range(trace.T):
        for n, p in enumerate(base_sources):
            mine = trace.probed[t] == p.id
            s, ns = (E[t, n], K[t, n]), (nxt_E[t, n], nxt_K[t, n])
            assert 0 <= ns[0] <= p.buffer
            if mine and trace.sampled[t]:
                v = IntermediateState(s[0], s[1], int(trace.channel[t]))
                pr = intermediate_transition_dist(p, v, True).prob(ns)
            else:
                pr = transition_dist(p, s, PROBE if mine else IDLE).prob(ns)
            assert pr > 0
            if mine and trace.sampled[t]:
                assert transition_dist(p, s, PROBE_SAMPLE).prob(ns) > 0


def test_sampling_drops_energy_before_arrival():
    p = SourceParams(1, 1.0, 2, 2, (1.0,), (0.0,), 5)
    trace, _ = run_episode([p], FixedThresholdPolicy([p], 0.0), 6, seed=0)
    # E=2 -> sample (0) -> arrival (1) -> infeasible -> arrival (2) -> sample ...
    assert trace.energy[:, 0].tolist() == [2, 1, 2, 1, 2, 1]


def test_no_energy_no_probe_ages_saturate():
    ps = [SourceParams(i, 0.0, 3, 2, (1.0,), (0.7,), 4) for i in (1, 2)]
    for pol in (RandomPolicy(ps), GreedyRetransmitPolicy(ps, "energy")):
        trace, m = run_episode(ps, pol, 20, seed=1, initial_energy=[1, 0])
        assert m.probe_counts.sum() == 0
        assert np.all(trace.age[-1] == 4)


def test_deterministic_and_seed_sensitive(base_sources):
    pol = RandomPolicy(base_sources)
    a, _ = run_episode(base_sources, pol, 1000, seed=5)
    b, _ = run_episode(base_sources, pol, 1000, seed=5)
    c, _ = run_episode(base_sources, pol, 1000, seed=6)
    assert a.to_csv() == b.to_csv()
    assert a.to_csv() != c.to_csv()


def test_adding_a_source_keeps_other_streams(base_sources):
    env2 = Environment(base_sources[:2], seed=8)
    env3 = Environment(base_sources, seed=8)
    idle = FixedThresholdPolicy(base_sources, 2.0)  # never samples
    for _ in range(500):
        a, b = env2.step(idle), env3.step(idle)
        assert a.arrivals == b.arrivals[:2]
        assert a.next_energy == b.next_energy[:2]


def test_environment_snapshot_restores_exactly(base_sources):
    pol = RandomPolicy(base_sources)
    pol.reset(np.random.default_rng(0))
    env = Environment(base_sources, seed=2, chunk=64)
    for _ in range(150):
        env.step(pol)
    snap = env.get_state()
    rng_state = pol.rng.bit_generator.state
    first = [env.step(pol) for _ in range(200)]
    env2 = Environment(base_sources, seed=2, chunk=64)
    env2.set_state(snap)
    pol.rng.bit_generator.state = rng_state
    assert [env2.step(pol) for _ in range(200)] == first


def test_probe_without_energy_is_an_error():
    p = one(0.0)

    class Bad(FixedThresholdPolicy):
        def probe(self, energy, age):
            return 0

    with pytest.raises(RuntimeError):
        run_episode([p], Bad([p]), 3, seed=0, initial_energy=[0])


def test_replication_statistics(base_sources):
    pol = GreedyRetransmitPolicy(base_sources, "age")
    rep = run_replications(base_sources, pol, 500, [3, 3, 3])
    assert rep.stderr == 0.0
    assert rep.mean == rep.values[0]
    twice = run_replications(base_sources, pol, 500, [1, 2, 1, 2])
    once = run_replications(base_sources, pol, 500, [1, 2])
    assert twice.mean == pytest.approx(once.mean, abs=1e-12)
    assert np.isnan(run_replications(base_sources, pol, 50, [1]).stderr)
    with pytest.raises(ValueError):
        run_replications(base_sources, pol, 50, [])


def test_replications_parallel_equals_serial(base_sources):
    pol = GreedyRetransmitPolicy(base_sources, "energy")
    a = run_replications(base_sources, pol, 300, [1, 2, 3], threads=1)
    b = run_replications(base_sources, pol, 300, [1, 2, 3], threads=2)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.mean_cumulative, b.mean_cumulative)


def test_metrics_consistent_with_trace(base_sources):
    trace, m = run_episode(base_sources, RandomPolicy(base_sources), 800, seed=12)
    again = metrics_from_trace(trace, base_sources)
    assert abs(again.time_avg_aoi - trace.metric_age.sum() / trace.metric_age.size) <= 1e-12
    assert m.success_counts.sum() == trace.success.sum()
    assert m.sample_counts.sum() == trace.sampled.sum()
    assert np.all(trace.metric_age[trace.success, :].min(axis=1) == 0)
    rows = trace.to_csv().splitlines()
    assert rows[0] == "t,source,E,K,metric_age,probed,sampled,channel,success"
    assert len(rows) == 1 + 800 * 3
