import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fremer.hpasim import (SUMMARY_COLUMNS, Policy, SimConfig, SimError, desired_replicas,
                           reactive_replicas, simulate, write_summary, write_trace)
from fremer.spectral import TimeSeries
from fremer.synthetic import bursty_workload


def workload(n=36, seed=1, scale=1.0):
    return TimeSeries(bursty_workload(days=1, seed=seed)[:n] * scale, 600.0)


def test_desired_replicas_examples():
    cfg = SimConfig()
    assert desired_replicas(0.0, cfg) == cfg.min_pods
    assert desired_replicas(0.5, SimConfig(per_pod_capacity=1.0, target_util=0.5)) == 1
    assert desired_replicas(95, SimConfig(per_pod_capacity=10, target_util=0.5)) == 19
    assert desired_replicas(1e9, SimConfig(max_pods=7)) == 7


def test_reactive_replicas():
    cfg = SimConfig(target_util=0.5)
    assert reactive_replicas(4, 0.5, cfg) == 4
    assert reactive_replicas(4, 1.0, cfg) == 8
    assert reactive_replicas(4, 0.1, cfg) == 1


def test_config_validation():
    with pytest.raises(SimError):
        SimConfig(target_util=0)
    with pytest.raises(SimError):
        SimConfig(min_pods=3, max_pods=2)
    with pytest.raises(SimError):
        Policy("predictive")
    with pytest.raises(SimError):
        Policy("proactive")


def test_zero_workload():
    res = simulate(TimeSeries(np.zeros(12), 600.0), Policy.reactive(), SimConfig(min_pods=2))
    assert res.trace.latencies.size == 0
    assert res.summary["ave_pod"] == 2.0
    assert res.summary["timeout_rate"] == 0.0


def test_ideal_with_ample_capacity_never_times_out():
    # light per-pod load, no start-up delay, fast service relative to the timeout
    cap = 10.0
    cfg = SimConfig(per_pod_capacity=cap, max_pods=10**6, scale_delay=0.0)
    res = simulate(workload(48, scale=10.0), Policy.ideal(), cfg)
    assert res.summary["timeout_rate"] == 0.0
    assert res.summary["p99"] <= -math.log(1 - 0.999) / cap


@pytest.mark.parametrize("kind", ["reactive", "ideal", "proactive"])
def test_conservation_and_determinism(kind):
    ts = workload()
    pol = Policy.proactive(ts.values * 0.9) if kind == "proactive" else Policy(kind)
    a = simulate(ts, pol, SimConfig(seed=4))
    b = simulate(ts, pol, SimConfig(seed=4))
    assert a.trace.conservation_ok()
    assert a.trace.equals(b.trace)
    assert a.summary == b.summary
    assert int(a.trace.arrivals.sum()) == int(a.trace.completed.sum() + a.trace.timed_out.sum()
                                              + a.trace.queued[-1])


def test_policies_see_identical_requests():
    ts = workload()
    a = simulate(ts, Policy.reactive(), SimConfig(seed=9))
    b = simulate(ts, Policy.ideal(), SimConfig(seed=9))
    np.testing.assert_array_equal(a.trace.arrivals, b.trace.arrivals)


@given(st.integers(0, 50), st.floats(1.0, 30.0))
@settings(max_examples=20, deadline=None)
def test_latency_never_exceeds_timeout(seed, timeout):
    cfg = SimConfig(timeout=timeout, max_pods=3, seed=seed)
    res = simulate(workload(12, seed=seed % 5), Policy.reactive(), cfg)
    assert res.trace.latencies.max() <= timeout
    assert res.trace.conservation_ok()


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("kind", ["reactive", "ideal"])
def test_more_pods_never_more_timeouts(seed, kind):
    ts = workload(36, seed=seed)
    rates = [simulate(ts, Policy(kind), SimConfig(max_pods=m, seed=seed)).summary["timeout_rate"]
             for m in (1, 2, 3, 4, 6, 8, 1000)]
    assert all(b <= a for a, b in zip(rates, rates[1:])), rates


def test_forecast_length_must_match():
    with pytest.raises(SimError):
        simulate(workload(12), Policy.proactive(np.ones(11)), SimConfig())


def test_negative_rates_rejected():
    with pytest.raises(SimError):
        simulate(TimeSeries(np.array([1.0, -1.0]), 600.0), Policy.ideal(), SimConfig())


def test_initial_pods_sized_for_first_step():
    ts = TimeSeries(np.full(3, 4.0), 600.0)
    res = simulate(ts, Policy.reactive(), SimConfig())
    assert res.trace.active_pods[0] == pytest.approx(8.0, rel=0.2)


def test_summary_and_trace_files(tmp_path):
    res = simulate(workload(6), Policy.ideal(), SimConfig())
    write_summary({"ideal": res.summary}, tmp_path / "s.csv")
    with open(tmp_path / "s.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["policy", "ave_lat", "p999", "p99", "p90", "timeout_rate", "ave_pod"]
    assert rows[1][0] == "ideal" and float(rows[1][1]) == res.summary["ave_lat"]
    assert tuple(rows[0][1:]) == SUMMARY_COLUMNS
    write_trace(res.trace, tmp_path / "t.csv")
    with open(tmp_path / "t.csv", newline="") as fh:
        assert len(list(csv.reader(fh))) == 7
