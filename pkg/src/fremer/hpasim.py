"""Discrete-event simulation of horizontal pod autoscaling.

Requests arrive as a Poisson process whose rate (req/s) is the workload
value of the current step.  Each pod is a FIFO single server with
exponential service at ``per_pod_capacity``; an arrival joins the ready pod
with the fewest requests in system.  A request still unfinished ``timeout``
seconds after arrival is abandoned (freeing its server if it was in
service) and recorded with latency equal to the timeout.

Every ``sync_period`` the policy picks a replica count:

* reactive  -- like the native autoscaler: current pods times measured
  utilization over the last period, divided by the target utilization;
* proactive -- from the forecast over the coming period plus the start-up delay;
* ideal     -- as proactive, but from the true workload.

Scale-down is immediate (removed pods drain their queues); new pods serve
only after ``scale_delay``.  Arrival times and service demands are drawn
up front from the seed, so policies are compared on identical requests.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import substream
from .spectral import TimeSeries

__all__ = [
    "SimConfig",
    "Policy",
    "ScalingTrace",
    "SimResult",
    "SimError",
    "desired_replicas",
    "reactive_replicas",
    "simulate",
    "SUMMARY_COLUMNS",
    "write_summary",
    "write_trace",
]

SUMMARY_COLUMNS = ("ave_lat", "p999", "p99", "p90", "timeout_rate", "ave_pod")


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    per_pod_capacity: float = 1.0
    target_util: float = 0.5
    sync_period: float = 60.0
    scale_delay: float = 30.0
    timeout: float = 10.0
    min_pods: int = 1
    max_pods: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.per_pod_capacity > 0:
            raise SimError("per_pod_capacity must be positive")
        if not 0 < self.target_util <= 1:
            raise SimError("target_util must be in (0, 1]")
        if not self.timeout > 0 or not self.sync_period > 0 or self.scale_delay < 0:
            raise SimError("timeout and sync_period must be positive, scale_delay >= 0")
        if self.min_pods < 1 or self.max_pods < self.min_pods:
            raise SimError("need 1 <= min_pods <= max_pods")


@dataclass(frozen=True)
class Policy:
    kind: str
    forecast: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("reactive", "proactive", "ideal"):
            raise SimError(f"unknown policy {self.kind!r}")
        if self.kind == "proactive" and self.forecast is None:
            raise SimError("proactive policy needs a forecast")

    @classmethod
    def reactive(cls) -> "Policy":
        return cls("reactive")

    @classmethod
    def ideal(cls) -> "Policy":
        return cls("ideal")

    @classmethod
    def proactive(cls, forecast) -> "Policy":
        return cls("proactive", np.asarray(forecast, dtype=np.float64))


def _clamp_ceil(raw: float, cfg: SimConfig) -> int:
    # shave float noise so exact multiples do not round up
    want = math.ceil(raw - 1e-9) if raw > 0 else 0
    return int(min(max(want, cfg.min_pods), cfg.max_pods))


def desired_replicas(load: float, cfg: SimConfig) -> int:
    """``clamp(ceil(load / (capacity * target_util)), min_pods, max_pods)``."""
    return _clamp_ceil(load / (cfg.per_pod_capacity * cfg.target_util), cfg)


def reactive_replicas(current: int, utilization: float, cfg: SimConfig) -> int:
    """``clamp(ceil(current * utilization / target_util))``; utilization is in [0, 1]."""
    return _clamp_ceil(current * utilization / cfg.target_util, cfg)


@dataclass
class ScalingTrace:
    """Per-step counters plus per-request outcomes."""

    step: float
    arrivals: np.ndarray
    active_pods: np.ndarray
    completed: np.ndarray
    timed_out: np.ndarray
    queued: np.ndarray
    latencies: np.ndarray
    latency_step: np.ndarray

    def conservation_ok(self) -> bool:
        lhs = np.cumsum(self.arrivals)
        rhs = np.cumsum(self.completed) + np.cumsum(self.timed_out) + self.queued
        return bool(np.array_equal(lhs, rhs))

    def equals(self, other: "ScalingTrace") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("arrivals", "active_pods", "completed", "timed_out", "queued",
                      "latencies", "latency_step")
        )


@dataclass
class SimResult:
    trace: ScalingTrace
    summary: dict = field(default_factory=dict)


class _Pod:
    __slots__ = ("uid", "ready_at", "busy_until", "departures")

    def __init__(self, uid: int, ready_at: float):
        self.uid = uid
        self.ready_at = ready_at
        self.busy_until = ready_at
        self.departures: list[float] = []

    def in_system(self, t: float) -> int:
        deps = self.departures
        while deps and deps[0] <= t:
            heapq.heappop(deps)
        return len(deps)


def _draw_requests(rates: np.ndarray, step: float, cfg: SimConfig):
    arr_rng = substream(cfg.seed, "arrivals")
    svc_rng = substream(cfg.seed, "service")
    counts = arr_rng.poisson(np.maximum(rates, 0.0) * step)
    times = np.concatenate([
        np.sort(i * step + arr_rng.uniform(0.0, step, size=c)) for i, c in enumerate(counts)
    ]) if counts.sum() else np.zeros(0)
    service = svc_rng.exponential(1.0 / cfg.per_pod_capacity, size=times.size)
    return counts, times, service


def _window_max(values: np.ndarray, step: float, t0: float, t1: float) -> float:
    i0 = int(t0 // step)
    i1 = int(math.ceil(t1 / step))
    i0 = min(max(i0, 0), values.size - 1)
    i1 = min(max(i1, i0 + 1), values.size)
    return float(np.max(values[i0:i1]))


def simulate(workload: TimeSeries, policy: Policy, cfg: SimConfig = SimConfig()) -> SimResult:
    rates = np.asarray(workload.values, dtype=np.float64)
    step = float(workload.step)
    n_steps = rates.size
    horizon = n_steps * step
    if policy.kind == "proactive" and policy.forecast.shape != rates.shape:
        raise SimError(
            f"forecast covers {policy.forecast.size} steps, replay has {n_steps}"
        )
    if np.any(rates < 0):
        raise SimError("workload rates must be non-negative")

    counts, arrivals, service = _draw_requests(rates, step, cfg)
    n_req = arrivals.size
    lookahead = cfg.sync_period + cfg.scale_delay

    pods: list[_Pod] = []
    n_made = 0
    pod_seconds = np.zeros(n_steps)
    last_change = 0.0

    def account(until: float) -> None:
        # pod-seconds of provisioned pods between last_change and until, per step
        nonlocal last_change
        if until <= last_change:
            return
        n = len(pods)
        a = last_change
        while a < until - 1e-12:
            i = min(int(a // step), n_steps - 1)
            b = min(until, (i + 1) * step)
            pod_seconds[i] += n * (b - a)
            a = b
        last_change = until

    def rescale(t: float, want: int) -> None:
        account(t)
        cur = len(pods)
        nonlocal n_made
        if want > cur:
            pods.extend(_Pod(n_made + i, t + cfg.scale_delay) for i in range(want - cur))
            n_made += want - cur
        elif want < cur:
            # newest (and not-yet-ready) pods go first; removed pods keep
            # draining the requests already assigned to them
            del pods[want:]

    rescale(0.0, desired_replicas(rates[0], cfg))
    for p in pods:
        p.ready_at = p.busy_until = 0.0

    departure = np.empty(n_req)
    timed_out = np.zeros(n_req, dtype=bool)
    # service interval and pod of every assigned request (for measured utilization)
    svc_start = np.zeros(n_req)
    svc_end = np.zeros(n_req)
    svc_pod = np.zeros(n_req, dtype=np.int64)

    def utilization(t: float, n_assigned: int) -> float | None:
        """Busy fraction of the current pods' ready time over the last period."""
        a = t - cfg.sync_period
        ready = sum(max(0.0, t - max(a, p.ready_at)) for p in pods)
        if ready <= 0:
            return None
        # service ends at most `timeout` after arrival
        r0 = int(np.searchsorted(arrivals[:n_assigned], a - cfg.timeout, side="left"))
        sl = slice(r0, n_assigned)
        overlap = np.minimum(svc_end[sl], t) - np.maximum(svc_start[sl], a)
        mine = np.isin(svc_pod[sl], [p.uid for p in pods])
        busy = float(np.sum(np.clip(overlap, 0.0, None)[mine]))
        return min(busy / ready, 1.0)

    def sync(t: float, n_assigned: int) -> None:
        if policy.kind == "reactive":
            util = utilization(t, n_assigned)
            if util is None:
                return
            want = reactive_replicas(len(pods), util, cfg)
        else:
            source = rates if policy.kind == "ideal" else policy.forecast
            want = desired_replicas(max(_window_max(source, step, t, t + lookahead), 0.0), cfg)
        rescale(t, want)

    next_sync = cfg.sync_period
    for r in range(n_req):
        t = arrivals[r]
        while next_sync <= t and next_sync < horizon:
            sync(next_sync, r)
            next_sync += cfg.sync_period

        best, best_q = None, None
        for p in pods:
            if p.ready_at <= t:
                q = p.in_system(t)
                if best_q is None or q < best_q:
                    best, best_q = p, q
                    if q == 0:
                        break
        if best is None:
            best = min(pods, key=lambda p: p.ready_at)
        start = max(t, best.busy_until, best.ready_at)
        finish = start + service[r]
        give_up = t + cfg.timeout
        svc_pod[r] = best.uid
        svc_start[r] = min(start, give_up)
        if finish <= give_up:
            best.busy_until = finish
            departure[r] = finish
        else:
            timed_out[r] = True
            departure[r] = give_up
            if start < give_up:
                best.busy_until = give_up
        svc_end[r] = departure[r]
        heapq.heappush(best.departures, departure[r])

    while next_sync < horizon:
        sync(next_sync, n_req)
        next_sync += cfg.sync_period
    account(horizon)

    return _finish(step, n_steps, horizon, counts, arrivals, departure, timed_out,
                   pod_seconds, cfg)


def _finish(step, n_steps, horizon, counts, arrivals, departure, timed_out, pod_seconds, cfg):
    done = departure <= horizon
    dep_step = np.minimum((departure // step).astype(np.int64), n_steps - 1)
    completed = np.bincount(dep_step[done & ~timed_out], minlength=n_steps)
    t_out = np.bincount(dep_step[done & timed_out], minlength=n_steps)
    arr_cum = np.cumsum(counts)
    queued = arr_cum - np.cumsum(completed) - np.cumsum(t_out)

    lat = np.where(timed_out, cfg.timeout, departure - arrivals)[done]
    lat_step = np.minimum((arrivals // step).astype(np.int64), n_steps - 1)[done]
    trace = ScalingTrace(step, counts.astype(np.int64), pod_seconds / step, completed, t_out,
                         queued, lat, lat_step)
    if lat.size:
        summary = {
            "ave_lat": float(lat.mean()),
            "p999": float(np.quantile(lat, 0.999)),
            "p99": float(np.quantile(lat, 0.99)),
            "p90": float(np.quantile(lat, 0.90)),
        }
    else:
        summary = {"ave_lat": 0.0, "p999": 0.0, "p99": 0.0, "p90": 0.0}
    n_arr = int(counts.sum())
    summary["timeout_rate"] = float(timed_out.sum() / n_arr) if n_arr else 0.0
    summary["ave_pod"] = float(pod_seconds.sum() / horizon)
    return SimResult(trace, summary)


def write_summary(rows: dict[str, dict], path) -> None:
    """One row per policy, columns in Ave-Lat, 99.9, 99, 90, Timeout Rate, AvePod order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", *SUMMARY_COLUMNS])
        for name, summ in rows.items():
            w.writerow([name, *(repr(float(summ[c])) for c in SUMMARY_COLUMNS)])


def write_trace(trace: ScalingTrace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "arrivals", "active_pods", "completed", "timed_out", "queued"])
        for i in range(trace.arrivals.size):
            w.writerow([i, int(trace.arrivals[i]), repr(float(trace.active_pods[i])),
                        int(trace.completed[i]), int(trace.timed_out[i]), int(trace.queued[i])])
