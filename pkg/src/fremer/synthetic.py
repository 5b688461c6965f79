"""Seeded synthetic workloads used by the benchmark and autoscaling runs."""

from __future__ import annotations

import numpy as np

from .data import TraceSet
from .rng import substream

DAY_10MIN = 144


def two_tone(n_instances: int = 20, length: int = 4000, noise: float = 0.1, seed: int = 0,
             periods: tuple[float, float] = (24.0, 168.0), step: float = 600.0) -> TraceSet:
    """Level + two sinusoids (periods in samples) + Gaussian noise, per instance.

    Levels, amplitudes and phases are drawn per instance; levels keep the
    series positive so SMAPE stays meaningful.
    """
    rng = substream(seed, "two_tone")
    t = np.arange(length)
    out = {}
    for i in range(n_instances):
        level = rng.uniform(8.0, 12.0)
        a1, a2 = rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0)
        p1, p2 = rng.uniform(0.0, 2 * np.pi, size=2)
        vals = (level + a1 * np.sin(2 * np.pi * t / periods[0] + p1)
                + a2 * np.sin(2 * np.pi * t / periods[1] + p2)
                + noise * rng.standard_normal(length))
        out[f"inst{i:03d}"] = vals
    return TraceSet.from_arrays(out, step=step)


def daily_profile(samples_per_day: int = DAY_10MIN) -> np.ndarray:
    """Request-rate shape over one day (req/s).

    Smooth business-hours level, top-of-hour batch spikes one sample wide,
    and lunch/evening plateaus that switch on within a single sample.
    """
    i = np.arange(samples_per_day)
    h = i * 24.0 / samples_per_day
    base = 1.0 + 3.0 / (1.0 + np.exp(-(h - 8.0) * 2.0)) - 3.0 / (1.0 + np.exp(-(h - 21.0) * 2.0))
    per_hour = max(samples_per_day // 24, 1)
    spikes = np.where(i % per_hour == 0, 1.5 * base, 0.0)
    plateaus = 4.0 * ((h >= 12) & (h < 13)) + 5.0 * ((h >= 19) & (h < 20))
    return base + spikes + plateaus


def bursty_workload(days: int = 35, seed: int = 0, noise: float = 0.08,
                    samples_per_day: int = DAY_10MIN, step: float = 600.0) -> np.ndarray:
    """Daily bursty request rate with weekly modulation and multiplicative noise."""
    rng = substream(seed, "bursty")
    prof = np.tile(daily_profile(samples_per_day), days)
    t = np.arange(days * samples_per_day)
    weekly = 1.0 + 0.15 * np.sin(2 * np.pi * t / (7 * samples_per_day))
    vals = prof * weekly * np.exp(noise * rng.standard_normal(t.size))
    return np.maximum(vals, 0.0)
