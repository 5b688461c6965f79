"""Frequency-domain transformer for workload forecasting, with its evaluation
harness and an autoscaling simulator."""

from .model import ForecastTask, FremerParams, forward, forward_batch, init_params
from .spectral import BandSpec, Spectrum, TimeSeries, alignment_report, irfft, rfft

__version__ = "0.1.0"

__all__ = [
    "BandSpec",
    "ForecastTask",
    "FremerParams",
    "Spectrum",
    "TimeSeries",
    "alignment_report",
    "forward",
    "forward_batch",
    "init_params",
    "irfft",
    "rfft",
]
