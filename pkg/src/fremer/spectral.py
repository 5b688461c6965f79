"""Real FFT kernel, band filters and frequency-resolution diagnostics.

Forward transforms are unnormalized and inverse transforms carry the 1/N
factor, so ``irfft(rfft(x)) == x``.  The FFT itself is numpy's pocketfft;
``dft_direct`` is the O(N^2) reference used to check it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimeSeries",
    "Spectrum",
    "BandSpec",
    "SpectralError",
    "rfft",
    "irfft",
    "dft_direct",
    "spectral_energy",
    "band_counts",
    "apply_band_filter",
    "recover_spectrum",
    "alignment_report",
]

_RATIO_SLACK = 1e-9


class SpectralError(ValueError):
    """Invalid input to a spectral operation."""


@dataclass(frozen=True)
class TimeSeries:
    """An evenly sampled real series.

    ``step`` is the sampling interval in seconds and ``start`` the epoch
    timestamp of ``values[0]``.
    """

    values: np.ndarray
    step: float = 1.0
    start: float = 0.0
    id: str = ""

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size < 1:
            raise SpectralError("time series must be a non-empty 1-D sequence")
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise SpectralError(f"non-finite sample at index {int(bad[0])}")
        if not self.step > 0:
            raise SpectralError(f"step must be positive, got {self.step}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class Spectrum:
    """Half spectrum of a real signal of length ``origin_len``."""

    coeffs: np.ndarray
    origin_len: int

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.ndim != 1 or c.size != self.origin_len // 2 + 1:
            raise SpectralError(
                f"spectrum of length {c.size} inconsistent with origin_len={self.origin_len}"
            )
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def __len__(self) -> int:
        return self.coeffs.size


@dataclass(frozen=True)
class BandSpec:
    """Bin counts of the bypassed low band (includes DC) and the zeroed high band."""

    n_low: int
    n_high: int = 0

    def __post_init__(self):
        if self.n_low < 1:
            raise SpectralError("n_low must be >= 1: the DC bin is always bypassed")
        if self.n_high < 0:
            raise SpectralError("n_high must be >= 0")

    def check(self, n_bins: int) -> None:
        if self.n_low + self.n_high >= n_bins:
            raise SpectralError(
                f"band spec (n_low={self.n_low}, n_high={self.n_high}) leaves no backbone "
                f"bins in a spectrum of {n_bins}"
            )

    def backbone_len(self, n_bins: int) -> int:
        self.check(n_bins)
        return n_bins - self.n_low - self.n_high


def _as_values(x) -> np.ndarray:
    if isinstance(x, TimeSeries):
        return x.values
    vals = np.asarray(x, dtype=np.float64)
    if vals.ndim != 1 or vals.size < 1:
        raise SpectralError("expected a non-empty 1-D sequence")
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise SpectralError(f"non-finite sample at index {int(bad[0])}")
    return vals


def rfft(x) -> Spectrum:
    """Half spectrum ``F[k] = sum_n x[n] exp(-2 pi i k n / N)``, k = 0..N//2."""
    vals = _as_values(x)
    coeffs = np.fft.rfft(vals)
    # pocketfft leaves rounding noise in these imaginary parts for some N
    coeffs[0] = coeffs[0].real
    if vals.size % 2 == 0:
        coeffs[-1] = coeffs[-1].real
    return Spectrum(coeffs, vals.size)


def irfft(s: Spectrum, *, step: float = 1.0, start: float = 0.0, id: str = "") -> TimeSeries:
    """Inverse of :func:`rfft`; output length is ``s.origin_len``."""
    if len(s.coeffs) != s.origin_len // 2 + 1:
        raise SpectralError("spectrum length inconsistent with origin_len")
    return TimeSeries(np.fft.irfft(s.coeffs, n=s.origin_len), step=step, start=start, id=id)


def dft_direct(x) -> np.ndarray:
    """Direct O(N^2) evaluation of the half-spectrum DFT sum."""
    vals = _as_values(x)
    n = vals.size
    out = np.empty(n // 2 + 1, dtype=np.complex128)
    idx = np.arange(n)
    for k in range(n // 2 + 1):
        # reduce k*n mod N before scaling so the phase stays exact for large N
        phase = -2.0 * np.pi * ((k * idx) % n) / n
        out[k] = np.sum(vals * np.cos(phase)) + 1j * np.sum(vals * np.sin(phase))
    return out


def parseval_weights(n: int) -> np.ndarray:
    """Multiplicity of each half-spectrum bin in the full DFT of length n."""
    w = np.full(n // 2 + 1, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w


def spectral_energy(s: Spectrum) -> float:
    """Time-domain energy sum(x**2) recovered from the half spectrum."""
    w = parseval_weights(s.origin_len)
    return float(np.sum(w * np.abs(s.coeffs) ** 2) / s.origin_len)


def band_counts(n_bins: int, hpf_ratio: float, lpf_ratio: float) -> BandSpec:
    """Bin counts from ratios of the half spectrum, rounded up.

    ``hpf_ratio`` sizes the bypassed low band, ``lpf_ratio`` the zeroed high
    band.  The low band never drops below the DC bin.
    """
    if not (0.0 <= hpf_ratio < 0.5 and 0.0 <= lpf_ratio < 0.5):
        raise SpectralError("filter ratios must lie in [0, 0.5)")
    n_low = max(1, math.ceil(hpf_ratio * n_bins - _RATIO_SLACK))
    n_high = max(0, math.ceil(lpf_ratio * n_bins - _RATIO_SLACK))
    band = BandSpec(n_low, n_high)
    band.check(n_bins)
    return band


def apply_band_filter(s: Spectrum, b: BandSpec) -> tuple[np.ndarray, np.ndarray]:
    """Split a spectrum into (backbone, low_band); the top ``n_high`` bins are dropped."""
    n = len(s.coeffs)
    b.check(n)
    low = s.coeffs[: b.n_low].copy()
    backbone = s.coeffs[b.n_low : n - b.n_high].copy()
    return backbone, low


def recover_spectrum(backbone, low_band, b: BandSpec, origin_len: int) -> Spectrum:
    """Join ``low_band ++ backbone ++ zeros(n_high)`` into a valid half spectrum."""
    backbone = np.asarray(backbone, dtype=np.complex128)
    low_band = np.asarray(low_band, dtype=np.complex128)
    n_bins = origin_len // 2 + 1
    if low_band.size != b.n_low:
        raise SpectralError(f"low band has {low_band.size} bins, expected {b.n_low}")
    if low_band.size + backbone.size != n_bins - b.n_high:
        raise SpectralError(
            f"low band ({low_band.size}) + backbone ({backbone.size}) must equal "
            f"{n_bins - b.n_high} bins"
        )
    coeffs = np.concatenate([low_band, backbone, np.zeros(b.n_high, dtype=np.complex128)])
    coeffs[0] = coeffs[0].real
    if origin_len % 2 == 0:
        coeffs[-1] = coeffs[-1].real
    return Spectrum(coeffs, origin_len)


@dataclass(frozen=True)
class AlignmentReport:
    period: float
    lookback: int
    horizon: int
    complete_bin: float
    complete_is_exact: bool
    input_neighbor_bins: tuple[int, int]
    input_neighbor_freqs: tuple[float, float]
    leakage_ratio: float
    extra: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {
            "period": self.period,
            "lookback": self.lookback,
            "horizon": self.horizon,
            "complete_bin": self.complete_bin,
            "complete_is_exact": int(self.complete_is_exact),
            "input_bin_lo": self.input_neighbor_bins[0],
            "input_bin_hi": self.input_neighbor_bins[1],
            "input_freq_lo": self.input_neighbor_freqs[0],
            "input_freq_hi": self.input_neighbor_freqs[1],
            "leakage_ratio": self.leakage_ratio,
        }


def alignment_report(period: float, lookback: int, horizon: int) -> AlignmentReport:
    """Where a tone of the given period lands in the input vs the complete spectrum.

    The complete series (length L+T) places the tone at bin (L+T)/period; the
    lookback alone places it at L/period, generally between two bins.  The
    leakage ratio is the share of a unit cosine's energy (over the lookback)
    that falls outside those neighbouring bins.
    """
    if not period > 1:
        raise SpectralError("period must exceed 1 sample")
    if lookback < 2:
        raise SpectralError("lookback must be at least 2")
    complete = (lookback + horizon) / period
    complete_exact = math.isclose(complete, round(complete), rel_tol=0, abs_tol=1e-9)
    pos = lookback / period
    if math.isclose(pos, round(pos), rel_tol=0, abs_tol=1e-9):
        lo = hi = int(round(pos))
    else:
        lo, hi = math.floor(pos), math.ceil(pos)

    tone = np.cos(2.0 * np.pi * np.arange(lookback) / period)
    spec = rfft(tone)
    w = parseval_weights(lookback)
    energy = w * np.abs(spec.coeffs) ** 2
    total = float(energy.sum())
    inside = sum(float(energy[k]) for k in {lo, hi} if k < energy.size)
    leak = max(0.0, (total - inside) / total) if total > 0 else 0.0
    if leak < 1e-12:
        leak = 0.0

    return AlignmentReport(
        period=float(period),
        lookback=int(lookback),
        horizon=int(horizon),
        complete_bin=float(round(complete)) if complete_exact else complete,
        complete_is_exact=complete_exact,
        input_neighbor_bins=(lo, hi),
        input_neighbor_freqs=(2 * np.pi * lo / lookback, 2 * np.pi * hi / lookback),
        leakage_ratio=leak,
    )
