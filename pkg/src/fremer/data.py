"""Trace ingestion, chronological splits, per-instance normalization and windows.

Input CSVs are long format with header ``timestamp,series_id,value``.
Timestamps are epoch seconds or ISO-8601 (UTC assumed when no offset is
given).
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .spectral import TimeSeries

__all__ = [
    "IngestError",
    "SplitError",
    "TraceSet",
    "SplitSpec",
    "Span",
    "Normalizer",
    "ingest_csv",
    "emit_csv",
    "split",
    "window_starts",
    "windows",
    "WindowSet",
    "ForecastDataset",
    "prepare_dataset",
]

MAX_INTERP_GAP = 3
NORM_EPS = 1e-8
_GRID_TOL = 1e-6


class IngestError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class TraceSet:
    instances: dict[str, TimeSeries]
    granularity: float
    rejected: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for sid, ts in self.instances.items():
            if not math.isclose(ts.step, self.granularity):
                raise IngestError(f"instance {sid} has step {ts.step}, expected {self.granularity}")

    def ids(self) -> list[str]:
        return sorted(self.instances)

    def __len__(self) -> int:
        return len(self.instances)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], step: float = 600.0,
                    start: float = 0.0) -> "TraceSet":
        inst = {sid: TimeSeries(np.asarray(v, dtype=float), step, start, sid)
                for sid, v in arrays.items()}
        return cls(inst, step)


def _parse_time(raw: str) -> float:
    raw = raw.strip()
    try:
        return float(raw)
    except ValueError:
        pass
    text = raw[:-1] + "+00:00" if raw.endswith("Z") else raw
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _infer_step(times: np.ndarray) -> float | None:
    # median spacing: robust to a few gaps, and a stray point lands off-grid
    if times.size < 2:
        return None
    return float(np.median(np.diff(times)))


def ingest_csv(path, granularity: float | None = None, max_gap: int = MAX_INTERP_GAP) -> TraceSet:
    """Read a long-format trace CSV into evenly sampled series.

    Gaps of up to ``max_gap`` missing samples are filled by linear
    interpolation; an instance with a longer gap is dropped and listed in
    ``TraceSet.rejected``.
    """
    rows: dict[str, list[tuple[float, float, int]]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "series_id", "value"]:
            raise IngestError(f"line 1: expected header 'timestamp,series_id,value', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise IngestError(f"line {lineno}: expected 3 fields, got {len(row)}")
            try:
                t = _parse_time(row[0])
                v = float(row[2])
            except ValueError as exc:
                raise IngestError(f"line {lineno}: {exc}") from exc
            if not (math.isfinite(t) and math.isfinite(v)):
                raise IngestError(f"line {lineno}: non-finite timestamp or value")
            sid = row[1].strip()
            if not sid:
                raise IngestError(f"line {lineno}: empty series_id")
            rows[sid].append((t, v, lineno))

    per_series = {}
    for sid, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        times = np.array([r[0] for r in recs])
        dup = np.flatnonzero(np.diff(times) == 0)
        if dup.size:
            raise IngestError(
                f"line {recs[dup[0] + 1][2]}: duplicate timestamp {times[dup[0]]} for {sid}"
            )
        per_series[sid] = (times, np.array([r[1] for r in recs]))

    if granularity is None:
        steps = {sid: s for sid, (t, _) in per_series.items() if (s := _infer_step(t)) is not None}
        distinct = sorted(set(steps.values()))
        if len(distinct) > 1 and not all(math.isclose(d, distinct[0]) for d in distinct):
            raise IngestError(f"mixed granularity across instances: {distinct}")
        if not distinct:
            raise IngestError("cannot infer granularity; pass an explicit granularity")
        granularity = distinct[0]
    if not granularity > 0:
        raise IngestError("granularity must be positive")

    instances, rejected = {}, []
    for sid in sorted(per_series):
        times, vals = per_series[sid]
        offsets = (times - times[0]) / granularity
        idx = np.rint(offsets)
        if np.any(np.abs(offsets - idx) > _GRID_TOL):
            raise IngestError(f"mixed granularity: instance {sid} is off the {granularity}s grid")
        idx = idx.astype(np.int64)
        gaps = np.diff(idx) - 1
        if gaps.size and gaps.max() > max_gap:
            where = int(np.argmax(gaps))
            rejected.append({"id": sid, "reason": f"gap of {int(gaps[where])} samples after "
                                                  f"t={times[where]:g}"})
            continue
        full = np.interp(np.arange(idx[-1] + 1), idx, vals) if gaps.size and gaps.max() > 0 else vals
        instances[sid] = TimeSeries(full, granularity, float(times[0]), sid)
    return TraceSet(instances, float(granularity), rejected)


def _fmt_time(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def emit_csv(traces: TraceSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "series_id", "value"])
        for sid in traces.ids():
            ts = traces.instances[sid]
            for i, v in enumerate(ts.values):
                w.writerow([_fmt_time(ts.start + i * ts.step), sid, repr(float(v))])


# ---------------------------------------------------------------------------
# splits and normalization


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        if min(self.train, self.val, self.test) <= 0:
            raise SplitError("split ratios must be positive")
        if not math.isclose(self.train + self.val + self.test, 1.0, abs_tol=1e-9):
            raise SplitError("split ratios must sum to 1")


@dataclass(frozen=True)
class Span:
    start: int
    stop: int

    def __len__(self) -> int:
        return self.stop - self.start

    def slice(self) -> slice:
        return slice(self.start, self.stop)


def split(ts: TimeSeries | int, spec: SplitSpec = SplitSpec(), lookback: int | None = None,
          horizon: int | None = None) -> tuple[Span, Span, Span]:
    """Chronological train/val/test spans with boundaries floor(r*N).

    When lookback/horizon are given, the training span must hold one full
    window and the later spans one horizon each (their lookback may reach
    into earlier spans).
    """
    n = ts if isinstance(ts, int) else len(ts)
    b1 = math.floor(spec.train * n + 1e-9)
    b2 = math.floor((spec.train + spec.val) * n + 1e-9)
    spans = (Span(0, b1), Span(b1, b2), Span(b2, n))
    if lookback is not None and horizon is not None:
        need = {"train": lookback + horizon, "val": horizon, "test": horizon}
        for name, span in zip(("train", "val", "test"), spans):
            if len(span) < need[name]:
                raise SplitError(
                    f"series of length {n} too short: {name} span has {len(span)} samples, "
                    f"needs {need[name]} (L={lookback}, T={horizon})"
                )
    return spans


@dataclass(frozen=True)
class Normalizer:
    """Mean/std of one instance's training span."""

    mean: float
    std: float

    @classmethod
    def fit(cls, values) -> "Normalizer":
        values = np.asarray(values, dtype=np.float64)
        return cls(float(values.mean()), max(float(values.std()), NORM_EPS))

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------------------
# windows


def window_starts(span_len: int, lookback: int, horizon: int, stride: int = 1) -> np.ndarray:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    last = span_len - lookback - horizon
    if last < 0:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, last + 1, stride, dtype=np.int64)


def windows(values, lookback: int, horizon: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """All (input, target) pairs inside ``values``; returns arrays (n, L) and (n, T)."""
    values = np.asarray(values, dtype=np.float64)
    starts = window_starts(values.size, lookback, horizon, stride)
    idx = starts[:, None] + np.arange(lookback + horizon)
    block = values[idx] if starts.size else np.zeros((0, lookback + horizon))
    return block[:, :lookback], block[:, lookback:]


class WindowSet:
    """Lazily gathered windows over several (normalized) series."""

    def __init__(self, series: list[np.ndarray], index: np.ndarray, lookback: int, horizon: int,
                 ids: list[str] | None = None):
        self.lookback, self.horizon = lookback, horizon
        width = max((s.size for s in series), default=0)
        self.matrix = np.zeros((len(series), width))
        for i, s in enumerate(series):
            self.matrix[i, : s.size] = s
        self.index = np.asarray(index, dtype=np.int64).reshape(-1, 2)
        self.ids = ids or [str(i) for i in range(len(series))]
        self._offsets = np.arange(lookback + horizon)

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        rows = self.index[np.asarray(indices, dtype=np.int64)]
        block = self.matrix[rows[:, :1], rows[:, 1:2] + self._offsets]
        return block[:, : self.lookback], block[:, self.lookback :]

    def instance_rows(self, inst: int) -> np.ndarray:
        return np.flatnonzero(self.index[:, 0] == inst)


@dataclass
class ForecastDataset:
    ids: list[str]
    normalizers: dict[str, Normalizer]
    spans: dict[str, tuple[Span, Span, Span]]
    train: WindowSet
    val: WindowSet
    test: WindowSet
    raw: dict[str, np.ndarray]


def _span_index(inst: int, span: Span, lookback: int, horizon: int, stride: int,
                with_context: bool) -> np.ndarray:
    lo = span.start - lookback if with_context else span.start
    starts = lo + window_starts(span.stop - lo, lookback, horizon, stride)
    return np.column_stack([np.full(starts.size, inst), starts])


def prepare_dataset(traces: TraceSet, lookback: int, horizon: int,
                    spec: SplitSpec = SplitSpec(), stride: int = 1,
                    eval_stride: int = 1) -> ForecastDataset:
    """Normalize each instance on its training span and cut train/val/test windows.

    Training windows stay inside the training span; validation and test
    windows keep their targets inside their span but draw the lookback from
    whatever precedes it.
    """
    ids = traces.ids()
    if not ids:
        raise SplitError("trace set is empty")
    norms, spans, normed, raw = {}, {}, [], {}
    parts: dict[str, list[np.ndarray]] = {"train": [], "val": [], "test": []}
    for i, sid in enumerate(ids):
        vals = traces.instances[sid].values
        sp = split(len(vals), spec, lookback, horizon)
        spans[sid] = sp
        norm = Normalizer.fit(vals[sp[0].slice()])
        norms[sid] = norm
        normed.append(norm.normalize(vals))
        raw[sid] = vals
        parts["train"].append(_span_index(i, sp[0], lookback, horizon, stride, False))
        parts["val"].append(_span_index(i, sp[1], lookback, horizon, eval_stride, True))
        parts["test"].append(_span_index(i, sp[2], lookback, horizon, eval_stride, True))
    sets = {k: WindowSet(normed, np.concatenate(v), lookback, horizon, ids) for k, v in parts.items()}
    return ForecastDataset(ids, norms, spans, sets["train"], sets["val"], sets["test"], raw)
