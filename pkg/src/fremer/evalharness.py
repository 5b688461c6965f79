"""Metrics, reference baselines and test-split evaluation.

MSE/MAE are computed on the instance-normalized scale (training-span
statistics); SMAPE on the raw scale after denormalizing the forecast.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import ForecastDataset, Normalizer, WindowSet
from .model import FremerParams, forward_batch

__all__ = [
    "MetricReport",
    "EvalResult",
    "smape",
    "smape_terms",
    "mse_mae_norm",
    "Baseline",
    "FremerForecaster",
    "baseline_forecast",
    "evaluate",
    "write_results",
]


@dataclass(frozen=True)
class MetricReport:
    mse_norm: float
    mae_norm: float
    smape: float
    n_windows: int


def smape_terms(forecast, truth) -> np.ndarray:
    """Per-point ``200 |f - y| / (|f| + |y|)``, 0 where both are 0."""
    f = np.asarray(forecast, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if f.shape != y.shape:
        raise ValueError(f"shape mismatch: {f.shape} vs {y.shape}")
    den = np.abs(f) + np.abs(y)
    out = np.zeros_like(den)
    np.divide(2.0 * np.abs(f - y), den, out=out, where=den > 0)
    return 100.0 * out


def smape(forecast, truth) -> float:
    return float(np.mean(smape_terms(forecast, truth)))


def mse_mae_norm(forecast, truth, normalizer: Normalizer) -> tuple[float, float]:
    """Squared and absolute error of raw-scale inputs, measured after normalizing."""
    f = normalizer.normalize(forecast)
    y = normalizer.normalize(truth)
    if f.shape != y.shape:
        raise ValueError(f"shape mismatch: {f.shape} vs {y.shape}")
    d = f - y
    return float(np.mean(d * d)), float(np.mean(np.abs(d)))


class Baseline:
    """Reference forecasters: ``persistence``, ``seasonal_naive``, ``ridge_linear``."""

    KINDS = ("persistence", "seasonal_naive", "ridge_linear")

    def __init__(self, kind: str, period: int = 1, lam: float = 1.0):
        if kind not in self.KINDS:
            raise ValueError(f"unknown baseline {kind!r}; choose from {self.KINDS}")
        if period < 1:
            raise ValueError("period must be >= 1")
        if lam < 0:
            raise ValueError("ridge lambda must be >= 0")
        self.kind, self.period, self.lam = kind, period, lam
        self.coef: np.ndarray | None = None
        self.intercept: np.ndarray | None = None

    def __repr__(self):
        extra = {"seasonal_naive": f"period={self.period}", "ridge_linear": f"lam={self.lam}"}
        return f"Baseline({self.kind}{', ' + extra[self.kind] if self.kind in extra else ''})"

    def fit(self, windows: WindowSet, chunk: int = 4096) -> "Baseline":
        """Ridge only: closed-form normal equations with an unpenalized intercept."""
        batches = (windows.batch(np.arange(i, min(i + chunk, len(windows))))
                   for i in range(0, len(windows), chunk))
        return self._fit_batches(batches, windows.lookback, windows.horizon)

    def fit_arrays(self, X, Y) -> "Baseline":
        X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
        return self._fit_batches([(X, Y)], X.shape[1], Y.shape[1])

    def _fit_batches(self, batches, L: int, T: int) -> "Baseline":
        if self.kind != "ridge_linear":
            return self
        gram = np.zeros((L + 1, L + 1))
        cross = np.zeros((L + 1, T))
        for X, Y in batches:
            Xa = np.hstack([X, np.ones((len(X), 1))])
            gram += Xa.T @ Xa
            cross += Xa.T @ Y
        reg = self.lam * np.eye(L + 1)
        reg[L, L] = 0.0
        sol, *_ = np.linalg.lstsq(gram + reg, cross, rcond=None)
        self.coef, self.intercept = sol[:L], sol[L]
        return self

    def predict(self, X, horizon: int) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.kind == "persistence":
            return np.repeat(X[:, -1:], horizon, axis=1)
        if self.kind == "seasonal_naive":
            if X.shape[1] < self.period:
                raise ValueError(f"lookback {X.shape[1]} shorter than period {self.period}")
            last = X[:, -self.period :]
            reps = -(-horizon // self.period)
            return np.tile(last, (1, reps))[:, :horizon]
        if self.coef is None:
            raise ValueError("ridge baseline must be fit before predicting")
        if self.coef.shape[1] != horizon:
            raise ValueError("ridge baseline was fit for a different horizon")
        return X @ self.coef + self.intercept


def baseline_forecast(kind: Baseline | str, x, horizon: int, **kw) -> np.ndarray:
    b = kind if isinstance(kind, Baseline) else Baseline(kind, **kw)
    return b.predict(np.asarray(x, dtype=float)[None], horizon)[0]


class FremerForecaster:
    def __init__(self, params: FremerParams):
        self.params = params

    def predict(self, X, horizon: int) -> np.ndarray:
        if horizon != self.params.task.horizon:
            raise ValueError("horizon does not match the model's task")
        return forward_batch(X, self.params)[0]


@dataclass
class EvalResult:
    per_instance: dict[str, MetricReport]
    aggregate: MetricReport

    def aggregate_dict(self) -> dict:
        return asdict(self.aggregate)


def evaluate(model, dataset: ForecastDataset, split: str = "test", chunk: int = 512) -> EvalResult:
    """Average metrics over every window of every instance (window-weighted).

    ``model`` exposes ``predict(X, horizon)`` on normalized inputs.
    """
    ws: WindowSet = getattr(dataset, split)
    if len(ws) == 0:
        raise ValueError(f"no {split} windows to evaluate")
    T = ws.horizon
    per, sums = {}, np.zeros(3)
    n_total = 0
    for inst, sid in enumerate(dataset.ids):
        rows = ws.instance_rows(inst)
        if rows.size == 0:
            continue
        norm = dataset.normalizers[sid]
        acc = np.zeros(3)
        for i in range(0, rows.size, chunk):
            X, Y = ws.batch(rows[i : i + chunk])
            F = np.asarray(model.predict(X, T), dtype=np.float64)
            d = F - Y
            acc[0] += np.sum(d * d)
            acc[1] += np.sum(np.abs(d))
            acc[2] += np.sum(smape_terms(norm.denormalize(F), norm.denormalize(Y)))
        npts = rows.size * T
        per[sid] = MetricReport(acc[0] / npts, acc[1] / npts, acc[2] / npts, int(rows.size))
        sums += acc
        n_total += rows.size
    npts = n_total * T
    agg = MetricReport(sums[0] / npts, sums[1] / npts, sums[2] / npts, n_total)
    return EvalResult(per, agg)


def write_results(result: EvalResult, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "mse_norm", "mae_norm", "smape", "n_windows"])
        for sid in sorted(result.per_instance):
            r = result.per_instance[sid]
            w.writerow([sid, repr(r.mse_norm), repr(r.mae_norm), repr(r.smape), r.n_windows])
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump({"aggregate": result.aggregate_dict()}, fh, indent=2, sort_keys=True)
            fh.write("\n")
