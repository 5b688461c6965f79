"""Command-line entry point: ``fremer <command> [options]``.

Settings come from a flat ``key = value`` config file (``#`` starts a
comment) and are overridden by ``--set KEY=VALUE`` and the named flags.
Every command exits 0 on success and 1 on any error, with the failing stage
printed to stderr as ``fremer [stage]: message``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (IngestError, Normalizer, SplitError, SplitSpec, TraceSet, ingest_csv,
                   prepare_dataset)
from .evalharness import Baseline, FremerForecaster, evaluate, write_results
from .hpasim import Policy, SimConfig, SimError, simulate, write_summary, write_trace
from .model import ForecastTask, ModelError, forward_batch
from .spectral import SpectralError, TimeSeries, alignment_report, rfft
from .training import TrainConfig, TrainingError, train

__all__ = ["ConfigError", "RunConfig", "parse_config_text", "load_config", "main",
           "cmd_train", "cmd_eval", "cmd_forecast", "cmd_spectrum", "cmd_sweep", "cmd_simulate"]

SWEEPABLE = ("hpf_ratio", "lpf_ratio", "n_combinations", "n_heads")


class ConfigError(ValueError):
    pass


def _opt_int(v: str) -> int | None:
    return None if v.lower() == "none" else int(v)


def _opt_float(v: str) -> float | None:
    return None if v.lower() == "none" else float(v)


def _opt_str(v: str) -> str | None:
    return None if v == "" or v.lower() == "none" else v


# key -> (section, parser)
_KEYS = {
    "lookback": ("task", int),
    "horizon": ("task", int),
    "lpf_ratio": ("task", float),
    "hpf_ratio": ("task", float),
    "n_combinations": ("task", _opt_int),
    "n_heads": ("task", int),
    "n_blocks": ("task", int),
    "ff_expansion": ("task", int),
    "learning_rate": ("train", float),
    "lr_decay": ("train", float),
    "batch_size": ("train", int),
    "epochs": ("train", int),
    "adam_beta1": ("train", float),
    "adam_beta2": ("train", float),
    "adam_eps": ("train", float),
    "grad_clip": ("train", _opt_float),
    "seed": ("run", int),
    "train_ratio": ("split", float),
    "val_ratio": ("split", float),
    "test_ratio": ("split", float),
    "stride": ("run", int),
    "eval_stride": ("run", int),
    "per_pod_capacity": ("sim", float),
    "target_util": ("sim", float),
    "sync_period": ("sim", float),
    "scale_delay": ("sim", float),
    "timeout": ("sim", float),
    "min_pods": ("sim", int),
    "max_pods": ("sim", int),
    "replay_steps": ("run", _opt_int),
    "series_id": ("run", _opt_str),
    "data": ("path", _opt_str),
    "checkpoint": ("path", _opt_str),
    "output_dir": ("path", str),
    "granularity": ("path", _opt_float),
}


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = val.strip()
    return out


def load_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))


@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs, validated by the consuming modules' own types."""

    task: ForecastTask | None
    train: TrainConfig
    split: SplitSpec
    sim: SimConfig
    seed: int = 0
    stride: int = 1
    eval_stride: int = 1
    replay_steps: int | None = None
    series_id: str | None = None
    data: str | None = None
    checkpoint: str | None = None
    output_dir: str = "out"
    granularity: float | None = None
    raw: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "RunConfig":
        parsed: dict[str, dict] = {"task": {}, "train": {}, "split": {}, "sim": {}, "run": {},
                                   "path": {}}
        for key, raw in values.items():
            if key not in _KEYS:
                raise ConfigError(f"unknown key {key!r}")
            section, conv = _KEYS[key]
            try:
                parsed[section][key] = conv(str(raw).strip())
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from exc
        run = parsed["run"]
        seed = run.pop("seed", 0)
        has_shape = "lookback" in parsed["task"] and "horizon" in parsed["task"]
        if parsed["task"] and not has_shape:
            raise ConfigError("task settings need both lookback and horizon")
        try:
            task = ForecastTask(**parsed["task"]) if has_shape else None
            tcfg = TrainConfig(seed=seed, **parsed["train"])
            sp = parsed["split"]
            split = SplitSpec(sp.get("train_ratio", 0.7), sp.get("val_ratio", 0.1),
                              sp.get("test_ratio", 0.2))
            sim = SimConfig(seed=seed, **parsed["sim"])
        except ModelError as exc:
            raise ConfigError(exc.message) from exc
        except (SplitError, SimError) as exc:
            raise ConfigError(str(exc)) from exc
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc
        cfg = cls(task, tcfg, split, sim, seed=seed, raw=dict(values), **run, **parsed["path"])
        if cfg.stride < 1 or cfg.eval_stride < 1:
            raise ConfigError("stride and eval_stride must be >= 1")
        if cfg.replay_steps is not None and cfg.replay_steps < 1:
            raise ConfigError("replay_steps must be >= 1")
        return cfg

    def with_overrides(self, **values) -> "RunConfig":
        merged = dict(self.raw)
        merged.update({k: str(v) for k, v in values.items()})
        return RunConfig.from_mapping(merged)

    def out(self, name: str) -> Path:
        d = Path(self.output_dir)
        d.mkdir(parents=True, exist_ok=True)
        return d / name


# ---------------------------------------------------------------------------
# helpers


def _need(value, what: str):
    if value is None:
        raise ConfigError(f"{what} is not set (use the config file, --set or a flag)")
    return value


def _ingest(cfg: RunConfig, path) -> TraceSet:
    """Read a trace CSV and log rejected instances as JSON lines next to the outputs."""
    traces = ingest_csv(path, cfg.granularity)
    with open(cfg.out("rejected.jsonl"), "w", encoding="utf-8") as fh:
        for r in traces.rejected:
            fh.write(json.dumps({"id": r["id"], "reason": r["reason"]}) + "\n")
    return traces


def _load_dataset(cfg: RunConfig, task: ForecastTask | None = None):
    task = task or _need(cfg.task, "lookback/horizon")
    traces = _ingest(cfg, _need(cfg.data, "data"))
    if not len(traces):
        raise IngestError("no usable instances in the data file")
    return traces, prepare_dataset(traces, task.lookback, task.horizon, cfg.split,
                                   cfg.stride, cfg.eval_stride)


def _normalizer_extras(dataset) -> tuple[dict, dict]:
    ids = dataset.ids
    extras = {
        "norm_mean": np.array([dataset.normalizers[i].mean for i in ids]),
        "norm_std": np.array([dataset.normalizers[i].std for i in ids]),
    }
    return {"instance_ids": json.dumps(ids)}, extras


def _checkpoint_normalizers(ckpt) -> dict[str, Normalizer]:
    if "instance_ids" not in ckpt.header or "norm_mean" not in ckpt.extras:
        return {}
    ids = json.loads(ckpt.header["instance_ids"])
    means, stds = ckpt.extras["norm_mean"], ckpt.extras["norm_std"]
    return {sid: Normalizer(float(m), float(s)) for sid, m, s in zip(ids, means, stds)}


def _pick_series(traces: TraceSet, series_id: str | None) -> TimeSeries:
    if series_id is not None:
        if series_id not in traces.instances:
            raise IngestError(f"series {series_id!r} not found; have {traces.ids()}")
        return traces.instances[series_id]
    if len(traces) != 1:
        raise ConfigError(f"file holds {len(traces)} series; choose one with --series-id")
    return traces.instances[traces.ids()[0]]


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, resume: str | None = None, quiet: bool = False) -> dict:
    task = _need(cfg.task, "lookback/horizon")
    _, ds = _load_dataset(cfg)
    init = None
    if resume is not None:
        init = load_checkpoint(resume, expect_task=task).params
    res = train(ds, task, cfg.train, init=init)
    ckpt_path = Path(cfg.checkpoint) if cfg.checkpoint else cfg.out("model.frmr")
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    meta, extras = _normalizer_extras(ds)
    meta.update(seed=cfg.seed, epochs=cfg.train.epochs, best_epoch=res.best_epoch)
    save_checkpoint(ckpt_path, res.params, meta, extras)
    _write_rows(cfg.out("history.csv"), ["epoch", "train_loss", "val_loss", "wall_seconds"],
                [[r["epoch"], _fmt(r["train_loss"]), _fmt(r["val_loss"]),
                  f"{r['wall_seconds']:.3f}"] for r in res.history])
    last = res.history[-1]
    summary = {"checkpoint": str(ckpt_path), "best_epoch": res.best_epoch,
               "train_loss": last["train_loss"], "val_loss": last["val_loss"],
               "best_val_loss": min(r["val_loss"] for r in res.history)}
    if not quiet:
        print(f"train_loss={last['train_loss']:.6g} val_loss={last['val_loss']:.6g} "
              f"best_epoch={res.best_epoch} checkpoint={ckpt_path}")
    return summary


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None, baseline: str | None = None,
             period: int = 24, lam: float = 1.0, split: str = "test", quiet: bool = False):
    if baseline is not None:
        _, ds = _load_dataset(cfg)
        model = Baseline(baseline, period=period, lam=lam)
        if baseline == "ridge_linear":
            model.fit(ds.train)
    else:
        path = _need(checkpoint or cfg.checkpoint, "checkpoint")
        ckpt = load_checkpoint(path, expect_task=cfg.task)
        _, ds = _load_dataset(cfg, ckpt.task)
        model = FremerForecaster(ckpt.params)
    result = evaluate(model, ds, split)
    write_results(result, cfg.out("eval.csv"), cfg.out("eval.json"))
    if not quiet:
        a = result.aggregate
        print(f"mse_norm={a.mse_norm:.6g} mae_norm={a.mae_norm:.6g} smape={a.smape:.6g} "
              f"n_windows={a.n_windows}")
    return result


def cmd_forecast(cfg: RunConfig, checkpoint: str | None, series_path: str,
                 attention_path: str | None = None, output: str | None = None) -> np.ndarray:
    ckpt = load_checkpoint(_need(checkpoint or cfg.checkpoint, "checkpoint"))
    task = ckpt.task
    traces = _ingest(cfg, series_path)
    ts = _pick_series(traces, cfg.series_id)
    if len(ts) < task.lookback:
        raise SplitError(f"series has {len(ts)} samples, the model needs a lookback of "
                         f"{task.lookback}")
    # statistics from training when the checkpoint knows this instance
    norm = _checkpoint_normalizers(ckpt).get(ts.id) or Normalizer.fit(ts.values)
    x = norm.normalize(ts.values[-task.lookback:])
    fc, attn = forward_batch(x[None], ckpt.params, trace=attention_path is not None)
    values = norm.denormalize(fc[0])
    t_last = ts.start + (len(ts) - 1) * ts.step
    out = Path(output) if output else cfg.out("forecast.csv")
    _write_rows(out, ["step", "timestamp", "forecast"],
                [[i + 1, _fmt(t_last + (i + 1) * ts.step), _fmt(v)] for i, v in enumerate(values)])
    if attention_path is not None:
        rows = []
        for b, a in enumerate(attn):
            H, l = a.shape[1], a.shape[2]
            for h in range(H):
                for q in range(l):
                    for k in range(l):
                        rows.append([b, h, q, k, _fmt(a[0, h, q, k])])
        _write_rows(attention_path, ["block", "head", "query", "key", "score"], rows)
    return values


def cmd_spectrum(cfg: RunConfig, series_path: str, period: float | None = None,
                 lookback: int | None = None, horizon: int | None = None) -> None:
    # only the window shape matters here, so the model-shape checks are skipped
    L = lookback or _need(cfg.task, "lookback").lookback
    T = horizon or _need(cfg.task, "horizon").horizon
    if L < 1 or T < 1:
        raise ConfigError("lookback and horizon must be >= 1")
    traces = _ingest(cfg, series_path)
    ts = _pick_series(traces, cfg.series_id)
    if len(ts) < L:
        raise SplitError(f"series has {len(ts)} samples, lookback is {L}")
    spec = rfft(ts.values[-L:])
    _write_rows(cfg.out("spectrum.csv"), ["k", "cycles_per_sample", "angular", "magnitude"],
                [[k, _fmt(k / L), _fmt(2 * math.pi * k / L), _fmt(abs(c))]
                 for k, c in enumerate(spec.coeffs)])
    if period is not None:
        row = alignment_report(period, L, T).as_row()
        _write_rows(cfg.out("alignment.csv"), list(row),
                    [[_fmt(v) if isinstance(v, float) else v for v in row.values()]])


def _sweep_one(raw: dict, parameter: str, value: str, run_dir: str) -> dict:
    cfg = RunConfig.from_mapping({**raw, parameter: value, "output_dir": run_dir,
                                  "checkpoint": str(Path(run_dir) / "model.frmr")})
    summary = cmd_train(cfg, quiet=True)
    result = cmd_eval(cfg, checkpoint=summary["checkpoint"], quiet=True)
    a = result.aggregate
    return {"value": value, "mse_norm": a.mse_norm, "mae_norm": a.mae_norm, "smape": a.smape,
            "n_windows": a.n_windows, "best_epoch": summary["best_epoch"],
            "train_loss": summary["train_loss"], "best_val_loss": summary["best_val_loss"]}


def sweep_workers(n_runs: int) -> int:
    raw = os.environ.get("FREMER_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"FREMER_THREADS must be an integer, got {raw!r}") from exc
    return max(1, min(cap, n_runs))


def cmd_sweep(cfg: RunConfig, parameter: str, values: list[str]) -> list[dict]:
    if parameter not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {parameter!r}; choose from {SWEEPABLE}")
    if not values:
        raise ConfigError("no sweep values given")
    raw = dict(cfg.raw)
    for v in values:
        RunConfig.from_mapping({**raw, parameter: v})  # fail fast on bad values
    dirs = [str(Path(cfg.output_dir) / f"sweep_{parameter}_{v}") for v in values]
    workers = sweep_workers(len(values))
    if workers == 1:
        rows = [_sweep_one(raw, parameter, v, d) for v, d in zip(values, dirs)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, [raw] * len(values), [parameter] * len(values),
                                 values, dirs))
    cols = ["mse_norm", "mae_norm", "smape", "n_windows", "best_epoch", "train_loss",
            "best_val_loss"]
    _write_rows(cfg.out(f"sweep_{parameter}.csv"), ["parameter", "value", *cols],
                [[parameter, r["value"], *(r[c] if c in ("n_windows", "best_epoch") else _fmt(r[c])
                                           for c in cols)] for r in rows])
    return rows


def _rolling_forecast(ckpt, history: np.ndarray, replay: np.ndarray, norm: Normalizer) -> np.ndarray:
    """Forecast the replay horizon-by-horizon from the true values seen so far."""
    task = ckpt.task
    full = np.concatenate([history, replay])
    start, out = history.size, []
    if start < task.lookback:
        raise SplitError(f"history has {start} samples, the model needs {task.lookback}")
    for s in range(0, replay.size, task.horizon):
        x = norm.normalize(full[start + s - task.lookback : start + s])
        out.append(norm.denormalize(forward_batch(x[None], ckpt.params)[0][0]))
    return np.maximum(np.concatenate(out)[: replay.size], 0.0)


def _read_forecast_csv(path, n: int) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "forecast" not in rows[0]:
        raise IngestError(f"{path}: expected a 'forecast' column")
    vals = np.array([float(r["forecast"]) for r in rows])
    if vals.size != n:
        raise SimError(f"{path} has {vals.size} forecast rows, the replay has {n} steps")
    return vals


def cmd_simulate(cfg: RunConfig, workload_path: str, checkpoint: str | None = None,
                 forecast_csv: str | None = None) -> dict[str, dict]:
    traces = _ingest(cfg, workload_path)
    ts = _pick_series(traces, cfg.series_id)
    n_replay = cfg.replay_steps or (cfg.task.horizon if cfg.task else None)
    n_replay = _need(n_replay, "replay_steps")
    if n_replay > len(ts):
        raise SplitError(f"replay_steps={n_replay} exceeds the workload length {len(ts)}")
    history, replay = ts.values[:-n_replay], ts.values[-n_replay:]
    replay_ts = TimeSeries(replay, ts.step, ts.start + history.size * ts.step, ts.id)

    policies = {"ideal": Policy.ideal()}
    if forecast_csv is not None:
        policies["proactive"] = Policy.proactive(_read_forecast_csv(forecast_csv, n_replay))
    elif checkpoint is not None or cfg.checkpoint is not None:
        ckpt = load_checkpoint(checkpoint or cfg.checkpoint)
        norm = _checkpoint_normalizers(ckpt).get(ts.id) or Normalizer.fit(history)
        policies["proactive"] = Policy.proactive(_rolling_forecast(ckpt, history, replay, norm))
    policies["reactive"] = Policy.reactive()

    summaries = {}
    for name, pol in policies.items():
        res = simulate(replay_ts, pol, cfg.sim)
        summaries[name] = res.summary
        write_trace(res.trace, cfg.out(f"trace_{name}.csv"))
    write_summary(summaries, cfg.out("hpa_summary.csv"))
    for name, s in summaries.items():
        print(f"{name:10s} ave_lat={s['ave_lat']:.4f} p99={s['p99']:.4f} "
              f"timeout_rate={s['timeout_rate']:.5f} ave_pod={s['ave_pod']:.3f}")
    return summaries


# ---------------------------------------------------------------------------
# argument parsing


def _stage(exc: BaseException) -> str:
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    for kind, name in ((ConfigError, "config"), (IngestError, "data"), (SplitError, "data"),
                       (TrainingError, "training"), (SimError, "hpasim"),
                       (SpectralError, "spectral")):
        if isinstance(exc, kind):
            return name
    if isinstance(exc, ModelError):
        return f"model/{exc.stage}" if exc.stage else "model"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--data", help="long-format trace CSV")
    common.add_argument("--out", dest="output_dir", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--lookback", type=int)
    common.add_argument("--horizon", type=int)
    common.add_argument("--series-id", dest="series_id")
    common.add_argument("--granularity", type=float, help="sample spacing in seconds")

    p = argparse.ArgumentParser(prog="fremer", description="Frequency-domain workload forecaster")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    t.add_argument("--checkpoint", help="where to write the checkpoint")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="start from this checkpoint (task must match)")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or a baseline")
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", choices=Baseline.KINDS)
    e.add_argument("--period", type=int, default=24, help="seasonal_naive period")
    e.add_argument("--lam", type=float, default=1.0, help="ridge_linear penalty")
    e.add_argument("--split", choices=("val", "test"), default="test")

    f = sub.add_parser("forecast", parents=[common], help="forecast the next horizon of a series")
    f.add_argument("--checkpoint")
    f.add_argument("--series", required=True, help="long-format CSV holding the series")
    f.add_argument("--attention", help="also write per-head attention scores here")
    f.add_argument("--output", help="forecast CSV path (default: <out>/forecast.csv)")

    s = sub.add_parser("spectrum", parents=[common], help="lookback spectrum and bin alignment")
    s.add_argument("--series", required=True)
    s.add_argument("--period", type=float)

    w = sub.add_parser("sweep", parents=[common], help="train+eval once per parameter value")
    w.add_argument("--param", required=True, choices=SWEEPABLE)
    w.add_argument("--values", required=True, help="comma-separated values")

    h = sub.add_parser("simulate-hpa", parents=[common], help="autoscaling replay")
    h.add_argument("--workload", required=True, help="long-format CSV of request rates (req/s)")
    src = h.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", help="forecast the replay with this model")
    src.add_argument("--forecast-csv", help="precomputed forecast (column 'forecast')")
    h.add_argument("--replay-steps", type=int)
    return p


def _config_from_args(args) -> tuple[RunConfig, dict]:
    values = load_config(args.config) if args.config else {}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = val.strip()
    for key in ("data", "output_dir", "seed", "lookback", "horizon", "series_id", "epochs",
                "replay_steps", "granularity"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    if args.command == "train" and args.checkpoint is not None:
        values["checkpoint"] = args.checkpoint
    shape = {}
    if args.command == "spectrum":
        try:
            shape = {k: int(values.pop(k)) for k in ("lookback", "horizon") if k in values}
        except ValueError as exc:
            raise ConfigError(f"lookback/horizon: {exc}") from exc
    return RunConfig.from_mapping(values), shape


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, shape = _config_from_args(args)
        if args.command == "train":
            cmd_train(cfg, resume=args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.baseline, args.period, args.lam, args.split)
        elif args.command == "forecast":
            cmd_forecast(cfg, args.checkpoint, args.series, args.attention, args.output)
        elif args.command == "spectrum":
            cmd_spectrum(cfg, args.series, args.period, **shape)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.param, [v.strip() for v in args.values.split(",") if v.strip()])
        elif args.command == "simulate-hpa":
            cmd_simulate(cfg, args.workload, args.checkpoint, args.forecast_csv)
    except Exception as exc:  # noqa: BLE001 -- every failure maps to a labelled exit
        msg = exc.message if isinstance(exc, ModelError) else str(exc)
        print(f"fremer [{_stage(exc)}]: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
