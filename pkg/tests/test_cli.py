import csv
import json

import numpy as np
import pytest

from fremer.checkpoint import load_checkpoint, save_checkpoint
from fremer.cli import ConfigError, RunConfig, main, parse_config_text
from fremer.data import TraceSet, emit_csv, ingest_csv
from fremer.model import ForecastTask, FremerParams, forward_batch, param_shapes
from fremer.synthetic import two_tone

CONFIG = """\
# tiny task for CLI tests
lookback = 48
horizon = 24
n_combinations = 8
n_heads = 2
epochs = 2
seed = 3
"""


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def work(tmp_path):
    emit_csv(two_tone(n_instances=2, length=400, seed=1), tmp_path / "data.csv")
    (tmp_path / "run.cfg").write_text(CONFIG + f"data = {tmp_path / 'data.csv'}\n"
                                      f"output_dir = {tmp_path / 'out'}\n")
    return tmp_path


def run(work, *args):
    return main([args[0], "-c", str(work / "run.cfg"), *args[1:]])


def test_config_parsing():
    vals = parse_config_text("lookback = 10  # comment\n\nhorizon=5\n")
    assert vals == {"lookback": "10", "horizon": "5"}
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("lookbak = 3\n")
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("lookback = 3\nno equals here\n")


def test_run_config_revalidates_modules():
    cfg = RunConfig.from_mapping({"lookback": "720", "horizon": "144", "seed": "7"})
    assert cfg.task == ForecastTask(720, 144)
    assert cfg.train.seed == 7 and cfg.sim.seed == 7
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"lookback": "36", "horizon": "18"})  # L'=7 vs H=8
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"lookback": "48", "horizon": "24", "n_combinations": "8",
                                "n_heads": "2", "train_ratio": "0.9"})
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"lookback": "48"})


def test_train_twice_is_bitwise_identical(work, capsys):
    assert run(work, "train", "--checkpoint", str(work / "a.frmr")) == 0
    assert run(work, "train", "--checkpoint", str(work / "b.frmr")) == 0
    assert (work / "a.frmr").read_bytes() == (work / "b.frmr").read_bytes()
    out = capsys.readouterr().out
    assert "train_loss=" in out and "val_loss=" in out
    rows = read_csv(work / "out" / "history.csv")
    assert rows[0] == ["epoch", "train_loss", "val_loss", "wall_seconds"]
    assert len(rows) == 3


def test_flags_override_config(work):
    assert run(work, "train", "--set", "epochs=1", "--checkpoint", str(work / "a.frmr")) == 0
    assert len(read_csv(work / "out" / "history.csv")) == 2


def test_resume_refuses_other_task(work, capsys):
    assert run(work, "train", "--checkpoint", str(work / "a.frmr")) == 0
    code = run(work, "train", "--set", "n_heads=4", "--resume", str(work / "a.frmr"))
    assert code != 0
    assert "[checkpoint]" in capsys.readouterr().err
    assert run(work, "train", "--set", "epochs=1", "--resume", str(work / "a.frmr"),
               "--checkpoint", str(work / "c.frmr")) == 0


def constant_fixture(work):
    """Constant series plus an all-zero model: the forecast is exact."""
    ts = TraceSet.from_arrays({"c": np.full(300, 4.0), "d": np.full(300, -2.5)})
    emit_csv(ts, work / "const.csv")
    task = ForecastTask(48, 24, n_combinations=8, n_heads=2)
    zeros = FremerParams(task, {k: np.zeros(s, dtype=complex if c else float)
                                for k, (s, c) in param_shapes(task).items()})
    save_checkpoint(work / "oracle.frmr", zeros)
    return work / "const.csv", work / "oracle.frmr"


def test_eval_perfect_oracle_gives_zero_metrics(work):
    data, ckpt = constant_fixture(work)
    assert run(work, "eval", "--data", str(data), "--checkpoint", str(ckpt)) == 0
    agg = json.loads((work / "out" / "eval.json").read_text())["aggregate"]
    assert agg["mse_norm"] == 0.0 and agg["mae_norm"] == 0.0 and agg["smape"] == 0.0


def test_eval_baseline_route_and_schema(work):
    assert run(work, "eval", "--baseline", "seasonal_naive", "--period", "24") == 0
    rows = read_csv(work / "out" / "eval.csv")
    assert rows[0] == ["instance_id", "mse_norm", "mae_norm", "smape", "n_windows"]
    assert [r[0] for r in rows[1:]] == ["inst000", "inst001"]
    agg = json.loads((work / "out" / "eval.json").read_text())
    assert list(agg) == ["aggregate"]
    assert sorted(agg["aggregate"]) == ["mae_norm", "mse_norm", "n_windows", "smape"]


def test_forecast_outputs(work):
    ck = work / "a.frmr"
    assert run(work, "train", "--checkpoint", str(ck)) == 0
    attn = work / "attn.csv"
    assert run(work, "forecast", "--checkpoint", str(ck), "--series", str(work / "data.csv"),
               "--series-id", "inst001", "--attention", str(attn)) == 0
    rows = read_csv(work / "out" / "forecast.csv")
    assert rows[0] == ["step", "timestamp", "forecast"] and len(rows) == 1 + 24
    arows = read_csv(attn)
    assert arows[0] == ["block", "head", "query", "key", "score"]
    assert len(arows) == 1 + 2 * 4 * 4

    # same numbers as calling the library directly
    c = load_checkpoint(ck)
    ids = json.loads(c.header["instance_ids"])
    i = ids.index("inst001")
    mean, std = c.extras["norm_mean"][i], c.extras["norm_std"][i]
    vals = ingest_csv(work / "data.csv").instances["inst001"].values
    fc, _ = forward_batch(((vals[-48:] - mean) / std)[None], c.params)
    expect = fc[0] * std + mean
    got = np.array([float(r[2]) for r in rows[1:]])
    assert np.array_equal(got, expect)


def test_rejections_are_logged_and_granularity_overrides(tmp_path):
    rows = ["timestamp,series_id,value"]
    rows += [f"{i * 60},a,{i}" for i in range(300) if not 10 <= i <= 15]
    rows += [f"{i * 60},b,{i}" for i in range(300)]
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    args = ["eval", "--data", str(tmp_path / "d.csv"), "--lookback", "24", "--horizon", "12",
            "--set", "n_combinations=8", "--baseline", "persistence", "--out", str(tmp_path / "o")]
    assert main(args) == 0
    lines = (tmp_path / "o" / "rejected.jsonl").read_text().splitlines()
    assert [json.loads(x)["id"] for x in lines] == ["a"]
    # a 120 s grid is not the grid these timestamps sit on
    assert main(args + ["--granularity", "120"]) != 0


def test_forecast_needs_series_choice(work, capsys):
    assert run(work, "train", "--checkpoint", str(work / "a.frmr")) == 0
    assert run(work, "forecast", "--checkpoint", str(work / "a.frmr"),
               "--series", str(work / "data.csv")) != 0
    assert "[config]" in capsys.readouterr().err


def test_spectrum_worked_example(tmp_path):
    ts = TraceSet.from_arrays({"s": np.cos(2 * np.pi * np.arange(300) / 24)})
    emit_csv(ts, tmp_path / "s.csv")
    code = main(["spectrum", "--series", str(tmp_path / "s.csv"), "--lookback", "300",
                 "--horizon", "60", "--period", "24", "--out", str(tmp_path / "o")])
    assert code == 0
    rows = read_csv(tmp_path / "o" / "alignment.csv")
    assert rows[0] == ["period", "lookback", "horizon", "complete_bin", "complete_is_exact",
                       "input_bin_lo", "input_bin_hi", "input_freq_lo", "input_freq_hi",
                       "leakage_ratio"]
    row = dict(zip(rows[0], rows[1]))
    assert float(row["complete_bin"]) == 15 and row["complete_is_exact"] == "1"
    assert (row["input_bin_lo"], row["input_bin_hi"]) == ("12", "13")
    spec = read_csv(tmp_path / "o" / "spectrum.csv")
    assert spec[0] == ["k", "cycles_per_sample", "angular", "magnitude"]
    assert len(spec) == 1 + 151


def test_spectrum_constant_series_is_dc_only(tmp_path):
    emit_csv(TraceSet.from_arrays({"s": np.full(64, 3.0)}), tmp_path / "s.csv")
    assert main(["spectrum", "--series", str(tmp_path / "s.csv"), "--lookback", "64",
                 "--horizon", "8", "--out", str(tmp_path / "o")]) == 0
    mags = [float(r[3]) for r in read_csv(tmp_path / "o" / "spectrum.csv")[1:]]
    assert mags[0] == pytest.approx(192.0)
    assert max(mags[1:]) < 1e-12
    assert not (tmp_path / "o" / "alignment.csv").exists()


def test_sweep_rows_and_single_value_equivalence(work, monkeypatch):
    monkeypatch.setenv("FREMER_THREADS", "2")
    assert run(work, "sweep", "--param", "n_heads", "--values", "1,2") == 0
    rows = read_csv(work / "out" / "sweep_n_heads.csv")
    assert len(rows) == 3 and [r[1] for r in rows[1:]] == ["1", "2"]

    # the n_heads=2 row equals a plain train + eval with the same config
    assert run(work, "train", "--checkpoint", str(work / "p.frmr"), "--out", str(work / "plain")) == 0
    assert run(work, "eval", "--checkpoint", str(work / "p.frmr"), "--out", str(work / "plain")) == 0
    agg = json.loads((work / "plain" / "eval.json").read_text())["aggregate"]
    row = dict(zip(rows[0], rows[2]))
    assert float(row["smape"]) == agg["smape"] and float(row["mse_norm"]) == agg["mse_norm"]


def test_sweep_rejects_unknown_parameter(work):
    with pytest.raises(SystemExit):
        run(work, "sweep", "--param", "epochs", "--values", "1")


def test_simulate_writes_summary(work):
    assert run(work, "train", "--checkpoint", str(work / "a.frmr")) == 0
    args = ["--workload", str(work / "data.csv"), "--series-id", "inst000",
            "--set", "per_pod_capacity=5"]
    assert run(work, "simulate-hpa", *args, "--checkpoint", str(work / "a.frmr")) == 0
    first = (work / "out" / "hpa_summary.csv").read_bytes()
    rows = read_csv(work / "out" / "hpa_summary.csv")
    assert rows[0] == ["policy", "ave_lat", "p999", "p99", "p90", "timeout_rate", "ave_pod"]
    assert [r[0] for r in rows[1:]] == ["ideal", "proactive", "reactive"]
    assert run(work, "simulate-hpa", *args, "--checkpoint", str(work / "a.frmr")) == 0
    assert (work / "out" / "hpa_summary.csv").read_bytes() == first

    fc = work / "fc.csv"
    with open(fc, "w") as fh:
        fh.write("step,forecast\n" + "".join(f"{i},10.0\n" for i in range(24)))
    assert run(work, "simulate-hpa", *args, "--forecast-csv", str(fc)) == 0
    with open(fc, "w") as fh:
        fh.write("step,forecast\n1,10.0\n")
    assert run(work, "simulate-hpa", *args, "--forecast-csv", str(fc)) != 0


@pytest.mark.parametrize("argv,stage", [
    (["eval", "--data", "missing.csv", "--lookback", "48", "--horizon", "24",
      "--set", "n_combinations=8", "--baseline", "persistence"], "[io]"),
    (["train", "--lookback", "48"], "[config]"),
    (["eval", "--set", "bogus=1"], "[config]"),
])
def test_errors_exit_nonzero_with_stage(tmp_path, capsys, argv, stage):
    assert main(argv) != 0
    assert stage in capsys.readouterr().err
