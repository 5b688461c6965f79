import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fremer.data import Normalizer, TraceSet, prepare_dataset
from fremer.evalharness import (Baseline, baseline_forecast, evaluate, mse_mae_norm, smape,
                                smape_terms, write_results)


def test_smape_examples():
    assert smape([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert smape([3.0], [1.0]) == 100.0
    assert smape([0.0], [0.0]) == 0.0
    assert smape([0.0, 3.0], [0.0, 1.0]) == 50.0


@given(st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)), min_size=1, max_size=40),
       st.floats(1e-3, 1e3))
@settings(max_examples=200, deadline=None)
def test_smape_symmetric_and_scale_invariant(pairs, c):
    f = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    assert smape(f, y) == pytest.approx(smape(y, f), abs=1e-9)
    assert smape(c * f, c * y) == pytest.approx(smape(f, y), abs=1e-9)


def test_mse_mae_examples():
    n = Normalizer(0.0, 1.0)
    assert mse_mae_norm([1.0, 2.0], [1.0, 2.0], n) == (0.0, 0.0)
    assert mse_mae_norm([2.0, 3.0], [1.0, 2.0], n) == (1.0, 1.0)


def test_mse_mae_against_loop():
    rng = np.random.default_rng(0)
    f, y = rng.normal(size=30) * 5 + 2, rng.normal(size=30) * 5 + 2
    n = Normalizer(2.0, 5.0)
    se = ae = 0.0
    for a, b in zip(f, y):
        d = (a - 2.0) / 5.0 - (b - 2.0) / 5.0
        se += d * d
        ae += abs(d)
    mse, mae = mse_mae_norm(f, y, n)
    assert mse == pytest.approx(se / 30, rel=1e-12)
    assert mae == pytest.approx(ae / 30, rel=1e-12)


@given(st.floats(0.1, 100), st.floats(-100, 100), st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_normalized_errors_are_affine_invariant(a, b, seed):
    rng = np.random.default_rng(seed)
    train_raw, f, y = rng.normal(size=50), rng.normal(size=10), rng.normal(size=10)
    m1 = mse_mae_norm(f, y, Normalizer.fit(train_raw))
    m2 = mse_mae_norm(a * f + b, a * y + b, Normalizer.fit(a * train_raw + b))
    assert m1 == pytest.approx(m2, rel=1e-8, abs=1e-12)


def test_baseline_examples():
    np.testing.assert_array_equal(baseline_forecast("persistence", [1, 2, 3], 2), [3, 3])
    np.testing.assert_array_equal(baseline_forecast("seasonal_naive", [1, 2, 1, 2], 3, period=2),
                                  [1, 2, 1])


def test_ridge_zero_penalty_recovers_linear_map():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 8))
    W, c = rng.normal(size=(8, 3)), rng.normal(size=3)
    Y = X @ W + c
    b = Baseline("ridge_linear", lam=0.0).fit_arrays(X, Y)
    np.testing.assert_allclose(b.predict(X, 3), Y, atol=1e-8)


def test_ridge_requires_fit():
    with pytest.raises(ValueError):
        Baseline("ridge_linear").predict(np.zeros((1, 4)), 2)


def test_unknown_baseline():
    with pytest.raises(ValueError):
        Baseline("prophet")


def dataset(arrays, L=24, T=12):
    return prepare_dataset(TraceSet.from_arrays(arrays), L, T)


def test_persistence_on_constant_series_is_perfect():
    agg = evaluate(Baseline("persistence"), dataset({"a": np.full(300, 5.0)})).aggregate
    assert (agg.mse_norm, agg.mae_norm, agg.smape) == (0.0, 0.0, 0.0)


def test_seasonal_naive_on_periodic_series_is_perfect():
    vals = 10 + np.tile([1.0, 4.0, 2.0, 7.0, 3.0, 5.0], 60)
    agg = evaluate(Baseline("seasonal_naive", period=6), dataset({"a": vals})).aggregate
    assert agg.mse_norm == pytest.approx(0.0, abs=1e-24)
    assert agg.smape == pytest.approx(0.0, abs=1e-12)


def brute_force(model, ds, split="test"):
    ws = getattr(ds, split)
    se = ae = sm = 0.0
    count = 0
    for row in range(len(ws)):
        inst = int(ws.index[row, 0])
        norm = ds.normalizers[ds.ids[inst]]
        X, Y = ws.batch([row])
        F = model.predict(X, ws.horizon)
        for f, y in zip(F[0], Y[0]):
            se += (f - y) ** 2
            ae += abs(f - y)
            fr, yr = f * norm.std + norm.mean, y * norm.std + norm.mean
            den = abs(fr) + abs(yr)
            sm += 0.0 if den == 0 else 200 * abs(fr - yr) / den
            count += 1
    return se / count, ae / count, sm / count


@pytest.mark.parametrize("seed", range(5))
def test_aggregate_matches_flat_loop(seed):
    rng = np.random.default_rng(seed)
    arrays = {f"s{i}": 5 + rng.normal(size=rng.integers(150, 260)) for i in range(3)}
    ds = dataset(arrays)
    model = Baseline("ridge_linear").fit(ds.train)
    agg = evaluate(model, ds).aggregate
    ref = brute_force(model, ds)
    assert agg.mse_norm == pytest.approx(ref[0], rel=1e-10)
    assert agg.mae_norm == pytest.approx(ref[1], rel=1e-10)
    assert agg.smape == pytest.approx(ref[2], rel=1e-10)
    assert agg.n_windows == len(ds.test)


def test_write_results_schema(tmp_path):
    rng = np.random.default_rng(2)
    ds = dataset({"b": 5 + rng.normal(size=200), "a": 5 + rng.normal(size=200)})
    res = evaluate(Baseline("persistence"), ds)
    write_results(res, tmp_path / "r.csv", tmp_path / "r.json")
    with open(tmp_path / "r.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["instance_id", "mse_norm", "mae_norm", "smape", "n_windows"]
    assert [r[0] for r in rows[1:]] == ["a", "b"]
    agg = json.loads((tmp_path / "r.json").read_text())["aggregate"]
    assert set(agg) == {"mse_norm", "mae_norm", "smape", "n_windows"}
    assert agg["smape"] == res.aggregate.smape
