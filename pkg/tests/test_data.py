import numpy as np
import pytest

from cpnet.data import (
    DataError,
    Dataset,
    SynthSpec,
    apply_scaler,
    fit_scaler,
    invert_scaler,
    load_csv,
    prepare,
    split,
    synth_generate,
    window_set,
    windows,
    write_csv,
)


def fake(name, length, n=2):
    values = np.arange(length * n, dtype=float).reshape(length, n)
    return Dataset(name, values, [str(i) for i in range(length)], [f"c{i}" for i in range(n)])


def test_load_csv(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("date,a,b\n2020-01-01 00:00,1.5,2\n2020-01-01 01:00,3,-4e-1\n")
    ds = load_csv(path)
    assert ds.name == "toy" and ds.columns == ["a", "b"]
    assert ds.values.shape == (2, 2) and ds.values[1, 1] == -0.4
    assert ds.timestamps[0] == "2020-01-01 00:00"


def test_load_csv_names_bad_cell(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("date,a,b\nt0,1,2\nt1,1,oops\nt2,3,4\n")
    with pytest.raises(DataError, match=r"bad.csv:3: column 'b'.*'oops'"):
        load_csv(path)


def test_load_csv_rejects_missing(tmp_path):
    path = tmp_path / "gap.csv"
    path.write_text("date,a\nt0,1\nt1,\n")
    with pytest.raises(DataError, match="missing value"):
        load_csv(path)


def test_csv_round_trip(tmp_path):
    ds = synth_generate(SynthSpec(length=50, n_vars=3, noise_std=0.2, seed=4))
    write_csv(ds, tmp_path / "s.csv")
    back = load_csv(tmp_path / "s.csv")
    assert back.values.tobytes() == ds.values.tobytes()


def test_ett_hourly_split_boundaries():
    ds = fake("ETTh1", 17420)
    s = split(ds, 96, 96)
    assert s.train == (0, 8640)
    assert s.val == (8544, 11520)
    assert s.test == (11424, 14400)


def test_ett_minute_split_boundaries():
    s = split(fake("ETTm1", 69680), 96, 96)
    assert s.train == (0, 34560)
    assert s.val == (34560 - 96, 46080)
    assert s.test == (46080 - 96, 57600)


def test_ratio_split():
    s = split(fake("custom", 1000), 24, 24)
    assert s.train == (0, 700)
    assert s.val == (700 - 24, 800)
    assert s.test == (800 - 24, 1000)


def test_split_too_short():
    with pytest.raises(DataError):
        split(fake("custom", 192), 96, 96)
    with pytest.raises(DataError):
        split(fake("ETTh2", 5000), 96, 96)


def test_scaler_uses_train_only_and_round_trips():
    ramp = np.arange(100.0)[:, None]
    sc = fit_scaler(ramp)
    assert sc.mean[0] == 49.5
    const = fit_scaler(np.full((10, 1), 3.0))
    np.testing.assert_array_equal(apply_scaler(const, np.full((4, 1), 3.0)), 0.0)
    x = np.random.default_rng(0).standard_normal((30, 3)) * 7 + 2
    assert np.max(np.abs(invert_scaler(sc, apply_scaler(sc, x)) - x)) < 1e-9
    with pytest.raises(DataError):
        fit_scaler(np.zeros((0, 2)))


def test_prepare_scaler_ignores_later_splits():
    ds = fake("custom", 1000)
    data = prepare(ds, 24, 24)
    late = ds.values.copy()
    late[700:] = 1e6
    data2 = prepare(Dataset("custom", late, ds.timestamps, ds.columns), 24, 24)
    np.testing.assert_array_equal(data.scaler.mean, data2.scaler.mean)
    np.testing.assert_array_equal(data.scaler.std, data2.scaler.std)


def test_window_counts_and_alignment():
    values = np.random.default_rng(1).standard_normal((200, 2))
    ws = windows(values, (0, 200), 96, 96)
    assert len(ws) == 9
    assert len(windows(values, (0, 200), 96, 96, stride=10)) == 1
    for w in ws:
        np.testing.assert_array_equal(w.x, values[w.origin: w.origin + 96])
        np.testing.assert_array_equal(w.y, values[w.origin + 96: w.origin + 192])
    with pytest.raises(DataError):
        windows(values, (0, 150), 96, 96)


def test_windows_stay_inside_split():
    data = prepare(fake("custom", 1000), 24, 12)
    for name in ("train", "val", "test"):
        a, b = data.splits[name]
        ws = data.windows(name)
        assert ws.origins[0] == a
        assert ws.origins[-1] + 24 + 12 == b
    # validation targets begin exactly where training ends
    assert data.windows("val").origins[0] + 24 == data.splits.train[1]


def test_window_set_stride_origins():
    ws = window_set(np.zeros((100, 1)), (10, 100), 20, 10, stride=7)
    np.testing.assert_array_equal(ws.origins, 10 + 7 * np.arange(len(ws)))
    assert ws.origins[-1] + 30 <= 100


def test_shuffled_batches_are_seeded():
    ws = window_set(np.random.default_rng(0).standard_normal((300, 1)), (0, 300), 10, 5)
    a = [x.tobytes() for x, _ in ws.batches(16, np.random.default_rng(5))]
    b = [x.tobytes() for x, _ in ws.batches(16, np.random.default_rng(5))]
    assert a == b and sum(len(x) for x, _ in ws.batches(16)) == len(ws)


def test_synth_periodic_and_seeded():
    ds = synth_generate(SynthSpec(length=200, components=((24, 1.0),), noise_std=0.0, seed=3))
    np.testing.assert_allclose(ds.values[:-24], ds.values[24:], atol=1e-12)
    spec = SynthSpec(length=500, n_vars=2, components=((24, 1.0), (168, 0.5)), noise_std=0.1, seed=9)
    assert synth_generate(spec).values.tobytes() == synth_generate(spec).values.tobytes()


def test_synth_two_components_construction():
    spec = SynthSpec(length=400, n_vars=1, components=((24, 1.0), (168, 0.5)), seed=2)
    ds = synth_generate(spec)
    rng = np.random.default_rng(2)
    ph = rng.uniform(0, 2 * np.pi, size=(1, 2))
    t = np.arange(400)
    expect = np.sin(2 * np.pi * t / 24 + ph[0, 0]) + 0.5 * np.sin(2 * np.pi * t / 168 + ph[0, 1])
    np.testing.assert_allclose(ds.values[:, 0], expect, atol=1e-12)


def test_synth_spec_text_round_trip():
    spec = SynthSpec(length=300, n_vars=2, components=((24.0, 1.0), (168.0, 0.5)), noise_std=0.1, seed=1)
    assert SynthSpec.from_text(spec.to_text()) == spec
    with pytest.raises(ValueError):
        SynthSpec.from_text("bogus=1")
    with pytest.raises(DataError):
        SynthSpec(components=((1.0, 1.0),))
