import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from erracc.data import (
    PROTOCOLS,
    DataError,
    NoiseSchedule,
    Protocol,
    SplitSpec,
    Standardizer,
    WindowBatch,
    corrupt_with_noise,
    generate_dataset,
    load_dataset,
    make_windows,
)

SMALL_L63 = Protocol("l63", 0.01, 1, 3000, 2000, 500, observed=(0, 1))
SMALL_L96 = Protocol("l96", 0.001, 5, 600, 400, 100, observed=tuple(range(8)))


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- generation


def test_l63_full_protocol(tmp_path):
    ds = generate_dataset("l63", tmp_path, seed=0)
    assert ds.values.shape == (1_499_800, 3)
    lengths = [hi - lo for lo, hi in (ds.splits.train, ds.splits.val, ds.splits.test)]
    assert lengths == [900_000, 100_000, 499_800]
    z = ds.standardizer.standardize(np.asarray(ds.values[: 900_000][:, [0, 1]]))
    assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
    assert_allclose(z.std(axis=0), 1.0, atol=1e-9)
    assert ds.observed == (0, 1)


def test_l96_protocol_counts():
    p = PROTOCOLS["l96"]
    assert p.n_rows == 9_000_000 - 200
    assert p.n_generated == 9_000_000
    assert (p.n_train, p.n_val) == (1_000_000, 100_000)
    assert len(p.observed) == 8
    assert p.dt * p.save_every == pytest.approx(0.005)


def test_desk_protocol_sizes():
    assert PROTOCOLS["l63-desk"].n_train == 100_000
    assert PROTOCOLS["l96-desk"].n_train == 200_000


def test_small_l96_dataset(tmp_path):
    ds = generate_dataset(SMALL_L96, tmp_path, "tiny96", seed=3)
    assert ds.values.shape == (600, 8 + 256)
    assert ds.dim == 8
    assert ds.observed_std().shape == (600, 8)


def test_generation_deterministic_and_reloadable(tmp_path):
    a = generate_dataset(SMALL_L63, tmp_path / "a", "d", seed=1)
    b = generate_dataset(SMALL_L63, tmp_path / "b", "d", seed=1)
    assert _sha(tmp_path / "a" / "d.f64") == _sha(tmp_path / "b" / "d.f64")
    again = load_dataset(tmp_path / "a" / "d")
    assert_array_equal(np.asarray(again.values), np.asarray(a.values))
    assert again.splits == a.splits
    assert_array_equal(again.standardizer.mean, b.standardizer.mean)
    meta = json.loads((tmp_path / "a" / "d.meta.json").read_text())
    assert meta["shape"] == [3000, 3]
    assert meta["discarded"] == 200


def test_chunked_generation_equals_single_run(tmp_path):
    a = generate_dataset(SMALL_L63, tmp_path, "one", chunk_rows=10_000)
    b = generate_dataset(SMALL_L63, tmp_path, "many", chunk_rows=137)
    assert_array_equal(np.asarray(a.values), np.asarray(b.values))


def test_file_layout_is_little_endian_rows(tmp_path):
    ds = generate_dataset(SMALL_L63, tmp_path, "raw")
    raw = np.fromfile(tmp_path / "raw.f64", dtype="<f8").reshape(-1, 3)
    assert_array_equal(raw, np.asarray(ds.values))


def test_missing_dataset(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nothing")


def test_standardizer_uses_training_rows_only(tmp_path):
    ds = generate_dataset(SMALL_L63, tmp_path, "s")
    all_rows = Standardizer.fit(ds.observed_raw())
    train = Standardizer.fit(ds.observed_raw("train"))
    assert_array_equal(train.mean, ds.standardizer.mean)
    assert not np.allclose(all_rows.mean, ds.standardizer.mean, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- splits and standardizer


def test_split_validation():
    with pytest.raises(DataError):
        SplitSpec((0, 10), (11, 20), (20, 30))
    with pytest.raises(DataError):
        SplitSpec((0, 10), (10, 10), (10, 30))
    s = SplitSpec.from_sizes(100, 60, 20)
    assert (s.train, s.val, s.test) == ((0, 60), (60, 80), (80, 100))


def test_standardizer_values():
    st_ = Standardizer(np.array([1.0, -2.0]), np.array([2.0, 0.5]))
    assert_array_equal(st_.standardize([1.0, -2.0]), [0.0, 0.0])
    assert_array_equal(st_.standardize([3.0, -1.5]), [1.0, 1.0])
    x = np.random.default_rng(0).normal(3, 10, size=(1000, 2))
    assert np.max(np.abs(st_.destandardize(st_.standardize(x)) - x)) < 1e-12
    with pytest.raises(DataError):
        st_.standardize(np.zeros((4, 3)))
    with pytest.raises(DataError):
        Standardizer(np.zeros(2), np.array([1.0, 0.0]))
    assert_array_equal(Standardizer.from_json(st_.to_json()).std, st_.std)


# ---------------------------------------------------------------- windows


def _series(n=500, d=2):
    return np.arange(n * d, dtype=np.float64).reshape(n, d)


def test_windows_horizon_one_pairs():
    s = _series()
    b = next(make_windows(s, (0, 400), 1, 64, np.random.default_rng(0)))
    assert_array_equal(b.offsets, 1)
    assert_array_equal(b.prev, b.context)
    assert_array_equal(b.target, s[b.starts + 1])


def test_windows_deterministic():
    s = _series()
    a = list(make_windows(s, (0, 400), 10, 32, np.random.default_rng(7), 5))
    b = list(make_windows(s, (0, 400), 10, 32, np.random.default_rng(7), 5))
    for x, y in zip(a, b):
        assert_array_equal(x.starts, y.starts)
        assert_array_equal(x.offsets, y.offsets)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 200), st.integers(20, 200), st.integers(1, 19), st.integers(0, 2**31))
def test_windows_stay_inside_split(lo, length, horizon, seed):
    s = _series(500)
    hi = lo + length
    for b in make_windows(s, (lo, hi), horizon, 16, np.random.default_rng(seed), 3):
        assert np.all(b.starts >= lo)
        assert np.all(b.starts + b.offsets < hi)
        assert np.all((b.offsets >= 1) & (b.offsets <= horizon))
        assert_array_equal(b.prev, s[b.starts + b.offsets - 1])


def test_windows_horizon_too_long():
    with pytest.raises(DataError):
        next(make_windows(_series(), (0, 10), 10, 4, np.random.default_rng(0)))


# ---------------------------------------------------------------- noise


def _batch(n=10, t=10, d=2):
    z = np.zeros((n, d))
    return WindowBatch(np.zeros(n, int), np.full(n, t), z, z.copy(), np.ones((n, d)))


def test_noise_fraction_zero_is_identity():
    b = _batch()
    rng = np.random.default_rng(0)
    state = rng.bit_generator.state
    out = corrupt_with_noise(b, NoiseSchedule(0.003), 0.0, rng)
    assert out is b
    assert rng.bit_generator.state == state


def test_noise_std_at_lead_ten():
    assert_allclose(math.sqrt(NoiseSchedule(0.003).variance(10)), 0.17320508, atol=1e-8)
    b = _batch(n=100_000, t=10, d=1)
    out = corrupt_with_noise(b, NoiseSchedule(0.003), 1.0, np.random.default_rng(1))
    diff = out.prev - b.prev
    assert abs(diff.std() / math.sqrt(0.03) - 1) < 0.02
    # mean-preserving within three standard errors
    assert abs(diff.mean()) < 3 * math.sqrt(0.03 / diff.size)
    assert_array_equal(out.target, b.target)


def test_noise_fraction_rows():
    b = _batch(n=50)
    out = corrupt_with_noise(b, NoiseSchedule(0.003), 0.3, np.random.default_rng(2))
    assert out.noisy.sum() == 15
    changed = np.any(out.prev != b.prev, axis=1)
    assert_array_equal(changed, out.noisy)


def test_noise_raw_units_scale():
    b = _batch(n=100_000, t=10, d=2)
    out = corrupt_with_noise(b, NoiseSchedule(0.003), 1.0, np.random.default_rng(3), scale=1 / np.array([2.0, 8.0]))
    assert_allclose((out.prev - b.prev).std(axis=0), math.sqrt(0.03) / np.array([2.0, 8.0]), rtol=0.02)


def test_noise_negative_variance():
    with pytest.raises(DataError):
        NoiseSchedule(-1.0, 0.5).variance([1, 2])
    with pytest.raises(DataError):
        corrupt_with_noise(_batch(), NoiseSchedule(0.1), 1.5, np.random.default_rng(0))
