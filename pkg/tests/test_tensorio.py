import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from kernelconv.errors import DataValidationError
from kernelconv.tensorio import (Dataset, Recording, Spectrogram, apply_standardizer,
                                 baseline_correct, downsample, fit_standardizer,
                                 invert_standardizer, load_dataset, save_dataset,
                                 select_channels)

from conftest import make_dataset


def _rec(data, period=10.0, t0=0.0, names=None):
    data = np.atleast_2d(np.asarray(data, dtype=float))
    names = names or [f"c{i}" for i in range(data.shape[0])]
    return Recording("x", data, period, t0, names)


class TestRoundTrip:
    def test_two_stimuli(self, tmp_path):
        ds = make_dataset(n_stimuli=2, channels=3, samples=10)
        loaded = load_dataset(save_dataset(ds, tmp_path))
        assert loaded.stimulus_ids == ds.stimulus_ids
        for sid in ds.stimulus_ids:
            a, b = ds.recording(sid), loaded.recording(sid)
            assert a.data.tobytes() == b.data.tobytes()
            assert (a.sample_period_ms, a.t0_offset_ms, a.channel_names) == \
                (b.sample_period_ms, b.t0_offset_ms, b.channel_names)
            sa, sb = ds.spectrogram(sid), loaded.spectrogram(sid)
            assert sa.data.tobytes() == sb.data.tobytes()
            assert sa.center_freqs_hz == sb.center_freqs_hz

    def test_load_accepts_directory(self, tmp_path, small_dataset):
        save_dataset(small_dataset, tmp_path)
        assert len(load_dataset(tmp_path)) == 3

    def test_empty_dataset(self, tmp_path):
        path = save_dataset(Dataset(), tmp_path)
        manifest = json.loads(path.read_text())
        assert manifest["stimuli"] == []
        assert manifest["format_version"] == 1
        assert len(load_dataset(path)) == 0

    def test_44_stimuli_blob_count(self, tmp_path):
        save_dataset(make_dataset(n_stimuli=44, channels=2, samples=4), tmp_path)
        assert len(list(tmp_path.glob("*.f64"))) == 88
        assert len(list(tmp_path.glob("*.json"))) == 1

    def test_blob_layout_is_little_endian_row_major(self, tmp_path):
        ds = make_dataset(n_stimuli=1, channels=2, samples=3)
        manifest = json.loads(save_dataset(ds, tmp_path).read_text())
        raw = (tmp_path / manifest["stimuli"][0]["recording_blob"]).read_bytes()
        assert len(raw) == 2 * 3 * 8
        assert np.array_equal(np.frombuffer(raw, "<f8").reshape(2, 3), ds.recordings[0].data)

    @settings(max_examples=25, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                      elements=st.floats(allow_nan=False, allow_infinity=False)))
    def test_bit_exact_property(self, tmp_path_factory, data):
        tmp = tmp_path_factory.mktemp("rt")
        rec = Recording("a", data, 1.0, -2.0, [f"c{i}" for i in range(data.shape[0])])
        spec = Spectrogram("a", data, 1.0, [float(i + 1) for i in range(data.shape[0])])
        loaded = load_dataset(save_dataset(Dataset([rec], [spec]), tmp))
        assert loaded.recording("a").data.tobytes() == data.tobytes()


class TestLoadErrors:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataValidationError, match="missing manifest"):
            load_dataset(tmp_path / "nope.json")

    def test_unpaired_id(self, tmp_path, small_dataset):
        path = save_dataset(small_dataset, tmp_path)
        manifest = json.loads(path.read_text())
        manifest["stimuli"].append({"id": "dog", "recording_blob": "rec_0000.f64",
                                    "spectrogram_blob": None, "channels": 3, "samples": 10,
                                    "freq_channels": 2, "frames": 10})
        path.write_text(json.dumps(manifest))
        with pytest.raises(DataValidationError, match="unpaired stimulus id.*dog"):
            load_dataset(path)

    def test_nan_reports_stimulus_and_offset(self, tmp_path):
        ds = make_dataset(n_stimuli=2, channels=3, samples=10)
        path = save_dataset(ds, tmp_path)
        manifest = json.loads(path.read_text())
        entry = manifest["stimuli"][1]
        # oracle: rewrite the blob independently with a NaN at row 1, col 3
        arr = np.array(ds.recording(entry["id"]).data)
        arr[1, 3] = np.nan
        (tmp_path / entry["recording_blob"]).write_bytes(arr.astype("<f8").tobytes())
        expected = 1 * 10 + 3
        with pytest.raises(DataValidationError) as err:
            load_dataset(path)
        assert "s1" in str(err.value)
        assert f"flat offset {expected}" in str(err.value)
        assert f"byte offset {expected * 8}" in str(err.value)

    def test_dimension_mismatch(self, tmp_path, small_dataset):
        path = save_dataset(small_dataset, tmp_path)
        manifest = json.loads(path.read_text())
        manifest["stimuli"][0]["samples"] = 11
        path.write_text(json.dumps(manifest))
        with pytest.raises(DataValidationError, match="bytes"):
            load_dataset(path)

    def test_unpaired_in_memory(self, small_dataset):
        with pytest.raises(DataValidationError, match="unpaired"):
            Dataset(small_dataset.recordings, small_dataset.spectrograms[:2])

    def test_non_increasing_frequencies(self):
        with pytest.raises(DataValidationError, match="strictly increasing"):
            Spectrogram("a", np.zeros((2, 3)), 10.0, [200.0, 100.0])


class TestBaseline:
    def test_constant_channel(self):
        out = baseline_correct(_rec(np.full((2, 5), 5.0)), 0, 20)
        assert np.all(out.data == 0)

    def test_prestimulus_window(self):
        # samples at -300, -200, -100, 0 ms; window [-200, 0) holds -200 and -100
        rec = _rec([[1.0, 2.0, 4.0, 8.0]], period=100.0, t0=-300.0)
        out = baseline_correct(rec, -200, 0)
        assert np.allclose(out.data, [[-2.0, -1.0, 1.0, 5.0]])

    def test_prestimulus_layout_window(self, rng):
        rec = _rec(rng.standard_normal((2, 230)), period=10.0, t0=-300.0)
        out = baseline_correct(rec, -200, 0)
        # -200..-10 ms are sample indices 10..29
        expected = rec.data - rec.data[:, 10:30].mean(axis=1, keepdims=True)
        assert np.allclose(out.data, expected, atol=1e-14)

    def test_empty_window(self):
        with pytest.raises(DataValidationError, match="empty baseline window"):
            baseline_correct(_rec(np.ones((1, 5)), t0=0.0), -200, 0)

    def test_idempotent(self, rng):
        rec = _rec(rng.standard_normal((3, 40)), t0=-100.0)
        once = baseline_correct(rec, -100, 0)
        twice = baseline_correct(once, -100, 0)
        assert np.allclose(once.data, twice.data, atol=1e-12)


class TestDownsample:
    def test_ratio_one_identity(self, rng):
        rec = _rec(rng.standard_normal((2, 7)))
        assert np.array_equal(downsample(rec, 10.0).data, rec.data)

    def test_block_means_brute_force(self, rng):
        rec = _rec(rng.standard_normal((2, 23)), period=1.0, t0=-5.0)
        out = downsample(rec, 10.0)
        assert out.n_samples == 2
        for c in range(2):
            for j in range(2):
                assert math.isclose(out.data[c, j], sum(rec.data[c, 10 * j + k] for k in range(10)) / 10,
                                    rel_tol=1e-12, abs_tol=1e-15)
        assert out.sample_period_ms == 10.0 and out.t0_offset_ms == -5.0

    def test_non_integer_ratio(self):
        with pytest.raises(DataValidationError):
            downsample(_rec(np.ones((1, 10)), period=3.0), 10.0)


class TestStandardizer:
    def test_population_std(self):
        stats = fit_standardizer(np.array([[1.0], [2.0], [3.0]]))
        assert stats.means[0] == 2.0
        assert math.isclose(stats.stds[0], math.sqrt(2 / 3))

    def test_constant_column_guard(self):
        rows = np.array([[1.0, 7.0], [2.0, 7.0], [4.0, 7.0]])
        stats = fit_standardizer(rows)
        assert stats.means[1] == 7.0 and stats.stds[1] == 0.0
        out = apply_standardizer(rows, stats)
        assert np.all(out[:, 1] == 0.0)

    def test_single_row(self):
        assert np.all(fit_standardizer(np.array([[1.0, 2.0, 3.0]])).stds == 0)

    def test_dimension_mismatch(self):
        stats = fit_standardizer(np.ones((3, 2)))
        with pytest.raises(DataValidationError):
            apply_standardizer(np.ones((3, 3)), stats)

    def test_held_out_rows_not_centred(self, rng):
        stats = fit_standardizer(rng.standard_normal((50, 3)))
        out = apply_standardizer(rng.standard_normal((50, 3)) + 2.0, stats)
        assert np.all(np.abs(out.mean(axis=0)) > 0.5)

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 5)),
                      elements=st.floats(-100, 100)))
    def test_zero_mean_unit_variance(self, rows):
        stats = fit_standardizer(rows)
        out = apply_standardizer(rows, stats)
        # well-scaled columns only; near-constant ones lose precision by construction
        ok = stats.stds > 1e-2 * (1.0 + np.abs(rows).max(axis=0))
        assert np.all(np.abs(out.mean(axis=0)[ok]) < 1e-12)
        assert np.all(np.abs(out.var(axis=0)[ok] - 1) < 1e-10)

    def test_invert(self, rng):
        rows = rng.standard_normal((10, 4)) * 3 + 1
        stats = fit_standardizer(rows)
        assert np.allclose(invert_standardizer(apply_standardizer(rows, stats), stats), rows)


class TestSelectChannels:
    def test_identity(self, small_dataset):
        rec = small_dataset.recordings[0]
        out = select_channels(rec, rec.channel_names)
        assert np.array_equal(out.data, rec.data)

    def test_reorder_and_idempotent(self, small_dataset):
        rec = small_dataset.recordings[0]
        names = [rec.channel_names[2], rec.channel_names[0]]
        once = select_channels(rec, names)
        assert np.array_equal(once.data, rec.data[[2, 0]])
        assert np.array_equal(select_channels(once, names).data, once.data)

    def test_56_of_306(self, rng):
        names = [f"MEG{i:04d}" for i in range(306)]
        rec = Recording("x", rng.standard_normal((306, 5)), 1.0, 0.0, names)
        assert select_channels(rec, names[100:156]).n_channels == 56

    def test_unknown(self, small_dataset):
        with pytest.raises(DataValidationError, match="MEG9999"):
            select_channels(small_dataset.recordings[0], ["MEG9999"])
