"""Recordings, spectrograms, their on-disk format and preprocessing.

On disk a dataset is a directory holding ``manifest.json`` plus one blob per
matrix. Blobs are raw little-endian float64, row-major, without a header.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataValidationError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
AUDIO_MANIFEST_NAME = "audio.json"
BLOB_DTYPE = np.dtype("<f8")

# standard deviations below this are treated as zero variance
STD_EPSILON = 1e-12


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise DataValidationError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Recording:
    """Neural response to one stimulus.

    ``data`` is channels x samples. Sample ``i`` sits at
    ``t0_offset_ms + i * sample_period_ms`` relative to stimulus onset.
    """

    stimulus_id: str
    data: np.ndarray
    sample_period_ms: float
    t0_offset_ms: float
    channel_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 2))
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        if not self.sample_period_ms > 0:
            raise DataValidationError(
                f"{self.stimulus_id}: sample_period_ms must be positive")
        if len(self.channel_names) != self.data.shape[0]:
            raise DataValidationError(
                f"{self.stimulus_id}: {len(self.channel_names)} channel names "
                f"for {self.data.shape[0]} rows")
        _check_finite(self.data, self.stimulus_id, "recording")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def times_ms(self) -> np.ndarray:
        return self.t0_offset_ms + self.sample_period_ms * np.arange(self.n_samples)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Frequency channels x frames representation of one stimulus."""

    stimulus_id: str
    data: np.ndarray
    frame_period_ms: float
    center_freqs_hz: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 2))
        object.__setattr__(self, "center_freqs_hz",
                           tuple(float(f) for f in self.center_freqs_hz))
        if not self.frame_period_ms > 0:
            raise DataValidationError(
                f"{self.stimulus_id}: frame_period_ms must be positive")
        cf = np.asarray(self.center_freqs_hz)
        if len(cf) != self.data.shape[0]:
            raise DataValidationError(
                f"{self.stimulus_id}: {len(cf)} center frequencies "
                f"for {self.data.shape[0]} rows")
        if np.any(cf <= 0) or np.any(np.diff(cf) <= 0):
            raise DataValidationError(
                f"{self.stimulus_id}: center frequencies must be positive "
                "and strictly increasing")
        _check_finite(self.data, self.stimulus_id, "spectrogram")

    @property
    def n_freqs(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class StandardizationStats:
    """Per-feature means and population standard deviations.

    A recorded std of 0 marks a degenerate feature; it standardizes to 0.
    """

    means: np.ndarray
    stds: np.ndarray
    epsilon: float = STD_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "means", _frozen(self.means, 1))
        object.__setattr__(self, "stds", _frozen(self.stds, 1))
        if self.means.shape != self.stds.shape:
            raise DataValidationError("means and stds differ in length")
        if np.any(self.stds < 0):
            raise DataValidationError("negative standard deviation")

    @classmethod
    def identity(cls, n: int) -> "StandardizationStats":
        return cls(np.zeros(n), np.ones(n))

    def __len__(self) -> int:
        return len(self.means)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Recordings paired one-to-one with spectrograms by stimulus id."""

    recordings: tuple[Recording, ...] = ()
    spectrograms: tuple[Spectrogram, ...] = ()
    _rec_by_id: dict = field(init=False, repr=False)
    _spec_by_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        recs = tuple(self.recordings)
        specs = tuple(self.spectrograms)
        object.__setattr__(self, "recordings", recs)
        object.__setattr__(self, "spectrograms", specs)
        rec_ids = [r.stimulus_id for r in recs]
        spec_ids = [s.stimulus_id for s in specs]
        for side, ids in (("recordings", rec_ids), ("spectrograms", spec_ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            if dupes:
                raise DataValidationError(f"duplicate stimulus id in {side}: {dupes}")
        unpaired = sorted(set(rec_ids) ^ set(spec_ids))
        if unpaired:
            raise DataValidationError(f"unpaired stimulus id: {unpaired}")
        object.__setattr__(self, "_rec_by_id", {r.stimulus_id: r for r in recs})
        object.__setattr__(self, "_spec_by_id", {s.stimulus_id: s for s in specs})

    @property
    def stimulus_ids(self) -> list[str]:
        return [r.stimulus_id for r in self.recordings]

    def __len__(self) -> int:
        return len(self.recordings)

    def recording(self, stimulus_id: str) -> Recording:
        try:
            return self._rec_by_id[stimulus_id]
        except KeyError:
            raise DataValidationError(f"unknown stimulus id {stimulus_id!r}") from None

    def spectrogram(self, stimulus_id: str) -> Spectrogram:
        try:
            return self._spec_by_id[stimulus_id]
        except KeyError:
            raise DataValidationError(f"unknown stimulus id {stimulus_id!r}") from None

    def subset(self, stimulus_ids: Iterable[str]) -> "Dataset":
        ids = list(stimulus_ids)
        return Dataset([self.recording(i) for i in ids],
                       [self.spectrogram(i) for i in ids])

    def map_recordings(self, fn) -> "Dataset":
        return Dataset([fn(r) for r in self.recordings], self.spectrograms)


def _check_finite(data: np.ndarray, stimulus_id: str, kind: str) -> None:
    bad = np.flatnonzero(~np.isfinite(data.ravel()))
    if bad.size:
        off = int(bad[0])
        raise DataValidationError(
            f"non-finite value in {kind} of stimulus {stimulus_id!r} "
            f"at flat offset {off} (byte offset {off * 8})")


# ---------------------------------------------------------------------------
# blobs and manifests


def write_blob(path: Path, matrix: np.ndarray) -> None:
    path = Path(path)
    arr = np.ascontiguousarray(matrix, dtype=BLOB_DTYPE)
    path.write_bytes(arr.tobytes(order="C"))


def read_blob(path: Path, rows: int, cols: int, *, stimulus_id: str = "?",
              kind: str = "blob") -> np.ndarray:
    """Read a headerless float64 blob and check its exact byte length."""
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"missing blob {path} for stimulus {stimulus_id!r}")
    raw = path.read_bytes()
    expected = rows * cols * BLOB_DTYPE.itemsize
    if len(raw) != expected:
        raise DataValidationError(
            f"{kind} blob {path.name} of stimulus {stimulus_id!r} has {len(raw)} "
            f"bytes, manifest implies {rows}x{cols} = {expected}")
    arr = np.frombuffer(raw, dtype=BLOB_DTYPE).astype(np.float64).reshape(rows, cols)
    _check_finite(arr, stimulus_id, kind)
    return arr


def _uniform(values: list, what: str):
    if not values:
        return None
    first = values[0]
    for v in values[1:]:
        if v != first:
            raise DataValidationError(f"{what} differs between stimuli; "
                                      "the manifest stores a single value")
    return first


def save_dataset(ds: Dataset, directory) -> Path:
    """Write ``ds`` as manifest + blobs; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stimuli = []
    for idx, sid in enumerate(ds.stimulus_ids):
        rec, spec = ds.recording(sid), ds.spectrogram(sid)
        rec_blob, spec_blob = f"rec_{idx:04d}.f64", f"spec_{idx:04d}.f64"
        write_blob(directory / rec_blob, rec.data)
        write_blob(directory / spec_blob, spec.data)
        stimuli.append({
            "id": sid,
            "recording_blob": rec_blob,
            "spectrogram_blob": spec_blob,
            "channels": rec.n_channels,
            "samples": rec.n_samples,
            "freq_channels": spec.n_freqs,
            "frames": spec.n_frames,
        })
    recs, specs = ds.recordings, ds.spectrograms
    channel_names = _uniform([list(r.channel_names) for r in recs], "channel_names")
    manifest = {
        "format_version": FORMAT_VERSION,
        "stimuli": stimuli,
        "sample_period_ms": _uniform([r.sample_period_ms for r in recs], "sample_period_ms"),
        "frame_period_ms": _uniform([s.frame_period_ms for s in specs], "frame_period_ms"),
        "t0_offset_ms": _uniform([r.t0_offset_ms for r in recs], "t0_offset_ms"),
        "channel_names": channel_names if channel_names is not None else [],
        "center_freqs_hz": list(_uniform([s.center_freqs_hz for s in specs],
                                         "center_freqs_hz") or []),
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


_MANIFEST_KEYS = ("format_version", "stimuli", "sample_period_ms", "frame_period_ms",
                  "t0_offset_ms", "channel_names", "center_freqs_hz")
_STIMULUS_KEYS = ("id", "recording_blob", "spectrogram_blob", "channels", "samples",
                  "freq_channels", "frames")


def _read_manifest(manifest_path) -> tuple[Path, dict]:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise DataValidationError(f"missing manifest {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"manifest {path} is not valid JSON: {exc}") from None
    return path, manifest


def load_dataset(manifest_path) -> Dataset:
    """Load a dataset from a manifest file (or the directory holding one)."""
    path, manifest = _read_manifest(manifest_path)
    missing = [k for k in _MANIFEST_KEYS if k not in manifest]
    if missing:
        raise DataValidationError(f"manifest missing fields {missing}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise DataValidationError(
            f"unsupported format_version {manifest['format_version']}")
    base = path.parent
    channel_names = list(manifest["channel_names"])
    center_freqs = list(manifest["center_freqs_hz"])
    recs, specs = [], []
    rec_ids, spec_ids = set(), set()
    for entry in manifest["stimuli"]:
        sid = entry.get("id")
        if sid is None:
            raise DataValidationError("stimulus entry without id")
        if entry.get("recording_blob"):
            rec_ids.add(sid)
        if entry.get("spectrogram_blob"):
            spec_ids.add(sid)
    unpaired = sorted(rec_ids ^ spec_ids)
    if unpaired:
        raise DataValidationError(f"unpaired stimulus id: {unpaired}")
    for entry in manifest["stimuli"]:
        absent = [k for k in _STIMULUS_KEYS if k not in entry]
        if absent:
            raise DataValidationError(f"stimulus {entry['id']!r} missing fields {absent}")
        sid = entry["id"]
        if entry["channels"] != len(channel_names):
            raise DataValidationError(
                f"stimulus {sid!r}: {entry['channels']} channels but "
                f"{len(channel_names)} channel names")
        if entry["freq_channels"] != len(center_freqs):
            raise DataValidationError(
                f"stimulus {sid!r}: {entry['freq_channels']} frequency channels but "
                f"{len(center_freqs)} center frequencies")
        rec_data = read_blob(base / entry["recording_blob"], entry["channels"],
                             entry["samples"], stimulus_id=sid, kind="recording")
        spec_data = read_blob(base / entry["spectrogram_blob"], entry["freq_channels"],
                              entry["frames"], stimulus_id=sid, kind="spectrogram")
        recs.append(Recording(sid, rec_data, manifest["sample_period_ms"],
                              manifest["t0_offset_ms"], channel_names))
        specs.append(Spectrogram(sid, spec_data, manifest["frame_period_ms"], center_freqs))
    return Dataset(recs, specs)


def save_audio(clips: Sequence, directory) -> Path:
    """Write mono PCM clips (objects with ``stimulus_id``, ``samples``,
    ``sample_rate_hz``) as an audio manifest plus 1 x n blobs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rate = _uniform([c.sample_rate_hz for c in clips], "sample_rate_hz")
    entries = []
    for idx, clip in enumerate(clips):
        blob = f"pcm_{idx:04d}.f64"
        samples = np.asarray(clip.samples, dtype=np.float64)
        write_blob(directory / blob, samples[None, :])
        entries.append({"id": clip.stimulus_id, "blob": blob, "samples": len(samples)})
    path = directory / AUDIO_MANIFEST_NAME
    path.write_text(json.dumps({"format_version": FORMAT_VERSION,
                                "sample_rate_hz": rate, "clips": entries}, indent=2) + "\n")
    return path


def load_audio(manifest_path) -> list[tuple[str, np.ndarray, int]]:
    """Return ``(stimulus_id, samples, sample_rate_hz)`` per clip."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / AUDIO_MANIFEST_NAME
    path, manifest = _read_manifest(path)
    for key in ("format_version", "sample_rate_hz", "clips"):
        if key not in manifest:
            raise DataValidationError(f"audio manifest missing field {key!r}")
    rate = int(manifest["sample_rate_hz"])
    out = []
    for entry in manifest["clips"]:
        data = read_blob(path.parent / entry["blob"], 1, entry["samples"],
                         stimulus_id=entry["id"], kind="audio")
        out.append((entry["id"], data[0], rate))
    return out


# ---------------------------------------------------------------------------
# preprocessing


def baseline_correct(rec: Recording, window_start_ms: float, window_end_ms: float) -> Recording:
    """Subtract, per channel, the mean over samples timed in [start, end)."""
    if not window_start_ms < window_end_ms:
        raise DataValidationError("baseline window start must precede its end")
    t = rec.times_ms()
    # tolerance absorbs float drift in sample times
    tol = 1e-9 * rec.sample_period_ms
    mask = (t >= window_start_ms - tol) & (t < window_end_ms - tol)
    if not mask.any():
        raise DataValidationError(
            f"empty baseline window [{window_start_ms}, {window_end_ms}) for "
            f"stimulus {rec.stimulus_id!r}")
    baseline = rec.data[:, mask].mean(axis=1, keepdims=True)
    return replace(rec, data=rec.data - baseline)


def _integer_ratio(numer: float, denom: float, what: str) -> int:
    ratio = numer / denom
    k = round(ratio)
    if k < 0 or not math.isclose(ratio, k, rel_tol=0, abs_tol=1e-9 * max(1.0, abs(ratio))):
        raise DataValidationError(f"{what}: {numer} is not an integer multiple of {denom}")
    return int(k)


def downsample(rec: Recording, target_period_ms: float) -> Recording:
    """Block-average to ``target_period_ms``; a trailing partial block is dropped."""
    if not target_period_ms > 0:
        raise DataValidationError("target period must be positive")
    factor = _integer_ratio(target_period_ms, rec.sample_period_ms, "downsample")
    if factor == 0:
        raise DataValidationError("target period shorter than the sample period")
    if factor == 1:
        return replace(rec, sample_period_ms=float(target_period_ms))
    n_out = rec.n_samples // factor
    blocks = rec.data[:, : n_out * factor].reshape(rec.n_channels, n_out, factor)
    return replace(rec, data=blocks.mean(axis=2), sample_period_ms=float(target_period_ms))


def select_channels(rec: Recording, names: Sequence[str]) -> Recording:
    index = {n: i for i, n in enumerate(rec.channel_names)}
    missing = [n for n in names if n not in index]
    if missing:
        raise DataValidationError(f"unknown channel name(s): {missing}")
    rows = [index[n] for n in names]
    return replace(rec, data=rec.data[rows], channel_names=tuple(names))


def fit_standardizer(rows: np.ndarray, epsilon: float = STD_EPSILON) -> StandardizationStats:
    """Column means and population stds; stds below ``epsilon`` are recorded as 0."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise DataValidationError("fit_standardizer needs a non-empty 2-d matrix")
    means = rows.mean(axis=0)
    stds = rows.std(axis=0)
    stds = np.where(stds < epsilon, 0.0, stds)
    return StandardizationStats(means, stds, epsilon)


def apply_standardizer(rows: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != len(stats):
        raise DataValidationError(
            f"standardizer expects {len(stats)} columns, got shape {rows.shape}")
    safe = np.where(stats.stds > 0, stats.stds, 1.0)
    out = (rows - stats.means) / safe
    out[:, stats.stds == 0] = 0.0
    return out


def invert_standardizer(rows: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    """Map standardized values back to original units (degenerate columns → mean)."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != len(stats):
        raise DataValidationError(
            f"standardizer expects {len(stats)} columns, got shape {rows.shape}")
    return rows * stats.stds + stats.means


def save_spectrograms(specs: Sequence[Spectrogram], directory, name: str = "spectrograms.json",
                      blob_prefix: str = "spec") -> Path:
    """Write spectrograms without recordings (e.g. predictions)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, sg in enumerate(specs):
        blob = f"{blob_prefix}_{idx:04d}.f64"
        write_blob(directory / blob, sg.data)
        entries.append({"id": sg.stimulus_id, "blob": blob,
                        "freq_channels": sg.n_freqs, "frames": sg.n_frames})
    path = directory / name
    path.write_text(json.dumps({
        "format_version": FORMAT_VERSION,
        "frame_period_ms": _uniform([s.frame_period_ms for s in specs], "frame_period_ms"),
        "center_freqs_hz": list(_uniform([s.center_freqs_hz for s in specs],
                                         "center_freqs_hz") or []),
        "spectrograms": entries,
    }, indent=2) + "\n")
    return path


def load_spectrograms(path) -> list[Spectrogram]:
    path, manifest = _read_manifest(path)
    out = []
    for e in manifest["spectrograms"]:
        data = read_blob(path.parent / e["blob"], e["freq_channels"], e["frames"],
                         stimulus_id=e["id"], kind="spectrogram")
        out.append(Spectrogram(e["id"], data, manifest["frame_period_ms"],
                               manifest["center_freqs_hz"]))
    return out
