"""Lagged design matrices for the causal convolution decoder.

The spectrogram frame at stimulus time ``t`` is decoded from the response
window ``t, t+1, ..., t + lag_bins - 1`` (in frames, measured from stimulus
onset). A response window of ``lag_ms`` therefore spans
``lag_ms / frame_period_ms + 1`` frames, lag 0 included.

Columns are ordered lag-major: all channels at lag 0, then all channels at
lag 1, and so on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataValidationError
from .tensorio import Dataset, Recording, Spectrogram, _integer_ratio


@dataclass(frozen=True)
class LagSpec:
    """Response-window duration.

    ``lag_ms`` is the nonnegative duration of the response window that
    follows each stimulus frame; it equals ``-tau`` for a causal response
    function with ``tau <= 0``.
    """

    lag_ms: float
    frame_period_ms: float

    def __post_init__(self):
        if not self.frame_period_ms > 0:
            raise DataValidationError("frame_period_ms must be positive")
        if self.lag_ms < 0:
            raise DataValidationError(f"lag_ms must be nonnegative, got {self.lag_ms}")
        _integer_ratio(self.lag_ms, self.frame_period_ms, "lag")

    @property
    def lag_bins(self) -> int:
        return _integer_ratio(self.lag_ms, self.frame_period_ms, "lag") + 1


@dataclass(frozen=True, eq=False)
class LaggedDesign:
    rows: np.ndarray
    row_index: tuple[tuple[str, int], ...]
    lag_spec: LagSpec
    channel_names: tuple[str, ...]

    @property
    def n_features(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True, eq=False)
class TargetMatrix:
    values: np.ndarray
    row_index: tuple[tuple[str, int], ...]
    center_freqs_hz: tuple[float, ...] = ()


def lag_grid_from_ms(lags_ms: Sequence[float], frame_period_ms: float) -> list[LagSpec]:
    return [LagSpec(float(lag), float(frame_period_ms)) for lag in lags_ms]


def onset_index(rec: Recording) -> int:
    """Index of the recording sample at stimulus onset."""
    if rec.t0_offset_ms > 0:
        raise DataValidationError(
            f"recording {rec.stimulus_id!r} starts after stimulus onset")
    return _integer_ratio(-rec.t0_offset_ms, rec.sample_period_ms, "t0 offset")


def lagged_block(response: np.ndarray, n_frames: int, lag_bins: int) -> np.ndarray:
    """Lag-major design block for one stimulus.

    Parameters
    ----------
    response : np.ndarray
        Channels x frames, frame 0 at stimulus onset.
    n_frames : int
        Number of stimulus frames (rows of the block).
    lag_bins : int
        Window length in frames.

    Returns
    -------
    np.ndarray
        ``(n_frames, lag_bins * channels)``; response frames past the end of
        ``response`` are zero-filled.
    """
    n_ch, n_resp = response.shape
    padded = np.zeros((n_ch, n_frames + lag_bins - 1))
    keep = min(n_resp, padded.shape[1])
    padded[:, :keep] = response[:, :keep]
    block = np.empty((n_frames, lag_bins * n_ch))
    for k in range(lag_bins):
        block[:, k * n_ch:(k + 1) * n_ch] = padded[:, k:k + n_frames].T
    return block


def _check_pair(rec: Recording, spec: Spectrogram, lag: LagSpec, max_overrun_frames: int):
    if not np.isclose(rec.sample_period_ms, lag.frame_period_ms, rtol=1e-12, atol=0):
        raise DataValidationError(
            f"stimulus {rec.stimulus_id!r}: recording period {rec.sample_period_ms} ms "
            f"differs from lag frame period {lag.frame_period_ms} ms")
    if not np.isclose(spec.frame_period_ms, lag.frame_period_ms, rtol=1e-12, atol=0):
        raise DataValidationError(
            f"stimulus {rec.stimulus_id!r}: spectrogram period {spec.frame_period_ms} ms "
            f"differs from lag frame period {lag.frame_period_ms} ms")
    post_onset = rec.n_samples - onset_index(rec)
    if spec.n_frames > post_onset + max_overrun_frames:
        raise DataValidationError(
            f"stimulus {rec.stimulus_id!r}: spectrogram has {spec.n_frames} frames but the "
            f"recording only {post_onset} post-onset samples "
            f"(tolerance {max_overrun_frames})")


def build_lagged_design(ds: Dataset, spec: LagSpec, stimulus_ids: Sequence[str],
                        max_overrun_frames: int = 0) -> tuple[LaggedDesign, TargetMatrix]:
    """Stack per-stimulus lagged responses and matching spectrogram frames.

    ``max_overrun_frames`` is how many spectrogram frames may extend past
    the recording's last sample before the pair is rejected.
    """
    ids = list(stimulus_ids)
    channel_names = None
    blocks, targets, index = [], [], []
    center_freqs = None
    for sid in ids:
        rec, sg = ds.recording(sid), ds.spectrogram(sid)
        _check_pair(rec, sg, spec, max_overrun_frames)
        if channel_names is None:
            channel_names = rec.channel_names
            center_freqs = sg.center_freqs_hz
        elif rec.channel_names != channel_names:
            raise DataValidationError(f"stimulus {sid!r} has a different channel set")
        elif sg.center_freqs_hz != center_freqs:
            raise DataValidationError(f"stimulus {sid!r} has different center frequencies")
        response = rec.data[:, onset_index(rec):]
        blocks.append(lagged_block(response, sg.n_frames, spec.lag_bins))
        targets.append(sg.data.T)
        index.extend((sid, t) for t in range(sg.n_frames))
    if not ids:
        raise DataValidationError("no stimuli given")
    rows = np.vstack(blocks)
    values = np.vstack(targets)
    index = tuple(index)
    return (LaggedDesign(rows, index, spec, tuple(channel_names)),
            TargetMatrix(values, index, tuple(center_freqs)))


def recording_design(rec: Recording, n_frames: int, spec: LagSpec) -> np.ndarray:
    """Design block for a recording alone, e.g. when no spectrogram exists yet."""
    if not np.isclose(rec.sample_period_ms, spec.frame_period_ms, rtol=1e-12, atol=0):
        raise DataValidationError(
            f"stimulus {rec.stimulus_id!r}: recording period {rec.sample_period_ms} ms "
            f"differs from lag frame period {spec.frame_period_ms} ms")
    return lagged_block(rec.data[:, onset_index(rec):], n_frames, spec.lag_bins)
