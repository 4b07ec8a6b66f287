"""Log-spaced triangular filterbank spectrograms from mono PCM audio.

An STFT (Hann window, fixed hop) is projected through overlapping
triangular bandpass filters whose centers are log-spaced between ``f_min``
and ``f_max``. Triangles are linear in log-frequency and peak at 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal

from .errors import DataValidationError
from .tensorio import Spectrogram


@dataclass(frozen=True)
class AudioClip:
    stimulus_id: str
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DataValidationError(f"{self.stimulus_id}: audio must be a non-empty 1-d array")
        if not np.all(np.isfinite(samples)):
            raise DataValidationError(f"{self.stimulus_id}: non-finite audio sample")
        if int(self.sample_rate_hz) <= 0:
            raise DataValidationError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))


@dataclass(frozen=True)
class FilterbankSpec:
    n_channels: int = 128
    f_min_hz: float = 180.0
    f_max_hz: float = 7246.0
    frame_period_ms: float = 10.0
    window_ms: float = 25.0
    compression: str = "log_power"

    def __post_init__(self):
        if self.n_channels < 1:
            raise DataValidationError("n_channels must be positive")
        if not 0 < self.f_min_hz < self.f_max_hz:
            raise DataValidationError("need 0 < f_min_hz < f_max_hz")
        if not (self.frame_period_ms > 0 and self.window_ms > 0):
            raise DataValidationError("frame period and window must be positive")
        if self.compression not in ("linear", "log_power"):
            raise DataValidationError(f"unknown compression {self.compression!r}")

    @classmethod
    def parse(cls, text: str, **overrides) -> "FilterbankSpec":
        """Parse the CLI form ``n,fmin,fmax,hop_ms``."""
        parts = text.split(",")
        if len(parts) != 4:
            raise DataValidationError(f"filterbank spec {text!r} is not n,fmin,fmax,hop_ms")
        try:
            n, lo, hi, hop = int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])
        except ValueError:
            raise DataValidationError(f"bad filterbank spec {text!r}") from None
        return cls(n, lo, hi, hop, **overrides)

    def center_frequencies(self) -> np.ndarray:
        return center_frequencies(self.n_channels, self.f_min_hz, self.f_max_hz)

    def band_edges(self) -> np.ndarray:
        """Centers padded by one log-step on each side (n_channels + 2 values)."""
        c = np.log(self.center_frequencies())
        step = (c[-1] - c[0]) / (len(c) - 1) if len(c) > 1 else np.log(2.0) / 2
        return np.exp(np.concatenate([[c[0] - step], c, [c[-1] + step]]))

    def window_samples(self, sample_rate_hz: int) -> int:
        return int(round(self.window_ms * 1e-3 * sample_rate_hz))

    def hop_samples(self, sample_rate_hz: int) -> int:
        hop = self.frame_period_ms * 1e-3 * sample_rate_hz
        if abs(hop - round(hop)) > 1e-9 * hop:
            raise DataValidationError(
                f"hop of {self.frame_period_ms} ms is not a whole number of samples "
                f"at {sample_rate_hz} Hz")
        return int(round(hop))

    def fft_size(self, sample_rate_hz: int) -> int:
        """Smallest power of two covering the window whose bin spacing is at
        most half the narrowest lower filter slope."""
        edges = self.band_edges()
        narrowest = np.min(np.diff(edges))
        n = 1
        while n < self.window_samples(sample_rate_hz) or sample_rate_hz / n > narrowest / 2:
            n *= 2
        return n


def center_frequencies(n: int, f_min: float, f_max: float) -> np.ndarray:
    """``f_min * (f_max / f_min) ** (k / (n - 1))`` for k = 0..n-1."""
    if n == 1:
        return np.array([float(f_min)])
    k = np.arange(n)
    cf = f_min * (f_max / f_min) ** (k / (n - 1))
    cf[0], cf[-1] = f_min, f_max
    return cf


def design_filterbank(spec: FilterbankSpec, sample_rate_hz: int):
    """Triangular filter weights on the rfft bins.

    Returns
    -------
    weights : np.ndarray
        (n_channels, n_fft // 2 + 1), each row peaking at exactly 1.
    fft_freqs : np.ndarray
        Bin frequencies in Hz.
    """
    edges = spec.band_edges()
    nyquist = sample_rate_hz / 2
    if edges[-1] > nyquist:
        raise DataValidationError(
            f"upper filter edge {edges[-1]:.1f} Hz exceeds Nyquist {nyquist:.1f} Hz")
    n_fft = spec.fft_size(sample_rate_hz)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate_hz)
    logf = np.log(np.maximum(freqs, 1e-12))
    loge = np.log(edges)
    weights = np.zeros((spec.n_channels, freqs.size))
    for k in range(spec.n_channels):
        lo, mid, hi = loge[k], loge[k + 1], loge[k + 2]
        rise = (logf - lo) / (mid - lo)
        fall = (hi - logf) / (hi - mid)
        weights[k] = np.clip(np.minimum(rise, fall), 0.0, None)
        peak = weights[k].max()
        if peak <= 0:
            raise DataValidationError(f"filter {k} covers no FFT bin")
        weights[k] /= peak
    return weights, freqs


def power_frames(clip: AudioClip, spec: FilterbankSpec) -> np.ndarray:
    """Short-time power spectra, shape (frames, n_fft // 2 + 1)."""
    rate = clip.sample_rate_hz
    win = spec.window_samples(rate)
    hop = spec.hop_samples(rate)
    if clip.samples.size < win:
        raise DataValidationError(
            f"clip {clip.stimulus_id!r} ({clip.samples.size} samples) is shorter than "
            f"one {win}-sample window")
    n_frames = clip.samples.size // hop
    n_fft = spec.fft_size(rate)
    window = scipy.signal.get_window("hann", win, fftbins=True)
    padded = np.zeros((n_frames - 1) * hop + win)
    padded[: clip.samples.size] = clip.samples[: padded.size]
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * window
    spectrum = np.fft.rfft(frames, n=n_fft, axis=1)
    return (spectrum.real ** 2 + spectrum.imag ** 2) / np.sum(window ** 2)


def compute_spectrogram(clip: AudioClip, spec: FilterbankSpec = FilterbankSpec()) -> Spectrogram:
    """Filterbank spectrogram with ``floor(duration / hop)`` frames."""
    weights, _ = design_filterbank(spec, clip.sample_rate_hz)
    energy = power_frames(clip, spec) @ weights.T
    if spec.compression == "log_power":
        energy = np.log1p(energy)
    return Spectrogram(clip.stimulus_id, energy.T, spec.frame_period_ms,
                       spec.center_frequencies())
