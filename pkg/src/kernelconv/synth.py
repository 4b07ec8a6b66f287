"""Synthetic forward-model datasets with a planted response mapping.

Responses are white Gaussian noise; each spectrogram frame is the lagged
response window times a ground-truth coefficient matrix, plus i.i.d.
Gaussian noise scaled to a requested signal-to-noise ratio. Since the true
mapping is known, decoding quality has an analytic expectation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .audiofeat import center_frequencies
from .errors import DataValidationError
from .lagging import LagSpec, build_lagged_design, lagged_block
from .tensorio import Dataset, Recording, Spectrogram, read_blob, save_dataset, write_blob


@dataclass(frozen=True)
class SynthConfig:
    """Shape and noise settings for :func:`generate`.

    ``frames_per_stimulus`` is an int or an inclusive ``(lo, hi)`` range.
    ``lag_support_bins`` restricts the true mapping to an inclusive range of
    lag bins; ``g_support`` restricts it to a set of frequency indices.
    ``tail_frames`` is how many response frames follow the last stimulus
    frame (default ``lag_bins_true - 1``). ``channel_correlation`` in [0, 1]
    mixes a shared source into every channel; 1 makes channels identical.
    """

    n_stimuli: int = 12
    channels: int = 8
    freq_channels: int = 16
    frames_per_stimulus: Union[int, tuple[int, int]] = 100
    lag_bins_true: int = 5
    snr: float = 10.0
    seed: int = 0
    g_support: Optional[tuple[int, ...]] = None
    lag_support_bins: Optional[tuple[int, int]] = None
    tail_frames: Optional[int] = None
    frame_period_ms: float = 10.0
    channel_correlation: float = 0.0

    def __post_init__(self):
        if isinstance(self.frames_per_stimulus, list):
            object.__setattr__(self, "frames_per_stimulus", tuple(self.frames_per_stimulus))
        for key in ("g_support", "lag_support_bins"):
            val = getattr(self, key)
            if val is not None:
                object.__setattr__(self, key, tuple(int(v) for v in val))
        if self.n_stimuli < 3:
            raise DataValidationError("n_stimuli must be at least 3")
        if min(self.channels, self.freq_channels, self.lag_bins_true) < 1:
            raise DataValidationError("channel, frequency and lag counts must be positive")
        lo, hi = self.frame_range
        if not 1 <= lo <= hi:
            raise DataValidationError(f"bad frames_per_stimulus {self.frames_per_stimulus}")
        if not self.snr > 0:
            raise DataValidationError("snr must be positive")
        if not 0.0 <= self.channel_correlation <= 1.0:
            raise DataValidationError("channel_correlation must lie in [0, 1]")
        if self.g_support is not None and (
                not self.g_support or min(self.g_support) < 0
                or max(self.g_support) >= self.freq_channels):
            raise DataValidationError("g_support indices out of range")
        if self.lag_support_bins is not None:
            a, b = self.lag_support_bins
            if not 0 <= a <= b < self.lag_bins_true:
                raise DataValidationError("lag_support_bins outside the true lag window")
        if self.tail_frames is not None and self.tail_frames < 0:
            raise DataValidationError("tail_frames must be nonnegative")

    @property
    def frame_range(self) -> tuple[int, int]:
        f = self.frames_per_stimulus
        return (f, f) if isinstance(f, int) else (int(f[0]), int(f[1]))

    @property
    def lag_spec(self) -> LagSpec:
        return LagSpec((self.lag_bins_true - 1) * self.frame_period_ms, self.frame_period_ms)


@dataclass(frozen=True, eq=False)
class SynthTruth:
    true_G: np.ndarray
    noise_sigma: float
    config: SynthConfig


def stimulus_ids(n: int) -> list[str]:
    return [f"stim{i:03d}" for i in range(n)]


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    # one stream for the mapping, one for noise, then one per stimulus
    children = np.random.SeedSequence(seed).spawn(n + 2)
    return [np.random.default_rng(c) for c in children]


def _true_G(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    d = config.lag_bins_true * config.channels
    G = rng.standard_normal((d, config.freq_channels))
    if config.lag_support_bins is not None:
        a, b = config.lag_support_bins
        lag_of_row = np.arange(d) // config.channels
        G[(lag_of_row < a) | (lag_of_row > b)] = 0.0
    if config.g_support is not None:
        mask = np.ones(config.freq_channels, dtype=bool)
        mask[list(config.g_support)] = False
        G[:, mask] = 0.0
    return G


def generate(config: SynthConfig) -> tuple[Dataset, SynthTruth]:
    """Draw a dataset whose spectrograms follow the lagged linear model."""
    streams = _streams(config.seed, config.n_stimuli)
    G = _true_G(config, streams[0])
    noise_rng = streams[1]
    ids = stimulus_ids(config.n_stimuli)
    names = tuple(f"CH{c:03d}" for c in range(config.channels))
    freqs = center_frequencies(config.freq_channels, 180.0, 7246.0)
    tail = config.lag_bins_true - 1 if config.tail_frames is None else config.tail_frames
    lo, hi = config.frame_range
    rho = config.channel_correlation

    recordings, frames = [], []
    for sid, rng in zip(ids, streams[2:]):
        n_frames = int(rng.integers(lo, hi + 1)) if hi > lo else lo
        white = rng.standard_normal((config.channels, n_frames + tail))
        if rho > 0:
            shared = rng.standard_normal((1, n_frames + tail))
            white = math.sqrt(1.0 - rho) * white + math.sqrt(rho) * shared
        recordings.append(Recording(sid, white, config.frame_period_ms, 0.0, names))
        frames.append(n_frames)

    # the generator reuses the decoder's own window convention
    placeholder = [Spectrogram(sid, np.zeros((config.freq_channels, n)),
                               config.frame_period_ms, freqs)
                   for sid, n in zip(ids, frames)]
    design, _ = build_lagged_design(Dataset(recordings, placeholder), config.lag_spec, ids)
    clean = design.rows @ G
    signal_var = float(np.var(clean))
    sigma = 0.0 if math.isinf(config.snr) else math.sqrt(signal_var / config.snr)
    noisy = clean + sigma * noise_rng.standard_normal(clean.shape)

    spectrograms, start = [], 0
    for sid, n in zip(ids, frames):
        spectrograms.append(Spectrogram(sid, noisy[start:start + n].T,
                                        config.frame_period_ms, freqs))
        start += n
    return Dataset(recordings, spectrograms), SynthTruth(G, sigma, config)


def noiseless_component(ds: Dataset, truth: SynthTruth) -> list[np.ndarray]:
    """Recompute design @ true_G per stimulus (frames x freqs)."""
    out = []
    for sid in ds.stimulus_ids:
        rec = ds.recording(sid)
        block = lagged_block(rec.data, ds.spectrogram(sid).n_frames, truth.config.lag_bins_true)
        out.append(block @ truth.true_G)
    return out


def save_truth(truth: SynthTruth, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_blob(directory / "true_G.f64", truth.true_G)
    cfg = asdict(truth.config)
    sidecar = {"format_version": 1, "true_G_blob": "true_G.f64",
               "true_G_shape": list(truth.true_G.shape), "noise_sigma": truth.noise_sigma,
               "config": cfg}
    path = directory / "truth.json"
    path.write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def load_truth(directory) -> SynthTruth:
    directory = Path(directory)
    sidecar = json.loads((directory / "truth.json").read_text())
    G = read_blob(directory / sidecar["true_G_blob"], *sidecar["true_G_shape"], kind="true_G")
    return SynthTruth(G, sidecar["noise_sigma"], SynthConfig(**sidecar["config"]))


def write_synthetic(config: SynthConfig, directory) -> tuple[Dataset, SynthTruth]:
    ds, truth = generate(config)
    save_dataset(ds, directory)
    save_truth(truth, directory)
    return ds, truth


def snr_curve(config_base: SynthConfig, snrs: Sequence[float], *, lag_ms: Optional[float] = None,
              kernel=None, grid=None, seeds: Sequence[int] = (0,), threads: int = 1):
    """Leave-two-out accuracy per SNR level, averaged over ``seeds``.

    Returns a list of ``(snr, accuracy)`` rows.
    """
    from .evaluation import leave_two_out_cv
    from .decoder import KernelSpec

    kernel = kernel or KernelSpec()
    rows = []
    for snr in snrs:
        accs = []
        for seed in seeds:
            ds, truth = generate(replace(config_base, snr=float(snr), seed=int(seed)))
            lag = truth.config.lag_spec if lag_ms is None else LagSpec(lag_ms, config_base.frame_period_ms)
            accs.append(leave_two_out_cv(ds, lag, kernel, grid, threads=threads).accuracy)
        rows.append((float(snr), float(np.mean(accs))))
    return rows
