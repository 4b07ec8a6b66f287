import numpy as np
import pytest

from kernelconv.tensorio import Dataset, Recording, Spectrogram


def make_dataset(n_stimuli=3, channels=3, samples=10, freqs=2, frames=None, seed=0,
                 t0=0.0, period=10.0):
    rng = np.random.default_rng(seed)
    frames = samples if frames is None else frames
    names = [f"MEG{c:04d}" for c in range(channels)]
    cf = [180.0 * 2 ** k for k in range(freqs)]
    recs, specs = [], []
    for i in range(n_stimuli):
        sid = f"s{i}"
        recs.append(Recording(sid, rng.standard_normal((channels, samples)), period, t0, names))
        specs.append(Spectrogram(sid, rng.standard_normal((freqs, frames)), period, cf))
    return Dataset(recs, specs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset():
    return make_dataset()
