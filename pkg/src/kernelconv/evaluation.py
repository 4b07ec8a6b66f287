"""Leave-two-out 2-vs-2 evaluation, feature scores and lag sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .decoder import KernelSpec, LambdaGrid, fit_decoder, predict
from .errors import DataValidationError, FoldError, KernelConvError
from .lagging import LagSpec, build_lagged_design, lag_grid_from_ms
from .tensorio import Dataset, Spectrogram


@dataclass(frozen=True)
class PairResult:
    id_a: str
    id_b: str
    corr_matched: float
    corr_swapped: float
    correct: bool
    truncated_frames: int
    undefined: bool = False


@dataclass(eq=False)
class EvalReport:
    lag_ms: float
    pair_results: list[PairResult]
    accuracy: float
    item_accuracy: dict[str, float]
    feature_scores: np.ndarray
    n_pairs: int
    feature_scores_per_time: Optional[np.ndarray] = None
    center_freqs_hz: tuple[float, ...] = ()


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation of two flat vectors; NaN if either is constant."""
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return math.nan
    return float(xc @ yc) / denom


def _as_matrix(s) -> np.ndarray:
    return s.data if isinstance(s, Spectrogram) else np.asarray(s, dtype=np.float64)


def _truncate(s1, s2, p1, p2):
    mats = [_as_matrix(m) for m in (s1, s2, p1, p2)]
    if len({m.shape[0] for m in mats}) != 1:
        raise DataValidationError("spectrograms differ in frequency channels")
    if mats[0].shape[1] != mats[2].shape[1] or mats[1].shape[1] != mats[3].shape[1]:
        raise DataValidationError("a prediction differs in length from its original")
    n = min(mats[0].shape[1], mats[1].shape[1])
    return [m[:, :n] for m in mats], n


def pair_correlation_test(s1, s2, p1, p2, id_a: str = "a", id_b: str = "b") -> PairResult:
    """2-vs-2 test on one held-out pair.

    All four spectrograms are cut to the shorter stimulus, flattened over
    frequency x time and compared by Pearson correlation. The labelling is
    correct only if the matched sum strictly exceeds the swapped sum; an
    undefined correlation counts as incorrect.
    """
    (a1, a2, q1, q2), n = _truncate(s1, s2, p1, p2)
    v1, v2, w1, w2 = (m.ravel() for m in (a1, a2, q1, q2))
    matched = pearson(v1, w1) + pearson(v2, w2)
    swapped = pearson(v1, w2) + pearson(v2, w1)
    undefined = math.isnan(matched) or math.isnan(swapped)
    correct = (not undefined) and matched > swapped
    return PairResult(id_a, id_b, matched, swapped, bool(correct), n, undefined)


def feature_score(originals: Sequence, predictions: Sequence):
    """Fraction of variance explained per (frequency, time) feature.

    Each element of ``originals``/``predictions`` is one held-out sample
    (freqs x frames, possibly of differing lengths). The baseline is the mean
    over all samples that reach a given frame.

    Returns
    -------
    per_freq : np.ndarray
        One score per frequency, summing errors and deviations over time.
    per_time : np.ndarray
        (freqs, max_frames) scores. Features with zero deviation are NaN.
    """
    if len(originals) != len(predictions) or not originals:
        raise DataValidationError("need equally many, non-zero originals and predictions")
    orig = [_as_matrix(o) for o in originals]
    pred = [_as_matrix(p) for p in predictions]
    n_freq = orig[0].shape[0]
    width = max(o.shape[1] for o in orig)
    total = np.zeros((n_freq, width))
    count = np.zeros(width)
    for o, p in zip(orig, pred):
        if o.shape != p.shape or o.shape[0] != n_freq:
            raise DataValidationError("original/prediction shapes differ")
        total[:, : o.shape[1]] += o
        count[: o.shape[1]] += 1
    mean = total / np.maximum(count, 1)
    err = np.zeros_like(total)
    dev = np.zeros_like(total)
    for o, p in zip(orig, pred):
        t = o.shape[1]
        err[:, :t] += (o - p) ** 2
        dev[:, :t] += (o - mean[:, :t]) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        per_time = np.where(dev > 0, 1.0 - err / dev, np.nan)
        dev_f = dev.sum(axis=1)
        per_freq = np.where(dev_f > 0, 1.0 - err.sum(axis=1) / dev_f, np.nan)
    return per_freq, per_time


def rank_features(scores: Sequence[float], k: int, center_freqs_hz: Optional[Sequence[float]] = None):
    """Top-``k`` features as ``(index, freq_hz, score)``, best first.

    Undefined (NaN) scores are excluded; ties go to the lower frequency.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= k <= scores.size:
        raise DataValidationError(f"k={k} outside [0, {scores.size}]")
    freqs = np.arange(scores.size, dtype=float) if center_freqs_hz is None \
        else np.asarray(center_freqs_hz, dtype=float)
    valid = [i for i in range(scores.size) if not math.isnan(scores[i])]
    valid.sort(key=lambda i: (-scores[i], freqs[i]))
    return [(i, float(freqs[i]), float(scores[i])) for i in valid[:k]]


def enumerate_pairs(ids: Sequence[str]) -> list[tuple[str, str]]:
    return list(itertools.combinations(ids, 2))


def sample_pairs(ids: Sequence[str], k: int, seed: int) -> frozenset:
    """``k`` distinct pairs drawn uniformly without replacement."""
    pairs = enumerate_pairs(ids)
    if k >= len(pairs):
        return frozenset(pairs)
    return frozenset(random.Random(seed).sample(pairs, k))


PairFilter = Callable[[str, str], bool]


def _filter_from(pair_filter) -> Optional[PairFilter]:
    if pair_filter is None or callable(pair_filter):
        return pair_filter
    chosen = frozenset(tuple(p) for p in pair_filter)
    return lambda a, b: (a, b) in chosen


@dataclass(frozen=True)
class _FoldOutput:
    result: PairResult
    originals: tuple
    predictions: tuple


def run_fold(ds: Dataset, pair: tuple[str, str], lag: LagSpec, kernel: KernelSpec,
             grid: Optional[LambdaGrid], mode: str = "dual",
             max_overrun_frames: int = 0) -> _FoldOutput:
    """Train on everything except ``pair`` and score the held-out pair."""
    train = [sid for sid in ds.stimulus_ids if sid not in pair]
    design, targets = build_lagged_design(ds, lag, train, max_overrun_frames)
    model = fit_decoder(design, targets, grid, kernel, mode)
    p1, p2 = predict(model, ds, pair)
    s1, s2 = ds.spectrogram(pair[0]), ds.spectrogram(pair[1])
    result = pair_correlation_test(s1, s2, p1, p2, *pair)
    n = result.truncated_frames
    return _FoldOutput(result, (s1.data[:, :n], s2.data[:, :n]),
                       (p1.data[:, :n], p2.data[:, :n]))


def leave_two_out_cv(ds: Dataset, lag: LagSpec, kernel: KernelSpec = KernelSpec(),
                     grid: Optional[LambdaGrid] = None, pair_filter=None, *,
                     mode: str = "dual", threads: int = 1,
                     max_overrun_frames: int = 0) -> EvalReport:
    """Leave-two-out cross-validation over every (filtered) unordered pair.

    Each fold re-fits standardizers, lambdas and coefficients on the
    remaining stimuli. ``pair_filter`` is a predicate ``(id_a, id_b) -> bool``
    or an explicit collection of pairs. Results are ordered by pair
    enumeration whatever ``threads`` is.
    """
    ids = ds.stimulus_ids
    if len(ids) < 3:
        raise DataValidationError("leave-two-out needs at least 3 stimuli")
    keep = _filter_from(pair_filter)
    pairs = [p for p in enumerate_pairs(ids) if keep is None or keep(*p)]
    if not pairs:
        raise DataValidationError("pair filter left no folds")

    def job(pair):
        try:
            return run_fold(ds, pair, lag, kernel, grid, mode, max_overrun_frames)
        except KernelConvError as exc:
            raise FoldError(pair, exc) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(job, pairs))
    else:
        outputs = [job(p) for p in pairs]
    return _assemble(ds, lag, outputs)


def _assemble(ds: Dataset, lag: LagSpec, outputs: Sequence[_FoldOutput]) -> EvalReport:
    results = [o.result for o in outputs]
    n_pairs = len(results)
    correct = sum(r.correct for r in results)
    hits: dict[str, list[int]] = {}
    for r in results:
        for sid in (r.id_a, r.id_b):
            hits.setdefault(sid, []).append(int(r.correct))
    item_accuracy = {sid: sum(hits[sid]) / len(hits[sid])
                     for sid in ds.stimulus_ids if sid in hits}
    originals = [m for o in outputs for m in o.originals]
    predictions = [m for o in outputs for m in o.predictions]
    per_freq, per_time = feature_score(originals, predictions)
    return EvalReport(lag.lag_ms, results, correct / n_pairs, item_accuracy, per_freq,
                      n_pairs, per_time, ds.spectrograms[0].center_freqs_hz)


def lag_sweep(ds: Dataset, lags_ms: Sequence[float], kernel: KernelSpec = KernelSpec(),
              grid: Optional[LambdaGrid] = None, pair_filter=None, **kwargs):
    """Run :func:`leave_two_out_cv` once per lag; returns ``[(lag_ms, report)]``."""
    if not ds.spectrograms:
        raise DataValidationError("empty dataset")
    period = ds.spectrograms[0].frame_period_ms
    specs = lag_grid_from_ms(lags_ms, period)
    return [(spec.lag_ms, leave_two_out_cv(ds, spec, kernel, grid, pair_filter, **kwargs))
            for spec in specs]


# ---------------------------------------------------------------------------
# report files


def _fmt(x: float) -> str:
    return repr(float(x))


def pairs_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id_a", "id_b", "corr_matched", "corr_swapped", "correct"])
    for r in report.pair_results:
        w.writerow([r.id_a, r.id_b, _fmt(r.corr_matched), _fmt(r.corr_swapped), int(r.correct)])
    return buf.getvalue()


def _nan_to_none(values) -> list:
    return [None if math.isnan(v) else float(v) for v in np.ravel(values)]


def summary_dict(report: EvalReport, top_k: int = 15) -> dict:
    k = min(top_k, int(np.sum(~np.isnan(report.feature_scores))))
    top = rank_features(report.feature_scores, k, report.center_freqs_hz or None)
    return {
        "lag_ms": report.lag_ms,
        "n_pairs": report.n_pairs,
        "n_correct": sum(r.correct for r in report.pair_results),
        "accuracy": report.accuracy,
        "item_accuracy": report.item_accuracy,
        "feature_scores": _nan_to_none(report.feature_scores),
        "center_freqs_hz": list(report.center_freqs_hz),
        "top_features": [{"index": i, "freq_hz": f, "score": s} for i, f, s in top],
    }


def write_report(report: EvalReport, directory, prefix: str = "") -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{prefix}pairs.csv"
    json_path = directory / f"{prefix}summary.json"
    csv_path.write_text(pairs_csv(report))
    json_path.write_text(json.dumps(summary_dict(report), indent=2) + "\n")
    return csv_path, json_path


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lag_ms", "accuracy", "n_pairs"])
    for lag, rep in rows:
        w.writerow([_fmt(lag), _fmt(rep.accuracy), rep.n_pairs])
    return buf.getvalue()


def sweep_gnuplot(rows) -> str:
    lines = ["# lag_ms accuracy n_pairs"]
    lines += [f"{_fmt(lag)} {_fmt(rep.accuracy)} {rep.n_pairs}" for lag, rep in rows]
    return "\n".join(lines) + "\n"
