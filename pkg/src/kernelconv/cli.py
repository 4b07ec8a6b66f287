"""Command-line entry point: ``kernelconv <command> [flags]``.

Exit status: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure. Failures also print a one-line JSON error record on
stderr (and write ``error.json`` into ``--out`` when it exists).
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import audiofeat, decoder, evaluation, synth, tensorio
from .errors import DataValidationError, FoldError, KernelConvError, NumericalError
from .lagging import LagSpec, build_lagged_design

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _pair(text: str) -> tuple[float, float]:
    vals = _floats(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")
    return vals[0], vals[1]


def _kernel(text: str) -> decoder.KernelSpec:
    try:
        return decoder.KernelSpec.parse(text)
    except DataValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _grid(text: str) -> decoder.LambdaGrid:
    parts = text.split(",")
    try:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
        if len(parts) != 3 or count < 1 or not 0 < lo <= hi:
            raise ValueError
        return decoder.LambdaGrid.logspace(lo, hi, count)
    except (ValueError, IndexError, DataValidationError):
        raise argparse.ArgumentTypeError(f"expected min,max,count with 0 < min <= max, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kernelconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, dataset=True):
        if dataset:
            p.add_argument("--dataset", required=True, type=Path, help="dataset directory")
        p.add_argument("--out", required=True, type=Path, help="output directory")

    def model_flags(p):
        p.add_argument("--kernel", type=_kernel, default=decoder.KernelSpec(),
                       help="linear | gaussian:GAMMA")
        p.add_argument("--lambda-grid", type=_grid, default=None,
                       help="min,max,count (log-spaced); default 1e-4n..1e4n, 10 points")
        p.add_argument("--mode", choices=("dual", "primal"), default="dual")
        p.add_argument("--max-overrun-frames", type=int, default=0)

    def eval_flags(p):
        p.add_argument("--pair-sample", type=int, default=None,
                       help="evaluate a random subset of this many pairs")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--gnuplot", action="store_true", help="also write plot-ready .dat files")

    p = sub.add_parser("prepare", help="baseline-correct, downsample and select channels")
    common(p)
    p.add_argument("--baseline", type=_pair, default=None, metavar="START,END")
    p.add_argument("--downsample", type=float, default=None, metavar="MS")
    p.add_argument("--channels", type=Path, default=None, help="file with one channel name per line")

    p = sub.add_parser("spectrogram", help="filterbank spectrograms from PCM audio")
    common(p, dataset=False)
    p.add_argument("--audio", required=True, type=Path, help="audio manifest or its directory")
    p.add_argument("--dataset", type=Path, default=None,
                   help="dataset whose spectrograms are replaced by the computed ones")
    p.add_argument("--filterbank", default="128,180,7246,10", metavar="N,FMIN,FMAX,HOP_MS")
    p.add_argument("--window-ms", type=float, default=25.0)
    p.add_argument("--compression", choices=("log_power", "linear"), default="log_power")

    p = sub.add_parser("fit", help="fit a decoder on the whole dataset")
    common(p)
    p.add_argument("--lag-ms", type=float, required=True)
    model_flags(p)

    p = sub.add_parser("predict", help="predict spectrograms with a fitted model")
    common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--ids", default=None, help="comma-separated stimulus ids (default all)")

    p = sub.add_parser("evaluate", help="leave-two-out 2-vs-2 evaluation at one lag")
    common(p)
    p.add_argument("--lag-ms", type=float, required=True)
    model_flags(p)
    eval_flags(p)

    p = sub.add_parser("sweep", help="leave-two-out evaluation across lags")
    common(p)
    p.add_argument("--lags-ms", type=_floats, required=True, metavar="A,B,C")
    model_flags(p)
    eval_flags(p)

    p = sub.add_parser("synth", help="write a synthetic dataset plus truth sidecar")
    common(p, dataset=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-stimuli", type=int, default=12)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--freq-channels", type=int, default=16)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--lag-bins-true", type=int, default=5)
    p.add_argument("--lag-support-bins", type=_pair, default=None, metavar="LO,HI")
    p.add_argument("--tail-frames", type=int, default=None)
    p.add_argument("--snr", type=float, default=10.0)
    return parser


# ---------------------------------------------------------------------------
# commands


def _snapshot(args) -> dict:
    snap = {}
    for key, val in sorted(vars(args).items()):
        if isinstance(val, Path):
            val = str(val)
        elif isinstance(val, decoder.KernelSpec):
            val = str(val)
        elif isinstance(val, decoder.LambdaGrid):
            val = list(val.values)
        elif isinstance(val, tuple):
            val = list(val)
        snap[key] = val
    return snap


def _write_provenance(args, argv: Sequence[str]) -> None:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    line = shlex.join(["kernelconv", *_rerun_argv(args, argv)])
    (out / "rerun.txt").write_text(line + "\n")
    (out / "config.json").write_text(json.dumps(_snapshot(args), indent=2) + "\n")


def _rerun_argv(args, argv: Sequence[str]) -> list[str]:
    """The original argv with every defaulted option made explicit."""
    parts = list(argv)
    given = {a.split("=")[0] for a in argv if a.startswith("--")}
    for key, val in sorted(vars(args).items()):
        flag = "--" + key.replace("_", "-")
        if key == "command" or flag in given or val is None or val is False:
            continue
        if val is True:
            parts.append(flag)
            continue
        if isinstance(val, decoder.LambdaGrid):
            v = val.values
            val = f"{v[0]!r},{v[-1]!r},{len(v)}"
        elif isinstance(val, (list, tuple)):
            val = ",".join(repr(x) for x in val)
        parts += [flag, str(val)]
    return parts


def cmd_prepare(args) -> None:
    ds = tensorio.load_dataset(args.dataset)
    names = None
    if args.channels is not None:
        names = [ln.strip() for ln in args.channels.read_text().splitlines() if ln.strip()]

    def step(rec):
        if args.baseline is not None:
            rec = tensorio.baseline_correct(rec, *args.baseline)
        if args.downsample is not None:
            rec = tensorio.downsample(rec, args.downsample)
        if names is not None:
            rec = tensorio.select_channels(rec, names)
        return rec

    tensorio.save_dataset(ds.map_recordings(step), args.out)


def cmd_spectrogram(args) -> None:
    spec = audiofeat.FilterbankSpec.parse(args.filterbank, window_ms=args.window_ms,
                                          compression=args.compression)
    specs = [audiofeat.compute_spectrogram(audiofeat.AudioClip(sid, x, rate), spec)
             for sid, x, rate in tensorio.load_audio(args.audio)]
    if args.dataset is None:
        tensorio.save_spectrograms(specs, args.out)
        return
    ds = tensorio.load_dataset(args.dataset)
    by_id = {s.stimulus_id: s for s in specs}
    missing = [sid for sid in ds.stimulus_ids if sid not in by_id]
    if missing:
        raise DataValidationError(f"no audio for stimulus id(s) {missing}")
    tensorio.save_dataset(tensorio.Dataset(ds.recordings, [by_id[s] for s in ds.stimulus_ids]),
                          args.out)


def _frame_period(ds: tensorio.Dataset) -> float:
    if not len(ds):
        raise DataValidationError("dataset is empty")
    return ds.spectrograms[0].frame_period_ms


def cmd_fit(args) -> None:
    ds = tensorio.load_dataset(args.dataset)
    lag = LagSpec(args.lag_ms, _frame_period(ds))
    design, targets = build_lagged_design(ds, lag, ds.stimulus_ids, args.max_overrun_frames)
    model = decoder.fit_decoder(design, targets, args.lambda_grid, args.kernel, args.mode)
    decoder.save_model(model, args.out)


def cmd_predict(args) -> None:
    ds = tensorio.load_dataset(args.dataset)
    model = decoder.load_model(args.model)
    ids = ds.stimulus_ids if args.ids is None else [s for s in args.ids.split(",") if s]
    preds = decoder.predict(model, ds, ids)
    tensorio.save_spectrograms(preds, args.out, name="predictions.json", blob_prefix="pred")


def _pair_filter(args, ds):
    if args.pair_sample is None:
        return None
    return evaluation.sample_pairs(ds.stimulus_ids, args.pair_sample, args.seed)


def _eval_kwargs(args) -> dict:
    return dict(mode=args.mode, threads=max(1, args.threads),
                max_overrun_frames=args.max_overrun_frames)


def cmd_evaluate(args) -> None:
    ds = tensorio.load_dataset(args.dataset)
    lag = LagSpec(args.lag_ms, _frame_period(ds))
    report = evaluation.leave_two_out_cv(ds, lag, args.kernel, args.lambda_grid,
                                         _pair_filter(args, ds), **_eval_kwargs(args))
    evaluation.write_report(report, args.out)
    if args.gnuplot:
        lines = ["# freq_hz feature_score"]
        lines += [f"{f!r} {s!r}" for f, s in zip(report.center_freqs_hz, report.feature_scores)]
        (args.out / "feature_scores.dat").write_text("\n".join(lines) + "\n")


def cmd_sweep(args) -> None:
    ds = tensorio.load_dataset(args.dataset)
    rows = evaluation.lag_sweep(ds, args.lags_ms, args.kernel, args.lambda_grid,
                                _pair_filter(args, ds), **_eval_kwargs(args))
    for lag, report in rows:
        evaluation.write_report(report, args.out, prefix=f"lag{lag:g}ms_")
    (args.out / "sweep.csv").write_text(evaluation.sweep_csv(rows))
    if args.gnuplot:
        (args.out / "sweep.dat").write_text(evaluation.sweep_gnuplot(rows))


def cmd_synth(args) -> None:
    config = synth.SynthConfig(
        n_stimuli=args.n_stimuli, channels=args.channels, freq_channels=args.freq_channels,
        frames_per_stimulus=args.frames, lag_bins_true=args.lag_bins_true, snr=args.snr,
        seed=args.seed, tail_frames=args.tail_frames,
        lag_support_bins=None if args.lag_support_bins is None
        else tuple(int(v) for v in args.lag_support_bins))
    synth.write_synthetic(config, args.out)


COMMANDS = {
    "prepare": cmd_prepare, "spectrogram": cmd_spectrogram, "fit": cmd_fit,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "synth": cmd_synth,
}


def _fail(code: int, kind: str, exc: BaseException, out: Optional[Path]) -> int:
    record = {"status": code, "error": kind, "message": str(exc)}
    cause = exc.cause if isinstance(exc, FoldError) else exc
    if isinstance(exc, FoldError):
        record["pair"] = list(exc.pair)
    for attr in ("rcond", "row", "lam"):
        if hasattr(cause, attr):
            record[attr] = getattr(cause, attr)
    text = json.dumps(record)
    print(text, file=sys.stderr)
    if out is not None and out.is_dir():
        (out / "error.json").write_text(text + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc, None)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    out = getattr(args, "out", None)
    try:
        _write_provenance(args, argv)
        COMMANDS[args.command](args)
    except FoldError as exc:
        code = EXIT_NUMERIC if isinstance(exc.cause, NumericalError) else EXIT_DATA
        return _fail(code, type(exc.cause).__name__, exc, out)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, type(exc).__name__, exc, out)
    except (KernelConvError, OSError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, exc, out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
