"""Primal, dual and kernel ridge estimators for the convolution decoder.

Every fit works per frequency channel ``f``::

    ML      G_f = (R^T R)^-1 R^T S_f
    primal  G_f = (R^T R + lam_f I)^-1 R^T S_f
    dual    alpha_f = (K + lam_f I)^-1 S_f,   K = k(R, R)

and prediction is ``r_new @ G`` (primal) or ``k(r_new, R) @ alpha`` (dual).
Regularization is chosen per frequency from the closed-form leave-one-out
error, computed from a single spectral decomposition of ``K``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg

from .errors import (DataValidationError, DegenerateLOOError, IllConditionedError,
                     NumericalError)
from .lagging import LaggedDesign, LagSpec, TargetMatrix, recording_design
from .tensorio import (Dataset, Spectrogram, StandardizationStats, apply_standardizer,
                       fit_standardizer, invert_standardizer, read_blob, write_blob)

MODEL_FORMAT_VERSION = 1
RCOND_THRESHOLD = 1e-12
LEVERAGE_FLOOR = 1e-12
# relative size of a negative Gram eigenvalue tolerated as round-off
PSD_TOLERANCE = 1e-8

ArrayLike = Union[np.ndarray, LaggedDesign, TargetMatrix]


@dataclass(frozen=True)
class KernelSpec:
    """Kernel used for the Gram matrix; ``gamma`` only matters for gaussian."""

    kind: str = "linear"
    gamma: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("linear", "gaussian"):
            raise DataValidationError(f"unknown kernel {self.kind!r}")
        if self.kind == "gaussian":
            if self.gamma is None or not self.gamma > 0:
                raise DataValidationError("gaussian kernel needs gamma > 0")
        else:
            object.__setattr__(self, "gamma", None)

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        """Parse ``linear`` or ``gaussian:<gamma>``."""
        kind, _, arg = text.partition(":")
        if kind == "gaussian":
            try:
                return cls("gaussian", float(arg))
            except ValueError:
                raise DataValidationError(f"bad gaussian gamma in {text!r}") from None
        if arg:
            raise DataValidationError(f"kernel {kind!r} takes no argument")
        return cls(kind)

    def __str__(self) -> str:
        return "linear" if self.kind == "linear" else f"gaussian:{self.gamma!r}"


@dataclass(frozen=True)
class LambdaGrid:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise DataValidationError("lambda grid is empty")
        if any(v <= 0 for v in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
            raise DataValidationError("lambda grid must be positive and strictly increasing")

    @classmethod
    def logspace(cls, lo: float, hi: float, count: int) -> "LambdaGrid":
        if count == 1:
            return cls((float(lo),))
        return cls(tuple(np.geomspace(lo, hi, count)))

    @classmethod
    def default(cls, n_rows: int) -> "LambdaGrid":
        """Ten values log-spaced over ``[1e-4 n, 1e4 n]``."""
        return cls.logspace(1e-4 * n_rows, 1e4 * n_rows, 10)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True, eq=False)
class DecoderModel:
    """A fitted decoder.

    Attributes
    ----------
    mode : str
        ``"primal"`` stores ``primal_G`` of shape (features, freqs);
        ``"dual"`` stores ``dual_alpha`` of shape (train rows, freqs) and the
        standardized ``training_rows`` needed to evaluate the kernel.
    lambdas : np.ndarray
        Regularization per frequency channel.
    """

    kernel: KernelSpec
    lag_spec: Optional[LagSpec]
    mode: str
    lambdas: np.ndarray
    standardizer_design: StandardizationStats
    standardizer_target: StandardizationStats
    primal_G: Optional[np.ndarray] = None
    dual_alpha: Optional[np.ndarray] = None
    training_rows: Optional[np.ndarray] = None
    channel_names: tuple[str, ...] = ()
    center_freqs_hz: tuple[float, ...] = ()

    def __post_init__(self):
        if self.mode not in ("primal", "dual"):
            raise DataValidationError(f"unknown mode {self.mode!r}")
        if (self.mode == "primal") != (self.primal_G is not None) or \
                (self.mode == "dual") != (self.dual_alpha is not None):
            raise DataValidationError("exactly one of primal_G / dual_alpha must match mode")
        if self.mode == "dual" and self.training_rows is None:
            raise DataValidationError("dual model needs its training rows")
        coef = self.primal_G if self.mode == "primal" else self.dual_alpha
        if len(self.lambdas) != coef.shape[1]:
            raise DataValidationError("one lambda per frequency channel required")
        for name in ("lambdas", "primal_G", "dual_alpha", "training_rows"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype=np.float64)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def n_freqs(self) -> int:
        return len(self.lambdas)

    @property
    def n_features(self) -> int:
        return len(self.standardizer_design)

    def coefficients(self) -> np.ndarray:
        """Response functions G (features x freqs) in standardized units.

        For a dual model this is ``R^T alpha``, defined for the linear kernel only.
        """
        if self.mode == "primal":
            return self.primal_G
        if self.kernel.kind != "linear":
            raise DataValidationError("a gaussian-kernel model has no primal coefficients")
        return self.training_rows.T @ self.dual_alpha

    def predict_rows(self, rows: np.ndarray) -> np.ndarray:
        """Predict target rows (original units) from raw lagged design rows."""
        x = apply_standardizer(rows, self.standardizer_design)
        if self.mode == "primal":
            z = x @ self.primal_G
        else:
            z = gram_matrix(x, self.training_rows, self.kernel) @ self.dual_alpha
        return invert_standardizer(z, self.standardizer_target)


# ---------------------------------------------------------------------------
# kernels and spectral machinery


def gram_matrix(A: np.ndarray, B: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """Kernel matrix between the rows of ``A`` (n x d) and ``B`` (m x d)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DataValidationError(f"gram_matrix: incompatible shapes {A.shape}, {B.shape}")
    same = A is B
    inner = A @ B.T
    if same:
        inner = 0.5 * (inner + inner.T)
    if kernel.kind == "linear":
        return inner
    sq_a = np.einsum("ij,ij->i", A, A)
    sq_b = sq_a if same else np.einsum("ij,ij->i", B, B)
    dist = sq_a[:, None] + sq_b[None, :] - 2.0 * inner
    np.maximum(dist, 0.0, out=dist)
    if same:
        np.fill_diagonal(dist, 0.0)
    return np.exp(-kernel.gamma * dist)


@dataclass(frozen=True, eq=False)
class GramSpectrum:
    """Eigendecomposition ``K = U diag(w) U^T`` of a training Gram matrix.

    ``U`` may be thin (n x r, r < n); the eigenvalues of its orthogonal
    complement are zero. All per-lambda quantities reuse the same factors.
    """

    U: np.ndarray
    w: np.ndarray
    n: int
    _leverage_rest: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rest = 1.0 - np.einsum("ij,ij->i", self.U, self.U)
        object.__setattr__(self, "_leverage_rest", np.maximum(rest, 0.0))

    @classmethod
    def from_rows(cls, rows: np.ndarray, kernel: KernelSpec) -> "GramSpectrum":
        rows = np.asarray(rows, dtype=np.float64)
        n = rows.shape[0]
        if kernel.kind == "linear":
            # SVD of R gives K's eigenpairs without forming K
            U, s, _ = scipy.linalg.svd(rows, full_matrices=False, lapack_driver="gesdd")
            return cls(U, s ** 2, n)
        return cls.from_gram(gram_matrix(rows, rows, kernel))

    @classmethod
    def from_gram(cls, K: np.ndarray) -> "GramSpectrum":
        w, U = scipy.linalg.eigh(K)
        scale = max(np.abs(w).max(initial=0.0), 1.0)
        if w.size and w.min() < -PSD_TOLERANCE * scale:
            raise NumericalError(
                f"Gram matrix is not positive semi-definite (min eigenvalue {w.min():.3e})")
        return cls(U, np.maximum(w, 0.0), K.shape[0])

    def resolvent(self, S: np.ndarray, lam: float) -> np.ndarray:
        """``(K + lam I)^-1 S``."""
        proj = self.U.T @ S
        out = self.U @ (proj / (self.w + lam)[:, None])
        if self.U.shape[1] < self.n:
            out += (S - self.U @ proj) / lam
        return out

    def loo_residuals(self, S: np.ndarray, lam: float) -> np.ndarray:
        """Closed-form leave-one-out residuals ``e_i / (1 - h_i)``.

        The in-sample residual is ``lam (K + lam I)^-1 S`` and ``1 - h_i`` is
        the diagonal of ``lam (K + lam I)^-1``.
        """
        shrink = lam / (self.w + lam)
        proj = self.U.T @ S
        resid = self.U @ (proj * shrink[:, None])
        one_minus_h = (self.U ** 2) @ shrink
        if self.U.shape[1] < self.n:
            resid += S - self.U @ proj
            one_minus_h += self._leverage_rest
        bad = np.flatnonzero(one_minus_h < LEVERAGE_FLOOR)
        if bad.size:
            raise DegenerateLOOError(
                f"leverage of row {int(bad[0])} is 1 within {LEVERAGE_FLOOR:g} at "
                f"lambda={lam:g}", row=int(bad[0]), lam=lam)
        return resid / one_minus_h[:, None]


# ---------------------------------------------------------------------------
# fitting


def _matrix(x: ArrayLike) -> np.ndarray:
    if isinstance(x, LaggedDesign):
        return x.rows
    if isinstance(x, TargetMatrix):
        return x.values
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DataValidationError(f"expected a matrix, got shape {arr.shape}")
    return arr


def _prepare(design: ArrayLike, targets: ArrayLike, standardize: bool):
    R, S = _matrix(design), _matrix(targets)
    if R.shape[0] != S.shape[0]:
        raise DataValidationError(f"design has {R.shape[0]} rows, targets {S.shape[0]}")
    if isinstance(design, LaggedDesign) and isinstance(targets, TargetMatrix) \
            and design.row_index != targets.row_index:
        raise DataValidationError("design and target row indices differ")
    if standardize:
        sd, st = fit_standardizer(R), fit_standardizer(S)
        R, S = apply_standardizer(R, sd), apply_standardizer(S, st)
    else:
        sd, st = StandardizationStats.identity(R.shape[1]), StandardizationStats.identity(S.shape[1])
    meta = dict(
        lag_spec=design.lag_spec if isinstance(design, LaggedDesign) else None,
        channel_names=design.channel_names if isinstance(design, LaggedDesign) else (),
        center_freqs_hz=targets.center_freqs_hz if isinstance(targets, TargetMatrix) else (),
        standardizer_design=sd, standardizer_target=st,
    )
    return R, S, meta


def _lambda_vector(lambdas, n_freqs: int) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.ndim == 0:
        lam = np.full(n_freqs, float(lam))
    if lam.shape != (n_freqs,):
        raise DataValidationError(f"need {n_freqs} lambdas, got {lam.shape}")
    if np.any(~np.isfinite(lam)) or np.any(lam < 0):
        raise DataValidationError("lambdas must be finite and nonnegative")
    return lam


def _solve_ml(R: np.ndarray, S: np.ndarray) -> np.ndarray:
    n, d = R.shape
    if n < d:
        raise IllConditionedError(
            f"R^T R is singular: {n} rows for {d} features; use ridge", rcond=0.0)
    G, _, _, sv = scipy.linalg.lstsq(R, S, lapack_driver="gelsd")
    rcond = float((sv[-1] / sv[0]) ** 2) if sv.size and sv[0] > 0 else 0.0
    if rcond < RCOND_THRESHOLD:
        raise IllConditionedError(
            f"R^T R is ill-conditioned (reciprocal condition {rcond:.3e}); use ridge",
            rcond=rcond)
    return G


def fit_ml(design: ArrayLike, targets: ArrayLike, *, standardize: bool = False) -> DecoderModel:
    """Unregularized least-squares response functions.

    Raises
    ------
    IllConditionedError
        If the reciprocal condition number of ``R^T R`` is below 1e-12.
    """
    R, S, meta = _prepare(design, targets, standardize)
    G = _solve_ml(R, S)
    return DecoderModel(KernelSpec("linear"), mode="primal", lambdas=np.zeros(S.shape[1]),
                        primal_G=G, **meta)


def fit_primal_ridge(design: ArrayLike, targets: ArrayLike, lambdas, *,
                     standardize: bool = False) -> DecoderModel:
    R, S, meta = _prepare(design, targets, standardize)
    lam = _lambda_vector(lambdas, S.shape[1])
    RtR = R.T @ R
    RtS = R.T @ S
    G = np.empty((R.shape[1], S.shape[1]))
    for value in np.unique(lam):
        cols = np.flatnonzero(lam == value)
        if value == 0:
            G[:, cols] = _solve_ml(R, S[:, cols])
            continue
        A = RtR + value * np.eye(R.shape[1])
        try:
            factor = scipy.linalg.cho_factor(A)
        except np.linalg.LinAlgError:
            w = np.linalg.eigvalsh(A)
            rcond = float(max(w[0], 0.0) / w[-1]) if w[-1] > 0 else 0.0
            raise IllConditionedError(
                f"R^T R + {value:g} I is not numerically positive definite "
                f"(reciprocal condition {rcond:.3e}); use a larger lambda", rcond=rcond) from None
        G[:, cols] = scipy.linalg.cho_solve(factor, RtS[:, cols])
    return DecoderModel(KernelSpec("linear"), mode="primal", lambdas=lam, primal_G=G, **meta)


def fit_dual(design: ArrayLike, targets: ArrayLike, lambdas, kernel: KernelSpec = KernelSpec(),
             *, standardize: bool = False,
             spectrum: Optional[GramSpectrum] = None) -> DecoderModel:
    """Dual (kernel) ridge fit sharing one eigendecomposition across frequencies."""
    R, S, meta = _prepare(design, targets, standardize)
    lam = _lambda_vector(lambdas, S.shape[1])
    if np.any(lam <= 0):
        raise DataValidationError("dual fit requires strictly positive lambdas")
    if spectrum is None:
        spectrum = GramSpectrum.from_rows(R, kernel)
    alpha = np.empty_like(S)
    for value in np.unique(lam):
        cols = np.flatnonzero(lam == value)
        alpha[:, cols] = spectrum.resolvent(S[:, cols], value)
    return DecoderModel(kernel, mode="dual", lambdas=lam, dual_alpha=alpha,
                        training_rows=R, **meta)


def select_lambda_loo(design: ArrayLike, targets: ArrayLike, grid: Optional[LambdaGrid] = None,
                      kernel: KernelSpec = KernelSpec(), *, standardize: bool = False,
                      spectrum: Optional[GramSpectrum] = None):
    """Pick a lambda per frequency by closed-form leave-one-out error.

    Returns
    -------
    lambdas : np.ndarray
        Selected value per frequency; ties go to the larger lambda.
    loo_errors : np.ndarray
        Mean squared LOO error, shape (len(grid), freqs).
    """
    R, S, _ = _prepare(design, targets, standardize)
    if R.shape[0] < 2:
        raise DataValidationError("leave-one-out needs at least 2 training rows")
    if grid is None:
        grid = LambdaGrid.default(R.shape[0])
    if spectrum is None:
        spectrum = GramSpectrum.from_rows(R, kernel)
    errors = np.empty((len(grid), S.shape[1]))
    for g, lam in enumerate(grid.values):
        errors[g] = np.mean(spectrum.loo_residuals(S, lam) ** 2, axis=0)
    # reversed argmin: first minimum from the top of the grid
    best = len(grid) - 1 - np.argmin(errors[::-1], axis=0)
    return np.asarray(grid.values)[best], errors


def fit_decoder(design: LaggedDesign, targets: TargetMatrix, grid: Optional[LambdaGrid] = None,
                kernel: KernelSpec = KernelSpec(), mode: str = "dual",
                standardize: bool = True) -> DecoderModel:
    """Standardize, select lambdas by fast LOO, then fit in the requested form."""
    if mode == "primal" and kernel.kind != "linear":
        raise DataValidationError("primal mode supports the linear kernel only")
    R, S, meta = _prepare(design, targets, standardize)
    spectrum = GramSpectrum.from_rows(R, kernel)
    lambdas, _ = select_lambda_loo(R, S, grid, kernel, spectrum=spectrum)
    if mode == "primal":
        model = fit_primal_ridge(R, S, lambdas)
    else:
        model = fit_dual(R, S, lambdas, kernel, spectrum=spectrum)
    return DecoderModel(kernel, mode=mode, lambdas=model.lambdas, primal_G=model.primal_G,
                        dual_alpha=model.dual_alpha, training_rows=model.training_rows, **meta)


# ---------------------------------------------------------------------------
# prediction


def predict(model: DecoderModel, ds: Dataset, stimulus_ids: Sequence[str]) -> list[Spectrogram]:
    """Predict a spectrogram per stimulus, with the frame count of its
    paired spectrogram in ``ds``."""
    if model.lag_spec is None:
        raise DataValidationError("model carries no lag specification")
    out = []
    for sid in stimulus_ids:
        rec = ds.recording(sid)
        if model.channel_names and rec.channel_names != model.channel_names:
            raise DataValidationError(
                f"stimulus {sid!r}: channel set differs from the model's")
        n_frames = ds.spectrogram(sid).n_frames
        rows = recording_design(rec, n_frames, model.lag_spec)
        if rows.shape[1] != model.n_features:
            raise DataValidationError(
                f"stimulus {sid!r}: {rows.shape[1]} lagged features, model expects "
                f"{model.n_features}")
        pred = model.predict_rows(rows)
        freqs = model.center_freqs_hz or ds.spectrogram(sid).center_freqs_hz
        out.append(Spectrogram(sid, pred.T, model.lag_spec.frame_period_ms, freqs))
    return out


# ---------------------------------------------------------------------------
# serialization


def save_model(model: DecoderModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for name in ("primal_G", "dual_alpha", "training_rows"):
        arr = getattr(model, name)
        if arr is not None:
            write_blob(directory / f"{name}.f64", arr)
            blobs[name] = {"blob": f"{name}.f64", "shape": list(arr.shape)}
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "kernel": {"kind": model.kernel.kind, "gamma": model.kernel.gamma},
        "lag": None if model.lag_spec is None else
        {"lag_ms": model.lag_spec.lag_ms, "frame_period_ms": model.lag_spec.frame_period_ms},
        "mode": model.mode,
        "lambdas": model.lambdas.tolist(),
        "standardizer_design": _stats_json(model.standardizer_design),
        "standardizer_target": _stats_json(model.standardizer_target),
        "channel_names": list(model.channel_names),
        "center_freqs_hz": list(model.center_freqs_hz),
        "blobs": blobs,
    }
    path = directory / "model.json"
    path.write_text(json.dumps(header, indent=2) + "\n")
    return path


def load_model(path) -> DecoderModel:
    path = Path(path)
    if path.is_dir():
        path = path / "model.json"
    if not path.is_file():
        raise DataValidationError(f"missing model header {path}")
    header = json.loads(path.read_text())
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataValidationError(f"unsupported model format {header.get('format_version')}")
    arrays = {}
    for name, info in header["blobs"].items():
        arrays[name] = read_blob(path.parent / info["blob"], *info["shape"], kind=name)
    lag = header["lag"]
    return DecoderModel(
        kernel=KernelSpec(header["kernel"]["kind"], header["kernel"]["gamma"]),
        lag_spec=None if lag is None else LagSpec(lag["lag_ms"], lag["frame_period_ms"]),
        mode=header["mode"],
        lambdas=np.array(header["lambdas"], dtype=np.float64),
        standardizer_design=_stats_from_json(header["standardizer_design"]),
        standardizer_target=_stats_from_json(header["standardizer_target"]),
        channel_names=tuple(header["channel_names"]),
        center_freqs_hz=tuple(header["center_freqs_hz"]),
        **arrays,
    )


def _stats_json(stats: StandardizationStats) -> dict:
    return {"means": stats.means.tolist(), "stds": stats.stds.tolist(),
            "epsilon": stats.epsilon}


def _stats_from_json(d: dict) -> StandardizationStats:
    return StandardizationStats(np.array(d["means"], dtype=np.float64),
                                np.array(d["stds"], dtype=np.float64), d["epsilon"])
