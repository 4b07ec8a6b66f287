"""Kernel convolution decoding of stimulus spectrograms from multichannel
neural time series."""

from .decoder import (DecoderModel, KernelSpec, LambdaGrid, fit_decoder, fit_dual, fit_ml,
                      fit_primal_ridge, gram_matrix, predict, select_lambda_loo)
from .errors import (DataValidationError, DegenerateLOOError, FoldError, IllConditionedError,
                     KernelConvError, NumericalError)
from .evaluation import EvalReport, PairResult, lag_sweep, leave_two_out_cv
from .lagging import LagSpec, build_lagged_design
from .tensorio import Dataset, Recording, Spectrogram, load_dataset, save_dataset

__version__ = "0.1.0"

__all__ = [
    "DataValidationError", "Dataset", "DecoderModel", "DegenerateLOOError", "EvalReport",
    "FoldError", "IllConditionedError", "KernelConvError", "KernelSpec", "LagSpec", "LambdaGrid",
    "NumericalError", "PairResult", "Recording", "Spectrogram", "build_lagged_design",
    "fit_decoder", "fit_dual", "fit_ml", "fit_primal_ridge", "gram_matrix", "lag_sweep",
    "leave_two_out_cv", "load_dataset", "predict", "save_dataset", "select_lambda_loo",
]
