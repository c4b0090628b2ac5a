"""Online PAC-Bayes sparse Gaussian process regression."""

__version__ = "0.1.0"

from .errors import InputError, NumericalError, OpacgpError, SchemaError
from .exact_gp import GaussianPosterior, gp_posterior, log_marginal_likelihood
from .kernels import KernelParams, kernel_matrix, psd_cholesky
from .pacbayes import BoundReport, LossKind, LossSpec, expected_loss, test_bound, train_objective
from .streaming import VariationalState, gaussian_kl, kl_new_old, predictive, snapshot
from .trainer import OnlineTrainer, StepRecord, TrainConfig, online_step, pretrain, run_stream

__all__ = [
    "BoundReport", "GaussianPosterior", "InputError", "KernelParams", "LossKind", "LossSpec",
    "NumericalError", "OnlineTrainer", "OpacgpError", "SchemaError", "StepRecord", "TrainConfig",
    "VariationalState", "expected_loss", "gaussian_kl", "gp_posterior", "kernel_matrix",
    "kl_new_old", "log_marginal_likelihood", "online_step", "predictive", "pretrain",
    "psd_cholesky", "run_stream", "snapshot", "test_bound", "train_objective",
]
