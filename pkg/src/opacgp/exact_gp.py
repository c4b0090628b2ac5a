"""Exact GP regression: posterior predictive and log marginal likelihood.

O(n^3) and meant for desk-scale problems. Serves as the reference the
streaming model is checked against and as the pretraining objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import InputError
from .kernels import (
    KernelParams,
    as_points,
    as_tensor,
    cho_solve,
    kernel_diag,
    kernel_grads,
    kernel_matrix,
    psd_cholesky,
    tri_solve,
)


@dataclass(frozen=True, eq=False)
class GaussianPosterior:
    """Mean and covariance of a finite-dimensional Gaussian.

    ``cov`` is either the full ``(n, n)`` matrix or, for diagonal-only
    predictions, the length-``n`` vector of marginal variances.
    """

    mean: torch.Tensor
    cov: torch.Tensor

    def __post_init__(self):
        if self.cov.shape[0] != self.mean.shape[0]:
            raise InputError("mean and covariance dimensions differ")

    @property
    def is_diagonal(self) -> bool:
        return self.cov.ndim == 1

    @property
    def var(self) -> torch.Tensor:
        return self.cov if self.is_diagonal else self.cov.diagonal()

    def __len__(self):
        return self.mean.shape[0]


def _training_inputs(params: KernelParams, X, y):
    X = as_points(X, params.dim)
    y = as_tensor(y).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise InputError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    return X, y


def _noisy_cholesky(params: KernelParams, X):
    K = kernel_matrix(params, X, X)
    Ky = K + params.noise_variance * torch.eye(X.shape[0], dtype=K.dtype)
    return psd_cholesky(Ky).L


def gp_posterior(params: KernelParams, X, y, Xs, full_cov: bool = True) -> GaussianPosterior:
    """Latent posterior ``p(f* | X, y)`` at the test inputs ``Xs``."""
    X, y = _training_inputs(params, X, y)
    Xs = as_points(Xs, params.dim)
    L = _noisy_cholesky(params, X)
    Kfs = kernel_matrix(params, X, Xs)
    mean = Kfs.T @ cho_solve(L, y[:, None])[:, 0]
    V = tri_solve(L, Kfs)
    if full_cov:
        cov = kernel_matrix(params, Xs, Xs) - V.T @ V
        cov = 0.5 * (cov + cov.T)
    else:
        cov = kernel_diag(params, Xs) - (V * V).sum(0)
    return GaussianPosterior(mean, cov)


def log_marginal_likelihood(params: KernelParams, X, y) -> torch.Tensor:
    X, y = _training_inputs(params, X, y)
    n = X.shape[0]
    L = _noisy_cholesky(params, X)
    a = tri_solve(L, y[:, None])[:, 0]
    return -0.5 * (a @ a) - torch.log(L.diagonal()).sum() - 0.5 * n * math.log(2 * math.pi)


def log_marginal_likelihood_grad(params: KernelParams, X, y) -> dict[str, torch.Tensor]:
    """Analytic gradient of :func:`log_marginal_likelihood` per log-hyperparameter.

    Uses ``0.5 * tr((alpha alpha^T - Ky^{-1}) dKy)`` with ``alpha = Ky^{-1} y``.
    Keys match :func:`kernel_grads` plus ``"log_noise_variance"``.
    """
    X, y = _training_inputs(params, X, y)
    n = X.shape[0]
    L = _noisy_cholesky(params, X)
    alpha = cho_solve(L, y[:, None])
    W = alpha @ alpha.T - cho_solve(L, torch.eye(n, dtype=L.dtype))
    grads = {name: 0.5 * (W * dK).sum() for name, dK in kernel_grads(params, X, X).items()}
    grads["log_noise_variance"] = 0.5 * params.noise_variance * W.diagonal().sum()
    return grads
