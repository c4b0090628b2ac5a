"""Kernel evaluation, jittered Cholesky factorization and analytic kernel gradients.

All hyperparameters are stored on the log scale so optimizers work in an
unconstrained space. Functions accept anything ``torch.as_tensor`` understands
and return float64 tensors; autograd flows through every operation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch

from .errors import InputError, NumericalError

DTYPE = torch.float64

#: Jitter ladder, relative to the mean diagonal of the matrix being factorized.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


class KernelFamily(str, enum.Enum):
    RBF = "rbf"


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True, eq=False)
class KernelParams:
    """Log-parameterized RBF hyperparameters plus the observation-noise variance."""

    log_lengthscales: torch.Tensor
    log_signal_variance: torch.Tensor
    log_noise_variance: torch.Tensor
    family: KernelFamily = KernelFamily.RBF

    def __post_init__(self):
        object.__setattr__(self, "log_lengthscales", as_tensor(self.log_lengthscales).reshape(-1))
        object.__setattr__(self, "log_signal_variance", as_tensor(self.log_signal_variance).reshape(()))
        object.__setattr__(self, "log_noise_variance", as_tensor(self.log_noise_variance).reshape(()))
        object.__setattr__(self, "family", KernelFamily(self.family))
        if self.log_lengthscales.numel() == 0:
            raise InputError("at least one lengthscale is required")
        for name in ("log_lengthscales", "log_signal_variance", "log_noise_variance"):
            value = torch.exp(getattr(self, name).detach())
            if not bool(torch.all(torch.isfinite(value) & (value > 0))):
                raise InputError(f"exp({name}) must be finite and positive")

    @classmethod
    def create(cls, lengthscales, signal_variance=1.0, noise_variance=0.1, family=KernelFamily.RBF):
        ls = as_tensor(lengthscales).reshape(-1)
        return cls(
            log_lengthscales=torch.log(ls),
            log_signal_variance=torch.log(as_tensor(signal_variance)),
            log_noise_variance=torch.log(as_tensor(noise_variance)),
            family=family,
        )

    @property
    def dim(self) -> int:
        return self.log_lengthscales.numel()

    @property
    def lengthscales(self) -> torch.Tensor:
        return torch.exp(self.log_lengthscales)

    @property
    def signal_variance(self) -> torch.Tensor:
        return torch.exp(self.log_signal_variance)

    @property
    def noise_variance(self) -> torch.Tensor:
        return torch.exp(self.log_noise_variance)

    def detach(self) -> "KernelParams":
        return KernelParams(
            self.log_lengthscales.detach().clone(),
            self.log_signal_variance.detach().clone(),
            self.log_noise_variance.detach().clone(),
            self.family,
        )


def as_points(X, dim: int) -> torch.Tensor:
    """Coerce ``X`` to an ``(n, dim)`` tensor; 1-D input is read as ``n`` points when ``dim == 1``."""
    X = as_tensor(X)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(-1, 1) if dim == 1 else X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != dim:
        raise InputError(f"expected points of dimension {dim}, got shape {tuple(X.shape)}")
    if X.shape[0] == 0:
        raise InputError("point set is empty")
    return X


def _scaled_sqdist(params: KernelParams, A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    diff = (A[:, None, :] - B[None, :, :]) / params.lengthscales
    return diff, (diff * diff).sum(-1)


def kernel_matrix(params: KernelParams, A, B) -> torch.Tensor:
    """RBF covariance ``sf2 * exp(-0.5 * sum_d ((a_d - b_d) / l_d)^2)`` between two point sets."""
    A = as_points(A, params.dim)
    B = as_points(B, params.dim)
    _, r2 = _scaled_sqdist(params, A, B)
    return params.signal_variance * torch.exp(-0.5 * r2)


def kernel_diag(params: KernelParams, A) -> torch.Tensor:
    A = as_points(A, params.dim)
    return params.signal_variance.expand(A.shape[0])


def kernel_grads(params: KernelParams, A, B) -> dict[str, torch.Tensor]:
    """Analytic derivatives of the kernel matrix with respect to each log-hyperparameter.

    Keys are ``"log_lengthscale_<d>"`` for every input dimension and
    ``"log_signal_variance"``.
    """
    A = as_points(A, params.dim)
    B = as_points(B, params.dim)
    diff, r2 = _scaled_sqdist(params, A, B)
    K = params.signal_variance * torch.exp(-0.5 * r2)
    grads = {f"log_lengthscale_{d}": K * diff[..., d] ** 2 for d in range(params.dim)}
    grads["log_signal_variance"] = K
    return grads


@dataclass(frozen=True, eq=False)
class CholeskyResult:
    L: torch.Tensor
    jitter: float


def psd_cholesky(M, min_jitter: float = 0.0, sym_tol: float = 1e-10) -> CholeskyResult:
    """Lower Cholesky factor of ``M + j*I``, escalating ``j`` along :data:`JITTER_LADDER`.

    ``j`` is relative to the mean diagonal of ``M``. Rungs below ``min_jitter``
    are skipped, which lets callers impose a noise floor. The absolute jitter
    actually added is reported on the result.
    """
    M = as_tensor(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] == 0:
        raise InputError(f"expected a nonempty square matrix, got shape {tuple(M.shape)}")
    Md = M.detach()
    scale = float(Md.abs().max()) if Md.numel() else 0.0
    if not math.isfinite(scale):
        raise NumericalError("matrix contains non-finite entries")
    if float((Md - Md.T).abs().max()) > sym_tol * max(scale, 1.0):
        raise InputError("matrix is not symmetric")
    M = 0.5 * (M + M.T)
    # the jitter scale stays on the autograd tape: it is part of the function
    mean_diag = M.diagonal().mean()
    if not float(mean_diag.detach()) > 0:
        mean_diag = torch.ones((), dtype=M.dtype)
    eye = torch.eye(M.shape[0], dtype=M.dtype)
    ladder = [min_jitter] + [j for j in JITTER_LADDER if j > min_jitter]
    for rel in ladder:
        jitter = rel * mean_diag
        L, info = torch.linalg.cholesky_ex(M + jitter * eye if rel else M)
        if int(info) == 0 and bool(torch.isfinite(L.detach()).all()):
            return CholeskyResult(L, float(jitter.detach()) if rel else 0.0)
    raise NumericalError(f"Cholesky failed for every jitter in {ladder} (relative to mean diagonal {float(mean_diag.detach()):g})")


def cho_solve(L: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    return torch.cholesky_solve(B, L)


def tri_solve(L: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """Solve ``L X = B`` for lower-triangular ``L``."""
    return torch.linalg.solve_triangular(L, B, upper=False)
