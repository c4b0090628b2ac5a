"""Sparse streaming GP state, its predictive distribution and the step-to-step KL.

The state is a set of ``M`` inducing inputs ``Z`` with a Gaussian
``q(u) = N(m_u, S)`` over the latent values at ``Z``. Its size never depends
on how much data has streamed past.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from . import serialize
from .errors import InputError
from .exact_gp import GaussianPosterior
from .kernels import (
    KernelFamily,
    KernelParams,
    as_points,
    as_tensor,
    kernel_diag,
    kernel_matrix,
    psd_cholesky,
    tri_solve,
)

#: Relative jitter floor applied to both covariances inside :func:`kl_new_old`.
#: The union of old and new inducing inputs contains near-duplicate pairs right
#: after a small move, which makes the raw covariances nearly singular.
KL_JITTER = 1e-6

STATE_FORMAT = "opacgp-state"
STATE_VERSION = 1


@dataclass(frozen=True, eq=False)
class VariationalState:
    Z: torch.Tensor
    m_u: torch.Tensor
    S_factor: torch.Tensor
    params: KernelParams
    #: relative jitter floor for factorizing K_ZZ
    jitter: float = 0.0

    def __post_init__(self):
        Z = as_points(self.Z, self.params.dim)
        m_u = as_tensor(self.m_u).reshape(-1)
        L = as_tensor(self.S_factor)
        M = Z.shape[0]
        if m_u.shape[0] != M or tuple(L.shape) != (M, M):
            raise InputError(f"inconsistent shapes: Z {tuple(Z.shape)}, m_u {tuple(m_u.shape)}, S_factor {tuple(L.shape)}")
        Ld = L.detach()
        if bool((torch.triu(Ld, 1) != 0).any()) or not bool((Ld.diagonal() > 0).all()):
            raise InputError("S_factor must be lower triangular with a positive diagonal")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "m_u", m_u)
        object.__setattr__(self, "S_factor", L)

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def S(self) -> torch.Tensor:
        return self.S_factor @ self.S_factor.T

    def detach(self) -> "VariationalState":
        return VariationalState(
            self.Z.detach().clone(),
            self.m_u.detach().clone(),
            self.S_factor.detach().clone(),
            self.params.detach(),
            self.jitter,
        )

    def equals(self, other: "VariationalState") -> bool:
        """Bitwise equality of every tensor."""
        pairs = [
            (self.Z, other.Z),
            (self.m_u, other.m_u),
            (self.S_factor, other.S_factor),
            (self.params.log_lengthscales, other.params.log_lengthscales),
            (self.params.log_signal_variance, other.params.log_signal_variance),
            (self.params.log_noise_variance, other.params.log_noise_variance),
        ]
        return self.params.family == other.params.family and self.jitter == other.jitter and all(
            a.shape == b.shape and bool(torch.equal(a.detach(), b.detach())) for a, b in pairs
        )

    @classmethod
    def from_prior(cls, params: KernelParams, Z, jitter: float = 0.0) -> "VariationalState":
        """Uninformative state: ``m_u = 0`` and ``S = K_ZZ``."""
        Z = as_points(Z, params.dim).detach()
        params = params.detach()
        L = psd_cholesky(kernel_matrix(params, Z, Z), min_jitter=jitter).L
        return cls(Z, torch.zeros(Z.shape[0], dtype=Z.dtype), L, params, jitter)

    def kzz_cholesky(self) -> torch.Tensor:
        return psd_cholesky(kernel_matrix(self.params, self.Z, self.Z), min_jitter=self.jitter).L


@dataclass(frozen=True, eq=False)
class PriorSnapshot:
    """Frozen copy of a state, used as the prior for the next online step."""

    state: VariationalState
    step: int = 0

    # Attribute passthroughs so a snapshot can stand in for a state.
    @property
    def Z(self):
        return self.state.Z

    @property
    def m_u(self):
        return self.state.m_u

    @property
    def S_factor(self):
        return self.state.S_factor

    @property
    def params(self):
        return self.state.params


def snapshot(state: VariationalState | PriorSnapshot, step: int = 0) -> PriorSnapshot:
    if isinstance(state, PriorSnapshot):
        state = state.state
    return PriorSnapshot(state.detach(), step)


def predictive(state: VariationalState | PriorSnapshot, Xs, full_cov: bool = True) -> GaussianPosterior:
    """Latent predictive ``q(f*)``; observation noise is not included."""
    if isinstance(state, PriorSnapshot):
        state = state.state
    params = state.params
    Xs = as_points(Xs, params.dim)
    L = state.kzz_cholesky()
    Kzs = kernel_matrix(params, state.Z, Xs)
    V = tri_solve(L, Kzs)  # L^{-1} K_Z*
    A = torch.linalg.solve_triangular(L.T, V, upper=True)  # K_ZZ^{-1} K_Z*
    mean = A.T @ state.m_u
    B = state.S_factor.T @ A
    if full_cov:
        cov = kernel_matrix(params, Xs, Xs) - V.T @ V + B.T @ B
        cov = 0.5 * (cov + cov.T)
    else:
        resid = torch.clamp(kernel_diag(params, Xs) - (V * V).sum(0), min=0.0)
        cov = resid + (B * B).sum(0)
    return GaussianPosterior(mean, cov)


def gaussian_kl(Q: GaussianPosterior, P: GaussianPosterior, min_jitter: float = 0.0) -> torch.Tensor:
    """``KL(Q || P)`` between two full-covariance Gaussians.

    When jitter is needed (or ``min_jitter`` is set) the KL is that of the
    jittered Gaussians.
    """
    if Q.is_diagonal or P.is_diagonal:
        raise InputError("gaussian_kl needs full covariance matrices")
    k = Q.mean.shape[0]
    if P.mean.shape[0] != k:
        raise InputError(f"dimension mismatch: {k} vs {P.mean.shape[0]}")
    Lq = psd_cholesky(Q.cov, min_jitter=min_jitter).L
    Lp = psd_cholesky(P.cov, min_jitter=min_jitter).L
    M = tri_solve(Lp, Lq)
    d = tri_solve(Lp, (P.mean - Q.mean)[:, None])
    logdet_ratio = 2.0 * (torch.log(Lp.diagonal()).sum() - torch.log(Lq.diagonal()).sum())
    kl = 0.5 * ((M * M).sum() + (d * d).sum() - k + logdet_ratio)
    return torch.clamp(kl, min=0.0)


def union_points(old_Z: torch.Tensor, new_Z: torch.Tensor) -> torch.Tensor:
    """Old inducing inputs followed by the new ones that are not exact duplicates."""
    old_Z = old_Z.detach()
    keep = []
    seen = [row for row in old_Z]
    for i in range(new_Z.shape[0]):
        row = new_Z[i].detach()
        if not any(bool(torch.equal(row, s)) for s in seen):
            keep.append(i)
            seen.append(row)
    if not keep:
        return old_Z
    return torch.cat([old_Z, new_Z[keep]], dim=0)


def kl_new_old(new: VariationalState, old: PriorSnapshot | VariationalState, eval_points=None,
               min_jitter: float = KL_JITTER) -> torch.Tensor:
    """Finite-dimensional ``KL(q_new || q_old)`` of the two predictive processes.

    Both processes are evaluated at ``eval_points``, by default the deduplicated
    union of the old and new inducing inputs.
    """
    if eval_points is None:
        eval_points = union_points(old.Z, new.Z)
    return gaussian_kl(predictive(new, eval_points), predictive(old, eval_points), min_jitter=min_jitter)


def state_to_bytes(state: VariationalState | PriorSnapshot) -> bytes:
    if isinstance(state, PriorSnapshot):
        state = state.state
    s = state.detach()
    meta = {"family": s.params.family.value, "M": s.num_inducing, "D": s.params.dim, "jitter": s.jitter}
    arrays = {
        "Z": s.Z.numpy(),
        "m_u": s.m_u.numpy(),
        "S_factor": s.S_factor.numpy(),
        "log_lengthscales": s.params.log_lengthscales.numpy(),
        "log_signal_variance": s.params.log_signal_variance.numpy(),
        "log_noise_variance": s.params.log_noise_variance.numpy(),
    }
    return serialize.pack(STATE_FORMAT, STATE_VERSION, meta, arrays)


def state_from_bytes(blob: bytes) -> VariationalState:
    meta, a = serialize.unpack(blob, STATE_FORMAT, STATE_VERSION)
    params = KernelParams(
        torch.from_numpy(a["log_lengthscales"]),
        torch.from_numpy(a["log_signal_variance"]),
        torch.from_numpy(a["log_noise_variance"]),
        KernelFamily(meta["family"]),
    )
    return VariationalState(
        torch.from_numpy(a["Z"]), torch.from_numpy(a["m_u"]), torch.from_numpy(a["S_factor"]), params, meta["jitter"]
    )


def save_state(state, path) -> int:
    blob = state_to_bytes(state)
    Path(path).write_bytes(blob)
    return len(blob)


def load_state(path) -> VariationalState:
    return state_from_bytes(Path(path).read_bytes())


def state_nbytes(state: VariationalState) -> int:
    """Number of float64 values held by the state, times 8."""
    M, D = state.num_inducing, state.params.dim
    return 8 * (M * D + M + M * M + D + 2)


def sparse_posterior_state(params: KernelParams, Z, X, y, jitter: float = 0.0) -> VariationalState:
    """Optimal Gaussian ``q(u)`` of the collapsed sparse bound for a fixed ``Z``.

    ``Sigma = (K_ZZ + K_ZX K_XZ / sn2)^{-1}``, ``S = K_ZZ Sigma K_ZZ`` and
    ``m_u = K_ZZ Sigma K_ZX y / sn2``.
    """
    params = params.detach()
    Z = as_points(Z, params.dim).detach()
    X = as_points(X, params.dim)
    y = as_tensor(y).reshape(-1)
    sn2 = params.noise_variance
    Kzz = kernel_matrix(params, Z, Z)
    Kzx = kernel_matrix(params, Z, X)
    Lz = psd_cholesky(Kzz, min_jitter=jitter).L
    # Work in whitened coordinates: A = Lz^{-1} K_ZX / sn
    A = tri_solve(Lz, Kzx) / torch.sqrt(sn2)
    Bmat = torch.eye(Z.shape[0], dtype=Z.dtype) + A @ A.T
    LB = psd_cholesky(Bmat).L
    c = tri_solve(LB, A @ y[:, None] / torch.sqrt(sn2))
    # whitened posterior: mean = LB^{-T} c, cov = B^{-1}
    w_mean = torch.linalg.solve_triangular(LB.T, c, upper=True)[:, 0]
    m_u = Lz @ w_mean
    LBinv = tri_solve(LB, torch.eye(Z.shape[0], dtype=Z.dtype))
    # S = Lz B^{-1} Lz^T = (Lz LB^{-T})(Lz LB^{-T})^T
    F = Lz @ LBinv.T
    S_factor = psd_cholesky(F @ F.T).L
    return VariationalState(Z, m_u, S_factor, params, jitter)


def default_inducing(X, M: int, spacing: float = 1e-3) -> torch.Tensor:
    """``M`` points linearly spaced along the diagonal of the bounding box of ``X``.

    A degenerate (single-point) range yields that point plus copies offset by
    ``spacing`` in every coordinate.
    """
    X = as_tensor(X)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise InputError("cannot place inducing points on an empty slice")
    if M < 1:
        raise InputError("need at least one inducing point")
    lo = X.min(0).values
    hi = X.max(0).values
    t = torch.linspace(0.0, 1.0, M, dtype=X.dtype)[:, None] if M > 1 else torch.zeros(1, 1, dtype=X.dtype)
    Z = lo + t * (hi - lo)
    flat = hi == lo
    if bool(flat.any()):
        offsets = (torch.arange(M, dtype=X.dtype) - 0.5 * (M - 1)) * spacing
        Z[:, flat] = lo[flat] + offsets[:, None]
    return Z
