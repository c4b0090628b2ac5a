"""Bounded losses, their Gaussian expectations, and the online PAC-Bayes bounds."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import torch

from .errors import InputError
from .kernels import as_tensor

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class LossKind(str, enum.Enum):
    INDICATOR = "indicator"
    CLIPPED_SQUARE = "clipped_square"
    EXP = "exp"
    INTERVAL = "interval"


@dataclass(frozen=True)
class LossSpec:
    """A bounded loss into ``[0, ceiling_K]``.

    ``r_minus``/``r_plus`` give the acceptance interval of the ``interval``
    kind and default to ``y -/+ epsilon``.
    """

    kind: LossKind = LossKind.EXP
    epsilon: float = 0.1
    r_minus: Callable | None = field(default=None, compare=False)
    r_plus: Callable | None = field(default=None, compare=False)
    ceiling_K: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise InputError(f"epsilon must be positive, got {self.epsilon}")
        if self.ceiling_K != 1.0:
            raise InputError("all supported losses map into [0, 1]; ceiling_K must be 1")

    @classmethod
    def from_epsilon2(cls, kind="exp", epsilon2=0.01, **kw) -> "LossSpec":
        return cls(kind=kind, epsilon=math.sqrt(epsilon2), **kw)

    def interval(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        lo = self.r_minus(y) if self.r_minus is not None else y - self.epsilon
        hi = self.r_plus(y) if self.r_plus is not None else y + self.epsilon
        lo, hi = as_tensor(lo), as_tensor(hi)
        if bool((lo >= hi).any()):
            raise InputError("r_minus(y) must be below r_plus(y)")
        return lo, hi


def normal_cdf(z):
    """Standard normal CDF."""
    return torch.special.ndtr(as_tensor(z))


def _normal_pdf(z):
    return _INV_SQRT_2PI * torch.exp(-0.5 * z * z)


def loss(spec: LossSpec, y, yhat) -> torch.Tensor:
    y, yhat = as_tensor(y), as_tensor(yhat)
    r = y - yhat
    eps = spec.epsilon
    if spec.kind is LossKind.INDICATOR:
        return (r.abs() > eps).to(r.dtype)
    if spec.kind is LossKind.CLIPPED_SQUARE:
        return torch.clamp((r / eps) ** 2, max=1.0)
    if spec.kind is LossKind.EXP:
        return 1.0 - torch.exp(-((r / eps) ** 2))
    lo, hi = spec.interval(y)
    return ((yhat < lo) | (yhat > hi)).to(r.dtype)


def expected_loss(spec: LossSpec, y, m, var) -> torch.Tensor:
    """``E[loss(y, h)]`` for ``h ~ N(m, var)``, in closed form.

    Elementwise over broadcast inputs. Entries with ``var == 0`` return
    ``loss(spec, y, m)``.
    """
    y, m, var = torch.broadcast_tensors(as_tensor(y), as_tensor(m), as_tensor(var))
    if bool((var.detach() < 0).any()):
        raise InputError("variance must be nonnegative")
    pos = var > 0
    v = torch.where(pos, var, torch.ones_like(var))
    eps = spec.epsilon
    eps2 = eps * eps
    d = y - m
    if spec.kind is LossKind.EXP:
        val = 1.0 - torch.rsqrt(1.0 + 2.0 * v / eps2) * torch.exp(-d * d / (2.0 * v + eps2))
    else:
        s = torch.sqrt(v)
        if spec.kind is LossKind.INTERVAL:
            lo, hi = spec.interval(y)
            a, b = (lo - m) / s, (hi - m) / s
        else:
            a, b = (d - eps) / s, (d + eps) / s
        if spec.kind is LossKind.CLIPPED_SQUARE:
            inside = torch.special.ndtr(b) - torch.special.ndtr(a)
            val = (
                1.0
                - (1.0 - (d * d + v) / eps2) * inside
                - (s / eps2) * (d + eps) * _normal_pdf(a)
                + (s / eps2) * (d - eps) * _normal_pdf(b)
            )
        else:
            val = torch.special.ndtr(a) + torch.special.ndtr(-b)
    val = torch.where(pos, val, loss(spec, y, m))
    return torch.clamp(val, 0.0, 1.0)


class BatchPredictions(NamedTuple):
    y: torch.Tensor
    mean: torch.Tensor
    var: torch.Tensor


@dataclass(frozen=True, eq=False)
class BoundReport:
    """Additive decomposition of the online PAC-Bayes training objective.

    ``empirical_term`` and ``kl_term`` may carry autograd history; the
    constant term never depends on model parameters.
    """

    empirical_term: torch.Tensor
    kl_term: torch.Tensor
    constant_term: float
    total: torch.Tensor
    m: int
    lam: float
    delta: float
    K: float = 1.0

    def floats(self) -> dict[str, float]:
        return {
            "empirical_term": float(self.empirical_term),
            "kl_term": float(self.kl_term),
            "constant_term": float(self.constant_term),
            "total": float(self.total),
        }


def _check_bound_args(m_count, lam, delta):
    if not (lam > 0 and math.isfinite(lam)):
        raise InputError(f"lambda must be positive, got {lam}")
    if not (0 < delta <= 1):
        raise InputError(f"delta must lie in (0, 1], got {delta}")
    if m_count < 0:
        raise InputError("m_count must be nonnegative")


def constant_term(m_count: int, lam: float, delta: float, K: float = 1.0) -> float:
    """``lam * m * K^2 / 2 + log(1/delta) / lam``."""
    _check_bound_args(m_count, lam, delta)
    return lam * m_count * K * K / 2.0 + math.log(1.0 / delta) / lam


def _as_batch(batch_preds) -> BatchPredictions:
    if isinstance(batch_preds, BatchPredictions):
        return BatchPredictions(*(as_tensor(t).reshape(-1) for t in batch_preds))
    rows = list(batch_preds)
    if not rows:
        z = torch.zeros(0, dtype=torch.float64)
        return BatchPredictions(z, z, z)
    t = as_tensor([[float(v) for v in row] for row in rows])
    return BatchPredictions(t[:, 0], t[:, 1], t[:, 2])


def train_objective(batch_preds: BatchPredictions | Sequence[tuple[float, float, float]], kl, m_count: int,
                    lam: float, delta: float, spec: LossSpec) -> BoundReport:
    """Assemble ``sum E[loss] + KL/lam + lam m K^2/2 + log(1/delta)/lam``."""
    _check_bound_args(m_count, lam, delta)
    kl = as_tensor(kl)
    if float(kl.detach()) < 0:
        raise InputError("KL must be nonnegative")
    batch = _as_batch(batch_preds)
    losses = expected_loss(spec, batch.y, batch.mean, batch.var)
    # cumsum fixes a sequential left-to-right summation order
    empirical = torch.cumsum(losses, 0)[-1] if losses.numel() else losses.sum()
    kl_term = kl / lam
    const = constant_term(m_count, lam, delta, spec.ceiling_K)
    total = empirical + kl_term + const
    return BoundReport(empirical, kl_term, const, total, m_count, lam, delta, spec.ceiling_K)


def test_bound(cumulative_empirical: float, m_count: int, lam: float, delta: float, K: float = 1.0) -> float:
    """Online test bound: cumulative prequential loss plus the constant term."""
    return float(cumulative_empirical) + constant_term(m_count, lam, delta, K)


test_bound.__test__ = False  # not a pytest test


def resolve_lambda(mode: str | float, n_seen: int) -> float:
    """``"1/m"`` (or ``"one_over_m"``) gives ``1 / n_seen``; a number is used as is."""
    if isinstance(mode, str) and mode in ("1/m", "one_over_m"):
        if n_seen < 1:
            raise InputError("lambda = 1/m needs at least one observation")
        return 1.0 / n_seen
    lam = float(mode)
    if not lam > 0:
        raise InputError(f"lambda must be positive, got {mode}")
    return lam
