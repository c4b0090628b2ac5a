"""Online training loop: pretraining, per-batch bound minimization and stream folding.

Gradients of the online objectives come from torch autograd; pretraining
uses the analytic marginal-likelihood gradient assembled from
:func:`opacgp.kernels.kernel_grads`.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import serialize
from .errors import InputError, NumericalError
from .exact_gp import log_marginal_likelihood, log_marginal_likelihood_grad
from .kernels import KernelParams, as_points, as_tensor, kernel_matrix, psd_cholesky, tri_solve
from .optim import AdamState, adam_update
from .pacbayes import BatchPredictions, BoundReport, LossSpec, expected_loss, resolve_lambda, test_bound, train_objective
from .streaming import (
    PriorSnapshot,
    VariationalState,
    default_inducing,
    kl_new_old,
    predictive,
    snapshot,
    sparse_posterior_state,
)

log = logging.getLogger(__name__)

OBJECTIVES = ("pacbayes", "baseline_nll")
HYPER_KEYS = ("log_lengthscales", "log_signal_variance", "noise_raw")
VARIATIONAL_KEYS = ("Z", "v", "W_raw")
PARAM_KEYS = HYPER_KEYS + VARIATIONAL_KEYS

CHECKPOINT_FORMAT = "opacgp-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "pacbayes"
    lr_hyper: float = 0.1
    lr_variational: float = 0.01
    inner_steps_online: int = 1
    pretrain_steps: int = 200
    delta: float = 0.05
    lambda_mode: str | float = "1/m"
    loss: LossSpec = field(default_factory=lambda: LossSpec.from_epsilon2("exp", 0.01))
    num_inducing: int = 20
    seed: int = 0
    init_lengthscale: float = 1.0
    init_signal_variance: float = 1.0
    init_noise_variance: float = 0.1
    kzz_jitter: float = 1e-4
    whiten: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise InputError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not (self.lr_hyper > 0 and self.lr_variational > 0):
            raise InputError("learning rates must be positive")
        if self.inner_steps_online < 1:
            raise InputError("inner_steps_online must be at least 1")
        if self.pretrain_steps < 0:
            raise InputError("pretrain_steps must be nonnegative")
        if self.num_inducing < 1:
            raise InputError("need at least one inducing point")
        if not 0 < self.delta <= 1:
            raise InputError("delta must lie in (0, 1]")
        resolve_lambda(self.lambda_mode, 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"] = {"kind": self.loss.kind.value, "epsilon": self.loss.epsilon}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossSpec(**d["loss"])
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    n_seen: int
    train_mse: float
    test_mse: float
    empirical_term: float
    kl_term: float
    constant_term: float
    train_bound_total: float
    test_bound: float
    wall_time: float
    batch_index: int = -1
    prequential_loss: float = 0.0
    cumulative_empirical: float = 0.0
    heldout_loss: float = math.nan
    cumulative_heldout: float = math.nan


TRACE_COLUMNS = (
    "step", "n_seen", "train_mse", "test_mse", "empirical_term", "kl_term",
    "constant_term", "train_bound", "test_bound", "wall_time",
)


def record_row(rec: StepRecord) -> list:
    return [
        rec.step, rec.n_seen, rec.train_mse, rec.test_mse, rec.empirical_term, rec.kl_term,
        rec.constant_term, rec.train_bound_total, rec.test_bound, rec.wall_time,
    ]


class StepFailed(NumericalError):
    """An online step hit a numerical failure; the state was rolled back."""


# -- parameter plumbing ------------------------------------------------------
#
# The optimizer works on unconstrained "raw" tensors. By default v = m_u and
# W = S_factor; with ``whiten`` they are m_u = L v and S_factor = L W for
# L = chol(K_ZZ). W has a softplus diagonal and the noise variance is
# NOISE_FLOOR + exp(noise_raw).

NOISE_FLOOR = 1e-4


def _softplus_inv(x: torch.Tensor) -> torch.Tensor:
    return x + torch.log(-torch.expm1(-x))


def state_to_raw(state: VariationalState, whiten: bool = False) -> dict[str, torch.Tensor]:
    s = state.detach()
    p = s.params
    if whiten:
        Lz = s.kzz_cholesky()
        mean = tri_solve(Lz, s.m_u[:, None])[:, 0]
        W = torch.tril(tri_solve(Lz, s.S_factor))
    else:
        mean, W = s.m_u, s.S_factor
    excess = torch.clamp(p.noise_variance - NOISE_FLOOR, min=1e-12)
    return {
        "log_lengthscales": p.log_lengthscales,
        "log_signal_variance": p.log_signal_variance,
        "noise_raw": torch.log(excess),
        "Z": s.Z,
        "v": mean,
        "W_raw": torch.tril(W, -1) + torch.diag(_softplus_inv(W.diagonal())),
    }


def raw_params(raw: dict[str, torch.Tensor], family="rbf") -> KernelParams:
    log_noise = torch.log(NOISE_FLOOR + torch.exp(raw["noise_raw"]))
    return KernelParams(raw["log_lengthscales"], raw["log_signal_variance"], log_noise, family)


def raw_to_state(raw: dict[str, torch.Tensor], family="rbf", jitter: float = 0.0,
                 whiten: bool = False) -> VariationalState:
    params = raw_params(raw, family)
    Z = raw["Z"]
    W_raw = raw["W_raw"]
    W = torch.tril(W_raw, -1) + torch.diag(F.softplus(W_raw.diagonal()))
    if not whiten:
        return VariationalState(Z, raw["v"], W, params, jitter)
    Lz = psd_cholesky(kernel_matrix(params, Z, Z), min_jitter=jitter).L
    return VariationalState(Z, Lz @ raw["v"], Lz @ W, params, jitter)


def flatten_raw(raw: dict[str, torch.Tensor]) -> np.ndarray:
    """Free coordinates as one vector (only the lower triangle of ``W_raw``)."""
    M = raw["v"].shape[0]
    rows, cols = torch.tril_indices(M, M)
    parts = [raw[k].detach().reshape(-1) for k in PARAM_KEYS if k != "W_raw"]
    parts.append(raw["W_raw"].detach()[rows, cols])
    return torch.cat(parts).numpy().copy()


def unflatten_raw(vec, like: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    vec = as_tensor(vec)
    out, i = {}, 0
    for k in PARAM_KEYS:
        if k == "W_raw":
            continue
        n = like[k].numel()
        out[k] = vec[i : i + n].reshape(like[k].shape)
        i += n
    M = like["v"].shape[0]
    rows, cols = torch.tril_indices(M, M)
    W = torch.zeros(M, M, dtype=vec.dtype)
    W[rows, cols] = vec[i:]
    out["W_raw"] = W
    return out


# -- objectives ----------------------------------------------------------------

def bound_report(state: VariationalState, prior: PriorSnapshot, X, y, n_seen: int, cfg: TrainConfig) -> BoundReport:
    """The training-bound decomposition for ``state`` on one batch."""
    X = as_points(X, state.params.dim)
    y = as_tensor(y).reshape(-1)
    pred = predictive(state, X, full_cov=False)
    kl = kl_new_old(state, prior)
    lam = resolve_lambda(cfg.lambda_mode, n_seen)
    return train_objective(BatchPredictions(y, pred.mean, pred.var), kl, n_seen, lam, cfg.delta, cfg.loss)


def baseline_objective(state: VariationalState, prior: PriorSnapshot, X, y) -> torch.Tensor:
    """Negative log predictive likelihood (noise added) plus the KL to the prior."""
    X = as_points(X, state.params.dim)
    y = as_tensor(y).reshape(-1)
    pred = predictive(state, X, full_cov=False)
    var = pred.var + state.params.noise_variance
    nll = 0.5 * (torch.log(2 * math.pi * var) + (y - pred.mean) ** 2 / var)
    return torch.cumsum(nll, 0)[-1] + kl_new_old(state, prior)


def objective_value(raw, prior, X, y, n_seen, cfg: TrainConfig, family="rbf") -> torch.Tensor:
    """Scalar minimized by an online step for ``cfg.objective``."""
    state = raw_to_state(raw, family, cfg.kzz_jitter, cfg.whiten)
    if cfg.objective == "pacbayes":
        return bound_report(state, prior, X, y, n_seen, cfg).total
    return baseline_objective(state, prior, X, y)


def objective_gradient(raw, prior, X, y, n_seen, cfg: TrainConfig, family="rbf"):
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in raw.items()}
    value = objective_value(leaves, prior, X, y, n_seen, cfg, family)
    grads = torch.autograd.grad(value, [leaves[k] for k in PARAM_KEYS], allow_unused=True)
    out = {}
    for k, g in zip(PARAM_KEYS, grads):
        out[k] = torch.zeros_like(raw[k]) if g is None else g
    return value.detach(), out


# -- trainer ----------------------------------------------------------------------

class OnlineTrainer:
    """Single-writer online learner holding the variational state and Adam moments."""

    def __init__(self, cfg: TrainConfig, test_set: tuple[np.ndarray, np.ndarray] | None = None,
                 clock: Callable[[], float] | None = time.perf_counter):
        self.cfg = cfg
        self.clock = clock
        self.test_set = None
        if test_set is not None and len(test_set[1]):
            self.test_set = (np.asarray(test_set[0], dtype=np.float64), np.asarray(test_set[1], dtype=np.float64))
        self.raw: dict[str, torch.Tensor] | None = None
        self.family = "rbf"
        self.opt = AdamState()
        self.step_index = 0
        self.n_seen = 0
        self.batches_consumed = 0
        self.cumulative_empirical = 0.0
        self.cumulative_heldout = 0.0
        self.seen_X: np.ndarray | None = None
        self.seen_y: np.ndarray | None = None
        self.pretrain_trace: list[float] = []
        self.failures: list[tuple[int, str]] = []

    # state access
    @property
    def state(self) -> VariationalState:
        if self.raw is None:
            raise InputError("trainer has not been pretrained")
        return raw_to_state(self.raw, self.family, self.cfg.kzz_jitter, self.cfg.whiten)

    @property
    def lrs(self) -> dict[str, float]:
        return {k: (self.cfg.lr_hyper if k in HYPER_KEYS else self.cfg.lr_variational) for k in PARAM_KEYS}

    def pretrain(self, X, y) -> VariationalState:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size == 0:
            raise InputError("pretraining slice is empty")
        cfg = self.cfg
        if cfg.num_inducing > y.size:
            warnings.warn(f"{cfg.num_inducing} inducing points for a pretraining slice of {y.size} rows", stacklevel=2)
        Xt, yt = torch.from_numpy(X), torch.from_numpy(y)
        D = X.shape[1]
        params = KernelParams.create(
            torch.full((D,), cfg.init_lengthscale, dtype=torch.float64),
            cfg.init_signal_variance,
            cfg.init_noise_variance,
        )
        hyper = {
            "log_lengthscales": params.log_lengthscales,
            "log_signal_variance": params.log_signal_variance,
            "noise_raw": torch.log(torch.clamp(params.noise_variance - NOISE_FLOOR, min=1e-12)),
        }
        opt = AdamState()
        self.pretrain_trace = [float(log_marginal_likelihood(params, Xt, yt))]
        for _ in range(cfg.pretrain_steps):
            g = log_marginal_likelihood_grad(params, Xt, yt)
            # chain rule through noise = floor + exp(noise_raw)
            dnoise = g["log_noise_variance"] * torch.exp(hyper["noise_raw"]) / params.noise_variance
            grads = {
                "log_lengthscales": torch.stack([g[f"log_lengthscale_{d}"] for d in range(D)]),
                "log_signal_variance": g["log_signal_variance"],
                "noise_raw": dnoise,
            }
            # ascend the likelihood
            hyper = adam_update(opt, hyper, {k: -v for k, v in grads.items()}, cfg.lr_hyper)
            params = raw_params(hyper)
            self.pretrain_trace.append(float(log_marginal_likelihood(params, Xt, yt)))
        Z = default_inducing(Xt, cfg.num_inducing)
        state = sparse_posterior_state(params, Z, Xt, yt, jitter=cfg.kzz_jitter)
        self.raw = state_to_raw(state, cfg.whiten)
        self.opt = AdamState()
        self.n_seen = y.size
        self.seen_X, self.seen_y = X.copy(), y.copy()
        return self.state

    def online_step(self, X, y, n_seen: int) -> BoundReport:
        """Minimize the configured objective on one batch, rolling back on failure."""
        cfg = self.cfg
        prior = snapshot(self.state, self.step_index)
        saved_raw = {k: v.clone() for k, v in self.raw.items()}
        saved_opt = self.opt.copy()
        try:
            for _ in range(cfg.inner_steps_online):
                value, grads = objective_gradient(self.raw, prior, X, y, n_seen, cfg, self.family)
                if not math.isfinite(float(value)) or not all(bool(torch.isfinite(g).all()) for g in grads.values()):
                    raise NumericalError("objective or gradient is not finite")
                self.raw = adam_update(self.opt, self.raw, grads, self.lrs)
            with torch.no_grad():
                report = bound_report(self.state, prior, X, y, n_seen, cfg)
            if not all(math.isfinite(v) for v in report.floats().values()):
                raise NumericalError("bound report is not finite")
        except (NumericalError, InputError, RuntimeError) as exc:
            self.raw, self.opt = saved_raw, saved_opt
            raise StepFailed(f"online step aborted and rolled back: {exc}") from exc
        return report

    def _mse(self, X, y) -> float:
        with torch.no_grad():
            mean = predictive(self.state, torch.from_numpy(X), full_cov=False).mean.numpy()
        return float(np.mean((mean - y) ** 2))

    def _expected_loss_mean(self, X, y) -> float:
        with torch.no_grad():
            pred = predictive(self.state, torch.from_numpy(X), full_cov=False)
            return float(expected_loss(self.cfg.loss, torch.from_numpy(y), pred.mean, pred.var).mean())

    def step(self, X, y, batch_index: int = -1) -> StepRecord:
        """Process one batch: score it with the current model, then train on it."""
        if self.raw is None:
            raise InputError("pretrain before streaming")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size == 0:
            raise InputError("batch is empty")
        t0 = self.clock() if self.clock else 0.0
        self.batches_consumed += 1
        with torch.no_grad():
            pred = predictive(self.state, torch.from_numpy(X), full_cov=False)
            prequential = expected_loss(self.cfg.loss, torch.from_numpy(y), pred.mean, pred.var)
            prequential = float(torch.cumsum(prequential, 0)[-1])
        n_seen = self.n_seen + y.size
        saved_raw, saved_opt = dict(self.raw), self.opt.copy()
        report = self.online_step(X, y, n_seen)
        if not math.isfinite(prequential):
            self.raw, self.opt = saved_raw, saved_opt
            raise StepFailed("prequential loss is not finite; update rolled back")

        self.step_index += 1
        self.n_seen = n_seen
        self.seen_X = np.concatenate([self.seen_X, X])
        self.seen_y = np.concatenate([self.seen_y, y])
        self.cumulative_empirical += prequential
        f = report.floats()
        test_mse = heldout = math.nan
        if self.test_set is not None:
            test_mse = self._mse(*self.test_set)
            heldout = self._expected_loss_mean(*self.test_set)
            self.cumulative_heldout += heldout * y.size
        rec = StepRecord(
            step=self.step_index,
            n_seen=n_seen,
            train_mse=self._mse(self.seen_X, self.seen_y),
            test_mse=test_mse,
            empirical_term=f["empirical_term"],
            kl_term=f["kl_term"],
            constant_term=f["constant_term"],
            train_bound_total=f["total"],
            test_bound=test_bound(self.cumulative_empirical, n_seen, report.lam, report.delta, report.K),
            wall_time=(self.clock() - t0) if self.clock else 0.0,
            batch_index=batch_index,
            prequential_loss=prequential,
            cumulative_empirical=self.cumulative_empirical,
            heldout_loss=heldout,
            cumulative_heldout=self.cumulative_heldout if self.test_set is not None else math.nan,
        )
        return rec

    def run(self, stream, start: int | None = None) -> list[StepRecord]:
        """Fold :meth:`step` over the stream's batches; failed batches are logged and skipped."""
        records = []
        first = self.batches_consumed if start is None else start
        for k in range(first, len(stream.batches)):
            Xb, yb = stream.batches[k]
            if self.raw is None:
                raise InputError("pretrain before streaming")
            try:
                records.append(self.step(Xb, yb, batch_index=k))
            except StepFailed as exc:
                log.warning("batch %d skipped: %s", k, exc)
                self.failures.append((k, str(exc)))
        return records

    # checkpointing
    def checkpoint(self) -> bytes:
        arrays = {f"raw.{k}": v.numpy() for k, v in self.raw.items()}
        for k in self.opt.m:
            arrays[f"adam.m.{k}"] = self.opt.m[k].numpy()
            arrays[f"adam.v.{k}"] = self.opt.v[k].numpy()
        arrays["seen_X"] = self.seen_X
        arrays["seen_y"] = self.seen_y
        arrays["cumulative"] = np.array([self.cumulative_empirical, self.cumulative_heldout])
        meta = {
            "config": self.cfg.to_dict(),
            "family": self.family,
            "adam_t": self.opt.t,
            "step_index": self.step_index,
            "n_seen": self.n_seen,
            "batches_consumed": self.batches_consumed,
            "failures": self.failures,
        }
        return serialize.pack(CHECKPOINT_FORMAT, CHECKPOINT_VERSION, meta, arrays)

    @classmethod
    def restore(cls, blob: bytes, test_set=None, clock=time.perf_counter) -> "OnlineTrainer":
        meta, a = serialize.unpack(blob, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
        tr = cls(TrainConfig.from_dict(meta["config"]), test_set, clock)
        tr.family = meta["family"]
        tr.raw = {k: torch.from_numpy(a[f"raw.{k}"]) for k in PARAM_KEYS}
        tr.opt = AdamState(t=meta["adam_t"])
        for k in PARAM_KEYS:
            if f"adam.m.{k}" in a:
                tr.opt.m[k] = torch.from_numpy(a[f"adam.m.{k}"])
                tr.opt.v[k] = torch.from_numpy(a[f"adam.v.{k}"])
        tr.seen_X, tr.seen_y = a["seen_X"], a["seen_y"]
        tr.cumulative_empirical, tr.cumulative_heldout = (float(v) for v in a["cumulative"])
        tr.step_index = meta["step_index"]
        tr.n_seen = meta["n_seen"]
        tr.batches_consumed = meta["batches_consumed"]
        tr.failures = [tuple(f) for f in meta["failures"]]
        return tr


def pretrain(X, y, cfg: TrainConfig) -> VariationalState:
    tr = OnlineTrainer(cfg)
    return tr.pretrain(X, y)


def online_step(state: VariationalState, batch, cfg: TrainConfig, n_seen: int,
                opt_state: AdamState | None = None) -> tuple[VariationalState, BoundReport]:
    """Functional form of one online step. ``opt_state`` (if given) is advanced in place."""
    tr = OnlineTrainer(cfg, clock=None)
    tr.raw = state_to_raw(state, cfg.whiten)
    tr.family = state.params.family.value
    if opt_state is not None:
        tr.opt = opt_state
    X, y = batch
    report = tr.online_step(np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64), n_seen)
    if opt_state is not None:
        opt_state.__dict__.update(tr.opt.__dict__)
    return tr.state, report


def run_stream(stream, cfg: TrainConfig, test_set=None, clock=time.perf_counter,
               trainer: OnlineTrainer | None = None) -> list[StepRecord]:
    """Pretrain on the stream's first slice, then run one online step per batch."""
    tr = trainer if trainer is not None else OnlineTrainer(cfg, test_set, clock)
    tr.pretrain(*stream.pretrain)
    return tr.run(stream)
