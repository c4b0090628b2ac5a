"""Adam and a central finite-difference gradient used as a test oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

from .errors import NumericalError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.beta1, self.beta2, self.eps, self.t,
            {k: x.clone() for k, x in self.m.items()},
            {k: x.clone() for k, x in self.v.items()},
        )


def adam_update(opt_state: AdamState, params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
                lr: float | Mapping[str, float]) -> dict[str, torch.Tensor]:
    """One bias-corrected Adam step. Moments in ``opt_state`` are updated in place.

    ``lr`` may be a single rate or a per-parameter mapping. Returns new
    parameter tensors; the inputs are left untouched.
    """
    opt_state.t += 1
    t = opt_state.t
    b1, b2 = opt_state.beta1, opt_state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads[name].detach()
        if name not in opt_state.m:
            opt_state.m[name] = torch.zeros_like(g)
            opt_state.v[name] = torch.zeros_like(g)
        m = opt_state.m[name] = b1 * opt_state.m[name] + (1.0 - b1) * g
        v = opt_state.v[name] = b2 * opt_state.v[name] + (1.0 - b2) * g * g
        rate = lr[name] if isinstance(lr, Mapping) else lr
        out[name] = p.detach() - rate * (m / bc1) / (torch.sqrt(v / bc2) + opt_state.eps)
    return out


def finite_diff_grad(objective: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate."""
    x = np.array(x, dtype=np.float64).reshape(-1)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(objective(xp))
        fm = float(objective(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"objective is not finite when perturbing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad
