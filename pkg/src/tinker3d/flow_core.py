"""Rectified-flow primitives: linear path, velocity target, masked loss, sampler.

Conventions, shared by both trainers:
- the path runs from data at t=0 to noise at t=1: x_t = (1-t)*x0 + t*eps;
- the regression target is the constant path velocity u = eps - x0;
- sampling integrates dx/dt = v(x, t) backward from t=1 to t=0 with explicit
  Euler steps, so a perfectly learned field recovers x0 exactly.

Conditioning tensors are never noised anywhere in this package; only the
state handed to interpolate() carries t-dependence.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor

__all__ = [
    "FlowBatch",
    "interpolate",
    "velocity_target",
    "fm_loss",
    "sample_t",
    "euler_sample",
]


@dataclass
class FlowBatch:
    """One training tuple: clean data, noise, timestep, and the loss mask."""

    x0: Tensor
    eps: Tensor
    t: Tensor
    loss_mask: Tensor

    def __post_init__(self):
        if self.x0.shape != self.eps.shape:
            raise ValueError(f"x0/eps shape mismatch: {self.x0.shape} vs {self.eps.shape}")
        if torch.any(self.t < 0) or torch.any(self.t > 1):
            raise ValueError("t must lie in [0,1]")
        if self.loss_mask.dtype != torch.bool:
            raise ValueError("loss_mask must be boolean")


def _broadcast_t(t, x0: Tensor) -> Tensor:
    if not torch.is_tensor(t):
        t = torch.as_tensor(t, dtype=x0.dtype)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError(f"t must lie in [0,1], got {t}")
    if t.ndim == 0:
        return t
    if t.ndim == 1:
        if t.shape[0] != x0.shape[0]:
            raise ValueError(f"per-batch t length {t.shape[0]} != batch {x0.shape[0]}")
        return t.reshape(-1, *([1] * (x0.ndim - 1)))
    raise ValueError("t must be a scalar or a 1-d batch tensor")


def interpolate(x0: Tensor, eps: Tensor, t) -> Tensor:
    """Linear path state x_t = (1-t)*x0 + t*eps; exact at both endpoints."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0/eps shape mismatch: {x0.shape} vs {eps.shape}")
    t = _broadcast_t(t, x0)
    return (1.0 - t) * x0 + t * eps


def velocity_target(x0: Tensor, eps: Tensor) -> Tensor:
    """Path velocity u = eps - x0; constant in t for the linear path."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0/eps shape mismatch: {x0.shape} vs {eps.shape}")
    return eps - x0


def fm_loss(pred_v: Tensor, target_v: Tensor, loss_mask: Tensor) -> Tensor:
    """Mean squared velocity error over masked elements only.

    The mean is taken over masked elements, so the magnitude is invariant to
    sequence length. An empty mask yields 0 with a warning (and keeps the
    autograd graph alive).
    """
    if pred_v.shape != target_v.shape:
        raise ValueError(f"pred/target shape mismatch: {pred_v.shape} vs {target_v.shape}")
    if loss_mask.dtype != torch.bool:
        raise ValueError("loss_mask must be boolean")
    mask = torch.broadcast_to(loss_mask, pred_v.shape)
    if not mask.any():
        warnings.warn("fm_loss called with an empty mask; returning 0", stacklevel=2)
        return pred_v.sum() * 0.0
    diff = pred_v - target_v
    return (diff * diff)[mask].mean()


def sample_t(batch_size: int, seed: int) -> Tensor:
    """I.i.d. Uniform(0,1) timesteps from an explicit seed."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(batch_size, generator=gen)


def euler_sample(
    velocity_fn: Callable[[Tensor, float, object], Tensor],
    shape: tuple[int, ...],
    conditioning,
    n_steps: int,
    seed: int,
) -> Tensor:
    """Integrate the learned velocity field from seeded noise down to t=0.

    x starts as standard normal noise at t=1; each step evaluates the field
    at the current (left) endpoint: x <- x - dt * velocity_fn(x, t, cond).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=gen)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        t = 1.0 - k * dt
        x = x - dt * velocity_fn(x, t, conditioning)
    return x
