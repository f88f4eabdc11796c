"""Rectified-flow kernels: interpolation, loss, one-step estimate, Euler sampler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import torch

from .errors import DomainError, NumericError, ShapeError


@dataclass
class FlowSample:
    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor
    xt: torch.Tensor


@dataclass
class TimeDistribution:
    kind: str = "uniform"
    mean: float = 0.0
    std: float = 1.0
    eps: float = 1e-5

    def sample(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        if self.kind == "uniform":
            t = torch.rand(n, generator=generator, dtype=torch.float64)
        elif self.kind == "logit_normal":
            t = torch.sigmoid(self.mean + self.std * torch.randn(n, generator=generator, dtype=torch.float64))
        else:
            raise DomainError(f"unknown time distribution {self.kind!r}")
        # keep strictly inside (0, 1)
        return t.clamp(self.eps, 1.0 - self.eps).float()


@dataclass
class GuidanceConfig:
    scale: float = 5.0
    steps: int = 50

    def __post_init__(self):
        if self.scale < 0:
            raise DomainError("guidance scale must be >= 0")
        if self.steps < 1:
            raise DomainError("guidance steps must be >= 1")


def _same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for x in tensors[1:]:
        if x.shape != shape:
            raise ShapeError(f"shape mismatch: {tuple(shape)} vs {tuple(x.shape)}")


def _broadcast_t(t, like: torch.Tensor) -> torch.Tensor | float:
    # scalar t passes through; a per-sample vector is reshaped to B x 1 x ...
    if isinstance(t, torch.Tensor) and t.ndim == 1 and like.ndim > 1:
        return t.to(like.dtype).view(-1, *([1] * (like.ndim - 1)))
    return t


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    """Point on the straight path, ``(1 - t) * x0 + t * x1``."""
    _same_shape(x0, x1)
    if not isinstance(t, torch.Tensor):
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"t={t} outside [0, 1]")
        # exact endpoints
        if t == 0.0:
            return x0.clone()
        if t == 1.0:
            return x1.clone()
    t = _broadcast_t(t, x0)
    return (1 - t) * x0 + t * x1


def make_flow_sample(x1: torch.Tensor, t: torch.Tensor, generator: torch.Generator | None = None) -> FlowSample:
    x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
    return FlowSample(x0, x1, t, interpolate(x0, x1, t))


def rf_loss(v_pred: torch.Tensor, x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    _same_shape(v_pred, x0, x1)
    return ((v_pred - (x1 - x0)) ** 2).mean()


def one_step_estimate(xt: torch.Tensor, v: torch.Tensor, t, form: str = "exact") -> torch.Tensor:
    """Clean-sample estimate from a noisy point and a velocity.

    ``form="exact"`` is ``xt + (1 - t) * v`` and recovers ``x1`` exactly for the
    straight-line velocity; ``form="uncorrected"`` drops the ``(1 - t)`` factor.
    """
    _same_shape(xt, v)
    if not (torch.isfinite(xt).all() and torch.isfinite(v).all()):
        raise NumericError("non-finite input to one_step_estimate")
    if form == "uncorrected":
        return xt + v
    if form != "exact":
        raise DomainError(f"unknown one-step form {form!r}")
    return xt + (1 - _broadcast_t(t, xt)) * v


def cfg_combine(v_uncond: torch.Tensor, v_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """``v_u + s (v_c - v_u)``, arranged so s = 0 and s = 1 return an input exactly."""
    _same_shape(v_uncond, v_cond)
    return (1.0 - scale) * v_uncond + scale * v_cond


VelocityFn = Callable[[torch.Tensor, float, Any], torch.Tensor]


def euler_sample(
    velocity_fn: VelocityFn,
    x0: torch.Tensor,
    guidance: GuidanceConfig | None = None,
    conditions: Any = None,
) -> torch.Tensor:
    """Integrate ``dx = v dt`` from t=0 to t=1 with explicit Euler and CFG.

    ``velocity_fn(x, t, None)`` is the unconditional branch. With ``scale == 1``
    it is never evaluated, so each step costs one call; otherwise two.
    """
    guidance = guidance or GuidanceConfig()
    x = x0
    dt = 1.0 / guidance.steps
    for k in range(guidance.steps):
        t = k * dt
        v_cond = velocity_fn(x, t, conditions)
        if v_cond.shape != x.shape:
            raise ShapeError(f"velocity shape {tuple(v_cond.shape)} != state shape {tuple(x.shape)}")
        if guidance.scale == 1.0:
            v = v_cond
        else:
            v_uncond = velocity_fn(x, t, None)
            if v_uncond.shape != x.shape:
                raise ShapeError(f"velocity shape {tuple(v_uncond.shape)} != state shape {tuple(x.shape)}")
            v = cfg_combine(v_uncond, v_cond, guidance.scale)
        x = x + dt * v
    return x
