"""Rectified-flow primitives: straight-line interpolation, its velocity,
the velocity regression loss and a fixed-grid Euler sampler.

Works on numpy arrays and torch tensors alike; the sampler is torch-only.
"""

import math

import numpy as np
import torch

from .errors import DimensionError, DomainError, NumericError
from .rng import torch_generator


def _check_same_shape(a, b, what="inputs"):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_array(x):
    if isinstance(x, (torch.Tensor, np.ndarray)):
        return x
    return np.asarray(x, dtype=np.float64)


def _check_time(t):
    if isinstance(t, torch.Tensor):
        bad = bool(((t < 0) | (t > 1) | torch.isnan(t)).any())
    else:
        tt = np.asarray(t, dtype=np.float64)
        bad = bool(((tt < 0) | (tt > 1) | np.isnan(tt)).any())
    if bad:
        raise DomainError(f"time outside [0, 1]: {t}")


def _broadcast_time(t, x):
    # per-sample times (shape (B,)) broadcast over the trailing dims of x
    if isinstance(t, torch.Tensor) and t.ndim == 1 and x.ndim > 1:
        return t.reshape((-1,) + (1,) * (x.ndim - 1))
    if isinstance(t, np.ndarray) and t.ndim == 1 and x.ndim > 1:
        return t.reshape((-1,) + (1,) * (x.ndim - 1))
    return t


def interpolate(x0, x1, t):
    """Point on the straight path at time ``t``: ``(1-t)*x0 + t*x1``."""
    x0, x1 = _as_array(x0), _as_array(x1)
    _check_same_shape(x0, x1)
    _check_time(t)
    t = _broadcast_time(t, x0)
    return (1 - t) * x0 + t * x1


def target_velocity(x0, x1):
    x0, x1 = _as_array(x0), _as_array(x1)
    _check_same_shape(x0, x1)
    return x1 - x0


def fm_loss(vel_pred, vel_target):
    """Mean squared velocity error over all elements."""
    vel_pred, vel_target = _as_array(vel_pred), _as_array(vel_target)
    _check_same_shape(vel_pred, vel_target, "prediction and target")
    diff = vel_pred - vel_target
    return (diff * diff).mean()


def time_grid(steps: int) -> list[float]:
    """Uniform times 1, 1-dt, ..., dt visited by the sampler."""
    return [1.0 - i / steps for i in range(steps)]


@torch.no_grad()
def euler_sample(field, context, steps: int, seed=0, shape=None, start=None, dtype=None):
    """Integrate ``dx/dt = v(x, c, t)`` from noise at t=1 down to t=0.

    ``field`` is any callable ``field(x, context, t) -> velocity``.  ``seed``
    may be a single integer or a sequence of integers, in which case one
    start point is drawn per seed and the result is batched along dim 0.
    ``start`` overrides the seeded draw.  The output is clamped to [0, 1]
    once, after the last step.
    """
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    if start is None:
        if shape is None:
            shape = getattr(field, "image_shape", None)
            if shape is None:
                raise DimensionError("sample shape unknown; pass shape= or start=")
        dtype = dtype or getattr(field, "dtype", torch.float32)
        seeds = [seed] if isinstance(seed, int) else list(seed)
        draws = [torch.randn(tuple(shape), generator=torch_generator(s, "euler-start"),
                             dtype=torch.float64).to(dtype) for s in seeds]
        x = draws[0] if isinstance(seed, int) else torch.stack(draws)
    else:
        x = start.clone() if isinstance(start, torch.Tensor) else torch.as_tensor(start)
    dt = 1.0 / steps
    batch = x.shape[0] if (not isinstance(seed, int) and start is None) else None
    for i, t in enumerate(time_grid(steps)):
        tt = torch.full((batch,), t, dtype=x.dtype) if batch is not None else t
        v = field(x, context, tt)
        if not bool(torch.isfinite(v).all()):
            raise NumericError(f"non-finite velocity at sampler step {i}", step=i, t=t)
        x = x - dt * v
    return x.clamp(0.0, 1.0)


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0):
    """Standard transformer sinusoid features of a (batched) scalar time."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
