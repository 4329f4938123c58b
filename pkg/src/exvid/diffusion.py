"""DDPM-style noise schedule, epsilon-prediction loss, and a deterministic
DDIM sampler.

The schedule is the classic linear-beta recipe: beta linearly spaced over
[1e-4, 2e-2] across N=1000 steps, alpha_bar the running product. Sampling
subsamples the schedule to `steps` points and walks them with eta=0, so a
fixed rng seed gives a bit-reproducible video.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, F32


class SampleError(RuntimeError):
    """Denoising produced a non-finite value."""


class NoiseSchedule:
    def __init__(self, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if steps < 2:
            raise ValueError(f"schedule needs at least 2 steps, got {steps}")
        if not 0.0 < beta_start < beta_end < 1.0:
            raise ValueError(f"betas must satisfy 0 < {beta_start} < {beta_end} < 1")
        self.steps = steps
        betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if not (np.all(np.diff(alpha_bars) < 0) and 0.0 < alpha_bars[-1] and alpha_bars[0] < 1.0):
            raise ValueError("alpha_bar must be strictly decreasing within (0, 1)")
        self.betas = betas.astype(F32)
        self.alphas = alphas.astype(F32)
        self.alpha_bars = alpha_bars.astype(F32)
        self.sqrt_alpha_bars = np.sqrt(alpha_bars).astype(F32)
        self.sqrt_one_minus_alpha_bars = np.sqrt(1.0 - alpha_bars).astype(F32)

    def _check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.steps):
            raise ValueError(f"timestep {t} outside [0, {self.steps})")
        return t.astype(np.int64)

    def add_noise(self, x0: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
        """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

        ``t`` is a scalar or one timestep per leading batch element.
        """
        t = self._check_t(t)
        if x0.shape != eps.shape:
            raise ValueError(f"eps shape {eps.shape} must match x0 shape {x0.shape}")
        lead = t.shape + (1,) * (x0.ndim - t.ndim)
        a = self.sqrt_alpha_bars[t].reshape(lead)
        b = self.sqrt_one_minus_alpha_bars[t].reshape(lead)
        return (a * x0.astype(F32) + b * eps.astype(F32)).astype(F32)


def training_loss(model, batch: dict, rng: np.random.Generator,
                  schedule: NoiseSchedule | None = None,
                  grad_checkpoint: bool = False) -> Tensor:
    """Epsilon-prediction MSE on one batch.

    Draw order is fixed (timesteps, then noise) so a seeded generator gives
    the same loss bit for bit.
    """
    schedule = schedule or NoiseSchedule()
    video = batch["video"]
    first_frame = batch["first_frame"]
    x0 = video.data if isinstance(video, Tensor) else np.asarray(video, dtype=F32)
    if x0.ndim != 5:
        raise T.ShapeError(f"batch video must be [B,T,C,H,W], got {x0.shape}")
    t = rng.integers(0, schedule.steps, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape, dtype=F32)
    x_t = schedule.add_noise(x0, eps, t)
    pred = model.forward(Tensor(x_t), _as_tensor(first_frame), t, grad_checkpoint=grad_checkpoint)
    err = T.sub(pred, Tensor(eps))
    return T.reduce_mean(T.mul(err, err))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=F32))


def sample(model, first_frame, frames: int, steps: int, rng: np.random.Generator,
           schedule: NoiseSchedule | None = None) -> Tensor:
    """DDIM (eta=0) ancestral-free walk from pure noise down to a video.

    Runs exactly `steps` model evaluations over a linearly subsampled
    timestep grid from N-1 down to 0.
    """
    schedule = schedule or NoiseSchedule()
    if not 1 <= steps <= schedule.steps:
        raise ValueError(f"steps={steps} must lie in [1, {schedule.steps}]")
    if frames != model.frame_capacity:
        raise T.ShapeError(
            f"frame-capacity mismatch: requested {frames} frames, model capacity is {model.frame_capacity}"
        )
    ff = _as_tensor(first_frame)
    if ff.ndim != 4:
        raise T.ShapeError(f"first_frame must be [B,C,H,W], got {ff.shape}")
    b, cv, h, w = ff.shape
    # descending linspace keeps exactly `steps` grid points (spacing >= 1 for
    # steps <= N, so rounding never collides)
    grid = np.linspace(schedule.steps - 1, 0, steps).round().astype(np.int64)
    x = rng.standard_normal((b, frames, cv, h, w), dtype=F32)
    with T.no_grad():
        for i, t in enumerate(grid):
            eps_hat = model.forward(Tensor(x), ff, np.full(b, t), grad_checkpoint=False).data
            if not np.all(np.isfinite(eps_hat)):
                raise SampleError(f"non-finite prediction at denoising step {i} (t={int(t)})")
            sa = schedule.sqrt_alpha_bars[t]
            sb = schedule.sqrt_one_minus_alpha_bars[t]
            x0_hat = (x - sb * eps_hat) / sa
            if i + 1 < len(grid):
                tn = grid[i + 1]
                x = schedule.sqrt_alpha_bars[tn] * x0_hat + schedule.sqrt_one_minus_alpha_bars[tn] * eps_hat
            else:
                x = x0_hat
            if not np.all(np.isfinite(x)):
                raise SampleError(f"non-finite frame state after denoising step {i} (t={int(t)})")
    return Tensor(x.astype(F32))
