"""Noise schedule, v-parameterization algebra, ancestral sampling step and losses.

Timesteps are 1-based throughout: ``t`` in ``[1, T]`` and ``alpha_bar(0) = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: torch.Tensor  # (T,) float64
    alpha_bars: torch.Tensor  # (T,) float64

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t) -> torch.Tensor:
        """alpha_bar at 1-based ``t`` (tensor or int); index 0 gives 1."""
        t = torch.as_tensor(t, dtype=torch.long)
        padded = torch.cat([torch.ones(1, dtype=self.alpha_bars.dtype), self.alpha_bars])
        return padded[t]

    def check(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")
        return t


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return DiffusionSchedule(torch.from_numpy(betas), torch.from_numpy(alpha_bars))


def schedule_from_alpha_bars(alpha_bars) -> DiffusionSchedule:
    """Schedule with explicit alpha_bar rows (test hook for limiting cases)."""
    ab = torch.as_tensor(alpha_bars, dtype=torch.float64)
    prev = torch.cat([torch.ones(1, dtype=ab.dtype), ab[:-1]])
    betas = 1 - ab / prev.clamp_min(1e-300)
    return DiffusionSchedule(betas, ab)


def _bcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(like.dtype)
    return coef.reshape(coef.shape + (1,) * (like.dim() - coef.dim()))


def forward_noise(sched: DiffusionSchedule, x0, t, eps):
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match {tuple(x0.shape)}")
    t = sched.check(t)
    ab = _bcast(sched.alpha_bar(t), x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def v_target(sched: DiffusionSchedule, x0, eps, t):
    t = sched.check(t)
    ab = _bcast(sched.alpha_bar(t), x0)
    return ab.sqrt() * eps - (1 - ab).sqrt() * x0


def x0_from_v(sched, x_t, v, t):
    ab = _bcast(sched.alpha_bar(t), x_t)
    return ab.sqrt() * x_t - (1 - ab).sqrt() * v


def eps_from_v(sched, x_t, v, t):
    ab = _bcast(sched.alpha_bar(t), x_t)
    return (1 - ab).sqrt() * x_t + ab.sqrt() * v


def posterior(sched: DiffusionSchedule, x0, x_t, t, t_prev=None):
    """Mean and variance of q(x_{t_prev} | x_t, x0); ``t_prev`` defaults to t-1."""
    t = torch.as_tensor(t, dtype=torch.long)
    t_prev = t - 1 if t_prev is None else torch.as_tensor(t_prev, dtype=torch.long)
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    beta = 1 - ab_t / ab_p  # effective beta over the (possibly strided) jump
    c0 = _bcast(ab_p.sqrt() * beta / (1 - ab_t), x_t)
    ct = _bcast((1 - beta).sqrt() * (1 - ab_p) / (1 - ab_t), x_t)
    var = _bcast(beta * (1 - ab_p) / (1 - ab_t), x_t)
    return c0 * x0 + ct * x_t, var


def reverse_step(sched: DiffusionSchedule, x_t, v_hat, t, generator=None, deterministic=False,
                 t_prev=None, clamp=2.0):
    """One ancestral step x_t -> x_{t_prev} driven by a v prediction."""
    t = sched.check(t)
    x0_hat = x0_from_v(sched, x_t, v_hat, t)
    if clamp is not None:
        x0_hat = x0_hat.clamp(-clamp, clamp)
    t_prev = t - 1 if t_prev is None else torch.as_tensor(t_prev, dtype=torch.long)
    mean, var = posterior(sched, x0_hat, x_t, t, t_prev)
    noisy = t_prev >= 1  # the final jump to x_0 is noise-free
    if deterministic or not bool(torch.any(noisy)):
        return mean
    noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + _bcast(noisy.to(x_t.dtype), x_t) * var.sqrt() * noise


# -- losses -----------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    lambda_iou: float = 0.1
    iou_warmup_step: int = 1000
    sharpness: float = 50.0

    def __post_init__(self):
        if self.lambda_iou < 0:
            raise ValueError("lambda_iou must be non-negative")


def world_aabb(translation, half_size, cos_sin):
    """Half extents of the world AABB of boxes rotated about +y."""
    c = cos_sin[..., 0].abs()
    s = cos_sin[..., 1].abs()
    h = half_size.clamp_min(0)
    ex = c * h[..., 0] + s * h[..., 2]
    ez = s * h[..., 0] + c * h[..., 2]
    return torch.stack([ex, h[..., 1], ez], dim=-1)


def soft_pairwise_iou(translation, half_size, cos_sin, sharpness: float = 50.0):
    """(..., N, N) matrix of smooth AABB IoU between all box pairs."""
    ext = world_aabb(translation, half_size, cos_sin)
    lo, hi = translation - ext, translation + ext
    overlap = torch.minimum(hi.unsqueeze(-2), hi.unsqueeze(-3)) - torch.maximum(lo.unsqueeze(-2), lo.unsqueeze(-3))
    shorter = 2 * torch.minimum(ext.unsqueeze(-2), ext.unsqueeze(-3))
    # capped so the soft intersection never exceeds the smaller box
    inter = torch.minimum(F.softplus(overlap * sharpness) / sharpness, shorter).prod(-1)
    vol = (2 * ext).prod(-1)
    union = vol.unsqueeze(-1) + vol.unsqueeze(-2) - inter
    return inter / union.clamp_min(1e-12)


def pairwise_iou_loss(translation, half_size, cos_sin, mask=None, sharpness: float = 50.0):
    """Mean soft IoU over unordered pairs of boxes selected by ``mask``.

    Inputs are ``(N, k)`` or batched ``(B, N, k)``; pairs never cross batch rows.
    """
    iou = soft_pairwise_iou(translation, half_size, cos_sin, sharpness)
    n = iou.shape[-1]
    upper = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
    if mask is None:
        mask = torch.ones(iou.shape[:-1], dtype=torch.bool)
    pair = upper & mask.unsqueeze(-1) & mask.unsqueeze(-2)
    count = pair.sum()
    if count == 0:
        return iou.sum() * 0.0
    return (iou * pair).sum() / count


def split_geometry(rows, num_classes: int):
    """Slice translation, half-size and (cos, sin) blocks out of slot rows."""
    C = num_classes
    return rows[..., C:C + 3], rows[..., C + 3:C + 6], rows[..., C + 6:C + 8]


def training_loss(v_hat, v_true, x0_hat, loss_mask, box_mask, config: LossConfig,
                  num_classes: int, step: int | None = None):
    """Masked v-MSE plus the weighted overlap penalty on predicted clean boxes.

    ``loss_mask`` (B, N) selects slots entering the MSE; ``box_mask`` (B, M)
    selects real boxes in ``x0_hat`` (B, M, D) for the IoU term.
    """
    w = loss_mask.to(v_hat.dtype).unsqueeze(-1)
    denom = (w.sum() * v_hat.shape[-1]).clamp_min(1.0)
    mse = (((v_hat - v_true) ** 2) * w).sum() / denom
    use_iou = config.lambda_iou > 0 and (step is None or step >= config.iou_warmup_step)
    if use_iou:
        t, s, cs = split_geometry(x0_hat, num_classes)
        iou = pairwise_iou_loss(t, s, cs, box_mask, config.sharpness)
    else:
        iou = mse.new_zeros(())
    total = mse + config.lambda_iou * iou if use_iou else mse
    return {"total": total, "mse": mse, "iou": iou}
