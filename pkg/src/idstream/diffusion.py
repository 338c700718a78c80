"""Noise schedule, forward noising, DDIM stepping, and the stub latent codec.

Latents are channel-first ``[c, h, w]`` tensors (batched as ``[b, c, h, w]``).
Timesteps are 1-based: ``t`` in ``[1, T]`` indexes the schedule tables, and
``alpha_bar(0) == 1`` by convention so stepping to ``t_prev = 0`` is defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import torch
from torch import Tensor

from .errors import InputError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: int
    beta: Tensor  # [T], beta[i] is beta_{i+1}
    alpha_bar: Tensor  # [T], cumulative product of (1 - beta)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for 1-based t, with alpha_bar(0) = 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.timesteps:
            raise InputError(f"timestep {t} outside [0, {self.timesteps}]")
        return float(self.alpha_bar[t - 1])


def make_noise_schedule(timesteps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta interpolation with cumulative-product alpha_bar."""
    if timesteps < 2:
        raise InputError(f"need at least 2 timesteps, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InputError(f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})")
    beta = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
    alpha_bar = torch.cumprod(1.0 - beta, dim=0)
    return NoiseSchedule(timesteps=timesteps, beta=beta, alpha_bar=alpha_bar)


def q_sample(z0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Forward noising: sqrt(a_bar_t) * z0 + sqrt(1 - a_bar_t) * eps."""
    if z0.shape != eps.shape:
        raise ShapeError(f"latent/noise shape mismatch: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    if not 1 <= t <= sched.timesteps:
        raise InputError(f"timestep {t} outside [1, {sched.timesteps}]")
    a = sched.alpha_bar_at(t)
    return (a**0.5) * z0 + ((1.0 - a) ** 0.5) * eps


def ddim_step(z_t: Tensor, eps_hat: Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> Tensor:
    """One deterministic (eta = 0) DDIM update from t to t_prev."""
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"latent/noise shape mismatch: {tuple(z_t.shape)} vs {tuple(eps_hat.shape)}")
    if not (t > t_prev >= 0):
        raise InputError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    a_t = sched.alpha_bar_at(t)
    a_prev = sched.alpha_bar_at(t_prev)
    x0_hat = (z_t - ((1.0 - a_t) ** 0.5) * eps_hat) / (a_t**0.5)
    return (a_prev**0.5) * x0_hat + ((1.0 - a_prev) ** 0.5) * eps_hat


def ddim_timestep_pairs(sched: NoiseSchedule, steps: int) -> List[Tuple[int, int]]:
    """Evenly spaced (t, t_prev) pairs descending from T to 0."""
    if steps < 1:
        raise InputError(f"need at least 1 sampling step, got {steps}")
    if steps > sched.timesteps:
        raise InputError(f"cannot take {steps} distinct steps over {sched.timesteps} timesteps")
    grid = torch.linspace(sched.timesteps, 0, steps + 1).round().to(torch.long).tolist()
    pairs = []
    for t, t_prev in zip(grid[:-1], grid[1:]):
        if t <= t_prev:  # guard against rounding collisions on tiny schedules
            raise InputError(f"degenerate step grid for steps={steps}, T={sched.timesteps}")
        pairs.append((int(t), int(t_prev)))
    return pairs


# ---------------------------------------------------------------------------
# stub latent codec: average-pool downscale plus a fixed channel lift
# ---------------------------------------------------------------------------

LATENT_CHANNELS = 4


def encode_latent(img: Tensor, downscale: int = 2) -> Tensor:
    """[h, w, 3] image -> [4, h/d, w/d] latent.

    Channels 0..2 carry the average-pooled RGB planes; channel 3 carries the
    pooled luminance mean. Only the RGB planes participate in decoding, which
    makes the codec an exact right-inverse on the pooled grid.
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"image must be [H, W, 3], got {tuple(img.shape)}")
    h, w = img.shape[0], img.shape[1]
    if h % downscale or w % downscale:
        raise InputError(f"image sides {h}x{w} not divisible by downscale {downscale}")
    chw = img.permute(2, 0, 1).unsqueeze(0)
    pooled = torch.nn.functional.avg_pool2d(chw, downscale).squeeze(0)
    lum = pooled.mean(dim=0, keepdim=True)
    return torch.cat([pooled, lum], dim=0)


def decode_latent(z: Tensor, downscale: int = 2) -> Tensor:
    """[4, h, w] latent -> [h*d, w*d, 3] image, clamped to [0, 1]."""
    if z.ndim != 3 or z.shape[0] != LATENT_CHANNELS:
        raise InputError(f"latent must be [{LATENT_CHANNELS}, h, w], got {tuple(z.shape)}")
    rgb = z[:3]
    up = rgb.repeat_interleave(downscale, dim=1).repeat_interleave(downscale, dim=2)
    return up.permute(1, 2, 0).clamp(0.0, 1.0)


LATENT_SHIFT = 0.5
LATENT_SCALE = 2.0


def latent_from_image(img: Tensor, downscale: int = 2) -> Tensor:
    """Encode and standardize to roughly zero-centered unit-range values."""
    return (encode_latent(img, downscale) - LATENT_SHIFT) * LATENT_SCALE


def image_from_latent(z: Tensor, downscale: int = 2) -> Tensor:
    """Undo the standardization, then decode."""
    return decode_latent(z / LATENT_SCALE + LATENT_SHIFT, downscale)


def q_sample_batch(z0: Tensor, t: Tensor, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Forward noising with an independent timestep per batch row."""
    if z0.shape != eps.shape:
        raise ShapeError(f"latent and noise shapes differ: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    if t.ndim != 1 or t.shape[0] != z0.shape[0]:
        raise ShapeError(f"timestep batch {tuple(t.shape)} does not match latent batch {z0.shape[0]}")
    if ((t < 1) | (t > sched.timesteps)).any():
        raise InputError(f"timesteps must lie in [1, {sched.timesteps}]")
    a = sched.alpha_bar.to(z0.dtype)[t - 1].reshape(-1, *([1] * (z0.ndim - 1)))
    return a.sqrt() * z0 + (1 - a).sqrt() * eps
