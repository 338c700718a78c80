"""Toy latent-diffusion U-Net with hook-controlled attention sites.

Every block is resblock + self-attention + cross-attention. Self-attention
sites can capture their key/value features or swap in features donated by a
second stream (mixed or mutual attention); cross-attention sites carry a
frozen text branch and a trainable image branch whose outputs can be merged.
"""

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple

import torch
from torch import Tensor, nn

from .attention import (
    AttentionProjections,
    StyleAlignMode,
    cross_attention_merge,
    mixed_attention,
    mutual_attention,
    scaled_dot_product_attention,
)
from .errors import ConfigError, InputError, ShapeError, StateError


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    channel_multipliers: Tuple[int, ...] = (1, 2)
    attention_resolutions: Tuple[int, ...] = (16, 8)
    d_model: int = 64
    head_count: int = 2
    latent_channels: int = 4
    latent_size: int = 16

    def __post_init__(self):
        if self.base_channels < self.head_count or self.base_channels % self.head_count != 0:
            raise ConfigError(f"head_count {self.head_count} must divide base_channels {self.base_channels}")
        if len(self.channel_multipliers) < 1 or any(m < 1 for m in self.channel_multipliers):
            raise ConfigError(f"channel multipliers must be positive, got {self.channel_multipliers}")
        if self.latent_size < 8 or (self.latent_size & (self.latent_size - 1)) != 0:
            raise ConfigError(f"latent_size must be a power of two >= 8, got {self.latent_size}")
        sizes = [self.latent_size // (2**lvl) for lvl in range(len(self.channel_multipliers))]
        if not any(s in self.attention_resolutions for s in sizes):
            raise ConfigError(
                f"no level matches attention_resolutions {self.attention_resolutions}; at least one block"
                " must carry self- and cross-attention"
            )
        if self.d_model < 1:
            raise ConfigError(f"d_model must be positive, got {self.d_model}")

    @property
    def time_embed_dim(self) -> int:
        return self.base_channels * 4


class SelfAttentionVariant(str, Enum):
    SELF = "self"
    MIXED = "mixed"
    MUTUAL = "mutual"


@dataclass
class KVCapture:
    """Per-layer key/value capture from one stream's self-attention site.

    ``k``/``v`` hold the projected matrices stacked over heads,
    ``[heads, batch, n_tokens, d_k]``; ``features`` holds the normalized token
    block they were projected from, ``[batch, n_tokens, channels]``.
    """

    k: Tensor
    v: Tensor
    features: Tensor

    @property
    def n_tokens(self) -> int:
        return self.k.shape[-2]


@dataclass
class AttentionHookSet:
    """Selects the self-attention variant and carries capture/inject taps."""

    variant: SelfAttentionVariant = SelfAttentionVariant.SELF
    style: StyleAlignMode = StyleAlignMode.OFF
    capture_kv: bool = False
    captured: Dict[str, KVCapture] = field(default_factory=dict)
    inject: Optional[Mapping[str, KVCapture]] = None


@dataclass
class ConditionBundle:
    """Zero or more of an identity context and a text context.

    Either context is ``[n_tokens, d_model]`` or ``[batch, n_tokens, d_model]``.
    ``text_active`` zeroes the text cross-attention branch without removing its
    weights, keeping layer indices stable.
    """

    c_id: Optional[Tensor] = None
    c_t: Optional[Tensor] = None
    text_active: bool = True


def sinusoidal_time_embedding(t: Tensor, dim: int) -> Tensor:
    """Standard sin/cos features of the timestep; ``t`` is a 1-D index tensor."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(-1) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _fill_normal(param: Tensor, std: float, gen: torch.Generator):
    with torch.no_grad():
        param.copy_(torch.randn(param.shape, generator=gen) * std)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: Tensor, t_emb: Tensor) -> Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttentionSite(nn.Module):
    """Spatial self-attention whose K/V can be captured or mixed with a donor stream."""

    def __init__(self, name: str, channels: int, heads: int):
        super().__init__()
        self.site_name = name
        self.channels = channels
        self.heads = heads
        self.d_k = channels // heads
        self.norm = nn.GroupNorm(8, channels)
        self.w_q = nn.Parameter(torch.empty(heads, channels, self.d_k))
        self.w_k = nn.Parameter(torch.empty(heads, channels, self.d_k))
        self.w_v = nn.Parameter(torch.empty(heads, channels, self.d_k))
        self.out_proj = nn.Linear(channels, channels)

    def init_weights(self, gen: torch.Generator):
        std = self.channels**-0.5
        for w in (self.w_q, self.w_k, self.w_v):
            _fill_normal(w, std, gen)
        _fill_normal(self.out_proj.weight, 0.5 * std, gen)
        with torch.no_grad():
            self.out_proj.bias.zero_()

    def _head_proj(self, h: int) -> AttentionProjections:
        return AttentionProjections(w_k=self.w_k[h], w_v=self.w_v[h], w_q=self.w_q[h])

    def forward(self, x: Tensor, hooks: Optional[AttentionHookSet]) -> Tensor:
        b, c, hh, ww = x.shape
        tokens = self.norm(x).reshape(b, c, hh * ww).transpose(1, 2)  # [b, n, c]
        variant = hooks.variant if hooks is not None else SelfAttentionVariant.SELF
        style = hooks.style if hooks is not None else StyleAlignMode.OFF

        donor: Optional[KVCapture] = None
        if variant != SelfAttentionVariant.SELF:
            if hooks is None or hooks.inject is None or self.site_name not in hooks.inject:
                raise StateError(f"variant {variant.value} needs injected captures for site {self.site_name!r}")
            donor = hooks.inject[self.site_name]
            if donor.features.shape[0] != b or donor.features.shape[-1] != c:
                raise ShapeError(
                    f"injected features {tuple(donor.features.shape)} do not match site {self.site_name!r}"
                    f" tokens [{b}, n, {c}]"
                )

        head_outs = []
        cap_k, cap_v = [], []
        for h in range(self.heads):
            proj = self._head_proj(h)
            if hooks is not None and hooks.capture_kv:
                cap_k.append(torch.matmul(tokens, proj.w_k))
                cap_v.append(torch.matmul(tokens, proj.w_v))
            if variant == SelfAttentionVariant.SELF:
                q = torch.matmul(tokens, proj.w_q)
                k = torch.matmul(tokens, proj.w_k)
                v = torch.matmul(tokens, proj.w_v)
                head_outs.append(scaled_dot_product_attention(q, k, v))
            elif variant == SelfAttentionVariant.MIXED:
                head_outs.append(mixed_attention(tokens, donor.features, proj, proj, style=style))
            else:
                head_outs.append(mutual_attention(tokens, donor.features, proj, proj))

        if hooks is not None and hooks.capture_kv:
            hooks.captured[self.site_name] = KVCapture(
                k=torch.stack(cap_k, dim=0), v=torch.stack(cap_v, dim=0), features=tokens
            )

        out = self.out_proj(torch.cat(head_outs, dim=-1))
        return x + out.transpose(1, 2).reshape(b, c, hh, ww)


class CrossAttentionSite(nn.Module):
    """Frozen text cross-attention plus a trainable image cross-attention branch.

    With both contexts present the branch outputs are summed; with neither the
    site contributes zero. The image branch K'/V' weights are the trainable
    partition of this module.
    """

    def __init__(self, name: str, channels: int, heads: int, d_model: int):
        super().__init__()
        self.site_name = name
        self.channels = channels
        self.heads = heads
        self.d_k = channels // heads
        self.d_model = d_model
        self.norm = nn.GroupNorm(8, channels)
        self.w_q = nn.Parameter(torch.empty(heads, channels, self.d_k))
        self.text_kv = nn.Parameter(torch.empty(2, heads, d_model, self.d_k))
        self.image_kv = nn.Parameter(torch.empty(2, heads, d_model, self.d_k))
        self.out_proj = nn.Linear(channels, channels)

    def init_weights(self, gen: torch.Generator):
        _fill_normal(self.w_q, self.channels**-0.5, gen)
        _fill_normal(self.text_kv, self.d_model**-0.5, gen)
        with torch.no_grad():
            # image branch starts as a copy of the text branch projections
            self.image_kv.copy_(self.text_kv)
        _fill_normal(self.out_proj.weight, 0.5 * self.channels**-0.5, gen)
        with torch.no_grad():
            self.out_proj.bias.zero_()

    def forward(self, x: Tensor, cond: Optional[ConditionBundle], style: StyleAlignMode) -> Tensor:
        if cond is None:
            return x
        c_id, c_t = cond.c_id, cond.c_t
        use_text = c_t is not None and cond.text_active
        if c_id is None and not use_text:
            return x

        b, c, hh, ww = x.shape

        def _context(ctx: Tensor, name: str) -> Tensor:
            if ctx.ndim == 2:
                ctx = ctx.unsqueeze(0).expand(b, -1, -1)
            if ctx.ndim != 3 or ctx.shape[0] != b:
                raise ShapeError(f"{name} must be [n, d_model] or [batch, n, d_model], got {tuple(ctx.shape)}")
            if ctx.shape[-1] != self.d_model:
                raise ShapeError(f"{name} width {ctx.shape[-1]} != d_model {self.d_model}")
            return ctx

        tokens = self.norm(x).reshape(b, c, hh * ww).transpose(1, 2)
        if c_id is not None:
            c_id = _context(c_id, "identity context")
        if use_text:
            c_t = _context(c_t, "text context")

        head_outs = []
        for h in range(self.heads):
            q = torch.matmul(tokens, self.w_q[h])
            proj_img = AttentionProjections(w_k=self.image_kv[0, h], w_v=self.image_kv[1, h])
            proj_txt = AttentionProjections(w_k=self.text_kv[0, h], w_v=self.text_kv[1, h])
            if c_id is not None and use_text:
                head_outs.append(cross_attention_merge(q, c_id, c_t, proj_img, proj_txt, style=style))
            elif c_id is not None:
                k = torch.matmul(c_id, proj_img.w_k)
                v = torch.matmul(c_id, proj_img.w_v)
                head_outs.append(scaled_dot_product_attention(q, k, v))
            else:
                k = torch.matmul(c_t, proj_txt.w_k)
                v = torch.matmul(c_t, proj_txt.w_v)
                head_outs.append(scaled_dot_product_attention(q, k, v))

        out = self.out_proj(torch.cat(head_outs, dim=-1))
        return x + out.transpose(1, 2).reshape(b, c, hh, ww)


class AttentionBlock(nn.Module):
    """Resblock followed by optional self- and cross-attention at one resolution."""

    def __init__(self, name: str, c_in: int, c_out: int, cfg: UNetConfig, with_attention: bool):
        super().__init__()
        self.res = ResBlock(c_in, c_out, cfg.time_embed_dim)
        self.self_attn = SelfAttentionSite(name, c_out, cfg.head_count) if with_attention else None
        self.cross_attn = CrossAttentionSite(name, c_out, cfg.head_count, cfg.d_model) if with_attention else None

    def forward(
        self,
        x: Tensor,
        t_emb: Tensor,
        cond: Optional[ConditionBundle],
        hooks: Optional[AttentionHookSet],
    ) -> Tensor:
        h = self.res(x, t_emb)
        if self.self_attn is not None:
            h = self.self_attn(h, hooks)
            h = self.cross_attn(h, cond, hooks.style if hooks is not None else StyleAlignMode.OFF)
        return h


class ToyUNet(nn.Module):
    """Two-resolution U-Net predicting the noise added to a latent."""

    def __init__(self, cfg: UNetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.base_channels * cfg.channel_multipliers[0]
        c1 = cfg.base_channels * cfg.channel_multipliers[-1]
        if c0 % cfg.head_count or c1 % cfg.head_count:
            raise ConfigError("head_count must divide every level's channel count")
        attn0 = cfg.latent_size in cfg.attention_resolutions
        attn1 = (cfg.latent_size // 2) in cfg.attention_resolutions

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
        )
        self.conv_in = nn.Conv2d(cfg.latent_channels, c0, 3, padding=1)
        self.enc0 = AttentionBlock("enc0", c0, c0, cfg, attn0)
        self.down = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = AttentionBlock("enc1", c1, c1, cfg, attn1)
        self.mid = AttentionBlock("mid", c1, c1, cfg, attn1)
        self.up = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec0 = AttentionBlock("dec0", 2 * c0, c0, cfg, attn0)
        self.norm_out = nn.GroupNorm(8, c0)
        self.conv_out = nn.Conv2d(c0, cfg.latent_channels, 3, padding=1)

        self._init_weights(seed)

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                _fill_normal(module.weight, fan_in**-0.5, gen)
                with torch.no_grad():
                    module.bias.zero_()
            elif isinstance(module, nn.Linear) and not isinstance(module, (SelfAttentionSite, CrossAttentionSite)):
                _fill_normal(module.weight, module.in_features**-0.5, gen)
                with torch.no_grad():
                    module.bias.zero_()
        for module in self.modules():
            if isinstance(module, (SelfAttentionSite, CrossAttentionSite)):
                module.init_weights(gen)

    def self_attention_names(self) -> List[str]:
        names = []
        for block in (self.enc0, self.enc1, self.mid, self.dec0):
            if block.self_attn is not None:
                names.append(block.self_attn.site_name)
        return names

    def forward(
        self,
        z: Tensor,
        t,
        cond: Optional[ConditionBundle] = None,
        hooks: Optional[AttentionHookSet] = None,
    ) -> Tensor:
        squeeze = z.ndim == 3
        if squeeze:
            z = z.unsqueeze(0)
        if z.ndim != 4:
            raise ShapeError(f"latent must be [c, h, w] or [b, c, h, w], got {tuple(z.shape)}")
        b, c, hh, ww = z.shape
        if c != self.cfg.latent_channels:
            raise ShapeError(f"latent has {c} channels, model expects {self.cfg.latent_channels}")
        if hh != ww or hh < 8 or (hh & (hh - 1)) != 0:
            raise ShapeError(f"latent spatial dims must be square powers of two >= 8, got {hh}x{ww}")

        if isinstance(t, int):
            t = torch.full((b,), t, dtype=torch.long)
        elif torch.is_tensor(t):
            if t.ndim == 0:
                t = t.reshape(1).expand(b)
            if t.shape != (b,):
                raise ShapeError(f"timestep batch {tuple(t.shape)} does not match latent batch {b}")
        else:
            raise InputError(f"timestep must be an int or a tensor, got {type(t).__name__}")
        if (t < 0).any():
            raise InputError("timesteps must be non-negative")

        t_emb = self.time_mlp(sinusoidal_time_embedding(t, self.cfg.time_embed_dim))

        h0 = self.enc0(self.conv_in(z), t_emb, cond, hooks)
        h1 = self.enc1(self.down(h0), t_emb, cond, hooks)
        h1 = self.mid(h1, t_emb, cond, hooks)
        hu = self.up(torch.nn.functional.interpolate(h1, scale_factor=2, mode="nearest"))
        hd = self.dec0(torch.cat([hu, h0], dim=1), t_emb, cond, hooks)
        out = self.conv_out(torch.nn.functional.silu(self.norm_out(hd)))
        return out.squeeze(0) if squeeze else out


TRAINABLE_UNET_SUFFIX = "image_kv"


@dataclass
class ModelWeights:
    """Frozen U-Net backbone plus the trainable adapter parameters.

    The trainable partition is exactly the two mappers and every
    cross-attention site's image-branch K'/V' projections; everything else is
    frozen and must stay byte-identical across a training run.
    """

    unet: ToyUNet
    mappers: "nn.Module"
    config: UNetConfig

    def __post_init__(self):
        for name, p in self.unet.named_parameters():
            p.requires_grad_(name.endswith(TRAINABLE_UNET_SUFFIX))
        for p in self.mappers.parameters():
            p.requires_grad_(True)
        total = len(list(self.unet.named_parameters())) + len(list(self.mappers.named_parameters()))
        split = len(self.trainable_named_parameters()) + len(self.frozen_named_parameters())
        if split != total:
            raise StateError("parameter partition is not exhaustive")

    def trainable_named_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        out = [(f"unet.{n}", p) for n, p in self.unet.named_parameters() if n.endswith(TRAINABLE_UNET_SUFFIX)]
        out.extend((f"mappers.{n}", p) for n, p in self.mappers.named_parameters())
        return out

    def frozen_named_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        return [(f"unet.{n}", p) for n, p in self.unet.named_parameters() if not n.endswith(TRAINABLE_UNET_SUFFIX)]

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for _, p in self.trainable_named_parameters()]

    def frozen_digest(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.frozen_named_parameters()):
            digest.update(name.encode())
            digest.update(p.detach().numpy().tobytes())
        return digest.hexdigest()


def unet_forward(
    weights: ModelWeights,
    z_t: Tensor,
    t,
    cond: Optional[ConditionBundle] = None,
    hooks: Optional[AttentionHookSet] = None,
) -> Tensor:
    """Predict the noise component of ``z_t`` at timestep ``t``."""
    return weights.unet(z_t, t, cond, hooks)
