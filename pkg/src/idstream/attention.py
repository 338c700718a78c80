"""Attention and feature-normalization primitives with hand-derived gradients.

Every operation here is a pure function of its inputs. Tensors follow the
token-row convention: features are ``[..., n_tokens, n_channels]`` and
projection weights are ``[n_channels, d_k]``, so ``K = Z @ W_k``. Leading
batch dimensions broadcast through all ops; the documented contracts are
stated for the plain 2-D matrix case.

Each forward accepts ``want_cache=True`` to additionally return an opaque
cache object; the matching ``*_vjp`` function turns that cache plus an
upstream gradient into gradients for every input. The VJPs are explicit
formulas (no autograd) so they can be validated against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import torch
from torch import Tensor

from .errors import (
    DegenerateStatisticsError,
    InputError,
    ShapeError,
    StateError,
    UndefinedSoftmaxError,
)

ADAIN_SIGMA_EPS = 1e-6


class Stream(str, Enum):
    IDENTITY = "identity"
    TEXT = "text"


class StyleAlignMode(str, Enum):
    OFF = "off"
    ADAIN_MEAN = "adain_mean"
    ADAIN = "adain"


@dataclass(frozen=True)
class FeatureMatrix:
    """A ``[n_tokens, n_channels]`` feature block tagged with its stream."""

    data: Tensor
    stream: Stream

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeError(f"feature matrix must be 2-D, got shape {tuple(self.data.shape)}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ShapeError(f"feature matrix needs at least one token and one channel, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise InputError("feature matrix contains non-finite entries")

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AttentionProjections:
    """Query/key/value projection weights for one stream, each ``[n_channels, d_k]``.

    ``w_q`` may be None for streams that only ever donate keys and values.
    """

    w_k: Tensor
    w_v: Tensor
    w_q: Optional[Tensor] = None

    def __post_init__(self):
        mats = [("w_k", self.w_k), ("w_v", self.w_v)]
        if self.w_q is not None:
            mats.append(("w_q", self.w_q))
        for name, w in mats:
            if w.ndim != 2:
                raise ShapeError(f"{name} must be 2-D, got shape {tuple(w.shape)}")
        if self.w_k.shape != self.w_v.shape:
            raise ShapeError(
                f"w_k and w_v must agree in shape, got {tuple(self.w_k.shape)} vs {tuple(self.w_v.shape)}"
            )

    @property
    def d_k(self) -> int:
        return self.w_k.shape[1]


MatrixLike = Union[Tensor, FeatureMatrix]


def _as_tensor(x: MatrixLike, expected_stream: Optional[Stream] = None) -> Tensor:
    if isinstance(x, FeatureMatrix):
        if expected_stream is not None and x.stream != expected_stream:
            raise InputError(f"expected a {expected_stream.value}-stream feature matrix, got {x.stream.value}")
        return x.data
    return x


def _check_token_dims(*mats: Tensor):
    lead = mats[0].shape[:-2]
    for m in mats[1:]:
        if m.shape[:-2] != lead:
            raise ShapeError(f"leading batch dims differ: {lead} vs {m.shape[:-2]}")


def _flat_weight_grad(z: Tensor, d_proj: Tensor) -> Tensor:
    """Accumulate d(Z @ W)/dW over any leading batch dims: sum_b Z_b^T dP_b."""
    zc = z.reshape(-1, z.shape[-2], z.shape[-1])
    dc = d_proj.reshape(-1, d_proj.shape[-2], d_proj.shape[-1])
    return torch.bmm(zc.transpose(1, 2), dc).sum(dim=0)


# ---------------------------------------------------------------------------
# scaled dot-product attention
# ---------------------------------------------------------------------------


@dataclass
class SdpaCache:
    q: Tensor
    k: Tensor
    v: Tensor
    weights: Tensor  # softmax rows, [..., n_q, n_k]
    scale: float


def scaled_dot_product_attention(
    q: MatrixLike, k: MatrixLike, v: MatrixLike, want_cache: bool = False
):
    """softmax(Q K^T / sqrt(d_k)) V with max-subtracted softmax."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    _check_token_dims(q, k, v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key channel mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value token mismatch: {k.shape[-2]} vs {v.shape[-2]}")
    if k.shape[-2] == 0:
        raise UndefinedSoftmaxError("attention over zero keys is undefined")

    scale = 1.0 / float(k.shape[-1]) ** 0.5
    scores = torch.matmul(q, k.transpose(-2, -1)) * scale
    scores = scores - scores.amax(dim=-1, keepdim=True)
    e = torch.exp(scores)
    weights = e / e.sum(dim=-1, keepdim=True)
    out = torch.matmul(weights, v)
    if want_cache:
        return out, SdpaCache(q=q, k=k, v=v, weights=weights, scale=scale)
    return out


def scaled_dot_product_attention_vjp(cache: Optional[SdpaCache], grad_out: Tensor):
    """Gradients (dQ, dK, dV) of attention under upstream ``grad_out``."""
    if cache is None:
        raise StateError("attention backward requires the forward cache")
    p = cache.weights
    dv = torch.matmul(p.transpose(-2, -1), grad_out)
    dp = torch.matmul(grad_out, cache.v.transpose(-2, -1))
    ds = p * (dp - (dp * p).sum(dim=-1, keepdim=True))
    dq = torch.matmul(ds, cache.k) * cache.scale
    dk = torch.matmul(ds.transpose(-2, -1), cache.q) * cache.scale
    return dq, dk, dv


# ---------------------------------------------------------------------------
# channel statistics and AdaIN variants
# ---------------------------------------------------------------------------


def channel_mean(x: MatrixLike) -> Tensor:
    """Arithmetic mean of each channel over tokens."""
    x = _as_tensor(x)
    if x.shape[-2] == 0:
        raise ShapeError("channel_mean over an empty matrix")
    return x.mean(dim=-2)


def channel_mean_vjp(x: Tensor, grad_out: Tensor) -> Tensor:
    n = x.shape[-2]
    return grad_out.unsqueeze(-2).expand_as(x) / n


@dataclass
class AdainMeanCache:
    n_x: int
    n_y: int
    y_shape: tuple


def adain_mean(x: MatrixLike, y: MatrixLike, want_cache: bool = False):
    """Mean-only adaptive normalization: x - mu(x) + mu(y), per channel."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError(f"channel mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    if x.shape[-2] == 0 or y.shape[-2] == 0:
        raise ShapeError("adain_mean over an empty matrix")
    out = x - x.mean(dim=-2, keepdim=True) + y.mean(dim=-2, keepdim=True)
    if want_cache:
        return out, AdainMeanCache(n_x=x.shape[-2], n_y=y.shape[-2], y_shape=tuple(y.shape))
    return out


def adain_mean_vjp(cache: Optional[AdainMeanCache], grad_out: Tensor):
    if cache is None:
        raise StateError("adain_mean backward requires the forward cache")
    dx = grad_out - grad_out.mean(dim=-2, keepdim=True)
    col = grad_out.sum(dim=-2, keepdim=True) / cache.n_y
    dy = col.expand(cache.y_shape).clone()
    return dx, dy


@dataclass
class AdainCache:
    cx: Tensor
    cy: Tensor
    var_x: Tensor
    sd_x: Tensor
    sd_y: Tensor
    n_x: int
    n_y: int


def adain(x: MatrixLike, y: MatrixLike, want_cache: bool = False):
    """Full adaptive instance normalization with population statistics.

    sigma(y) * (x - mu(x)) / sigma(x) + mu(y), per channel over tokens.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError(f"channel mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    if x.shape[-2] == 0 or y.shape[-2] == 0:
        raise ShapeError("adain over an empty matrix")
    mu_x = x.mean(dim=-2, keepdim=True)
    cx = x - mu_x
    var_x = (cx * cx).mean(dim=-2, keepdim=True)
    sd_x = torch.sqrt(var_x)
    if (sd_x <= ADAIN_SIGMA_EPS).any():
        raise DegenerateStatisticsError(
            f"sigma(x) <= {ADAIN_SIGMA_EPS} in at least one channel; refusing to divide"
        )
    mu_y = y.mean(dim=-2, keepdim=True)
    cy = y - mu_y
    sd_y = torch.sqrt((cy * cy).mean(dim=-2, keepdim=True))
    out = sd_y * cx / sd_x + mu_y
    if want_cache:
        return out, AdainCache(cx=cx, cy=cy, var_x=var_x, sd_x=sd_x, sd_y=sd_y, n_x=x.shape[-2], n_y=y.shape[-2])
    return out


def adain_vjp(cache: Optional[AdainCache], grad_out: Tensor):
    if cache is None:
        raise StateError("adain backward requires the forward cache")
    u = grad_out
    a = u.sum(dim=-2, keepdim=True)
    b = (u * cache.cx).sum(dim=-2, keepdim=True)
    g = (cache.sd_y / cache.sd_x) * (u - cache.cx * b / (cache.n_x * cache.var_x))
    dx = g - g.mean(dim=-2, keepdim=True)
    # sigma(y) has an undifferentiable kink at zero; clamp only the denominator.
    sd_y_safe = cache.sd_y.clamp_min(ADAIN_SIGMA_EPS)
    dy = cache.cy * (b / (cache.sd_x * cache.n_y * sd_y_safe)) + a / cache.n_y
    return dx, dy


def _style_shift(k_id: Tensor, v_id: Tensor, k_t: Tensor, v_t: Tensor, style: StyleAlignMode, want_cache: bool):
    """Shift identity-side K/V toward the text side's statistics per style mode."""
    if style == StyleAlignMode.OFF:
        return k_id, v_id, None, None
    op = adain_mean if style == StyleAlignMode.ADAIN_MEAN else adain
    if want_cache:
        k_shift, k_cache = op(k_id, k_t, want_cache=True)
        v_shift, v_cache = op(v_id, v_t, want_cache=True)
        return k_shift, v_shift, k_cache, v_cache
    return op(k_id, k_t), op(v_id, v_t), None, None


def _style_shift_vjp(style: StyleAlignMode, cache, grad_shifted: Tensor):
    op_vjp = adain_mean_vjp if style == StyleAlignMode.ADAIN_MEAN else adain_vjp
    return op_vjp(cache, grad_shifted)


# ---------------------------------------------------------------------------
# mixed attention (identity stream queries; keys/values concatenated)
# ---------------------------------------------------------------------------


@dataclass
class ProjectionGrads:
    w_q: Optional[Tensor]
    w_k: Optional[Tensor]
    w_v: Optional[Tensor]


@dataclass
class MixedAttentionCache:
    z_id: Tensor
    z_t: Optional[Tensor]
    proj_id: AttentionProjections
    proj_t: AttentionProjections
    style: StyleAlignMode
    sdpa: SdpaCache
    k_style_cache: object
    v_style_cache: object
    n_id: int


@dataclass
class MixedAttentionGrads:
    z_id: Tensor
    z_t: Optional[Tensor]
    proj_id: ProjectionGrads
    proj_t: ProjectionGrads


def mixed_attention(
    z_id: MatrixLike,
    z_t: Optional[MatrixLike],
    proj_id: AttentionProjections,
    proj_t: AttentionProjections,
    style: StyleAlignMode = StyleAlignMode.OFF,
    want_cache: bool = False,
):
    """Self-attention over the identity stream with text-stream keys/values mixed in.

    Queries always come from the identity features. Keys and values are the
    concatenation (identity first) of both streams' projections; with a style
    mode active the identity-side K/V are first shifted toward the text side's
    channel statistics. An absent/empty text stream degrades to plain
    self-attention over the identity features.
    """
    z_id = _as_tensor(z_id, Stream.IDENTITY)
    z_t = None if z_t is None else _as_tensor(z_t, Stream.TEXT)
    if z_id.shape[-2] == 0:
        raise ShapeError("identity features must contain at least one token")
    if proj_id.w_q is None:
        raise ShapeError("identity projections must include w_q for mixed attention")
    if proj_id.d_k != proj_t.d_k:
        raise ShapeError(f"streams disagree on d_k: {proj_id.d_k} vs {proj_t.d_k}")

    q = torch.matmul(z_id, proj_id.w_q)
    k_id = torch.matmul(z_id, proj_id.w_k)
    v_id = torch.matmul(z_id, proj_id.w_v)

    has_text = z_t is not None and z_t.shape[-2] > 0
    if has_text:
        k_t = torch.matmul(z_t, proj_t.w_k)
        v_t = torch.matmul(z_t, proj_t.w_v)
        k_id_s, v_id_s, k_cache, v_cache = _style_shift(k_id, v_id, k_t, v_t, style, want_cache)
        k_hat = torch.cat([k_id_s, k_t], dim=-2)
        v_hat = torch.cat([v_id_s, v_t], dim=-2)
    else:
        k_cache = v_cache = None
        k_hat, v_hat = k_id, v_id

    if want_cache:
        out, sdpa_cache = scaled_dot_product_attention(q, k_hat, v_hat, want_cache=True)
        cache = MixedAttentionCache(
            z_id=z_id,
            z_t=z_t if has_text else None,
            proj_id=proj_id,
            proj_t=proj_t,
            style=style,
            sdpa=sdpa_cache,
            k_style_cache=k_cache,
            v_style_cache=v_cache,
            n_id=z_id.shape[-2],
        )
        return out, cache
    return scaled_dot_product_attention(q, k_hat, v_hat)


def mixed_attention_vjp(cache: Optional[MixedAttentionCache], grad_out: Tensor) -> MixedAttentionGrads:
    if cache is None:
        raise StateError("mixed_attention backward requires the forward cache")
    dq, dk_hat, dv_hat = scaled_dot_product_attention_vjp(cache.sdpa, grad_out)
    n_id = cache.n_id
    dk_id_s, dk_t = dk_hat[..., :n_id, :], dk_hat[..., n_id:, :]
    dv_id_s, dv_t = dv_hat[..., :n_id, :], dv_hat[..., n_id:, :]

    if cache.z_t is not None and cache.style != StyleAlignMode.OFF:
        dk_id, dk_t_style = _style_shift_vjp(cache.style, cache.k_style_cache, dk_id_s)
        dv_id, dv_t_style = _style_shift_vjp(cache.style, cache.v_style_cache, dv_id_s)
        dk_t = dk_t + dk_t_style
        dv_t = dv_t + dv_t_style
    else:
        dk_id, dv_id = dk_id_s, dv_id_s

    z_id = cache.z_id
    dz_id = (
        torch.matmul(dq, cache.proj_id.w_q.transpose(-2, -1))
        + torch.matmul(dk_id, cache.proj_id.w_k.transpose(-2, -1))
        + torch.matmul(dv_id, cache.proj_id.w_v.transpose(-2, -1))
    )
    g_id = ProjectionGrads(
        w_q=_flat_weight_grad(z_id, dq),
        w_k=_flat_weight_grad(z_id, dk_id),
        w_v=_flat_weight_grad(z_id, dv_id),
    )
    if cache.z_t is not None:
        dz_t = torch.matmul(dk_t, cache.proj_t.w_k.transpose(-2, -1)) + torch.matmul(
            dv_t, cache.proj_t.w_v.transpose(-2, -1)
        )
        g_t = ProjectionGrads(
            w_q=None,
            w_k=_flat_weight_grad(cache.z_t, dk_t),
            w_v=_flat_weight_grad(cache.z_t, dv_t),
        )
    else:
        dz_t = None
        g_t = ProjectionGrads(w_q=None, w_k=None, w_v=None)
    return MixedAttentionGrads(z_id=dz_id, z_t=dz_t, proj_id=g_id, proj_t=g_t)


# ---------------------------------------------------------------------------
# mutual attention (keys/values wholly replaced by the text stream's)
# ---------------------------------------------------------------------------


@dataclass
class MutualAttentionCache:
    z_id: Tensor
    z_t: Tensor
    proj_id: AttentionProjections
    proj_t: AttentionProjections
    sdpa: SdpaCache


def mutual_attention(
    z_id: MatrixLike,
    z_t: MatrixLike,
    proj_id: AttentionProjections,
    proj_t: AttentionProjections,
    want_cache: bool = False,
):
    """Identity-stream queries attending over text-stream keys/values only."""
    z_id = _as_tensor(z_id, Stream.IDENTITY)
    z_t = _as_tensor(z_t, Stream.TEXT)
    if z_t.shape[-2] == 0:
        raise UndefinedSoftmaxError("mutual attention needs a non-empty text stream")
    if proj_id.w_q is None:
        raise ShapeError("identity projections must include w_q for mutual attention")
    if proj_id.d_k != proj_t.d_k:
        raise ShapeError(f"streams disagree on d_k: {proj_id.d_k} vs {proj_t.d_k}")
    q = torch.matmul(z_id, proj_id.w_q)
    k_t = torch.matmul(z_t, proj_t.w_k)
    v_t = torch.matmul(z_t, proj_t.w_v)
    if want_cache:
        out, sdpa_cache = scaled_dot_product_attention(q, k_t, v_t, want_cache=True)
        return out, MutualAttentionCache(z_id=z_id, z_t=z_t, proj_id=proj_id, proj_t=proj_t, sdpa=sdpa_cache)
    return scaled_dot_product_attention(q, k_t, v_t)


def mutual_attention_vjp(cache: Optional[MutualAttentionCache], grad_out: Tensor) -> MixedAttentionGrads:
    if cache is None:
        raise StateError("mutual_attention backward requires the forward cache")
    dq, dk_t, dv_t = scaled_dot_product_attention_vjp(cache.sdpa, grad_out)
    dz_id = torch.matmul(dq, cache.proj_id.w_q.transpose(-2, -1))
    dz_t = torch.matmul(dk_t, cache.proj_t.w_k.transpose(-2, -1)) + torch.matmul(
        dv_t, cache.proj_t.w_v.transpose(-2, -1)
    )
    g_id = ProjectionGrads(w_q=_flat_weight_grad(cache.z_id, dq), w_k=None, w_v=None)
    g_t = ProjectionGrads(
        w_q=None,
        w_k=_flat_weight_grad(cache.z_t, dk_t),
        w_v=_flat_weight_grad(cache.z_t, dv_t),
    )
    return MixedAttentionGrads(z_id=dz_id, z_t=dz_t, proj_id=g_id, proj_t=g_t)


# ---------------------------------------------------------------------------
# cross-attention merging (identity branch + text branch, summed)
# ---------------------------------------------------------------------------


@dataclass
class CrossAttentionMergeCache:
    q: Tensor
    c_id: Tensor
    c_t: Tensor
    proj_id: AttentionProjections
    proj_t: AttentionProjections
    style: StyleAlignMode
    sdpa_id: SdpaCache
    sdpa_t: SdpaCache
    k_style_cache: object
    v_style_cache: object


@dataclass
class CrossAttentionMergeGrads:
    q: Tensor
    c_id: Tensor
    c_t: Tensor
    proj_id: ProjectionGrads
    proj_t: ProjectionGrads


def cross_attention_merge(
    q: MatrixLike,
    c_id: MatrixLike,
    c_t: MatrixLike,
    proj_id: AttentionProjections,
    proj_t: AttentionProjections,
    style: StyleAlignMode = StyleAlignMode.OFF,
    want_cache: bool = False,
):
    """Sum of identity-conditioned and text-conditioned cross-attention.

    ``q`` is the already-projected query block; the projections here supply
    only the K/V maps applied to the two context embeddings.
    """
    q = _as_tensor(q)
    c_id = _as_tensor(c_id, Stream.IDENTITY)
    c_t = _as_tensor(c_t, Stream.TEXT)
    if c_id.shape[-2] == 0 or c_t.shape[-2] == 0:
        raise ShapeError("both context embeddings must be non-empty")
    if proj_id.d_k != proj_t.d_k:
        raise ShapeError(f"branches disagree on d_k: {proj_id.d_k} vs {proj_t.d_k}")
    k_id = torch.matmul(c_id, proj_id.w_k)
    v_id = torch.matmul(c_id, proj_id.w_v)
    k_t = torch.matmul(c_t, proj_t.w_k)
    v_t = torch.matmul(c_t, proj_t.w_v)
    k_id_s, v_id_s, k_cache, v_cache = _style_shift(k_id, v_id, k_t, v_t, style, want_cache)

    if want_cache:
        out_id, sdpa_id = scaled_dot_product_attention(q, k_id_s, v_id_s, want_cache=True)
        out_t, sdpa_t = scaled_dot_product_attention(q, k_t, v_t, want_cache=True)
        cache = CrossAttentionMergeCache(
            q=q,
            c_id=c_id,
            c_t=c_t,
            proj_id=proj_id,
            proj_t=proj_t,
            style=style,
            sdpa_id=sdpa_id,
            sdpa_t=sdpa_t,
            k_style_cache=k_cache,
            v_style_cache=v_cache,
        )
        return out_id + out_t, cache
    out_id = scaled_dot_product_attention(q, k_id_s, v_id_s)
    out_t = scaled_dot_product_attention(q, k_t, v_t)
    return out_id + out_t


def cross_attention_merge_vjp(cache: Optional[CrossAttentionMergeCache], grad_out: Tensor) -> CrossAttentionMergeGrads:
    if cache is None:
        raise StateError("cross_attention_merge backward requires the forward cache")
    dq_id, dk_id_s, dv_id_s = scaled_dot_product_attention_vjp(cache.sdpa_id, grad_out)
    dq_t, dk_t, dv_t = scaled_dot_product_attention_vjp(cache.sdpa_t, grad_out)
    dq = dq_id + dq_t

    if cache.style != StyleAlignMode.OFF:
        dk_id, dk_t_style = _style_shift_vjp(cache.style, cache.k_style_cache, dk_id_s)
        dv_id, dv_t_style = _style_shift_vjp(cache.style, cache.v_style_cache, dv_id_s)
        dk_t = dk_t + dk_t_style
        dv_t = dv_t + dv_t_style
    else:
        dk_id, dv_id = dk_id_s, dv_id_s

    dc_id = torch.matmul(dk_id, cache.proj_id.w_k.transpose(-2, -1)) + torch.matmul(
        dv_id, cache.proj_id.w_v.transpose(-2, -1)
    )
    dc_t = torch.matmul(dk_t, cache.proj_t.w_k.transpose(-2, -1)) + torch.matmul(
        dv_t, cache.proj_t.w_v.transpose(-2, -1)
    )
    g_id = ProjectionGrads(
        w_q=None,
        w_k=_flat_weight_grad(cache.c_id, dk_id),
        w_v=_flat_weight_grad(cache.c_id, dv_id),
    )
    g_t = ProjectionGrads(
        w_q=None,
        w_k=_flat_weight_grad(cache.c_t, dk_t),
        w_v=_flat_weight_grad(cache.c_t, dv_t),
    )
    return CrossAttentionMergeGrads(q=dq, c_id=dc_id, c_t=dc_t, proj_id=g_id, proj_t=g_t)
