"""Identity embedding extraction: alignment, stub encoder backends, mappers.

Images are ``[height, width, 3]`` float tensors with values in ``[0, 1]``.
Backends are deterministic: the same image always yields bit-identical
tokens. The stub backends stand in for pretrained encoders; real ones can be
registered under a new name without touching any caller.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import InputError, ShapeError

MIN_IMAGE_SIDE = 8


def validate_image(img: Tensor) -> Tensor:
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"image must be [H, W, 3], got shape {tuple(img.shape)}")
    if img.shape[0] < MIN_IMAGE_SIDE or img.shape[1] < MIN_IMAGE_SIDE:
        raise InputError(f"image sides must be >= {MIN_IMAGE_SIDE}, got {tuple(img.shape[:2])}")
    if not torch.isfinite(img).all():
        raise InputError("image contains non-finite values")
    return img


def align_face(img: Tensor, target_size: int) -> Tensor:
    """Center-crop to the shorter side, then bilinear-resize to a square.

    Stands in for a landmark-based aligner; the synthetic sprites are drawn
    pre-centered so this is exact for them.
    """
    validate_image(img)
    if target_size < 1:
        raise InputError("target_size must be positive")
    h, w = img.shape[0], img.shape[1]
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    crop = img[top : top + side, left : left + side, :]
    if side == target_size:
        return crop
    chw = crop.permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(chw, size=(target_size, target_size), mode="bilinear", align_corners=False)
    return resized.squeeze(0).permute(1, 2, 0)


@dataclass
class EncoderBackend:
    """Deterministic image encoder emitting a fixed-shape token matrix."""

    kind: str  # "clip_like" (local tokens) or "face_like" (one global token)
    token_count: int
    embed_dim: int
    encode: Callable[[Tensor], Tensor]
    name: str = "stub"

    def __call__(self, img: Tensor) -> Tensor:
        tokens = self.encode(validate_image(img))
        if tokens.shape != (self.token_count, self.embed_dim):
            raise ShapeError(
                f"backend '{self.name}' produced {tuple(tokens.shape)}, "
                f"declared [{self.token_count}, {self.embed_dim}]"
            )
        return tokens


def make_stub_backend(kind: str, token_count: int, embed_dim: int, seed: int, pool_size: int = 8) -> EncoderBackend:
    """Fixed seeded random linear map over mean-centered, downsampled pixels.

    Each emitted token is L2-normalized. face_like backends always emit a
    single global token regardless of ``token_count``.
    """
    if kind not in ("clip_like", "face_like"):
        raise InputError(f"unknown backend kind '{kind}'")
    if token_count < 1 or embed_dim < 1:
        raise InputError("token_count and embed_dim must be positive")
    if kind == "face_like":
        token_count = 1
    gen = torch.Generator().manual_seed(seed)
    in_dim = pool_size * pool_size * 3
    weight = torch.randn(token_count * embed_dim, in_dim, generator=gen) / in_dim**0.5

    def encode(img: Tensor) -> Tensor:
        chw = img.permute(2, 0, 1).unsqueeze(0)
        pooled = F.adaptive_avg_pool2d(chw, (pool_size, pool_size)).reshape(-1)
        pooled = pooled - pooled.mean()
        tokens = (weight @ pooled).reshape(token_count, embed_dim)
        norms = tokens.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return tokens / norms

    return EncoderBackend(kind=kind, token_count=token_count, embed_dim=embed_dim, encode=encode, name=f"stub_{kind}")


def make_hash_text_encoder(d_model: int, seed: int) -> Callable[[str], Tensor]:
    """Deterministic prompt conditioner: one unit-norm token per whitespace word.

    Token vectors come from a generator seeded by a stable hash of the word
    mixed with ``seed``, so embeddings are identical across processes.
    """
    if d_model < 1:
        raise InputError("d_model must be positive")
    cache: Dict[str, Tensor] = {}

    def token_vector(word: str) -> Tensor:
        if word not in cache:
            digest = hashlib.blake2b(f"{seed}:{word}".encode(), digest_size=8).digest()
            gen = torch.Generator().manual_seed(int.from_bytes(digest, "big") % (2**63))
            vec = torch.randn(d_model, generator=gen)
            cache[word] = vec / vec.norm().clamp_min(1e-12)
        return cache[word]

    def encode(prompt: str) -> Tensor:
        words = prompt.lower().split()
        if not words:
            return torch.zeros(0, d_model)
        return torch.stack([token_vector(w) for w in words])

    return encode


# Registry of backend factories, keyed by name; an adapter point for real
# encoders later.
_BACKEND_FACTORIES: Dict[str, Callable[..., EncoderBackend]] = {}


def register_backend(name: str, factory: Callable[..., EncoderBackend]):
    _BACKEND_FACTORIES[name] = factory


def create_backend(name: str, **kwargs) -> EncoderBackend:
    if name not in _BACKEND_FACTORIES:
        raise InputError(f"no encoder backend registered under '{name}' (have: {sorted(_BACKEND_FACTORIES)})")
    return _BACKEND_FACTORIES[name](**kwargs)


register_backend("stub_clip", lambda **kw: make_stub_backend("clip_like", **kw))
register_backend("stub_face", lambda **kw: make_stub_backend("face_like", **kw))


class MapperWeights(nn.Module):
    """The two trainable affine mappers projecting encoder tokens to d_model."""

    def __init__(self, clip_dim: int, face_dim: int, d_model: int, init_seed: int = 0):
        super().__init__()
        self.d_model = d_model
        self.clip_mapper = nn.Linear(clip_dim, d_model)
        self.face_mapper = nn.Linear(face_dim, d_model)
        gen = torch.Generator().manual_seed(init_seed)
        with torch.no_grad():
            for lin in (self.clip_mapper, self.face_mapper):
                lin.weight.copy_(torch.empty_like(lin.weight).uniform_(-0.02, 0.02, generator=gen))
                lin.bias.zero_()


@dataclass
class IdentityEmbedding:
    """Token sequence conditioning the image cross-attention."""

    tokens: Tensor  # [n_tokens, d_model]
    source_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"identity embedding must be [n_tokens >= 1, d_model], got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise InputError("identity embedding contains non-finite values")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def d_model(self) -> int:
        return self.tokens.shape[1]


def extract_identity_embedding(
    img: Tensor,
    clip_backend: EncoderBackend,
    face_backend: EncoderBackend,
    mappers: MapperWeights,
    align_size: int = 32,
    source_id: str = "unknown",
) -> IdentityEmbedding:
    """Concat(clip_mapper(clip_tokens), face_mapper(face_token)) over the aligned face."""
    aligned = align_face(img, align_size)
    clip_tokens = clip_backend(aligned)
    face_tokens = face_backend(aligned)
    if clip_tokens.shape[1] != mappers.clip_mapper.in_features:
        raise ShapeError(
            f"clip backend dim {clip_tokens.shape[1]} != clip mapper in_features {mappers.clip_mapper.in_features}"
        )
    if face_tokens.shape[1] != mappers.face_mapper.in_features:
        raise ShapeError(
            f"face backend dim {face_tokens.shape[1]} != face mapper in_features {mappers.face_mapper.in_features}"
        )
    mapped = torch.cat([mappers.clip_mapper(clip_tokens), mappers.face_mapper(face_tokens)], dim=0)
    return IdentityEmbedding(tokens=mapped, source_ids=[source_id])


def stack_identities(embeddings: Sequence[IdentityEmbedding]) -> IdentityEmbedding:
    """Concatenate identity embeddings in list order to blend identities."""
    if len(embeddings) == 0:
        raise InputError("cannot stack an empty list of identity embeddings")
    d = embeddings[0].d_model
    for e in embeddings[1:]:
        if e.d_model != d:
            raise ShapeError(f"d_model mismatch while stacking: {e.d_model} vs {d}")
    if len(embeddings) == 1:
        return embeddings[0]
    tokens = torch.cat([e.tokens for e in embeddings], dim=0)
    ids: List[str] = []
    for e in embeddings:
        ids.extend(e.source_ids)
    return IdentityEmbedding(tokens=tokens, source_ids=ids)


def interpolate_identities(a: IdentityEmbedding, b: IdentityEmbedding, w: float) -> IdentityEmbedding:
    """(1 - w) * a + w * b, elementwise over tokens."""
    if a.tokens.shape != b.tokens.shape:
        raise ShapeError(f"cannot interpolate shapes {tuple(a.tokens.shape)} and {tuple(b.tokens.shape)}")
    if not (0.0 <= w <= 1.0):
        raise InputError(f"interpolation weight must lie in [0, 1], got {w}")
    if w == 0.0:
        return IdentityEmbedding(tokens=a.tokens.clone(), source_ids=list(a.source_ids))
    if w == 1.0:
        return IdentityEmbedding(tokens=b.tokens.clone(), source_ids=list(b.source_ids))
    tokens = (1.0 - w) * a.tokens + w * b.tokens
    return IdentityEmbedding(tokens=tokens, source_ids=list(a.source_ids) + list(b.source_ids))


def mix_identities(embeddings: Sequence[IdentityEmbedding], weights: Sequence[float]) -> IdentityEmbedding:
    """Convex combination of same-shape embeddings; weights are normalized to sum 1."""
    if len(embeddings) == 0:
        raise InputError("cannot mix an empty list of identity embeddings")
    if len(weights) != len(embeddings):
        raise InputError(f"got {len(weights)} weights for {len(embeddings)} embeddings")
    if any(w < 0 for w in weights):
        raise InputError("mix weights must be non-negative")
    total = float(sum(weights))
    if total <= 0:
        raise InputError("mix weights must not all be zero")
    shape = embeddings[0].tokens.shape
    for e in embeddings[1:]:
        if e.tokens.shape != shape:
            raise ShapeError("all embeddings must share shape for mixing")
    tokens = sum((w / total) * e.tokens for w, e in zip(weights, embeddings))
    ids: List[str] = []
    for e in embeddings:
        ids.extend(e.source_ids)
    return IdentityEmbedding(tokens=tokens, source_ids=ids)


@dataclass
class EncoderSuite:
    """The three conditioning encoders plus the face-alignment size they expect."""

    clip_backend: EncoderBackend
    face_backend: EncoderBackend
    text_encoder: Callable[[str], Tensor]
    align_size: int = 32


def default_encoder_suite(d_model: int = 64) -> EncoderSuite:
    return EncoderSuite(
        clip_backend=create_backend("stub_clip", token_count=16, embed_dim=24, seed=101),
        face_backend=create_backend("stub_face", token_count=1, embed_dim=32, seed=0),
        text_encoder=make_hash_text_encoder(d_model, seed=7),
    )
