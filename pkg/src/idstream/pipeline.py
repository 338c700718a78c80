"""Dual-stream generation.

A text-only stream runs the plain backbone and donates its per-layer
self-attention K/V; the identity stream consumes those captures through the
selected attention variant, merges image and text cross-attention when asked,
and is steered by classifier-free guidance. Both streams share one initial
noise tensor and advance in lockstep over the same DDIM grid.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch
from torch import Tensor

from .attention import StyleAlignMode
from .diffusion import NoiseSchedule, ddim_step, ddim_timestep_pairs, image_from_latent
from .encoders import (
    EncoderSuite,
    IdentityEmbedding,
    extract_identity_embedding,
    mix_identities,
    stack_identities,
)
from .errors import InputError, ShapeError
from .unet import (
    AttentionHookSet,
    ConditionBundle,
    KVCapture,
    ModelWeights,
    SelfAttentionVariant,
    unet_forward,
)

PROVENANCE_VERSION = 1


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str = ""
    negative_prompt: str = ""
    id_images: Tuple[Tensor, ...] = ()
    mix_weights: Optional[Tuple[float, ...]] = None
    style: StyleAlignMode = StyleAlignMode.OFF
    seed: int = 0
    steps: int = 30
    guidance_scale: float = 5.0
    variant: SelfAttentionVariant = SelfAttentionVariant.MIXED
    merge_cross_attention: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise InputError(f"steps must be >= 1, got {self.steps}")
        if self.guidance_scale < 0:
            raise InputError(f"guidance_scale must be >= 0, got {self.guidance_scale}")
        if self.mix_weights is not None and len(self.mix_weights) != len(self.id_images):
            raise InputError(
                f"got {len(self.mix_weights)} mix weights for {len(self.id_images)} identity images"
            )


@dataclass
class GenerationResult:
    image: Tensor  # [h, w, 3] in [0, 1]
    latent: Tensor  # [c, h, w] final identity-stream latent
    provenance: Dict


def classifier_free_guidance(eps_cond: Tensor, eps_uncond: Tensor, scale: float) -> Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(
            f"branch shapes differ: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}"
        )
    return eps_uncond + scale * (eps_cond - eps_uncond)


def encode_prompt(suite: EncoderSuite, prompt: str) -> Optional[Tensor]:
    """Prompt -> [1, n, d_model] context, or None when the prompt has no tokens."""
    tokens = suite.text_encoder(prompt)
    if tokens.shape[0] == 0:
        return None
    return tokens.unsqueeze(0)


def build_identity_context(
    request: GenerationRequest, suite: EncoderSuite, weights: ModelWeights
) -> Optional[IdentityEmbedding]:
    """Stack identity embeddings by default; interpolate when mix weights are given."""
    if len(request.id_images) == 0:
        return None
    embeddings = [
        extract_identity_embedding(
            img,
            suite.clip_backend,
            suite.face_backend,
            weights.mappers,
            align_size=suite.align_size,
            source_id=f"id_image[{i}]",
        )
        for i, img in enumerate(request.id_images)
    ]
    if request.mix_weights is not None:
        return mix_identities(embeddings, request.mix_weights)
    return stack_identities(embeddings)


def capture_text_stream_kv(
    z_text: Tensor,
    t: int,
    c_t: Optional[Tensor],
    weights: ModelWeights,
) -> Tuple[Tensor, Dict[str, KVCapture]]:
    """Advance the text-only stream one prediction, returning its self-attention taps."""
    hooks = AttentionHookSet(variant=SelfAttentionVariant.SELF, capture_kv=True)
    cond = None if c_t is None else ConditionBundle(c_id=None, c_t=c_t, text_active=True)
    eps = unet_forward(weights, z_text, t, cond, hooks)
    return eps, hooks.captured


def denoise_identity_stream(
    z_id: Tensor,
    t: int,
    c_id: Optional[Tensor],
    c_t: Optional[Tensor],
    captures: Optional[Mapping[str, KVCapture]],
    request: GenerationRequest,
    weights: ModelWeights,
) -> Tensor:
    """One conditional prediction under the requested attention variant."""
    hooks = AttentionHookSet(
        variant=request.variant,
        style=request.style,
        inject=captures if request.variant != SelfAttentionVariant.SELF else None,
    )
    cond = ConditionBundle(
        c_id=c_id,
        c_t=c_t if request.merge_cross_attention else None,
        text_active=request.merge_cross_attention,
    )
    return unet_forward(weights, z_id, t, cond, hooks)


def _tensor_to_list(x: Tensor) -> List[float]:
    return [float(v) for v in x.reshape(-1)]


def generate(
    request: GenerationRequest,
    weights: ModelWeights,
    suite: EncoderSuite,
    sched: NoiseSchedule,
    config_digest: str = "",
) -> GenerationResult:
    """Run both streams in lockstep and decode the identity stream's latent."""
    c_t = encode_prompt(suite, request.prompt)
    if c_t is None and request.merge_cross_attention:
        raise InputError(
            "merge_cross_attention needs a non-empty prompt; disable the merge for"
            " identity-only generation"
        )
    neg_c_t = encode_prompt(suite, request.negative_prompt)
    identity = build_identity_context(request, suite, weights)
    c_id = None if identity is None else identity.tokens.unsqueeze(0)

    cfg = weights.config
    gen = torch.Generator().manual_seed(request.seed)
    z_init = torch.randn(
        (1, cfg.latent_channels, cfg.latent_size, cfg.latent_size), generator=gen
    )
    z_id = z_init.clone()
    z_text = z_init.clone()

    uncond = None if neg_c_t is None else ConditionBundle(c_id=None, c_t=neg_c_t, text_active=True)
    steps_detail: List[Dict] = []
    with torch.no_grad():
        for t, t_prev in ddim_timestep_pairs(sched, request.steps):
            eps_text, captures = capture_text_stream_kv(z_text, t, c_t, weights)
            eps_cond = denoise_identity_stream(z_id, t, c_id, c_t, captures, request, weights)
            # The unconditional branch drops both conditions and all captures.
            eps_uncond = unet_forward(weights, z_id, t, uncond, hooks=None)
            eps = classifier_free_guidance(eps_cond, eps_uncond, request.guidance_scale)
            steps_detail.append(
                {
                    "t": t,
                    "t_prev": t_prev,
                    "eps_cond": _tensor_to_list(eps_cond),
                    "eps_uncond": _tensor_to_list(eps_uncond),
                    "eps_fused": _tensor_to_list(eps),
                }
            )
            z_id = ddim_step(z_id, eps, t, t_prev, sched)
            z_text = ddim_step(z_text, eps_text, t, t_prev, sched)

        latent = z_id[0]
        image = image_from_latent(latent)
    provenance = {
        "format_version": PROVENANCE_VERSION,
        "seed": request.seed,
        "config_digest": config_digest,
        "prompt": request.prompt,
        "negative_prompt": request.negative_prompt,
        "variant": request.variant.value,
        "merge_cross_attention": request.merge_cross_attention,
        "style": request.style.value,
        "steps": request.steps,
        "guidance_scale": request.guidance_scale,
        "cfg_stream": "identity_only",
        "schedule": {
            "timesteps": sched.timesteps,
            "beta_start": float(sched.beta[0]),
            "beta_end": float(sched.beta[-1]),
        },
        "identity": {
            "image_count": len(request.id_images),
            "token_count": 0 if identity is None else identity.n_tokens,
            "mix_weights": None if request.mix_weights is None else list(request.mix_weights),
            "sources": [] if identity is None else list(identity.source_ids),
        },
        "steps_detail": steps_detail,
    }
    return GenerationResult(image=image, latent=latent, provenance=provenance)


def rederive_cfg_residual(provenance: Mapping) -> float:
    """Largest |fused − CFG(cond, uncond)| across all recorded steps."""
    scale = provenance["guidance_scale"]
    worst = 0.0
    for entry in provenance["steps_detail"]:
        cond = torch.tensor(entry["eps_cond"])
        uncond = torch.tensor(entry["eps_uncond"])
        fused = torch.tensor(entry["eps_fused"])
        redone = classifier_free_guidance(cond, uncond, scale)
        worst = max(worst, float((redone - fused).abs().max()))
    return worst
