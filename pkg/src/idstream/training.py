"""Backbone pretraining, identity-enhanced adapter training, and the
entangled-training ablation.

Training runs in two phases. First the backbone learns the data
distribution by caption-conditioned denoising with classifier-free
dropout, the desk-scale stand-in for starting from a pretrained
text-to-image checkpoint: it is what makes the cross-attention sites
(query projections, normalization, output projection) meaningful, and
adapters can only steer a backbone that already has a prior. The backbone
is then frozen and only the adapter partition (mappers plus image
cross-attention K'/V') is optimized. In identity-enhanced mode the text
cross-attention is deactivated and captions never enter the batch.
"""

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
from torch import Tensor

from .data import SyntheticDataset, TrainingPair
from .diffusion import NoiseSchedule, latent_from_image, q_sample_batch
from .encoders import EncoderSuite, align_face
from .errors import ConfigError, InputError, ShapeError, StateError
from .unet import ConditionBundle, ModelWeights, unet_forward

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
SMOOTHING_WINDOW = 50


class TrainMode(str, Enum):
    IDENTITY_ENHANCED = "identity_enhanced"
    ENTANGLED = "entangled"


@dataclass(frozen=True)
class TrainConfig:
    """Defaults are the desk-scale reference run.

    Full-scale adapter training on a real backbone runs far longer at a much
    smaller step size (typically lr 1e-4, global batch 64); with a frozen toy
    backbone and 500 steps the adapters need the larger step size to traverse
    to their basin.
    """

    learning_rate: float = 1.5e-2
    weight_decay: float = 0.01
    batch_size: int = 32
    steps: int = 500
    seed: int = 0
    mode: TrainMode = TrainMode.IDENTITY_ENHANCED
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-3

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError(f"learning_rate must be > 0 and weight_decay >= 0, got {self.learning_rate}, {self.weight_decay}")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError(f"batch_size and steps must be positive, got {self.batch_size}, {self.steps}")
        if self.pretrain_steps < 0 or self.pretrain_lr <= 0:
            raise ConfigError(
                f"pretrain_steps must be >= 0 and pretrain_lr > 0, got {self.pretrain_steps}, {self.pretrain_lr}"
            )


@dataclass
class TrainingBatch:
    """Precomputed per-pair tensors; mappers apply inside the loss so their gradients flow."""

    z0: Tensor  # [b, c, h, w] target latents
    clip_tokens: Tensor  # [b, n_clip, clip_dim]
    face_tokens: Tensor  # [b, 1, face_dim]
    caption_tokens: Optional[Tensor] = None  # [b, n_text, d_model], entangled mode only

    def __post_init__(self):
        b = self.z0.shape[0]
        if b < 1:
            raise InputError("batch must be nonempty")
        for name, tok in (("clip_tokens", self.clip_tokens), ("face_tokens", self.face_tokens)):
            if tok.shape[0] != b:
                raise ShapeError(f"{name} batch {tok.shape[0]} != latent batch {b}")
        if self.caption_tokens is not None and self.caption_tokens.shape[0] != b:
            raise ShapeError(f"caption_tokens batch {self.caption_tokens.shape[0]} != latent batch {b}")

    @property
    def size(self) -> int:
        return self.z0.shape[0]

    def select(self, idx: Tensor) -> "TrainingBatch":
        return TrainingBatch(
            z0=self.z0[idx],
            clip_tokens=self.clip_tokens[idx],
            face_tokens=self.face_tokens[idx],
            caption_tokens=None if self.caption_tokens is None else self.caption_tokens[idx],
        )


def prepare_batch(
    pairs: Sequence[TrainingPair],
    suite: EncoderSuite,
    mode: TrainMode,
    downscale: int = 2,
) -> TrainingBatch:
    """Encode training pairs once; captions are only touched in entangled mode."""
    if len(pairs) == 0:
        raise InputError("cannot prepare an empty batch")
    z0 = torch.stack([latent_from_image(p.target_image, downscale) for p in pairs])
    aligned = [align_face(p.id_image, suite.align_size) for p in pairs]
    clip_tokens = torch.stack([suite.clip_backend(img) for img in aligned])
    face_tokens = torch.stack([suite.face_backend(img) for img in aligned])
    caption_tokens = None
    if mode == TrainMode.ENTANGLED:
        encoded = [suite.text_encoder(p.caption) for p in pairs]
        widths = {e.shape[0] for e in encoded}
        if len(widths) != 1:
            raise ShapeError(f"entangled batches need equal caption token counts, got {sorted(widths)}")
        caption_tokens = torch.stack(encoded)
    return TrainingBatch(z0=z0, clip_tokens=clip_tokens, face_tokens=face_tokens, caption_tokens=caption_tokens)


def batch_condition(batch: TrainingBatch, weights: ModelWeights, mode: TrainMode) -> ConditionBundle:
    mapped = torch.cat(
        [weights.mappers.clip_mapper(batch.clip_tokens), weights.mappers.face_mapper(batch.face_tokens)],
        dim=-2,
    )
    if mode == TrainMode.IDENTITY_ENHANCED:
        return ConditionBundle(c_id=mapped, c_t=None, text_active=False)
    if batch.caption_tokens is None:
        raise StateError("entangled mode needs caption tokens in the batch")
    return ConditionBundle(c_id=mapped, c_t=batch.caption_tokens, text_active=True)


def training_loss(
    batch: TrainingBatch,
    weights: ModelWeights,
    sched: NoiseSchedule,
    mode: TrainMode,
    *,
    generator: torch.Generator,
    predictor: Optional[Callable[[Tensor, Tensor, ConditionBundle], Tensor]] = None,
) -> Tensor:
    """Mean over the batch of the squared noise-prediction error norm."""
    b = batch.size
    t = torch.randint(1, sched.timesteps + 1, (b,), generator=generator)
    eps = torch.randn(batch.z0.shape, generator=generator)
    z_t = q_sample_batch(batch.z0, t, eps, sched)
    cond = batch_condition(batch, weights, mode)
    predict = predictor if predictor is not None else (lambda z, tt, cc: unet_forward(weights, z, tt, cc))
    eps_hat = predict(z_t, t, cond)
    if eps_hat.shape != eps.shape:
        raise ShapeError(f"prediction shape {tuple(eps_hat.shape)} != noise shape {tuple(eps.shape)}")
    return ((eps - eps_hat) ** 2).reshape(b, -1).sum(dim=-1).mean()


@dataclass
class TrainResult:
    weights: ModelWeights
    trace: List[Tuple[int, float]]
    optimizer_state: Optional[Dict] = None


def _nonfinite_parameter_groups(weights: ModelWeights) -> List[str]:
    names = []
    for name, p in weights.trainable_named_parameters():
        bad = not torch.isfinite(p).all()
        if p.grad is not None:
            bad = bad or not torch.isfinite(p.grad).all()
        if bad:
            names.append(name)
    return names


PRETRAIN_DROP_EVERY = 10


def pretrain_base(
    dataset: SyntheticDataset,
    weights: ModelWeights,
    config: TrainConfig,
    suite: EncoderSuite,
    sched: NoiseSchedule,
) -> List[Tuple[int, float]]:
    """Caption-conditioned denoising pretraining of the backbone partition.

    Every ``PRETRAIN_DROP_EVERY``-th step trains without conditioning so the
    backbone also learns the unconditional branch that classifier-free
    guidance needs. The identity context never enters the prediction, so the
    adapter partition receives no gradient and keeps its initialization. The
    backbone is unfrozen only for the duration of this call.
    """
    if config.pretrain_steps == 0:
        return []
    pairs = dataset.pairs()
    if len(pairs) == 0:
        raise InputError("dataset yields no training pairs")
    table = prepare_batch(pairs, suite, TrainMode.ENTANGLED)
    backbone = [p for _, p in weights.frozen_named_parameters()]
    for p in backbone:
        p.requires_grad_(True)
    optimizer = torch.optim.AdamW(
        backbone, lr=config.pretrain_lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0
    )
    gen = torch.Generator().manual_seed(config.seed)
    trace: List[Tuple[int, float]] = []
    try:
        for step in range(config.pretrain_steps):
            idx = torch.randint(len(pairs), (config.batch_size,), generator=gen)
            drop = step % PRETRAIN_DROP_EVERY == PRETRAIN_DROP_EVERY - 1
            loss = training_loss(
                table.select(idx),
                weights,
                sched,
                TrainMode.ENTANGLED,
                generator=gen,
                predictor=lambda z, t, cond: unet_forward(
                    weights, z, t,
                    None if drop else ConditionBundle(c_id=None, c_t=cond.c_t, text_active=True),
                ),
            )
            if not torch.isfinite(loss):
                raise StateError(f"non-finite pretraining loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            trace.append((step, float(loss.detach())))
    finally:
        for p in backbone:
            p.requires_grad_(False)
            p.grad = None
    return trace


def train(
    dataset: SyntheticDataset,
    weights: ModelWeights,
    config: TrainConfig,
    suite: EncoderSuite,
    sched: NoiseSchedule,
) -> TrainResult:
    """Optimize the adapter partition with AdamW; fully deterministic per seed."""
    pairs = dataset.pairs()
    if len(pairs) == 0:
        raise InputError("dataset yields no training pairs")
    table = prepare_batch(pairs, suite, config.mode)
    optimizer = torch.optim.AdamW(
        weights.trainable_parameters(),
        lr=config.learning_rate,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
        weight_decay=config.weight_decay,
    )
    gen = torch.Generator().manual_seed(config.seed)
    trace: List[Tuple[int, float]] = []
    for step in range(config.steps):
        idx = torch.randint(len(pairs), (config.batch_size,), generator=gen)
        loss = training_loss(table.select(idx), weights, sched, config.mode, generator=gen)
        if not torch.isfinite(loss):
            groups = ", ".join(_nonfinite_parameter_groups(weights)) or "none identified"
            raise StateError(f"non-finite loss at step {step}; offending parameter groups: {groups}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        trace.append((step, float(loss.detach())))
    return TrainResult(weights=weights, trace=trace, optimizer_state=optimizer.state_dict())


def write_loss_trace(trace: Sequence[Tuple[int, float]], path, config_digest: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if config_digest:
            fh.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows(trace)
    return path


def read_loss_trace(path) -> List[Tuple[int, float]]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if header != ["step", "loss"]:
            raise InputError(f"unexpected loss trace header: {header}")
        return [(int(step), float(loss)) for step, loss in reader]


def smoothed_loss_ratio(trace: Sequence[Tuple[int, float]], window: int = SMOOTHING_WINDOW) -> float:
    """Mean of the last ``window`` losses over the mean of the first ``window``."""
    if len(trace) < 2 * window:
        raise InputError(f"trace of {len(trace)} steps is too short for window {window}")
    values = [loss for _, loss in trace]
    head = sum(values[:window]) / window
    tail = sum(values[-window:]) / window
    return tail / head
