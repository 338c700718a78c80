"""Procedural face-like sprite dataset with deterministic identities.

Identity is carried by colors and geometry; variants jitter pose and
expression. Sprites are drawn pre-centered so face alignment is a no-op, and
pixel values are quantized to 8-bit levels at render time so a PNG round trip
is bit-exact.
"""

import colorsys
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .encoders import EncoderBackend, align_face, create_backend
from .errors import GenerationError, InputError

SPRITE_SIZE = 32
CROSS_IDENTITY_COSINE_LIMIT = 0.9
MAX_DATASET_RETRIES = 5
MANIFEST_NAME = "manifest.json"
_FORMAT_VERSION = 1


def derive_seed(*parts) -> int:
    """Stable 63-bit stream seed from a tuple of labels."""
    text = "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little") >> 1


def _hsv(h: float, s: float, v: float) -> Tensor:
    return torch.tensor(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=torch.float32)


def sample_identity_base(seed: int, index: int, n_identities: int) -> Dict[str, float]:
    """Base sprite parameters for one identity; face hues are stratified."""
    gen = torch.Generator().manual_seed(derive_seed(seed, "identity", index))

    def u(lo: float, hi: float) -> float:
        return float(torch.rand((), generator=gen)) * (hi - lo) + lo

    return {
        "bg_h": u(0.0, 1.0),
        "bg_s": u(0.05, 0.2),
        "bg_v": u(0.4, 0.6),
        "face_h": (index + u(0.1, 0.9)) / n_identities,
        "face_s": u(0.45, 0.8),
        "face_v": u(0.6, 0.9),
        "face_a": u(0.55, 0.72),
        "face_b": u(0.65, 0.85),
        "hair_h": u(0.0, 1.0),
        "hair_v": u(0.15, 0.75),
        "hair_top": u(0.45, 0.7),
        "eye_h": u(0.0, 1.0),
        "eye_v": u(0.1, 0.4),
        "eye_dx": u(0.2, 0.34),
        "eye_dy": u(0.15, 0.3),
        "eye_r": u(0.07, 0.12),
        "mouth_h": u(0.0, 1.0),
        "mouth_v": u(0.2, 0.6),
        "mouth_y": u(0.32, 0.5),
        "mouth_w": u(0.25, 0.42),
        "mouth_t": u(0.05, 0.09),
        "mouth_curve": u(-0.45, 0.45),
    }


def sample_variant_params(seed: int, index: int, variant: int) -> Dict[str, float]:
    gen = torch.Generator().manual_seed(derive_seed(seed, "variant", index, variant))

    def u(lo: float, hi: float) -> float:
        return float(torch.rand((), generator=gen)) * (hi - lo) + lo

    return {
        "theta": u(-0.18, 0.18),
        "scale": u(0.92, 1.08),
        "tx": u(-0.06, 0.06),
        "ty": u(-0.06, 0.06),
        "curve_delta": u(-0.35, 0.35),
        "eye_scale": u(0.8, 1.2),
    }


def render_sprite(base: Mapping[str, float], variant: Mapping[str, float], size: int = SPRITE_SIZE) -> Tensor:
    """Draw one sprite as ``[size, size, 3]`` floats on the 8-bit lattice."""
    ys, xs = torch.meshgrid(torch.arange(size), torch.arange(size), indexing="ij")
    u = (xs.float() + 0.5) / size * 2 - 1
    v = (ys.float() + 0.5) / size * 2 - 1

    cos_t, sin_t = math.cos(variant["theta"]), math.sin(variant["theta"])
    x = ((u - variant["tx"]) * cos_t + (v - variant["ty"]) * sin_t) / variant["scale"]
    y = (-(u - variant["tx"]) * sin_t + (v - variant["ty"]) * cos_t) / variant["scale"]

    img = _hsv(base["bg_h"], base["bg_s"], base["bg_v"]).expand(size, size, 3).clone()

    def paint(mask: Tensor, color: Tensor):
        img[mask] = color

    face = (x / base["face_a"]) ** 2 + (y / base["face_b"]) ** 2 <= 1.0
    paint(face, _hsv(base["face_h"], base["face_s"], base["face_v"]))

    hair = face & (y <= -base["face_b"] * base["hair_top"])
    paint(hair, _hsv(base["hair_h"], 0.6, base["hair_v"]))

    eye_r = base["eye_r"] * variant["eye_scale"]
    for sign in (-1.0, 1.0):
        eye = (x - sign * base["eye_dx"]) ** 2 + (y + base["eye_dy"]) ** 2 <= eye_r**2
        paint(eye, _hsv(base["eye_h"], 0.7, base["eye_v"]))

    curve = base["mouth_curve"] + variant["curve_delta"]
    mouth = (torch.abs(y - (base["mouth_y"] + curve * x**2)) <= base["mouth_t"]) & (
        torch.abs(x) <= base["mouth_w"]
    )
    paint(mouth, _hsv(base["mouth_h"], 0.75, base["mouth_v"]))

    return (img.clamp(0.0, 1.0) * 255.0).round() / 255.0


@dataclass
class SpriteVariant:
    variant_id: str
    params: Dict[str, float]
    image: Tensor


@dataclass
class IdentityRecord:
    identity_id: str
    base: Dict[str, float]
    variants: List[SpriteVariant]

    def caption(self) -> str:
        mood = "smiling" if self.base["mouth_curve"] >= 0 else "frowning"
        return f"a {mood} portrait photo of person {self.identity_id}"


@dataclass
class TrainingPair:
    identity_id: str
    id_variant: str
    target_variant: str
    id_image: Tensor
    target_image: Tensor
    caption: str


@dataclass
class SyntheticDataset:
    seed: int
    image_size: int
    identities: List[IdentityRecord] = field(default_factory=list)

    def images(self) -> List[Tuple[str, str, Tensor]]:
        out = []
        for rec in self.identities:
            for var in rec.variants:
                out.append((rec.identity_id, var.variant_id, var.image))
        return out

    def pairs(self) -> List[TrainingPair]:
        """All ordered pairs of distinct variants within each identity."""
        out = []
        for rec in self.identities:
            caption = rec.caption()
            for a in rec.variants:
                for b in rec.variants:
                    if a.variant_id == b.variant_id:
                        continue
                    out.append(
                        TrainingPair(
                            identity_id=rec.identity_id,
                            id_variant=a.variant_id,
                            target_variant=b.variant_id,
                            id_image=a.image,
                            target_image=b.image,
                            caption=caption,
                        )
                    )
        return out


def default_face_backend() -> EncoderBackend:
    return create_backend("stub_face", token_count=1, embed_dim=32, seed=0)


def _build_dataset(seed: int, n_identities: int, variants_per_identity: int, size: int) -> SyntheticDataset:
    ds = SyntheticDataset(seed=seed, image_size=size)
    for i in range(n_identities):
        base = sample_identity_base(seed, i, n_identities)
        variants = []
        for j in range(variants_per_identity):
            params = sample_variant_params(seed, i, j)
            variants.append(SpriteVariant(variant_id=f"v{j}", params=params, image=render_sprite(base, params, size)))
        ds.identities.append(IdentityRecord(identity_id=f"id_{i:03d}", base=base, variants=variants))
    return ds


def _identities_separable(ds: SyntheticDataset, face_backend: EncoderBackend) -> bool:
    embeds: List[Tuple[str, Tensor]] = []
    for identity_id, _, img in ds.images():
        vec = face_backend(align_face(img, ds.image_size))[0]
        embeds.append((identity_id, vec / vec.norm()))
    for i in range(len(embeds)):
        for j in range(i + 1, len(embeds)):
            if embeds[i][0] != embeds[j][0]:
                if float(embeds[i][1] @ embeds[j][1]) >= CROSS_IDENTITY_COSINE_LIMIT:
                    return False
    return True


def generate_synthetic_dataset(
    n_identities: int,
    variants_per_identity: int,
    seed: int,
    face_backend: Optional[EncoderBackend] = None,
    size: int = SPRITE_SIZE,
    max_retries: int = MAX_DATASET_RETRIES,
) -> SyntheticDataset:
    """Deterministic sprite dataset whose identities the stub encoder separates.

    When any cross-identity pair of images embeds with cosine >= 0.9 the whole
    dataset is regenerated from the next seed, at most ``max_retries`` times.
    """
    if n_identities < 2 or variants_per_identity < 2:
        raise InputError(
            f"need at least 2 identities and 2 variants, got {n_identities} and {variants_per_identity}"
        )
    backend = face_backend if face_backend is not None else default_face_backend()
    for attempt in range(max_retries + 1):
        ds = _build_dataset(seed + attempt, n_identities, variants_per_identity, size)
        if _identities_separable(ds, backend):
            return ds
    raise GenerationError(
        f"could not draw {n_identities} separable identities within {max_retries} retries from seed {seed}"
    )


def save_image(img: torch.Tensor, path) -> Path:
    """Write an [h, w, 3] float image in [0, 1] as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = (img.clamp(0.0, 1.0).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")
    return path


def load_image(path) -> torch.Tensor:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no image file at {path}")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def export_dataset(ds: SyntheticDataset, out_dir, config_digest: str = "") -> Path:
    """Write PNGs plus a JSON manifest; the manifest lands last as the completeness marker."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": _FORMAT_VERSION, "seed": ds.seed, "image_size": ds.image_size, "identities": []}
    if config_digest:
        manifest["config_digest"] = config_digest
    for rec in ds.identities:
        entry = {"identity_id": rec.identity_id, "base": rec.base, "variants": []}
        for var in rec.variants:
            fname = f"{rec.identity_id}_{var.variant_id}.png"
            save_image(var.image, out / fname)
            entry["variants"].append({"variant_id": var.variant_id, "params": var.params, "file": fname})
        manifest["identities"].append(entry)
    target = out / MANIFEST_NAME
    tmp = target.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(target)
    return target


def import_dataset(in_dir) -> SyntheticDataset:
    root = Path(in_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise InputError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise InputError(f"unsupported dataset format version {manifest.get('format_version')!r}")
    ds = SyntheticDataset(seed=manifest["seed"], image_size=manifest["image_size"])
    for entry in manifest["identities"]:
        variants = []
        for var in entry["variants"]:
            path = root / var["file"]
            if not path.is_file():
                raise InputError(f"dataset image listed in manifest is missing: {path}")
            variants.append(
                SpriteVariant(variant_id=var["variant_id"], params=var["params"], image=load_image(path))
            )
        ds.identities.append(IdentityRecord(identity_id=entry["identity_id"], base=entry["base"], variants=variants))
    return ds
