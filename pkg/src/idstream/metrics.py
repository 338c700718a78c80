"""Similarity metrics and identity-fidelity fusion over pluggable encoders.

Per-record metrics are pure functions of (generated, reference, prompt) and
the chosen encoder backends; reports aggregate them per method and fuse the
two identity metrics into a single z-scored axis when several methods are
evaluated together.
"""

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import torch
from torch import Tensor

from .data import load_image
from .encoders import EncoderBackend, align_face, validate_image
from .errors import DegenerateStatisticsError, InputError, ShapeError, StateError

# Table column order is part of the report contract.
CSV_COLUMNS = ("CLIP-T", "CLIP-I", "M_FaceNet")
COSINE_SLACK = 1e-6
_NORM_FLOOR = 1e-12
DEFAULT_ALIGN_SIZE = 32
DEFAULT_METHOD = "ours"

Aligner = Callable[[Tensor], Tensor]
TextBackend = Callable[[str], Tensor]


def default_aligner(size: int = DEFAULT_ALIGN_SIZE) -> Aligner:
    return lambda img: align_face(img, size)


def cosine(u: Tensor, v: Tensor) -> float:
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError(f"cosine expects 1-D vectors, got {tuple(u.shape)} and {tuple(v.shape)}")
    if u.shape != v.shape:
        raise ShapeError(f"cosine operands differ in length: {u.shape[0]} vs {v.shape[0]}")
    nu = float(u.norm())
    nv = float(v.norm())
    if nu < _NORM_FLOOR or nv < _NORM_FLOOR:
        raise DegenerateStatisticsError("cosine is undefined for (near-)zero vectors")
    return float(torch.dot(u, v)) / (nu * nv)


def pool_tokens(tokens: Tensor) -> Tensor:
    """Mean over the token axis: [n, d] -> [d]."""
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ShapeError(f"expected [n >= 1, d] token matrix, got {tuple(tokens.shape)}")
    return tokens.mean(dim=0)


def make_paired_text_encoder(embed_dim: int, seed: int) -> TextBackend:
    """Prompt embedding living in the image-embedding space of the stub backends.

    Bag of hashed word vectors, mean-pooled; a stand-in for a real paired
    text tower, swappable without touching the metric functions.
    """
    if embed_dim < 1:
        raise InputError("embed_dim must be positive")
    cache: Dict[str, Tensor] = {}

    def word_vector(word: str) -> Tensor:
        if word not in cache:
            digest = hashlib.blake2b(f"{seed}:{word}".encode(), digest_size=8).digest()
            gen = torch.Generator().manual_seed(int.from_bytes(digest, "big") % (2**63))
            vec = torch.randn(embed_dim, generator=gen)
            cache[word] = vec / vec.norm().clamp_min(_NORM_FLOOR)
        return cache[word]

    def encode(prompt: str) -> Tensor:
        words = prompt.lower().split()
        if not words:
            return torch.zeros(embed_dim)
        return torch.stack([word_vector(w) for w in words]).mean(dim=0)

    return encode


@dataclass
class EvalRecord:
    generated: Tensor
    reference: Tensor
    prompt: str
    method: str = DEFAULT_METHOD

    def __post_init__(self):
        validate_image(self.generated)
        validate_image(self.reference)


def metric_m_facenet(rec: EvalRecord, face_backend: EncoderBackend, aligner: Aligner) -> float:
    """Identity similarity: cosine of aligned-face embeddings."""
    gen = face_backend(aligner(rec.generated))
    ref = face_backend(aligner(rec.reference))
    return cosine(pool_tokens(gen), pool_tokens(ref))


def metric_clip_i(rec: EvalRecord, clip_backend: EncoderBackend, aligner: Aligner) -> float:
    """Image similarity over aligned faces, tokens pooled by mean before the cosine."""
    gen = clip_backend(aligner(rec.generated))
    ref = clip_backend(aligner(rec.reference))
    return cosine(pool_tokens(gen), pool_tokens(ref))


def metric_clip_t(rec: EvalRecord, clip_backend: EncoderBackend, text_backend: TextBackend) -> float:
    """Prompt adherence: cosine of the full generated image embedding and the prompt embedding."""
    img = pool_tokens(clip_backend(validate_image(rec.generated)))
    txt = text_backend(rec.prompt)
    return cosine(img, txt)


def z_score(values: Sequence[float]) -> List[float]:
    """Population z-scores; a degenerate (constant) population maps to all zeros."""
    if len(values) < 1:
        raise InputError("cannot z-score an empty population")
    mu = sum(values) / len(values)
    var = sum((v - mu) ** 2 for v in values) / len(values)
    sigma = math.sqrt(var)
    if sigma < _NORM_FLOOR:
        return [0.0] * len(values)
    return [(v - mu) / sigma for v in values]


def z_score_fuse(m_facenet_by_method: Sequence[float], clip_i_by_method: Sequence[float]) -> List[float]:
    """Mean of the two per-method z-scored identity metrics."""
    if len(m_facenet_by_method) != len(clip_i_by_method):
        raise ShapeError(
            f"metric vectors differ in length: {len(m_facenet_by_method)} vs {len(clip_i_by_method)}"
        )
    if len(m_facenet_by_method) < 2:
        raise InputError("z-score fusion needs at least two methods")
    za = z_score(m_facenet_by_method)
    zb = z_score(clip_i_by_method)
    return [(a + b) / 2.0 for a, b in zip(za, zb)]


@dataclass
class RecordMetrics:
    method: str
    m_facenet: Optional[float] = None
    clip_i: Optional[float] = None
    clip_t: Optional[float] = None
    error: Optional[str] = None


@dataclass
class MetricReport:
    records: List[RecordMetrics]
    aggregates: Dict[str, Dict[str, Optional[float]]]
    fused_identity: Optional[Dict[str, float]] = None


def _check_bounded(name: str, value: float) -> float:
    if not -1.0 - COSINE_SLACK <= value <= 1.0 + COSINE_SLACK:
        raise StateError(f"{name} left the cosine range: {value}")
    return value


def evaluate_records(
    records: Sequence[EvalRecord],
    *,
    clip_backend: EncoderBackend,
    face_backend: EncoderBackend,
    text_backend: TextBackend,
    aligner: Optional[Aligner] = None,
) -> MetricReport:
    """Score every record; a failing record is reported, not fatal."""
    if len(records) == 0:
        raise InputError("no records to evaluate")
    aligner = aligner or default_aligner()
    rows: List[RecordMetrics] = []
    for rec in records:
        row = RecordMetrics(method=rec.method)
        try:
            row.m_facenet = _check_bounded("M_FaceNet", metric_m_facenet(rec, face_backend, aligner))
            row.clip_i = _check_bounded("CLIP-I", metric_clip_i(rec, clip_backend, aligner))
            row.clip_t = _check_bounded("CLIP-T", metric_clip_t(rec, clip_backend, text_backend))
        except (ValueError, RuntimeError) as exc:
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)

    methods: List[str] = []
    for rec in records:
        if rec.method not in methods:
            methods.append(rec.method)
    aggregates: Dict[str, Dict[str, Optional[float]]] = {}
    for method in methods:
        ok = [r for r in rows if r.method == method and r.error is None]
        aggregates[method] = {
            "clip_t": sum(r.clip_t for r in ok) / len(ok) if ok else None,
            "clip_i": sum(r.clip_i for r in ok) / len(ok) if ok else None,
            "m_facenet": sum(r.m_facenet for r in ok) / len(ok) if ok else None,
        }

    fused = None
    fusable = [m for m in methods if aggregates[m]["m_facenet"] is not None]
    if len(fusable) >= 2:
        scores = z_score_fuse(
            [aggregates[m]["m_facenet"] for m in fusable],
            [aggregates[m]["clip_i"] for m in fusable],
        )
        fused = dict(zip(fusable, scores))
    return MetricReport(records=rows, aggregates=aggregates, fused_identity=fused)


def read_eval_manifest(path) -> List[EvalRecord]:
    """JSON-lines manifest: generated path, reference path, prompt, optional method."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no evaluation manifest at {path}")
    records: List[EvalRecord] = []
    root = path.parent
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"manifest line {lineno} is not valid JSON: {exc}") from exc
        missing = [k for k in ("generated", "reference", "prompt") if k not in entry]
        if missing:
            raise InputError(f"manifest line {lineno} lacks keys: {missing}")

        def resolve(p: str) -> Path:
            q = Path(p)
            return q if q.is_absolute() else root / q

        records.append(
            EvalRecord(
                generated=load_image(resolve(entry["generated"])),
                reference=load_image(resolve(entry["reference"])),
                prompt=entry["prompt"],
                method=entry.get("method", DEFAULT_METHOD),
            )
        )
    if not records:
        raise InputError(f"evaluation manifest {path} holds no records")
    return records


def report_to_dict(report: MetricReport) -> dict:
    return {
        "records": [
            {
                "method": r.method,
                "m_facenet": r.m_facenet,
                "clip_i": r.clip_i,
                "clip_t": r.clip_t,
                "error": r.error,
            }
            for r in report.records
        ],
        "aggregates": report.aggregates,
        "fused_identity": report.fused_identity,
    }


def write_report_json(report: MetricReport, path, config_digest: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tree = report_to_dict(report)
    if config_digest:
        tree["config_digest"] = config_digest
    path.write_text(json.dumps(tree, indent=2, sort_keys=True))
    return path


def write_report_csv(report: MetricReport, path, config_digest: str = "") -> Path:
    """One row per method; columns follow CSV_COLUMNS."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if config_digest:
            fh.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(fh)
        writer.writerow(["method", *CSV_COLUMNS])
        for method, agg in report.aggregates.items():
            cells = [
                "" if agg[key] is None else f"{agg[key]:.6f}"
                for key in ("clip_t", "clip_i", "m_facenet")
            ]
            writer.writerow([method, *cells])
    return path
