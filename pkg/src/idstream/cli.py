"""Command-line surface binding data synthesis, training, generation, and evaluation.

Every command is deterministic given its config and seeds; every artifact it
writes embeds the digest of the config that produced it. Exit codes: 0 on
success, 1 for validation errors, 2 for runtime failures. The only environment
override is IDSTREAM_OUTPUT_ROOT, which re-roots relative output paths.
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from .attention import StyleAlignMode
from .checkpoint import bundle_weights, load_checkpoint, save_checkpoint
from .config import (
    build_encoder_suite,
    build_model_weights,
    build_schedule,
    config_digest,
    load_run_config,
)
from .data import export_dataset, generate_synthetic_dataset, import_dataset, load_image, save_image
from .errors import InputError
from .metrics import (
    default_aligner,
    evaluate_records,
    make_paired_text_encoder,
    read_eval_manifest,
    write_report_csv,
    write_report_json,
)
from .pipeline import GenerationRequest, generate
from .training import pretrain_base, train, write_loss_trace
from .unet import SelfAttentionVariant

OUTPUT_ROOT_ENV = "IDSTREAM_OUTPUT_ROOT"

_VARIANT_NAMES = {
    "self": SelfAttentionVariant.SELF,
    "mixed": SelfAttentionVariant.MIXED,
    "mutual": SelfAttentionVariant.MUTUAL,
    "self_attention": SelfAttentionVariant.SELF,
    "mixed_attention": SelfAttentionVariant.MIXED,
    "mutual_attention": SelfAttentionVariant.MUTUAL,
}

_REQUEST_KEYS = {
    "prompt",
    "negative_prompt",
    "id_images",
    "mix_weights",
    "style",
    "seed",
    "steps",
    "guidance_scale",
    "variant",
    "merge_cross_attention",
}


def resolve_out(path) -> Path:
    """Relative output paths land under IDSTREAM_OUTPUT_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _write_json(tree: Dict, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(tree, indent=2, sort_keys=True))
    return path


def cmd_synth_data(args) -> int:
    rc = load_run_config(args.config, overrides=args.set)
    ds = generate_synthetic_dataset(
        rc.data.n_identities,
        rc.data.variants_per_identity,
        seed=rc.data.seed,
        size=rc.data.image_size,
    )
    manifest = export_dataset(ds, resolve_out(args.out), config_digest=config_digest(rc))
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    rc = load_run_config(args.config, overrides=args.set)
    dataset = import_dataset(args.data)
    suite = build_encoder_suite(rc)
    sched = build_schedule(rc)
    weights = build_model_weights(rc)
    pretrain_base(dataset, weights, rc.train, suite, sched)
    result = train(dataset, weights, rc.train, suite, sched)

    digest = config_digest(rc)
    out = resolve_out(args.out)
    loss_path = write_loss_trace(result.trace, out / "loss.csv", config_digest=digest)
    bundle = bundle_weights(
        result.weights,
        rc,
        optimizer_state=result.optimizer_state,
        rng_seeds={"train": rc.train.seed, "data": dataset.seed},
    )
    ckpt_path = save_checkpoint(bundle, out / "checkpoint.ckpt")
    print(f"wrote {ckpt_path}")
    print(f"wrote {loss_path}")
    return 0


def _parse_mix_weights(raw: str) -> List[float]:
    try:
        return [float(part) for part in raw.split(",") if part.strip() != ""]
    except ValueError:
        raise InputError(f"mix weights {raw!r} are not comma-separated numbers") from None


def _load_request_file(path) -> Dict:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no request file at {p}")
    try:
        tree = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise InputError(f"request file {p} is not valid YAML: {exc}") from None
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise InputError(f"request file {p} must hold a mapping")
    unknown = sorted(set(tree) - _REQUEST_KEYS)
    if unknown:
        raise InputError(f"unknown request keys {unknown}; known keys: {sorted(_REQUEST_KEYS)}")
    return tree


def _coerce_variant(value) -> SelfAttentionVariant:
    if isinstance(value, SelfAttentionVariant):
        return value
    name = str(value).strip().lower()
    if name not in _VARIANT_NAMES:
        raise InputError(f"unknown variant {value!r}; choose from {sorted(_VARIANT_NAMES)}")
    return _VARIANT_NAMES[name]


def _coerce_style(value) -> StyleAlignMode:
    if isinstance(value, StyleAlignMode):
        return value
    try:
        return StyleAlignMode(str(value).strip().lower())
    except ValueError:
        raise InputError(
            f"unknown style {value!r}; choose from {[m.value for m in StyleAlignMode]}"
        ) from None


def cmd_generate(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    rc = bundle.config
    suite = build_encoder_suite(rc)
    sched = build_schedule(rc)

    tree = _load_request_file(args.request_file) if args.request_file else {}
    flags = {
        "prompt": args.prompt,
        "negative_prompt": args.negative_prompt,
        "id_images": args.id_image or None,
        "mix_weights": _parse_mix_weights(args.mix_weights) if args.mix_weights else None,
        "style": args.style,
        "seed": args.seed,
        "steps": args.steps,
        "guidance_scale": args.guidance_scale,
        "variant": args.variant,
        "merge_cross_attention": args.merge_cross_attention,
    }
    for key, value in flags.items():
        if value is not None:
            tree[key] = value

    inf = rc.inference
    defaults = {
        "prompt": "",
        "negative_prompt": inf.negative_prompt,
        "id_images": [],
        "mix_weights": None,
        "style": inf.style,
        "seed": inf.seed,
        "steps": inf.steps,
        "guidance_scale": inf.guidance_scale,
        "variant": inf.variant,
        "merge_cross_attention": inf.merge_cross_attention,
    }
    for key, value in defaults.items():
        tree.setdefault(key, value)

    request = GenerationRequest(
        prompt=str(tree["prompt"]),
        negative_prompt=str(tree["negative_prompt"]),
        id_images=tuple(load_image(p) for p in tree["id_images"]),
        mix_weights=None if tree["mix_weights"] is None else tuple(float(w) for w in tree["mix_weights"]),
        style=_coerce_style(tree["style"]),
        seed=int(tree["seed"]),
        steps=int(tree["steps"]),
        guidance_scale=float(tree["guidance_scale"]),
        variant=_coerce_variant(tree["variant"]),
        merge_cross_attention=bool(tree["merge_cross_attention"]),
    )

    result = generate(request, bundle.weights, suite, sched, config_digest=bundle.config_digest)
    out = resolve_out(args.out)
    image_path = save_image(result.image, out / "image.png")
    prov_path = _write_json(result.provenance, out / "provenance.json")
    print(f"wrote {image_path}")
    print(f"wrote {prov_path}")
    return 0


def cmd_evaluate(args) -> int:
    rc = load_run_config(args.config, overrides=args.set)
    records = read_eval_manifest(args.manifest)
    suite = build_encoder_suite(rc)
    text_backend = make_paired_text_encoder(suite.clip_backend.embed_dim, seed=rc.encoders.text_seed)
    report = evaluate_records(
        records,
        clip_backend=suite.clip_backend,
        face_backend=suite.face_backend,
        text_backend=text_backend,
        aligner=default_aligner(rc.encoders.align_size),
    )
    digest = config_digest(rc)
    out = resolve_out(args.out)
    json_path = write_report_json(report, out / "report.json", config_digest=digest)
    csv_path = write_report_csv(report, out / "report.csv", config_digest=digest)
    print(f"wrote {json_path}")
    print(f"wrote {csv_path}")
    return 0


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit code 2; here they are validation errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(sub: argparse.ArgumentParser):
    sub.add_argument("--config", default=None, help="run config file (YAML)")
    sub.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value; repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="idstream", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth-data", help="render a synthetic identity dataset")
    _add_config_flags(synth)
    synth.add_argument("--out", required=True, help="dataset directory")
    synth.set_defaults(func=cmd_synth_data)

    tr = commands.add_parser("train", help="train the adapter partition on a dataset")
    _add_config_flags(tr)
    tr.add_argument("--data", required=True, help="dataset directory from synth-data")
    tr.add_argument("--out", required=True, help="directory for checkpoint.ckpt and loss.csv")
    tr.set_defaults(func=cmd_train)

    gen = commands.add_parser("generate", help="generate one image from a checkpoint")
    gen.add_argument("--checkpoint", required=True, help="checkpoint file from train")
    gen.add_argument("--out", required=True, help="directory for image.png and provenance.json")
    gen.add_argument("--request-file", default=None, help="YAML request; flags override its values")
    gen.add_argument("--prompt", default=None)
    gen.add_argument("--negative-prompt", default=None)
    gen.add_argument(
        "--id-image", action="append", default=None, help="identity image path; repeatable"
    )
    gen.add_argument("--mix-weights", default=None, help="comma-separated identity mix weights")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--steps", type=int, default=None)
    gen.add_argument("--guidance-scale", type=float, default=None)
    gen.add_argument("--variant", default=None, choices=sorted(_VARIANT_NAMES))
    gen.add_argument("--style", default=None, choices=[m.value for m in StyleAlignMode])
    gen.add_argument(
        "--merge-cross-attention",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="merge text cross-attention into the identity stream",
    )
    gen.set_defaults(func=cmd_generate)

    ev = commands.add_parser("evaluate", help="score a generation manifest")
    _add_config_flags(ev)
    ev.add_argument("--manifest", required=True, help="JSONL manifest of generated/reference pairs")
    ev.add_argument("--out", required=True, help="directory for report.json and report.csv")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
