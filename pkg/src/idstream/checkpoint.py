"""Checkpoint persistence with explicit tensor headers.

Layout: an 8-byte magic, a little-endian u64 header length, a JSON header,
then the raw tensor payload. The header carries the run config snapshot, the
frozen-partition digest, RNG seeds, the optimizer state skeleton, and one
directory entry (name / shape / dtype / offset) per tensor. Loading rebuilds
the model from the config snapshot, copies every tensor bit for bit, and
refuses the file if the frozen partition does not hash to the recorded digest.
"""

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import Tensor

from .config import RunConfig, build_model_weights, config_digest, run_config_from_dict, run_config_to_dict
from .errors import InputError
from .unet import ModelWeights

CHECKPOINT_MAGIC = b"IDSCKPT1"
FORMAT_VERSION = 1

_OPTIMIZER_PREFIX = "optim."


@dataclass
class CheckpointBundle:
    config: RunConfig
    weights: ModelWeights
    frozen_digest: str
    config_digest: str
    rng_seeds: Dict[str, int] = field(default_factory=dict)
    optimizer_state: Optional[Dict] = None
    format_version: int = FORMAT_VERSION


def bundle_weights(
    weights: ModelWeights,
    config: RunConfig,
    optimizer_state: Optional[Dict] = None,
    rng_seeds: Optional[Dict[str, int]] = None,
) -> CheckpointBundle:
    return CheckpointBundle(
        config=config,
        weights=weights,
        frozen_digest=weights.frozen_digest(),
        config_digest=config_digest(config),
        rng_seeds=dict(rng_seeds or {}),
        optimizer_state=optimizer_state,
    )


def _pack_tree(obj, tensors: Dict[str, Tensor], path: str):
    """Replace tensor leaves with directory references, keeping exact types."""
    if torch.is_tensor(obj):
        tensors[path] = obj
        return {"t": "tensor", "ref": path}
    if isinstance(obj, dict):
        items = []
        for key, value in obj.items():
            if not isinstance(key, (str, int)):
                raise InputError(f"optimizer state key {key!r} is not str or int")
            kind = "int" if isinstance(key, int) else "str"
            items.append([kind, key, _pack_tree(value, tensors, f"{path}.{key}")])
        return {"t": "dict", "items": items}
    if isinstance(obj, tuple):
        return {"t": "tuple", "v": [_pack_tree(v, tensors, f"{path}[{i}]") for i, v in enumerate(obj)]}
    if isinstance(obj, list):
        return {"t": "list", "v": [_pack_tree(v, tensors, f"{path}[{i}]") for i, v in enumerate(obj)]}
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise InputError(f"optimizer state holds unserializable {type(obj).__name__} at {path}")


def _unpack_tree(obj, tensors: Dict[str, Tensor]):
    if isinstance(obj, dict):
        kind = obj["t"]
        if kind == "tensor":
            return tensors[obj["ref"]]
        if kind == "dict":
            return {
                (int(key) if key_kind == "int" else key): _unpack_tree(value, tensors)
                for key_kind, key, value in obj["items"]
            }
        if kind == "tuple":
            return tuple(_unpack_tree(v, tensors) for v in obj["v"])
        if kind == "list":
            return [_unpack_tree(v, tensors) for v in obj["v"]]
        raise InputError(f"unknown packed node kind {kind!r}")
    return obj


def _tensor_bytes(t: Tensor) -> bytes:
    return t.detach().contiguous().numpy().tobytes()


def save_checkpoint(bundle: CheckpointBundle, path) -> Path:
    """Atomic write: the finished file appears under its final name or not at all."""
    tensors: Dict[str, Tensor] = {
        name: p for name, p in (
            bundle.weights.trainable_named_parameters() + bundle.weights.frozen_named_parameters()
        )
    }
    optimizer_packed = None
    if bundle.optimizer_state is not None:
        optimizer_packed = _pack_tree(bundle.optimizer_state, tensors, _OPTIMIZER_PREFIX + "state")

    directory: List[Dict] = []
    payload = bytearray()
    for name in sorted(tensors):
        raw = _tensor_bytes(tensors[name])
        directory.append(
            {
                "name": name,
                "shape": list(tensors[name].shape),
                "dtype": str(tensors[name].dtype).removeprefix("torch."),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)

    header = {
        "format_version": bundle.format_version,
        "byte_order": sys.byteorder,
        "config": run_config_to_dict(bundle.config),
        "config_digest": bundle.config_digest,
        "frozen_digest": bundle.frozen_digest,
        "rng_seeds": bundle.rng_seeds,
        "optimizer": optimizer_packed,
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        fh.write(payload)
    tmp.replace(path)
    return path


def _read_tensor(payload: bytes, entry: Dict) -> Tensor:
    count = math.prod(entry["shape"])
    dtype = np.dtype(entry["dtype"])
    if dtype.itemsize * count != entry["nbytes"]:
        raise InputError(f"tensor {entry['name']!r} directory entry is inconsistent")
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
    return torch.from_numpy(arr.copy()).reshape(entry["shape"])


def load_checkpoint(path) -> CheckpointBundle:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no checkpoint file at {path}")
    blob = path.read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise InputError(f"{path} is not a checkpoint file")
    header_len = int.from_bytes(blob[8:16], "little")
    header = json.loads(blob[16 : 16 + header_len].decode())
    if header["format_version"] != FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint format version {header['format_version']!r}")
    if header["byte_order"] != sys.byteorder:
        raise InputError(
            f"checkpoint was written on a {header['byte_order']}-endian machine; this one is {sys.byteorder}"
        )
    payload = blob[16 + header_len :]

    tensors = {entry["name"]: _read_tensor(payload, entry) for entry in header["tensors"]}

    config = run_config_from_dict(header["config"])
    weights = build_model_weights(config)
    expected = dict(weights.trainable_named_parameters() + weights.frozen_named_parameters())
    stored_params = {n for n in tensors if not n.startswith(_OPTIMIZER_PREFIX)}
    if stored_params != set(expected):
        missing = sorted(set(expected) - stored_params)
        extra = sorted(stored_params - set(expected))
        raise InputError(f"checkpoint tensors do not match the model: missing {missing}, extra {extra}")
    with torch.no_grad():
        for name, param in expected.items():
            stored = tensors[name]
            if stored.shape != param.shape or stored.dtype != param.dtype:
                raise InputError(
                    f"tensor {name!r} has shape {tuple(stored.shape)} dtype {stored.dtype},"
                    f" model expects {tuple(param.shape)} {param.dtype}"
                )
            param.copy_(stored)

    if weights.frozen_digest() != header["frozen_digest"]:
        raise InputError("frozen-partition digest mismatch; checkpoint is corrupt or mislabeled")

    optimizer_state = None
    if header["optimizer"] is not None:
        optimizer_state = _unpack_tree(header["optimizer"], tensors)

    return CheckpointBundle(
        config=config,
        weights=weights,
        frozen_digest=header["frozen_digest"],
        config_digest=header["config_digest"],
        rng_seeds={k: int(v) for k, v in header["rng_seeds"].items()},
        optimizer_state=optimizer_state,
        format_version=header["format_version"],
    )
