"""Checkpoint format: bit-exact round trips, digest verification, error handling."""

import json

import pytest
import torch

from idstream.checkpoint import (
    CHECKPOINT_MAGIC,
    bundle_weights,
    load_checkpoint,
    save_checkpoint,
)
from idstream.config import build_encoder_suite, build_model_weights, build_schedule, run_config_from_dict
from idstream.data import generate_synthetic_dataset
from idstream.errors import InputError
from idstream.training import train


def tiny_run_config():
    return run_config_from_dict(
        {"train": {"steps": 3, "batch_size": 4}, "data": {"n_identities": 2, "variants_per_identity": 2}}
    )


def trained_bundle():
    rc = tiny_run_config()
    ds = generate_synthetic_dataset(rc.data.n_identities, rc.data.variants_per_identity, seed=rc.data.seed)
    result = train(ds, build_model_weights(rc), rc.train, build_encoder_suite(rc), build_schedule(rc))
    return bundle_weights(
        result.weights,
        rc,
        optimizer_state=result.optimizer_state,
        rng_seeds={"train": rc.train.seed, "data": rc.data.seed},
    )


BUNDLE = trained_bundle()


def all_named(weights):
    return dict(weights.trainable_named_parameters() + weights.frozen_named_parameters())


def assert_state_equal(a, b, path="optimizer"):
    assert type(a) is type(b), f"{path}: {type(a).__name__} != {type(b).__name__}"
    if torch.is_tensor(a):
        assert torch.equal(a, b) and a.dtype == b.dtype, f"{path}: tensor mismatch"
    elif isinstance(a, dict):
        assert sorted(map(repr, a)) == sorted(map(repr, b)), f"{path}: key sets differ"
        for key in a:
            assert_state_equal(a[key], b[key], f"{path}.{key}")
    elif isinstance(a, (list, tuple)):
        assert len(a) == len(b), f"{path}: length differs"
        for i, (x, y) in enumerate(zip(a, b)):
            assert_state_equal(x, y, f"{path}[{i}]")
    else:
        assert a == b, f"{path}: {a!r} != {b!r}"


class TestRoundTrip:
    def test_every_tensor_is_bit_identical(self, tmp_path):
        path = save_checkpoint(BUNDLE, tmp_path / "model.ckpt")
        loaded = load_checkpoint(path)
        original = all_named(BUNDLE.weights)
        restored = all_named(loaded.weights)
        assert sorted(original) == sorted(restored)
        for name in original:
            assert torch.equal(original[name], restored[name]), name
            assert original[name].dtype == restored[name].dtype, name

    def test_metadata_survives(self, tmp_path):
        loaded = load_checkpoint(save_checkpoint(BUNDLE, tmp_path / "model.ckpt"))
        assert loaded.config == BUNDLE.config
        assert loaded.frozen_digest == BUNDLE.frozen_digest
        assert loaded.config_digest == BUNDLE.config_digest
        assert loaded.rng_seeds == {"train": 0, "data": 0}
        assert loaded.format_version == BUNDLE.format_version

    def test_optimizer_state_is_bit_identical(self, tmp_path):
        loaded = load_checkpoint(save_checkpoint(BUNDLE, tmp_path / "model.ckpt"))
        assert BUNDLE.optimizer_state is not None
        assert_state_equal(BUNDLE.optimizer_state, loaded.optimizer_state)

    def test_save_load_save_reaches_byte_fixed_point(self, tmp_path):
        first = save_checkpoint(BUNDLE, tmp_path / "a.ckpt")
        loaded = load_checkpoint(first)
        second = save_checkpoint(loaded, tmp_path / "b.ckpt")
        assert first.read_bytes() == second.read_bytes()

    def test_partition_flags_restored(self, tmp_path):
        loaded = load_checkpoint(save_checkpoint(BUNDLE, tmp_path / "model.ckpt"))
        for _, p in loaded.weights.trainable_named_parameters():
            assert p.requires_grad
        for _, p in loaded.weights.frozen_named_parameters():
            assert not p.requires_grad

    def test_frozen_digest_matches_fresh_init_with_same_seed(self):
        assert BUNDLE.frozen_digest == build_model_weights(tiny_run_config()).frozen_digest()

    def test_optional_optimizer_state(self, tmp_path):
        bare = bundle_weights(build_model_weights(tiny_run_config()), tiny_run_config())
        loaded = load_checkpoint(save_checkpoint(bare, tmp_path / "bare.ckpt"))
        assert loaded.optimizer_state is None


class TestVerification:
    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError, match="no checkpoint"):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_foreign_file_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world, definitely not a checkpoint")
        with pytest.raises(InputError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_corrupted_frozen_tensor_fails_digest_check(self, tmp_path):
        path = save_checkpoint(BUNDLE, tmp_path / "model.ckpt")
        blob = bytearray(path.read_bytes())
        header_len = int.from_bytes(blob[8:16], "little")
        header = json.loads(blob[16 : 16 + header_len].decode())
        entry = next(e for e in header["tensors"] if e["name"] == "unet.conv_in.weight")
        pos = 16 + header_len + entry["offset"]
        blob[pos] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(InputError, match="digest"):
            load_checkpoint(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = save_checkpoint(BUNDLE, tmp_path / "model.ckpt")
        blob = bytearray(path.read_bytes())
        header_len = int.from_bytes(blob[8:16], "little")
        header = json.loads(blob[16 : 16 + header_len].decode())
        header["format_version"] = 999
        new_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        rebuilt = CHECKPOINT_MAGIC + len(new_header).to_bytes(8, "little") + new_header + bytes(blob[16 + header_len :])
        path.write_bytes(rebuilt)
        with pytest.raises(InputError, match="version"):
            load_checkpoint(path)

    def test_atomic_write_leaves_no_temp_file(self, tmp_path):
        save_checkpoint(BUNDLE, tmp_path / "model.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["model.ckpt"]
