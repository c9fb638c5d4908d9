"""
Tests for the checkpoint container.
"""
import struct
from dataclasses import replace

import pytest
import torch

from src.classes.checkpoint import MAGIC, Checkpoint
from src.classes.errors import CheckpointFormatError, InconsistentStateError, MissingInputError
from src.classes.nets import build_components, parameter_hash


class TestCheckpoint:
    def test_save_load_restores_parameters(self, tmp_path, tiny_model_cfg):
        original = build_components(tiny_model_cfg, seed=1)
        path = Checkpoint.capture(original, "stage2", 42, extra={"note": "x"}).save(tmp_path / "a.ckpt")
        loaded = Checkpoint.load(path)
        assert loaded.stage == "stage2" and loaded.step == 42
        assert loaded.extra == {"note": "x"}
        assert loaded.model_config() == tiny_model_cfg
        other = build_components(tiny_model_cfg, seed=2)
        loaded.restore(other)
        assert parameter_hash(other) == parameter_hash(original)

    def test_bytes_are_stable(self, tiny_model_cfg):
        components = build_components(tiny_model_cfg, seed=1)
        a = Checkpoint.capture(components, "stage1_source", 3).to_bytes()
        b = Checkpoint.from_bytes(a).to_bytes()
        assert a == b
        assert a.startswith(MAGIC)

    def test_momentum_buffers_round_trip(self, tiny_model_cfg):
        components = build_components(tiny_model_cfg, seed=1)
        optimizer = torch.optim.SGD(components.pose_dec.parameters(), lr=0.1, momentum=0.9)
        for p in components.pose_dec.parameters():
            p.grad = torch.ones_like(p)
        optimizer.step()
        blob = Checkpoint.capture(components, "stage2", 5, optimizer).to_bytes()

        fresh = build_components(tiny_model_cfg, seed=9)
        fresh_opt = torch.optim.SGD(fresh.pose_dec.parameters(), lr=0.1, momentum=0.9)
        Checkpoint.from_bytes(blob).restore(fresh, fresh_opt)
        for p in fresh.pose_dec.parameters():
            assert torch.equal(fresh_opt.state[p]["momentum_buffer"], torch.ones_like(p))

    def test_config_mismatch_is_inconsistent(self, tiny_model_cfg):
        ckpt = Checkpoint.capture(build_components(tiny_model_cfg, seed=1), "stage2", 1)
        other = build_components(replace(tiny_model_cfg, grl_lambda=0.5), seed=1)
        with pytest.raises(InconsistentStateError):
            ckpt.restore(other)

    def test_bad_magic_and_version(self, tiny_model_cfg):
        with pytest.raises(CheckpointFormatError, match="magic"):
            Checkpoint.from_bytes(b"not a checkpoint")
        blob = Checkpoint.capture(build_components(tiny_model_cfg, seed=1), "stage2", 1).to_bytes()
        header_len = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])[0]
        header = blob[len(MAGIC) + 8:len(MAGIC) + 8 + header_len].replace(b'"format_version": 1', b'"format_version": 9')
        tampered = blob[:len(MAGIC) + 8] + header + blob[len(MAGIC) + 8 + header_len:]
        with pytest.raises(CheckpointFormatError, match="version"):
            Checkpoint.from_bytes(tampered)

    def test_truncated_payload(self, tiny_model_cfg):
        blob = Checkpoint.capture(build_components(tiny_model_cfg, seed=1), "stage2", 1).to_bytes()
        with pytest.raises(CheckpointFormatError):
            Checkpoint.from_bytes(blob[:-16])

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingInputError):
            Checkpoint.load(tmp_path / "absent.ckpt")
