# src/classes/checkpoint.py
"""
Versioned checkpoint container.

Layout: the magic line ``OCCLUPOSE-CKPT\\n``, a little-endian u64 header
length, a UTF-8 JSON header, then raw little-endian float32 payloads in
header order. Optimizer momentum buffers live under the pseudo-component
``optimizer`` keyed by qualified parameter name.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from src.classes.errors import CheckpointFormatError, InconsistentStateError, MissingInputError
from src.classes.nets import ModelComponents, ModelConfig
from src.utils.atomic_ops import atomic_writer

MAGIC = b"OCCLUPOSE-CKPT\n"
FORMAT_VERSION = 1
OPTIMIZER_KEY = "optimizer"


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    stage: str
    step: int
    entries: Dict[str, Dict[str, np.ndarray]]
    extra: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def capture(
        cls,
        components: ModelComponents,
        stage: str,
        step: int,
        optimizer: Optional[torch.optim.Optimizer] = None,
        extra: Optional[Dict[str, Any]] = None,
    ) -> "Checkpoint":
        entries: Dict[str, Dict[str, np.ndarray]] = {
            name: {pname: _to_f4(p) for pname, p in params.items()}
            for name, params in components.parameter_groups().items()
        }
        if optimizer is not None:
            entries[OPTIMIZER_KEY] = momentum_buffers(components, optimizer)
        return cls(components.cfg.to_dict(), stage, int(step), entries, dict(extra or {}))

    def restore(self, components: ModelComponents, optimizer: Optional[torch.optim.Optimizer] = None) -> None:
        if self.config != components.cfg.to_dict():
            raise InconsistentStateError(
                f"checkpoint model config {self.config} does not match the requested {components.cfg.to_dict()}"
            )
        with torch.no_grad():
            for name, params in components.parameter_groups().items():
                stored = self.entries.get(name)
                if stored is None or set(stored) != set(params):
                    raise InconsistentStateError(f"checkpoint parameters for component {name!r} do not match the model")
                for pname, p in params.items():
                    if tuple(stored[pname].shape) != tuple(p.shape):
                        raise InconsistentStateError(
                            f"{name}.{pname}: checkpoint shape {stored[pname].shape} != model {tuple(p.shape)}"
                        )
                    p.copy_(torch.from_numpy(stored[pname].astype(np.float32)))
        if optimizer is not None:
            load_momentum_buffers(components, optimizer, self.entries.get(OPTIMIZER_KEY, {}))

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.config)

    def to_bytes(self) -> bytes:
        table = []
        payloads = []
        offset = 0
        for component, params in self.entries.items():
            for pname, array in params.items():
                data = np.ascontiguousarray(array, dtype="<f4").tobytes()
                table.append(
                    {"component": component, "name": pname, "shape": list(array.shape), "offset": offset, "nbytes": len(data)}
                )
                payloads.append(data)
                offset += len(data)
        header = json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "model_config": self.config,
                "stage": self.stage,
                "step": self.step,
                "extra": self.extra,
                "entries": table,
            },
            sort_keys=True,
        ).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payloads)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if not blob.startswith(MAGIC):
            raise CheckpointFormatError("not an occlupose checkpoint (bad magic)")
        start = len(MAGIC)
        if len(blob) < start + 8:
            raise CheckpointFormatError("truncated checkpoint header")
        (header_len,) = struct.unpack("<Q", blob[start:start + 8])
        body = start + 8 + header_len
        try:
            header = json.loads(blob[start + 8:body].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"unreadable checkpoint header: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointFormatError(
                f"checkpoint format version {header.get('format_version')}, expected {FORMAT_VERSION}"
            )
        entries: Dict[str, Dict[str, np.ndarray]] = {}
        for item in header["entries"]:
            lo = body + item["offset"]
            hi = lo + item["nbytes"]
            if hi > len(blob):
                raise CheckpointFormatError(f"payload for {item['component']}.{item['name']} is truncated")
            array = np.frombuffer(blob[lo:hi], dtype="<f4").reshape(item["shape"]).copy()
            entries.setdefault(item["component"], {})[item["name"]] = array
        return cls(header["model_config"], header["stage"], int(header["step"]), entries, header.get("extra", {}))

    def save(self, path: Path) -> Path:
        path = Path(path)
        atomic_writer.atomic_write_bytes(path, self.to_bytes())
        return path

    @classmethod
    def load(cls, path: Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


def _to_f4(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=True)


def momentum_buffers(components: ModelComponents, optimizer: torch.optim.Optimizer) -> Dict[str, np.ndarray]:
    buffers = {}
    for qualified, p in components.named_parameters():
        buf = optimizer.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            buffers[qualified] = _to_f4(buf)
    return buffers


def load_momentum_buffers(
    components: ModelComponents, optimizer: torch.optim.Optimizer, buffers: Dict[str, np.ndarray]
) -> None:
    params = dict(components.named_parameters())
    unknown = set(buffers) - set(params)
    if unknown:
        raise InconsistentStateError(f"optimizer state names unknown parameters: {sorted(unknown)[:3]}")
    for qualified, array in buffers.items():
        p = params[qualified]
        optimizer.state[p]["momentum_buffer"] = torch.from_numpy(array.astype(np.float32)).to(p.dtype).clone()
