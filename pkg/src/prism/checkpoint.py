"""Versioned binary checkpoint container.

Layout: magic, format version (u32 LE), header length (u64 LE), header
JSON (model kind, config snapshot, tensor index, optional latent
normalization stats), raw little-endian f32 tensor payload in index order,
then a SHA-256 checksum of everything before it. The JSON is serialized
with sorted keys, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointCorrupt, IncompatibleCheckpoint
from .motion_repr import NormStats

MAGIC = b"PRCK"
VERSION = 1


def _state_to_arrays(state: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype("<f4") for k, v in state.items()}


def save_checkpoint(
    path,
    kind: str,
    config: dict,
    state: dict[str, torch.Tensor],
    stats: NormStats | None = None,
) -> None:
    arrays = _state_to_arrays(state)
    if stats is not None:
        arrays["__stats__.mean"] = stats.mean.numpy().astype("<f4")
        arrays["__stats__.std"] = stats.std.numpy().astype("<f4")
    index = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    header = json.dumps(
        {"kind": kind, "config": config, "tensors": index, "has_stats": stats is not None},
        sort_keys=True,
    ).encode()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", len(header))
    blob += header
    for entry in index:
        blob += arrays[entry["name"]].tobytes(order="C")
    blob += hashlib.sha256(blob).digest()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> tuple[str, dict, dict[str, torch.Tensor], NormStats | None]:
    raw = Path(path).read_bytes()
    if len(raw) < 48 or raw[:4] != MAGIC:
        raise CheckpointCorrupt("bad magic")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorrupt("checksum mismatch")
    (version,) = struct.unpack("<I", body[4:8])
    if version > VERSION:
        raise IncompatibleCheckpoint(f"format version {version} > {VERSION}")
    (hlen,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16 : 16 + hlen])
    names = [e["name"] for e in header["tensors"]]
    if len(set(names)) != len(names):
        raise CheckpointCorrupt("duplicate tensor name")
    offset = 16 + hlen
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * 4
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(
            entry["shape"]
        )
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(torch.get_default_dtype())
        offset += nbytes
    if offset != len(body):
        raise CheckpointCorrupt("payload length mismatch")
    stats = None
    if header.get("has_stats"):
        stats = NormStats(
            mean=tensors.pop("__stats__.mean"), std=tensors.pop("__stats__.std")
        )
    return header["kind"], header["config"], tensors, stats


def save_vae(path, vae, stats: NormStats | None = None) -> None:
    save_checkpoint(path, "vae", vae.cfg.to_dict(), vae.state_dict(), stats)


def load_vae(path):
    from .motion_vae import MotionVae, VaeConfig

    kind, config, tensors, stats = load_checkpoint(path)
    if kind != "vae":
        raise IncompatibleCheckpoint(f"expected a vae checkpoint, got {kind}")
    vae = MotionVae(VaeConfig.from_dict(config))
    vae.load_state_dict(tensors)
    vae.eval()
    return vae, stats


def save_dit(path, model, stats: NormStats) -> None:
    save_checkpoint(path, "dit", model.cfg.to_dict(), model.state_dict(), stats)


def load_dit(path):
    from .flow_dit import DitConfig, FlowModel

    kind, config, tensors, stats = load_checkpoint(path)
    if kind != "dit":
        raise IncompatibleCheckpoint(f"expected a dit checkpoint, got {kind}")
    if stats is None:
        raise IncompatibleCheckpoint("dit checkpoint must embed latent stats")
    model = FlowModel(DitConfig.from_dict(config))
    model.load_state_dict(tensors)
    model.eval()
    return model, stats
