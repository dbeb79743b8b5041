"""Self-describing binary checkpoints.

Layout: ``ASLCKPT1`` magic, little-endian uint64 header length, a UTF-8 JSON
header (config, image shape, and one entry per array: name, kind, shape,
byte offset), then the raw little-endian float64 array bytes. No timestamps
are stored, so equal models produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError
from .model import ASLModel, ModelConfig, ProtoNet

MAGIC = b"ASLCKPT1"


def _arrays(model) -> list[tuple[str, str, np.ndarray]]:
    out = [(name, "param", p.data) for name, p in model.params.items()]
    out += [(name, "buffer", b) for name, b in model.buffers.items()]
    return out


def _model_header(model) -> dict:
    if isinstance(model, ProtoNet):
        return {
            "model": "protonet",
            "channels": model.backbone.channels,
            "depth": model.backbone.depth,
            "loss_reduction": model.loss_reduction,
        }
    return {"model": "asl", **model.config.to_dict()}


def save_checkpoint(model, path: Union[str, Path]) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, kind, arr in _arrays(model):
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": "asl-checkpoint",
        "version": 1,
        "config": _model_header(model),
        "image_shape": list(model.image_shape),
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: Union[str, Path]):
    """Rebuild the model stored at ``path`` with bit-exact arrays."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    body = raw[16 + hlen :]
    cfg = dict(header["config"])
    kind = cfg.pop("model")
    image_shape = tuple(header["image_shape"])
    if kind == "protonet":
        model = ProtoNet(image_shape=image_shape, **cfg)
    else:
        model = ASLModel(ModelConfig.from_dict(cfg), image_shape=image_shape)
    params, buffers = model.params, model.buffers
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"]).reshape(shape)
        target = params[entry["name"]].data if entry["kind"] == "param" else buffers[entry["name"]]
        if target.shape != shape:
            raise FormatError(f"{path}: {entry['name']} has shape {shape}, model expects {target.shape}")
        target[...] = arr
    return model


def parameter_checksum(model) -> str:
    """SHA-256 over every parameter and buffer (names, shapes and bytes)."""
    h = hashlib.sha256()
    for name, kind, arr in _arrays(model):
        h.update(f"{kind}:{name}:{arr.shape}".encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
