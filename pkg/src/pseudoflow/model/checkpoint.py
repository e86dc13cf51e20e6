"""Versioned binary checkpoints.

Layout: 8-byte magic, uint32 LE version, uint32 LE header length, JSON
header (model config, free-form flags, ordered param manifest with
shapes), then the parameters as little-endian float32 in manifest order.
Parameter order is sorted by name, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .network import FlowNet, ModelConfig

MAGIC = b"PFLOWCK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, net: FlowNet, flags: dict | None = None) -> None:
    names = [k for k, _ in net.params.named()]
    manifest = [{"name": k, "shape": list(net.params[k].data.shape)}
                for k in names]
    header = {
        "model_config": net.cfg.to_dict(),
        "flags": dict(flags or {}),
        "params": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(
                net.params[k].data, dtype="<f4").tobytes())


def load_checkpoint(path: str):
    """Returns (net, flags). The net is rebuilt from the stored config."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic in {path}: {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["model_config"])
        net = FlowNet(cfg, seed=0)
        arrays = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise CheckpointError(f"truncated checkpoint: {path}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape)
        if fh.read(1):
            raise CheckpointError(f"trailing bytes in checkpoint: {path}")
    net.params.load_arrays(arrays)
    return net, header["flags"]


def params_hash(net: FlowNet) -> str:
    """Stable content hash of all parameters (for audit logging)."""
    import hashlib
    h = hashlib.sha256()
    for k, t in net.params.named():
        h.update(k.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


__all__ = ["CheckpointError", "MAGIC", "VERSION", "load_checkpoint",
           "params_hash", "save_checkpoint"]
