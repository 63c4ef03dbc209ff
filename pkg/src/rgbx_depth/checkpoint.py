"""Versioned binary checkpoints; the byte layout is described in docs/checkpoint_format.md."""

import json
import struct

import numpy as np

from .unet import NetConfig, UNet

MAGIC = b"RGBXUNET"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _flat_state(net):
    return [p.data for p in net.parameters()] + list(net.buffers())


def save_checkpoint(path, net, metadata=None):
    config = json.dumps({"net": net.config.to_dict(), "meta": metadata or {}},
                        sort_keys=True).encode("utf-8")
    state = _flat_state(net)
    count = sum(a.size for a in state)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(config)))
        f.write(config)
        f.write(struct.pack("<Q", count))
        for a in state:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (net, metadata)."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, clen = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        record = json.loads(data[16:16 + clen].decode("utf-8"))
        (count,) = struct.unpack_from("<Q", data, 16 + clen)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    net = UNet(NetConfig(**record["net"]))
    state = _flat_state(net)
    expected = sum(a.size for a in state)
    if count != expected:
        raise CheckpointError(f"{path}: holds {count} values, config needs {expected}")
    if len(data) < 24 + clen + 8 * count:
        raise CheckpointError(f"{path}: truncated payload")
    payload = np.frombuffer(data, dtype="<f8", count=count, offset=24 + clen)
    pos = 0
    for a in state:
        a[...] = payload[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    return net, record.get("meta", {})
