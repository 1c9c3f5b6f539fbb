"""Versioned binary checkpoint container.

Layout: 8-byte magic, little-endian uint32 version, uint64 header length,
a UTF-8 JSON header, then every tensor as raw little-endian bytes in header
order.  Identical networks serialize to identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .network import Network, build_network

MAGIC = b"LVVOLCKP"
VERSION = 1


def to_bytes(net: Network, meta: dict | None = None) -> bytes:
    tensors = []
    blobs = []
    offset = 0
    for group, items in (("param", net.named_params()), ("state", net.named_state())):
        for key, layer, name in items:
            arr = (layer.params if group == "param" else layer.state)[name]
            data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
            tensors.append(
                {"group": group, "key": key, "dtype": arr.dtype.str.lstrip("<>=|"), "shape": list(arr.shape), "offset": offset}
            )
            blobs.append(data)
            offset += len(data)
    header = {
        "spec": net.spec(),
        "input_shape": list(net.input_shape),
        "config": net.config,
        "dtype": net.dtype.name,
        "tensors": tensors,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(buf: bytes) -> tuple[Network, dict]:
    if buf[: len(MAGIC)] != MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", buf, pos)
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(buf[pos : pos + hlen].decode())
    pos += hlen
    net = build_network(header["spec"], header["input_shape"], header["config"], np.dtype(header["dtype"]))
    layers = net.layers
    for t in header["tensors"]:
        dt = np.dtype(t["dtype"]).newbyteorder("<")
        n = int(np.prod(t["shape"])) * dt.itemsize
        arr = np.frombuffer(buf, dtype=dt, count=n // dt.itemsize, offset=pos + t["offset"])
        arr = arr.reshape(t["shape"]).astype(dt.newbyteorder("="))
        idx, name = t["key"].split(".", 1)
        target = layers[int(idx)].params if t["group"] == "param" else layers[int(idx)].state
        target[name] = arr
    seed = header["meta"].get("seed")
    if seed is not None:
        for i, layer in enumerate(layers):
            if hasattr(layer, "reseed"):
                layer.reseed([int(seed), i])
    return net, header["meta"]


def save(net: Network, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(net, meta))
    return path


def load(path) -> tuple[Network, dict]:
    return from_bytes(Path(path).read_bytes())
