"""Binary checkpoint format (version 1).

All integers and floats are little-endian::

    magic      8 bytes   b"NIRFCKPT"
    version    uint32    1
    meta_len   uint64
    meta       meta_len bytes of UTF-8 JSON: {"net": <NetConfig>, ...}
    count      uint32    number of tensors
    count x:
        name_len  uint16
        name      name_len bytes UTF-8
        ndim      uint8
        dims      ndim x uint32
        data      prod(dims) x float64

Network parameters are stored under their ``named_parameters`` names; other
tensors (optimizer moments) use their own prefixes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import DataError
from .net import DenoiserNet, NetConfig, net_init

MAGIC = b"NIRFCKPT"
VERSION = 1


def write_checkpoint(path, meta: dict, tensors: Dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<Q", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        enc = name.encode("utf-8")
        arr = np.asarray(arr)
        parts += [struct.pack("<H", len(enc)), enc, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    try:
        if buf[:8] != MAGIC:
            raise DataError(f"{path} is not a nirfuse checkpoint")
        (version,) = struct.unpack_from("<I", buf, 8)
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<Q", buf, 12)
        pos = 20
        meta = json.loads(buf[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            if pos + 8 * size > len(buf):
                raise DataError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: malformed checkpoint ({e})") from e
    return meta, tensors


def save_checkpoint(path, net: DenoiserNet, extra: Optional[Dict[str, np.ndarray]] = None,
                    meta: Optional[dict] = None) -> None:
    tensors = {name: t.data for name, t in net.named_parameters()}
    tensors.update(extra or {})
    write_checkpoint(path, {"net": net.cfg.to_dict(), **(meta or {})}, tensors)


def load_checkpoint(path):
    """Return (net, meta, extra tensors not belonging to the network)."""
    meta, tensors = read_checkpoint(path)
    if "net" not in meta:
        raise DataError(f"{path}: checkpoint has no network config")
    net = net_init(NetConfig.from_dict(meta["net"]))
    for name, t in net.named_parameters():
        if name not in tensors:
            raise DataError(f"{path}: missing parameter {name!r}")
        arr = tensors.pop(name)
        if arr.shape != t.shape:
            raise DataError(f"{path}: parameter {name!r} has shape {arr.shape}, expected {t.shape}")
        t.data = arr.astype(t.data.dtype)
    return net, meta, tensors
