"""Parameter checkpoints.

Layout (all integers little-endian uint32)::

    magic     8 bytes  b"MOBOCKPT"
    version   uint32   1
    cfg_len   uint32   length of the config blob
    config    cfg_len  UTF-8 JSON object, sorted keys; "kind" is "refinenet" or "fusion"
    count     uint32   number of records
    record * count:
        name_len  uint32
        name      name_len bytes, UTF-8
        ndim      uint32
        dims      ndim * uint32
        values    prod(dims) * float32, little-endian, row-major

Records hold network parameters under their own names; optimizer
accumulators, when saved, use the prefix ``adagrad/``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .nets import FusionNet, FusionNetConfig, Network, RefineNet, RefineNetConfig, build_fusion_net, build_refinenet
from .tensor import Tensor

MAGIC = b"MOBOCKPT"
VERSION = 1
_U32 = struct.Struct("<I")


class ConfigError(ValueError):
    """Checkpoint contents do not match the requested network configuration."""


def encode_checkpoint(config: dict, records: "OrderedDict[str, np.ndarray]") -> bytes:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(blob)), blob, _U32.pack(len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if data[:8] != MAGIC:
        raise ConfigError("not a checkpoint (bad magic)")
    pos = 8

    def u32():
        nonlocal pos
        if pos + 4 > len(data):
            raise ConfigError("truncated checkpoint")
        (v,) = _U32.unpack_from(data, pos)
        pos += 4
        return v

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ConfigError("truncated checkpoint")
        out = data[pos : pos + n]
        pos += n
        return out

    version = u32()
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    config = json.loads(take(u32()).decode("utf-8"))
    records: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        dims = tuple(u32() for _ in range(u32()))
        n = int(np.prod(dims, dtype=np.int64))
        records[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
    return config, records


def save_checkpoint(path, net: Network, extra: Optional[Dict[str, np.ndarray]] = None) -> None:
    records = OrderedDict((k, v.data) for k, v in net.params.items())
    for k, v in (extra or {}).items():
        records[k] = v
    Path(path).write_bytes(encode_checkpoint(net.config_dict(), records))


def network_from_config(config: dict, seed: int = 0, dtype=np.float64) -> Network:
    cfg = dict(config)
    kind = cfg.pop("kind", None)
    try:
        if kind == RefineNet.kind:
            cfg["dilation_rates"] = tuple(cfg.get("dilation_rates", (2, 4)))
            return build_refinenet(RefineNetConfig(**cfg), seed, dtype)
        if kind == FusionNet.kind:
            return build_fusion_net(FusionNetConfig(**cfg), seed, dtype)
    except TypeError as exc:
        raise ConfigError(f"bad network config: {exc}") from exc
    raise ConfigError(f"unknown network kind {kind!r}")


def load_checkpoint(path, dtype=np.float64, expect_kind: Optional[str] = None) -> Tuple[Network, Dict[str, np.ndarray]]:
    """Rebuild the network stored in ``path``; returns it with any non-parameter records."""
    config, records = decode_checkpoint(Path(path).read_bytes())
    if expect_kind is not None and config.get("kind") != expect_kind:
        raise ConfigError(f"expected a {expect_kind} checkpoint, found {config.get('kind')!r}")
    net = network_from_config(config, dtype=dtype)
    for name, p in net.params.items():
        if name not in records:
            raise ConfigError(f"checkpoint lacks parameter {name!r}")
        if records[name].shape != p.shape:
            raise ConfigError(f"parameter {name!r}: checkpoint shape {records[name].shape} != network shape {p.shape}")
        net.params[name] = Tensor(records[name].astype(dtype), requires_grad=True)
    extra = {k: v for k, v in records.items() if k not in net.params}
    return net, extra
