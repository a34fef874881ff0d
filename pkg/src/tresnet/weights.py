"""Weight container.

Layout::

    b"TRSNETW1"                      8-byte magic
    uint64 little-endian             manifest length in bytes
    UTF-8 JSON manifest              {format_version, variant_name, leaky_slope,
                                      config, tensors: [{name, shape, offset, length}]}
    payload                          little-endian float32, tensors in manifest
                                     order, no padding

``offset`` and ``length`` are byte counts relative to the payload start.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import WeightFormatError, WeightLoadError
from .model import Model, ModelConfig, assemble, tensor_specs

MAGIC = b"TRSNETW1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_F32 = np.dtype("<f4")


def save_weights(m: Model, path: Union[str, Path]) -> None:
    entries = []
    offset = 0
    for name, arr in m.named_tensors().items():
        length = arr.size * _F32.itemsize
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": length})
        offset += length
    manifest = {
        "format_version": FORMAT_VERSION,
        "variant_name": m.config.variant_name,
        "leaky_slope": m.config.leaky_slope,
        "config": m.config.to_dict(),
        "tensors": entries,
    }
    blob = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(blob)))
        f.write(blob)
        for arr in m.named_tensors().values():
            f.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


def read_container(path: Union[str, Path]):
    """Return ``(manifest, payload_bytes)``; raises :class:`WeightFormatError`."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    head = len(MAGIC) + _LEN.size
    if len(data) < head:
        raise WeightFormatError(f"{path}: truncated header")
    (mlen,) = _LEN.unpack_from(data, len(MAGIC))
    if head + mlen > len(data):
        raise WeightFormatError(f"{path}: manifest length {mlen} exceeds file size")
    try:
        manifest = json.loads(data[head:head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"{path}: unreadable manifest: {exc}") from exc
    if not isinstance(manifest, dict):
        raise WeightFormatError(f"{path}: manifest is not an object")
    for key in ("format_version", "variant_name", "leaky_slope", "tensors"):
        if key not in manifest:
            raise WeightFormatError(f"{path}: manifest missing {key!r}")
    entries = manifest["tensors"]
    if not isinstance(entries, list) or not all(
            isinstance(e, dict) and {"name", "shape", "offset", "length"} <= e.keys()
            and isinstance(e["shape"], list) and all(isinstance(d, int) and d >= 0 for d in e["shape"])
            and isinstance(e["offset"], int) and isinstance(e["length"], int) for e in entries):
        raise WeightFormatError(f"{path}: malformed tensor table")
    if manifest["format_version"] != FORMAT_VERSION:
        raise WeightFormatError(f"{path}: unsupported format_version {manifest['format_version']}")
    return manifest, memoryview(data)[head + mlen:]


def load_weights(config: Optional[ModelConfig], path: Union[str, Path]) -> Model:
    """Load a container into a model of ``config`` (or the config it records).

    Every manifest name and shape must match the config's canonical layout;
    otherwise :class:`WeightLoadError` lists the offenders.
    """
    manifest, payload = read_container(path)
    if config is None:
        if "config" not in manifest:
            raise WeightFormatError(f"{path}: no config recorded; pass one explicitly")
        config = ModelConfig.from_dict(manifest["config"])

    offenders = []
    if manifest["variant_name"] != config.variant_name:
        offenders.append(f"variant_name: file {manifest['variant_name']!r} != config {config.variant_name!r}")
    if float(manifest["leaky_slope"]) != float(config.leaky_slope):
        offenders.append(f"leaky_slope: file {manifest['leaky_slope']} != config {config.leaky_slope}")
    expected = {s.name: s.shape for s in tensor_specs(config)}
    entries = manifest["tensors"]
    seen = set()
    for e in entries:
        name, shape = e.get("name"), tuple(e.get("shape", ()))
        seen.add(name)
        if name not in expected:
            offenders.append(f"{name}: unexpected tensor")
        elif shape != expected[name]:
            offenders.append(f"{name}: shape {list(shape)} != expected {list(expected[name])}")
    offenders.extend(f"{n}: missing" for n in expected if n not in seen)
    if offenders:
        raise WeightLoadError(offenders)

    tensors = OrderedDict()
    for e in entries:
        shape = tuple(e["shape"])
        off, length = int(e["offset"]), int(e["length"])
        if length != int(np.prod(shape, dtype=np.int64)) * _F32.itemsize or off < 0 or off + length > len(payload):
            raise WeightFormatError(f"{path}: bad extent for {e['name']} (offset {off}, length {length})")
        arr = np.frombuffer(payload, dtype=_F32, count=length // _F32.itemsize, offset=off)
        tensors[e["name"]] = arr.astype(np.float32).reshape(shape)
    ordered = OrderedDict((n, tensors[n]) for n in expected)
    return assemble(config, ordered)
