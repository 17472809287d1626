"""Single-file checkpoint container for a ParamSet and an optional Mask.

Layout (all integers little-endian)::

    magic        8 bytes   b"RGPCKPT\\0"
    version      u16
    header_len   u32
    header_crc   u32       zlib.crc32 of the header bytes
    header       JSON, utf-8 (shapes, dtype, mask layout, metadata)
    payload      weights and biases in layer order (<f4 or <f8),
                 then one packed bitset per masked layer
    checksum     8 bytes   blake2b-64 of the payload
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .. import __version__
from ..nn import Layer, ModelConfig, ParamSet
from ..prune import Mask

MAGIC = b"RGPCKPT\0"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sHII")
_CHECKSUM_BYTES = 8


class CheckpointError(ValueError):
    def __init__(self, section: str, message: str):
        super().__init__(f"checkpoint {section}: {message}")
        self.section = section


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=_CHECKSUM_BYTES).digest()


@dataclass
class CheckpointHeader:
    version: int
    dtype: str
    layers: list[dict]
    mask_layers: list[int] | None
    mask_kept: list[int] | None
    metadata: dict[str, Any]

    @property
    def m(self) -> int:
        return sum(l["out"] * l["in"] + l["out"] for l in self.layers)

    def density_all(self) -> float | None:
        if self.mask_layers is None:
            return None
        sizes = {i: self.layers[i]["out"] * self.layers[i]["in"] for i in self.mask_layers}
        dropped = sum(sizes[i] - k for i, k in zip(self.mask_layers, self.mask_kept))
        return (self.m - dropped) / self.m

    def density_prunable(self) -> float | None:
        if self.mask_layers is None:
            return None
        total = sum(self.layers[i]["out"] * self.layers[i]["in"] for i in self.mask_layers)
        return 1.0 if total == 0 else sum(self.mask_kept) / total


def save_checkpoint(path, params: ParamSet, mask: Mask | None = None,
                    metadata: dict[str, Any] | None = None) -> None:
    dtype = np.dtype(params.dtype).newbyteorder("<")
    chunks = [np.ascontiguousarray(a, dtype=dtype).tobytes() for a in params.arrays()]
    mask_layers = mask_kept = None
    if mask is not None:
        mask.check_matches(params)
        mask_layers, mask_kept = [], []
        for i, k in enumerate(mask.keep):
            if k is None:
                continue
            mask_layers.append(i)
            mask_kept.append(int(k.sum()))
            chunks.append(np.packbits(k.ravel(), bitorder="little").tobytes())
    payload = b"".join(chunks)
    meta = dict(metadata or {})
    meta.setdefault("library_version", __version__)
    header = {
        "dtype": dtype.str,
        "layers": [
            {"out": l.weight.shape[0], "in": l.weight.shape[1], "prunable": l.prunable}
            for l in params.layers
        ],
        "mask_layers": mask_layers,
        "mask_kept": mask_kept,
        "metadata": meta,
    }
    header_bytes = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    blob = (
        _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes), zlib.crc32(header_bytes))
        + header_bytes
        + payload
        + _checksum(payload)
    )
    Path(path).write_bytes(blob)


def _read_header(buf: bytes) -> tuple[CheckpointHeader, int]:
    if len(buf) < _PREAMBLE.size:
        raise CheckpointError("preamble", f"truncated: {len(buf)} bytes")
    magic, version, header_len, header_crc = _PREAMBLE.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError("preamble", f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError("version", f"format version {version}, this library reads {FORMAT_VERSION}")
    end = _PREAMBLE.size + header_len
    if len(buf) < end:
        raise CheckpointError("header", "truncated")
    header_bytes = buf[_PREAMBLE.size:end]
    if zlib.crc32(header_bytes) != header_crc:
        raise CheckpointError("header", "crc mismatch")
    try:
        raw = json.loads(header_bytes)
    except ValueError as exc:
        raise CheckpointError("header", f"invalid JSON: {exc}") from exc
    header = CheckpointHeader(version, raw["dtype"], raw["layers"], raw["mask_layers"],
                              raw["mask_kept"], raw["metadata"])
    return header, end


def read_header(path) -> CheckpointHeader:
    """Parse only the preamble and header; the payload is not decoded."""
    with open(path, "rb") as fh:
        head = fh.read(_PREAMBLE.size)
        if len(head) == _PREAMBLE.size:
            _, _, header_len, _ = _PREAMBLE.unpack(head)
            head += fh.read(header_len)
    return _read_header(head)[0]


def _expected_shapes(config: ModelConfig) -> list[tuple[int, int]]:
    return [(fan_out, fan_in) for fan_in, fan_out in config.layer_dims()]


def load_checkpoint(path, expected: ModelConfig | None = None
                    ) -> tuple[ParamSet, Mask | None, dict[str, Any]]:
    buf = Path(path).read_bytes()
    header, offset = _read_header(buf)
    shapes = [(l["out"], l["in"]) for l in header.layers]
    if expected is not None and shapes != _expected_shapes(expected):
        raise CheckpointError(
            "structure", f"layer shapes {shapes} do not match expected {_expected_shapes(expected)}"
        )
    dtype = np.dtype(header.dtype)
    sizes = []
    for out, inp in shapes:
        sizes.extend((out * inp * dtype.itemsize, out * dtype.itemsize))
    mask_sizes = []
    if header.mask_layers is not None:
        mask_sizes = [(shapes[i][0] * shapes[i][1] + 7) // 8 for i in header.mask_layers]
    payload_len = sum(sizes) + sum(mask_sizes)
    if len(buf) != offset + payload_len + _CHECKSUM_BYTES:
        raise CheckpointError(
            "payload", f"expected {offset + payload_len + _CHECKSUM_BYTES} bytes, file has {len(buf)}"
        )
    payload = buf[offset:offset + payload_len]
    if _checksum(payload) != buf[offset + payload_len:]:
        raise CheckpointError("checksum", "payload checksum mismatch")

    pos = 0
    layers = []
    for i, (out, inp) in enumerate(shapes):
        w = np.frombuffer(payload, dtype=dtype, count=out * inp, offset=pos).reshape(out, inp)
        pos += out * inp * dtype.itemsize
        b = np.frombuffer(payload, dtype=dtype, count=out, offset=pos)
        pos += out * dtype.itemsize
        layers.append(Layer(i, w.astype(dtype.newbyteorder("=")), b.astype(dtype.newbyteorder("=")),
                            header.layers[i]["prunable"]))
    params = ParamSet(layers)

    mask = None
    if header.mask_layers is not None:
        keep: list[np.ndarray | None] = [None] * len(shapes)
        for i, nbytes in zip(header.mask_layers, mask_sizes):
            out, inp = shapes[i]
            bits = np.unpackbits(np.frombuffer(payload, np.uint8, nbytes, pos),
                                 count=out * inp, bitorder="little")
            keep[i] = bits.astype(bool).reshape(out, inp)
            pos += nbytes
        mask = Mask(keep)
    return params, mask, header.metadata
