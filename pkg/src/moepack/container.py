"""Self-describing binary checkpoint container.

Layout::

    b"PZM1"                       magic
    u32 little-endian             header length in bytes
    header                        UTF-8 JSON: {"format_version", "tensors", "metadata"}
    payload                       raw little-endian tensors, each starting at a
                                  64-byte aligned absolute file offset

Each tensor entry is ``{"name", "dtype", "shape", "byte_offset", "byte_len"}``
with ``byte_offset`` counted from the start of the file.  Supported dtypes:
``f32``, ``bf16`` and ``pbf16`` (2-byte words), and ``q{b}g{group}``: b-bit
codes packed little-endian into ceil(n*b/8) bytes, with the f32 group scales
stored as a separate tensor named ``{name}/scales``.
"""

from __future__ import annotations

import json
import math
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, CorruptHeader, DuplicateName, TruncatedPayload
from .quantization import pack_codes, unpack_codes

MAGIC = b"PZM1"
FORMAT_VERSION = 1
ALIGN = 64

_QUANT = re.compile(r"^q(\d+)g(\d+)$")
_WIDTH = {"f32": 4, "bf16": 2, "pbf16": 2}
_NP = {"f32": np.dtype("<f4"), "bf16": np.dtype("<u2"), "pbf16": np.dtype("<u2")}


@dataclass
class Tensor:
    """A named array.  ``bf16``/``pbf16`` data are uint16 bit patterns,
    ``q*g*`` data are unpacked integer codes."""

    name: str
    dtype: str
    data: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


@dataclass
class Container:
    tensors: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, name: str, dtype: str, data) -> None:
        if name in self.tensors:
            raise DuplicateName(name)
        self.tensors[name] = Tensor(name, dtype, np.asarray(data))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name].data

    def __contains__(self, name: str) -> bool:
        return name in self.tensors


def quant_bits(dtype: str) -> int | None:
    m = _QUANT.match(dtype)
    return int(m.group(1)) if m else None


def byte_len(dtype: str, shape) -> int:
    n = math.prod(shape)
    if dtype in _WIDTH:
        return n * _WIDTH[dtype]
    bits = quant_bits(dtype)
    if bits is None:
        raise CorruptHeader(f"unknown dtype {dtype!r}")
    return -(-n * bits // 8)


def _encode(t: Tensor) -> bytes:
    if t.dtype in _NP:
        return np.ascontiguousarray(t.data, dtype=_NP[t.dtype]).tobytes()
    return pack_codes(t.data, quant_bits(t.dtype))


def _decode(dtype: str, shape, raw: bytes) -> np.ndarray:
    if dtype in _NP:
        return np.frombuffer(raw, dtype=_NP[dtype]).astype(_NP[dtype].newbyteorder("=")).reshape(shape)
    return unpack_codes(raw, quant_bits(dtype), math.prod(shape)).reshape(shape)


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def to_bytes(c: Container) -> bytes:
    names = list(c.tensors)
    if len(set(names)) != len(names):
        raise DuplicateName("tensor names must be unique")
    blobs = [_encode(c.tensors[n]) for n in names]

    # offsets depend on header length, which depends on offsets: iterate to a fixed point
    offsets = [0] * len(names)
    while True:
        entries = [
            {"name": n, "dtype": c.tensors[n].dtype, "shape": list(c.tensors[n].shape),
             "byte_offset": off, "byte_len": len(b)}
            for n, off, b in zip(names, offsets, blobs)
        ]
        header = json.dumps(
            {"format_version": FORMAT_VERSION, "tensors": entries, "metadata": c.metadata},
            sort_keys=True, separators=(",", ":"),
        ).encode("utf-8")
        pos = 8 + len(header)
        new = []
        for b in blobs:
            pos = _align(pos)
            new.append(pos)
            pos += len(b)
        if new == offsets:
            break
        offsets = new

    out = bytearray(MAGIC + struct.pack("<I", len(header)) + header)
    for off, b in zip(offsets, blobs):
        out += b"\0" * (off - len(out))
        out += b
    return bytes(out)


def from_bytes(buf: bytes) -> Container:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise BadMagic("not a PZM1 container")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if 8 + hlen > len(buf):
        raise TruncatedPayload(f"header claims {hlen} bytes, file has {len(buf) - 8}")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
        entries = header["tensors"]
        metadata = header.get("metadata", {})
        if header["format_version"] != FORMAT_VERSION:
            raise CorruptHeader(f"unsupported format_version {header['format_version']}")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptHeader(f"unreadable header: {exc}") from exc

    c = Container(metadata=metadata)
    end = 8 + hlen
    spans = []
    for e in entries:
        try:
            name, dtype, shape = e["name"], e["dtype"], tuple(int(d) for d in e["shape"])
            off, blen = int(e["byte_offset"]), int(e["byte_len"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptHeader(f"bad tensor entry {e!r}") from exc
        if name in c.tensors:
            raise DuplicateName(name)
        if any(d < 0 for d in shape) or blen != byte_len(dtype, shape):
            raise CorruptHeader(f"{name}: byte_len {blen} does not match {dtype}{list(shape)}")
        if off < 8 + hlen:
            raise CorruptHeader(f"{name}: offset {off} overlaps the header")
        if off + blen > len(buf):
            raise TruncatedPayload(f"{name}: needs bytes up to {off + blen}, file has {len(buf)}")
        spans.append((off, off + blen, name))
        c.tensors[name] = Tensor(name, dtype, _decode(dtype, shape, buf[off:off + blen]))
        end = max(end, off + blen)
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CorruptHeader(f"tensors {n0!r} and {n1!r} overlap")
    if len(buf) != end:
        raise CorruptHeader(f"file has {len(buf) - end} trailing bytes")
    return c


def write_container(path: str | os.PathLike, c: Container) -> None:
    Path(path).write_bytes(to_bytes(c))


def read_container(path: str | os.PathLike) -> Container:
    return from_bytes(Path(path).read_bytes())
