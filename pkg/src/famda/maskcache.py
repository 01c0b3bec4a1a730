"""Per-image instance mask sets and the FMSK cache format.

FMSK layout, little-endian throughout::

    magic "FMSK" | version u16 | height u32 | width u32 | mask count u32
    metadata length u32 | metadata (UTF-8 key=value lines)
    per mask: area u32 | run count u32 | (start u32, length u32) * runs

Runs index the row-major flattened mask and are sorted by start.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gridcore import FormatError
from .kernels import mask_runs

MAGIC = b"FMSK"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")
_U32 = struct.Struct("<I")
_MASK_HEAD = struct.Struct("<II")
HEADER_SIZE = _HEADER.size + _U32.size


@dataclass
class MaskSet:
    height: int
    width: int
    masks: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        for i, m in enumerate(self.masks):
            if m.shape != (self.height, self.width):
                raise ValueError(f"mask {i} has shape {m.shape}, expected {(self.height, self.width)}")

    def __len__(self):
        return len(self.masks)

    @property
    def areas(self) -> list[int]:
        return [int(m.sum()) for m in self.masks]

    def __eq__(self, other):
        if not isinstance(other, MaskSet):
            return NotImplemented
        return (
            (self.height, self.width) == (other.height, other.width)
            and len(self.masks) == len(other.masks)
            and all(np.array_equal(a, b) for a, b in zip(self.masks, other.masks))
            and self.metadata == other.metadata
        )


def _encode_metadata(meta: dict) -> bytes:
    lines = []
    for k, v in meta.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"metadata entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_metadata(raw: bytes, offset: int) -> dict:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("bad metadata", offset, str(exc)) from None
    meta = {}
    for line in text.split("\n"):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError("bad metadata", offset, f"line {line!r} lacks '='")
        meta[key] = value
    return meta


def encode_maskset(maskset: MaskSet) -> bytes:
    meta = _encode_metadata(maskset.metadata)
    parts = [
        _HEADER.pack(MAGIC, VERSION, maskset.height, maskset.width, len(maskset.masks)),
        _U32.pack(len(meta)),
        meta,
    ]
    for i, m in enumerate(maskset.masks):
        runs = mask_runs(m.ravel())
        area = int(runs[:, 1].sum()) if len(runs) else 0
        if area == 0:
            raise ValueError(f"empty mask (index {i})")
        parts.append(_MASK_HEAD.pack(area, len(runs)))
        parts.append(runs.astype("<u4").tobytes())
    return b"".join(parts)


def decode_maskset(buf: bytes) -> MaskSet:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic", 0)
    if len(buf) < HEADER_SIZE:
        raise FormatError("truncated", len(buf), "incomplete header")
    _, version, h, w, count = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError("unsupported version", 4, str(version))
    (meta_len,) = _U32.unpack_from(buf, _HEADER.size)
    pos = HEADER_SIZE
    if len(buf) < pos + meta_len:
        raise FormatError("truncated", len(buf), "metadata")
    metadata = _decode_metadata(buf[pos:pos + meta_len], pos)
    pos += meta_len
    total = h * w
    masks = []
    for i in range(count):
        if len(buf) < pos + _MASK_HEAD.size:
            raise FormatError("truncated", len(buf), f"mask {i} of {count} missing")
        area, nruns = _MASK_HEAD.unpack_from(buf, pos)
        mask_start = pos
        pos += _MASK_HEAD.size
        if len(buf) < pos + 8 * nruns:
            raise FormatError("truncated", len(buf), f"runs of mask {i}")
        runs = np.frombuffer(buf, dtype="<u4", count=2 * nruns, offset=pos).astype(np.int64)
        runs = runs.reshape(nruns, 2)
        flat = np.zeros(total, dtype=bool)
        prev_end = -1
        for r, (start, length) in enumerate(runs):
            run_off = pos + 8 * r
            if length == 0 or start + length > total:
                raise FormatError("run out of bounds", run_off, f"mask {i} run {r}")
            if start < prev_end:
                raise FormatError("overlapping runs", run_off, f"mask {i} run {r}")
            prev_end = start + length
            flat[start:start + length] = True
        pos += 8 * nruns
        got = int(runs[:, 1].sum()) if nruns else 0
        if got == 0:
            raise FormatError("empty mask", mask_start, f"mask {i}")
        if got != area:
            raise FormatError("area mismatch", mask_start, f"mask {i}: header {area}, runs {got}")
        masks.append(flat.reshape(h, w))
    if pos != len(buf):
        raise FormatError("trailing bytes", pos)
    return MaskSet(h, w, masks, metadata)


def cache_path(cache_dir, stem: str) -> Path:
    return Path(cache_dir) / f"{stem}.fmsk"


def save_maskset(path, maskset: MaskSet) -> None:
    Path(path).write_bytes(encode_maskset(maskset))


def load_maskset(path) -> MaskSet:
    return decode_maskset(Path(path).read_bytes())
