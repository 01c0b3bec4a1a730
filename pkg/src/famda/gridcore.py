"""Dense grid containers, order statistics and the on-disk grid formats."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

IGNORE = 255

FDPT_MAGIC = b"FDPT"
FDPT_VERSION = 1
_FDPT_HEADER = struct.Struct("<4sHII")


class FormatError(ValueError):
    """Malformed binary payload. ``kind`` names the failure, ``offset`` the byte."""

    def __init__(self, kind: str, offset: int, detail: str = ""):
        self.kind = kind
        self.offset = offset
        msg = f"{kind} at byte {offset}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


@dataclass
class LabelMap:
    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        if self.data.ndim != 2:
            raise ValueError("label map must be 2-D")
        bad = (self.data != IGNORE) & ((self.data < 0) | (self.data >= self.num_classes))
        if bad.any():
            raise ValueError(f"label values must be in [0, {self.num_classes}) or IGNORE")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class ProbMap:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("probability map must be H x W x C")

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def check(self, tol: float = 1e-6) -> None:
        if (self.data < 0).any() or not np.allclose(self.data.sum(-1), 1.0, atol=tol, rtol=0):
            raise ValueError("pixel probabilities must be nonnegative and sum to 1")


@dataclass
class DepthMap:
    data: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.valid is None:
            self.valid = np.isfinite(self.data)
        else:
            self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.data)
        if self.data.shape != self.valid.shape:
            raise ValueError("depth and validity shapes differ")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def values(self, mask: np.ndarray | None = None) -> np.ndarray:
        """Row-major values at valid pixels (further restricted by ``mask``)."""
        sel = self.valid if mask is None else (self.valid & mask)
        return self.data[sel]


@dataclass
class Image:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("image must be H x W x 3")
        if (self.data < 0).any() or (self.data > 1).any():
            raise ValueError("image values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


def median(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        raise ValueError("empty sample")
    mid = n // 2
    if n % 2:
        return float(v[mid])
    return float((v[mid - 1] + v[mid]) / 2.0)


def mean_abs_dev_from_median(values) -> float:
    # Sorting first fixes the summation order, so any permutation of the
    # input gives the same bits.
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("empty sample")
    return float(np.sum(np.abs(v - median(v))) / v.size)


def argmax_labels(probs: ProbMap) -> LabelMap:
    # np.argmax returns the first maximum, i.e. the smallest tied class.
    return LabelMap(np.argmax(probs.data, axis=-1), probs.num_classes)


def one_hot(labels: LabelMap) -> ProbMap:
    """One-hot probabilities; IGNORE pixels get a uniform row."""
    c = labels.num_classes
    out = np.full(labels.shape + (c,), 1.0 / c)
    known = labels.data != IGNORE
    out[known] = np.eye(c)[labels.data[known]]
    return ProbMap(out)


# -- file forms ---------------------------------------------------------------

def read_label_png(path, num_classes: int) -> LabelMap:
    with PILImage.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: label PNG must be 8-bit single channel")
        return LabelMap(np.asarray(im, dtype=np.int64), num_classes)


def write_label_png(path, labels: LabelMap) -> None:
    PILImage.fromarray(labels.data.astype(np.uint8), mode="L").save(path)


def read_image_png(path) -> Image:
    with PILImage.open(path) as im:
        return Image(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)


def write_image_png(path, img: Image) -> None:
    arr = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path)


def encode_fdpt(depth: DepthMap) -> bytes:
    h, w = depth.shape
    data = np.where(depth.valid, depth.data, np.nan).astype("<f4")
    return _FDPT_HEADER.pack(FDPT_MAGIC, FDPT_VERSION, h, w) + data.tobytes()


def decode_fdpt(buf: bytes) -> DepthMap:
    if len(buf) < 4 or buf[:4] != FDPT_MAGIC:
        raise FormatError("bad magic", 0)
    if len(buf) < _FDPT_HEADER.size:
        raise FormatError("truncated", len(buf), "incomplete header")
    _, version, h, w = _FDPT_HEADER.unpack_from(buf, 0)
    if version != FDPT_VERSION:
        raise FormatError("unsupported version", 4, str(version))
    need = _FDPT_HEADER.size + 4 * h * w
    if len(buf) < need:
        raise FormatError("truncated", len(buf), f"expected {need} bytes")
    if len(buf) > need:
        raise FormatError("trailing bytes", need)
    data = np.frombuffer(buf, dtype="<f4", count=h * w, offset=_FDPT_HEADER.size)
    data = data.astype(np.float64).reshape(h, w)
    return DepthMap(data, np.isfinite(data))


def read_fdpt(path) -> DepthMap:
    return decode_fdpt(Path(path).read_bytes())


def write_fdpt(path, depth: DepthMap) -> None:
    Path(path).write_bytes(encode_fdpt(depth))
