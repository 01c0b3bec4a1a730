"""Seeded augmentations and the kit's portable PRNG.

The generator is SplitMix64::

    state <- state + 0x9E3779B97F4A7C15              (mod 2**64)
    z <- (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
    z <- (z ^ (z >> 27)) * 0x94D049BB133111EB
    out <- z ^ (z >> 31)

uniform() = (out >> 11) * 2**-53, below(n) = out mod n, and normal() is
Box-Muller on two consecutive uniforms (cosine branch, 1 - u for the log).
"""
from __future__ import annotations

import math

import numpy as np

from .gridcore import IGNORE, DepthMap, Image, LabelMap

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


class Rng:
    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.state = self.seed

    @classmethod
    def derive(cls, seed: int, *keys: int) -> "Rng":
        """Independent stream for ``(seed, *keys)``, e.g. (seed, step)."""
        s = seed & MASK64
        for k in keys:
            s = mix64(s ^ mix64((k + 1) * GAMMA))
        return cls(s)

    def fork(self, *keys: int) -> "Rng":
        return Rng.derive(self.state, *keys)

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("below() needs n > 0")
        return self.next_u64() % n

    def normal(self) -> float:
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def u64_array(self, n: int) -> np.ndarray:
        """``n`` consecutive outputs, identical to ``n`` calls of next_u64()."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        self.state = (self.state + n * GAMMA) & MASK64
        return z ^ (z >> np.uint64(31))

    def uniform_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal_array(self, n: int) -> np.ndarray:
        u = self.uniform_array(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log(1.0 - u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def choose(self, items, k: int) -> list:
        """``k`` items without replacement (partial Fisher-Yates)."""
        pool = list(items)
        for i in range(k):
            j = i + self.below(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def class_mix(src_img: Image, src_labels: LabelMap, tgt_img: Image, tgt_pseudo: LabelMap, rng: Rng):
    """Paste half (rounded up) of the source classes onto the target pair.

    Returns (mixed image, mixed labels, paste mask).
    """
    if not (src_img.shape == src_labels.shape == tgt_img.shape == tgt_pseudo.shape):
        raise ValueError("class_mix inputs must share a shape")
    present = [int(c) for c in np.unique(src_labels.data) if c != IGNORE]
    if not present:
        return (
            Image(tgt_img.data.copy()),
            LabelMap(tgt_pseudo.data.copy(), tgt_pseudo.num_classes),
            np.zeros(tgt_pseudo.shape, dtype=bool),
        )
    chosen = rng.choose(present, math.ceil(len(present) / 2))
    paste = np.isin(src_labels.data, chosen)
    img = np.where(paste[:, :, None], src_img.data, tgt_img.data)
    labels = np.where(paste, src_labels.data, tgt_pseudo.data)
    return Image(img), LabelMap(labels, tgt_pseudo.num_classes), paste


def photometric_jitter(img: Image, rng: Rng, strength: float = 1.0) -> Image:
    """Per-channel gain in 1 +/- 0.4s and offset in +/- 0.2s, then clamp."""
    u = rng.uniform_array(6)
    gain = 1.0 + 0.4 * strength * (2.0 * u[:3] - 1.0)
    offset = 0.2 * strength * (2.0 * u[3:] - 1.0)
    return Image(np.clip(img.data * gain + offset, 0.0, 1.0))


def crop_window(shape, crop: int, rng: Rng) -> tuple[int, int, bool]:
    h, w = shape
    if crop > min(h, w) or crop <= 0:
        raise ValueError(f"crop {crop} does not fit a {h}x{w} grid")
    top = rng.below(h - crop + 1)
    left = rng.below(w - crop + 1)
    flip = rng.uniform() < 0.5
    return top, left, flip


def apply_window(arr: np.ndarray, top: int, left: int, crop: int, flip: bool) -> np.ndarray:
    out = arr[top:top + crop, left:left + crop]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def random_crop_flip(img: Image, labels: LabelMap | None, depth: DepthMap | None, rng: Rng, crop: int):
    """One crop window and one horizontal-flip draw shared by all given grids."""
    top, left, flip = crop_window(img.shape, crop, rng)
    out_img = Image(apply_window(img.data, top, left, crop, flip))
    out_labels = None
    if labels is not None:
        out_labels = LabelMap(apply_window(labels.data, top, left, crop, flip), labels.num_classes)
    out_depth = None
    if depth is not None:
        out_depth = DepthMap(
            apply_window(depth.data, top, left, crop, flip),
            apply_window(depth.valid, top, left, crop, flip),
        )
    return out_img, out_labels, out_depth
