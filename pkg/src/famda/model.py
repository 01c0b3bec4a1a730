"""Tiny per-pixel multi-task network with hand-written gradients.

One shared tanh layer over 11 handcrafted features feeds a softmax
segmentation head and a linear depth head. Parameters live in one flat
vector ordered shared (W, b), seg_head (W, b), depth_head (w, b); weight
matrices are row-major with rows indexing outputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .augment import Rng
from .gridcore import IGNORE, DepthMap, FormatError, Image, LabelMap, ProbMap
from .kernels import window_stats

NUM_FEATURES = 11

FMDL_MAGIC = b"FMDL"
FMDL_VERSION = 1
_FMDL_HEADER = struct.Struct("<4sHII")


@dataclass
class TrainConfig:
    alpha: float = 0.999
    beta: float = 0.1
    lr: float = 1.0
    iters: int = 2000
    batch: int = 2
    seed: int = 0
    quality_tau: float = 0.968
    mix: bool = True
    refine: bool = True
    source_only: bool = False
    warmup: int = 200
    crop: int = 56
    jitter: float = 0.5
    depth_loss: str = "ssi"
    ssi_grad: str = "exact"
    teacher_input: str = "clean"
    log_every: int = 100
    eval_every: int = 500
    eval_images: int = 24

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.iters < 0 or self.batch < 1 or self.warmup < 0:
            raise ValueError("iters/warmup must be >= 0 and batch >= 1")
        if not 0 <= self.quality_tau <= 1:
            raise ValueError("quality_tau must be in [0, 1]")
        if self.depth_loss not in ("ssi", "plain"):
            raise ValueError("depth_loss must be 'ssi' or 'plain'")
        if self.ssi_grad not in ("exact", "frozen"):
            raise ValueError("ssi_grad must be 'exact' or 'frozen'")
        if self.teacher_input not in ("clean", "jittered"):
            raise ValueError("teacher_input must be 'clean' or 'jittered'")

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


def extract_features(img: Image) -> np.ndarray:
    """(H, W, 11): RGB, 3x3 channel means, 3x3 channel stds, row and column in [0, 1]."""
    h, w = img.shape
    mean, std = window_stats(img.data)
    rows = np.arange(h, dtype=np.float64) / max(h - 1, 1)
    cols = np.arange(w, dtype=np.float64) / max(w - 1, 1)
    coords = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)
    return np.concatenate([img.data, mean, std, coords], axis=-1)


class MultiTaskModel:
    def __init__(self, num_classes: int, params: np.ndarray | None = None, num_features: int = NUM_FEATURES):
        self.num_classes = num_classes
        self.num_features = num_features
        f, c = num_features, num_classes
        self.sizes = {"shared": f * f + f, "seg_head": c * f + c, "depth_head": f + 1}
        n = sum(self.sizes.values())
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters for C={c}, F={f}, got {params.shape}")
        self.params = params

    @classmethod
    def init(cls, num_classes: int, rng: Rng) -> "MultiTaskModel":
        model = cls(num_classes)
        model.params = 0.2 * rng.uniform_array(model.params.size) - 0.1
        return model

    def copy(self) -> "MultiTaskModel":
        return MultiTaskModel(self.num_classes, self.params.copy(), self.num_features)

    def block(self, name: str) -> slice:
        start = 0
        for key, size in self.sizes.items():
            if key == name:
                return slice(start, start + size)
            start += size
        raise KeyError(name)

    def unpack(self, params: np.ndarray | None = None):
        """(shared_w, shared_b, seg_w, seg_b, depth_w, depth_b) views."""
        p = self.params if params is None else params
        f, c = self.num_features, self.num_classes
        i = 0
        sw = p[i:i + f * f].reshape(f, f); i += f * f
        sb = p[i:i + f]; i += f
        cw = p[i:i + c * f].reshape(c, f); i += c * f
        cb = p[i:i + c]; i += c
        dw = p[i:i + f]; i += f
        db = p[i:i + 1]
        return sw, sb, cw, cb, dw, db


@dataclass
class Activations:
    hidden: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    depth: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_activations(model: MultiTaskModel, features: np.ndarray) -> Activations:
    if features.shape[-1] != model.num_features:
        raise ValueError(f"expected {model.num_features} features, got {features.shape[-1]}")
    sw, sb, cw, cb, dw, db = model.unpack()
    hidden = np.tanh(features @ sw.T + sb)
    logits = hidden @ cw.T + cb
    depth = hidden @ dw + db[0]
    return Activations(hidden, logits, softmax(logits), depth)


def forward(model: MultiTaskModel, features: np.ndarray) -> tuple[ProbMap, DepthMap]:
    act = forward_activations(model, features)
    return ProbMap(act.probs), DepthMap(act.depth, np.ones(act.depth.shape, dtype=bool))


def ce_loss(probs: ProbMap, labels: LabelMap, pixel_weights: np.ndarray | None = None):
    """Weighted cross-entropy and its gradient w.r.t. the logits.

    The weighted per-pixel losses are averaged over all non-IGNORE pixels, so
    a weight below one shrinks a pixel's contribution instead of being
    renormalized away.
    """
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {labels.shape}")
    scored = labels.data != IGNORE
    weights = np.ones(labels.shape) if pixel_weights is None else np.asarray(pixel_weights, dtype=np.float64)
    if (weights < 0).any():
        raise ValueError("pixel weights must be nonnegative")
    weights = np.where(scored, weights, 0.0)
    grad = np.zeros(probs.data.shape)
    n = int(scored.sum())
    if n == 0 or weights.sum() == 0:
        return 0.0, grad
    target = np.where(scored, labels.data, 0)
    p_true = np.take_along_axis(probs.data, target[..., None], axis=-1)[..., 0]
    nll = -np.log(np.maximum(p_true, 1e-300))
    loss = float(np.sum(weights * nll) / n)
    grad[:] = probs.data
    np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], -1) - 1.0, axis=-1)
    grad *= (weights / n)[..., None]
    return loss, grad


def backward(model: MultiTaskModel, features: np.ndarray, grad_seg_logits: np.ndarray | None,
             grad_depth: np.ndarray | None, hidden: np.ndarray | None = None) -> np.ndarray:
    """Parameter gradient given upstream gradients on logits and depth."""
    f, c = model.num_features, model.num_classes
    x = features.reshape(-1, f)
    sw, sb, cw, cb, dw, db = model.unpack()
    if hidden is None:
        hidden = np.tanh(x @ sw.T + sb)
    h = hidden.reshape(-1, f)
    grad = np.zeros_like(model.params)
    gsw, gsb, gcw, gcb, gdw, gdb = model.unpack(grad)
    gh = np.zeros_like(h)
    if grad_seg_logits is not None:
        g = grad_seg_logits.reshape(-1, c)
        gcw[:] = g.T @ h
        gcb[:] = g.sum(axis=0)
        gh += g @ cw
    if grad_depth is not None:
        gd = grad_depth.reshape(-1)
        gdw[:] = h.T @ gd
        gdb[:] = gd.sum()
        gh += np.outer(gd, dw)
    gpre = gh * (1.0 - h * h)
    gsw[:] = gpre.T @ x
    gsb[:] = gpre.sum(axis=0)
    return grad


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if params.shape != grad.shape:
        raise ValueError(f"length mismatch: {params.shape} vs {grad.shape}")
    return params - lr * grad


def encode_checkpoint(model: MultiTaskModel) -> bytes:
    header = _FMDL_HEADER.pack(FMDL_MAGIC, FMDL_VERSION, model.num_classes, model.num_features)
    return header + model.params.astype("<f4").tobytes()


def decode_checkpoint(buf: bytes) -> MultiTaskModel:
    if len(buf) < 4 or buf[:4] != FMDL_MAGIC:
        raise FormatError("bad magic", 0)
    if len(buf) < _FMDL_HEADER.size:
        raise FormatError("truncated", len(buf), "incomplete header")
    _, version, c, f = _FMDL_HEADER.unpack_from(buf, 0)
    if version != FMDL_VERSION:
        raise FormatError("unsupported version", 4, str(version))
    n = f * f + f + c * f + c + f + 1
    need = _FMDL_HEADER.size + 4 * n
    if len(buf) != need:
        raise FormatError("truncated" if len(buf) < need else "trailing bytes", min(len(buf), need))
    params = np.frombuffer(buf, dtype="<f4", count=n, offset=_FMDL_HEADER.size).astype(np.float64)
    return MultiTaskModel(c, params, f)


def save_checkpoint(path, model: MultiTaskModel) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path) -> MultiTaskModel:
    return decode_checkpoint(Path(path).read_bytes())
