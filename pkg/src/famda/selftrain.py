"""EMA self-training with mask-refined pseudo-labels and pseudo-depth supervision."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import augment, depthloss
from .augment import Rng
from .dataset import Dataset
from .eval import ConfusionMatrix, evaluate_depth
from .gridcore import DepthMap, Image, LabelMap, ProbMap, argmax_labels
from .model import (
    MultiTaskModel,
    TrainConfig,
    backward,
    ce_loss,
    extract_features,
    forward,
    forward_activations,
    sgd_step,
)
from .refine import label_accuracy, majority_vote_refine

log = logging.getLogger(__name__)

TRACKED_BLOCKS = ("shared", "seg_head")


def ema_update(teacher: np.ndarray, student: np.ndarray, alpha: float) -> np.ndarray:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.shape != student.shape:
        raise ValueError(f"length mismatch: {teacher.shape} vs {student.shape}")
    # same as alpha*t + (1-alpha)*s, but exact when t == s or alpha == 1
    return teacher + (1.0 - alpha) * (student - teacher)


def ema_scope(model: MultiTaskModel) -> tuple[np.ndarray, np.ndarray]:
    """(tracked, frozen) parameter indices; the depth head is never tracked."""
    tracked = np.concatenate([np.arange(model.params.size)[model.block(b)] for b in TRACKED_BLOCKS])
    frozen = np.setdiff1d(np.arange(model.params.size), tracked)
    return tracked, frozen


class Teacher:
    """EMA copy of the student's shared layer and segmentation head."""

    def __init__(self, num_classes: int, params: np.ndarray):
        self.num_classes = num_classes
        self.tracked, _ = ema_scope(MultiTaskModel(num_classes))
        params = np.asarray(params, dtype=np.float64)
        if params.shape != self.tracked.shape:
            raise ValueError(f"teacher expects {self.tracked.size} parameters, got {params.size}")
        self.params = params

    @classmethod
    def from_student(cls, student: MultiTaskModel) -> "Teacher":
        tracked, _ = ema_scope(student)
        return cls(student.num_classes, student.params[tracked].copy())

    def update(self, student: MultiTaskModel, alpha: float) -> None:
        self.params = ema_update(self.params, student.params[self.tracked], alpha)

    def predict(self, features: np.ndarray) -> ProbMap:
        model = MultiTaskModel(self.num_classes)
        model.params[self.tracked] = self.params
        return forward(model, features)[0]


def make_pseudo_label(teacher: Teacher, features: np.ndarray, mask_set, quality_tau: float,
                      refine: bool = True):
    """(pseudo-labels, quality weight q, unrefined argmax labels).

    q is the fraction of pixels whose top teacher probability reaches tau,
    measured before refinement.
    """
    probs = teacher.predict(features)
    raw = argmax_labels(probs)
    q = float(np.mean(probs.data.max(axis=-1) >= quality_tau))
    labels = majority_vote_refine(raw, probs, mask_set) if refine and mask_set is not None else raw
    return labels, q, raw


@dataclass
class SourceSample:
    image: Image
    labels: LabelMap


@dataclass
class TargetSample:
    image: Image
    masks: object
    pseudo_depth: DepthMap
    features: np.ndarray | None = None
    name: str = ""


def _augment_pair(img: Image, labels, depth, rng: Rng, cfg: TrainConfig):
    crop = min(cfg.crop, *img.shape)
    img, labels, depth = augment.random_crop_flip(img, labels, depth, rng.fork(0), crop)
    return img, labels, depth


def _depth_objective(cfg: TrainConfig):
    if cfg.depth_loss == "plain":
        return depthloss.plain_rmse_loss_and_grad
    if cfg.ssi_grad == "frozen":
        return depthloss.ssi_rmse_loss_and_grad
    return depthloss.ssi_rmse_loss_and_grad_exact


def train_step(student: MultiTaskModel, teacher: Teacher | None, src_batch, tgt_batch,
               cfg: TrainConfig, rng: Rng, target_losses: bool = True):
    """One SGD step on the student followed by the teacher's EMA update.

    Returns (student, teacher, breakdown). ``target_losses=False`` (warmup and
    the source-only baseline) drops both target terms and skips the teacher.
    """
    if not src_batch or (target_losses and not tgt_batch):
        raise ValueError("empty batch")
    grad = np.zeros_like(student.params)
    l_s = l_t = l_d = 0.0
    q_sum = 0.0
    depth_fn = _depth_objective(cfg)
    nb = len(src_batch)
    for b, src in enumerate(src_batch):
        r = rng.fork(b)
        s_img, s_lab, _ = _augment_pair(src.image, src.labels, None, r.fork(0), cfg)
        s_img_j = augment.photometric_jitter(s_img, r.fork(1), cfg.jitter)
        feats = extract_features(s_img_j)
        act = forward_activations(student, feats)
        loss, g_logits = ce_loss(ProbMap(act.probs), s_lab)
        l_s += loss / nb
        grad += backward(student, feats, g_logits, None, act.hidden) / nb

        if not target_losses:
            continue
        tgt = tgt_batch[b % len(tgt_batch)]
        if tgt.masks is None or tgt.pseudo_depth is None:
            raise ValueError(f"target image {tgt.name or b}: missing mask cache or pseudo-depth")
        t_feats = tgt.features
        if cfg.teacher_input == "jittered":
            t_feats = extract_features(augment.photometric_jitter(tgt.image, r.fork(5), cfg.jitter))
        elif t_feats is None:
            t_feats = extract_features(tgt.image)
        pseudo, q, _ = make_pseudo_label(teacher, t_feats, tgt.masks, cfg.quality_tau, cfg.refine)
        q_sum += q / nb

        t_img, t_lab, t_dep = _augment_pair(tgt.image, pseudo, tgt.pseudo_depth, r.fork(2), cfg)
        depth_img = augment.photometric_jitter(t_img, r.fork(3), cfg.jitter)
        depth_feats = extract_features(depth_img)
        d_act = forward_activations(student, depth_feats)

        if cfg.mix and s_lab.shape == t_lab.shape:
            mixed_img, mixed_lab, paste = augment.class_mix(s_img, s_lab, t_img, t_lab, r.fork(4))
            mixed_img = augment.photometric_jitter(mixed_img, r.fork(6), cfg.jitter)
            assert mixed_img is not depth_img
            weights = np.where(paste, 1.0, q)
            m_feats = extract_features(mixed_img)
            m_act = forward_activations(student, m_feats)
            loss, g_logits = ce_loss(ProbMap(m_act.probs), mixed_lab, weights)
            grad += backward(student, m_feats, g_logits, None, m_act.hidden) / nb
        else:
            loss, g_logits = ce_loss(ProbMap(d_act.probs), t_lab, np.full(t_lab.shape, q))
            grad += backward(student, depth_feats, g_logits, None, d_act.hidden) / nb
        l_t += loss / nb

        # depth stream: crop/flip/jitter only, never the class-mixed image
        pred = DepthMap(d_act.depth, np.ones(d_act.depth.shape, dtype=bool))
        d_loss, d_grad = depth_fn(pred, t_dep)
        l_d += d_loss / nb
        if cfg.beta > 0:
            grad += backward(student, depth_feats, None, cfg.beta * d_grad, d_act.hidden) / nb

    student = MultiTaskModel(student.num_classes, sgd_step(student.params, grad, cfg.lr), student.num_features)
    breakdown = {"l_ce_s": l_s}
    if target_losses:
        teacher.update(student, cfg.alpha)
        breakdown.update(l_ce_t=l_t, l_rmse_t=l_d, q_mean=q_sum)
        breakdown["total"] = l_s + l_t + cfg.beta * l_d
    else:
        breakdown["total"] = l_s
    return student, teacher, breakdown


def predict_dataset(model: MultiTaskModel, ds: Dataset, indices=None):
    """Yield (index, LabelMap, DepthMap) predictions on unaugmented images."""
    indices = range(len(ds)) if indices is None else indices
    for i in indices:
        probs, depth = forward(model, ds.features(i))
        yield i, argmax_labels(probs), depth


def evaluate_model(model: MultiTaskModel, ds: Dataset, indices=None) -> dict:
    """mIoU over a summed confusion matrix and mean per-image depth RMSE."""
    cm = ConfusionMatrix(ds.num_classes)
    rmses = []
    for i, labels, depth in predict_dataset(model, ds, indices):
        if ds.labels is not None:
            cm.add(labels, ds.labels[i])
        if ds.depth is not None:
            rmses.append(evaluate_depth(depth, ds.depth[i]))
    out = {}
    if ds.labels is not None:
        out["miou"] = cm.miou()
        out["per_class_iou"] = [None if np.isnan(v) else float(v) for v in cm.per_class_iou()]
    if rmses:
        out["rmse_m"] = float(np.mean(rmses))
    return out


def pseudo_label_accuracy(teacher: Teacher, ds: Dataset, indices, quality_tau: float) -> tuple[float, float]:
    """Pixel accuracy of (unrefined, refined) teacher labels against ground truth."""
    raw_acc, ref_acc = [], []
    for i in indices:
        refined, _, raw = make_pseudo_label(teacher, ds.features(i), ds.masks[i], quality_tau, True)
        raw_acc.append(label_accuracy(raw, ds.labels[i]))
        ref_acc.append(label_accuracy(refined, ds.labels[i]))
    return float(np.mean(raw_acc)), float(np.mean(ref_acc))


def _sample(rng: Rng, n: int, k: int) -> list[int]:
    return [rng.below(n) for _ in range(k)]


def train_loop(source: Dataset, target: Dataset, cfg: TrainConfig, eval_set: Dataset | None = None,
               init: MultiTaskModel | None = None, on_record=None):
    """Run ``cfg.iters`` steps; returns (student, trace).

    The first ``cfg.warmup`` steps are source-only; the teacher is then a copy
    of the student. ``eval_set`` (target images with labels and GT depth) is
    only read for the periodic metrics in the trace.
    """
    if source.labels is None:
        raise ValueError(f"{source.root}: source labels are required")
    target_losses = not cfg.source_only
    if target_losses and (target.masks is None or target.pseudo_depth is None):
        raise ValueError(f"{target.root}: target mask caches and pseudo-depth are required")
    student = init.copy() if init is not None else MultiTaskModel.init(source.num_classes, Rng.derive(cfg.seed, 0))
    teacher = None
    eval_idx = list(range(min(cfg.eval_images, len(eval_set)))) if eval_set is not None else []
    trace = []
    acc = {}

    def emit(step, with_eval):
        nonlocal acc
        rec = {"step": step}
        for k, (total, n) in acc.items():
            rec[k] = total / n
        if with_eval and eval_idx:
            rec.update({k: v for k, v in evaluate_model(student, eval_set, eval_idx).items()
                        if k in ("miou", "rmse_m")})
        if eval_idx and teacher is not None and eval_set.masks is not None:
            raw, ref = pseudo_label_accuracy(teacher, eval_set, eval_idx, cfg.quality_tau)
            rec["pl_acc_raw"] = raw
            rec["pl_acc_refined"] = ref
        trace.append(rec)
        if on_record is not None:
            on_record(rec)
        acc = {}

    emit(0, True)
    for step in range(cfg.iters):
        if step == cfg.warmup and target_losses:
            teacher = Teacher.from_student(student)
        rng = Rng.derive(cfg.seed, 1, step)
        src_batch = [SourceSample(source.images[i], source.labels[i]) for i in _sample(rng, len(source), cfg.batch)]
        full = target_losses and step >= cfg.warmup
        tgt_batch = []
        if full:
            tgt_batch = [
                TargetSample(target.images[i], target.masks[i], target.pseudo_depth[i], target.features(i),
                             target.stems[i])
                for i in _sample(rng, len(target), cfg.batch)
            ]
        student, teacher, parts = train_step(student, teacher, src_batch, tgt_batch, cfg, rng.fork(99), full)
        for k, v in parts.items():
            total, n = acc.get(k, (0.0, 0))
            acc[k] = (total + v, n + 1)
        done = step + 1
        if done % cfg.log_every == 0 or done == cfg.iters:
            emit(done, done % cfg.eval_every == 0 or done == cfg.iters)
    return student, trace


def source_only_baseline(source: Dataset, target: Dataset, cfg: TrainConfig, **kwargs):
    return train_loop(source, target, replace(cfg, source_only=True), **kwargs)
