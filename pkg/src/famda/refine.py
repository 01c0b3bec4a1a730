"""Mask-guided majority-vote refinement of teacher pseudo-labels."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gridcore, maskcache
from .gridcore import IGNORE, LabelMap, ProbMap
from .kernels import vote_refine
from .maskcache import MaskSet
from .parallel import num_threads

log = logging.getLogger(__name__)


def processing_order(masks: MaskSet) -> list[int]:
    """Mask indices by decreasing area; equal areas keep their stored order."""
    areas = masks.areas
    return sorted(range(len(areas)), key=lambda i: -areas[i])


def majority_vote_refine(teacher_labels: LabelMap, teacher_probs: ProbMap, masks: MaskSet) -> LabelMap:
    """Overwrite each mask's non-IGNORE pixels with the plurality teacher label.

    Votes are always counted on ``teacher_labels`` as given; later (smaller)
    masks overwrite earlier ones where they overlap. Ties go to the class
    with more summed teacher probability in the mask, then the smaller index.
    """
    shape = teacher_labels.shape
    if teacher_probs.shape != shape or (masks.height, masks.width) != shape:
        raise ValueError(
            f"shape mismatch: labels {shape}, probs {teacher_probs.shape}, "
            f"masks {(masks.height, masks.width)}"
        )
    if teacher_probs.num_classes != teacher_labels.num_classes:
        raise ValueError("class count mismatch between labels and probabilities")
    if not len(masks):
        return LabelMap(teacher_labels.data.copy(), teacher_labels.num_classes)
    order = processing_order(masks)
    indices = [np.flatnonzero(masks.masks[i].ravel()) for i in order]
    flat = vote_refine(
        teacher_labels.data.ravel(),
        teacher_probs.data.reshape(-1, teacher_probs.num_classes),
        indices,
        IGNORE,
    )
    return LabelMap(flat.reshape(shape), teacher_labels.num_classes)


@dataclass
class RefineSummary:
    changed: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    @property
    def total_changed(self) -> int:
        return sum(self.changed.values())

    def as_dict(self) -> dict:
        return {
            "changed_pixels": dict(sorted(self.changed.items())),
            "errors": dict(sorted(self.errors.items())),
            "total_changed": self.total_changed,
        }


def refine_dataset(dataset_dir, cache_dir, output_dir, num_classes: int) -> RefineSummary:
    """Refine ``teacher_labels/*.png`` with ``<cache_dir>/<stem>.fmsk``.

    Teacher probabilities are not stored on disk, so ties fall back to the
    one-hot encoding of the teacher labels (i.e. to the smaller class index).
    A missing or unreadable cache is recorded per image and skipped.
    """
    dataset_dir, cache_dir, output_dir = Path(dataset_dir), Path(cache_dir), Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    stems = sorted(p.stem for p in (dataset_dir / "images").glob("*.png"))

    def work(stem):
        labels = gridcore.read_label_png(dataset_dir / "teacher_labels" / f"{stem}.png", num_classes)
        masks = maskcache.load_maskset(maskcache.cache_path(cache_dir, stem))
        refined = majority_vote_refine(labels, gridcore.one_hot(labels), masks)
        gridcore.write_label_png(output_dir / f"{stem}.png", refined)
        return int((refined.data != labels.data).sum())

    summary = RefineSummary()
    with ThreadPoolExecutor(max_workers=num_threads()) as pool:
        futures = {stem: pool.submit(work, stem) for stem in stems}
        for stem in stems:
            try:
                summary.changed[stem] = futures[stem].result()
            except (OSError, ValueError) as exc:
                log.warning("refine %s: %s", stem, exc)
                summary.errors[stem] = str(exc)
    return summary


def label_accuracy(pred: LabelMap, gt: LabelMap) -> float:
    """Fraction of non-IGNORE ground-truth pixels where ``pred`` agrees."""
    scored = gt.data != IGNORE
    if not scored.any():
        raise ValueError("no scored pixels")
    return float((pred.data[scored] == gt.data[scored]).mean())
