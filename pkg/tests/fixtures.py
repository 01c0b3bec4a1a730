"""Deterministic fixtures shared by the tests and the golden generator."""
import numpy as np

from famda.augment import Rng
from famda.gridcore import DepthMap, Image, LabelMap
from famda.maskcache import MaskSet
from famda.model import MultiTaskModel

NUM_CLASSES = 5


def fixture_image(seed=1, h=16, w=16) -> Image:
    return Image(Rng(seed).uniform_array(h * w * 3).reshape(h, w, 3))


def fixture_labels(seed=2, h=16, w=16, num_classes=NUM_CLASSES) -> LabelMap:
    rng = Rng(seed)
    data = np.array([rng.below(num_classes) for _ in range(h * w)], dtype=np.uint8).reshape(h, w)
    return LabelMap(data, num_classes)


def fixture_depth(seed=3, h=16, w=16) -> DepthMap:
    rng = Rng(seed)
    data = 1.0 + 60.0 * rng.uniform_array(h * w).reshape(h, w)
    valid = rng.uniform_array(h * w).reshape(h, w) > 0.1
    return DepthMap(data, valid)


def fixture_masks(seed=4, h=16, w=16, count=4) -> MaskSet:
    rng = Rng(seed)
    masks = []
    for _ in range(count):
        top, left = rng.below(h - 4), rng.below(w - 4)
        m = np.zeros((h, w), dtype=bool)
        m[top:top + 2 + rng.below(h - top - 2), left:left + 2 + rng.below(w - left - 2)] = True
        masks.append(m)
    return MaskSet(h, w, masks, {"points_per_side": "32", "pred_iou_thresh": "0.86"})


def fixture_model(seed=5, num_classes=NUM_CLASSES) -> MultiTaskModel:
    return MultiTaskModel.init(num_classes, Rng(seed))


def random_maskset(rng: np.random.Generator, h, w, count) -> MaskSet:
    masks = []
    for _ in range(count):
        m = rng.random((h, w)) < rng.uniform(0.05, 0.6)
        if not m.any():
            m[rng.integers(h), rng.integers(w)] = True
        masks.append(m)
    return MaskSet(h, w, masks)
