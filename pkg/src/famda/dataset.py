"""Loading generated dataset trees into memory.

A tree holds ``images/*.png`` plus any of ``labels/`` (PNG), ``depth/``
(FDPT ground truth), ``masks/`` (FMSK) and ``pseudo_depth/`` (FDPT), keyed
by image stem, and a ``manifest.json``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import gridcore, maskcache
from .model import extract_features


@dataclass
class Dataset:
    root: Path
    num_classes: int
    stems: list
    images: list
    labels: list | None = None
    depth: list | None = None
    masks: list | None = None
    pseudo_depth: list | None = None
    manifest: dict = field(default_factory=dict)
    _features: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.stems)

    def features(self, i: int):
        """Features of the unaugmented image ``i`` (cached)."""
        if i not in self._features:
            self._features[i] = extract_features(self.images[i])
        return self._features[i]


def load_dataset(root, *, labels=False, depth=False, masks=False, pseudo_depth=False,
                 num_classes: int | None = None) -> Dataset:
    """Read a dataset tree; only the requested parts are touched.

    Missing requested files raise ``FileNotFoundError`` naming the path.
    """
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{img_dir}: no images directory")
    manifest = {}
    if (root / "manifest.json").exists():
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if num_classes is None:
        num_classes = int(manifest.get("num_classes", 5))
    stems = sorted(p.stem for p in img_dir.glob("*.png"))
    ds = Dataset(root, num_classes, stems, [gridcore.read_image_png(img_dir / f"{s}.png") for s in stems],
                 manifest=manifest)

    def need(path: Path) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"{path}: missing")
        return path

    if labels:
        ds.labels = [gridcore.read_label_png(need(root / "labels" / f"{s}.png"), num_classes) for s in stems]
    if depth:
        ds.depth = [gridcore.read_fdpt(need(root / "depth" / f"{s}.fdpt")) for s in stems]
    if masks:
        ds.masks = [maskcache.load_maskset(need(maskcache.cache_path(root / "masks", s))) for s in stems]
    if pseudo_depth:
        ds.pseudo_depth = [gridcore.read_fdpt(need(root / "pseudo_depth" / f"{s}.fdpt")) for s in stems]
    return ds
