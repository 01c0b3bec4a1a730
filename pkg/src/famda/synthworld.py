"""Procedural road scenes with exact labels and depth, plus foundation-model stand-ins.

Scenes are pinhole views of a flat ground plane: a pixel ``r`` rows below
the horizon sees ground at ``focal * cam_height / (r - horizon_row)`` meters.
Objects stand on the ground at a fixed distance and are painted far to near.
"""
from __future__ import annotations

import json
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gridcore, maskcache
from .augment import Rng
from .gridcore import DepthMap, Image, LabelMap
from .maskcache import MaskSet
from .parallel import num_threads

CLASS_NAMES = ("sky", "ground", "building", "obstacle", "pole")
SKY, GROUND, BUILDING, OBSTACLE, POLE = range(5)
NUM_CLASSES = len(CLASS_NAMES)
MAX_DEPTH = 120.0


@dataclass(frozen=True)
class SceneObject:
    cls: int
    distance: float
    lateral: float
    width: float
    height: float


@dataclass
class SceneSpec:
    size: tuple = (64, 64)
    num_classes: int = NUM_CLASSES
    horizon_row: int = 26
    focal: float = 64.0
    cam_height: float = 1.5
    objects: list = field(default_factory=list)


@dataclass
class SceneDistribution:
    """Ranges from which random SceneSpecs are drawn (uniform unless noted)."""

    size: tuple = (64, 64)
    horizon: tuple = (22, 30)
    focal: float = 64.0
    cam_height: float = 1.5
    buildings: tuple = (2, 4)
    building_distance: tuple = (25.0, 70.0)
    building_lateral: tuple = (6.0, 30.0)
    building_width: tuple = (8.0, 20.0)
    building_height: tuple = (8.0, 25.0)
    obstacles: tuple = (1, 4)
    obstacle_distance: tuple = (6.0, 35.0)
    obstacle_lateral: tuple = (-6.0, 6.0)
    poles: tuple = (1, 3)
    pole_distance: tuple = (6.0, 30.0)
    pole_lateral: tuple = (3.0, 10.0)


@dataclass
class ShiftSpec:
    strength: float = 0.0
    gains: tuple = (0.8, 1.0, 1.2)
    offsets: tuple = (0.08, -0.02, -0.1)
    noise_sigma: float = 0.3
    palette_rotation: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("shift strength must be in [0, 1]")


@dataclass
class OracleSpec:
    perturb_radius: int = 0
    drop_prob: float = 0.05
    overseg_prob: float = 0.1
    depth_a: float = 2.0
    depth_b: float = 0.5
    depth_sigma: float = 0.25

    def __post_init__(self):
        if self.depth_a <= 0:
            raise ValueError("depth affine scale a must be > 0")


def _uniform(rng: Rng, lo: float, hi: float) -> float:
    return lo + (hi - lo) * rng.uniform()


def _randint(rng: Rng, lo: int, hi: int) -> int:
    return lo + rng.below(hi - lo + 1)


def sample_scene_spec(rng: Rng, dist: SceneDistribution = SceneDistribution()) -> SceneSpec:
    objects = []
    for _ in range(_randint(rng, *dist.buildings)):
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        objects.append(SceneObject(
            BUILDING,
            _uniform(rng, *dist.building_distance),
            side * _uniform(rng, *dist.building_lateral),
            _uniform(rng, *dist.building_width),
            _uniform(rng, *dist.building_height),
        ))
    for _ in range(_randint(rng, *dist.obstacles)):
        objects.append(SceneObject(
            OBSTACLE,
            _uniform(rng, *dist.obstacle_distance),
            _uniform(rng, *dist.obstacle_lateral),
            _uniform(rng, 1.7, 2.5),
            _uniform(rng, 1.3, 2.0),
        ))
    for _ in range(_randint(rng, *dist.poles)):
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        objects.append(SceneObject(
            POLE,
            _uniform(rng, *dist.pole_distance),
            side * _uniform(rng, *dist.pole_lateral),
            0.4,
            _uniform(rng, 4.0, 7.0),
        ))
    return SceneSpec(
        size=tuple(dist.size),
        horizon_row=_randint(rng, *dist.horizon),
        focal=dist.focal,
        cam_height=dist.cam_height,
        objects=objects,
    )


def ground_depth(row, horizon_row: int, focal: float, cam_height: float):
    return focal * cam_height / (np.asarray(row, dtype=np.float64) - horizon_row)


def _object_box(obj: SceneObject, spec: SceneSpec):
    h, w = spec.size
    f = spec.focal
    center = w / 2.0 + f * obj.lateral / obj.distance
    half = f * obj.width / (2.0 * obj.distance)
    bottom = spec.horizon_row + f * spec.cam_height / obj.distance
    top = bottom - f * obj.height / obj.distance
    c0 = math.floor(center - half)
    c1 = max(c0 + 1, math.ceil(center + half))
    r1 = math.floor(bottom) + 1
    r0 = min(r1 - 1, math.ceil(top))
    return max(r0, 0), min(r1, h), max(c0, 0), min(c1, w)


_BUILDING_COLORS = np.array([[0.62, 0.38, 0.28], [0.78, 0.68, 0.52], [0.52, 0.50, 0.56], [0.70, 0.55, 0.45]])
_CAR_COLORS = np.array([[0.80, 0.12, 0.10], [0.12, 0.22, 0.70], [0.92, 0.92, 0.90], [0.10, 0.10, 0.12], [0.20, 0.55, 0.25]])
_POLE_COLORS = np.array([[0.22, 0.22, 0.20], [0.85, 0.75, 0.15]])


def generate_scene(rng: Rng, spec: SceneSpec):
    """Render (Image, LabelMap, DepthMap, regions); regions are (class, mask) pairs."""
    h, w = spec.size
    for obj in spec.objects:
        if obj.distance <= 0:
            raise ValueError(f"object behind camera: {obj}")
        if obj.distance > MAX_DEPTH:
            raise ValueError(f"object beyond {MAX_DEPTH} m: {obj}")
    rows = np.arange(h)
    labels = np.full((h, w), SKY, dtype=np.int64)
    depth = np.full((h, w), np.nan)
    below = rows > spec.horizon_row
    labels[below] = GROUND
    depth[below] = ground_depth(rows[below], spec.horizon_row, spec.focal, spec.cam_height)[:, None]
    if np.nanmax(depth, initial=0.0) > MAX_DEPTH:
        raise ValueError("ground depth exceeds the depth range; lower focal * cam_height")

    img = np.empty((h, w, 3))
    t = np.clip(rows / max(spec.horizon_row, 1), 0, 1)[:, None]
    sky = np.array([0.35, 0.55, 0.90]) * (1 - t) + np.array([0.70, 0.82, 0.95]) * t
    img[:] = sky[:, None, :]
    near = np.clip((rows - spec.horizon_row) / max(h - spec.horizon_row, 1), 0, 1)[:, None]
    ground = np.array([0.50, 0.48, 0.45]) * (1 - near) + np.array([0.36, 0.35, 0.34]) * near
    img[below] = np.broadcast_to(ground[:, None, :], (h, w, 3))[below]

    instance = np.full((h, w), -1, dtype=np.int64)
    order = sorted(range(len(spec.objects)), key=lambda i: -spec.objects[i].distance)
    for i in order:
        obj = spec.objects[i]
        r0, r1, c0, c1 = _object_box(obj, spec)
        if obj.cls == BUILDING:
            color = _BUILDING_COLORS[rng.below(len(_BUILDING_COLORS))]
        elif obj.cls == OBSTACLE:
            color = _CAR_COLORS[rng.below(len(_CAR_COLORS))]
        else:
            color = _POLE_COLORS[rng.below(len(_POLE_COLORS))]
        if r0 >= r1 or c0 >= c1:
            continue
        patch = np.broadcast_to(color, (r1 - r0, c1 - c0, 3)).copy()
        if obj.cls == BUILDING:
            # window grid, in image space so it shrinks with distance
            step = max(2, int(round(spec.focal * 3.0 / obj.distance)))
            yy, xx = np.mgrid[r0:r1, c0:c1]
            windows = ((yy // max(step // 2, 1)) % 2 == 0) & ((xx // max(step // 2, 1)) % 2 == 0)
            patch[windows] *= 0.6
        img[r0:r1, c0:c1] = patch
        labels[r0:r1, c0:c1] = obj.cls
        depth[r0:r1, c0:c1] = obj.distance
        instance[r0:r1, c0:c1] = i

    img = np.clip(img + 0.02 * rng.normal_array(h * w * 3).reshape(h, w, 3), 0.0, 1.0)

    regions = [(SKY, labels == SKY), (GROUND, labels == GROUND)]
    for i in range(len(spec.objects)):
        region = instance == i
        if region.any():
            regions.append((spec.objects[i].cls, region))
    regions = [(c, m) for c, m in regions if m.any()]
    return Image(img), LabelMap(labels, spec.num_classes), DepthMap(depth), regions


def _rotation_about_gray(angle: float) -> np.ndarray:
    k = np.ones(3) / math.sqrt(3.0)
    cross = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    c, s = math.cos(angle), math.sin(angle)
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(k, k)


def apply_domain_shift(img: Image, shift: ShiftSpec, rng: Rng) -> Image:
    """Hue rotation about the gray axis, per-channel affine, Gaussian noise, clamp."""
    s = shift.strength
    if s == 0.0:
        return Image(img.data.copy())
    out = img.data @ _rotation_about_gray(s * shift.palette_rotation).T
    gains = 1.0 + s * (np.asarray(shift.gains) - 1.0)
    out = out * gains + s * np.asarray(shift.offsets)
    sigma = s * shift.noise_sigma
    if sigma > 0:
        out = out + sigma * rng.normal_array(out.size).reshape(out.shape)
    return Image(np.clip(out, 0.0, 1.0))


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev-radius dilation; pixels outside the grid are treated as unset."""
    out = mask.copy()
    for _ in range(radius):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        out = grown.copy()
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev-radius erosion; the grid border does not erode."""
    return ~dilate(~mask, radius)


def oracle_masks(regions, oracle: OracleSpec, rng: Rng, shape=None) -> MaskSet:
    """Perturbed instance masks standing in for an offline segmentation model.

    Per region, in order: drop with ``drop_prob``; dilate or erode (even odds)
    by ``perturb_radius``; split at the median column with ``overseg_prob``.
    Three uniforms are drawn per region regardless of outcome.
    """
    if shape is None:
        if not regions:
            raise ValueError("shape is required when there are no regions")
        shape = regions[0][1].shape
    masks = []
    for _, region in regions:
        u_drop, u_mode, u_split = rng.uniform(), rng.uniform(), rng.uniform()
        if u_drop < oracle.drop_prob:
            continue
        m = np.asarray(region, dtype=bool)
        if oracle.perturb_radius > 0:
            m = dilate(m, oracle.perturb_radius) if u_mode < 0.5 else erode(m, oracle.perturb_radius)
        if u_split < oracle.overseg_prob and m.any():
            cols = np.nonzero(m)[1]
            cut = int(np.median(cols))
            left = m.copy()
            left[:, cut:] = False
            right = m & ~left
            pieces = [left, right]
        else:
            pieces = [m]
        masks.extend(p for p in pieces if p.any())
    meta = {
        "generator": "synthworld-oracle",
        "perturb_radius": oracle.perturb_radius,
        "drop_prob": oracle.drop_prob,
        "overseg_prob": oracle.overseg_prob,
        "pred_iou_thresh": 0.86,
    }
    return MaskSet(shape[0], shape[1], masks, meta)


def oracle_depth(gt: DepthMap, oracle: OracleSpec, rng: Rng) -> DepthMap:
    """Relative depth a*gt + b + N(0, sigma) on valid pixels."""
    if oracle.depth_a <= 0:
        raise ValueError("depth affine scale a must be > 0")
    out = np.full(gt.shape, np.nan)
    vals = oracle.depth_a * gt.data[gt.valid] + oracle.depth_b
    if oracle.depth_sigma > 0:
        vals = vals + oracle.depth_sigma * rng.normal_array(vals.size)
    out[gt.valid] = vals
    return DepthMap(out, gt.valid.copy())


DATASET_DIRS = ("images", "labels", "depth", "masks", "pseudo_depth")


def _write_one(out: Path, i: int, seed: int, dist, shift, oracle) -> str:
    stem = f"{i:05d}"
    rng = Rng.derive(seed, i)
    spec = sample_scene_spec(rng.fork(0), dist)
    img, labels, depth, regions = generate_scene(rng.fork(1), spec)
    shifted = apply_domain_shift(img, shift, rng.fork(2))
    masks = oracle_masks(regions, oracle, rng.fork(3), shape=labels.shape)
    pseudo = oracle_depth(depth, oracle, rng.fork(4))
    gridcore.write_image_png(out / "images" / f"{stem}.png", shifted)
    gridcore.write_label_png(out / "labels" / f"{stem}.png", labels)
    gridcore.write_fdpt(out / "depth" / f"{stem}.fdpt", depth)
    maskcache.save_maskset(maskcache.cache_path(out / "masks", stem), masks)
    gridcore.write_fdpt(out / "pseudo_depth" / f"{stem}.fdpt", pseudo)
    return stem


def generate_dataset(out_dir, n_images: int, dist: SceneDistribution = SceneDistribution(),
                     shift: ShiftSpec = ShiftSpec(), oracle: OracleSpec = OracleSpec(),
                     seed: int = 0, force: bool = False, extra_manifest: dict | None = None) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use --force)")
        for sub in DATASET_DIRS:
            shutil.rmtree(out / sub, ignore_errors=True)
        (out / "manifest.json").unlink(missing_ok=True)
    for sub in DATASET_DIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=num_threads()) as pool:
        stems = list(pool.map(lambda i: _write_one(out, i, seed, dist, shift, oracle), range(n_images)))
    manifest = {
        "seed": seed,
        "n_images": n_images,
        "num_classes": NUM_CLASSES,
        "class_names": list(CLASS_NAMES),
        "scene_distribution": asdict(dist),
        "shift": asdict(shift),
        "oracle": asdict(oracle),
        "stems": stems,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out
