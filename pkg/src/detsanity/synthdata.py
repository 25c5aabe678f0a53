"""Deterministic synthetic-shapes detection scenes and label randomization.

Scenes are H x W x 3 float64 images in [0, 1]: a low-amplitude noise
background with 1-4 solid shapes (circle / square / triangle) drawn on top.
Annotation boxes are the tight pixel extents of each rendered silhouette.
Object sizes are drawn from OBJECT_SIZE_RANGE, chosen together with the
detector's anchor geometry so that every object overlaps its nearest anchor
at IoU >= 0.5 (see detector.py).

``randomize`` applies the data-randomization transform: uniform random
class reassignment and/or Gaussian box-coordinate noise with validity
clamping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

CLASS_NAMES = ("circle", "square", "triangle")
OBJECT_SIZE_RANGE = (40.0, 64.0)
MAX_OBJECTS = 4
MAX_PLACEMENT_TRIES = 40
MAX_OVERLAP_IOU = 0.3
MIN_BOX_SIZE = 2.0

DATASET_FORMAT_VERSION = 1


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    annotations: list[tuple[tuple[float, float, float, float], int]]

    @property
    def size(self) -> int:
        return self.image.shape[0]


@dataclass
class RandomizationSpec:
    permute_labels: bool = False
    box_noise_stddev: float = 0.0  # pixels
    seed: int = 0


def _box_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _shape_mask(kind: int, cx: float, cy: float, size: float, image_size: int) -> np.ndarray:
    """Boolean silhouette of one shape, evaluated at pixel centers."""
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64) + 0.5
    half = size / 2.0
    if kind == 0:  # circle
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
    if kind == 1:  # square
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    # upward triangle with base `size` and height `size`
    inside = yy <= cy + half
    # left and right edges from apex (cx, cy-half) to the base corners
    t = (yy - (cy - half)) / size  # 0 at apex, 1 at base
    inside &= np.abs(xx - cx) <= t * half
    return inside & (yy >= cy - half)


def generate(
    count: int,
    image_size: int = 96,
    seed: int = 0,
    classes: tuple[str, ...] = CLASS_NAMES,
) -> list[SyntheticScene]:
    """Generate ``count`` deterministic scenes (same seed, same scenes)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if image_size < int(np.ceil(OBJECT_SIZE_RANGE[1])) + 4:
        raise ValueError(
            f"image_size {image_size} too small to place a shape of size "
            f"{OBJECT_SIZE_RANGE[1]:.0f}"
        )
    n_classes = len(classes)
    # balanced class pool: scenes consume classes round-robin from a
    # seed-shuffled cycle, keeping frequencies within a few percent
    pool_rng = np.random.default_rng([seed, 0xC1A55])
    pool = list(pool_rng.permutation(n_classes))
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        img = rng.uniform(0.0, 0.3, size=(image_size, image_size, 3))
        n_objects = int(rng.integers(1, MAX_OBJECTS + 1))
        annotations = []
        for _ in range(n_objects):
            if not pool:
                pool = list(pool_rng.permutation(n_classes))
            cls = int(pool[0])
            placed = False
            for _try in range(MAX_PLACEMENT_TRIES):
                size = rng.uniform(*OBJECT_SIZE_RANGE)
                half = size / 2.0
                cx = rng.uniform(half + 1, image_size - half - 1)
                cy = rng.uniform(half + 1, image_size - half - 1)
                mask = _shape_mask(cls, cx, cy, size, image_size)
                ys, xs = np.nonzero(mask)
                box = (
                    float(xs.min()),
                    float(ys.min()),
                    float(xs.max() + 1),
                    float(ys.max() + 1),
                )
                if any(_box_iou(box, b) > MAX_OVERLAP_IOU for b, _ in annotations):
                    continue
                color = rng.uniform(0.45, 1.0, size=3)
                img[mask] = color
                annotations.append((box, cls))
                placed = True
                break
            if placed:
                pool.pop(0)
        scenes.append(SyntheticScene(image=img, annotations=annotations))
    return scenes


def mean_box_side(scenes: list[SyntheticScene]) -> float:
    sides = []
    for scene in scenes:
        for (x0, y0, x1, y1), _ in scene.annotations:
            sides.append((x1 - x0 + y1 - y0) / 2.0)
    if not sides:
        raise ValueError("dataset has no annotations")
    return float(np.mean(sides))


def default_box_noise(scenes: list[SyntheticScene]) -> float:
    """Default noise magnitude: 10% of the mean annotation box side."""
    return 0.1 * mean_box_side(scenes)


def randomize(scenes: list[SyntheticScene], spec: RandomizationSpec) -> list[SyntheticScene]:
    """Apply label permutation / box noise; images are shared, not copied."""
    rng = np.random.default_rng(spec.seed)
    n_classes = len(CLASS_NAMES)
    out = []
    for scene in scenes:
        size = scene.size
        new_annotations = []
        for (x0, y0, x1, y1), cls in scene.annotations:
            if spec.permute_labels:
                cls = int(rng.integers(0, n_classes))
            if spec.box_noise_stddev > 0:
                noise = rng.normal(0.0, spec.box_noise_stddev, size=4)
                x0 = float(np.clip(x0 + noise[0], 0.0, size - MIN_BOX_SIZE))
                y0 = float(np.clip(y0 + noise[1], 0.0, size - MIN_BOX_SIZE))
                x1 = float(np.clip(x1 + noise[2], x0 + MIN_BOX_SIZE, size))
                y1 = float(np.clip(y1 + noise[3], y0 + MIN_BOX_SIZE, size))
            new_annotations.append(((x0, y0, x1, y1), cls))
        out.append(SyntheticScene(image=scene.image, annotations=new_annotations))
    return out


# --------------------------------------------------------------------------
# disk format: scene_XXXXX.png (8-bit RGB) + scene_XXXXX.txt with one
# "class_id x_min y_min x_max y_max" line per object
# --------------------------------------------------------------------------


def export_dataset(scenes: list[SyntheticScene], out_dir) -> list[str]:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, scene in enumerate(scenes):
        stem = f"scene_{i:05d}"
        arr8 = np.clip(np.round(scene.image * 255.0), 0, 255).astype(np.uint8)
        img_path = out / f"{stem}.png"
        Image.fromarray(arr8, "RGB").save(img_path)
        lines = [
            f"{cls} {x0:.4f} {y0:.4f} {x1:.4f} {y1:.4f}"
            for (x0, y0, x1, y1), cls in scene.annotations
        ]
        ann_path = out / f"{stem}.txt"
        ann_path.write_text("\n".join(lines) + ("\n" if lines else ""))
        written.extend([str(img_path), str(ann_path)])
    return written


def load_dataset(in_dir) -> list[SyntheticScene]:
    from pathlib import Path

    root = Path(in_dir)
    pngs = sorted(root.glob("scene_*.png"))
    if not pngs:
        raise FileNotFoundError(f"no scene_*.png files under {root}")
    scenes = []
    for img_path in pngs:
        arr = np.asarray(Image.open(img_path), dtype=np.float64) / 255.0
        annotations = []
        ann_path = img_path.with_suffix(".txt")
        for line in ann_path.read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            cls = int(parts[0])
            x0, y0, x1, y1 = (float(v) for v in parts[1:5])
            annotations.append(((x0, y0, x1, y1), cls))
        scenes.append(SyntheticScene(image=arr, annotations=annotations))
    return scenes
