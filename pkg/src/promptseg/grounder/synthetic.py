"""Synthetic 32x32 "MRI-like" slices with one class-textured blob or none."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IMAGE_SIZE = 32
CLASSES = ("glioma", "meningioma", "pituitary", "healthy")
TUMOR_CLASSES = CLASSES[:3]
SIZE_RANGE = (0.15, 0.4)

# texture rendered for each class; the source domain rotates this table
_TEXTURES = {"target": ("ring", "solid", "stripes"), "source": ("solid", "stripes", "ring")}


@dataclass(eq=False)
class ImageSample:
    case_id: str
    pixels: np.ndarray  # (H, W) float64 in [0, 1]
    gt_box: tuple[float, float, float, float]  # normalized cx, cy, w, h
    gt_class: str
    present: bool
    mask: np.ndarray  # (H, W) bool, blob pixels

    def __post_init__(self) -> None:
        if self.present:
            if not all(0.0 <= v <= 1.0 for v in self.gt_box) or self.gt_box[2] <= 0 or self.gt_box[3] <= 0:
                raise ValueError(f"{self.case_id}: invalid gt box {self.gt_box}")
        elif any(self.gt_box):
            raise ValueError(f"{self.case_id}: absent tumor must carry the all-zero box")


def _background(rng: np.random.Generator) -> np.ndarray:
    return 0.05 + 0.10 * rng.random((IMAGE_SIZE, IMAGE_SIZE))


def _blob_mask(cx: float, cy: float, w: float, h: float) -> np.ndarray:
    centers = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
    dx = (centers[None, :] - cx) / (w / 2)
    dy = (centers[:, None] - cy) / (h / 2)
    r2 = dx * dx + dy * dy
    mask = r2 <= 1.0
    if not mask.any():
        mask[min(int(cy * IMAGE_SIZE), IMAGE_SIZE - 1), min(int(cx * IMAGE_SIZE), IMAGE_SIZE - 1)] = True
    return mask, r2


def _paint(pixels: np.ndarray, mask: np.ndarray, r2: np.ndarray, texture: str, rng: np.random.Generator) -> None:
    jitter = 0.05 * rng.random(pixels.shape)
    if texture == "ring":
        values = np.where(r2 > 0.4, 0.85, 0.40) + jitter
    elif texture == "solid":
        values = 0.70 + jitter
    elif texture == "stripes":
        rows = np.arange(IMAGE_SIZE)[:, None] % 2 == 0
        values = np.where(rows, 0.95, 0.35) + jitter + np.zeros_like(pixels)
    else:  # pragma: no cover
        raise ValueError(texture)
    pixels[mask] = values[mask]


def render_sample(rng: np.random.Generator, gt_class: str, case_id: str, domain: str = "target") -> ImageSample:
    """Draw one image of the given class from ``rng``."""
    if gt_class not in CLASSES:
        raise ValueError(f"unknown class {gt_class!r}")
    pixels = _background(rng)
    if gt_class == "healthy":
        return ImageSample(case_id, pixels, (0.0, 0.0, 0.0, 0.0), gt_class, False,
                           np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool))
    w, h = rng.uniform(*SIZE_RANGE, size=2)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    mask, r2 = _blob_mask(cx, cy, w, h)
    texture = _TEXTURES[domain][TUMOR_CLASSES.index(gt_class)]
    _paint(pixels, mask, r2, texture, rng)
    return ImageSample(case_id, pixels, (float(cx), float(cy), float(w), float(h)), gt_class, True, mask)


def gen_synthetic(n: int, seed: int, domain: str = "target", prefix: str = "syn") -> list[ImageSample]:
    """``n`` samples with uniformly drawn classes; identical for identical arguments."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if domain not in _TEXTURES:
        raise ValueError(f"unknown domain {domain!r}")
    rng = np.random.default_rng(seed)
    classes = rng.integers(0, len(CLASSES), size=n)
    return [
        render_sample(rng, CLASSES[c], f"{prefix}_{seed}_{i:05d}", domain)
        for i, c in enumerate(classes)
    ]
