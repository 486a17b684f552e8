"""Score thresholding, box conversions and box-prompted mask generation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from .fileio import SCHEMA_VERSION, read_pgm

DEFAULT_TAU = 0.3


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0
    label: str = ""

    def __post_init__(self) -> None:
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def clamp(self, width: float, height: float) -> "BBox":
        return replace(
            self,
            x1=min(max(self.x1, 0.0), width),
            y1=min(max(self.y1, 0.0), height),
            x2=min(max(self.x2, 0.0), width),
            y2=min(max(self.y2, 0.0), height),
        )

    def to_dict(self) -> dict[str, Any]:
        return {"x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2, "score": self.score, "label": self.label}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BBox":
        return cls(float(d["x1"]), float(d["y1"]), float(d["x2"]), float(d["y2"]),
                   float(d.get("score", 1.0)), str(d.get("label", "")))


@dataclass(frozen=True)
class DetectionSet:
    case_id: str
    height: int
    width: int
    boxes: tuple[BBox, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))
        for b in self.boxes:
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise ValueError(f"{self.case_id}: box {b} outside {self.width}x{self.height} image")

    def __len__(self) -> int:
        return len(self.boxes)

    def to_record(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "case_id": self.case_id,
            "width": self.width,
            "height": self.height,
            "boxes": [b.to_dict() for b in self.boxes],
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "DetectionSet":
        return cls(str(rec["case_id"]), int(rec["height"]), int(rec["width"]),
                   tuple(BBox.from_dict(b) for b in rec.get("boxes", [])))


class Mask:
    """Binary H x W raster, ``True`` marking tumor pixels."""

    __slots__ = ("bits",)

    def __init__(self, bits: np.ndarray):
        bits = np.asarray(bits)
        if bits.ndim != 2:
            raise ValueError("mask must be 2-D")
        self.bits = bits.astype(bool)

    @classmethod
    def zeros(cls, height: int, width: int) -> "Mask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape  # type: ignore[return-value]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Mask) and self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self) -> str:
        return f"Mask({self.shape[0]}x{self.shape[1]}, area={self.area})"

    def to_pgm(self) -> np.ndarray:
        return np.where(self.bits, 255, 0).astype(np.uint8)

    @classmethod
    def from_pgm(cls, raster: np.ndarray) -> "Mask":
        return cls(np.asarray(raster) > 127)


def threshold_boxes(dets: DetectionSet, tau: float = DEFAULT_TAU) -> DetectionSet:
    """Keep boxes whose score is at least ``tau``, preserving order."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return replace(dets, boxes=tuple(b for b in dets.boxes if b.score >= tau))


def yolo_to_xyxy(cx: float, cy: float, w: float, h: float, width: float, height: float) -> tuple[float, float, float, float]:
    """Normalized center/size to absolute corners, clamped to the image."""
    if w <= 0 or h <= 0:
        raise ValueError(f"box width/height must be positive, got w={w}, h={h}")
    for v in (cx, cy, w, h):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"YOLO coordinate {v} outside [0, 1]")
    x1 = min(max((cx - w / 2) * width, 0.0), width)
    y1 = min(max((cy - h / 2) * height, 0.0), height)
    x2 = min(max((cx + w / 2) * width, 0.0), width)
    y2 = min(max((cy + h / 2) * height, 0.0), height)
    return x1, y1, x2, y2


def xyxy_to_yolo(x1: float, y1: float, x2: float, y2: float, width: float, height: float) -> tuple[float, float, float, float]:
    if x2 <= x1 or y2 <= y1:
        raise ValueError("degenerate box")
    return ((x1 + x2) / 2 / width, (y1 + y2) / 2 / height, (x2 - x1) / width, (y2 - y1) / height)


def read_yolo_txt(
    path: str | Path,
    case_id: str,
    width: int,
    height: int,
    class_names: Sequence[str] | None = None,
) -> DetectionSet:
    """Read ``class cx cy w h [score]`` lines; a missing score means 1.0 (annotation)."""
    boxes = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) not in (5, 6):
            raise ValueError(f"{path}:{lineno}: expected 5 or 6 fields, got {len(parts)}")
        cls_id = int(parts[0])
        cx, cy, w, h = (float(p) for p in parts[1:5])
        score = float(parts[5]) if len(parts) == 6 else 1.0
        label = class_names[cls_id] if class_names is not None else str(cls_id)
        boxes.append(BBox(*yolo_to_xyxy(cx, cy, w, h, width, height), score=score, label=label))
    return DetectionSet(case_id, height, width, tuple(boxes))


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def rasterize_box(box: BBox, height: int, width: int) -> Mask:
    """Half-open pixel rectangle ``[round(x1), round(x2)) x [round(y1), round(y2))``."""
    x1 = min(max(round_half_up(box.x1), 0), width)
    x2 = min(max(round_half_up(box.x2), 0), width)
    y1 = min(max(round_half_up(box.y1), 0), height)
    y2 = min(max(round_half_up(box.y2), 0), height)
    bits = np.zeros((height, width), dtype=bool)
    bits[y1:y2, x1:x2] = True
    return Mask(bits)


class SegmentationError(RuntimeError):
    pass


class Segmenter(Protocol):
    name: str

    def __call__(self, case_id: str, index: int, box: BBox, height: int, width: int) -> Mask: ...


class BoxFillSegmenter:
    """Baseline: the mask is the rasterized box interior."""

    name = "box_fill"

    def __call__(self, case_id: str, index: int, box: BBox, height: int, width: int) -> Mask:
        return rasterize_box(box, height, width)


class ExternalMaskSegmenter:
    """Loads precomputed per-box masks named ``<case_id>__<index>.pgm``."""

    name = "external"

    def __init__(self, mask_dir: str | Path):
        self.mask_dir = Path(mask_dir)

    def __call__(self, case_id: str, index: int, box: BBox, height: int, width: int) -> Mask:
        path = self.mask_dir / f"{case_id}__{index}.pgm"
        if not path.exists():
            raise SegmentationError(f"missing external mask {path}")
        mask = Mask.from_pgm(read_pgm(path))
        if mask.shape != (height, width):
            raise SegmentationError(f"{path}: mask is {mask.shape}, image is {(height, width)}")
        return mask


@dataclass
class SegmentationOutcome:
    masks: list[Mask] = field(default_factory=list)
    indices: list[int] = field(default_factory=list)
    failures: list[tuple[int, str]] = field(default_factory=list)


def segment_from_boxes(dets: DetectionSet, segmenter: Segmenter) -> SegmentationOutcome:
    """One mask per box; a failing box is recorded and the rest still run."""
    out = SegmentationOutcome()
    for i, box in enumerate(dets.boxes):
        try:
            mask = segmenter(dets.case_id, i, box, dets.height, dets.width)
        except SegmentationError as exc:
            out.failures.append((i, str(exc)))
            continue
        out.masks.append(mask)
        out.indices.append(i)
    return out


def merge_masks(masks: Iterable[Mask], height: int | None = None, width: int | None = None) -> Mask:
    """Pixelwise OR; an empty input needs explicit dims and yields all zeros."""
    masks = list(masks)
    if not masks:
        if height is None or width is None:
            raise ValueError("merging zero masks needs explicit height and width")
        return Mask.zeros(height, width)
    shape = masks[0].shape
    if (height is not None and width is not None) and shape != (height, width):
        raise ValueError(f"mask dims {shape} != requested {(height, width)}")
    bits = np.zeros(shape, dtype=bool)
    for m in masks:
        if m.shape != shape:
            raise ValueError(f"mask dims differ: {m.shape} vs {shape}")
        bits |= m.bits
    return Mask(bits)
