"""On-disk dataset layout: ``images/<case>.pgm``, ``annotations.jsonl``, ``gt_masks/<case>.pgm``."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .detect2seg import BBox, Mask, yolo_to_xyxy
from .fileio import SCHEMA_VERSION, image_to_pgm, pgm_to_image, read_jsonl, read_pgm, write_jsonl, write_pgm
from .grounder.synthetic import ImageSample
from .metrics import GroundTruth

ANNOTATION_KEYS = ("case_id", "class", "bbox_yolo", "present", "width", "height")


def annotation_record(sample: ImageSample) -> dict[str, Any]:
    h, w = sample.pixels.shape
    return {
        "schema_version": SCHEMA_VERSION,
        "case_id": sample.case_id,
        "class": sample.gt_class,
        "bbox_yolo": [float(v) for v in sample.gt_box],
        "present": bool(sample.present),
        "width": int(w),
        "height": int(h),
    }


def write_dataset(out_dir: str | Path, samples: Sequence[ImageSample]) -> None:
    """Quantized 8-bit images, gt masks and one annotation line per sample, sorted by case_id."""
    out = Path(out_dir)
    samples = sorted(samples, key=lambda s: s.case_id)
    for s in samples:
        write_pgm(out / "images" / f"{s.case_id}.pgm", image_to_pgm(s.pixels))
        write_pgm(out / "gt_masks" / f"{s.case_id}.pgm", Mask(s.mask).to_pgm())
    write_jsonl(out / "annotations.jsonl", [annotation_record(s) for s in samples])


def load_image(images_dir: str | Path, case_id: str) -> np.ndarray:
    return pgm_to_image(read_pgm(Path(images_dir) / f"{case_id}.pgm"))


def ground_truth_from_record(rec: dict[str, Any], masks_dir: str | Path | None = None) -> GroundTruth:
    missing = [k for k in ANNOTATION_KEYS if k not in rec]
    if missing:
        raise KeyError(f"annotation for {rec.get('case_id', '?')} lacks {missing}")
    width, height = int(rec["width"]), int(rec["height"])
    boxes: tuple[BBox, ...] = ()
    if rec["present"]:
        x1, y1, x2, y2 = yolo_to_xyxy(*rec["bbox_yolo"], width, height)
        boxes = (BBox(x1, y1, x2, y2, 1.0, rec["class"]),)
    mask = None
    if masks_dir is not None and rec["present"]:
        path = Path(masks_dir) / f"{rec['case_id']}.pgm"
        if path.exists():
            mask = Mask.from_pgm(read_pgm(path))
    return GroundTruth(str(rec["case_id"]), rec["class"], boxes, mask, height, width)


def load_ground_truth(annotations: str | Path, masks_dir: str | Path | None = None) -> list[GroundTruth]:
    return [ground_truth_from_record(r, masks_dir) for r in read_jsonl(annotations)]
