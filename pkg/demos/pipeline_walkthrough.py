"""
One case through the whole pipeline
===================================

transcript -> prompt -> box -> threshold -> mask -> metrics, using the library
directly (the ``promptseg run`` command chains the same stages over files).
"""

import numpy as np

from promptseg.clinical_prompt import Transcript, extract, load_rules, load_vocabulary
from promptseg.detect2seg import (
    BBox,
    BoxFillSegmenter,
    merge_masks,
    rasterize_box,
    segment_from_boxes,
    threshold_boxes,
    yolo_to_xyxy,
)
from promptseg.grounder import predict_detections, render_sample
from promptseg.grounder.recipe import load_reference_host
from promptseg.metrics import GroundTruth, build_report

# A synthetic MRI-like slice with a pituitary-textured blob.
sample = render_sample(np.random.default_rng(7), "pituitary", "demo", "source")

# 1. Prompt from the dictated findings.
prompt = extract(Transcript("demo", "Enlarged sella with a macroadenoma."), load_vocabulary(), load_rules())
print("prompt:", prompt.prompt, "| evidence:", prompt.evidence)

# 2. Text-conditioned box from the pretrained toy grounder.
dets = predict_detections(load_reference_host(), sample.pixels, prompt.prompt, "demo")
print("detections:", [(round(b.x1, 1), round(b.y1, 1), round(b.x2, 1), round(b.y2, 1), round(b.score, 3)) for b in dets.boxes])

# 3. Keep boxes scoring at least tau = 0.3.
kept = threshold_boxes(dets, 0.3)

# 4. Fill each surviving box to get a mask, then OR the masks together.
outcome = segment_from_boxes(kept, BoxFillSegmenter())
mask = merge_masks(outcome.masks, 32, 32)
print("mask area:", mask.area)

# 5. Score against the ground truth box and mask.
gt_box = BBox(*yolo_to_xyxy(*sample.gt_box, 32, 32), label="pituitary")
truth = GroundTruth("demo", "pituitary", (gt_box,), rasterize_box(gt_box, 32, 32))
report = build_report([kept], [truth], {"demo": prompt.class_label}, {"demo": mask})
print(report.to_dict()["metrics"])
