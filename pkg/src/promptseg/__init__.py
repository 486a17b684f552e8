"""Transcript-to-mask tumor pipeline: prompt extraction, LoRA grounding, box-prompted segmentation."""

__version__ = "0.1.0"
