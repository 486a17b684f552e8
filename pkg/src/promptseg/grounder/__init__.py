"""Toy text-conditioned box detector, its synthetic data and its trainer."""
from .model import (
    PROMPT_VOCAB,
    GrounderModel,
    UnknownPromptError,
    build_model,
    forward,
    prompt_id,
    trainable_fraction,
)
from .synthetic import CLASSES, IMAGE_SIZE, TUMOR_CLASSES, ImageSample, gen_synthetic, render_sample
from .train import (
    AdamW,
    TrainConfig,
    TrainPair,
    TrainingDiverged,
    TrainResult,
    clip_grad_norm,
    loss,
    make_pairs,
    one_cycle_lr,
    pair_loss_fn,
    predict_detections,
    train,
    validation_iou,
)
