"""Training harness: AdamW, one-cycle schedule, global-norm clipping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..detect2seg import BBox, DetectionSet, yolo_to_xyxy
from ..lora import LoRAConfig
from ..tensor_core import Node, Parameter, Tape
from .model import PROMPT_VOCAB, GrounderModel, forward, prompt_id
from .synthetic import IMAGE_SIZE, TUMOR_CLASSES, ImageSample

log = logging.getLogger(__name__)

MODES = ("full_finetune", "lora")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 200
    warmup: float = 0.10
    max_grad_norm: float = 5.0
    batch_size: int = 32
    mode: str = "lora"
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lora: LoRAConfig | None = field(default_factory=LoRAConfig)
    seed: int = 0
    augment: bool = True
    box_weight: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.warmup < 1.0:
            raise ValueError(f"warmup fraction must be in (0, 1), got {self.warmup}")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "lora" and self.lora is None:
            raise ValueError("lora mode needs a LoRAConfig")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def one_cycle_lr(step: int, total_steps: int, peak: float, warmup: float = 0.1,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """Linear ramp from ``peak/div_factor`` to ``peak`` at ``round(warmup*total)``, then cosine down.

    ``step`` is 0-based; the floor at the end is ``peak / div_factor / final_div_factor``.
    """
    start = peak / div_factor
    floor = start / final_div_factor
    warm = max(1, int(round(warmup * total_steps)))
    if step <= warm:
        # written so that step == warm yields exactly ``peak``
        return peak - (peak - start) * (warm - step) / warm
    frac = min(1.0, (step - warm) / max(1, total_steps - warm))
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> tuple[float, float]:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping and the factor applied.
    """
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    factor = 1.0
    if total > max_norm:
        factor = max_norm / total
        for p in params:
            p.grad *= factor
    return total, factor


class AdamW:
    """Adam with weight decay applied directly to the weights, not the gradient."""

    def __init__(self, params: Sequence[Parameter], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value *= 1.0 - self.lr * self.weight_decay
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainPair:
    image: np.ndarray
    prompt: str
    gt_box: tuple[float, float, float, float]
    present: bool


def flip_sample(pixels: np.ndarray, box: tuple[float, float, float, float], flip_x: bool, flip_y: bool, present: bool):
    """Mirror an image and its normalized box; the all-zero absent box stays zero."""
    cx, cy, w, h = box
    if flip_x:
        pixels = pixels[:, ::-1]
        cx = 1.0 - cx if present else cx
    if flip_y:
        pixels = pixels[::-1, :]
        cy = 1.0 - cy if present else cy
    return np.ascontiguousarray(pixels), (cx, cy, w, h)


def make_pairs(samples: Sequence[ImageSample], rng: np.random.Generator, augment: bool = False) -> list[TrainPair]:
    """Positive pair per tumor image plus one mismatched-prompt negative per image.

    With ``augment`` each image is independently mirrored left-right and/or
    up-down (row-stripe textures survive both flips).
    """
    pairs = []
    for s in samples:
        if augment:
            fx, fy = rng.random(2) < 0.5
            pixels, box = flip_sample(s.pixels, s.gt_box, fx, fy, s.present)
            s = ImageSample(s.case_id, pixels, box, s.gt_class, s.present, s.mask)
        if s.present:
            pairs.append(TrainPair(s.pixels, s.gt_class, s.gt_box, True))
            others = [c for c in TUMOR_CLASSES if c != s.gt_class]
            pairs.append(TrainPair(s.pixels, others[rng.integers(len(others))], (0.0, 0.0, 0.0, 0.0), False))
        else:
            pairs.append(TrainPair(s.pixels, TUMOR_CLASSES[rng.integers(len(TUMOR_CLASSES))], s.gt_box, False))
    return pairs


def batch_loss(tape: Tape, box: Node, score: Node, gt_boxes: np.ndarray, present: np.ndarray,
               box_weight: float = 1.0) -> Node:
    """Mean over the batch of ``present * MSE(box, gt) + BCE(score, present)``."""
    present = np.asarray(present, dtype=np.float64).reshape(-1, 1)
    gate = np.repeat(present, 4, axis=1)
    box_term = tape.mse(tape.hadamard(box, tape.const(gate)), tape.const(np.asarray(gt_boxes) * gate))
    if box_weight != 1.0:
        box_term = tape.scale(box_term, box_weight)
    score_term = tape.bce(score, tape.const(present))
    return tape.add(box_term, score_term)


def loss(box: np.ndarray, score: float, sample: ImageSample | TrainPair) -> float:
    """Scalar loss of one prediction against one sample."""
    tape = Tape()
    node = batch_loss(tape, tape.const(np.asarray(box, dtype=float).reshape(1, 4)), tape.const([[score]]),
                      np.asarray(sample.gt_box, dtype=float).reshape(1, 4), np.array([float(sample.present)]))
    return float(node.value[0, 0])


def pair_loss_fn(model: GrounderModel, pairs: Sequence[TrainPair], box_weight: float = 1.0) -> Callable[[Tape], Node]:
    images = np.stack([p.image for p in pairs])
    ids = np.array([prompt_id(p.prompt) for p in pairs])
    gts = np.array([p.gt_box for p in pairs], dtype=float)
    present = np.array([p.present for p in pairs], dtype=float)

    def fn(tape: Tape) -> Node:
        box, score = model.forward_batch(tape, images, ids)
        return batch_loss(tape, box, score, gts, present, box_weight)

    return fn


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class StepRecord:
    step: int
    lr: float
    grad_norm: float
    clip_factor: float
    loss: float


@dataclass
class TrainResult:
    model: GrounderModel
    history: list[float]
    steps: list[StepRecord] = field(default_factory=list)


def prepare_model(model: GrounderModel, config: TrainConfig) -> None:
    """Put ``model`` into the parameter regime ``config.mode`` asks for."""
    if config.mode == "lora":
        if not model.adapters():
            model.apply_lora(config.lora)
    else:
        if model.adapters():
            raise ValueError("full_finetune expects a model without adapters")
        for p in model.host_parameters():
            p.trainable = True


def train(
    model: GrounderModel,
    dataset: Sequence[ImageSample],
    config: TrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
    record_steps: bool = False,
) -> TrainResult:
    if not dataset:
        raise ValueError("dataset is empty")
    prepare_model(model, config)
    params = model.trainable_parameters()
    all_params = model.parameters()
    opt = AdamW(params, config.lr, config.betas, config.eps, config.weight_decay)
    rng = np.random.default_rng(config.seed)

    n_pairs = len(make_pairs(dataset, np.random.default_rng(0)))
    per_epoch = math.ceil(n_pairs / config.batch_size)
    total = per_epoch * config.epochs
    history: list[float] = []
    steps: list[StepRecord] = []
    step = 0
    for epoch in range(config.epochs):
        pairs = make_pairs(dataset, rng, config.augment)
        order = rng.permutation(len(pairs))
        running, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[start : start + config.batch_size]]
            for p in all_params:
                p.zero_grad()
            tape = Tape()
            try:
                node = pair_loss_fn(model, batch, config.box_weight)(tape)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from exc
            value = float(node.value[0, 0])
            if not math.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch} step {step}: loss {value}, lr {opt.lr}")
            tape.backward(node)
            norm, factor = clip_grad_norm(params, config.max_grad_norm)
            opt.lr = one_cycle_lr(step, total, config.lr, config.warmup)
            opt.step()
            if record_steps:
                steps.append(StepRecord(step, opt.lr, norm, factor, value))
            running += value * len(batch)
            seen += len(batch)
            step += 1
        history.append(running / seen)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
        log.debug("epoch %d loss %.5f", epoch, history[-1])
    return TrainResult(model, history, steps)


def predict_detections(model: GrounderModel, image: np.ndarray, prompt: str, case_id: str) -> DetectionSet:
    """Wrap the single candidate as a labeled pixel-space box; ``healthy`` suppresses detection."""
    image = np.asarray(image)
    height, width = image.shape
    if prompt_id(prompt) == PROMPT_VOCAB.index("healthy"):
        return DetectionSet(case_id, height, width, ())
    (cx, cy, w, h), score = forward(model, image, prompt)
    x1, y1, x2, y2 = yolo_to_xyxy(float(cx), float(cy), float(w), float(h), width, height)
    if x2 <= x1 or y2 <= y1:
        return DetectionSet(case_id, height, width, ())
    return DetectionSet(case_id, height, width, (BBox(x1, y1, x2, y2, score=score, label=prompt),))


def validation_iou(model: GrounderModel, samples: Sequence[ImageSample]) -> float:
    """Mean box IoU over tumor-bearing samples, prompting with the true class."""
    from ..metrics import iou_box

    ious = []
    for s in samples:
        if not s.present:
            continue
        dets = predict_detections(model, s.pixels, s.gt_class, s.case_id)
        gt = BBox(*yolo_to_xyxy(*s.gt_box, IMAGE_SIZE, IMAGE_SIZE))
        ious.append(iou_box(dets.boxes[0], gt) if dets.boxes else 0.0)
    return float(np.mean(ious)) if ious else float("nan")
