"""Reference recipe: pretrain a host on the source domain, adapt it to the target domain.

The host checkpoint shipped in ``promptseg/data/toy_host.ckpt`` is the output of
:func:`pretrain_host` (see ``scripts/pretrain_host.py``); adaptation runs in about
half a minute per mode on one core.
"""
from __future__ import annotations

from dataclasses import replace
from importlib import resources
from pathlib import Path

from ..lora import LoRAConfig
from .model import GrounderModel, build_model
from .synthetic import ImageSample, gen_synthetic
from .train import TrainConfig, TrainResult, train, validation_iou

HOST_FILE = "toy_host.ckpt"

# source-domain pretraining (the "pretrained detector")
HOST_D_MODEL = 16
HOST_D_HIDDEN = 64
HOST_MODEL_SEED = 0
HOST_N = 3000
HOST_DATA_SEED = 1
HOST_CONFIG = TrainConfig(lr=3e-3, epochs=150, batch_size=32, mode="full_finetune", lora=None, box_weight=20.0)

# target-domain adaptation
ADAPT_N = 400
ADAPT_DATA_SEED = 11
VAL_N = 200
VAL_SEED = 12
ADAPT_LR = 3e-3
ADAPT_EPOCHS = 60
ADAPT_RANK = 4


def pretrain_host() -> TrainResult:
    model = build_model(HOST_D_MODEL, HOST_D_HIDDEN, HOST_MODEL_SEED)
    data = gen_synthetic(HOST_N, HOST_DATA_SEED, domain="source")
    return train(model, data, HOST_CONFIG)


def host_checkpoint_path() -> Path:
    return Path(str(resources.files("promptseg.data").joinpath(HOST_FILE)))


def load_reference_host() -> GrounderModel:
    return GrounderModel.load(host_checkpoint_path())


def reference_config(mode: str) -> TrainConfig:
    lora = LoRAConfig(rank=ADAPT_RANK) if mode == "lora" else None
    return replace(HOST_CONFIG, lr=ADAPT_LR, epochs=ADAPT_EPOCHS, mode=mode, lora=lora)


def reference_data() -> tuple[list[ImageSample], list[ImageSample]]:
    """(train, validation) target-domain samples."""
    return (gen_synthetic(ADAPT_N, ADAPT_DATA_SEED, domain="target", prefix="train"),
            gen_synthetic(VAL_N, VAL_SEED, domain="target", prefix="val"))


def run_reference(mode: str) -> tuple[TrainResult, float]:
    """Adapt the shipped host in ``mode``; returns the training result and validation mean IoU."""
    data, val = reference_data()
    result = train(load_reference_host(), data, reference_config(mode))
    return result, validation_iou(result.model, val)
