"""Low-rank adapters for linear layers.

A :class:`LoRALinear` keeps the host weight ``W`` and bias ``b`` frozen and
learns ``A`` (r x d_in) and ``B`` (d_out x r).  The forward pass is
``x W^T + b + (alpha / r) * (x A^T) B^T`` with rows of ``x`` as samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor_core import Node, Parameter, Tape, load_checkpoint, save_checkpoint

__all__ = [
    "SITE_NAMES",
    "LoRAConfig",
    "Linear",
    "LoRALinear",
    "SiteEntry",
    "init_lora",
    "lora_forward",
    "merge",
    "count_trainable",
    "ADAPTER_MAGIC",
    "save_adapters",
    "load_adapters",
]

SITE_NAMES = (
    "text_self_attn",
    "image_self_attn",
    "cross_attn",
    "ffn",
    "box_head_first",
    "text_encoder_final",
)

ADAPTER_MAGIC = b"LRA1"
LORA_INIT_STD = 0.01


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 4
    alpha: float | None = None  # None -> alpha = rank
    sites: frozenset[str] = field(default_factory=lambda: frozenset(SITE_NAMES))
    seed: int = 0

    def __post_init__(self) -> None:
        if int(self.rank) != self.rank or self.rank < 1:
            raise ValueError(f"rank must be a positive integer, got {self.rank}")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "sites", frozenset(self.sites))
        unknown = self.sites - set(SITE_NAMES)
        if unknown:
            raise ValueError(f"unknown LoRA sites: {sorted(unknown)}")

    @property
    def scaling(self) -> float:
        alpha = float(self.rank) if self.alpha is None else float(self.alpha)
        return alpha / self.rank


class Linear:
    """Affine map ``x W^T + b`` with ``W`` stored as d_out x d_in."""

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray, trainable: bool = True):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64).reshape(1, -1)
        if bias.shape[1] != weight.shape[0]:
            raise ValueError(f"{name}: bias length {bias.shape[1]} != d_out {weight.shape[0]}")
        self.name = name
        self.weight = Parameter(f"{name}.weight", weight, trainable)
        self.bias = Parameter(f"{name}.bias", bias, trainable)

    @classmethod
    def init(cls, name: str, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False) -> "Linear":
        if zero:
            w = np.zeros((d_out, d_in))
        else:
            limit = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-limit, limit, size=(d_out, d_in))
        return cls(name, w, np.zeros((1, d_out)))

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, tape: Tape, x: Node) -> Node:
        if x.shape[1] != self.d_in:
            raise ValueError(f"{self.name}: input has {x.shape[1]} columns, expected {self.d_in}")
        return tape.add(tape.matmul(x, tape.transpose(tape.param(self.weight))), tape.param(self.bias))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.weight.value.T + self.bias.value


class LoRALinear:
    """A frozen :class:`Linear` plus a trainable rank-r update."""

    def __init__(self, base: Linear, A: np.ndarray, B: np.ndarray, scaling: float):
        self.base = base
        self.name = base.name
        base.weight.trainable = False
        base.bias.trainable = False
        self.A = Parameter(f"{base.name}.lora_A", A, True)
        self.B = Parameter(f"{base.name}.lora_B", B, True)
        if self.A.shape[1] != base.d_in or self.B.shape[0] != base.d_out or self.A.shape[0] != self.B.shape[1]:
            raise ValueError(f"{base.name}: adapter shapes {self.A.shape}, {self.B.shape} do not fit {base.weight.shape}")
        self.scaling = float(scaling)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.base.d_in

    @property
    def d_out(self) -> int:
        return self.base.d_out

    @property
    def weight(self) -> Parameter:
        return self.base.weight

    @property
    def bias(self) -> Parameter:
        return self.base.bias

    def parameters(self) -> list[Parameter]:
        return [self.base.weight, self.base.bias, self.A, self.B]

    def adapter_parameters(self) -> list[Parameter]:
        return [self.A, self.B]

    def __call__(self, tape: Tape, x: Node) -> Node:
        return lora_forward(self, tape, x)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        return self.base.apply(x) + self.scaling * ((x @ self.A.value.T) @ self.B.value.T)


def init_lora(layer: Linear, config: LoRAConfig, index: int = 0) -> LoRALinear:
    """Wrap ``layer`` with a fresh adapter; ``index`` decorrelates sites sharing a seed."""
    r = config.rank
    if r > min(layer.d_in, layer.d_out):
        raise ValueError(
            f"{layer.name}: rank {r} exceeds min(d_in={layer.d_in}, d_out={layer.d_out})"
        )
    rng = np.random.default_rng([config.seed, index])
    A = rng.normal(0.0, LORA_INIT_STD, size=(r, layer.d_in))
    B = np.zeros((layer.d_out, r))
    return LoRALinear(layer, A, B, config.scaling)


def lora_forward(layer: LoRALinear, tape: Tape, x: Node) -> Node:
    frozen = layer.base(tape, x)
    low = tape.matmul(tape.matmul(x, tape.transpose(tape.param(layer.A))), tape.transpose(tape.param(layer.B)))
    return tape.add(frozen, tape.scale(low, layer.scaling))


def merge(layer: LoRALinear) -> Linear:
    """Fold the adapter into a plain layer with ``W' = W + (alpha/r) B A``."""
    w = layer.base.weight.value + layer.scaling * (layer.B.value @ layer.A.value)
    return Linear(layer.name, w, layer.base.bias.value.copy())


@dataclass(frozen=True)
class SiteEntry:
    site: str
    layer: str
    d_in: int
    d_out: int


def count_trainable(entries: Iterable[SiteEntry], config: LoRAConfig) -> int:
    return sum(config.rank * (e.d_in + e.d_out) for e in entries if e.site in config.sites)


def save_adapters(path: str | Path, layers: Iterable[LoRALinear], config: LoRAConfig, sites: Iterable[str]) -> None:
    tensors: dict[str, np.ndarray] = {
        "__meta__.rank": np.array([[float(config.rank)]]),
        "__meta__.alpha": np.array([[config.scaling * config.rank]]),
        "__meta__.seed": np.array([[float(config.seed)]]),
    }
    for s in sorted(sites):
        tensors[f"__site__.{s}"] = np.zeros((1, 1))
    for layer in layers:
        tensors[layer.A.name] = layer.A.value
        tensors[layer.B.name] = layer.B.value
    save_checkpoint(path, tensors, magic=ADAPTER_MAGIC)


def load_adapters(path: str | Path) -> tuple[LoRAConfig, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Return the adapter config and ``{layer name: (A, B)}``."""
    tensors = load_checkpoint(path, magic=ADAPTER_MAGIC)
    rank = int(tensors.pop("__meta__.rank")[0, 0])
    alpha = float(tensors.pop("__meta__.alpha")[0, 0])
    seed = int(tensors.pop("__meta__.seed")[0, 0])
    sites = set()
    for key in list(tensors):
        if key.startswith("__site__."):
            sites.add(key[len("__site__."):])
            del tensors[key]
    pairs: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for key, value in tensors.items():
        if key.endswith(".lora_A"):
            layer = key[: -len(".lora_A")]
            pairs[layer] = (value, tensors[f"{layer}.lora_B"])
    return LoRAConfig(rank=rank, alpha=alpha, sites=frozenset(sites), seed=seed), pairs
