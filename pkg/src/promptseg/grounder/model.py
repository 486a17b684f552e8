"""A miniature text-conditioned box predictor.

Layout (single attention head everywhere, no normalization layers)::

    prompt ids -> token embedding + position -> text self-attn -> FFN -> final proj
    8x8 patches -> patch proj + position -> image self-attn -> FFN   (feature enhancer)
    image tokens attend to text tokens (fusion cross-attn) -> FFN
    one learned query attends to fused image tokens (decoder cross-attn) -> FFN
    query -> box head (fc1, relu, fc2, sigmoid) and score head (linear, sigmoid)
"""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

from ..lora import Linear, LoRAConfig, LoRALinear, SiteEntry, count_trainable, init_lora, merge
from ..tensor_core import Node, Parameter, Tape, load_checkpoint, save_checkpoint
from .synthetic import IMAGE_SIZE

PROMPT_VOCAB = ("glioma", "meningioma", "pituitary", "healthy")
PAD_ID = len(PROMPT_VOCAB)
PATCH = 8
N_PATCHES = (IMAGE_SIZE // PATCH) ** 2
TEXT_LEN = 2
MASK_NEG = -1e9

_ATTN_SITES = {
    "text.attn": "text_self_attn",
    "image.attn": "image_self_attn",
    "fusion.xattn": "cross_attn",
    "decoder.xattn": "cross_attn",
}
_FFN_BLOCKS = ("text.ffn", "image.ffn", "fusion.ffn", "decoder.ffn")


def coordinate_features(d: int) -> np.ndarray:
    """Patch-center features (x, y, x^2, y^2, xy, then sinusoids), zero-padded or cut to ``d``."""
    g = IMAGE_SIZE // PATCH
    centers = (np.arange(g) + 0.5) / g
    ys, xs = np.meshgrid(centers, centers, indexing="ij")
    x, y = xs.reshape(-1), ys.reshape(-1)
    cols = [x, y, x * x, y * y, x * y]
    k = 1
    while len(cols) < d:
        cols += [np.sin(np.pi * k * x), np.cos(np.pi * k * x), np.sin(np.pi * k * y), np.cos(np.pi * k * y)]
        k += 1
    return np.stack(cols[:d], axis=1)


class UnknownPromptError(ValueError):
    pass


def prompt_id(prompt: str) -> int:
    try:
        return PROMPT_VOCAB.index(prompt.strip().lower())
    except ValueError:
        raise UnknownPromptError(f"prompt {prompt!r} is not one of {PROMPT_VOCAB}") from None


def patchify(images: np.ndarray) -> np.ndarray:
    """(B, 32, 32) -> (B*16, 64), patches in row-major order per image."""
    b = images.shape[0]
    g = IMAGE_SIZE // PATCH
    x = images.reshape(b, g, PATCH, g, PATCH).transpose(0, 1, 3, 2, 4)
    return x.reshape(b * g * g, PATCH * PATCH)


@lru_cache(maxsize=64)
def _block_mask(batch: int, nq: int, nk: int) -> np.ndarray:
    """Additive mask confining attention to each sample's own tokens."""
    q_owner = np.repeat(np.arange(batch), nq)
    k_owner = np.repeat(np.arange(batch), nk)
    mask = np.where(q_owner[:, None] == k_owner[None, :], 0.0, MASK_NEG)
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=64)
def _tile_selector(batch: int, n: int) -> np.ndarray:
    sel = np.tile(np.eye(n), (batch, 1))
    sel.setflags(write=False)
    return sel


class GrounderModel:
    def __init__(self, d_model: int = 16, d_hidden: int = 32, seed: int = 0):
        self.d_model = d_model
        self.d_hidden = d_hidden
        rng = np.random.default_rng(seed)
        d = d_model
        self.tok_emb = Parameter("text.tok_emb", rng.normal(0.0, 1.0, (len(PROMPT_VOCAB) + 1, d)))
        self.text_pos = Parameter("text.pos", rng.normal(0.0, 0.1, (TEXT_LEN, d)))
        self.image_pos = Parameter("image.pos", coordinate_features(d) + rng.normal(0.0, 0.01, (N_PATCHES, d)))
        self.query = Parameter("decoder.query", rng.normal(0.0, 0.1, (1, d)))
        self.layers: dict[str, Linear | LoRALinear] = {}
        self.sites: list[SiteEntry] = []

        def lin(name: str, d_in: int, d_out: int, site: str | None = None, zero: bool = False) -> None:
            self.layers[name] = Linear.init(name, d_in, d_out, rng, zero=zero)
            if site is not None:
                self.sites.append(SiteEntry(site, name, d_in, d_out))

        for block, site in _ATTN_SITES.items():
            lin(f"{block}.q", d, d, site)
            lin(f"{block}.k", d, d)
            lin(f"{block}.v", d, d, site)
            lin(f"{block}.o", d, d)
        for block in _FFN_BLOCKS:
            lin(f"{block}.fc1", d, d_hidden, "ffn")
            lin(f"{block}.fc2", d_hidden, d, "ffn")
        lin("text.final", d, d, "text_encoder_final")
        lin("image.patch_proj", PATCH * PATCH, d)
        lin("box_head.fc1", d, d_hidden, "box_head_first")
        lin("box_head.fc2", d_hidden, 4, zero=True)
        lin("score_head", d, 1)
        self.lora_config: LoRAConfig | None = None

    # parameters

    def _raw_params(self) -> list[Parameter]:
        return [self.tok_emb, self.text_pos, self.image_pos, self.query]

    def host_parameters(self) -> Iterator[Parameter]:
        yield from self._raw_params()
        for layer in self.layers.values():
            yield layer.weight
            yield layer.bias

    def adapters(self) -> list[LoRALinear]:
        return [l for l in self.layers.values() if isinstance(l, LoRALinear)]

    def parameters(self) -> list[Parameter]:
        params = list(self.host_parameters())
        for a in self.adapters():
            params.extend(a.adapter_parameters())
        return params

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def host_param_count(self) -> int:
        return sum(p.size for p in self.host_parameters())

    def host_state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.host_parameters()}

    def merged_state(self) -> dict[str, np.ndarray]:
        state = self.host_state()
        for a in self.adapters():
            merged = merge(a)
            state[merged.weight.name] = merged.weight.value
        return state

    def load_host_state(self, state: dict[str, np.ndarray]) -> None:
        own = {p.name: p for p in self.host_parameters()}
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != model {p.shape}")
            p.value[...] = value

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "GrounderModel":
        d = state["text.tok_emb"].shape[1]
        hidden = state["text.ffn.fc1.weight"].shape[0]
        model = cls(d_model=d, d_hidden=hidden)
        model.load_host_state(state)
        return model

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.host_state())

    @classmethod
    def load(cls, path: str | Path) -> "GrounderModel":
        return cls.from_state(load_checkpoint(path))

    # LoRA wiring

    def apply_lora(self, config: LoRAConfig) -> list[LoRALinear]:
        """Freeze every host tensor and wrap the layers registered at ``config.sites``."""
        if self.adapters():
            raise RuntimeError("model already carries adapters")
        for p in self.host_parameters():
            p.trainable = False
        wrapped = []
        for index, entry in enumerate(self.sites):
            if entry.site in config.sites:
                layer = self.layers[entry.layer]
                assert isinstance(layer, Linear)
                adapter = init_lora(layer, config, index)
                self.layers[entry.layer] = adapter
                wrapped.append(adapter)
        self.lora_config = config
        return wrapped

    def load_adapters(self, config: LoRAConfig, pairs: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        wrapped = {a.name: a for a in self.apply_lora(config)}
        if set(wrapped) != set(pairs):
            raise ValueError(f"adapter layers {sorted(pairs)} do not match sites {sorted(wrapped)}")
        for name, (A, B) in pairs.items():
            wrapped[name].A.value[...] = A
            wrapped[name].B.value[...] = B

    def site_entries(self, sites) -> list[SiteEntry]:
        return [e for e in self.sites if e.site in sites]

    # forward

    def _attention(self, tape: Tape, block: str, xq: Node, xkv: Node, mask: np.ndarray | None) -> Node:
        L = self.layers
        q = L[f"{block}.q"](tape, xq)
        k = L[f"{block}.k"](tape, xkv)
        v = L[f"{block}.v"](tape, xkv)
        scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / np.sqrt(self.d_model))
        if mask is not None:
            scores = tape.add(scores, tape.const(mask))
        return L[f"{block}.o"](tape, tape.matmul(tape.row_softmax(scores), v))

    def _ffn(self, tape: Tape, block: str, x: Node) -> Node:
        h = tape.relu(self.layers[f"{block}.fc1"](tape, x))
        return self.layers[f"{block}.fc2"](tape, h)

    def forward_batch(self, tape: Tape, images: np.ndarray, prompt_ids: np.ndarray) -> tuple[Node, Node]:
        """Return ``(boxes B x 4 in normalized cxcywh, scores B x 1)`` nodes."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"images must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {images.shape[1:]}")
        ids = np.asarray(prompt_ids, dtype=int).reshape(-1)
        b = images.shape[0]
        if ids.size != b:
            raise ValueError("one prompt per image required")
        if np.any((ids < 0) | (ids >= len(PROMPT_VOCAB))):
            raise UnknownPromptError(f"prompt ids out of range: {ids}")
        L = self.layers
        batched = b > 1

        def m(nq: int, nk: int) -> np.ndarray | None:
            return _block_mask(b, nq, nk) if batched else None

        onehot = np.zeros((b * TEXT_LEN, len(PROMPT_VOCAB) + 1))
        onehot[np.arange(b) * TEXT_LEN, ids] = 1.0
        onehot[np.arange(b) * TEXT_LEN + 1, PAD_ID] = 1.0
        t = tape.add(
            tape.matmul(tape.const(onehot), tape.param(self.tok_emb)),
            tape.matmul(tape.const(_tile_selector(b, TEXT_LEN)), tape.param(self.text_pos)),
        )
        t = tape.add(t, self._attention(tape, "text.attn", t, t, m(TEXT_LEN, TEXT_LEN)))
        t = tape.add(t, self._ffn(tape, "text.ffn", t))
        t = L["text.final"](tape, t)

        x = tape.add(
            L["image.patch_proj"](tape, tape.const(patchify(images))),
            tape.matmul(tape.const(_tile_selector(b, N_PATCHES)), tape.param(self.image_pos)),
        )
        x = tape.add(x, self._attention(tape, "image.attn", x, x, m(N_PATCHES, N_PATCHES)))
        x = tape.add(x, self._ffn(tape, "image.ffn", x))
        x = tape.add(x, self._attention(tape, "fusion.xattn", x, t, m(N_PATCHES, TEXT_LEN)))
        x = tape.add(x, self._ffn(tape, "fusion.ffn", x))

        q = tape.matmul(tape.const(np.ones((b, 1))), tape.param(self.query))
        q = tape.add(q, self._attention(tape, "decoder.xattn", q, x, m(1, N_PATCHES)))
        q = tape.add(q, self._ffn(tape, "decoder.ffn", q))

        box = tape.sigmoid(L["box_head.fc2"](tape, tape.relu(L["box_head.fc1"](tape, q))))
        score = tape.sigmoid(L["score_head"](tape, q))
        return box, score


def build_model(d_model: int = 16, d_hidden: int = 32, seed: int = 0, lora: LoRAConfig | None = None) -> GrounderModel:
    model = GrounderModel(d_model, d_hidden, seed)
    if lora is not None:
        model.apply_lora(lora)
    return model


def forward(model: GrounderModel, image: np.ndarray, prompt: str) -> tuple[np.ndarray, float]:
    """Single-image prediction: normalized (cx, cy, w, h) and a score in (0, 1)."""
    tape = Tape()
    box, score = model.forward_batch(tape, np.asarray(image)[None], np.array([prompt_id(prompt)]))
    return box.value[0].copy(), float(score.value[0, 0])


def trainable_fraction(model: GrounderModel, config: LoRAConfig) -> tuple[int, int, float]:
    """(trainable, total, fraction) for ``config`` on ``model``'s host shapes.

    Counted from the site registry, so it does not matter whether adapters are
    attached yet; a model with adapters attached must agree with the count.
    """
    for e in model.site_entries(config.sites):
        if config.rank > min(e.d_in, e.d_out):
            raise ValueError(f"{e.layer}: rank {config.rank} exceeds min(d_in={e.d_in}, d_out={e.d_out})")
    trainable = count_trainable(model.sites, config)
    attached = sum(p.size for a in model.adapters() for p in a.adapter_parameters())
    if model.adapters() and attached != trainable:
        raise ValueError(f"attached adapters hold {attached} parameters, config implies {trainable}")
    total = model.host_param_count() + trainable
    return trainable, total, trainable / total
