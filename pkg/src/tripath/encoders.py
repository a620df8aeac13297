"""Toy transformer encoders with frozen-backbone fine-tuning strategies.

The image tower patchifies a small RGB image, runs pre-norm transformer blocks,
and projects every token (CLS plus patches) through one linear layer. The text
tower runs causal blocks over assembled prompt sequences and pools the last
token. Backbones are randomly initialized stand-ins for pretrained towers: text
is always frozen; the image side exposes seven tuning strategies controlling
exactly which parameter subset trains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .store import ParamStore

VISUAL_STRATEGIES = ("None", "Full", "Bias", "Proj", "Partial", "Prompt", "Adapter")


class PromptLengthError(ValueError):
    pass


@dataclass
class ImageEncoderConfig:
    height: int = 16
    width: int = 16
    channels: int = 3
    patch: int = 4
    depth: int = 2
    d_in: int = 64
    d: int = 64
    heads: int = 4
    adapter_r: int = 8
    prompt_len: int = 4

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("patch size must divide image height and width")
        if self.d_in % self.heads:
            raise ValueError("heads must divide d_in")
        if not 0 < self.adapter_r < self.d_in:
            raise ValueError("adapter bottleneck must satisfy 0 < r < d_in")
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)


@dataclass
class TextEncoderConfig:
    d_in: int = 64
    depth: int = 2
    heads: int = 4
    d: int = 64
    max_len: int = 8

    def __post_init__(self):
        if self.d_in % self.heads:
            raise ValueError("heads must divide d_in")


@dataclass
class EncodedImage:
    x_cls: np.ndarray
    patch_tokens: np.ndarray


def layer_norm(x, gain, bias, eps: float = 1e-5):
    mu = T.mean_(x, axis=-1, keepdims=True)
    centered = T.sub(x, mu)
    var = T.mean_(T.mul(centered, centered), axis=-1, keepdims=True)
    inv = T.div(1.0, T.sqrt(T.add(var, eps)))
    return T.add(T.mul(T.mul(centered, inv), gain), bias)


def adapter_forward(x, w_down, w_up):
    """Bottleneck adapter with its own residual: x + GELU(x W_down) W_up."""
    w_down = w_down.tensor if hasattr(w_down, "tensor") else w_down
    w_up = w_up.tensor if hasattr(w_up, "tensor") else w_up
    return T.add(x, T.matmul(T.gelu(T.matmul(x, w_down)), w_up))


def _heads_split(x, heads):
    b, n, d = x.shape
    dh = d // heads
    return T.transpose(T.reshape(x, (b, n, heads, dh)), (0, 2, 1, 3))


def _heads_join(x):
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _self_attention(x, p, prefix, heads, mask=None):
    q = T.add(T.matmul(x, p[f"{prefix}.W_q"].tensor), p[f"{prefix}.b_q"].tensor)
    k = T.add(T.matmul(x, p[f"{prefix}.W_k"].tensor), p[f"{prefix}.b_k"].tensor)
    v = T.add(T.matmul(x, p[f"{prefix}.W_v"].tensor), p[f"{prefix}.b_v"].tensor)
    qh, kh, vh = _heads_split(q, heads), _heads_split(k, heads), _heads_split(v, heads)
    dh = q.shape[-1] // heads
    scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = T.add(scores, mask)
    weights = T.softmax(scores, axis=-1)
    out = _heads_join(T.matmul(weights, vh))
    return T.add(T.matmul(out, p[f"{prefix}.W_o"].tensor), p[f"{prefix}.b_o"].tensor)


def _mlp(x, p, prefix):
    h = T.gelu(T.add(T.matmul(x, p[f"{prefix}.W_1"].tensor), p[f"{prefix}.b_1"].tensor))
    return T.add(T.matmul(h, p[f"{prefix}.W_2"].tensor), p[f"{prefix}.b_2"].tensor)


def _block(x, p, prefix, heads, mask=None, adapters=False):
    """Pre-norm block: attention, residual, (adapter), norm, MLP, residual, (adapter)."""
    normed = layer_norm(x, p[f"{prefix}.ln1.gain"].tensor, p[f"{prefix}.ln1.bias"].tensor)
    x = T.add(x, _self_attention(normed, p, f"{prefix}.attn", heads, mask))
    if adapters:
        x = adapter_forward(x, p[f"{prefix}.adapter_attn.W_down"], p[f"{prefix}.adapter_attn.W_up"])
    normed = layer_norm(x, p[f"{prefix}.ln2.gain"].tensor, p[f"{prefix}.ln2.bias"].tensor)
    x = T.add(x, _mlp(normed, p, f"{prefix}.mlp"))
    if adapters:
        x = adapter_forward(x, p[f"{prefix}.adapter_mlp.W_down"], p[f"{prefix}.adapter_mlp.W_up"])
    return x


def _add_block_params(store: ParamStore, prefix: str, d_in: int, trainable: bool):
    for ln in ("ln1", "ln2"):
        store.add(f"{prefix}.{ln}.gain", (d_in,), "ones", trainable)
        store.add(f"{prefix}.{ln}.bias", (d_in,), "zeros", trainable)
    for proj in ("q", "k", "v", "o"):
        store.add(f"{prefix}.attn.W_{proj}", (d_in, d_in), "fan_in", trainable)
        store.add(f"{prefix}.attn.b_{proj}", (d_in,), "zeros", trainable)
    store.add(f"{prefix}.mlp.W_1", (d_in, 4 * d_in), "fan_in", trainable)
    store.add(f"{prefix}.mlp.b_1", (4 * d_in,), "zeros", trainable)
    store.add(f"{prefix}.mlp.W_2", (4 * d_in, d_in), "fan_in", trainable)
    store.add(f"{prefix}.mlp.b_2", (d_in,), "zeros", trainable)


class ImageEncoder:
    def __init__(self, cfg: ImageEncoderConfig, store: ParamStore, prefix: str = "img"):
        self.cfg = cfg
        self.store = store
        self.prefix = prefix
        self.strategy = "None"
        n = cfg.n_patches
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        self.backbone_names: list[str] = []

        def backbone(name, shape, init):
            self.backbone_names.append(f"{prefix}.{name}")
            store.add(f"{prefix}.{name}", shape, init, trainable=False)

        backbone("patch.W", (patch_dim, cfg.d_in), "fan_in")
        backbone("cls", (cfg.d_in,), "normal")
        backbone("pos", (n + 1, cfg.d_in), "normal")
        for i in range(cfg.depth):
            before = set(store.names())
            _add_block_params(store, f"{prefix}.block{i}", cfg.d_in, trainable=False)
            self.backbone_names.extend(sorted(set(store.names()) - before))
        backbone("proj.W", (cfg.d_in, cfg.d), "fan_in")

        # strategy-specific modules exist for every build so parameter values are
        # identical across strategy toggles; they are used only when active
        self.adapter_names: list[str] = []
        for i in range(cfg.depth):
            for kind in ("adapter_attn", "adapter_mlp"):
                down = f"{prefix}.block{i}.{kind}.W_down"
                up = f"{prefix}.block{i}.{kind}.W_up"
                store.add(down, (cfg.d_in, cfg.adapter_r), "fan_in", trainable=False)
                store.add(up, (cfg.adapter_r, cfg.d_in), "zeros", trainable=False)
                self.adapter_names.extend([down, up])
        store.add(f"{prefix}.visual_prompt", (cfg.prompt_len, cfg.d_in), "normal", trainable=False)

    def _p(self, name):
        return self.store[f"{self.prefix}.{name}"]

    def patchify(self, images) -> T.Tensor:
        """Tokens (B, 1 + N, d_in): CLS then row-major patch projections, plus positions."""
        cfg = self.cfg
        images = T._raw(images)
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        b = images.shape[0]
        if images.shape[1:] != (cfg.height, cfg.width, cfg.channels):
            raise T.ShapeError(f"expected images of shape {(cfg.height, cfg.width, cfg.channels)}")
        gh, gw, p = cfg.height // cfg.patch, cfg.width // cfg.patch, cfg.patch
        x = T.reshape(images, (b, gh, p, gw, p, cfg.channels))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        x = T.reshape(x, (b, gh * gw, p * p * cfg.channels))
        patches = T.matmul(x, self._p("patch.W").tensor)
        cls_tok = T.expand_lead(T.reshape(self._p("cls").tensor, (1, cfg.d_in)), b)
        tokens = T.concat([cls_tok, patches], axis=1)
        return T.add(tokens, self._p("pos").tensor)

    def forward(self, images):
        """Returns (x_cls (B, d), patch tokens (B, N, d)), both after the g-projection."""
        cfg = self.cfg
        tokens = self.patchify(images)
        b = tokens.shape[0]
        if self.strategy == "Prompt":
            vp = T.expand_lead(self._p("visual_prompt").tensor, b)
            tokens = T.concat([tokens, vp], axis=1)
        use_adapters = self.strategy == "Adapter"
        for i in range(cfg.depth):
            tokens = _block(tokens, self.store, f"{self.prefix}.block{i}", cfg.heads, adapters=use_adapters)
        core = T.slice_axis(tokens, 1, 0, 1 + cfg.n_patches)
        projected = T.matmul(core, self._p("proj.W").tensor)
        x_cls = T.reshape(T.slice_axis(projected, 1, 0, 1), (b, cfg.d))
        patch_tokens = T.slice_axis(projected, 1, 1, 1 + cfg.n_patches)
        return x_cls, patch_tokens


def encode_image(image, encoder: ImageEncoder) -> EncodedImage:
    x_cls, patches = encoder.forward(np.asarray(image)[None])
    return EncodedImage(x_cls=x_cls.data[0], patch_tokens=patches.data[0])


def set_tuning_strategy(encoder: ImageEncoder, strategy: str) -> set[str]:
    """Configure which image-tower parameters train; returns that name set.

    Prompt, vocabulary, disentangler, and traction parameters live outside the
    towers and are unaffected (they always train).
    """
    if strategy not in VISUAL_STRATEGIES:
        raise ValueError(f"unknown tuning strategy {strategy!r}; choose one of {VISUAL_STRATEGIES}")
    cfg = encoder.cfg
    prefix = encoder.prefix
    if strategy == "None":
        selected: set[str] = set()
    elif strategy == "Full":
        selected = set(encoder.backbone_names)
    elif strategy == "Bias":
        selected = {n for n in encoder.backbone_names if n.rsplit(".", 1)[-1].startswith("b")}
    elif strategy == "Proj":
        selected = {f"{prefix}.proj.W"}
    elif strategy == "Partial":
        last = f"{prefix}.block{cfg.depth - 1}."
        selected = {n for n in encoder.backbone_names if n.startswith(last)}
    elif strategy == "Prompt":
        selected = {f"{prefix}.visual_prompt"}
    else:
        selected = set(encoder.adapter_names)

    for name in encoder.backbone_names + encoder.adapter_names + [f"{prefix}.visual_prompt"]:
        encoder.store[name].set_trainable(name in selected)
    encoder.strategy = strategy
    return selected


class TextEncoder:
    """Causal toy text tower; every parameter is frozen (pretrained stand-in)."""

    def __init__(self, cfg: TextEncoderConfig, store: ParamStore, prefix: str = "txt"):
        self.cfg = cfg
        self.store = store
        self.prefix = prefix
        store.add(f"{prefix}.pos", (cfg.max_len, cfg.d_in), "normal", trainable=False)
        for i in range(cfg.depth):
            _add_block_params(store, f"{prefix}.block{i}", cfg.d_in, trainable=False)
        store.add(f"{prefix}.proj.W", (cfg.d_in, cfg.d), "fan_in", trainable=False)
        self._masks: dict[int, T.Tensor] = {}

    def _causal_mask(self, length: int) -> T.Tensor:
        if length not in self._masks:
            m = np.triu(np.full((length, length), -1e30), k=1)
            self._masks[length] = T._raw(m)
        return self._masks[length]

    def forward(self, seqs) -> T.Tensor:
        """Encode batched token sequences (B, L, d_in) to pooled vectors (B, d)."""
        cfg = self.cfg
        seqs = T._raw(seqs) if not isinstance(seqs, T.Tensor) else seqs
        if seqs.ndim == 2:
            seqs = T.reshape(seqs, (1,) + seqs.shape)
        b, length, _ = seqs.shape
        if length > cfg.max_len:
            raise PromptLengthError(f"prompt length {length} exceeds max_len {cfg.max_len}")
        x = T.add(seqs, T.slice_axis(self.store[f"{self.prefix}.pos"].tensor, 0, 0, length))
        mask = self._causal_mask(length)
        for i in range(cfg.depth):
            x = _block(x, self.store, f"{self.prefix}.block{i}", cfg.heads, mask=mask)
        last = T.reshape(T.slice_axis(x, 1, length - 1, length), (b, cfg.d_in))
        return T.matmul(last, self.store[f"{self.prefix}.proj.W"].tensor)


def encode_text(prompt_tokens, encoder: TextEncoder) -> np.ndarray:
    out = encoder.forward(T._raw(np.asarray(prompt_tokens)))
    return out.data[0]
