"""Cross-modal traction: prompt representations attend over image patch tokens.

Each block runs multi-head cross-attention with queries from the (normalized)
prompt representations and keys/values from the raw patch tokens, followed by a
feed-forward refinement. The block output is gated back onto its input through
a learnable per-channel factor lambda, so lambda = 0 makes the stack an exact
identity on the prompt path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import layer_norm, _heads_join, _heads_split
from .store import ParamStore


class TrainingStateError(RuntimeError):
    """Raised when a structural switch is requested after optimization began."""


@dataclass
class CMTConfig:
    d: int = 64
    heads: int = 4
    layers: int = 2
    dropout: float = 0.0
    lambda_vectorized: bool = True
    lambda_trainable: bool = True
    lambda_init: float = 0.1

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("traction stack needs at least one block")
        if self.d % self.heads != 0:
            raise ValueError("head count must divide width")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")


class CMTStack:
    def __init__(self, cfg: CMTConfig, store: ParamStore, prefix: str = "cmt"):
        self.cfg = cfg
        self.store = store
        self.prefix = prefix
        self.training_started = False
        d = cfg.d
        for i in range(cfg.layers):
            b = f"{prefix}.block{i}"
            store.add(f"{b}.ln1.gain", (d,), "ones")
            store.add(f"{b}.ln1.bias", (d,), "zeros")
            for w in ("W_q", "W_K", "W_V", "W_o"):
                store.add(f"{b}.{w}", (d, d), "fan_in")
            store.add(f"{b}.ln2.gain", (d,), "ones")
            store.add(f"{b}.ln2.bias", (d,), "zeros")
            store.add(f"{b}.ffn.W_1", (d, 4 * d), "fan_in")
            store.add(f"{b}.ffn.b_1", (4 * d,), "zeros")
            store.add(f"{b}.ffn.W_2", (4 * d, d), "fan_in")
            store.add(f"{b}.ffn.b_2", (d,), "zeros")
            self._add_lambda(i)

    def _lambda_name(self, i: int) -> str:
        return f"{self.prefix}.block{i}.lam"

    def _add_lambda(self, i: int):
        shape = (self.cfg.d,) if self.cfg.lambda_vectorized else (1,)
        self.store.add(self._lambda_name(i), shape, ("fill", self.cfg.lambda_init),
                       trainable=self.cfg.lambda_trainable)

    def set_lambda_mode(self, vectorized: bool, trainable: bool, init: float | None = None):
        """Swap the gate layout. Only legal before any optimizer step has run."""
        if self.training_started:
            raise TrainingStateError("lambda layout is fixed once training has started")
        self.cfg.lambda_vectorized = vectorized
        self.cfg.lambda_trainable = trainable
        if init is not None:
            self.cfg.lambda_init = init
        for i in range(self.cfg.layers):
            self.store.remove(self._lambda_name(i))
            self._add_lambda(i)

    def _attention(self, i: int, t: T.Tensor, patches: T.Tensor, train: bool, rng):
        b = f"{self.prefix}.block{i}"
        p = self.store
        q = T.matmul(layer_norm(t, p[f"{b}.ln1.gain"].tensor, p[f"{b}.ln1.bias"].tensor),
                     p[f"{b}.W_q"].tensor)
        k = T.matmul(patches, p[f"{b}.W_K"].tensor)
        v = T.matmul(patches, p[f"{b}.W_V"].tensor)
        h = self.cfg.heads
        qh = _heads_split(q, h)
        kh = _heads_split(k, h)
        d_head = self.cfg.d // h
        scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(d_head))
        weights = T.softmax(scores, axis=-1)
        if train and self.cfg.dropout > 0.0:
            weights = T.mul(weights, T.dropout_mask(weights.shape, self.cfg.dropout, rng))
        mixed = _heads_join(T.matmul(weights, _heads_split(v, h)))
        return T.matmul(mixed, p[f"{b}.W_o"].tensor), weights

    def block_attention(self, i: int, t: T.Tensor, patches: T.Tensor,
                        train: bool = False, rng=None) -> T.Tensor:
        """Residual cross-attention update: t_bar = t + Att(LN(t), patches)."""
        att, _ = self._attention(i, t, patches, train, rng)
        return T.add(t, att)

    def block_ffn(self, i: int, t_bar: T.Tensor, train: bool = False, rng=None) -> T.Tensor:
        """Residual feed-forward update: t_tilde = t_bar + FFN(LN(t_bar))."""
        b = f"{self.prefix}.block{i}"
        p = self.store
        f_in = layer_norm(t_bar, p[f"{b}.ln2.gain"].tensor, p[f"{b}.ln2.bias"].tensor)
        hidden = T.gelu(T.add(T.matmul(f_in, p[f"{b}.ffn.W_1"].tensor), p[f"{b}.ffn.b_1"].tensor))
        if train and self.cfg.dropout > 0.0:
            hidden = T.mul(hidden, T.dropout_mask(hidden.shape, self.cfg.dropout, rng))
        return T.add(t_bar, T.add(T.matmul(hidden, p[f"{b}.ffn.W_2"].tensor), p[f"{b}.ffn.b_2"].tensor))

    def block_combine(self, i: int, t: T.Tensor, t_tilde: T.Tensor) -> T.Tensor:
        """Gated residual: t + lambda * t_tilde, lambda broadcast over rows."""
        lam = T.reshape(self.store[self._lambda_name(i)].tensor, (1, 1, -1))
        return T.add(t, T.mul(lam, t_tilde))

    def _block(self, i: int, t: T.Tensor, patches: T.Tensor, train: bool, rng):
        t_bar = self.block_attention(i, t, patches, train, rng)
        t_tilde = self.block_ffn(i, t_bar, train, rng)
        return self.block_combine(i, t, t_tilde)

    def apply(self, t: T.Tensor, patches: T.Tensor, train: bool = False, rng=None) -> T.Tensor:
        """t: (1 or B, n_prompts, d); patches: (B, N_p, d). Returns (B, n_prompts, d)."""
        if t.data.ndim != 3 or patches.data.ndim != 3:
            raise T.ShapeError("traction expects batched 3-d prompt and patch tensors")
        out = t
        for i in range(self.cfg.layers):
            out = self._block(i, out, patches, train, rng)
        return out

    def attention_grid(self, i: int, t: T.Tensor, patches: T.Tensor) -> np.ndarray:
        """Head-averaged cross-attention weights of block i: (B, n_prompts, N_p)."""
        _, weights = self._attention(i, t, patches, train=False, rng=None)
        return weights.data.mean(axis=1)

    def export_attention(self, t: np.ndarray, patches: np.ndarray, block: int = 0):
        """Per-head and head-averaged attention of one block for a single image.

        t: (n_prompts, d) prompt representations entering the block;
        patches: (N_p, d). Returns (per_head (h, n_prompts, N_p), averaged).
        """
        if not 0 <= block < self.cfg.layers:
            raise IndexError(f"block index {block} out of range")
        t3 = T.Tensor(np.asarray(t, dtype=np.float64)[None, :, :])
        p3 = T.Tensor(np.asarray(patches, dtype=np.float64)[None, :, :])
        _, weights = self._attention(block, t3, p3, train=False, rng=None)
        per_head = weights.data[0]
        return per_head, per_head.mean(axis=0)
