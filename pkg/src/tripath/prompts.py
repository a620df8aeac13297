"""Soft prompt assembly: learnable prefix tokens plus primitive vocabulary rows.

A state prompt is [prefix..., v_s], an object prompt [prefix..., v_o], and a
composition prompt [prefix..., v_s, v_o]. Prefix and vocabulary sharing across
the three branches is configurable to reproduce the sharing ablation grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .store import ParamStore

PREFIX_MODES = ("c|s|o", "cso", "c|so")
VOCAB_MODES = ("cso", "c|s|o")


@dataclass
class PromptTriple:
    state: T.Tensor        # (m+1, d_in)
    object: T.Tensor       # (m+1, d_in)
    composition: T.Tensor  # (m+2, d_in)


def attribute_dropout(vocab, rate: float, rng: np.random.Generator) -> T.Tensor:
    """Element-wise inverted dropout over state vocabulary rows (training only)."""
    vocab_t = vocab.tensor if hasattr(vocab, "tensor") else vocab
    if rate == 0.0:
        return vocab_t
    return T.mul(vocab_t, T.dropout_mask(vocab_t.shape, rate, rng))


class PromptCodebook:
    def __init__(self, store: ParamStore, n_states: int, n_objects: int, m: int = 3,
                 d_in: int = 64, prefix_mode: str = "c|s|o", vocab_mode: str = "cso"):
        if prefix_mode not in PREFIX_MODES:
            raise ValueError(f"prefix sharing mode must be one of {PREFIX_MODES}")
        if vocab_mode not in VOCAB_MODES:
            raise ValueError(f"vocabulary sharing mode must be one of {VOCAB_MODES}")
        if m < 1:
            raise ValueError("prefix length m must be >= 1")
        self.store = store
        self.n_states = n_states
        self.n_objects = n_objects
        self.m = m
        self.d_in = d_in
        self.prefix_mode = prefix_mode
        self.vocab_mode = vocab_mode

        if prefix_mode == "c|s|o":
            names = {"s": "prefix.s", "o": "prefix.o", "c": "prefix.c"}
        elif prefix_mode == "cso":
            names = {"s": "prefix.all", "o": "prefix.all", "c": "prefix.all"}
        else:  # composition separate, primitives shared
            names = {"s": "prefix.so", "o": "prefix.so", "c": "prefix.c"}
        self._prefix_names = names
        for name in sorted(set(names.values())):
            store.add(name, (m, d_in), "normal", trainable=True)

        if vocab_mode == "cso":
            store.add("vocab.V_S", (n_states, d_in), "normal", trainable=True)
            store.add("vocab.V_O", (n_objects, d_in), "normal", trainable=True)
            self._state_vocab = {"s": "vocab.V_S", "c": "vocab.V_S"}
            self._object_vocab = {"o": "vocab.V_O", "c": "vocab.V_O"}
        else:
            store.add("vocab.s.V_S", (n_states, d_in), "normal", trainable=True)
            store.add("vocab.o.V_O", (n_objects, d_in), "normal", trainable=True)
            store.add("vocab.c.V_S", (n_states, d_in), "normal", trainable=True)
            store.add("vocab.c.V_O", (n_objects, d_in), "normal", trainable=True)
            self._state_vocab = {"s": "vocab.s.V_S", "c": "vocab.c.V_S"}
            self._object_vocab = {"o": "vocab.o.V_O", "c": "vocab.c.V_O"}

    def vocabulary_rows(self) -> int:
        return self.n_states + self.n_objects

    def state_vocab_names(self) -> list[str]:
        return sorted(set(self._state_vocab.values()))

    def dropout_views(self, rate: float, rng: np.random.Generator) -> dict[str, T.Tensor]:
        """One dropped view per distinct state-vocabulary parameter, for one step."""
        return {name: attribute_dropout(self.store[name], rate, rng) for name in self.state_vocab_names()}

    def _vocab(self, table: dict, branch: str, views) -> T.Tensor:
        name = table[branch]
        if views and name in views:
            return views[name]
        return self.store[name].tensor

    def _prefix(self, branch: str) -> T.Tensor:
        return self.store[self._prefix_names[branch]].tensor

    def state_prompts(self, indices, views=None) -> T.Tensor:
        idx = np.asarray(indices, dtype=np.intp)
        rows = T.reshape(T.gather_rows(self._vocab(self._state_vocab, "s", views), idx), (len(idx), 1, self.d_in))
        return T.concat([T.expand_lead(self._prefix("s"), len(idx)), rows], axis=1)

    def object_prompts(self, indices, views=None) -> T.Tensor:
        idx = np.asarray(indices, dtype=np.intp)
        rows = T.reshape(T.gather_rows(self._vocab(self._object_vocab, "o", views), idx), (len(idx), 1, self.d_in))
        return T.concat([T.expand_lead(self._prefix("o"), len(idx)), rows], axis=1)

    def comp_prompts(self, pairs, views=None) -> T.Tensor:
        i_idx = np.asarray([p[0] for p in pairs], dtype=np.intp)
        j_idx = np.asarray([p[1] for p in pairs], dtype=np.intp)
        k = len(pairs)
        vs = T.reshape(T.gather_rows(self._vocab(self._state_vocab, "c", views), i_idx), (k, 1, self.d_in))
        vo = T.reshape(T.gather_rows(self._vocab(self._object_vocab, "c", views), j_idx), (k, 1, self.d_in))
        return T.concat([T.expand_lead(self._prefix("c"), k), vs, vo], axis=1)

    def build(self, i: int, j: int) -> PromptTriple:
        """Prompt triple for one (state, object) pair."""
        if not (0 <= i < self.n_states and 0 <= j < self.n_objects):
            raise IndexError(f"primitive index out of range: ({i}, {j})")
        state = T.reshape(self.state_prompts([i]), (self.m + 1, self.d_in))
        obj = T.reshape(self.object_prompts([j]), (self.m + 1, self.d_in))
        comp = T.reshape(self.comp_prompts([(i, j)]), (self.m + 2, self.d_in))
        return PromptTriple(state=state, object=obj, composition=comp)


def init_prompts(n_states: int, n_objects: int, m: int = 3, d_in: int = 64, seed: int = 0,
                 prefix_mode: str = "c|s|o", vocab_mode: str = "cso") -> PromptCodebook:
    return PromptCodebook(ParamStore(seed), n_states, n_objects, m=m, d_in=d_in,
                          prefix_mode=prefix_mode, vocab_mode=vocab_mode)
