"""Full recognition model: towers, prompts, disentanglers, traction, scoring.

One parameter store holds every module, with each parameter initialized from a
stream keyed by (seed, name). Two builds sharing a seed therefore initialize
every common parameter identically regardless of which optional modules exist,
which is what makes structural ablations (traction on/off, lambda layouts)
directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cmt import CMTConfig, CMTStack
from .config import RunConfig
from .data import SplitManifest
from .encoders import (
    ImageEncoder,
    ImageEncoderConfig,
    PromptLengthError,
    TextEncoder,
    TextEncoderConfig,
    set_tuning_strategy,
)
from .multipath import (
    BRANCHES,
    Disentanglers,
    cosine_probabilities,
    integrate,
    total_loss,
)
from .prompts import PromptCodebook
from .store import ParamStore


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# plain-array mirrors of the recognition head, used by the staged evaluator.
# Each must run numpy call-for-call what the tensor path runs (same functions,
# same operand order), so a staged loss equals a full forward bit-for-bit; the
# staged-vs-full test in test_model.py holds them to that.


def _unit_rows(x: np.ndarray) -> np.ndarray:
    # mirrors tensor.l2_normalize
    norms_sq = (x * x).sum(axis=-1, keepdims=True)
    if np.min(norms_sq) < 1e-24:
        raise T.DomainError("l2_normalize given a vector with norm below 1e-12")
    return x / np.sqrt(norms_sq)


def _disentangled_rows(dis: Disentanglers, x_cls: np.ndarray, branch: str) -> np.ndarray:
    # mirrors Disentanglers.view (two-layer exact-erf GELU MLP, or identity)
    if branch == "c":
        return x_cls
    p = dis.store
    b = f"{dis.prefix}.{branch}"
    h = x_cls @ p[f"{b}.W_1"].data + p[f"{b}.b_1"].data
    h = h * (0.5 * (1.0 + T._erf(h / T._SQRT2)))
    return h @ p[f"{b}.W_2"].data + p[f"{b}.b_2"].data


def _branch_term(f_hat: np.ndarray, r_hat: np.ndarray, tau: float,
                 targets: np.ndarray, alpha: float) -> float:
    # mirrors cosine_probabilities on pre-normalized sides, then the weighted
    # cross_entropy_mean term exactly as total_loss builds it
    n, d = f_hat.shape
    logits = (f_hat.reshape(n, 1, d) * r_hat).sum(axis=-1)
    shifted = (logits - logits.max(axis=-1, keepdims=True)) * (1.0 / tau)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    picked = probs[np.arange(n), targets]
    ce = -(np.log(np.maximum(picked, T.LOG_CLAMP)).sum() * (1.0 / n))
    return float(alpha * ce)


@dataclass
class DatasetInfo:
    n_states: int
    n_objects: int
    seen_pairs: list[tuple[int, int]]
    unseen_pairs: list[tuple[int, int]]
    image_shape: tuple[int, int, int]

    @classmethod
    def from_manifest(cls, manifest: SplitManifest) -> "DatasetInfo":
        return cls(
            n_states=len(manifest.states),
            n_objects=len(manifest.objects),
            seen_pairs=sorted(manifest.seen_pairs),
            unseen_pairs=sorted(manifest.unseen_pairs),
            image_shape=tuple(manifest.image_shape),
        )

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_objects": self.n_objects,
            "seen_pairs": [list(p) for p in self.seen_pairs],
            "unseen_pairs": [list(p) for p in self.unseen_pairs],
            "image_shape": list(self.image_shape),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetInfo":
        return cls(
            n_states=int(doc["n_states"]),
            n_objects=int(doc["n_objects"]),
            seen_pairs=[tuple(p) for p in doc["seen_pairs"]],
            unseen_pairs=[tuple(p) for p in doc["unseen_pairs"]],
            image_shape=tuple(doc["image_shape"]),
        )

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetInfo":
        return cls(
            n_states=int(doc["n_states"]),
            n_objects=int(doc["n_objects"]),
            seen_pairs=[tuple(p) for p in doc["seen_pairs"]],
            unseen_pairs=[tuple(p) for p in doc["unseen_pairs"]],
            image_shape=tuple(doc["image_shape"]),
        )


class Model:
    def __init__(self, cfg: RunConfig, info: DatasetInfo):
        if cfg.prefix_len + 2 > cfg.text_max_len:
            raise PromptLengthError("composition prompts exceed the text tower's max_len")
        self.cfg = cfg
        self.info = info
        self.store = ParamStore(cfg.seed)
        h, w, c = info.image_shape
        self.img = ImageEncoder(ImageEncoderConfig(
            height=h, width=w, channels=c, patch=cfg.patch, depth=cfg.image_depth,
            d_in=cfg.d_in, d=cfg.d, heads=cfg.image_heads, adapter_r=cfg.adapter_r,
            prompt_len=cfg.visual_prompt_len), self.store)
        self.txt = TextEncoder(TextEncoderConfig(
            d_in=cfg.d_in, depth=cfg.text_depth, heads=cfg.text_heads, d=cfg.d,
            max_len=cfg.text_max_len), self.store)
        self.prompts = PromptCodebook(self.store, info.n_states, info.n_objects,
                                      m=cfg.prefix_len, d_in=cfg.d_in,
                                      prefix_mode=cfg.prefix_mode, vocab_mode=cfg.vocab_mode)
        self.dis = Disentanglers(self.store, cfg.d)
        self.cmt = None
        if cfg.cmt_layers > 0:
            self.cmt = CMTStack(CMTConfig(
                d=cfg.d, heads=cfg.cmt_heads, layers=cfg.cmt_layers, dropout=cfg.cmt_dropout,
                lambda_vectorized=cfg.lambda_vectorized, lambda_trainable=cfg.lambda_trainable,
                lambda_init=cfg.lambda_init), self.store)
        set_tuning_strategy(self.img, cfg.tuning)
        self.mask = cfg.branch_mask()
        self.weights = cfg.loss_weights()
        if cfg.train_comp_space == "seen":
            self.train_pairs = list(info.seen_pairs)
        else:
            self.train_pairs = sorted(set(info.seen_pairs) | set(info.unseen_pairs))
        self.train_index = {pair: k for k, pair in enumerate(self.train_pairs)}
        self.training_started = False

    # ------------------------------------------------------------------
    # parameter plumbing

    def trainable_parameters(self):
        return self.store.trainable_parameters()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.store.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        mine = dict(self.store.items())
        missing = sorted(set(mine) - set(arrays))
        extra = sorted(set(arrays) - set(mine))
        if missing or extra:
            raise DataError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, param in mine.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != param.data.shape:
                raise DataError(f"parameter {name} has shape {value.shape}, "
                                f"expected {param.data.shape}")
            param.data[...] = value

    def mark_training_started(self):
        self.training_started = True
        if self.cmt is not None:
            self.cmt.training_started = True

    def is_stochastic(self) -> bool:
        return self.cfg.attribute_dropout > 0.0 or self.cfg.cmt_dropout > 0.0

    # ------------------------------------------------------------------
    # forward pieces

    def _needed_branches(self, train: bool) -> set[str]:
        if train:
            return {b for b in BRANCHES
                    if self.mask.active_in_training(b) and getattr(self.weights, f"alpha_{b}") > 0.0}
        needed = set()
        if self.mask.use_c:
            needed.add("c")
        if self.mask.use_s and self.mask.use_o:
            needed.update(("s", "o"))
        return needed

    def _prompt_reps(self, pairs, train: bool, rng) -> dict[str, T.Tensor]:
        views = None
        if train and self.cfg.attribute_dropout > 0.0:
            views = self.prompts.dropout_views(self.cfg.attribute_dropout, rng)
        needed = self._needed_branches(train)
        reps: dict[str, T.Tensor] = {}
        if "s" in needed:
            reps["s"] = self.txt.forward(self.prompts.state_prompts(np.arange(self.info.n_states), views))
        if "o" in needed:
            reps["o"] = self.txt.forward(self.prompts.object_prompts(np.arange(self.info.n_objects), views))
        if "c" in needed:
            reps["c"] = self.txt.forward(self.prompts.comp_prompts(pairs, views))
        return reps

    def _tract(self, reps: dict[str, T.Tensor], patches: T.Tensor, train: bool, rng):
        if self.cmt is None or not reps:
            return reps
        order = [b for b in BRANCHES if b in reps]
        stacked = T.concat([reps[b] for b in order], axis=0)
        out = self.cmt.apply(T.reshape(stacked, (1,) + stacked.shape), patches, train, rng)
        return self._split_tracted(out, reps, order)

    def _split_tracted(self, out: T.Tensor, reps: dict[str, T.Tensor], order) -> dict[str, T.Tensor]:
        pulled, offset = {}, 0
        for b in order:
            n = reps[b].shape[0]
            pulled[b] = T.slice_axis(out, 1, offset, offset + n)
            offset += n
        return pulled

    def _tract_trace(self, reps: dict[str, T.Tensor], patches: T.Tensor, train: bool, rng):
        """Traction pass that keeps per-block intermediates for staged reuse.

        Returns (tracted reps, trace) where trace[i] = (t_in, t_bar, t_tilde) of
        block i. Runs the same op sequence as _tract, so values are identical;
        an empty trace means there is no traction stack.
        """
        if self.cmt is None or not reps:
            return reps, []
        order = [b for b in BRANCHES if b in reps]
        stacked = T.concat([reps[b] for b in order], axis=0)
        t = T.reshape(stacked, (1,) + stacked.shape)
        trace = []
        for i in range(self.cmt.cfg.layers):
            t_bar = self.cmt.block_attention(i, t, patches, train, rng)
            t_tilde = self.cmt.block_ffn(i, t_bar, train, rng)
            trace.append((t, t_bar, t_tilde))
            t = self.cmt.block_combine(i, t, t_tilde)
        return self._split_tracted(t, reps, order), trace

    def _tract_resume(self, trace, reps: dict[str, T.Tensor], patches: T.Tensor,
                      block: int, level: str, train: bool, rng):
        """Recompute traction from (block, level) onward, reusing cached inputs.

        level: "attn" reruns the whole block, "ffn" reuses its attention
        output, "lam" reuses both residual updates. Later blocks always rerun.
        """
        order = [b for b in BRANCHES if b in reps]
        t, t_bar, t_tilde = trace[block]
        if level == "attn":
            t_bar = self.cmt.block_attention(block, t, patches, train, rng)
        if level in ("attn", "ffn"):
            t_tilde = self.cmt.block_ffn(block, t_bar, train, rng)
        trace[block] = (t, t_bar, t_tilde)
        out = self.cmt.block_combine(block, t, t_tilde)
        for i in range(block + 1, self.cmt.cfg.layers):
            t_bar = self.cmt.block_attention(i, out, patches, train, rng)
            t_tilde = self.cmt.block_ffn(i, t_bar, train, rng)
            trace[i] = (out, t_bar, t_tilde)
            out = self.cmt.block_combine(i, out, t_tilde)
        return self._split_tracted(out, reps, order)

    def _branch_feature(self, x_cls: T.Tensor, branch: str, cache: dict) -> T.Tensor:
        if branch not in cache:
            cache[branch] = self.dis.view(x_cls, branch)
        return cache[branch]

    def _loss_from(self, x_cls, patches, base_reps, targets, train: bool, rng):
        reps = self._tract(base_reps, patches, train, rng)
        cache: dict[str, T.Tensor] = {}
        probs = {}
        for b in BRANCHES:
            if b in reps:
                probs[b] = cosine_probabilities(self._branch_feature(x_cls, b, cache),
                                                reps[b], self.cfg.tau)
            else:
                probs[b] = None
        return total_loss(probs, targets, self.weights, self.mask)

    def _targets(self, state_idx, object_idx) -> dict[str, np.ndarray]:
        state_idx = np.asarray(state_idx, dtype=np.intp)
        object_idx = np.asarray(object_idx, dtype=np.intp)
        comp = np.empty(state_idx.shape[0], dtype=np.intp)
        for k, pair in enumerate(zip(state_idx, object_idx)):
            label = (int(pair[0]), int(pair[1]))
            if label not in self.train_index:
                raise DataError(f"sample {k} is labeled {label}, which is outside "
                                f"the training composition space")
            comp[k] = self.train_index[label]
        return {"c": comp, "s": state_idx, "o": object_idx}

    def loss_parts(self, images, state_idx, object_idx, train: bool = True, rng=None):
        targets = self._targets(state_idx, object_idx)
        x_cls, patches = self.img.forward(images)
        base_reps = self._prompt_reps(self.train_pairs, train, rng)
        return self._loss_from(x_cls, patches, base_reps, targets, train, rng)

    # ------------------------------------------------------------------
    # gradient interfaces (training and the finite-difference oracle)

    def loss_and_gradients(self, batch) -> dict[str, np.ndarray]:
        with T.Tape() as tape:
            loss, _ = self.loss_parts(batch["images"], batch["state_idx"], batch["object_idx"],
                                      train=True, rng=None)
            by_id = tape.backward(loss)
        out = {}
        for p in self.trainable_parameters():
            g = by_id.get(id(p.tensor))
            out[p.name] = g if g is not None else np.zeros_like(p.data)
        return out

    def loss_value(self, batch) -> float:
        loss, _ = self.loss_parts(batch["images"], batch["state_idx"], batch["object_idx"],
                                  train=True, rng=None)
        return loss.item()

    def staged_loss_evaluator(self, batch):
        """Loss evaluator that recomputes only what a perturbation can reach.

        The pipeline is two independent towers (image, text) meeting at the
        traction stack and per-branch cosine heads. stage_of maps a parameter
        to its entry point; loss() rebuilds caches from that point onward:
        image parameters leave prompt representations alone, traction
        parameters resume mid-stack at their block (attention / feed-forward /
        gate), and a disentangler parameter recomputes only its own branch's
        loss term against cached normalized prompt rows. The head is evaluated
        through the plain-array mirrors above; every recomputed piece runs the
        op sequence of a full forward on bit-identical inputs, so the returned
        loss equals loss_value bit-for-bit.
        """
        model = self
        images = np.asarray(batch["images"], dtype=np.float64)
        targets = self._targets(batch["state_idx"], batch["object_idx"])
        needed = self._needed_branches(train=True)
        alphas = {b: getattr(self.weights, f"alpha_{b}") for b in BRANCHES}

        class _Staged:
            def __init__(self):
                self._encoded = None  # (x_cls, patch tokens)
                self._reps = None  # prompt representations per branch
                self._trace = None  # traction per-block intermediates
                self._tracted = None  # branch -> prompt rows after traction
                self._f_hat: dict[str, np.ndarray] = {}  # normalized image features
                self._r_hat: dict[str, np.ndarray] = {}  # normalized prompt rows
                self._terms: dict[str, float] = {}  # weighted per-branch CE

            def stage_of(self, name: str):
                root = name.split(".", 1)[0]
                if root in ("txt", "vocab", "prefix"):
                    return "txt"
                if root == "dis":
                    return name[:5]  # "dis.s" / "dis.o"
                if root == "cmt":
                    parts = name.split(".")
                    block = int(parts[1][len("block"):])
                    leaf = parts[2]
                    if leaf in ("ln1", "W_q", "W_K", "W_V", "W_o"):
                        return ("cmt", block, "attn")
                    if leaf == "lam":
                        return ("cmt", block, "lam")
                    return ("cmt", block, "ffn")
                return "img"  # image tower, and the safe default for anything new

            def loss(self, stage) -> float:
                tract_from = stage if isinstance(stage, tuple) else None
                if stage == "img" or self._encoded is None:
                    self._encoded = model.img.forward(images)
                    self._f_hat = {}
                    self._trace = None
                if stage == "txt" or self._reps is None:
                    self._reps = model._prompt_reps(model.train_pairs, train=True, rng=None)
                    self._trace = None
                if self._trace is None:
                    self._tracted, self._trace = model._tract_trace(
                        self._reps, self._encoded[1], train=True, rng=None)
                    self._r_hat = {}
                    self._terms = {}
                elif tract_from is not None:
                    self._tracted = model._tract_resume(
                        self._trace, self._reps, self._encoded[1],
                        tract_from[1], tract_from[2], train=True, rng=None)
                    self._r_hat = {}
                    self._terms = {}
                if stage in ("dis.s", "dis.o"):
                    branch = stage[-1]
                    self._f_hat.pop(branch, None)
                    self._terms.pop(branch, None)

                x_cls = self._encoded[0].data
                total = None
                for b in BRANCHES:
                    if b not in needed:
                        continue
                    term = self._terms.get(b)
                    if term is None:
                        if b not in self._f_hat:
                            self._f_hat[b] = _unit_rows(
                                _disentangled_rows(model.dis, x_cls, b))
                        if b not in self._r_hat:
                            self._r_hat[b] = _unit_rows(self._tracted[b].data)
                        term = _branch_term(self._f_hat[b], self._r_hat[b],
                                            model.cfg.tau, targets[b], alphas[b])
                        self._terms[b] = term
                    total = term if total is None else total + term
                return total

        return _Staged()

    # ------------------------------------------------------------------
    # inference

    def attention_maps(self, images, pairs, block: int = -1) -> np.ndarray:
        """Head-averaged traction attention grids per image: (B, rows, patches).

        Rows stack the inference branches' prompt candidates in branch order
        (composition pairs, then states, then objects when present). `block`
        indexes the traction stack, negatives counting from the end.
        """
        if self.cmt is None:
            raise DataError("model has no traction stack to export attention from")
        n_blocks = self.cmt.cfg.layers
        if not -n_blocks <= block < n_blocks:
            raise IndexError(f"block {block} out of range for {n_blocks} traction blocks")
        target = block % n_blocks
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        _, patches = self.img.forward(images)
        reps = self._prompt_reps(pairs, train=False, rng=None)
        order = [b for b in BRANCHES if b in reps]
        stacked = T.concat([reps[b] for b in order], axis=0)
        t = T.reshape(stacked, (1,) + stacked.shape)
        for i in range(target):
            t_bar = self.cmt.block_attention(i, t, patches)
            t = self.cmt.block_combine(i, t, self.cmt.block_ffn(i, t_bar))
        return self.cmt.attention_grid(target, t, patches)

    def score_images(self, images, pairs, batch_size: int = 120) -> np.ndarray:
        """Integrated composition scores (n_images, n_pairs) under the inference mask."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        state_of = np.asarray([i for i, _ in pairs], dtype=np.intp)
        object_of = np.asarray([j for _, j in pairs], dtype=np.intp)
        base_reps = self._prompt_reps(pairs, train=False, rng=None)
        rows = []
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start:start + batch_size]
            x_cls, patches = self.img.forward(chunk)
            reps = self._tract(base_reps, patches, train=False, rng=None)
            cache: dict[str, T.Tensor] = {}
            p = {}
            for b in BRANCHES:
                if b in reps:
                    p[b] = cosine_probabilities(self._branch_feature(x_cls, b, cache),
                                                reps[b], self.cfg.tau).data
                else:
                    p[b] = None
            rows.append(integrate(p["c"], p["s"], p["o"], state_of, object_of, self.mask))
        return np.concatenate(rows, axis=0)

    def branch_probability_rows(self, images, pairs):
        """Per-branch probability matrices for inspection; None when masked off."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        x_cls, patches = self.img.forward(images)
        base_reps = self._prompt_reps(pairs, train=False, rng=None)
        reps = self._tract(base_reps, patches, train=False, rng=None)
        cache: dict[str, T.Tensor] = {}
        out = {}
        for b in BRANCHES:
            if b in reps:
                out[b] = cosine_probabilities(self._branch_feature(x_cls, b, cache),
                                              reps[b], self.cfg.tau).data
            else:
                out[b] = None
        return out

    def attention_map(self, image, pairs, block: int = 0):
        """First-block traction attention over patches for one image.

        Returns (predicted pair, per-head weights (h, N_p), averaged (N_p,)),
        where the exported rows are the predicted composition's prompt query.
        """
        if self.cmt is None:
            raise DataError("model has no traction stack to export attention from")
        scores = self.score_images(np.asarray(image)[None], pairs)
        pred = int(np.argmax(scores[0]))
        x_cls, patches = self.img.forward(np.asarray(image)[None])
        if not self.mask.use_c:
            raise DataError("attention export follows the composition branch, "
                            "which the inference mask disables")
        reps = self._prompt_reps(pairs, train=False, rng=None)
        query = reps["c"].data[pred][None, :]
        per_head, avg = self.cmt.export_attention(query, patches.data[0], block)
        return pairs[pred], per_head[:, 0, :], avg[0]


def build_model(cfg: RunConfig, manifest: SplitManifest) -> Model:
    return Model(cfg, DatasetInfo.from_manifest(manifest))
