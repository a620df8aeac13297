"""Three recognition branches over a shared image feature.

The composition branch matches the projected class feature directly; the state
and object branches match disentangled views of it. Branch scores are cosine
similarities against encoded prompts, turned into probabilities by a
temperature softmax, and recombined at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .store import ParamStore

BRANCHES = ("c", "s", "o")
MASK_PHASES = ("TrainingAndInference", "InferenceOnly")


@dataclass
class LossWeights:
    alpha_c: float = 1.0
    alpha_s: float = 1.0
    alpha_o: float = 1.0

    def __post_init__(self):
        if min(self.alpha_c, self.alpha_s, self.alpha_o) < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.alpha_c == self.alpha_s == self.alpha_o == 0:
            raise ValueError("at least one loss coefficient must be positive")


@dataclass
class BranchMask:
    use_c: bool = True
    use_s: bool = True
    use_o: bool = True
    phase: str = "TrainingAndInference"

    def __post_init__(self):
        if self.phase not in MASK_PHASES:
            raise ValueError(f"mask phase must be one of {MASK_PHASES}")
        if not (self.use_c or self.use_s or self.use_o):
            raise ValueError("at least one branch must stay active")

    def active_in_training(self, branch: str) -> bool:
        if self.phase == "InferenceOnly":
            return True
        return getattr(self, f"use_{branch}")

    def active_at_inference(self, branch: str) -> bool:
        return getattr(self, f"use_{branch}")


class Disentanglers:
    """Two-layer GELU MLPs mapping the class feature to state/object views.

    The composition view is the input itself (the same tensor, no copy).
    """

    def __init__(self, store: ParamStore, d: int, prefix: str = "dis"):
        self.store = store
        self.prefix = prefix
        self.d = d
        for leaf in ("s", "o"):
            store.add(f"{prefix}.{leaf}.W_1", (d, d), "fan_in")
            store.add(f"{prefix}.{leaf}.b_1", (d,), "zeros")
            store.add(f"{prefix}.{leaf}.W_2", (d, d), "fan_in")
            store.add(f"{prefix}.{leaf}.b_2", (d,), "zeros")

    def _mlp(self, x: T.Tensor, leaf: str) -> T.Tensor:
        p = self.store
        b = f"{self.prefix}.{leaf}"
        h = T.gelu(T.add(T.matmul(x, p[f"{b}.W_1"].tensor), p[f"{b}.b_1"].tensor))
        return T.add(T.matmul(h, p[f"{b}.W_2"].tensor), p[f"{b}.b_2"].tensor)

    def forward(self, x_cls: T.Tensor):
        """Returns (x_s, x_o, x_c) with x_c being x_cls itself."""
        return self._mlp(x_cls, "s"), self._mlp(x_cls, "o"), x_cls

    def view(self, x_cls: T.Tensor, branch: str) -> T.Tensor:
        """One branch's feature view; the composition view is x_cls itself."""
        if branch == "c":
            return x_cls
        if branch not in ("s", "o"):
            raise ValueError(f"unknown branch {branch!r}")
        return self._mlp(x_cls, branch)


def cosine_probabilities(features: T.Tensor, reps: T.Tensor, tau: float = 0.05) -> T.Tensor:
    """softmax(cos(features, reps) / tau) row-wise.

    features: (B, d); reps: (n, d) shared across the batch or (B, n, d)
    per-sample (traction output). Returns (B, n).
    """
    if features.data.ndim != 2:
        raise T.ShapeError("features must be (batch, d)")
    if reps.data.ndim not in (2, 3):
        raise T.ShapeError("prompt representations must be (n, d) or (batch, n, d)")
    f = T.l2_normalize(features)
    r = T.l2_normalize(reps)
    b, d = f.shape
    logits = T.sum_(T.mul(T.reshape(f, (b, 1, d)), r), axis=-1)
    return T.softmax(logits, temperature=tau, axis=-1)


def branch_probabilities(feature: T.Tensor, reps: T.Tensor, tau: float = 0.05) -> T.Tensor:
    """Single-sample convenience wrapper: feature (d,) against reps (n, d)."""
    probs = cosine_probabilities(T.reshape(feature, (1, -1)), reps, tau)
    return T.reshape(probs, (-1,))


def total_loss(probs: dict[str, T.Tensor | None], targets: dict[str, np.ndarray],
               weights: LossWeights, mask: BranchMask):
    """Weighted sum of per-branch cross-entropies over training-active branches."""
    parts: dict[str, float] = {}
    loss = None
    for branch in BRANCHES:
        alpha = getattr(weights, f"alpha_{branch}")
        if not mask.active_in_training(branch) or alpha == 0.0:
            parts[branch] = 0.0
            continue
        if probs.get(branch) is None:
            raise ValueError(f"branch '{branch}' is active but has no probabilities")
        ce = T.cross_entropy_mean(probs[branch], targets[branch])
        parts[branch] = ce.item()
        term = T.mul(T.Tensor(alpha), ce)
        loss = term if loss is None else T.add(loss, term)
    return loss, parts


def integrate(p_c: np.ndarray | None, p_s: np.ndarray | None, p_o: np.ndarray | None,
              state_of: np.ndarray, object_of: np.ndarray, mask: BranchMask) -> np.ndarray:
    """Recombined composition scores p_c + p_s * p_o under the inference mask.

    state_of/object_of map each composition column to its primitive indices.
    Accepts (n_c,)/(n_s,)/(n_o,) vectors or batched (B, .) matrices.
    """
    state_of = np.asarray(state_of, dtype=np.intp)
    object_of = np.asarray(object_of, dtype=np.intp)
    use_c = mask.active_at_inference("c")
    use_so = mask.active_at_inference("s") and mask.active_at_inference("o")
    if not use_c and not use_so:
        raise ValueError("inference mask leaves no usable score path")
    single = False
    total = None
    if use_c:
        if p_c is None:
            raise ValueError("composition branch is active but has no probabilities")
        p_c = np.asarray(p_c, dtype=np.float64)
        single = p_c.ndim == 1
        total = np.atleast_2d(p_c).copy()
    if use_so:
        if p_s is None or p_o is None:
            raise ValueError("primitive branches are active but have no probabilities")
        p_s = np.asarray(p_s, dtype=np.float64)
        p_o = np.asarray(p_o, dtype=np.float64)
        single = single or p_s.ndim == 1
        pair = np.atleast_2d(p_s)[:, state_of] * np.atleast_2d(p_o)[:, object_of]
        total = pair if total is None else total + pair
    return total[0] if single else total


def predict(scores: np.ndarray) -> np.ndarray | int:
    """Argmax over composition scores; ties resolve to the lowest index."""
    scores = np.asarray(scores)
    if scores.ndim == 1:
        return int(np.argmax(scores))
    return np.argmax(scores, axis=-1)
