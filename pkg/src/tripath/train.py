"""Adam training loop: decoupled weight decay, stepped lr halving, epoch logs.

Everything the loop consumes is seeded (shuffle order, dropout draws, parameter
init), so two runs from the same config and manifest produce bit-identical loss
trajectories, validation metrics, and final weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import SplitManifest
from .evaluation import MetricsReport, evaluate_matrix, score_split
from .model import Model
from .store import seeded_rng

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    pass


def lr_for_epoch(base: float, epoch: int, halving_every: int) -> float:
    """Stepped schedule: the rate halves once per `halving_every` epochs."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    return base * 0.5 ** ((epoch - 1) // halving_every)


def decayed(name: str) -> bool:
    """Weight decay covers weight matrices and embedding-like tables, never
    biases, normalization parameters, or the traction gate."""
    leaf = name.rsplit(".", 1)[-1]
    return not (leaf.startswith("b_") or leaf in ("bias", "gain", "lam"))


class Adam:
    """Adam with bias correction; weight decay is decoupled from the moments."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - ADAM_BETA1 ** self.t
        c2 = 1.0 - ADAM_BETA2 ** self.t
        for p in self.params:
            g = grads[p.name]
            m, v = self._m[p.name], self._v[p.name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
            if self.weight_decay and decayed(p.name):
                update = update + self.weight_decay * p.data
            p.data[...] -= self.lr * update


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_c: float
    loss_s: float
    loss_o: float
    loss_all: float
    val: MetricsReport

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "loss": {"c": self.loss_c, "s": self.loss_s, "o": self.loss_o,
                     "all": self.loss_all},
            "val": self.val.percent_dict(),
        }

    def row(self) -> str:
        return (f"epoch {self.epoch:3d}  lr {self.lr:.2e}  "
                f"L^c {self.loss_c:7.4f}  L^s {self.loss_s:7.4f}  "
                f"L^o {self.loss_o:7.4f}  L_all {self.loss_all:7.4f}  "
                f"val {self.val.row()}")


@dataclass
class TrainResult:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    @property
    def best_seen(self) -> float:
        return max(r.val.seen for r in self.records)

    def loss_trajectory(self) -> list[float]:
        return [r.loss_all for r in self.records]

    def to_dict(self) -> dict:
        return {"epochs": [r.to_dict() for r in self.records]}


def _train_arrays(manifest: SplitManifest):
    samples = manifest.splits.get("train")
    if not samples:
        raise ValueError("manifest has no train split")
    if any(s.image is None for s in samples):
        raise ValueError("train split is metadata-only; cannot train")
    images = np.stack([s.image for s in samples]).astype(np.float64)
    state_idx = np.asarray([s.state for s in samples], dtype=np.intp)
    object_idx = np.asarray([s.object for s in samples], dtype=np.intp)
    return images, state_idx, object_idx


def train_model(model: Model, manifest: SplitManifest, progress=None) -> TrainResult:
    """Run the configured number of epochs; returns the per-epoch records.

    Each epoch reshuffles the train split (partial final batch kept), takes one
    Adam step per batch, then scores the val split under the closed-world
    protocol. A non-finite loss aborts before the backward pass.
    """
    cfg = model.cfg
    images, state_idx, object_idx = _train_arrays(manifest)
    n = images.shape[0]
    shuffle_rng = seeded_rng(cfg.seed, "shuffle")
    dropout_rng = seeded_rng(cfg.seed, "dropout") if model.is_stochastic() else None
    opt = Adam(model.trainable_parameters(), cfg.lr, cfg.weight_decay)
    result = TrainResult()
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = lr_for_epoch(cfg.lr, epoch, cfg.lr_halving_every)
        order = shuffle_rng.permutation(n)
        sums = {"c": 0.0, "s": 0.0, "o": 0.0, "all": 0.0}
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with T.Tape() as tape:
                loss, parts = model.loss_parts(images[idx], state_idx[idx],
                                               object_idx[idx], train=True,
                                               rng=dropout_rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"loss became {value} at epoch {epoch}, step {opt.t + 1}")
                by_id = tape.backward(loss)
            grads = {p.name: by_id.get(id(p.tensor)) for p in opt.params}
            for p in opt.params:
                if grads[p.name] is None:
                    grads[p.name] = np.zeros_like(p.data)
            opt.step(grads)
            model.mark_training_started()
            k = idx.size
            for b in ("c", "s", "o"):
                sums[b] += parts[b] * k
            sums["all"] += value * k
        metrics = evaluate_matrix(score_split(model, manifest, "val", world="closed"))
        record = EpochRecord(epoch=epoch, lr=opt.lr,
                             loss_c=sums["c"] / n, loss_s=sums["s"] / n,
                             loss_o=sums["o"] / n, loss_all=sums["all"] / n,
                             val=metrics)
        result.records.append(record)
        if progress is not None:
            progress(record)
    return result
