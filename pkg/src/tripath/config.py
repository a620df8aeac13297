"""Flat run configuration: one dataclass, JSON round trip, key=value overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .encoders import VISUAL_STRATEGIES
from .multipath import MASK_PHASES, BranchMask, LossWeights
from .prompts import PREFIX_MODES, VOCAB_MODES


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0

    # towers (image height/width/channels come from the dataset manifest)
    patch: int = 4
    image_depth: int = 2
    image_heads: int = 4
    text_depth: int = 2
    text_heads: int = 4
    text_max_len: int = 8
    d_in: int = 64
    d: int = 64

    # image tuning strategy and its always-materialized modules
    tuning: str = "Adapter"
    adapter_r: int = 8
    visual_prompt_len: int = 4

    # prompts
    prefix_len: int = 3
    prefix_mode: str = "c|s|o"
    vocab_mode: str = "cso"
    attribute_dropout: float = 0.0

    # branches
    tau: float = 0.05
    alpha_c: float = 1.0
    alpha_s: float = 1.0
    alpha_o: float = 1.0
    use_c: bool = True
    use_s: bool = True
    use_o: bool = True
    mask_phase: str = "TrainingAndInference"

    # traction
    cmt_layers: int = 2
    cmt_heads: int = 4
    cmt_dropout: float = 0.0
    lambda_vectorized: bool = True
    lambda_trainable: bool = True
    lambda_init: float = 0.1

    # optimization
    lr: float = 2.5e-4
    batch_size: int = 64
    epochs: int = 15
    weight_decay: float = 1e-5
    lr_halving_every: int = 5

    # spaces
    train_comp_space: str = "seen"
    world: str = "closed"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0.0:
            raise ConfigError("lr must be positive")
        if not self.tau > 0.0:
            raise ConfigError("tau must be positive")
        for name in ("attribute_dropout", "cmt_dropout"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.tuning not in VISUAL_STRATEGIES:
            raise ConfigError(f"tuning must be one of {VISUAL_STRATEGIES}")
        if self.prefix_mode not in PREFIX_MODES:
            raise ConfigError(f"prefix_mode must be one of {PREFIX_MODES}")
        if self.vocab_mode not in VOCAB_MODES:
            raise ConfigError(f"vocab_mode must be one of {VOCAB_MODES}")
        if self.mask_phase not in MASK_PHASES:
            raise ConfigError(f"mask_phase must be one of {MASK_PHASES}")
        if self.train_comp_space not in ("seen", "target"):
            raise ConfigError("train_comp_space must be 'seen' or 'target'")
        if self.world not in ("closed", "open"):
            raise ConfigError("world must be 'closed' or 'open'")
        if self.cmt_layers < 0:
            raise ConfigError("cmt_layers must be >= 0")
        if self.prefix_len < 1:
            raise ConfigError("prefix_len must be >= 1")
        if self.prefix_len + 2 > self.text_max_len:
            raise ConfigError("composition prompts need prefix_len + 2 <= text_max_len")
        # the branch mask and loss weights validate their own combinations
        mask = self.branch_mask()
        self.loss_weights()
        if not (mask.use_c or (mask.use_s and mask.use_o)):
            raise ConfigError("inference needs the composition branch or both primitives")

    def branch_mask(self) -> BranchMask:
        return BranchMask(use_c=self.use_c, use_s=self.use_s, use_o=self.use_o,
                          phase=self.mask_phase)

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha_c=self.alpha_c, alpha_s=self.alpha_s, alpha_o=self.alpha_o)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**doc)

    def to_json(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def apply_overrides(doc: dict, assignments) -> dict:
    """Apply `key=value` strings; values parse as JSON, falling back to raw text."""
    known = {f.name for f in fields(RunConfig)}
    out = dict(doc)
    for item in assignments or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[key] = value
    return out


def load_config(path: str | None, assignments=None) -> RunConfig:
    doc = {}
    if path is not None:
        with open(path) as f:
            doc = json.load(f)
    return RunConfig.from_dict(apply_overrides(doc, assignments))
