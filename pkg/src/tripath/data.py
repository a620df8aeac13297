"""Synthetic state-object benchmark: colored shapes on a gray background.

Objects are binary shape masks, states are fill colors. Every composition has
one deterministic base image; samples add per-sample Gaussian pixel noise.
Unseen pairs are held out such that each state and each object still appears in
at least one seen (training) pair.
"""

from __future__ import annotations

import base64
import colorsys
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .store import seeded_rng

_BACKGROUND = 0.15

_COLOR_NAMES = ("red", "green", "blue", "yellow", "cyan", "magenta")
_COLORS = (
    (0.90, 0.10, 0.10),
    (0.10, 0.80, 0.15),
    (0.15, 0.20, 0.90),
    (0.85, 0.80, 0.10),
    (0.10, 0.80, 0.80),
    (0.80, 0.15, 0.80),
)
_SHAPE_NAMES = ("square", "disk", "ring", "hbar", "vbar", "cross")

EMBED_WIDTH = 32


class InfeasibleSplitError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    n_states: int = 6
    n_objects: int = 6
    height: int = 16
    width: int = 16
    unseen_fraction: float = 1.0 / 6.0
    train_per_pair: int = 50
    val_per_pair: int = 10
    test_per_pair: int = 10
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_states < 2 or self.n_objects < 2:
            raise ValueError("need at least two states and two objects")
        if not 0.0 <= self.unseen_fraction < 1.0:
            raise ValueError("unseen_fraction must lie in [0, 1)")
        if min(self.train_per_pair, self.val_per_pair, self.test_per_pair) < 1:
            raise ValueError("per-pair sample counts must be positive")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be non-negative")


@dataclass
class Sample:
    state: int
    object: int
    image: np.ndarray | None


@dataclass
class SplitManifest:
    states: list[str]
    objects: list[str]
    seen_pairs: list[tuple[int, int]]
    unseen_pairs: list[tuple[int, int]]
    image_shape: tuple[int, int, int]
    splits: dict[str, list[Sample]] = field(default_factory=dict)

    @property
    def seen_set(self) -> set[tuple[int, int]]:
        return set(self.seen_pairs)

    def validate(self):
        n_s, n_o = len(self.states), len(self.objects)
        seen, unseen = set(self.seen_pairs), set(self.unseen_pairs)
        for i, j in itertools.chain(self.seen_pairs, self.unseen_pairs):
            if not (0 <= i < n_s and 0 <= j < n_o):
                raise ManifestError(f"pair ({i}, {j}) out of primitive range")
        if seen & unseen:
            raise ManifestError(f"seen and unseen pairs overlap: {sorted(seen & unseen)[:3]}")
        if {i for i, _ in seen} != set(range(n_s)):
            missing = sorted(set(range(n_s)) - {i for i, _ in seen})
            raise ManifestError(f"state index {missing[0]} has no seen pair")
        if {j for _, j in seen} != set(range(n_o)):
            missing = sorted(set(range(n_o)) - {j for _, j in seen})
            raise ManifestError(f"object index {missing[0]} has no seen pair")
        for split, samples in self.splits.items():
            for k, sample in enumerate(samples):
                pair = (sample.state, sample.object)
                if pair not in seen and pair not in unseen:
                    raise ManifestError(f"{split}[{k}] labeled with unknown pair {pair}")
                if split == "train" and pair not in seen:
                    raise ManifestError(f"train[{k}] uses unseen pair {pair}")
                if sample.image is not None and sample.image.shape != self.image_shape:
                    raise ManifestError(f"{split}[{k}] image shape {sample.image.shape} "
                                        f"!= manifest shape {self.image_shape}")
        return self


def _state_name(i: int) -> str:
    return _COLOR_NAMES[i] if i < 6 else f"hue{i}"


def _object_name(j: int) -> str:
    return _SHAPE_NAMES[j] if j < 6 else f"shape{j}"


def _state_color(i: int) -> np.ndarray:
    if i < 6:
        return np.asarray(_COLORS[i], dtype=np.float64)
    return np.asarray(colorsys.hsv_to_rgb((i * 0.61803) % 1.0, 0.8, 0.8), dtype=np.float64)


def _object_mask(j: int, height: int, width: int) -> np.ndarray:
    scale = 0.72 ** (j // 6)
    yy = ((np.arange(height) + 0.5) / height * 2.0 - 1.0) / scale
    xx = ((np.arange(width) + 0.5) / width * 2.0 - 1.0) / scale
    y, x = np.meshgrid(yy, xx, indexing="ij")
    r2 = x * x + y * y
    family = j % 6
    if family == 0:
        mask = (np.abs(x) <= 0.62) & (np.abs(y) <= 0.62)
    elif family == 1:
        mask = r2 <= 0.40
    elif family == 2:
        mask = (r2 >= 0.22) & (r2 <= 0.58)
    elif family == 3:
        mask = np.abs(y) <= 0.32
    elif family == 4:
        mask = np.abs(x) <= 0.32
    else:
        mask = (np.abs(x) <= 0.30) | (np.abs(y) <= 0.30)
    return mask.astype(np.float64)


def _base_image(i: int, j: int, height: int, width: int) -> np.ndarray:
    mask = _object_mask(j, height, width)[:, :, None]
    color = _state_color(i)[None, None, :]
    return _BACKGROUND * (1.0 - mask) + color * mask


def _select_unseen(cfg: SyntheticConfig) -> list[tuple[int, int]]:
    pairs = list(itertools.product(range(cfg.n_states), range(cfg.n_objects)))
    n_unseen = round(cfg.unseen_fraction * len(pairs))
    order = list(pairs)
    seeded_rng(cfg.seed, "split").shuffle(order)
    state_left = {i: cfg.n_objects for i in range(cfg.n_states)}
    object_left = {j: cfg.n_states for j in range(cfg.n_objects)}
    unseen: list[tuple[int, int]] = []
    blocked = None
    for i, j in order:
        if len(unseen) == n_unseen:
            break
        if state_left[i] <= 1:
            blocked = f"state '{_state_name(i)}'"
            continue
        if object_left[j] <= 1:
            blocked = f"object '{_object_name(j)}'"
            continue
        unseen.append((i, j))
        state_left[i] -= 1
        object_left[j] -= 1
    if len(unseen) < n_unseen:
        raise InfeasibleSplitError(
            f"cannot hold out {n_unseen} pairs: {blocked} would lose its last seen pair")
    return sorted(unseen)


def generate_synthetic(cfg: SyntheticConfig) -> SplitManifest:
    unseen = _select_unseen(cfg)
    unseen_set = set(unseen)
    all_pairs = sorted(itertools.product(range(cfg.n_states), range(cfg.n_objects)))
    seen = [p for p in all_pairs if p not in unseen_set]
    bases = {p: _base_image(p[0], p[1], cfg.height, cfg.width) for p in all_pairs}

    def draw(split: str, pair_list, count: int) -> list[Sample]:
        samples = []
        for i, j in pair_list:
            for k in range(count):
                rng = seeded_rng(cfg.seed, "img", split, f"{i}.{j}.{k}")
                image = bases[(i, j)]
                if cfg.noise_std > 0.0:
                    image = image + cfg.noise_std * rng.normal(size=image.shape)
                else:
                    image = image.copy()
                samples.append(Sample(state=i, object=j, image=image))
        return samples

    manifest = SplitManifest(
        states=[_state_name(i) for i in range(cfg.n_states)],
        objects=[_object_name(j) for j in range(cfg.n_objects)],
        seen_pairs=seen,
        unseen_pairs=unseen,
        image_shape=(cfg.height, cfg.width, 3),
        splits={
            "train": draw("train", seen, cfg.train_per_pair),
            "val": draw("val", all_pairs, cfg.val_per_pair),
            "test": draw("test", all_pairs, cfg.test_per_pair),
        },
    )
    return manifest.validate()


def _encode_image(image: np.ndarray | None):
    if image is None:
        return None
    return base64.b64encode(image.astype("<f8").tobytes()).decode("ascii")


def _decode_image(blob, shape, where: str) -> np.ndarray | None:
    if blob is None:
        return None
    raw = base64.b64decode(blob.encode("ascii"))
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise ManifestError(f"{where}: image payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_manifest(manifest: SplitManifest, path: str):
    manifest.validate()
    doc = {
        "states": manifest.states,
        "objects": manifest.objects,
        "seen_pairs": [list(p) for p in manifest.seen_pairs],
        "unseen_pairs": [list(p) for p in manifest.unseen_pairs],
        "image_shape": list(manifest.image_shape),
        "splits": {
            split: [{"state": s.state, "object": s.object, "image": _encode_image(s.image)}
                    for s in samples]
            for split, samples in manifest.splits.items()
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))


def load_manifest(path: str) -> SplitManifest:
    with open(path) as f:
        doc = json.load(f)
    for key in ("states", "objects", "seen_pairs", "unseen_pairs", "image_shape", "splits"):
        if key not in doc:
            raise ManifestError(f"manifest missing key {key!r}")
    shape = tuple(doc["image_shape"])
    if len(shape) != 3:
        raise ManifestError(f"image_shape must have 3 entries, got {shape}")
    splits = {}
    for split, rows in doc["splits"].items():
        samples = []
        for k, row in enumerate(rows):
            try:
                state, obj = int(row["state"]), int(row["object"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{split}[{k}]: bad sample record") from exc
            samples.append(Sample(state=state, object=obj,
                                  image=_decode_image(row.get("image"), shape, f"{split}[{k}]")))
        splits[split] = samples
    manifest = SplitManifest(
        states=list(doc["states"]),
        objects=list(doc["objects"]),
        seen_pairs=[tuple(p) for p in doc["seen_pairs"]],
        unseen_pairs=[tuple(p) for p in doc["unseen_pairs"]],
        image_shape=shape,
        splits=splits,
    )
    return manifest.validate()


def target_space(manifest: SplitManifest, world: str = "closed"):
    """Ordered candidate compositions and their column index map."""
    if world == "closed":
        pairs = sorted(set(manifest.seen_pairs) | set(manifest.unseen_pairs))
    elif world == "open":
        pairs = sorted(itertools.product(range(len(manifest.states)), range(len(manifest.objects))))
    else:
        raise ValueError(f"world must be 'closed' or 'open', got {world!r}")
    return pairs, {pair: col for col, pair in enumerate(pairs)}


def stats(manifest: SplitManifest) -> dict:
    seen = manifest.seen_set
    out = {
        "n_states": len(manifest.states),
        "n_objects": len(manifest.objects),
        "n_seen_pairs": len(manifest.seen_pairs),
        "n_unseen_pairs": len(manifest.unseen_pairs),
        "splits": {},
    }
    for split, samples in manifest.splits.items():
        pairs = {(s.state, s.object) for s in samples}
        out["splits"][split] = {
            "samples": len(samples),
            "pairs": len(pairs),
            "seen_truth": sum(1 for s in samples if (s.state, s.object) in seen),
            "unseen_truth": sum(1 for s in samples if (s.state, s.object) not in seen),
        }
    return out


def _pad_unit(vec: np.ndarray) -> np.ndarray:
    out = np.zeros(EMBED_WIDTH)
    out[:vec.size] = vec
    return out / np.linalg.norm(out)


def build_embedding_table(cfg: SyntheticConfig) -> dict[str, np.ndarray]:
    """Unit-norm side embeddings used only by open-world feasibility scoring.

    States embed their fill color; objects embed a 4x4 pooled copy of their
    mask, so visually similar shapes get high cosine similarity.
    """
    table: dict[str, np.ndarray] = {}
    for i in range(cfg.n_states):
        table[_state_name(i)] = _pad_unit(_state_color(i))
    for j in range(cfg.n_objects):
        mask = _object_mask(j, cfg.height, cfg.width)
        h_step, w_step = cfg.height // 4, cfg.width // 4
        pooled = mask.reshape(4, h_step, 4, w_step).mean(axis=(1, 3))
        table[_object_name(j)] = _pad_unit(pooled.reshape(-1))
    return table


def save_embeddings(table: dict[str, np.ndarray], path: str):
    with open(path, "w") as f:
        json.dump({name: list(map(float, vec)) for name, vec in table.items()},
                  f, sort_keys=True, separators=(",", ":"))


def load_embeddings(path: str) -> dict[str, np.ndarray]:
    with open(path) as f:
        doc = json.load(f)
    table = {}
    for name, values in doc.items():
        vec = np.asarray(values, dtype=np.float64)
        norm = np.linalg.norm(vec)
        if abs(norm - 1.0) > 1e-8:
            raise ManifestError(f"embedding {name!r} is not unit-norm (|v| = {norm})")
        table[name] = vec
    return table
