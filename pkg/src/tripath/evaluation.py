"""Generalized compositional evaluation: bias sweep, metrics, feasibility.

A calibration bias added to unseen-pair columns trades seen accuracy against
unseen accuracy. Both accuracies are step functions of the bias whose only
transition points are per-sample score margins, so sweeping the exact margins
plus one interior point per interval (and the two infinite endpoints, where one
column population is suppressed outright) evaluates every plateau the curve
has: the resulting area matches a dense grid evaluation up to float noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as D


class ProtocolError(RuntimeError):
    pass


class EmptyCandidateError(RuntimeError):
    pass


@dataclass
class ScoreMatrix:
    """Scores (n_samples, n_candidates) with truth columns and seen flags.

    column_mask marks candidates kept by open-world filtering (True = kept);
    seen pairs can never be filtered out.
    """

    scores: np.ndarray
    truth: np.ndarray
    pair_seen: np.ndarray
    column_mask: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.intp)
        self.pair_seen = np.asarray(self.pair_seen, dtype=bool)
        if self.scores.ndim != 2:
            raise ProtocolError(f"scores must be 2-d, got shape {self.scores.shape}")
        n, c = self.scores.shape
        if not np.all(np.isfinite(self.scores)):
            raise ProtocolError("scores must be finite")
        if self.truth.shape != (n,):
            raise ProtocolError("need exactly one truth index per sample")
        if n and not (0 <= self.truth.min() and self.truth.max() < c):
            raise ProtocolError("truth index out of candidate range")
        if self.pair_seen.shape != (c,):
            raise ProtocolError("need one seen flag per candidate column")
        if self.column_mask is not None:
            self.column_mask = np.asarray(self.column_mask, dtype=bool)
            if self.column_mask.shape != (c,):
                raise ProtocolError("column_mask shape mismatch")
            if np.any(~self.column_mask & self.pair_seen):
                raise ProtocolError("feasibility filtering may not remove seen pairs")

    @property
    def sample_seen(self) -> np.ndarray:
        return self.pair_seen[self.truth]

    def filtered(self, keep: np.ndarray) -> "ScoreMatrix":
        mask = np.asarray(keep, dtype=bool)
        if self.column_mask is not None:
            mask = mask & self.column_mask
        return ScoreMatrix(self.scores, self.truth, self.pair_seen, mask)


@dataclass
class CurvePoint:
    bias: float
    seen: float
    unseen: float


@dataclass
class SweepCurve:
    points: list[CurvePoint] = field(default_factory=list)


def _effective_scores(sm: ScoreMatrix) -> np.ndarray:
    eff = sm.scores.copy()
    if sm.column_mask is not None:
        eff[:, ~sm.column_mask] = -np.inf
    return eff


def accuracy_at_bias(sm: ScoreMatrix, bias: float) -> tuple[float, float]:
    """(seen accuracy, unseen accuracy) with `bias` added to unseen columns.

    bias = -inf suppresses unseen columns entirely; +inf suppresses seen ones.
    """
    eff = _effective_scores(sm)
    unseen_cols = ~sm.pair_seen
    if bias == -np.inf:
        eff[:, unseen_cols] = -np.inf
    elif bias == np.inf:
        eff[:, sm.pair_seen] = -np.inf
    else:
        eff[:, unseen_cols] += bias
    pred = np.argmax(eff, axis=1)  # ties resolve to the lowest column index
    chosen = eff[np.arange(eff.shape[0]), pred]
    correct = (pred == sm.truth) & np.isfinite(chosen)
    seen_samples = sm.sample_seen
    if not seen_samples.any() or seen_samples.all():
        raise ProtocolError("need both seen-truth and unseen-truth samples")
    return float(correct[seen_samples].mean()), float(correct[~seen_samples].mean())


def _transition_margins(sm: ScoreMatrix) -> np.ndarray:
    eff = _effective_scores(sm)
    seen_cols = sm.pair_seen
    unseen_cols = ~seen_cols
    if not seen_cols.any() or not unseen_cols.any():
        raise ProtocolError("candidate space must contain seen and unseen pairs")
    best_seen = eff[:, seen_cols].max(axis=1)
    masked_unseen = np.where(unseen_cols, eff, -np.inf)
    best_unseen = masked_unseen.max(axis=1)
    truth_score = eff[np.arange(eff.shape[0]), sm.truth]
    margins = []
    for r in range(eff.shape[0]):
        if sm.sample_seen[r]:
            # seen-truth sample flips wrong once bias exceeds truth - best unseen
            if np.isfinite(best_unseen[r]):
                margins.append(truth_score[r] - best_unseen[r])
        else:
            # unseen-truth sample flips right once bias exceeds best seen - truth
            if np.isfinite(truth_score[r]):
                margins.append(best_seen[r] - truth_score[r])
    return np.unique(np.asarray(margins, dtype=np.float64))


def candidate_biases(sm: ScoreMatrix) -> np.ndarray:
    """All transition margins, one midpoint per gap, and the two endpoints."""
    margins = _transition_margins(sm)
    cands = [-np.inf]
    for k, m in enumerate(margins):
        cands.append(m)
        if k + 1 < margins.size:
            cands.append(0.5 * (m + margins[k + 1]))
    cands.append(np.inf)
    return np.asarray(cands, dtype=np.float64)


def bias_sweep(sm: ScoreMatrix) -> SweepCurve:
    curve = SweepCurve()
    for b in candidate_biases(sm):
        seen, unseen = accuracy_at_bias(sm, float(b))
        curve.points.append(CurvePoint(bias=float(b), seen=seen, unseen=unseen))
    for prev, nxt in zip(curve.points, curve.points[1:]):
        if nxt.seen > prev.seen + 1e-12 or nxt.unseen < prev.unseen - 1e-12:
            raise ProtocolError("sweep accuracies must move monotonically with bias")
    return curve


@dataclass
class MetricsReport:
    seen: float
    unseen: float
    harmonic: float
    auc: float

    def percent_dict(self) -> dict[str, float]:
        return {
            "S": round(100.0 * self.seen, 2),
            "U": round(100.0 * self.unseen, 2),
            "HM": round(100.0 * self.harmonic, 2),
            "AUC": round(100.0 * self.auc, 2),
        }

    def row(self) -> str:
        p = self.percent_dict()
        return f"S {p['S']:6.2f}  U {p['U']:6.2f}  HM {p['HM']:6.2f}  AUC {p['AUC']:6.2f}"


def compute_metrics(curve: SweepCurve) -> MetricsReport:
    if len(curve.points) < 2:
        raise ProtocolError("sweep curve needs at least the two endpoint evaluations")
    seen = curve.points[0].seen        # bias -inf: unseen pairs suppressed
    unseen = curve.points[-1].unseen   # bias +inf: seen pairs suppressed
    hm = 0.0
    for p in curve.points:
        if p.seen + p.unseen > 0.0:
            hm = max(hm, 2.0 * p.seen * p.unseen / (p.seen + p.unseen))
    pts = sorted((p.seen, p.unseen) for p in curve.points)
    auc = 0.0
    for (s0, u0), (s1, u1) in zip(pts, pts[1:]):
        auc += (s1 - s0) * (u0 + u1) * 0.5
    return MetricsReport(seen=seen, unseen=unseen, harmonic=hm, auc=auc)


def evaluate_matrix(sm: ScoreMatrix) -> MetricsReport:
    return compute_metrics(bias_sweep(sm))


# ---------------------------------------------------------------------------
# open-world feasibility


def feasibility_scores(manifest: D.SplitManifest, table: dict[str, np.ndarray]) -> np.ndarray:
    """rho per (state, object): mean of two max-similarity calibrations.

    A candidate object is plausible for a state if it resembles an object seen
    with that state, and vice versa. Seen pairs get +inf so no threshold can
    ever remove them.
    """
    for name in manifest.states + manifest.objects:
        if name not in table:
            raise D.ManifestError(f"embedding table has no entry for {name!r}")
    emb_s = np.stack([table[n] for n in manifest.states])
    emb_o = np.stack([table[n] for n in manifest.objects])

    def cosine(matrix):
        norms = np.linalg.norm(matrix, axis=1)
        return (matrix @ matrix.T) / np.outer(norms, norms)

    sim_s, sim_o = cosine(emb_s), cosine(emb_o)
    n_s, n_o = len(manifest.states), len(manifest.objects)
    seen = manifest.seen_set
    objects_of = {i: [j for j in range(n_o) if (i, j) in seen] for i in range(n_s)}
    states_of = {j: [i for i in range(n_s) if (i, j) in seen] for j in range(n_o)}
    rho = np.full((n_s, n_o), np.inf)
    for i in range(n_s):
        for j in range(n_o):
            if (i, j) in seen:
                continue
            rho_o = max(sim_o[j, k] for k in objects_of[i])
            rho_s = max(sim_s[i, k] for k in states_of[j])
            rho[i, j] = 0.5 * (rho_o + rho_s)
    return rho


def rho_vector(rho: np.ndarray, pairs: list[tuple[int, int]]) -> np.ndarray:
    return np.asarray([rho[i, j] for i, j in pairs], dtype=np.float64)


def apply_feasibility(sm: ScoreMatrix, rho_vec: np.ndarray, threshold: float) -> ScoreMatrix:
    """Keep candidates with rho strictly above the threshold."""
    return sm.filtered(rho_vec > threshold)


def open_world_filter(scores_row: np.ndarray, rho_vec: np.ndarray, threshold: float) -> int:
    keep = rho_vec > threshold
    if not keep.any():
        raise EmptyCandidateError(f"threshold {threshold} removes every candidate")
    masked = np.where(keep, scores_row, -np.inf)
    return int(np.argmax(masked))


def default_threshold_grid(rho_vec: np.ndarray) -> np.ndarray:
    """One candidate per realizable filter set that keeps >= 1 unseen pair."""
    finite = np.unique(rho_vec[np.isfinite(rho_vec)])
    if finite.size == 0:
        raise ProtocolError("no unseen candidates to calibrate a threshold on")
    grid = [finite[0] - 1.0]
    grid.extend(0.5 * (finite[k] + finite[k + 1]) for k in range(finite.size - 1))
    return np.asarray(grid)


def calibrate_threshold(sm: ScoreMatrix, rho_vec: np.ndarray, candidates=None):
    """Pick the threshold maximizing validation AUC; ties go to the smallest."""
    if candidates is None:
        candidates = default_threshold_grid(rho_vec)
    rows = []
    best_t, best_auc = None, -np.inf
    for t in sorted(float(t) for t in candidates):
        auc = evaluate_matrix(apply_feasibility(sm, rho_vec, t)).auc
        rows.append((t, auc))
        if auc > best_auc:
            best_t, best_auc = t, auc
    return best_t, rows


# ---------------------------------------------------------------------------
# scoring a manifest split with a model


def score_split(model, manifest: D.SplitManifest, split: str, world: str = "closed") -> ScoreMatrix:
    if split not in manifest.splits:
        raise ProtocolError(f"manifest has no split {split!r}")
    samples = manifest.splits[split]
    if any(s.image is None for s in samples):
        raise ProtocolError(f"split {split!r} is metadata-only; cannot score")
    pairs, index = D.target_space(manifest, world)
    images = np.stack([s.image for s in samples])
    truth = np.asarray([index[(s.state, s.object)] for s in samples], dtype=np.intp)
    seen = manifest.seen_set
    pair_seen = np.asarray([p in seen for p in pairs], dtype=bool)
    scores = model.score_images(images, pairs)
    return ScoreMatrix(scores=scores, truth=truth, pair_seen=pair_seen)
