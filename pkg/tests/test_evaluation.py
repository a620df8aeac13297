"""Sweep protocol fixtures: hand curves, dense-grid oracle, feasibility."""

import numpy as np
import pytest

from tripath.data import ManifestError, SplitManifest
from tripath.evaluation import (
    CurvePoint,
    EmptyCandidateError,
    MetricsReport,
    ProtocolError,
    ScoreMatrix,
    SweepCurve,
    accuracy_at_bias,
    apply_feasibility,
    bias_sweep,
    calibrate_threshold,
    candidate_biases,
    compute_metrics,
    default_threshold_grid,
    evaluate_matrix,
    feasibility_scores,
    open_world_filter,
    rho_vector,
    _transition_margins,
)


def random_matrix(seed, n=20, c=12, n_seen=8):
    """Score matrix with both truth populations, seen cols first."""
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(n, c))
    pair_seen = np.zeros(c, dtype=bool)
    pair_seen[:n_seen] = True
    truth = np.concatenate([
        rng.integers(0, n_seen, size=n // 2),
        rng.integers(n_seen, c, size=n - n // 2),
    ])
    return ScoreMatrix(scores=scores, truth=truth, pair_seen=pair_seen)


def dense_metrics(sm, n_grid=100_000, chunk=2000):
    """Direct dense-grid sweep used as the protocol oracle.

    Each grid bias is evaluated directly and independently. The grid is the
    uniform linspace over the margin range plus one point inside every
    inter-margin interval (stratification within the same point budget), so no
    accuracy plateau can fall between grid points regardless of how close two
    margins happen to lie.
    """
    margins = _transition_margins(sm)
    lo, hi = margins.min() - 1.0, margins.max() + 1.0
    interior = 0.5 * (margins[:-1] + margins[1:])
    grid = np.unique(np.concatenate([np.linspace(lo, hi, n_grid - interior.size), interior]))
    assert grid.size <= n_grid

    eff = sm.scores.copy()
    if sm.column_mask is not None:
        eff[:, ~sm.column_mask] = -np.inf
    unseen_cols = ~sm.pair_seen
    seen_samples = sm.pair_seen[sm.truth]
    rows = np.arange(eff.shape[0])

    curve = SweepCurve()
    s, u = accuracy_at_bias(sm, -np.inf)
    curve.points.append(CurvePoint(-np.inf, s, u))
    for start in range(0, n_grid, chunk):
        biases = grid[start:start + chunk]
        shifted = eff[None, :, :] + biases[:, None, None] * unseen_cols[None, None, :]
        pred = np.argmax(shifted, axis=2)
        chosen = np.take_along_axis(shifted, pred[:, :, None], axis=2)[:, :, 0]
        correct = (pred == sm.truth[None, :]) & np.isfinite(chosen)
        seen_acc = correct[:, seen_samples].mean(axis=1)
        unseen_acc = correct[:, ~seen_samples].mean(axis=1)
        for b, sa, ua in zip(biases, seen_acc, unseen_acc):
            curve.points.append(CurvePoint(float(b), float(sa), float(ua)))
    s, u = accuracy_at_bias(sm, np.inf)
    curve.points.append(CurvePoint(np.inf, s, u))
    return compute_metrics(curve)


def test_hand_curve_two_columns():
    sm = ScoreMatrix(
        scores=np.array([[2.0, 1.0], [3.0, 1.0]]),
        truth=np.array([0, 1]),
        pair_seen=np.array([True, False]),
    )
    cands = candidate_biases(sm)
    assert np.array_equal(cands, [-np.inf, 1.0, 1.5, 2.0, np.inf])
    report = evaluate_matrix(sm)
    assert report.seen == 1.0
    assert report.unseen == 1.0
    assert report.harmonic == 0.0
    assert report.auc == 0.5


def test_hand_curve_with_simultaneous_plateau():
    sm = ScoreMatrix(
        scores=np.array([[5.0, 1.0, 1.0], [2.0, 1.0, 3.0]]),
        truth=np.array([0, 2]),
        pair_seen=np.array([True, True, False]),
    )
    curve = bias_sweep(sm)
    assert [(p.seen, p.unseen) for p in curve.points] == [
        (1.0, 0.0), (1.0, 0.0), (1.0, 1.0), (1.0, 1.0), (0.0, 1.0)]
    report = compute_metrics(curve)
    assert report.harmonic == 1.0
    assert report.seen == 1.0 and report.unseen == 1.0


def test_bias_endpoints_select_populations():
    sm = random_matrix(0)
    seen_only, u0 = accuracy_at_bias(sm, -np.inf)
    s1, unseen_only = accuracy_at_bias(sm, np.inf)
    assert u0 == 0.0 or u0 > 0.0  # unseen truth cannot be found among seen cols
    assert s1 == 0.0
    report = evaluate_matrix(sm)
    assert report.seen == seen_only
    assert report.unseen == unseen_only


def test_ties_resolve_to_lowest_index():
    sm = ScoreMatrix(
        scores=np.array([[1.0, 1.0], [1.0, 1.0]]),
        truth=np.array([0, 1]),
        pair_seen=np.array([True, False]),
    )
    seen, unseen = accuracy_at_bias(sm, 0.0)
    assert seen == 1.0   # tie at column 0 vs 1 picks 0, the seen truth
    assert unseen == 0.0


def test_sweep_matches_dense_grid_oracle():
    for seed in (0, 7):
        sm = random_matrix(seed)
        sparse = evaluate_matrix(sm)
        dense = dense_metrics(sm, n_grid=20_001)
        assert abs(sparse.seen - dense.seen) <= 1e-9
        assert abs(sparse.unseen - dense.unseen) <= 1e-9
        assert abs(sparse.harmonic - dense.harmonic) <= 1e-9
        assert abs(sparse.auc - dense.auc) <= 1e-9


def test_uniform_score_shift_leaves_metrics_unchanged():
    sm = random_matrix(3)
    shifted = ScoreMatrix(sm.scores + 3.7, sm.truth, sm.pair_seen)
    a, b = evaluate_matrix(sm), evaluate_matrix(shifted)
    assert abs(a.seen - b.seen) <= 1e-12
    assert abs(a.unseen - b.unseen) <= 1e-12
    assert abs(a.harmonic - b.harmonic) <= 1e-12
    assert abs(a.auc - b.auc) <= 1e-12


def test_sweep_monotonicity_along_bias():
    for seed in range(5):
        curve = bias_sweep(random_matrix(seed))
        seens = [p.seen for p in curve.points]
        unseens = [p.unseen for p in curve.points]
        assert all(a >= b - 1e-12 for a, b in zip(seens, seens[1:]))
        assert all(a <= b + 1e-12 for a, b in zip(unseens, unseens[1:]))


def test_score_matrix_validation():
    with pytest.raises(ProtocolError, match="finite"):
        ScoreMatrix(np.array([[np.nan, 1.0]]), np.array([0]), np.array([True, False]))
    with pytest.raises(ProtocolError, match="range"):
        ScoreMatrix(np.ones((1, 2)), np.array([2]), np.array([True, False]))
    with pytest.raises(ProtocolError, match="seen pairs"):
        ScoreMatrix(np.ones((1, 2)), np.array([0]), np.array([True, False]),
                    column_mask=np.array([False, True]))
    with pytest.raises(ProtocolError, match="both seen-truth and unseen-truth"):
        sm = ScoreMatrix(np.ones((2, 2)), np.array([0, 0]), np.array([True, False]))
        accuracy_at_bias(sm, 0.0)


def test_report_percent_formatting():
    report = MetricsReport(seen=0.93333333, unseen=5 / 36, harmonic=0.52174, auc=0.31419)
    p = report.percent_dict()
    assert p == {"S": 93.33, "U": 13.89, "HM": 52.17, "AUC": 31.42}
    assert "AUC" in report.row()


def _toy_manifest():
    return SplitManifest(
        states=["A", "B", "C"],
        objects=["X", "Y", "Z"],
        seen_pairs=[(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2)],
        unseen_pairs=[(0, 2), (1, 0), (2, 1)],
        image_shape=(16, 16, 3),
    ).validate()


def _toy_table():
    return {
        "A": np.array([1.0, 0.0, 0.0]),
        "B": np.array([0.6, 0.8, 0.0]),
        "C": np.array([0.0, 0.0, 1.0]),
        "X": np.array([1.0, 0.0, 0.0]),
        "Y": np.array([0.8, 0.6, 0.0]),
        "Z": np.array([0.0, 1.0, 0.0]),
    }


def test_feasibility_hand_values_exact():
    rho = feasibility_scores(_toy_manifest(), _toy_table())
    assert rho[0, 2] == 0.5 * (0.6 + 0.6)
    assert rho[1, 0] == 0.5 * (0.8 + 0.6)
    assert rho[2, 1] == 0.5 * (0.8 + 0.0)
    for i, j in _toy_manifest().seen_pairs:
        assert rho[i, j] == np.inf


def test_feasibility_requires_all_embeddings():
    table = _toy_table()
    del table["Z"]
    with pytest.raises(ManifestError, match="'Z'"):
        feasibility_scores(_toy_manifest(), table)


def test_filter_soundness():
    manifest = _toy_manifest()
    rho = feasibility_scores(manifest, _toy_table())
    pairs = sorted(set(manifest.seen_pairs) | set(manifest.unseen_pairs))
    vec = rho_vector(rho, pairs)
    keep = vec > 0.5
    for col, pair in enumerate(pairs):
        if pair in manifest.seen_set:
            assert keep[col]
    assert not keep[pairs.index((2, 1))]  # rho 0.4 filtered at T = 0.5
    assert keep[pairs.index((1, 0))]      # rho 0.7 survives

    row = np.linspace(1.0, 0.1, len(pairs))
    pred = open_world_filter(row, vec, threshold=0.5)
    assert keep[pred]
    with pytest.raises(EmptyCandidateError):
        open_world_filter(row, vec, threshold=np.inf)


def test_threshold_calibration_scans_candidates():
    manifest = _toy_manifest()
    rho = feasibility_scores(manifest, _toy_table())
    pairs = sorted(set(manifest.seen_pairs) | set(manifest.unseen_pairs))
    vec = rho_vector(rho, pairs)
    grid = default_threshold_grid(vec)
    assert grid.shape == (3,)  # below-min plus one midpoint per level gap
    assert grid[0] < 0.4

    rng = np.random.default_rng(1)
    scores = rng.normal(size=(24, len(pairs)))
    truth = np.asarray([k % len(pairs) for k in range(24)])
    pair_seen = np.asarray([p in manifest.seen_set for p in pairs])
    sm = ScoreMatrix(scores, truth, pair_seen)

    t_star, rows = calibrate_threshold(sm, vec)
    aucs = [auc for _, auc in rows]
    assert t_star == rows[int(np.argmax(aucs))][0]  # argmax picks first = smallest tie
    manual = max(aucs)
    assert evaluate_matrix(apply_feasibility(sm, vec, t_star)).auc == manual


def test_filtering_empty_unseen_is_degenerate_but_monotone():
    sm = random_matrix(5)
    filtered = sm.filtered(sm.pair_seen)  # keep only seen columns
    curve = bias_sweep(filtered)
    assert len(curve.points) == 2
    assert curve.points[-1].unseen == 0.0
