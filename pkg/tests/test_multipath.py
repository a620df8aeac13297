"""Branch head fixtures: probabilities, losses, masked score integration."""

import numpy as np
import pytest
from scipy.special import erf

from tripath import tensor as T
from tripath.multipath import (
    BranchMask,
    Disentanglers,
    LossWeights,
    branch_probabilities,
    cosine_probabilities,
    integrate,
    predict,
    total_loss,
)
from tripath.store import ParamStore


def test_cosine_probability_example():
    # cos = [1, -1] at tau = 1: softmax gives [0.880797, 0.119203]
    feature = T.Tensor([[1.0, 0.0]])
    reps = T.Tensor([[1.0, 0.0], [-1.0, 0.0]])
    probs = cosine_probabilities(feature, reps, tau=1.0).data[0]
    assert probs[0] == pytest.approx(0.8807970779778823, abs=1e-15)
    assert probs[1] == pytest.approx(0.11920292202211755, abs=1e-15)


def test_temperature_sharpens_ratio():
    feature = T.Tensor([[1.0, 0.0]])
    reps = T.Tensor([[0.9, np.sqrt(1 - 0.81)], [0.8, np.sqrt(1 - 0.64)]])
    probs = cosine_probabilities(feature, reps, tau=0.05).data[0]
    assert probs[0] / probs[1] == pytest.approx(np.exp((0.9 - 0.8) / 0.05), rel=1e-12)


def test_branch_probabilities_vector_form():
    probs = branch_probabilities(T.Tensor([2.0, 0.0]), T.Tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
    assert probs.shape == (3,)
    assert probs.data.sum() == pytest.approx(1.0, abs=1e-12)
    assert predict(probs.data) == 0


def test_cosine_scale_invariance():
    reps = T.Tensor(np.random.default_rng(0).normal(size=(4, 6)))
    f = np.random.default_rng(1).normal(size=(2, 6))
    a = cosine_probabilities(T.Tensor(f), reps).data
    b = cosine_probabilities(T.Tensor(3.5 * f), reps).data
    assert np.allclose(a, b, atol=1e-12)


def test_per_sample_reps_give_per_sample_rows():
    rng = np.random.default_rng(2)
    f = T.Tensor(rng.normal(size=(2, 6)))
    reps = T.Tensor(rng.normal(size=(2, 5, 6)))
    probs = cosine_probabilities(f, reps).data
    solo = cosine_probabilities(T.Tensor(f.data[1:2]), T.Tensor(reps.data[1])).data[0]
    assert probs.shape == (2, 5)
    assert np.allclose(probs[1], solo, atol=1e-15)


def test_disentangler_identity_and_mlp_oracle():
    store = ParamStore(4)
    dis = Disentanglers(store, d=6)
    x = T.Tensor(np.random.default_rng(3).normal(size=(2, 6)))
    x_s, x_o, x_c = dis.forward(x)
    assert x_c is x

    def np_mlp(v, leaf):
        h = v @ store[f"dis.{leaf}.W_1"].data + store[f"dis.{leaf}.b_1"].data
        h = h * (0.5 * (1.0 + erf(h / np.sqrt(2.0))))
        return h @ store[f"dis.{leaf}.W_2"].data + store[f"dis.{leaf}.b_2"].data

    assert np.allclose(x_s.data, np_mlp(x.data, "s"), atol=1e-13)
    assert np.allclose(x_o.data, np_mlp(x.data, "o"), atol=1e-13)


def test_total_loss_weighted_sum():
    probs = {
        "c": T.Tensor([[0.5, 0.5]]),
        "s": T.Tensor([[0.25, 0.75]]),
        "o": T.Tensor([[1.0, 0.0]]),
    }
    targets = {"c": np.array([0]), "s": np.array([1]), "o": np.array([0])}
    weights = LossWeights(alpha_c=2.0, alpha_s=1.0, alpha_o=3.0)
    loss, parts = total_loss(probs, targets, weights, BranchMask())
    expected = 2.0 * np.log(2.0) + (-np.log(0.75)) + 0.0
    assert loss.item() == pytest.approx(expected, abs=1e-12)
    assert parts["c"] == pytest.approx(np.log(2.0), abs=1e-12)
    assert parts["o"] == 0.0


def test_total_loss_respects_training_mask():
    probs = {
        "c": T.Tensor([[0.5, 0.5]]),
        "s": None,
        "o": T.Tensor([[0.5, 0.5]]),
    }
    targets = {"c": np.array([0]), "s": np.array([0]), "o": np.array([1])}
    mask = BranchMask(use_c=True, use_s=False, use_o=True)
    loss, parts = total_loss(probs, targets, LossWeights(), mask)
    assert loss.item() == pytest.approx(2.0 * np.log(2.0), abs=1e-12)
    assert parts["s"] == 0.0

    # InferenceOnly masks do not drop training branches
    inference_mask = BranchMask(use_c=True, use_s=False, use_o=True, phase="InferenceOnly")
    with pytest.raises(ValueError):
        total_loss(probs, targets, LossWeights(), inference_mask)


def test_integrate_combines_both_paths():
    p_c = np.array([0.5, 0.3, 0.2])
    p_s = np.array([0.6, 0.4])
    p_o = np.array([0.9, 0.1])
    state_of = np.array([0, 0, 1])
    object_of = np.array([0, 1, 0])
    scores = integrate(p_c, p_s, p_o, state_of, object_of, BranchMask())
    expected = p_c + p_s[state_of] * p_o[object_of]
    assert np.allclose(scores, expected, atol=1e-15)
    assert predict(scores) == 0


def test_integrate_masked_paths():
    p_c = np.array([[0.5, 0.3, 0.2]])
    p_s = np.array([[0.6, 0.4]])
    p_o = np.array([[0.9, 0.1]])
    state_of = np.array([0, 0, 1])
    object_of = np.array([0, 1, 0])
    only_c = integrate(p_c, p_s, p_o, state_of, object_of, BranchMask(use_s=False, use_o=False))
    assert np.array_equal(only_c, p_c)
    only_so = integrate(None, p_s, p_o, state_of, object_of, BranchMask(use_c=False))
    assert np.allclose(only_so, p_s[:, state_of] * p_o[:, object_of], atol=1e-15)
    with pytest.raises(ValueError):
        integrate(p_c, p_s, p_o, state_of, object_of, BranchMask(use_c=False, use_o=False))


def test_predict_breaks_ties_low():
    assert predict(np.array([0.3, 0.5, 0.5])) == 1
    assert np.array_equal(predict(np.array([[0.5, 0.5], [0.1, 0.7]])), np.array([0, 1]))


def test_mask_and_weight_validation():
    with pytest.raises(ValueError):
        BranchMask(use_c=False, use_s=False, use_o=False)
    with pytest.raises(ValueError):
        BranchMask(phase="Sometimes")
    with pytest.raises(ValueError):
        LossWeights(alpha_c=-0.1)
    with pytest.raises(ValueError):
        LossWeights(alpha_c=0.0, alpha_s=0.0, alpha_o=0.0)
