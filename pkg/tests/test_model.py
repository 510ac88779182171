import math

import numpy as np
import pytest

from conftest import central_diff, rel_err
from ella.linalg import LowRankFactors, ShapeError
from ella.model import (
    AdapterSet,
    FrozenModel,
    Layer,
    Optimizer,
    TrainingDivergence,
    adapted_forward,
    backward,
    predict,
    task_loss,
    total_loss,
)
from ella.regularizer import PastAccumulator


def random_adapters(model, rank, rng, scale=0.5):
    entries = {}
    for i, layer in enumerate(model.layers):
        d, k = layer.shape
        entries[i] = LowRankFactors(rng.normal(0, scale, (d, rank)), rng.normal(0, scale, (rank, k)))
    return AdapterSet(entries, rank)


@pytest.fixture
def two_layer(rng):
    model = FrozenModel.random([5, 6, 3], "tanh", seed=3)
    X = rng.normal(size=(7, 5))
    y = rng.integers(0, 3, size=7)
    return model, X, y


def test_zero_b_matches_frozen_forward(two_layer, rng):
    model, X, _ = two_layer
    ad = AdapterSet.init(model, 2, rng)
    np.testing.assert_array_equal(adapted_forward(model, ad, X), adapted_forward(model, None, X))


def test_identity_layer_doubles_input():
    model = FrozenModel([Layer(np.eye(2), np.zeros(2))])
    ad = AdapterSet({0: LowRankFactors(np.eye(2), np.eye(2))}, 2)
    x = np.array([0.3, -1.2])
    np.testing.assert_allclose(adapted_forward(model, ad, x), 2 * x)


@pytest.mark.parametrize("activation", ["identity", "tanh", "relu"])
def test_merge_equivalence(rng, activation):
    model = FrozenModel.random([6, 8, 5, 3], activation, seed=1)
    ad = random_adapters(model, 2, rng)
    X = rng.normal(size=(20, 6))
    merged = model.merged(ad.deltas())
    np.testing.assert_allclose(adapted_forward(model, ad, X), adapted_forward(merged, None, X), atol=1e-12, rtol=0)


def test_forward_rejects_bad_dimension(two_layer):
    model, _, _ = two_layer
    with pytest.raises(ShapeError):
        adapted_forward(model, None, np.zeros(4))


def test_frozen_weights_are_read_only(two_layer):
    model, _, _ = two_layer
    with pytest.raises(ValueError):
        model.layers[0].W[0, 0] = 1.0


def test_layer_composition_checked():
    with pytest.raises(ShapeError):
        FrozenModel([Layer(np.ones((3, 2)), np.zeros(3)), Layer(np.ones((2, 4)), np.zeros(2))])


class TestLoss:
    def test_uniform_logits(self):
        model = FrozenModel([Layer(np.zeros((4, 3)), np.zeros(4))])
        X = np.ones((5, 3))
        assert task_loss(model, None, X, [0, 1, 2, 3, 0]) == pytest.approx(math.log(4), abs=1e-15)

    def test_dominant_logit_limit(self):
        model = FrozenModel([Layer(np.array([[1.0], [0.0]]) * 800.0, np.zeros(2))])
        assert task_loss(model, None, np.ones((1, 1)), [0]) < 1e-300 + 1e-12

    def test_two_sample_hand_value(self):
        # logits [1, 0] (label 0) and [0, 2] (label 0): log(1+e^-1), log(1+e^2)
        model = FrozenModel([Layer(np.eye(2), np.zeros(2))])
        X = np.array([[1.0, 0.0], [0.0, 2.0]])
        assert task_loss(model, None, X, [0, 0]) == pytest.approx(1.2200948492805979, abs=1e-10)

    def test_errors(self, two_layer):
        model, X, _ = two_layer
        with pytest.raises(ValueError):
            task_loss(model, None, X[:0], [])
        with pytest.raises(ValueError):
            task_loss(model, None, X[:1], [3])

    def test_total_loss_reductions(self, two_layer, rng):
        model, X, y = two_layer
        ad = random_adapters(model, 2, rng)
        past = PastAccumulator().accumulate(0, rng.normal(size=(6, 5)))
        base = task_loss(model, ad, X, y)
        assert total_loss(model, ad, X, y, 0.0, past) == base
        assert total_loss(model, ad, X, y, 5.0, PastAccumulator()) == base

    def test_total_loss_composition(self):
        model = FrozenModel([Layer(np.zeros((2, 2)), np.zeros(2))])
        # delta = [[1, 2], [0, 0]], w_past = [[3, 0], [0, 0]] -> penalty 9
        ad = AdapterSet({0: LowRankFactors([[1.0], [0.0]], [[1.0, 2.0]])}, 1)
        past = PastAccumulator().accumulate(0, [[3.0, 0.0], [0.0, 0.0]])
        X, y = np.array([[0.5, 1.0]]), [1]
        assert total_loss(model, ad, X, y, 2.0, past) == pytest.approx(task_loss(model, ad, X, y) + 18.0, abs=1e-12)


class TestBackward:
    def _check(self, model, ad, X, y, lam, past):
        grads = backward(model, ad, X, y, lam, past)
        worst = 0.0
        for i, f in ad.entries.items():
            for which, param in (("A", f.A), ("B", f.B)):
                num = central_diff(lambda: total_loss(model, ad, X, y, lam, past), param)
                worst = max(worst, rel_err(grads[i][0 if which == "A" else 1], num))
        return worst

    @pytest.mark.parametrize("activation", ["tanh", "identity"])
    def test_matches_finite_differences(self, rng, activation):
        model = FrozenModel.random([5, 6, 3], activation, seed=7)
        ad = random_adapters(model, 2, rng, scale=0.3)
        past = PastAccumulator()
        for i, layer in enumerate(model.layers):
            past = past.accumulate(i, rng.normal(size=layer.shape))
        X, y = rng.normal(size=(9, 5)), rng.integers(0, 3, size=9)
        assert self._check(model, ad, X, y, 0.7, past) < 1e-5

    def test_lambda_zero_equals_task_only(self, two_layer, rng):
        model, X, y = two_layer
        ad = random_adapters(model, 2, rng)
        past = PastAccumulator().accumulate(0, rng.normal(size=(6, 5)))
        g0 = backward(model, ad, X, y, 0.0, past)
        g1 = backward(model, ad, X, y)
        for i in g0:
            np.testing.assert_array_equal(g0[i][0], g1[i][0])
            np.testing.assert_array_equal(g0[i][1], g1[i][1])

    def test_zero_b_gives_zero_grad_a(self, two_layer, rng):
        model, X, y = two_layer
        ad = AdapterSet.init(model, 2, rng)
        grads = backward(model, ad, X, y)
        for gA, gB in grads.values():
            np.testing.assert_array_equal(gA, 0.0)
            assert np.any(gB != 0.0)

    def test_partial_adaptation(self, two_layer, rng):
        model, X, y = two_layer
        ad = AdapterSet({1: LowRankFactors(rng.normal(size=(3, 2)), rng.normal(size=(2, 6)))}, 2)
        grads = backward(model, ad, X, y)
        assert set(grads) == {1}
        num = central_diff(lambda: task_loss(model, ad, X, y), ad.entries[1].B)
        assert rel_err(grads[1][1], num) < 1e-5


class TestOptimizer:
    def _single(self, value):
        return AdapterSet({0: LowRankFactors([[value]], [[1.0]])}, 1)

    def test_zero_learning_rate(self, two_layer, rng):
        model, X, y = two_layer
        ad = random_adapters(model, 2, rng)
        new = Optimizer("adam", 0.0).step(ad, backward(model, ad, X, y))
        for i in ad.entries:
            np.testing.assert_array_equal(new.entries[i].A, ad.entries[i].A)

    def test_sgd_quadratic(self):
        # f(theta) = theta^2 / 2 has gradient theta
        ad = self._single(1.0)
        new = Optimizer("sgd", 0.1).step(ad, {0: (ad.entries[0].A, np.zeros((1, 1)))})
        assert new.entries[0].A[0, 0] == pytest.approx(0.9, abs=1e-15)

    def test_adam_two_steps(self):
        opt = Optimizer("adam", 0.1)
        ad = self._single(1.0)
        for _ in range(2):
            ad = opt.step(ad, {0: (np.ones((1, 1)), np.zeros((1, 1)))})
        # both bias-corrected steps equal lr * 1 / (1 + eps)
        assert ad.entries[0].A[0, 0] == pytest.approx(1.0 - 0.2 / (1 + 1e-8), abs=1e-14)
        assert ad.entries[0].A[0, 0] == pytest.approx(0.800000002, abs=1e-12)

    def test_non_finite_gradient_aborts(self):
        ad = self._single(1.0)
        with pytest.raises(TrainingDivergence):
            Optimizer().step(ad, {0: (np.full((1, 1), np.nan), np.zeros((1, 1)))})

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Optimizer("rmsprop")


def test_training_sanity_monotone_loss():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-2, 0.5, (50, 4)), rng.normal(2, 0.5, (50, 4))])
    y = np.repeat([0, 1], 50)
    model = FrozenModel.random([4, 8, 2], "tanh", seed=0)
    ad = AdapterSet.init(model, 2, rng)
    opt = Optimizer("sgd", 0.5)
    losses = []
    for _ in range(50):
        losses.append(task_loss(model, ad, X, y))
        ad = opt.step(ad, backward(model, ad, X, y))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_predict_ties_go_to_lowest_index():
    model = FrozenModel([Layer(np.zeros((3, 2)), np.zeros(3))])
    np.testing.assert_array_equal(predict(model, None, np.ones((4, 2))), 0)
