import math

import numpy as np
import pytest

import odonet.tensor as T
from odonet import losses
from odonet.errors import DimensionError, DomainError
from odonet.losses import ClassWeights, LossConfig, batch_loss, bce, class_weights, focal
from odonet.tensor import Tensor, backward, grad_check


class TestScalarLosses:
    def test_bce_at_half(self):
        assert bce(0.5, 1) == pytest.approx(math.log(2), abs=1e-12)
        assert bce(0.5, 1) == pytest.approx(0.693147, abs=1e-6)

    def test_bce_approaches_zero_for_good_prediction(self):
        assert bce(1.0, 1) < 1e-6
        assert bce(1e-9, 0) < 1e-6

    def test_bce_symmetry(self):
        for p in (0.1, 0.33, 0.5, 0.77, 0.999):
            assert bce(p, 0) == pytest.approx(bce(1.0 - p, 1), rel=1e-9)

    def test_bce_target_domain(self):
        with pytest.raises(DomainError):
            bce(0.5, 2)

    def test_focal_gamma_zero_equals_bce(self):
        rng = np.random.default_rng(0)
        for p in rng.random(1000):
            for t in (0, 1):
                assert abs(focal(float(p), t, 0.0) - bce(float(p), t)) < 1e-12

    def test_focal_reference_values(self):
        assert focal(0.5, 1, 2.0) == pytest.approx(0.25 * math.log(2), abs=1e-12)
        assert focal(0.5, 1, 2.0) == pytest.approx(0.173287, abs=1e-6)
        # easy example down-weighted roughly 100x versus bce
        assert focal(0.9, 1, 2.0) == pytest.approx(0.01 * -math.log(0.9), abs=1e-9)
        assert bce(0.9, 1) / focal(0.9, 1, 2.0) == pytest.approx(100.0, rel=1e-9)

    def test_losses_nonnegative(self):
        rng = np.random.default_rng(1)
        for p in rng.random(200):
            for t in (0, 1):
                assert bce(float(p), t) >= 0.0
                assert focal(float(p), t, 2.0) >= 0.0


class TestClassWeights:
    def test_two_class_minmax(self):
        cw = class_weights({0: 300, 1: 100}, (0.25, 0.75))
        assert cw.alpha(0) == pytest.approx(0.25)
        assert cw.alpha(1) == pytest.approx(0.75)

    def test_uniform_counts_midpoint(self):
        cw = class_weights({0: 50, 1: 50, 2: 50})
        for c in range(3):
            assert cw.alpha(c) == pytest.approx(0.5)

    def test_single_class_midpoint_and_unobserved_high(self):
        cw = class_weights({3: 123}, (0.25, 0.75))
        assert cw.alpha(3) == pytest.approx(0.5)
        assert cw.alpha(7) == pytest.approx(0.75)

    def test_empty_histogram_rejected(self):
        with pytest.raises(DomainError):
            class_weights({})

    def test_text_round_trip(self):
        cw = class_weights({0: 300, 1: 100, 5: 10}, (0.25, 0.75))
        back = ClassWeights.from_text(cw.to_text())
        assert back.weights == cw.weights
        assert back.counts == cw.counts
        assert (back.low, back.high) == (cw.low, cw.high)


class TestBatchLoss:
    def test_perfect_prediction_near_zero(self):
        n, k = 4, 6
        targets = np.random.default_rng(2).integers(0, 2, (n, k)).astype(float)
        preds = np.clip(targets, 1e-9, 1 - 1e-9)
        loss = batch_loss(Tensor(preds), Tensor(targets), [0] * n, LossConfig(kind="bce"))
        assert loss.item() < 1e-6

    def test_hand_example(self):
        preds = Tensor(np.array([[0.5, 0.5]]))
        targets = Tensor(np.array([[1.0, 0.0]]))
        loss = batch_loss(preds, targets, [0], LossConfig(kind="bce"))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    @pytest.mark.parametrize("kind,gamma", [("bce", 0.0), ("focal", 2.0), ("focal", 0.5)])
    def test_matches_bruteforce_double_loop(self, kind, gamma):
        rng = np.random.default_rng(3)
        n, k = 5, 8
        preds = rng.uniform(0.01, 0.99, (n, k))
        targets = rng.integers(0, 2, (n, k)).astype(float)
        classes = [int(c) for c in rng.integers(0, 4, n)]
        cw = class_weights({0: 10, 1: 30, 2: 20, 3: 5})
        cfg = LossConfig(kind=kind, gamma=gamma, class_weights=cw)

        total = 0.0
        for i in range(n):
            a = cw.alpha(classes[i])
            for j in range(k):
                p, t = float(preds[i, j]), float(targets[i, j])
                term = bce(p, t) if kind == "bce" else focal(p, t, gamma)
                total += a * term
        expected = total / (n * k)

        got = batch_loss(Tensor(preds), Tensor(targets), classes, cfg).item()
        assert got == pytest.approx(expected, abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        n, k = 6, 5
        preds = rng.uniform(0.05, 0.95, (n, k))
        targets = rng.integers(0, 2, (n, k)).astype(float)
        classes = [int(c) for c in rng.integers(0, 3, n)]
        cfg = LossConfig(kind="focal", class_weights=class_weights({0: 5, 1: 10, 2: 2}))
        base = batch_loss(Tensor(preds), Tensor(targets), classes, cfg).item()
        perm = rng.permutation(n)
        shuffled = batch_loss(
            Tensor(preds[perm]), Tensor(targets[perm]), [classes[i] for i in perm], cfg
        ).item()
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_linear_in_class_weights(self):
        rng = np.random.default_rng(5)
        n, k = 4, 7
        preds = rng.uniform(0.1, 0.9, (n, k))
        targets = rng.integers(0, 2, (n, k)).astype(float)
        classes = [0, 1, 0, 1]
        cw1 = class_weights({0: 10, 1: 40})
        scaled = ClassWeights(
            weights={c: 3.0 * w for c, w in cw1.weights.items()},
            counts=cw1.counts, low=3 * cw1.low, high=3 * cw1.high,
        )
        l1 = batch_loss(Tensor(preds), Tensor(targets), classes,
                        LossConfig(kind="bce", class_weights=cw1)).item()
        l3 = batch_loss(Tensor(preds), Tensor(targets), classes,
                        LossConfig(kind="bce", class_weights=scaled)).item()
        assert l3 == pytest.approx(3.0 * l1, rel=1e-12)

    def test_differentiable_wrt_preds(self):
        rng = np.random.default_rng(6)
        targets = Tensor(rng.integers(0, 2, (3, 5)).astype(float))
        cfg = LossConfig(kind="focal", gamma=2.0)

        def f(p):
            return batch_loss(T.logistic(p), targets, [0, 1, 2], cfg)

        err = grad_check(f, Tensor(rng.standard_normal((3, 5))), eps=1e-5)
        assert err < 1e-6

    def test_focal_loss_gradcheck_at_half(self):
        # p = 0.5, t = 1 as a direct scalar graph
        def f(x):
            p = T.logistic(x)
            cfg = LossConfig(kind="focal", gamma=2.0)
            return batch_loss(T.reshape(p, (1, 1)), Tensor(np.array([[1.0]])), [0], cfg)

        assert grad_check(f, Tensor(np.zeros(1)), eps=1e-5) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            batch_loss(Tensor(np.full((2, 3), 0.5)), Tensor(np.full((2, 4), 0.5)),
                       [0, 0], LossConfig())


class TestMseRegression:
    def test_zero_at_perfect(self):
        x = Tensor(np.array([1.0, 2.0]))
        assert losses.mse_regression_loss(x, x).item() == 0.0

    def test_hand_value(self):
        loss = losses.mse_regression_loss(Tensor(np.array([1.0])), Tensor(np.array([3.0])))
        assert loss.item() == 4.0

    def test_gradient(self):
        gt = Tensor(np.array([3.0, -1.0, 0.5]))

        def f(p):
            return losses.mse_regression_loss(p, gt)

        assert grad_check(f, Tensor(np.array([1.0, 0.0, 2.0])), eps=1e-6) < 1e-8
        # analytic gradient is 2*(pred-gt)/N
        p = Tensor(np.array([1.0, 0.0, 2.0]), requires_grad=True)
        backward(losses.mse_regression_loss(p, gt))
        np.testing.assert_allclose(p.grad, 2 * (p.data - gt.data) / 3, rtol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            losses.mse_regression_loss(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
