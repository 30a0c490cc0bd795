import numpy as np
import pytest

from nncompress.data import SyntheticSpec, gen_synthetic
from nncompress.errors import InvalidInputError, ShapeError, StateError
from nncompress.model import (Dataset, Flatten, Linear, Model, backward, build_mnist_classifier,
                              build_toy_classifier, count_params, evaluate, layer_param_counts, train)
from nncompress.prune import apply_prune
from nncompress.tensor import make_rng
from oracles import finite_difference_grads, max_relative_error


class TestBuilders:
    def test_mnist_total(self):
        m = build_mnist_classifier()
        assert count_params(m)["__total__"]["total"] == 431_080

    def test_mnist_layer_counts(self):
        assert layer_param_counts(build_mnist_classifier()) == {
            "conv1": 520, "conv2": 25_050, "fc1": 400_500, "fc2": 5_010}

    def test_fresh_masks_all_ones(self):
        m = build_mnist_classifier()
        assert all(mask.all() for mask in m.masks.values())

    def test_mnist_forward_shape(self):
        m = build_mnist_classifier()
        assert m.forward(np.zeros((2, 1, 28, 28))).shape == (2, 10)

    def test_toy_default_count(self):
        m = build_toy_classifier()
        assert layer_param_counts(m) == {"conv1": 80, "fc1": 4128, "fc2": 330}
        assert count_params(m)["__total__"]["total"] == 4538

    def test_toy_deterministic(self):
        a, b = build_toy_classifier(seed=3), build_toy_classifier(seed=3)
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)

    def test_toy_head_sizing(self):
        m = build_toy_classifier(num_classes=2)
        assert m.params["fc2.weight"].shape == (2, 32)

    def test_toy_rejects_small_input(self):
        with pytest.raises(ShapeError):
            build_toy_classifier(in_shape=(1, 3, 8))

    def test_biases_not_prunable_by_default(self):
        m = build_toy_classifier()
        assert m.prunable == ("conv1.weight", "fc1.weight", "fc2.weight")
        assert set(build_toy_classifier(prune_biases=True).prunable) == set(m.params)


class TestBackward:
    def test_requires_forward(self):
        m = build_toy_classifier()
        with pytest.raises(StateError):
            m.backward(np.zeros((1, 10), dtype=np.float32))

    def test_zero_input_gives_zero_weight_gradient(self):
        w = np.ones((3, 4))
        m = Model("lin", [Flatten(), Linear("fc", 4, 3)], {"fc.weight": w, "fc.bias": np.zeros(3)},
                  {"fc.weight": np.ones((3, 4), bool), "fc.bias": np.ones(3, bool)}, ("fc.weight",))
        _, g = backward(m, np.zeros((5, 1, 2, 2)), [0, 1, 2, 0, 1])
        assert not g["fc.weight"].any()

    def test_loss_scale_is_linear(self):
        m = build_toy_classifier(seed=1, dtype=np.float64)
        rng = make_rng(1)
        x = rng.normal(size=(3, 1, 8, 8))
        y = [1, 4, 7]
        _, g1 = backward(m, x, y)
        _, g2 = backward(m, x, y, loss_scale=2.0)
        for k in g1:
            np.testing.assert_array_equal(g2[k], 2 * g1[k])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference(self, seed):
        m = build_toy_classifier((1, 6, 6), 3, seed=seed, channels=2, hidden=8, dtype=np.float64)
        rng = make_rng(50 + seed)
        x = rng.normal(size=(4, 1, 6, 6))
        y = rng.integers(0, 3, size=4)
        _, g = backward(m, x, y)
        assert max_relative_error(g, finite_difference_grads(m, x, y)) <= 1e-4


class TestTrain:
    def test_fully_masked_model_stays_zero(self, synthetic):
        m = build_toy_classifier()
        m.masks = {k: np.zeros_like(v) for k, v in m.masks.items()}
        train(m, synthetic[0], epochs=1)
        assert all(not p.any() for p in m.params.values())

    def test_reaches_accuracy(self, trained_toy, synthetic):
        # reference run: seed 0, 10 epochs, lr 0.05, batch 32
        assert evaluate(trained_toy, synthetic[0]) >= 0.90

    def test_mask_persistence(self, synthetic):
        m, _ = apply_prune(build_toy_classifier(seed=2), "class_blind", 0.6)
        zeros = {k: ~v for k, v in m.masks.items()}
        small = Dataset(synthetic[0].inputs[:3200], synthetic[0].labels[:3200], 10)
        train(m, small, epochs=1, batch_size=32)  # 100 steps
        for k, z in zeros.items():
            assert np.all(m.params[k][z] == 0.0)
            assert not np.signbit(m.params[k][z]).any()

    def test_rejects_empty(self):
        empty = Dataset(np.zeros((0, 1, 8, 8), np.float32), np.zeros(0), 10)
        with pytest.raises(InvalidInputError):
            train(build_toy_classifier(), empty)

    def test_rejects_bad_hyperparameters(self, synthetic):
        with pytest.raises(InvalidInputError):
            train(build_toy_classifier(), synthetic[0], epochs=0)


class TestEvaluate:
    def test_zero_model_is_chance(self, synthetic):
        m = build_toy_classifier()
        for p in m.params.values():
            p[...] = 0
        # constant logits: every prediction is class 0, which is 1/10 of the balanced test set
        assert evaluate(m, synthetic[1]) == pytest.approx(0.1, abs=0.01)

    def test_single_correct_sample(self, trained_toy, synthetic):
        x = synthetic[1].inputs
        pred = trained_toy.predict(x[:50])
        i = int(np.flatnonzero(pred == synthetic[1].labels[:50])[0])
        assert evaluate(trained_toy, Dataset(x[i:i + 1], [pred[i]], 10)) == 1.0

    def test_deterministic_and_order_invariant(self, trained_toy, synthetic):
        test = synthetic[1]
        perm = make_rng(0).permutation(len(test))
        shuffled = Dataset(test.inputs[perm], test.labels[perm], 10)
        a = evaluate(trained_toy, test)
        assert a == evaluate(trained_toy, test) == evaluate(trained_toy, shuffled)

    def test_ties_go_to_lowest_class(self):
        m = build_toy_classifier()
        for p in m.params.values():
            p[...] = 0
        m.params["fc2.bias"][[3, 7]] = 1.0
        assert (m.predict(np.zeros((4, 1, 8, 8))) == 3).all()


class TestCountParams:
    def test_fresh_mnist(self):
        c = count_params(build_mnist_classifier())["__total__"]
        assert c == {"total": 431_080, "surviving": 431_080, "pruned": 0}
        assert c["total"] * 4 == 1_724_320

    def test_half_pruned(self):
        m = build_mnist_classifier(prune_biases=True)
        m, _ = apply_prune(m, "class_blind", 0.5)
        assert count_params(m)["__total__"]["surviving"] == 215_540

    def test_partition(self):
        m, _ = apply_prune(build_toy_classifier(), "class_blind", 0.3)
        c = count_params(m)
        for key in ("total", "surviving", "pruned"):
            assert sum(v[key] for k, v in c.items() if k != "__total__") == c["__total__"][key]


def test_dataset_rejects_bad_labels():
    with pytest.raises(InvalidInputError):
        Dataset(np.zeros((2, 1, 4, 4)), [0, 5], 3)


def test_different_seed_data_gives_different_model():
    a, _ = gen_synthetic(SyntheticSpec(seed=1, train_samples=100, test_samples=10))
    b, _ = gen_synthetic(SyntheticSpec(seed=2, train_samples=100, test_samples=10))
    assert a.inputs.tobytes() != b.inputs.tobytes()
