import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advtransfer.errors import InvalidArgument
from advtransfer.model import (
    Classifier,
    Conv2d,
    Dense,
    LabeledDataset,
    MeanPool,
    ReLU,
    Scale,
    TrainSchedule,
    cross_entropy,
    input_gradient,
    linear_model,
    load_checkpoint,
    loss_and_input_gradient,
    reference_cnn,
    save_checkpoint,
    sgd_train,
)

from helpers import relative_errors


def small_cnn(seed=0, shape=(3, 8, 8), classes=5):
    return reference_cnn(shape, classes, np.random.default_rng(seed))


def test_zero_parameter_linear_model():
    m = linear_model((3, 8, 8), 4)
    x = np.random.default_rng(0).uniform(0, 255, (3, 8, 8))
    assert np.all(m.forward(x) == 0.0)


def test_linear_model_is_dot_product():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(4, 3 * 8 * 8))
    b = rng.normal(size=4)
    m = linear_model((3, 8, 8), 4, w, b)
    x = rng.uniform(0, 255, (3, 8, 8))
    np.testing.assert_allclose(m.forward(x), w @ x.ravel() + b, rtol=1e-12)


def test_batch_equals_single_forwards():
    m = small_cnn()
    xs = np.random.default_rng(2).uniform(0, 255, (6, 3, 8, 8))
    batch = m.forward(xs)
    singles = np.stack([m.forward(x) for x in xs])
    np.testing.assert_allclose(batch, singles, rtol=1e-12, atol=1e-12)


def test_forward_deterministic():
    m = small_cnn()
    x = np.random.default_rng(3).uniform(0, 255, (2, 3, 8, 8))
    assert np.array_equal(m.forward(x), m.forward(x))


def test_shape_mismatch():
    with pytest.raises(InvalidArgument):
        small_cnn().forward(np.zeros((3, 16, 8)))


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert abs(cross_entropy(np.full(10, 3.7), 4) - np.log(10)) < 1e-12

    def test_no_overflow(self):
        assert abs(cross_entropy(np.array([1000.0, 0.0]), 0)) < 1e-12
        assert abs(cross_entropy(np.array([1000.0, 0.0]), 1) - 1000.0) < 1e-9

    def test_extended_precision_oracle(self):
        import mpmath

        mpmath.mp.dps = 50
        rng = np.random.default_rng(4)
        for _ in range(20):
            logits = rng.normal(scale=5, size=7)
            y = int(rng.integers(7))
            exact = mpmath.log(sum(mpmath.exp(mpmath.mpf(v)) for v in logits)) - mpmath.mpf(logits[y])
            assert abs(cross_entropy(logits, y) - float(exact)) < 1e-12

    def test_out_of_range_label(self):
        with pytest.raises(InvalidArgument):
            cross_entropy(np.zeros(3), 3)

    @settings(max_examples=50, deadline=None)
    @given(
        logits=st.lists(st.floats(-50, 50), min_size=2, max_size=8),
        shift=st.floats(-100, 100),
        data=st.data(),
    )
    def test_shift_invariance_and_sign(self, logits, shift, data):
        logits = np.array(logits)
        y = data.draw(st.integers(0, len(logits) - 1))
        ce = cross_entropy(logits, y)
        assert ce >= 0
        assert abs(cross_entropy(logits + shift, y) - ce) < 1e-12 * max(1.0, abs(shift))


class TestInputGradient:
    def test_linear_closed_form(self):
        rng = np.random.default_rng(5)
        w = rng.normal(scale=0.01, size=(3, 3 * 8 * 8))
        m = linear_model((3, 8, 8), 3, w, np.zeros(3))
        x = rng.uniform(0, 255, (3, 8, 8))
        logits = w @ x.ravel()
        p = np.exp(logits - logits.max())
        p /= p.sum()
        p[2] -= 1.0
        np.testing.assert_allclose(input_gradient(m, x, 2).ravel(), w.T @ p, rtol=1e-10, atol=1e-14)

    def test_finite_differences(self):
        m = small_cnn(6)
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 255, (3, 8, 8))
        g = input_gradient(m, x, 1)
        idx = rng.choice(x.size, size=100, replace=False)
        h = 1e-3
        fd = []
        for k in idx:
            e = np.zeros(x.size)
            e[k] = h
            e = e.reshape(x.shape)
            fd.append((cross_entropy(m.forward(x + e), 1) - cross_entropy(m.forward(x - e), 1)) / (2 * h))
        assert relative_errors(g.ravel()[idx], np.array(fd)).max() < 1e-4

    def test_saddle_mean_zero(self):
        # all-zero dense head -> equal logits; summing over targets cancels
        m = small_cnn(8)
        m.layers[-1].weight[:] = 0.0
        m.layers[-1].bias[:] = 0.0
        x = np.random.default_rng(9).uniform(0, 255, (3, 8, 8))
        total = sum(input_gradient(m, x, y) for y in range(m.num_classes))
        assert np.abs(total).max() < 1e-12


def _loss(model, x, y):
    return float(cross_entropy(model.forward(x), y).sum())


@pytest.mark.parametrize(
    "layers",
    [
        lambda: [Scale(), Conv2d(3, 4, 3), ReLU(), MeanPool(2), Dense(4 * 4 * 4, 3)],
        lambda: [Scale(0.01, 0.3), Dense(3 * 8 * 8, 3)],
        lambda: [Scale(), Conv2d(3, 2, 5), MeanPool(4), Dense(2 * 2 * 2, 3)],
    ],
    ids=["conv-relu-pool-dense", "dense", "conv5-pool4"],
)
def test_parameter_gradients_finite_differences(layers):
    rng = np.random.default_rng(10)
    m = Classifier(layers(), (3, 8, 8), 3)
    for layer in m.layers:
        if hasattr(layer, "init"):
            layer.init(rng)
    x = rng.uniform(0, 255, (4, 3, 8, 8))
    y = rng.integers(0, 3, 4)
    logits = m.forward(x)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(4), y] -= 1
    m.backward(p)
    h = 1e-5
    for layer in m.layers:
        for name in layer.param_names:
            param = getattr(layer, name)
            grad = getattr(layer, "d" + name)
            flat = param.reshape(-1)
            picks = rng.choice(flat.size, size=min(20, flat.size), replace=False)
            fd = []
            for k in picks:
                old = flat[k]
                flat[k] = old + h
                up = _loss(m, x, y)
                flat[k] = old - h
                down = _loss(m, x, y)
                flat[k] = old
                fd.append((up - down) / (2 * h))
            assert relative_errors(grad.reshape(-1)[picks], np.array(fd)).max() < 1e-4, (layer.kind, name)


def test_input_gradient_batch_matches_single():
    m = small_cnn(11)
    rng = np.random.default_rng(12)
    x = rng.uniform(0, 255, (3, 3, 8, 8))
    y = np.array([0, 2, 4])
    _, gb, _ = loss_and_input_gradient(m, x, y)
    for i in range(3):
        np.testing.assert_allclose(gb[i], input_gradient(m, x[i], y[i]), rtol=1e-12, atol=1e-15)


class TestSGD:
    def make(self):
        rng = np.random.default_rng(13)
        feats = rng.normal(size=(200, 2))
        labels = (feats @ np.array([1.0, 0.5]) > 0).astype(int)
        feats += np.where(labels[:, None] == 1, 0.3, -0.3) * np.array([1.0, 0.5])
        data = LabeledDataset(feats.reshape(200, 1, 1, 2), labels, 2)
        model = Classifier([Dense(2, 2)], (1, 1, 2), 2)
        return model, data

    def test_separable_reaches_99(self):
        model, data = self.make()
        sched = TrainSchedule(epochs=50, batch_size=20, base_lr=0.5, warmup_epochs=2, decay_epochs=(40,))
        trained, logs = sgd_train(model, data, sched, np.random.default_rng(0))
        acc = np.mean(trained.predict(data.images) == data.labels)
        assert acc >= 0.99
        losses = [entry.loss for entry in logs]
        for start in range(len(losses) - 5):
            assert min(losses[start + 1 : start + 6]) <= losses[start] + 1e-9

    def test_zero_learning_rate(self):
        model, data = self.make()
        model.layers[0].init(np.random.default_rng(1))
        sched = TrainSchedule(epochs=3, base_lr=0.0, warmup_epochs=0, decay_epochs=())
        trained, _ = sgd_train(model, data, sched, np.random.default_rng(0))
        for a, b in zip(model.parameters(), trained.parameters()):
            assert np.array_equal(a, b)

    def test_warmup_schedule(self):
        model, data = self.make()
        sched = TrainSchedule(epochs=8, base_lr=0.1, warmup_epochs=5, decay_epochs=(6,))
        _, logs = sgd_train(model, data, sched, np.random.default_rng(0))
        for entry in logs[:5]:
            assert abs(entry.lr - 0.1 * entry.epoch / 5) < 1e-15
        assert logs[5].lr == pytest.approx(0.1)
        assert logs[6].lr == pytest.approx(0.01)

    def test_empty_dataset(self):
        model, _ = self.make()
        empty = LabeledDataset(np.zeros((0, 1, 1, 2)), np.zeros(0, int), 2)
        with pytest.raises(InvalidArgument):
            sgd_train(model, empty, TrainSchedule(epochs=1, decay_epochs=()), np.random.default_rng(0))

    @pytest.mark.parametrize(
        "kwargs",
        [{"decay_epochs": (5, 3)}, {"epochs": 4, "decay_epochs": (4,)}, {"decay_factor": 0.0}, {"decay_factor": 1.5}],
    )
    def test_schedule_validation(self, kwargs):
        with pytest.raises(InvalidArgument):
            TrainSchedule(**kwargs)


def test_checkpoint_roundtrip(tmp_path):
    m = small_cnn(14)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    assert path.read_bytes()[:8] == b"PBMODEL1"
    loaded = load_checkpoint(path)
    x = np.random.default_rng(15).uniform(0, 255, (2, 3, 8, 8))
    assert np.array_equal(m.forward(x), loaded.forward(x))
    assert loaded.descriptor() == m.descriptor()
