import numpy as np
import pytest

from condiff.classifier import (
    ClassifierModel,
    FactoredClassifier,
    OfflineDataset,
    calibrate_temperature,
    expected_calibration_error,
    sample_offline_dataset,
    train_mle,
)
from condiff.sde import ConfigurationError, RngStream
from condiff.worlds import make_world_w1


def uniform_model(n_classes=4, input_dim=1, seed=0):
    model = ClassifierModel(input_dim, n_classes, np.random.default_rng(seed))
    model.net.weights[-1][:] = 0.0
    model.net.biases[-1][:] = 0.0
    return model


class TestDataset:
    def test_split_disjoint(self):
        rng = np.random.default_rng(0)
        ds = OfflineDataset(np.zeros(100, int), rng.standard_normal((100, 2)), rng.integers(0, 3, 100))
        tr, va = ds.split(0.8, rng)
        assert len(tr) == 80 and len(va) == 20
        all_x = np.concatenate([tr.xs, va.xs])
        assert np.unique(all_x, axis=0).shape[0] == 100

    def test_text_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        ds = OfflineDataset(
            rng.integers(0, 2, 10), rng.standard_normal((10, 2)), rng.integers(0, 2, (10, 2))
        )
        path = tmp_path / "data.txt"
        ds.save_text(path)
        back = OfflineDataset.load_text(path)
        assert np.array_equal(back.contexts, ds.contexts)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.xs, ds.xs)

    def test_sampled_dataset_label_frequencies(self):
        world = make_world_w1(steps=64)
        ds = sample_offline_dataset(world, 4000, RngStream(5))
        assert ds.labels.shape == (4000, 1)
        # labels should roughly follow the oracle pushforward: outer bins dominate
        freq = np.bincount(ds.labels[:, 0], minlength=4) / 4000
        assert freq[0] > 0.25 and freq[3] > 0.2
        assert freq[1] < 0.2 and freq[2] < 0.2


class TestClassifierModel:
    def test_probs_normalized_and_uniform_model(self):
        model = uniform_model()
        x = np.random.default_rng(2).standard_normal((20, 1))
        p = model.probs(x)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-8)
        assert np.allclose(model.log_prob_of(2, x), np.log(1 / 4), atol=1e-12)

    def test_temperature_preserves_argmax(self):
        model = ClassifierModel(1, 4, np.random.default_rng(3))
        x = np.random.default_rng(4).standard_normal((50, 1))
        before = model.predict(x)
        for tau in (0.1, 0.7, 3.0, 15.0):
            model.temperature = tau
            assert np.array_equal(model.probs(x).argmax(axis=1), before)

    def test_input_gradient_matches_fd(self):
        model = ClassifierModel(2, 3, np.random.default_rng(5))
        model.temperature = 1.7
        rng = np.random.default_rng(6)
        x = rng.standard_normal((5, 2))
        y = rng.integers(0, 3, 5)
        _, grad = model.log_prob_and_grad(y, x)
        h = 1e-6
        for j in range(2):
            e = np.zeros_like(x)
            e[:, j] = h
            fd = (model.log_prob_of(y, x + e) - model.log_prob_of(y, x - e)) / (2 * h)
            assert np.max(np.abs(grad[:, j] - fd) / np.maximum(np.abs(fd), 1e-6)) <= 1e-5

    def test_factored_joint_is_sum_of_axes(self):
        m1 = uniform_model(n_classes=2, seed=7)
        m2 = uniform_model(n_classes=2, seed=8)
        fact = FactoredClassifier([m1, m2])
        x = np.random.default_rng(9).standard_normal((10, 1))
        joint = fact.log_prob_of(np.tile([1, 0], (10, 1)), x)
        assert np.allclose(joint, np.log(1 / 4), atol=1e-12)
        separate = m1.log_prob_of(1, x) + m2.log_prob_of(0, x)
        assert np.allclose(np.exp(joint), np.exp(separate), atol=1e-12)

    def test_factored_gradient_sums(self):
        rng = np.random.default_rng(10)
        m1 = ClassifierModel(2, 2, np.random.default_rng(11))
        m2 = ClassifierModel(2, 2, np.random.default_rng(12))
        fact = FactoredClassifier([m1, m2])
        x = rng.standard_normal((4, 2))
        labels = rng.integers(0, 2, (4, 2))
        v, g = fact.log_prob_and_grad(x, None, labels)
        v1, g1 = m1.log_prob_and_grad(labels[:, 0], x)
        v2, g2 = m2.log_prob_and_grad(labels[:, 1], x)
        assert np.allclose(v, v1 + v2) and np.allclose(g, g1 + g2)


class TestTraining:
    def test_zero_epochs_leaves_model_unchanged(self):
        model = ClassifierModel(1, 3, np.random.default_rng(13))
        before = model.param_vector().flatten()
        ds = OfflineDataset(np.zeros(10, int), np.random.default_rng(14).standard_normal((10, 1)), np.zeros(10, int))
        train_mle(model, ds, np.random.default_rng(15), epochs=0)
        assert np.array_equal(model.param_vector().flatten(), before)

    def test_single_class_degenerate_mle(self):
        rng = np.random.default_rng(16)
        xs = rng.standard_normal((200, 1))
        ds = OfflineDataset(np.zeros(200, int), xs, np.full(200, 2))
        model = ClassifierModel(1, 4, np.random.default_rng(17), hidden=(16,))
        losses = train_mle(
            model, ds, np.random.default_rng(18), epochs=150, batch_size=64, lr=3e-3, weight_decay=0.0
        )
        assert losses[-1] < 0.05
        assert model.probs(xs)[:, 2].mean() > 0.9

    def test_loss_nonincreasing_up_to_noise(self):
        world = make_world_w1(steps=32)
        ds = sample_offline_dataset(world, 2000, RngStream(19), init_law="gaussian")
        model = ClassifierModel(1, 4, np.random.default_rng(20), hidden=(32, 32))
        losses = train_mle(model, ds, np.random.default_rng(21), epochs=20)
        assert losses[-1] < losses[0]
        # allow stochastic wiggle, forbid sustained increase
        assert all(losses[i + 1] <= losses[i] * 1.15 for i in range(len(losses) - 1))

    def test_logistic_rule_boundary_recovery(self):
        rng = np.random.default_rng(22)
        n = 10_000
        xs = rng.uniform(-3, 3, (n, 1))
        true_boundary = 0.6
        p1 = 1.0 / (1.0 + np.exp(-4.0 * (xs[:, 0] - true_boundary)))
        ys = (rng.uniform(size=n) < p1).astype(int)
        ds = OfflineDataset(np.zeros(n, int), xs, ys)
        model = ClassifierModel(1, 2, np.random.default_rng(23), hidden=(32,))
        train_mle(model, ds, np.random.default_rng(24), epochs=25)
        grid = np.linspace(-3, 3, 1201).reshape(-1, 1)
        p = model.probs(grid)[:, 1]
        crossing = grid[np.argmin(np.abs(p - 0.5)), 0]
        assert abs(crossing - true_boundary) < 0.1

    def test_statistical_error_decreases_with_sample_size(self):
        world = make_world_w1(steps=32)
        oracle = world.oracles[0]
        holdout = sample_offline_dataset(world, 4000, RngStream(33), init_law="gaussian")
        errs = []
        for i, n in enumerate((250, 1000, 4000)):
            ds = sample_offline_dataset(world, n, RngStream(40 + i), init_law="gaussian")
            model = ClassifierModel(1, 4, np.random.default_rng(50 + i), hidden=(32, 32))
            train_mle(model, ds, np.random.default_rng(60 + i), epochs=40)
            p_hat = model.probs(holdout.xs)
            p_true = oracle.probs(holdout.xs)
            errs.append(float(np.abs(p_hat - p_true).sum(axis=1).mean()))
        assert errs[0] > errs[1] > errs[2]


class TestCalibration:
    @staticmethod
    def synthetic_model_with_logits(logit_fn, n=20_000, seed=70):
        """Wrap fixed synthetic logits in a trivial linear model for calibration."""
        rng = np.random.default_rng(seed)
        xs = rng.uniform(-3, 3, (n, 1))
        logits = logit_fn(xs)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        ys = (rng.uniform(size=n)[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
        return xs, ys.clip(0, logits.shape[1] - 1), logits

    def test_perfectly_calibrated_logits_give_tau_near_one(self):
        def true_logits(xs):
            z = np.zeros((len(xs), 2))
            z[:, 1] = 2.0 * xs[:, 0]
            return z

        xs, ys, logits = self.synthetic_model_with_logits(true_logits)

        class Fixed(ClassifierModel):
            def logits(self, x, contexts=None):
                return true_logits(np.atleast_2d(x))

        model = Fixed(1, 2, np.random.default_rng(0))
        report = calibrate_temperature(model, OfflineDataset(np.zeros(len(xs), int), xs, ys))
        assert 0.95 <= report.temperature <= 1.05
        assert report.nll_after <= report.nll_before + 1e-12

    def test_doubled_logits_fit_tau_two(self):
        def doubled(xs):
            z = np.zeros((len(xs), 2))
            z[:, 1] = 2.0 * xs[:, 0]
            return 2.0 * z

        def true_logits(xs):
            z = np.zeros((len(xs), 2))
            z[:, 1] = 2.0 * xs[:, 0]
            return z

        rng = np.random.default_rng(71)
        xs = rng.uniform(-3, 3, (20_000, 1))
        lt = true_logits(xs)
        p = np.exp(lt - lt.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        ys = (rng.uniform(size=len(xs)) > p[:, 0]).astype(int)

        class Fixed(ClassifierModel):
            def logits(self, x, contexts=None):
                return doubled(np.atleast_2d(x))

        model = Fixed(1, 2, np.random.default_rng(1))
        report = calibrate_temperature(model, OfflineDataset(np.zeros(len(xs), int), xs, ys))
        assert abs(report.temperature - 2.0) / 2.0 < 0.10
        assert report.ece_after <= report.ece_before

    def test_single_sample_validation_warns_and_stays_finite(self):
        model = ClassifierModel(1, 3, np.random.default_rng(2))
        ds = OfflineDataset(np.zeros(1, int), np.array([[0.5]]), np.array([model.predict(np.array([[0.5]]))[0]]))
        with pytest.warns(RuntimeWarning):
            report = calibrate_temperature(model, ds)
        assert np.isfinite(report.temperature) and report.temperature > 0

    def test_empty_validation_rejected(self):
        model = ClassifierModel(1, 3, np.random.default_rng(3))
        with pytest.raises(ConfigurationError):
            calibrate_temperature(model, OfflineDataset(np.zeros(0, int), np.zeros((0, 1)), np.zeros(0, int)))

    def test_ece_perfect_predictions(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = np.array([0, 1])
        assert expected_calibration_error(probs, labels) < 1e-12
