"""Unit tests for losses, the optimizer, the LR schedule, augmentation,
and the epoch loop."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bregnext import autodiff as ad
from bregnext import builder as bd
from bregnext import training as tr
from bregnext.data import Dataset, synth_blobs


def tiny_dataset(n_per_class=2, classes=4, hw=8, seed=0):
    ds = synth_blobs(classes, n_per_class, seed=seed)
    lo = (64 - hw) // 2
    images = ds.images[:, lo:lo + hw, lo:lo + hw, :]
    return Dataset(images, ds.class_labels, ds.va_labels,
                   num_classes=classes)


def tiny_model(seed=0, hw=8, head="categorical"):
    from bregnext.mappings import MappingKind
    cfg = bd.NetworkConfig(
        name="tiny", stem_channels=8, stem_stride=1,
        stages=(bd.StageConfig(1, 8, False), bd.StageConfig(1, 16, True)),
        head=head, bypass=MappingKind.adaptive())
    return bd.build_network(cfg, seed=seed, input_hw=(hw, hw))


class TestFocalLoss:
    def test_perfect_classification_is_zero(self):
        p = np.eye(4)
        labels = np.arange(4)
        assert tr.focal_loss(p, labels, tr.FocalLossConfig()) == (
            pytest.approx(0.0, abs=1e-12))

    def test_worked_value(self):
        p = np.array([[0.9, 0.1]])
        got = tr.focal_loss(p, np.array([0]),
                            tr.FocalLossConfig(alpha_t=0.25, gamma=2.0))
        expected = 0.25 * 0.01 * -np.log(0.9)
        assert got == pytest.approx(expected, rel=1e-6)
        assert got == pytest.approx(2.634e-4, rel=5e-4)

    def test_reduces_to_cross_entropy(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(16, 8))
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        labels = rng.integers(0, 8, 16)
        got = tr.focal_loss(p, labels,
                            tr.FocalLossConfig(alpha_t=1.0, gamma=0.0))
        ce = -np.mean(np.log(p[np.arange(16), labels]))
        assert got == pytest.approx(ce, abs=1e-7)

    @given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
    @settings(max_examples=80)
    def test_decreasing_in_pt(self, p1, p2):
        lo, hi = sorted((p1, p2))
        if hi - lo < 1e-9:
            return
        cfg = tr.FocalLossConfig()
        f = lambda p: tr.focal_loss(np.array([[p, 1 - p]]), np.array([0]),
                                    cfg)
        assert f(lo) > f(hi)

    def test_label_out_of_range_rejected(self):
        with pytest.raises((ValueError, IndexError)):
            tr.focal_loss(np.full((1, 4), 0.25), np.array([4]),
                          tr.FocalLossConfig())

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        p = rng.dirichlet(np.ones(8), size=32)
        labels = rng.integers(0, 8, 32)
        assert tr.focal_loss(p, labels, tr.FocalLossConfig()) >= 0.0

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            tr.FocalLossConfig(alpha_t=1.5)
        with pytest.raises(ValueError):
            tr.FocalLossConfig(gamma=-1.0)


class TestMseLoss:
    def test_zero_at_equality(self):
        x = np.random.default_rng(0).normal(size=(4, 2))
        assert tr.mse_loss(x, x) == 0.0

    def test_unit_offset(self):
        a = np.zeros((3, 2))
        assert tr.mse_loss(a + 1.0, a) == pytest.approx(1.0)

    def test_worked_value(self):
        pred = np.array([[0.5, 0.0]])
        target = np.array([[0.0, 0.5]])
        assert tr.mse_loss(pred, target) == pytest.approx(0.25)


class TestLrSchedule:
    def test_paper_values(self):
        state = tr.OptimizerState()
        assert tr.lr_at_epoch(0, state) == pytest.approx(1e-4)
        assert tr.lr_at_epoch(10, state) == pytest.approx(8e-5)
        assert tr.lr_at_epoch(25, state) == pytest.approx(6.4e-5)

    def test_piecewise_constant(self):
        state = tr.OptimizerState()
        assert tr.lr_at_epoch(9, state) == tr.lr_at_epoch(0, state)
        assert tr.lr_at_epoch(19, state) == tr.lr_at_epoch(10, state)


class TestAdamStep:
    def _scalar_store(self, value=0.0, weight_decay=False):
        store = ad.ParamStore(dtype=np.float64)
        entry = store.add("w", np.array(value), weight_decay=weight_decay)
        return store, entry

    def test_step_before_backward_rejected(self):
        store, _ = self._scalar_store()
        with pytest.raises(ad.GraphError):
            tr.adam_step(store, tr.OptimizerState(), lr=0.1)

    def test_first_step_magnitude(self):
        store, entry = self._scalar_store(0.0)
        entry.grad = np.array(1.0)
        store.grads_populated = True
        state = tr.OptimizerState(l2_coefficient=0.0)
        tr.adam_step(store, state, lr=0.1)
        assert float(entry.value) == pytest.approx(-0.1, rel=1e-6)

    def test_zero_lr_changes_nothing(self):
        store, entry = self._scalar_store(1.5, weight_decay=True)
        entry.grad = np.array(0.7)
        store.grads_populated = True
        tr.adam_step(store, tr.OptimizerState(), lr=0.0)
        assert float(entry.value) == 1.5

    def test_l2_applies_only_to_flagged_entries(self):
        store = ad.ParamStore(dtype=np.float64)
        w = store.add("w", np.array(2.0), weight_decay=True)
        g = store.add("g", np.array(2.0), weight_decay=False)
        w.grad = np.array(0.0)
        g.grad = np.array(0.0)
        store.grads_populated = True
        tr.adam_step(store, tr.OptimizerState(), lr=1e-4)
        assert float(w.value) != 2.0  # decayed
        assert float(g.value) == 2.0  # untouched

    def test_alpha_clamp(self):
        store = ad.ParamStore(dtype=np.float64)
        a = store.add("u/alpha", np.array(1e-5), clamp_min_abs=1e-3)
        a.grad = np.array(0.0)
        store.grads_populated = True
        tr.adam_step(store, tr.OptimizerState(), lr=0.0)
        assert abs(float(a.value)) >= 1e-3

    def test_alpha_clamp_preserves_sign(self):
        store = ad.ParamStore(dtype=np.float64)
        a = store.add("u/alpha", np.array(-1e-5), clamp_min_abs=1e-3)
        a.grad = np.array(0.0)
        store.grads_populated = True
        tr.adam_step(store, tr.OptimizerState(), lr=0.0)
        assert float(a.value) == pytest.approx(-1e-3)


class TestAugment:
    def test_probability_zero_is_identity(self):
        rng = np.random.default_rng(0)
        img = rng.random((16, 16, 3), dtype=np.float32)
        cfg = tr.AugmentConfig(apply_probability=0.0)
        out = tr.augment(img, cfg, np.random.default_rng(1))
        np.testing.assert_array_equal(out, img)

    def test_double_flip_restores(self):
        rng = np.random.default_rng(0)
        img = rng.random((8, 8, 3), dtype=np.float32)
        np.testing.assert_array_equal(img[:, ::-1][:, ::-1], img)

    def test_output_in_unit_interval_and_same_shape(self):
        rng = np.random.default_rng(2)
        img = rng.random((16, 16, 3), dtype=np.float32)
        cfg = tr.AugmentConfig(apply_probability=1.0)
        for seed in range(10):
            out = tr.augment(img, cfg, np.random.default_rng(seed))
            assert out.shape == img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_invalid_probability_rejected(self):
        with pytest.raises(ValueError):
            tr.AugmentConfig(apply_probability=1.5)


class TestZeroCenter:
    def test_constant_image(self):
        batch = np.full((2, 4, 4, 3), 0.5, dtype=np.float32)
        out = tr.zero_center(batch, [0.5, 0.5, 0.5])
        np.testing.assert_allclose(out, 0.0, atol=1e-7)

    def test_zero_means_identity(self):
        rng = np.random.default_rng(0)
        batch = rng.random((2, 4, 4, 3), dtype=np.float32)
        np.testing.assert_array_equal(tr.zero_center(batch, [0, 0, 0]),
                                      batch)


class TestTrainEpochs:
    def test_zero_epochs_touches_nothing(self):
        model = tiny_model()
        before = {n: model.store[n].value.copy()
                  for n in model.store.names()}
        log = tr.train_epochs(model, tiny_dataset(), epochs=0, seed=0,
                              batch_size=4, state=tr.OptimizerState())
        assert log.records == []
        for n, v in before.items():
            np.testing.assert_array_equal(model.store[n].value, v)

    def test_loss_decreases_over_first_steps(self):
        model = tiny_model(seed=1)
        ds = tiny_dataset(n_per_class=4, seed=2)
        log = tr.train_epochs(model, ds, epochs=5, seed=0, batch_size=16,
                              state=tr.OptimizerState())
        losses = [r.loss for r in log.records]
        assert losses[-1] < losses[0]

    def test_identical_seed_runs_bitwise_equal(self):
        logs = []
        for _ in range(2):
            model = tiny_model(seed=4)
            log = tr.train_epochs(model, tiny_dataset(seed=3), epochs=2,
                                  seed=9, batch_size=4,
                                  state=tr.OptimizerState())
            logs.append(log.to_csv())
        assert logs[0] == logs[1]

    def test_alpha_clamp_holds_after_training(self):
        model = tiny_model(seed=5)
        tr.train_epochs(model, tiny_dataset(seed=1), epochs=2, seed=0,
                        batch_size=4, state=tr.OptimizerState())
        for alpha, _ in model.mapping_values():
            assert abs(alpha) >= 1e-3

    def test_dimensional_head_logs_rmse(self):
        model = tiny_model(seed=6, head="dimensional")
        ds = tiny_dataset(seed=4)
        log = tr.train_epochs(model, ds, epochs=1, loss_kind="mse", seed=0,
                              batch_size=4, state=tr.OptimizerState())
        assert log.metric_name == "rmse"
        assert log.records[0].metric >= 0.0

    def test_empty_dataset_rejected(self):
        model = tiny_model(seed=7)
        empty = Dataset(np.zeros((0, 8, 8, 3)), [], num_classes=4)
        with pytest.raises(ValueError):
            tr.train_epochs(model, empty, epochs=1, seed=0, batch_size=4,
                            state=tr.OptimizerState())

    def test_log_csv_has_alpha_beta_columns(self):
        model = tiny_model(seed=8)
        log = tr.train_epochs(model, tiny_dataset(seed=5), epochs=1, seed=0,
                              batch_size=4, state=tr.OptimizerState())
        header = log.to_csv().splitlines()[0].split(",")
        assert "alpha_1" in header and "beta_1" in header
        assert header[:4] == ["epoch", "lr", "loss", "accuracy"]
