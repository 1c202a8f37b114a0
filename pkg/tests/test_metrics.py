"""Unit tests for evaluation metrics against brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bregnext import metrics as mt


def oracle_cc(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cov = np.mean((a - a.mean()) * (b - b.mean()))
    return cov / (a.std() * b.std())


def oracle_ccc(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    rho = oracle_cc(a, b)
    s1, s2 = a.std(), b.std()
    return 2 * rho * s1 * s2 / (s1 ** 2 + s2 ** 2 + (a.mean() - b.mean()) ** 2)


series = arrays(np.float64, st.integers(2, 64),
                elements=st.floats(-1, 1, width=32))


class TestRmse:
    def test_identical_series(self):
        x = np.linspace(-1, 1, 9)
        assert mt.rmse(x, x) == 0.0

    def test_constant_offset(self):
        x = np.zeros(5)
        assert mt.rmse(x + 0.5, x) == pytest.approx(0.5)

    def test_worked_value(self):
        assert mt.rmse([0.0, 1.0], [1.0, 0.0]) == pytest.approx(1.0)

    def test_empty_rejected(self):
        with pytest.raises((mt.DegenerateSeriesError, ValueError)):
            mt.rmse([], [])


class TestCc:
    def test_positive_affine_invariance(self):
        gt = np.array([0.1, -0.4, 0.7, 0.3])
        assert mt.cc(2.0 * gt + 0.1, gt) == pytest.approx(1.0)

    def test_sign_flip(self):
        gt = np.array([0.1, -0.4, 0.7])
        assert mt.cc(-gt, gt) == pytest.approx(-1.0)

    def test_matches_oracle(self):
        pred = np.array([1.0, 2.0, 3.0, 4.0])
        gt = np.array([1.0, 2.0, 3.0, 5.0])
        assert mt.cc(pred, gt) == pytest.approx(oracle_cc(pred, gt),
                                                abs=1e-9)

    def test_zero_variance_rejected(self):
        with pytest.raises(mt.DegenerateSeriesError):
            mt.cc(np.ones(4), np.array([1.0, 2.0, 3.0, 4.0]))


class TestCcc:
    def test_identical_series(self):
        x = np.array([0.2, -0.5, 0.9])
        assert mt.ccc(x, x) == pytest.approx(1.0)

    def test_worked_shifted_example(self):
        gt = np.array([-1.0, 0.0, 1.0])
        assert mt.ccc(gt + 1.0, gt) == pytest.approx(4.0 / 7.0, abs=1e-9)

    def test_shift_penalized_below_cc(self):
        gt = np.array([-1.0, 0.0, 1.0])
        pred = gt + 1.0
        assert mt.ccc(pred, gt) < mt.cc(pred, gt)

    def test_not_affine_invariant(self):
        gt = np.array([-0.5, 0.0, 0.5])
        assert mt.ccc(2.0 * gt, gt) != pytest.approx(1.0, abs=1e-3)

    @given(series, series)
    @settings(max_examples=150)
    def test_attenuates_cc(self, a, b):
        n = min(len(a), len(b))
        a, b = a[:n], b[:n]
        if a.std() < 1e-9 or b.std() < 1e-9:
            return
        assert abs(mt.ccc(a, b)) <= abs(mt.cc(a, b)) + 1e-12
        assert -1.0 - 1e-12 <= mt.ccc(a, b) <= 1.0 + 1e-12


class TestSagr:
    def test_all_agree(self):
        assert mt.sagr([0.5, -0.2], [0.1, -0.9]) == 1.0

    def test_half_agree(self):
        assert mt.sagr([0.5, -0.2], [-0.1, -0.9]) == 0.5

    def test_zero_is_its_own_sign(self):
        assert mt.sagr([0.0], [0.5]) == 0.0
        assert mt.sagr([0.0], [0.0]) == 1.0

    def test_empty_rejected(self):
        with pytest.raises((mt.DegenerateSeriesError, ValueError)):
            mt.sagr([], [])


class TestOracleSweep:
    def test_thousand_random_series(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            n = int(rng.integers(2, 65))
            pred = rng.uniform(-1, 1, n)
            gt = rng.uniform(-1, 1, n)
            if pred.std() < 1e-12 or gt.std() < 1e-12:
                continue
            assert mt.rmse(pred, gt) == pytest.approx(
                np.sqrt(np.mean((pred - gt) ** 2)), abs=1e-9)
            assert mt.cc(pred, gt) == pytest.approx(oracle_cc(pred, gt),
                                                    abs=1e-9)
            assert mt.ccc(pred, gt) == pytest.approx(oracle_ccc(pred, gt),
                                                     abs=1e-9)
            agree = np.mean(np.sign(pred) == np.sign(gt))
            assert mt.sagr(pred, gt) == pytest.approx(agree, abs=1e-12)


class TestClassReport:
    def test_perfect_predictions(self):
        gt = np.array([0, 1, 2, 3, 0, 1])
        rep = mt.class_report(gt, gt, 4)
        assert rep.accuracy == 1.0
        np.testing.assert_array_equal(rep.confusion,
                                      np.diag([2, 2, 1, 1]))
        assert rep.macro_f1 == pytest.approx(1.0)

    def test_single_class_predictor(self):
        gt = np.tile(np.arange(4), 4)
        pred = np.zeros(16, dtype=int)
        rep = mt.class_report(pred, gt, 4)
        assert rep.recall[0] == pytest.approx(1.0)
        assert rep.precision[0] == pytest.approx(0.25)

    def test_confusion_row_sums(self):
        rng = np.random.default_rng(1)
        gt = rng.integers(0, 5, 100)
        pred = rng.integers(0, 5, 100)
        rep = mt.class_report(pred, gt, 5)
        np.testing.assert_array_equal(rep.confusion.sum(axis=1),
                                      np.bincount(gt, minlength=5))
        assert rep.confusion.sum() == 100

    def test_absent_class_flagged(self):
        gt = np.array([0, 0, 1])
        pred = np.array([0, 1, 1])
        rep = mt.class_report(pred, gt, 3)
        assert 2 in rep.degenerate_classes
        assert rep.recall[2] == 0.0

    def test_macro_f1_bounded_by_max(self):
        rng = np.random.default_rng(2)
        gt = rng.integers(0, 4, 60)
        pred = rng.integers(0, 4, 60)
        rep = mt.class_report(pred, gt, 4)
        assert rep.macro_f1 <= max(rep.f1) + 1e-12

    def test_index_out_of_range_rejected(self):
        with pytest.raises((ValueError, IndexError)):
            mt.class_report(np.array([0, 5]), np.array([0, 1]), 4)


class TestHistogramAndReport:
    def test_identical_series_mass_at_zero(self):
        x = np.linspace(-1, 1, 20)
        centers, counts = mt.error_histogram(x, x)
        assert counts.sum() == 20
        nz = np.nonzero(counts)[0]
        assert len(nz) == 1 and abs(centers[nz[0]]) < 0.06

    def test_dimensional_report_schema(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(-1, 1, (50, 2))
        pred = gt + rng.normal(0, 0.1, (50, 2))
        rep = mt.dimensional_report(gt, pred)
        headline = [k for k in rep if k != "rmse_total"]
        assert len(headline) == 8
        for dim in ("valence", "arousal"):
            for metric in ("rmse", "cc", "ccc", "sagr"):
                assert f"{metric}_{dim}" in rep
