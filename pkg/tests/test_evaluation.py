import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from somn.errors import DimensionMismatch, InsufficientSamples
from somn.evaluation import (
    CSV_HEADER,
    PSNR_SENTINEL,
    EvalReport,
    avg_log_likelihood,
    compare_images,
    em_fit,
)
from somn.imaging import EmpiricalDistribution, GrayImage, darkness_mass
from somn.mixture import MixtureModel, log_mixture_density_many

from conftest import radial_gradient


class TestCompareImages:
    def test_identical(self):
        img = radial_gradient(16)
        r = compare_images(img, img)
        assert r.mae == 0 and r.mse == 0 and math.isinf(r.psnr)
        assert r.darkness_ratio == 1.0
        assert r.to_dict()["psnr"] == PSNR_SENTINEL

    def test_constant_offset(self):
        r = compare_images(GrayImage(np.full((5, 7), 100)), GrayImage(np.full((5, 7), 110)))
        assert (r.mae, r.mse) == (10.0, 100.0)
        assert r.psnr == pytest.approx(10 * math.log10(65025 / 100), rel=1e-12)
        assert r.psnr == pytest.approx(28.13, abs=0.005)

    def test_one_pixel(self):
        r = compare_images(GrayImage.from_flat(2, 2, [0, 0, 0, 0]), GrayImage.from_flat(2, 2, [255, 0, 0, 0]))
        assert (r.mae, r.mse) == (63.75, 16256.25)

    def test_darkness_ratio(self):
        r = compare_images(GrayImage.from_flat(2, 1, [155, 255]), GrayImage.from_flat(2, 1, [205, 205]))
        assert r.darkness_ratio == 1.0
        r = compare_images(GrayImage.from_flat(2, 1, [155, 255]), GrayImage.from_flat(2, 1, [255, 205]))
        assert r.darkness_ratio == 0.5

    def test_white_original_has_no_ratio(self):
        r = compare_images(GrayImage(np.full((2, 2), 255)), GrayImage(np.zeros((2, 2), dtype=int)))
        assert r.darkness_ratio is None

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            compare_images(GrayImage(np.zeros((2, 3), dtype=int)), GrayImage(np.zeros((3, 2), dtype=int)))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.int64, (6, 5), elements=st.integers(0, 255)),
           arrays(np.int64, (6, 5), elements=st.integers(0, 255)))
    def test_symmetric_and_nonnegative(self, a, b):
        ab = compare_images(GrayImage(a), GrayImage(b))
        ba = compare_images(GrayImage(b), GrayImage(a))
        assert ab.mae == ba.mae and ab.mse == ba.mse
        assert ab.mae >= 0 and ab.mse >= 0
        if ab.mse > 0:
            assert math.isfinite(ab.psnr)


class TestEvalReport:
    def test_csv_roundtrip(self):
        r = EvalReport(1.5, 3.25, math.inf, -7.125, 0.98)
        back = EvalReport.from_csv_row(r.to_csv_row())
        assert back == r

    def test_missing_fields(self):
        r = EvalReport(0.0, 1.0, 48.0)
        row = r.to_csv_row()
        assert row.count(",") == 4 and row.endswith(",,")
        assert EvalReport.from_csv_row(row) == r

    def test_header(self):
        assert CSV_HEADER == "mae,mse,psnr,avg_log_likelihood,darkness_ratio"


class TestAvgLogLikelihood:
    def test_at_the_mean(self):
        model = MixtureModel(np.array([[3.0, 4.0]]), np.array([np.eye(2)]), np.array([1.0]))
        dist = EmpiricalDistribution([[3.0, 4.0]])
        assert avg_log_likelihood(model, dist, 10, seed=0) == pytest.approx(-math.log(2 * math.pi), rel=1e-14)

    def test_prefix_stability(self):
        dist = darkness_mass(radial_gradient(32))
        model = MixtureModel(np.array([[16.0, 16.0]]), np.array([60.0 * np.eye(2)]), np.array([1.0]))
        n = 4000
        pts = dist.draw_many(np.random.default_rng(6), 2 * n)
        ll = log_mixture_density_many(pts, model)
        se = ll[:n].std(ddof=1) / math.sqrt(n)
        a = avg_log_likelihood(model, dist, n, seed=6)
        b = avg_log_likelihood(model, dist, 2 * n, seed=6)
        assert a == pytest.approx(ll[:n].mean(), rel=1e-12)
        assert abs(a - b) < 3 * se

    def test_bounded_by_peak(self):
        dist = darkness_mass(radial_gradient(16))
        covs = np.array([np.diag([2.0, 3.0]), np.diag([1.0, 1.0])])
        model = MixtureModel(np.array([[4.0, 4.0], [12.0, 10.0]]), covs, np.array([0.3, 0.7]))
        yy, xx = np.mgrid[0:16:0.05, 0:16:0.05]
        peak = log_mixture_density_many(np.stack([xx.ravel(), yy.ravel()], 1), model).max()
        assert avg_log_likelihood(model, dist, 2000, seed=1) <= peak + 1e-9

    def test_needs_samples(self):
        model = MixtureModel(np.zeros((1, 2)), np.array([np.eye(2)]), np.array([1.0]))
        with pytest.raises(ValueError):
            avg_log_likelihood(model, EmpiricalDistribution([[0.0, 0.0]]), 0)


class TestEmFit:
    def test_single_component_closed_form(self, rng):
        X = rng.normal(size=(500, 2)) * [3.0, 1.0] + [5.0, -2.0]
        m = em_fit(X, 1, 1)
        np.testing.assert_allclose(m.means[0], X.mean(axis=0), rtol=1e-13)
        np.testing.assert_allclose(m.covs[0], np.cov(X.T, bias=True), rtol=1e-12)
        assert m.weights.tolist() == [1.0]

    def test_single_component_floored(self, rng):
        X = rng.normal(size=(200, 2)) * 0.1
        m = em_fit(X, 1, 1, covariance_floor=0.25)
        assert np.linalg.eigvalsh(m.covs[0]).min() >= 0.25

    def test_two_clusters(self, rng):
        a = rng.normal(size=(400, 2)) + [10.0, 10.0]
        b = rng.normal(size=(400, 2)) + [30.0, 10.0]
        m = em_fit(np.concatenate([a, b]), 2, 50, seed=3)
        for c in (a.mean(axis=0), b.mean(axis=0)):
            assert np.min(np.linalg.norm(m.means - c, axis=1)) <= 0.5

    def test_monotone_history(self, rng):
        X = np.concatenate([rng.normal(size=(300, 2)) * s + c
                            for s, c in ((1.0, [0, 0]), (2.0, [6, 1]), (0.5, [2, 7]))])
        _, hist = em_fit(X, 3, 50, seed=0, return_history=True)
        assert len(hist) == 50
        assert hist[-1] >= hist[0]
        assert all(b >= a - 1e-9 * max(1, abs(a)) for a, b in zip(hist, hist[1:]))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.floats(0.05, 3.0))
    def test_monotone_property_with_floor(self, seed, K, floor):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(60, 2)) * rng.uniform(0.05, 5, size=2)
        _, hist = em_fit(X, K, 15, seed=seed, covariance_floor=floor, return_history=True)
        assert all(b >= a - 1e-9 * max(1, abs(a)) for a, b in zip(hist, hist[1:]))

    def test_deterministic(self, rng):
        X = rng.normal(size=(100, 2))
        assert em_fit(X, 3, 10, seed=4) == em_fit(X, 3, 10, seed=4)

    def test_insufficient(self):
        with pytest.raises(InsufficientSamples):
            em_fit(np.zeros((2, 2)), 3, 5)

    def test_iterations_positive(self):
        with pytest.raises(ValueError):
            em_fit(np.zeros((4, 2)), 1, 0)
