import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from calens.core import InvalidGrid, SampleGrid
from calens.synthdata import (
    InvalidCount,
    analytic_probability,
    generate_blob2d,
    generate_gaussian1d,
    simulate_annotation,
)


def _quadrature_posterior(x, half_width=1e-4):
    """P(class 1 | x in a tiny interval), from integrated densities."""
    q1 = integrate.quad(lambda t: stats.norm.pdf(t, 1, 1), x - half_width, x + half_width)[0]
    q0 = integrate.quad(lambda t: stats.norm.pdf(t, -1, 1), x - half_width, x + half_width)[0]
    return q1 / (q0 + q1)


@pytest.mark.parametrize(
    "x, expected",
    [(0.0, 0.5), (1.0, 0.880797), (-3.0, 0.002473)],
)
def test_analytic_probability_values(x, expected):
    assert analytic_probability(x) == pytest.approx(expected, abs=5e-7)
    assert _quadrature_posterior(x) == pytest.approx(analytic_probability(x), abs=1e-6)


@given(st.floats(-30, 30))
def test_analytic_probability_matches_density_ratio(x):
    p1, p0 = stats.norm.pdf(x, 1, 1), stats.norm.pdf(x, -1, 1)
    if p0 + p1 > 1e-300:
        assert analytic_probability(x) == pytest.approx(p1 / (p0 + p1), rel=1e-9, abs=1e-300)


@given(st.floats(-20, 20), st.floats(0.0, 5.0))
def test_analytic_probability_symmetric_and_monotone(x, dx):
    assert analytic_probability(-x) == pytest.approx(1.0 - analytic_probability(x), abs=1e-12)
    assert analytic_probability(x + dx) >= analytic_probability(x)


def test_analytic_probability_rejects_nonfinite():
    with pytest.raises(ValueError):
        analytic_probability(float("inf"))


class TestGaussian1D:
    def test_balance(self):
        ds = generate_gaussian1d(10000, seed=7)
        assert 0.48 <= ds.labels.mean() <= 0.52

    def test_minimum_size(self):
        assert len(generate_gaussian1d(2, seed=0)) == 2
        with pytest.raises(InvalidCount):
            generate_gaussian1d(1, seed=0)

    def test_deterministic(self):
        a, b = generate_gaussian1d(500, 3), generate_gaussian1d(500, 3)
        assert a.xs.tobytes() == b.xs.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert generate_gaussian1d(500, 4).xs.tobytes() != a.xs.tobytes()

    def test_class_conditional_moments(self):
        ds = generate_gaussian1d(40000, seed=11)
        for label, mean in ((0, -1.0), (1, 1.0)):
            x = ds.xs[ds.labels == label]
            assert x.mean() == pytest.approx(mean, abs=0.03)
            assert x.std() == pytest.approx(1.0, abs=0.03)

    def test_binned_rate_tracks_probability(self):
        ds = generate_gaussian1d(200000, seed=5)
        edges = np.linspace(-2, 2, 9)
        for lo, hi in zip(edges[:-1], edges[1:]):
            sel = (ds.xs >= lo) & (ds.xs < hi)
            n = sel.sum()
            expected = ds.probabilities[sel].mean()
            # 5 sigma binomial band
            assert abs(ds.labels[sel].mean() - expected) < 5 * np.sqrt(0.25 / n)


class TestBlob2D:
    def test_single_image(self):
        ds = generate_blob2d(1, (32, 32), seed=0)
        frac = ds.ground_truth[0].values.mean()
        assert len(ds) == 1
        assert 0 < frac < 1
        assert ds.images[0].shape == (32, 32)

    def test_deterministic(self):
        a = generate_blob2d(3, SampleGrid((16, 24)), seed=2)
        b = generate_blob2d(3, SampleGrid((16, 24)), seed=2)
        for x, y in zip(a.images, b.images):
            assert x.tobytes() == y.tobytes()
        assert all(m == n for m, n in zip(a.ground_truth, b.ground_truth))

    def test_mean_foreground_fraction(self):
        ds = generate_blob2d(100, (32, 32), seed=1)
        fracs = [g.values.mean() for g in ds.ground_truth]
        assert 0.05 <= np.mean(fracs) <= 0.5
        assert min(fracs) > 0

    def test_ellipse_parameters_in_range(self):
        ds = generate_blob2d(50, (32, 40), seed=9)
        ext = np.array([32, 40])
        c, r = ds.ellipses[:, :2], ds.ellipses[:, 2:]
        assert (c >= ext / 4).all() and (c <= 3 * ext / 4).all()
        assert (r >= ext / 8).all() and (r <= ext / 4).all()

    def test_prior_and_posterior(self):
        ds = generate_blob2d(2, (32, 32), seed=4)
        for gt, prior, pm, img in zip(ds.ground_truth, ds.priors, ds.probability_maps(), ds.images):
            assert prior == gt.values.mean()
            expected = prior * stats.norm.pdf(img, 1, 1) / (
                prior * stats.norm.pdf(img, 1, 1) + (1 - prior) * stats.norm.pdf(img, -1, 1)
            )
            np.testing.assert_allclose(pm, expected, rtol=1e-9)

    @pytest.mark.parametrize("grid", [(32,), (7, 32), (8, 8, 8)])
    def test_invalid_grid(self, grid):
        with pytest.raises(InvalidGrid):
            generate_blob2d(1, grid, seed=0)

    def test_annotation_is_imperfect_but_close(self):
        ds = generate_blob2d(10, (32, 32), seed=3)
        ann = simulate_annotation(ds, seed=1)
        overlaps = [(a.values & g.values).sum() / g.values.sum() for a, g in zip(ann, ds.ground_truth)]
        assert min(overlaps) > 0.4
        assert any(a != g for a, g in zip(ann, ds.ground_truth))
