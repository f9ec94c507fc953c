"""Tests for Wasserstein distances on the torus."""

import math

import numpy as np
import pytest

from fleming_viot_qsd.errors import DimensionMismatchError, InvalidInputError, TransportSizeError
from fleming_viot_qsd.geometry import RhoMetric
from fleming_viot_qsd.transport import (
    DiscreteMeasure,
    alpha,
    lp_oracle,
    w1,
    w1_assignment,
    w1_circle,
    w1_circle_weights,
    w_rho,
)


def _random_measure(gen, n_atoms, dimension=1):
    return DiscreteMeasure.from_weights(gen.random((n_atoms, dimension)), gen.random(n_atoms) + 0.05)


class TestDiscreteMeasure:
    """Test construction and validation of discrete measures."""

    def test_empirical_weights(self):
        """pi(x) puts mass 1/N on every point."""
        mu = DiscreteMeasure.empirical(np.array([0.1, 0.2, 0.7, 0.9]))

        assert mu.n_atoms == 4
        assert mu.dimension == 1
        np.testing.assert_allclose(mu.weights, 0.25)
        assert mu.is_uniform
        assert mu.cumulative_weights() is None

    def test_from_weights_drops_empty_atoms(self):
        """Zero-weight atoms are removed and the rest normalized."""
        mu = DiscreteMeasure.from_weights(np.array([0.1, 0.5, 0.9]), np.array([1.0, 0.0, 3.0]))

        assert mu.n_atoms == 2
        np.testing.assert_allclose(mu.weights, [0.25, 0.75])
        np.testing.assert_allclose(mu.cumulative_weights(), [0.25, 1.0])

    def test_points_are_wrapped(self):
        """Atoms outside [0, 1) are reduced mod 1."""
        mu = DiscreteMeasure.empirical(np.array([1.25]))

        assert mu.points[0, 0] == pytest.approx(0.25)

    def test_weights_must_sum_to_one(self):
        """Unnormalized weights are rejected by the constructor."""
        with pytest.raises(InvalidInputError):
            DiscreteMeasure(np.array([[0.1], [0.2]]), np.array([0.5, 0.6]))

    def test_weight_count_must_match(self):
        """One weight per atom."""
        with pytest.raises(DimensionMismatchError):
            DiscreteMeasure(np.array([[0.1], [0.2]]), np.array([1.0]))


class TestCircularW1:
    """Test the exact circular W1."""

    def test_two_diracs(self):
        """W1 between Dirac masses is their torus distance."""
        mu = DiscreteMeasure.empirical(np.array([0.1]))
        nu = DiscreteMeasure.empirical(np.array([0.9]))

        assert w1_circle(mu, nu) == pytest.approx(0.2)

    def test_atoms_away_from_zero(self):
        """The arc from 0 to the first atom counts like any other."""
        mu = DiscreteMeasure.empirical(np.array([0.5]))
        nu = DiscreteMeasure.empirical(np.array([0.9]))

        assert w1_circle(mu, nu) == pytest.approx(0.4)
        assert w1_circle(mu, nu) == pytest.approx(lp_oracle(mu, nu), abs=1e-12)

    def test_weighted_atoms_away_from_zero(self):
        """Weighted supports bunched far from 0 still match the LP."""
        gen = np.random.default_rng(11)
        mu = DiscreteMeasure.from_weights(0.6 + 0.3 * gen.random(8), gen.random(8) + 0.1)
        nu = DiscreteMeasure.from_weights(0.55 + 0.4 * gen.random(5), gen.random(5) + 0.1)

        assert w1_circle(mu, nu) == pytest.approx(lp_oracle(mu, nu), abs=1e-9)

    def test_identical_measures(self):
        """W1(mu, mu) = 0."""
        mu = _random_measure(np.random.default_rng(0), 12)

        assert w1_circle(mu, mu) == pytest.approx(0.0, abs=1e-15)

    def test_uniform_shift(self):
        """Rotating N equally spaced atoms by half a gap costs half a gap."""
        n = 10
        base = np.arange(n) / n
        mu = DiscreteMeasure.empirical(base)
        nu = DiscreteMeasure.empirical(base + 0.5 / n)

        assert w1_circle(mu, nu) == pytest.approx(0.5 / n)

    def test_matches_lp_oracle(self):
        """The circular formula agrees with the exact LP on random pairs."""
        gen = np.random.default_rng(1)
        for _ in range(40):
            mu = _random_measure(gen, int(gen.integers(1, 30)))
            nu = _random_measure(gen, int(gen.integers(1, 30)))
            assert w1_circle(mu, nu) == pytest.approx(lp_oracle(mu, nu), abs=1e-9)

    def test_symmetric(self):
        """W1 is symmetric."""
        gen = np.random.default_rng(2)
        mu, nu = _random_measure(gen, 7), _random_measure(gen, 9)

        assert w1_circle(mu, nu) == pytest.approx(w1_circle(nu, mu))

    def test_rejects_higher_dimension(self):
        """The circular formula is d = 1 only."""
        mu = DiscreteMeasure.empirical(np.zeros((2, 2)))

        with pytest.raises(DimensionMismatchError):
            w1_circle(mu, mu)

    def test_grid_weights_version(self):
        """w1_circle_weights equals w1_circle on cell-center atoms."""
        gen = np.random.default_rng(3)
        n = 32
        a = gen.random(n)
        b = gen.random(n)
        a, b = a / a.sum(), b / b.sum()
        centers = (np.arange(n) + 0.5) / n

        expected = w1_circle(DiscreteMeasure(centers, a), DiscreteMeasure(centers, b))

        assert w1_circle_weights(a, b) == pytest.approx(expected, abs=1e-12)


class TestOtherTransport:
    """Test the LP oracle, assignment solve and W_rho."""

    def test_lp_size_guard(self):
        """The exact solver refuses supports above its guard."""
        gen = np.random.default_rng(4)
        mu, nu = _random_measure(gen, 20), _random_measure(gen, 20)

        with pytest.raises(TransportSizeError):
            lp_oracle(mu, nu, max_atoms=30)

    def test_assignment_matches_lp(self):
        """For equal-size empirical measures the assignment solve is exact."""
        gen = np.random.default_rng(5)
        x, y = gen.random((15, 2)), gen.random((15, 2))

        expected = lp_oracle(DiscreteMeasure.empirical(x), DiscreteMeasure.empirical(y))

        assert w1_assignment(x, y) == pytest.approx(expected, abs=1e-9)

    def test_w1_dispatches_by_dimension(self):
        """w1 uses the LP in d > 1."""
        gen = np.random.default_rng(6)
        mu, nu = _random_measure(gen, 5, 2), _random_measure(gen, 6, 2)

        assert w1(mu, nu) == pytest.approx(lp_oracle(mu, nu))

    def test_w_rho_exact_within_sandwich(self):
        """Exact W_rho lies within [beta W1, W1]."""
        gen = np.random.default_rng(7)
        metric = RhoMetric(a=2.0)
        mu, nu = _random_measure(gen, 10), _random_measure(gen, 10)

        estimate = w_rho(metric, mu, nu)
        dist = w1_circle(mu, nu)

        assert estimate.exact
        assert metric.beta * dist - 1e-12 <= estimate.value <= dist + 1e-12

    def test_w_rho_falls_back_to_interval(self):
        """Large d = 1 supports give the certified interval."""
        gen = np.random.default_rng(8)
        metric = RhoMetric(a=1.0)
        mu, nu = _random_measure(gen, 150), _random_measure(gen, 150)

        estimate = w_rho(metric, mu, nu)

        assert not estimate.exact
        assert estimate.lower == pytest.approx(metric.beta * estimate.upper)

    def test_w_rho_refuses_large_higher_dimension(self):
        """No interval is available in d > 1."""
        gen = np.random.default_rng(9)
        mu, nu = _random_measure(gen, 150, 2), _random_measure(gen, 150, 2)

        with pytest.raises(TransportSizeError):
            w_rho(RhoMetric(dimension=2), mu, nu)


class TestAlpha:
    """Test the empirical-measure rate alpha(N)."""

    def test_table(self):
        """alpha for d = 1, 2 and 3."""
        assert alpha(10_000, 1) == pytest.approx(0.01)
        assert alpha(1, 2) == pytest.approx(math.log(2))
        assert alpha(1000, 3) == pytest.approx(0.1)

    def test_rejects_zero_particles(self):
        """N must be positive."""
        with pytest.raises(InvalidInputError):
            alpha(0, 1)
