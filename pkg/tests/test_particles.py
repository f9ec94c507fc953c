"""Tests for the particle kernel, chain runner and coupled systems."""

import math

import numpy as np
import pytest
from scipy import stats

from fleming_viot_qsd.errors import DimensionMismatchError, InvalidInputError
from fleming_viot_qsd.geometry import RhoMetric, minimal_image
from fleming_viot_qsd.gridref import GridDensity
from fleming_viot_qsd.kernel import StepParams
from fleming_viot_qsd.model import make_builtin
from fleming_viot_qsd.particles import (
    CoupledPair,
    CouplingMode,
    DistanceObserver,
    KillProbabilityObserver,
    ParticleConfiguration,
    ResurrectionObserver,
    SnapshotObserver,
    coupled_noise,
    coupled_step,
    initial_configuration,
    mean_rho_per_particle,
    particle_step,
    run_chain,
    simulate_killed_chains,
    slot_marginal_ks,
)
from fleming_viot_qsd.rng import RngStream
from fleming_viot_qsd.transport import DiscreteMeasure


@pytest.fixture
def demo_params():
    return StepParams(0.05, make_builtin("demo"))


class TestParticleConfiguration:
    """Test configuration construction."""

    def test_one_dimensional_input_is_reshaped(self):
        """A flat array becomes an (N, 1) configuration."""
        cfg = ParticleConfiguration(np.array([0.1, 1.2, -0.3]))

        assert cfg.points.shape == (3, 1)
        np.testing.assert_allclose(cfg.points[:, 0], [0.1, 0.2, 0.7])
        assert cfg.n_particles == 3
        assert cfg.dimension == 1

    def test_empty_configuration_rejected(self):
        """N must be at least one."""
        with pytest.raises(InvalidInputError):
            ParticleConfiguration(np.zeros((0, 1)))


class TestParticleStep:
    """Test one step of the particle kernel."""

    def test_step_index_advances(self, demo_params):
        """The output carries step_index + 1 and resurrection counts."""
        cfg = ParticleConfiguration(np.random.default_rng(0).random((50, 1)))

        out = particle_step(cfg, demo_params, RngStream(1))

        assert out.step_index == 1
        assert out.resurrections.shape == (50,)

    def test_deterministic(self, demo_params):
        """Same keys give bit-identical configurations."""
        cfg = ParticleConfiguration(np.random.default_rng(0).random((100, 1)))

        a = particle_step(cfg, demo_params, RngStream(3))
        b = particle_step(cfg, demo_params, RngStream(3))

        np.testing.assert_array_equal(a.points, b.points)

    def test_dimension_mismatch(self, demo_params):
        """The configuration and the model must share d."""
        cfg = ParticleConfiguration(np.zeros((4, 2)))

        with pytest.raises(DimensionMismatchError):
            particle_step(cfg, demo_params, RngStream(0))

    def test_constant_killing_matches_free_diffusion_law(self):
        """With constant killing the one-step law is an Euler step from the frozen cloud."""
        params = StepParams(0.01, make_builtin("free", lambda0=2.0))
        cfg = ParticleConfiguration(np.full((20_000, 1), 0.5))

        out = particle_step(cfg, params, RngStream(5))
        offsets = minimal_image(out.points[:, 0] - 0.5) / 0.1

        assert stats.kstest(offsets, "norm").pvalue > 1e-3

    def test_stress_model_at_largest_step(self):
        """Near one half kill probability at gamma_max still completes a step."""
        params = StepParams(0.25, make_builtin("stress"))
        cfg = ParticleConfiguration(np.random.default_rng(6).random((50, 1)))

        out = particle_step(cfg, params, RngStream(6))

        assert out.points.shape == (50, 1)
        assert out.resurrections.sum() > 0

    def test_single_particle_resurrects_on_itself(self):
        """With N = 1 a killed particle restarts from its own previous position."""
        params = StepParams(0.01, make_builtin("free", lambda0=40.0))
        offsets = []
        resurrected = 0
        for k in range(2000):
            out = particle_step(ParticleConfiguration(np.array([[0.3]]), step_index=k), params, RngStream(7))
            offsets.append(float(minimal_image(out.points[0, 0] - 0.3)) / 0.1)
            resurrected += int(out.resurrections[0] > 0)

        assert resurrected > 0
        assert stats.kstest(offsets, "norm").pvalue > 1e-3


class TestRunChain:
    """Test chain evolution with observers."""

    def test_observers_see_every_step(self, demo_params):
        """Initial and every later configuration are observed."""
        start = initial_configuration("uniform", 64, 1, RngStream(0))
        reference = DiscreteMeasure.empirical(np.linspace(0, 1, 50, endpoint=False))

        summary = run_chain(
            start,
            demo_params,
            5,
            RngStream(1),
            observers=[DistanceObserver(reference), KillProbabilityObserver(demo_params)],
        )

        assert summary.values("w1_reference").shape == (6,)
        assert summary.values("mean_kill_prob").shape == (6,)
        assert summary.final.step_index == 5
        assert [row.step for row in summary.rows if row.observable == "w1_reference"] == list(range(6))

    def test_resurrection_observer_skips_initial(self, demo_params):
        """The initial configuration has no resurrection counts."""
        start = initial_configuration("uniform", 32, 1, RngStream(0))

        summary = run_chain(start, demo_params, 3, RngStream(1), observers=[ResurrectionObserver()])

        assert summary.values("resurrections").shape == (3,)
        assert summary.values("killed_fraction").shape == (3,)

    def test_snapshot_observer(self, demo_params):
        """Snapshots are kept only at the requested steps."""
        start = initial_configuration("uniform", 16, 1, RngStream(0))
        snapshot = SnapshotObserver(steps=[0, 2])

        summary = run_chain(start, demo_params, 3, RngStream(1), observers=[snapshot])

        assert sorted(snapshot.snapshots) == [0, 2]
        np.testing.assert_array_equal(snapshot.snapshots[0], start.points)
        assert summary.rows == []

    def test_zero_steps(self, demo_params):
        """A zero-step chain returns its input."""
        start = initial_configuration("uniform", 8, 1, RngStream(0))

        summary = run_chain(start, demo_params, 0, RngStream(1))

        assert summary.final is start
        assert summary.total_resurrections == 0

    def test_negative_steps_rejected(self, demo_params):
        """The number of steps cannot be negative."""
        start = initial_configuration("uniform", 8, 1, RngStream(0))

        with pytest.raises(InvalidInputError):
            run_chain(start, demo_params, -1, RngStream(1))

    def test_time_dependent_reference(self, demo_params):
        """A sequence reference is indexed by step and stops at its end."""
        start = initial_configuration("uniform", 16, 1, RngStream(0))
        refs = [DiscreteMeasure.empirical(np.array([0.5]))] * 2

        summary = run_chain(start, demo_params, 4, RngStream(1), observers=[DistanceObserver(refs)])

        assert summary.values("w1_reference").shape == (2,)


class TestInitialConfiguration:
    """Test initial law sampling."""

    def test_point_mass(self):
        """point:x puts every particle at x."""
        cfg = initial_configuration("point:0.25", 10, 2, RngStream(0))

        np.testing.assert_array_equal(cfg.points, np.full((10, 2), 0.25))

    def test_point_with_coordinates(self):
        """point:x1,x2 sets each coordinate."""
        cfg = initial_configuration("point:0.1,0.7", 3, 2, RngStream(0))

        np.testing.assert_allclose(cfg.points, [[0.1, 0.7]] * 3)

    def test_point_coordinate_count(self):
        """The coordinate count must match d."""
        with pytest.raises(DimensionMismatchError):
            initial_configuration("point:0.1,0.7", 3, 3, RngStream(0))

    def test_uniform_is_reproducible(self):
        """The same stream gives the same uniform sample."""
        a = initial_configuration("uniform", 100, 2, RngStream(7))
        b = initial_configuration("uniform", 100, 2, RngStream(7))

        np.testing.assert_array_equal(a.points, b.points)

    def test_grid_density(self):
        """Sampling from a grid density stays on its support."""
        weights = np.zeros(64)
        weights[10] = 1.0

        cfg = initial_configuration(GridDensity(weights), 200, 1, RngStream(0))

        assert np.all((cfg.points >= 10 / 64) & (cfg.points < 11 / 64))

    def test_unknown_law(self):
        """Unknown specs are rejected."""
        with pytest.raises(InvalidInputError):
            initial_configuration("gaussian", 10, 1, RngStream(0))


class TestCoupledNoise:
    """Test the reflection-maximal coupling of Gaussian increments."""

    def test_synchronous_shares_increments(self):
        """Synchronous mode returns the input increments."""
        g = np.random.default_rng(0).standard_normal((5, 1))

        out, coalesced = coupled_noise(
            g, np.full(5, 0.5), np.zeros((5, 1)), np.full((5, 1), 0.1), 0.2, CouplingMode.SYNCHRONOUS
        )

        np.testing.assert_array_equal(out, g)
        assert not coalesced.any()

    def test_equal_means_fall_back_to_shared(self):
        """Coinciding means need no reflection."""
        g = np.random.default_rng(1).standard_normal((5, 2))
        means = np.random.default_rng(2).random((5, 2))

        out, _ = coupled_noise(g, np.full(5, 0.5), means, means, 0.2, CouplingMode.REFLECTION)

        np.testing.assert_array_equal(out, g)

    def test_second_marginal_is_standard_normal(self):
        """The coupled increment is still N(0, I)."""
        n = 40_000
        gen = np.random.default_rng(3)
        g = gen.standard_normal((n, 1))
        v = gen.random(n)

        out, _ = coupled_noise(g, v, np.zeros((n, 1)), np.full((n, 1), 0.05), 0.2, CouplingMode.REFLECTION)

        assert stats.kstest(out[:, 0], "norm").pvalue > 1e-3

    def test_coalescence_probability(self):
        """Proposals coincide with probability 2 Phi(-|z|/2)."""
        n = 40_000
        gen = np.random.default_rng(4)
        g = gen.standard_normal((n, 1))
        v = gen.random(n)
        sqrt_gamma = 0.2
        offset = 0.1  # |z| = 0.5

        out, coalesced = coupled_noise(
            g, v, np.zeros((n, 1)), np.full((n, 1), offset), sqrt_gamma, CouplingMode.REFLECTION
        )
        first = g[:, 0] * sqrt_gamma
        second = offset + out[:, 0] * sqrt_gamma

        np.testing.assert_allclose(first[coalesced], second[coalesced], atol=1e-12)
        assert coalesced.mean() == pytest.approx(2 * stats.norm.cdf(-0.25), abs=0.01)


class TestCoupledStep:
    """Test coupled particle systems."""

    def _pair(self, mode, first="point:0", second="uniform", n=200):
        stream = RngStream(11)
        return CoupledPair(
            initial_configuration(first, n, 1, stream.derive("first")),
            initial_configuration(second, n, 1, stream.derive("second")),
            stream.derive("pair"),
            mode,
        )

    @pytest.mark.parametrize("mode", ["synchronous", "reflection"])
    def test_first_system_follows_particle_step(self, demo_params, mode):
        """The first system's trajectory is the uncoupled one."""
        pair = self._pair(mode)
        cfg = pair.first

        for _ in range(4):
            pair = coupled_step(pair, demo_params)
            cfg = particle_step(cfg, demo_params, pair.rng)

        np.testing.assert_allclose(pair.first.points, cfg.points, atol=1e-12)
        np.testing.assert_array_equal(pair.first.resurrections, cfg.resurrections)

    @pytest.mark.parametrize("mode", ["synchronous", "reflection"])
    def test_identical_systems_stay_identical(self, demo_params, mode):
        """Equal starting configurations remain equal."""
        pair = self._pair(mode, first="uniform", second="uniform")
        pair = CoupledPair(pair.first, pair.first, pair.rng, mode)

        for _ in range(3):
            pair = coupled_step(pair, demo_params)

        np.testing.assert_array_equal(pair.first.points, pair.second.points)

    def test_reflection_contracts(self, demo_params):
        """Reflection coupling brings the systems closer over time."""
        pair = self._pair(CouplingMode.REFLECTION)
        metric = RhoMetric()
        start = mean_rho_per_particle(pair, metric)

        for _ in range(40):
            pair = coupled_step(pair, demo_params)

        assert mean_rho_per_particle(pair, metric) < 0.5 * start

    def test_mode_is_coerced(self):
        """String modes are converted to CouplingMode."""
        assert self._pair("reflection").mode is CouplingMode.REFLECTION

    def test_shape_mismatch(self):
        """The two systems must have the same N and d."""
        with pytest.raises(DimensionMismatchError):
            CoupledPair(
                ParticleConfiguration(np.zeros((3, 1))),
                ParticleConfiguration(np.zeros((4, 1))),
                RngStream(0),
            )


class TestKilledChains:
    """Test the naive killed-chain sampler."""

    def test_constant_killing_survival(self):
        """Survival after m steps is exp(-m gamma lambda0)."""
        params = StepParams(0.05, make_builtin("constant", lambda0=2.0))
        points = np.random.default_rng(0).random((50_000, 1))

        sample = simulate_killed_chains(points, params, 10, RngStream(1))

        assert sample.survival_fraction == pytest.approx(math.exp(-1.0), abs=0.01)
        assert sample.survivors.shape[0] == sample.alive.sum()

    def test_zero_steps_all_alive(self):
        """Nothing dies in zero steps."""
        params = StepParams(0.05, make_builtin("demo"))

        sample = simulate_killed_chains(np.zeros((5, 1)), params, 0, RngStream(1))

        assert sample.survival_fraction == 1.0


class TestSlotMarginals:
    """Test the slot exchangeability diagnostic."""

    def test_exchangeable_slots_pass(self, demo_params):
        """Slots started from one law keep the same marginal."""
        samples = []
        for r in range(200):
            stream = RngStream(3).derive("slots", r)
            cfg = initial_configuration("uniform", 6, 1, stream.derive("initial"))
            samples.append(run_chain(cfg, demo_params, 3, stream).final.points[:, 0])

        report = slot_marginal_ks(np.array(samples), level=1e-3)

        assert report.passed

    def test_shifted_slot_fails(self):
        """A slot with a different law is detected."""
        gen = np.random.default_rng(0)
        samples = gen.random((500, 4))
        samples[:, 2] = 0.5 * samples[:, 2]

        assert not slot_marginal_ks(samples).passed

    def test_needs_two_slots(self):
        """One slot cannot be compared against the others."""
        with pytest.raises(InvalidInputError):
            slot_marginal_ks(np.zeros((10, 1)))
