import numpy as np
import pytest
from numpy.testing import assert_array_equal

from core.errors import ValidationError
from core.safety_filter import CbfParams
from core.trajectory import Path, RunConfig, TimeGrid, make_rng, sample_prior, spawn_rngs, uniform_grid


class TestSamplePrior:

    def test_same_seed_same_path(self):
        a = sample_prior(2, 3, make_rng(7))
        b = sample_prior(2, 3, make_rng(7))
        assert a == b
        assert a.shape == (2, 4)

    def test_sample_mean_near_zero(self):
        for seed in range(5):
            path = sample_prior(2, 255, make_rng(seed))
            assert abs(np.mean(path.data)) < 0.1

    def test_scalar_path(self):
        a = sample_prior(1, 0, make_rng(11))
        assert a.shape == (1, 1)
        assert a == sample_prior(1, 0, make_rng(11))

    def test_spawned_streams_are_independent_and_reproducible(self):
        first = [g.standard_normal(3) for g in spawn_rngs(5, 2)]
        second = [g.standard_normal(3) for g in spawn_rngs(5, 2)]
        assert_array_equal(first[0], second[0])
        assert not np.array_equal(first[0], first[1])


class TestUniformGrid:

    def test_single_step(self):
        assert uniform_grid(1).times == (0.0, 1.0)

    def test_quarters(self):
        assert uniform_grid(4).times == (0.0, 0.25, 0.5, 0.75, 1.0)

    def test_256_step_grid_is_exact(self):
        grid = uniform_grid(256)
        assert len(grid.times) == 257
        assert max(abs(t - i / 256) for i, t in enumerate(grid.times)) == 0.0

    def test_zero_steps_rejected(self):
        with pytest.raises(ValidationError):
            uniform_grid(0)

    def test_random_grids_are_monotone_and_sum_to_one(self):
        rng = make_rng(3)
        for T in rng.integers(1, 1025, size=50):
            grid = uniform_grid(int(T))
            steps = grid.steps()
            assert np.all(steps > 0)
            assert abs(np.sum(steps) - 1.0) < 1e-12
            assert grid.T == T

    def test_iteration_yields_every_step(self):
        steps = list(uniform_grid(4))
        assert [i for i, _, _ in steps] == [0, 1, 2, 3]
        assert steps[-1][1] == 0.75

    def test_non_monotone_grid_rejected(self):
        with pytest.raises(ValidationError):
            TimeGrid((0.0, 0.6, 0.4, 1.0))

    def test_grid_must_end_at_one(self):
        with pytest.raises(ValidationError):
            TimeGrid((0.0, 0.5))


class TestPath:

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            Path(np.array([[0.0, np.nan]]))

    def test_data_is_read_only(self):
        path = Path(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            path.data[0, 0] = 1.0

    def test_arithmetic_round_trip_is_exact(self):
        rng = make_rng(0)
        # dyadic values keep every sum representable
        for _ in range(20):
            a = Path(rng.integers(-2 ** 20, 2 ** 20, size=(2, 8)) / 1024.0)
            b = Path(rng.integers(-2 ** 20, 2 ** 20, size=(2, 8)) / 1024.0)
            assert (a + b) - b == a

    def test_scaling(self):
        a = Path(np.ones((2, 2)))
        assert_array_equal((a * 2.5).data, np.full((2, 2), 2.5))
        assert 2.5 * a == a * 2.5

    def test_waypoints_are_columns(self):
        path = Path.from_waypoints([[0, 1], [2, 3], [4, 5]])
        assert path.H == 2
        assert_array_equal(path.waypoint(1), [2.0, 3.0])

    def test_json_and_csv_round_trip(self):
        path = Path(make_rng(9).standard_normal((3, 5)) / 3.0)
        assert Path.from_dict(path.to_dict()) == path
        assert Path.from_csv_rows(path.to_csv_rows()) == path

    def test_payload_shape_checked(self):
        payload = Path(np.zeros((2, 3))).to_dict()
        payload['H'] = 5
        with pytest.raises(ValidationError):
            Path.from_dict(payload)


class TestRunConfig:

    @pytest.mark.parametrize('overrides', [{'T_pred': 0}, {'T_corr': 0}, {'alpha': 0.5},
                                           {'method': 'diffuser'}, {'field': 'unet'}])
    def test_invalid_values_rejected(self, overrides):
        with pytest.raises(ValidationError):
            RunConfig(**overrides)

    def test_mlp_field_needs_checkpoint(self):
        with pytest.raises(ValidationError):
            RunConfig(field='mlp')

    def test_dict_round_trip(self):
        run_config = RunConfig(seed=4, alpha=2.5, cbf=CbfParams(epsilon=5.0, zeta=0.9))
        assert RunConfig.from_dict(run_config.to_dict()) == run_config

    def test_unknown_keys_rejected(self):
        payload = RunConfig().to_dict()
        payload['temperature'] = 1.0
        with pytest.raises(ValidationError):
            RunConfig.from_dict(payload)

    def test_overrides_reach_barrier_params(self):
        run_config = RunConfig().with_overrides(epsilon=3.0, seed=None, alpha=1.5)
        assert run_config.cbf.epsilon == 3.0
        assert run_config.alpha == 1.5
        assert run_config.seed == RunConfig().seed

    def test_hash_ignores_seed_and_timing(self):
        base = RunConfig()
        assert base.config_hash() == RunConfig(seed=99, record_timing=True).config_hash()
        assert base.config_hash() != RunConfig(alpha=3.0).config_hash()
