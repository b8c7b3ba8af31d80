import numpy as np
import pytest

from metakkl.adapt import SamplingStrategy, online_adapt, select_samples, t_init_min
from metakkl.nn import MlpSpec, init_params
from metakkl.sim import Trajectory, duffing_model
from metakkl.train import MetaState, loss_Ly, output_projection


def make_traj(n, dt=0.02, dz=5, seed=0):
    rng = np.random.default_rng(seed)
    times = dt * np.arange(n)
    states = rng.normal(size=(n, dz))
    y = rng.normal(size=(n, 1))
    return Trajectory(times=times, states=states), y


class TestTInitMin:
    def test_product(self):
        assert t_init_min(32, 5, 0.02) == pytest.approx(3.2)

    def test_zero_adapt(self):
        assert t_init_min(32, 0, 0.02) == 0.0

    def test_linear_in_dt(self):
        assert t_init_min(10, 3, 0.04) == 2 * t_init_min(10, 3, 0.02)


class TestSelectSamples:
    def test_minimum_consecutive_chunks(self):
        traj, y = make_traj(20)
        batches, indices = select_samples(SamplingStrategy("minimum"), traj, y,
                                          n_batch=2, n_adapt=2, seed=0)
        assert np.array_equal(indices, [0, 1, 2, 3])
        assert np.array_equal(batches[0][0], traj.states[[0, 1]])
        assert np.array_equal(batches[1][0], traj.states[[2, 3]])
        assert np.array_equal(batches[1][1], y[[2, 3]])

    def test_minimum_delayed_first_index(self):
        traj, y = make_traj(800)
        strat = SamplingStrategy("minimum-delayed", delay=13.8155)
        batches, indices = select_samples(strat, traj, y, n_batch=2, n_adapt=2, seed=0)
        assert indices[0] == 691  # ceil(13.8155 / 0.02)

    def test_window_random_membership_and_uniqueness(self):
        traj, y = make_traj(2600)
        strat = SamplingStrategy("window-random", window_length=50.0)
        batches, indices = select_samples(strat, traj, y, n_batch=8, n_adapt=4, seed=1)
        assert len(indices) == 32
        assert len(np.unique(indices)) == 32
        assert indices.min() >= 0
        assert indices.max() <= 2500
        assert np.all(np.diff(indices) > 0)

    def test_window_delayed_respects_boundary(self):
        traj, y = make_traj(3000)
        strat = SamplingStrategy("window-random-delayed", window_length=8.0, delay=10.0)
        _, indices = select_samples(strat, traj, y, n_batch=4, n_adapt=3, seed=2)
        assert indices.min() >= 500  # ceil(10 / 0.02)
        assert indices.max() <= 500 + 400

    def test_deterministic_per_seed(self):
        traj, y = make_traj(600)
        strat = SamplingStrategy("window-random", window_length=10.0)
        _, i1 = select_samples(strat, traj, y, 4, 3, seed=5)
        _, i2 = select_samples(strat, traj, y, 4, 3, seed=5)
        _, i3 = select_samples(strat, traj, y, 4, 3, seed=6)
        assert np.array_equal(i1, i2)
        assert not np.array_equal(i1, i3)

    def test_too_short_trajectory_reports_duration(self):
        traj, y = make_traj(10)
        with pytest.raises(ValueError, match="trajectory too short"):
            select_samples(SamplingStrategy("minimum"), traj, y, 8, 4, seed=0)

    def test_strategy_validation(self):
        with pytest.raises(ValueError):
            SamplingStrategy("window-random")  # missing window_length
        with pytest.raises(ValueError):
            SamplingStrategy("nonsense")


class TestOnlineAdapt:
    def _meta_state(self, seed=0, alpha=1e-2):
        eta = init_params(MlpSpec(5, 2, hidden=(12,)), seed=seed)
        return MetaState(eta=eta, alpha=alpha, history=[])

    def test_n_adapt_zero_keeps_eta(self):
        meta = self._meta_state()
        traj, y = make_traj(50)
        h = output_projection(duffing_model())
        run = online_adapt(meta, traj, y, SamplingStrategy("minimum"), 4, 0, h)
        for a, b in zip(run.eta_adapted.weights, meta.eta.weights):
            assert np.array_equal(a, b)
        assert run.t_init_actual == 0.0

    def test_adaptation_reduces_loss_on_samples(self):
        meta = self._meta_state(alpha=1e-3)
        traj, y = make_traj(200, seed=3)
        h = output_projection(duffing_model())
        strat = SamplingStrategy("minimum")
        batches, indices = select_samples(strat, traj, y, 16, 4, seed=0)
        run = online_adapt(meta, traj, y, strat, 16, 4, h)
        z_all = traj.states[indices]
        y_all = y[indices]
        before = loss_Ly(y_all, z_all, meta.eta, h).item()
        after = loss_Ly(y_all, z_all, run.eta_adapted, h).item()
        assert after < before

    def test_t_init_at_least_minimum(self):
        meta = self._meta_state()
        traj, y = make_traj(2600)
        h = output_projection(duffing_model())
        for strat in (SamplingStrategy("minimum"),
                      SamplingStrategy("minimum-delayed", delay=1.0),
                      SamplingStrategy("window-random", window_length=20.0),
                      SamplingStrategy("window-random-delayed", window_length=20.0, delay=5.0)):
            run = online_adapt(meta, traj, y, strat, 8, 3, h)
            assert run.t_init_actual >= t_init_min(8, 3, 0.02) - 1e-12

    def test_alpha_to_zero_is_continuous(self):
        traj, y = make_traj(100, seed=4)
        h = output_projection(duffing_model())
        base = self._meta_state(alpha=1e-9)
        run = online_adapt(base, traj, y, SamplingStrategy("minimum"), 8, 2, h)
        diff = max(np.max(np.abs(a - b)) for a, b in
                   zip(run.eta_adapted.weights, base.eta.weights))
        assert diff < 1e-6

    def test_deterministic(self):
        meta = self._meta_state()
        traj, y = make_traj(600, seed=5)
        h = output_projection(duffing_model())
        strat = SamplingStrategy("window-random", window_length=10.0)
        r1 = online_adapt(meta, traj, y, strat, 8, 3, h, seed=11)
        r2 = online_adapt(meta, traj, y, strat, 8, 3, h, seed=11)
        for a, b in zip(r1.eta_adapted.weights, r2.eta_adapted.weights):
            assert np.array_equal(a, b)
