from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from uwbcal import sim
from uwbcal.delaycal import corrected_tof
from uwbcal.errors import ConfigError, SignalDropped
from uwbcal.twr import SkewPair, ds_twr_tof, expected_ss_bias, ss_twr_tof, var_ds


def _world(channels, seed=0, duration=60.0, **kw):
    return sim.make_world(sim.TrajectoryConfig(duration=duration), seed=seed, channels=channels, **kw)


class TestSeedStreams:
    def test_same_seed_same_draws(self):
        a, b = sim.SeedStreams(7), sim.SeedStreams(7)
        np.testing.assert_array_equal(a["power"].random(5), b["power"].random(5))

    def test_streams_are_independent_of_access_order(self):
        a, b = sim.SeedStreams(7), sim.SeedStreams(7)
        a["clock"].random(100)
        np.testing.assert_array_equal(a["power"].random(5), b["power"].random(5))

    def test_seed_required(self):
        with pytest.raises(ConfigError):
            sim.SeedStreams(None)

    def test_channel_toggle_does_not_shift_other_draws(self):
        on = sim.run_schedule(_world(sim.Channels()), 50.0, 20.0, 3)
        off = sim.run_schedule(_world(replace(sim.Channels(), outliers=False)), 50.0, 20.0, 3)
        np.testing.assert_array_equal(on.fpp2, off.fpp2)
        np.testing.assert_array_equal(on.truth_range, off.truth_range)
        assert not np.array_equal(on.dt41, off.dt41)


class TestModels:
    def test_clock_skew_bound(self):
        with pytest.raises(ConfigError):
            sim.ClockModel(skew=150e-6)

    def test_clock_noise_nonnegative(self):
        with pytest.raises(ConfigError):
            sim.ClockModel(timestamp_noise_std=-1.0)

    def test_clock_offset_cancels_in_intervals(self):
        c = sim.ClockModel(skew=10e-6, offset=123.0)
        assert c.read(1000.0) - c.read(0.0) == pytest.approx(c.elapsed(0.0, 1000.0))

    def test_tag_delay_bound(self):
        with pytest.raises(ConfigError):
            sim.TagSpec(0, 0, (0, 0, 0), delay=11.0)

    @given(d=st.floats(0.1, 50.0), k=st.floats(1.01, 3.0))
    def test_fpp_decreases_with_range(self, d, k):
        pw = sim.PowerTruth()
        assert pw.mean_fpp(d * k) < pw.mean_fpp(d)

    @given(x=st.floats(1e-4, 1e3))
    def test_rho_std_nonnegative(self, x):
        assert sim.PowerTruth().rho_std(x) >= 0

    def test_rho_profile_scale(self):
        pw = sim.PowerTruth()
        x = np.geomspace(0.1, 5.0, 2000)
        bias, std = pw.rho_bias(x) * sim.SPEED_OF_LIGHT, pw.rho_std(x) * sim.SPEED_OF_LIGHT
        assert bias.max() == pytest.approx(0.10, abs=5e-3)
        assert bias.min() == pytest.approx(-0.10, abs=5e-3)
        assert std.max() == pytest.approx(0.17, abs=5e-3)
        assert std.min() == pytest.approx(0.025, abs=1e-3)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(rho_x=(1.0, 2.0), rho_bias_ns=(0.0,), rho_std_ns=(0.0, 0.0)),
            dict(rho_x=(2.0, 1.0), rho_bias_ns=(0.0, 0.0), rho_std_ns=(0.0, 0.0)),
            dict(rho_x=(1.0, 2.0), rho_bias_ns=(0.0, 0.0), rho_std_ns=(-1.0, 0.0)),
        ],
    )
    def test_power_truth_validation(self, kw):
        with pytest.raises(ConfigError):
            sim.PowerTruth(**kw)


@pytest.fixture(scope="module")
def trajs():
    return sim.generate_trajectories(sim.TrajectoryConfig(duration=60.0), 4)


class TestTrajectories:
    def test_attitude_is_rotation(self, trajs):
        t = np.linspace(0.0, 60.0, 301)
        for tr in trajs:
            C = tr.attitude(t)
            np.testing.assert_allclose(C @ np.swapaxes(C, -1, -2), np.broadcast_to(np.eye(3), C.shape), atol=1e-12)
            np.testing.assert_allclose(np.linalg.det(C), 1.0, atol=1e-12)

    def test_velocity_is_position_derivative(self, trajs):
        t, h = np.linspace(1.0, 59.0, 200), 1e-4
        for tr in trajs:
            fd = (tr.position(t + h) - tr.position(t - h)) / (2 * h)
            v = tr.velocity(t)
            assert np.max(np.abs(fd - v)) <= 1e-6 * np.max(np.abs(v))

    def test_stays_in_box(self, trajs):
        cfg = sim.TrajectoryConfig()
        p = np.concatenate([tr.position(np.linspace(0, 600, 6001)) for tr in trajs])
        assert np.all(p >= np.array(cfg.box_min)) and np.all(p <= np.array(cfg.box_max))

    @pytest.mark.parametrize(
        "cfg", [sim.TrajectoryConfig(n_robots=0), sim.TrajectoryConfig(duration=0.0), sim.TrajectoryConfig(box_max=(-4, 3, 2.5))]
    )
    def test_config_errors(self, cfg):
        with pytest.raises(ConfigError):
            sim.generate_trajectories(cfg, 0)


class TestWorld:
    def test_default_pairs(self, train_world):
        assert len(train_world.pairs) == 12
        assert all(i < j for i, j in train_world.pairs)
        owner = {t.tag_id: t.robot_id for t in train_world.tags}
        assert all(owner[i] != owner[j] for i, j in train_world.pairs)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(pairs=((0, 0),)),
            dict(pairs=((0, 99),)),
            dict(outlier_prob=1.5),
            dict(dt32_nominal=0.0),
            dict(reply_jitter=1.0),
        ],
    )
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            sim.make_world(sim.TrajectoryConfig(), 0, **kw)

    def test_duplicate_tag_ids(self):
        tags = sim.make_tags(1)
        with pytest.raises(ConfigError):
            sim.World(sim.generate_trajectories(sim.TrajectoryConfig(n_robots=1), 0), tags + tags[:1])

    def test_unknown_robot(self):
        tags = sim.make_tags(2)
        with pytest.raises(ConfigError):
            sim.World(sim.generate_trajectories(sim.TrajectoryConfig(n_robots=1), 0), tags)


class TestExchanges:
    def test_delays_only_recover_truth_exactly(self):
        w = _world(sim.Channels.only("delay"))
        ds = sim.run_schedule(w, 100.0, 10.0, 0)
        got = corrected_tof(ds, {t.tag_id: t.delay for t in w.tags})
        np.testing.assert_allclose(got, ds.truth_tof, atol=1e-6)
        # and without correcting the bias is the pair's combined delay
        assert np.all(np.abs(ds_twr_tof(ds.intervals) - ds.truth_tof) > 0.1)

    def test_skew_only_matches_analytic_bias(self):
        tags = sim.make_tags(3, skews=(0.0, 0.0, 20e-6, 20e-6, 20e-6, 20e-6))
        w = _world(sim.Channels.only("skew"), tags=tags, pairs=((0, 2), (1, 3)))
        ds = sim.run_schedule(w, 100.0, 5.0, 0)
        ss_err = ss_twr_tof(ds.intervals) - ds.truth_tof
        true_dt32 = ds.dt32 / (1 + 20e-6)
        np.testing.assert_allclose(ss_err, expected_ss_bias(SkewPair(0.0, 20e-6), ds.truth_tof, true_dt32), atol=1e-6)
        np.testing.assert_allclose(ds_twr_tof(ds.intervals), ds.truth_tof, atol=1e-6)

    def test_schedule_scale_ten_thousand(self, train_world):
        ds = sim.run_schedule(train_world, 10000 / 60.0, 60.0, 1)
        assert 9500 <= len(ds) <= 10000
        assert len(ds) + ds.dropped == 10000

    def test_training_scale(self, train_dataset):
        assert abs(len(train_dataset) + train_dataset.dropped - 38000) < 100

    def test_round_robin_order(self, train_world):
        w = replace(train_world, fpp_min=-200.0)
        ds = sim.run_schedule(w, 10.0, 3.0, 0)
        pairs = list(zip(ds.initiator.tolist(), ds.responder.tolist()))
        assert pairs == [tuple(p) for p in (list(w.pairs) * 3)[: len(ds)]]

    def test_fpp_in_detection_band(self, train_world, train_dataset):
        for col in (train_dataset.fpp2, train_dataset.fpp4):
            assert np.all(col >= train_world.fpp_min) and np.all(col <= train_world.fpp_max)

    def test_intervals_physical(self, train_dataset):
        train_dataset.intervals.validate()

    def test_deterministic(self, train_world):
        a = sim.run_schedule(train_world, 50.0, 10.0, 9)
        b = sim.run_schedule(train_world, 50.0, 10.0, 9)
        assert a == b

    def test_signal_dropped(self, train_world):
        w = replace(train_world, fpp_min=-10.0)
        with pytest.raises(SignalDropped):
            sim.simulate_exchange((w.tags[0], w.tags[2]), 1.0, w, sim.SeedStreams(0))
        assert len(sim.run_schedule(w, 10.0, 2.0, 0)) == 0

    def test_single_exchange(self, train_world):
        tx = sim.simulate_exchange((train_world.tags[0], train_world.tags[2]), 1.0, train_world, sim.SeedStreams(0), (2e5, 9e5))
        assert tx.initiator_id == 0 and tx.responder_id == 2
        assert tx.intervals.dt53 == pytest.approx(9e5, rel=0.06)

    @pytest.mark.parametrize("rate,duration", [(0.0, 1.0), (1.0, -1.0)])
    def test_schedule_config_errors(self, train_world, rate, duration):
        with pytest.raises(ConfigError):
            sim.run_schedule(train_world, rate, duration, 0)


@pytest.fixture(scope="module")
def power_only():
    w = sim.make_world(sim.TrajectoryConfig(duration=240.0), seed=0, channels=sim.Channels.only("power"))
    return w, sim.run_schedule(w, 158.4, 240.0, 0)


class TestChannelSignatures:
    def test_all_channels_off_is_exact(self, train_world):
        w = replace(train_world, channels=sim.Channels.none())
        ds = sim.run_schedule(w, 158.4, 30.0, 0)
        assert np.max(np.abs(ds_twr_tof(ds.intervals) - ds.truth_tof)) < 1e-9

    def test_power_only_matches_conditional_profile(self, power_only):
        w, ds = power_only
        err = (ds_twr_tof(ds.intervals) - ds.truth_tof) * sim.SPEED_OF_LIGHT
        x = sim.lift(0.5 * (ds.fpp2 + ds.fpp4), w.power.alpha)
        mean, std = oracles.conditional_profile(w.power, x, sim.SPEED_OF_LIGHT, ts_std=0.0)
        edges = np.quantile(x, np.linspace(0, 1, 11))
        idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, 9)
        for k in range(10):
            m = idx == k
            se = err[m].std(ddof=1) / np.sqrt(m.sum())
            assert abs(err[m].mean() - mean[m].mean()) < 4 * se
            # total variance in the bin: within-sample variance plus spread of the means
            expected = np.sqrt(np.mean(std[m] ** 2 + mean[m] ** 2) - mean[m].mean() ** 2)
            assert err[m].std() == pytest.approx(expected, rel=0.05)


class TestMonteCarloHelper:
    def test_matches_independent_oracle(self):
        n, R = 200_000, 0.01
        iv = sim.intervals_monte_carlo(n, 10.0, 3e5, 1.5e6, 5e-6, -7e-6, np.sqrt(R), np.random.default_rng(1))
        _, ds = oracles.ds_exchange(n, 10.0, 3e5, 1.5e6, 5e-6, -7e-6, np.sqrt(R), np.random.default_rng(2))
        err = ds_twr_tof(iv) - 10.0
        se = np.sqrt(np.var(ds) / n + np.var(err) / n)
        assert abs(np.mean(err) - np.mean(ds - 10.0)) < 4 * se
        assert np.var(err) == pytest.approx(np.var(ds), rel=0.03)
        assert np.var(err) == pytest.approx(var_ds(SkewPair(5e-6, -7e-6, R), 3e5, 1.5e6), rel=0.03)
