import math

import numpy as np
import pytest

from udnpos.fusion import FusionParams
from udnpos.initializer import (
    InitConfig,
    attach_clock_prior,
    centroid_init,
    initial_kinematic_state,
    select_reference_an,
    warmup_doa_only,
)
from udnpos.statespace import AnInfo, GaussianState, Measurement

TWO_PI = 2.0 * math.pi


def bearing_measurement(truth_xy, an, sig_phi=1e-3, rng=None):
    dx, dy = truth_xy[0] - an.position[0], truth_xy[1] - an.position[1]
    phi = math.atan2(dy, dx)
    if rng is not None:
        phi += rng.normal(scale=sig_phi)
    return Measurement(
        an_id=an.an_id, azimuth=phi % TWO_PI, toa=0.0,
        covariance=np.diag([sig_phi**2, 1.0]),
    )


class TestCentroidInit:
    def test_two_ans(self):
        ans = [AnInfo(an_id=0, position=(0.0, 0.0)), AnInfo(an_id=1, position=(10.0, 0.0))]
        pos, cov = centroid_init(ans)
        assert (pos.x, pos.y) == (5.0, 0.0)
        np.testing.assert_allclose(cov, 25.0 * np.eye(2))

    def test_three_ans_mean(self):
        ans = [
            AnInfo(an_id=0, position=(0.0, 0.0)),
            AnInfo(an_id=1, position=(10.0, 0.0)),
            AnInfo(an_id=2, position=(5.0, 15.0)),
        ]
        pos, _ = centroid_init(ans)
        assert (pos.x, pos.y) == (5.0, 5.0)

    def test_single_an_floor(self):
        ans = [AnInfo(an_id=3, position=(7.0, -2.0))]
        pos, cov = centroid_init(ans)
        assert (pos.x, pos.y) == (7.0, -2.0)
        np.testing.assert_allclose(cov, 100.0 * np.eye(2))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            centroid_init([])


class TestWarmup:
    def two_ans(self):
        return [AnInfo(an_id=0, position=(0.0, 0.0)), AnInfo(an_id=1, position=(60.0, 0.0))]

    def test_noise_free_bearings_collapse_error(self):
        # triangulation oracle: noise-free bearings from two well-placed ANs
        ans = self.two_ans()
        truth = np.array([20.0, 25.0])
        cfg = InitConfig(n_warmup=20)
        state0 = initial_kinematic_state(ans, cfg)
        err0 = np.linalg.norm(state0.mean[:2] - truth)
        stream = [([bearing_measurement(truth, an, sig_phi=1e-6) for an in ans], ans)] * 20
        out = warmup_doa_only(state0, stream, 20, FusionParams())
        err = np.linalg.norm(out.mean[:2] - truth)
        assert err < 0.01 * err0

    def test_single_iteration_equals_single_update(self):
        from udnpos.fusion import kinematic_process_noise, kinematic_transition, update_doa_only

        ans = self.two_ans()
        truth = np.array([20.0, 25.0])
        cfg = InitConfig(n_warmup=1)
        state0 = initial_kinematic_state(ans, cfg)
        meas = [bearing_measurement(truth, an) for an in ans]
        p = FusionParams()
        out = warmup_doa_only(state0, [(meas, ans)], 1, p)

        f = kinematic_transition(p.dt)
        q = kinematic_process_noise(p.dt, p.sigma_v)
        mean = f @ state0.mean
        cov = f @ state0.cov @ f.T + q
        mean, cov = update_doa_only(mean, meas, ans, p, cov=cov)
        np.testing.assert_allclose(out.mean, mean, rtol=1e-12)
        np.testing.assert_allclose(out.cov, cov, rtol=1e-10, atol=1e-15)

    def test_velocity_estimated_as_by_product(self):
        # Monte Carlo oracle: a moving UN's velocity converges from the
        # bearing history alone
        rng = np.random.default_rng(0)
        ans = [
            AnInfo(an_id=0, position=(0.0, 0.0)),
            AnInfo(an_id=1, position=(60.0, 0.0)),
            AnInfo(an_id=2, position=(30.0, 50.0)),
        ]
        cfg = InitConfig(n_warmup=20)
        p = FusionParams(dt=0.1)
        vel_errs = []
        for _ in range(25):
            start = np.array([20.0, 20.0])
            v = np.array([13.9, 0.0])
            stream = []
            for k in range(20):
                pos = start + v * (k + 1) * p.dt
                stream.append(
                    ([bearing_measurement(pos, an, sig_phi=math.radians(0.5), rng=rng) for an in ans], ans)
                )
            out = warmup_doa_only(initial_kinematic_state(ans, cfg), stream, 20, p)
            vel_errs.append(np.linalg.norm(out.mean[2:] - v))
        assert np.mean(vel_errs) < 2.0

    def test_short_stream_rejected(self):
        ans = self.two_ans()
        cfg = InitConfig(n_warmup=5)
        state0 = initial_kinematic_state(ans, cfg)
        with pytest.raises(ValueError):
            warmup_doa_only(state0, [([], ans)] * 3, 5, FusionParams())


class TestAttachClockPrior:
    def test_marginals_and_block_structure(self):
        kin = GaussianState(mean=np.array([1.0, 2.0, 0.5, -0.5]), cov=np.diag([4.0, 4.0, 1.0, 1.0]))
        cfg = InitConfig()
        out = attach_clock_prior(kin, cfg)
        assert out.mean[4] == 0.0
        assert out.mean[5] == pytest.approx(2.5e-5)
        assert out.cov[5, 5] == pytest.approx((3e-5) ** 2)
        assert out.cov[4, 4] == pytest.approx((100e-6) ** 2)
        np.testing.assert_array_equal(out.cov[:4, :4], kin.cov)
        np.testing.assert_array_equal(out.cov[:4, 4:], np.zeros((4, 2)))
        assert np.linalg.eigvalsh(out.cov)[0] >= 0.0

    def test_requires_4dim_input(self):
        with pytest.raises(ValueError):
            attach_clock_prior(GaussianState(mean=np.zeros(6), cov=np.eye(6)), InitConfig())


class TestSelectReference:
    def test_nearest_wins(self):
        ans = [AnInfo(an_id=4, position=(0.0, 20.0)), AnInfo(an_id=2, position=(0.0, 30.0))]
        assert select_reference_an(ans, np.zeros(2)) == 4

    def test_tie_breaks_lowest_id(self):
        ans = [AnInfo(an_id=9, position=(10.0, 0.0)), AnInfo(an_id=3, position=(-10.0, 0.0))]
        assert select_reference_an(ans, np.zeros(2)) == 3

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            select_reference_an([], np.zeros(2))
