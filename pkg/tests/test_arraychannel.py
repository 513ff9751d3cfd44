import math

import numpy as np
import pytest

from udnpos.arraychannel import (
    ArrayManifold,
    ArrayPort,
    ChannelSnapshot,
    PathParams,
    PilotGrid,
    angle_steering,
    build_synthetic_manifold,
    cylindrical_array,
    delay_steering,
    load_manifold,
    mode_indices,
    polarimetric_response,
    polarimetric_response_derivs,
    reconstruction_rms,
    save_manifold,
    synth_snapshot,
)

TWO_PI = 2.0 * math.pi


def tiny_manifold(g_h=(1.0,), g_v=(0.0,)):
    return ArrayManifold(
        m_an=1, m_a=1, m_e=1,
        g_h=np.array([g_h], dtype=complex),
        g_v=np.array([g_v], dtype=complex),
    )


class TestDelaySteering:
    def test_zero_delay_all_ones(self):
        grid = PilotGrid.continuous(8, 75e3)
        np.testing.assert_allclose(delay_steering(0.0, grid), np.ones(8))

    def test_continuous_three_subcarriers(self):
        # phases per the printed Vandermonde vector: (m_f-1)*pi*f0*tau = 0.4712
        grid = PilotGrid.continuous(3, 75e3)
        d = delay_steering(1e-6, grid)
        np.testing.assert_allclose(np.angle(d), [-0.4712, 0.0, 0.4712], atol=1e-4)
        np.testing.assert_allclose(np.abs(d), 1.0)

    def test_sparse_grid_against_per_subcarrier_oracle(self):
        # independent oracle: evaluate the centered DFT phase per subcarrier
        grid = PilotGrid(f0=75e3, subcarrier_indices=np.array([0, 4, 8]))
        tau = 2e-6
        d = delay_steering(tau, grid)
        center = (0 + 8) / 2
        oracle = [np.exp(1j * 2 * np.pi * 75e3 * (idx - center) * tau) for idx in [0, 4, 8]]
        np.testing.assert_allclose(d, oracle, rtol=1e-12)

    def test_phase_group_property(self):
        grid = PilotGrid(f0=75e3, subcarrier_indices=np.array([0, 3, 5, 11]))
        rng = np.random.default_rng(0)
        for _ in range(10):
            t1, t2 = rng.uniform(-1e-6, 1e-6, size=2)
            np.testing.assert_allclose(
                delay_steering(t1 + t2, grid),
                delay_steering(t1, grid) * delay_steering(t2, grid),
                rtol=1e-10,
            )

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            PilotGrid(f0=75e3, subcarrier_indices=np.array([], dtype=int))


class TestAngleSteering:
    def test_zero_angles_all_ones(self):
        np.testing.assert_allclose(angle_steering(0.0, 0.0, 5, 3), np.ones(15))

    def test_three_mode_azimuth(self):
        d = angle_steering(math.pi / 2, 0.0, 3, 1)
        expected = [np.exp(-1j * math.pi / 2), 1.0, np.exp(1j * math.pi / 2)]
        np.testing.assert_allclose(d, expected, atol=1e-15)

    def test_kronecker_structure_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            phi = rng.uniform(0, TWO_PI)
            theta = rng.uniform(0, math.pi)
            m_a, m_e = 7, 5
            d = angle_steering(phi, theta, m_a, m_e)
            # explicit outer-product flattening
            oracle = np.empty(m_a * m_e, dtype=complex)
            for p, me in enumerate(mode_indices(m_e)):
                for q, ma in enumerate(mode_indices(m_a)):
                    oracle[p * m_a + q] = np.exp(1j * me * theta) * np.exp(1j * ma * phi)
            np.testing.assert_allclose(d, oracle, rtol=1e-12)

    def test_even_mode_counts_rejected(self):
        with pytest.raises(ValueError):
            angle_steering(0.0, 0.0, 4, 3)


class TestPolarimetricResponse:
    def test_single_antenna_single_mode(self):
        grid = PilotGrid.continuous(4, 75e3)
        path = PathParams(tau=0.0, theta=1.0, phi=2.0, gamma=np.array([1.0, 0.0]))
        b = polarimetric_response(path, tiny_manifold(), grid)
        np.testing.assert_allclose(b[:, 0], np.ones(4))
        np.testing.assert_allclose(b[:, 1], np.zeros(4))

    def test_column_norms_invariant_to_tau(self):
        grid = PilotGrid.continuous(16, 75e3)
        manifold = build_synthetic_manifold(cylindrical_array(), m_a=7, m_e=5)
        gamma = np.array([1.0, 1.0])
        n0 = np.linalg.norm(
            polarimetric_response(PathParams(0.0, 1.2, 0.7, gamma), manifold, grid), axis=0
        )
        n1 = np.linalg.norm(
            polarimetric_response(PathParams(3e-7, 1.2, 0.7, gamma), manifold, grid), axis=0
        )
        np.testing.assert_allclose(n0, n1, rtol=1e-12)

    def test_azimuth_periodicity(self):
        grid = PilotGrid.continuous(4, 75e3)
        manifold = build_synthetic_manifold(cylindrical_array(), m_a=7, m_e=5)
        g = np.array([0.3 + 0.1j, 0.9])
        b0 = polarimetric_response(PathParams(1e-7, 1.0, 0.0, g), manifold, grid)
        b1 = polarimetric_response(PathParams(1e-7, 1.0, TWO_PI - 1e-15, g), manifold, grid)
        np.testing.assert_allclose(b0, b1, atol=1e-12)

    def test_against_elementwise_loop_oracle(self):
        # brute-force loop over antenna/subcarrier pairs
        grid = PilotGrid(f0=75e3, subcarrier_indices=np.array([0, 2, 5]))
        manifold = build_synthetic_manifold(cylindrical_array(), m_a=7, m_e=5)
        path = PathParams(tau=8e-8, theta=1.9, phi=4.0, gamma=np.array([1.0, 0.5j]))
        b = polarimetric_response(path, manifold, grid)

        d_ang = angle_steering(path.phi, path.theta, 7, 5)
        d_f = delay_steering(path.tau, grid)
        ant_h = manifold.g_h @ d_ang
        ant_v = manifold.g_v @ d_ang
        m_f = grid.m_f
        for a in range(manifold.m_an):
            for k in range(m_f):
                assert b[a * m_f + k, 0] == pytest.approx(ant_h[a] * d_f[k], rel=1e-12)
                assert b[a * m_f + k, 1] == pytest.approx(ant_v[a] * d_f[k], rel=1e-12)

    def test_derivs_match_finite_differences(self):
        grid = PilotGrid.sparse_uniform(16, 75e3, stride=5)
        manifold = build_synthetic_manifold(cylindrical_array(), m_a=7, m_e=5)
        path = PathParams(tau=5e-8, theta=1.7, phi=2.3, gamma=np.array([1.0, 1.0]))
        b, db_dtau, db_dtheta, db_dphi = polarimetric_response_derivs(path, manifold, grid)

        def response(tau, theta, phi):
            return polarimetric_response(PathParams(tau, theta, phi, path.gamma), manifold, grid)

        h_tau = 1e-7 / (TWO_PI * grid.f0)
        fd_tau = (response(path.tau + h_tau, path.theta, path.phi)
                  - response(path.tau - h_tau, path.theta, path.phi)) / (2 * h_tau)
        np.testing.assert_allclose(db_dtau, fd_tau, rtol=1e-5, atol=1e-8 * np.abs(fd_tau).max())

        h = 1e-6
        fd_theta = (response(path.tau, path.theta + h, path.phi)
                    - response(path.tau, path.theta - h, path.phi)) / (2 * h)
        np.testing.assert_allclose(db_dtheta, fd_theta, rtol=1e-5, atol=1e-8 * np.abs(fd_theta).max())
        fd_phi = (response(path.tau, path.theta, path.phi + h)
                  - response(path.tau, path.theta, path.phi - h)) / (2 * h)
        np.testing.assert_allclose(db_dphi, fd_phi, rtol=1e-5, atol=1e-8 * np.abs(fd_phi).max())


class TestSynthSnapshot:
    def test_noise_free_limit(self):
        grid = PilotGrid.continuous(8, 75e3)
        manifold = build_synthetic_manifold(cylindrical_array(), m_a=7, m_e=5)
        path = PathParams(tau=1e-7, theta=1.5, phi=1.0, gamma=np.array([1.0, 0.2]))
        snap = synth_snapshot(path, manifold, grid, noise_var=1e-30, rng=0)
        clean = polarimetric_response(path, manifold, grid) @ path.gamma
        np.testing.assert_allclose(snap.g, clean, atol=1e-13)

    def test_seed_determinism(self):
        grid = PilotGrid.continuous(8, 75e3)
        manifold = build_synthetic_manifold(cylindrical_array(), m_a=7, m_e=5)
        path = PathParams(tau=1e-7, theta=1.5, phi=1.0, gamma=np.array([1.0, 0.2]))
        a = synth_snapshot(path, manifold, grid, noise_var=0.1, rng=42)
        b = synth_snapshot(path, manifold, grid, noise_var=0.1, rng=42)
        np.testing.assert_array_equal(a.g, b.g)

    def test_noise_variance_monte_carlo(self):
        # Monte Carlo oracle: empirical per-sample complex variance within 5%
        grid = PilotGrid.continuous(4, 75e3)
        manifold = tiny_manifold()
        path = PathParams(tau=0.0, theta=0.5, phi=0.5, gamma=np.array([0.0, 0.0]))
        rng = np.random.default_rng(123)
        noise_var = 0.37
        draws = np.concatenate(
            [synth_snapshot(path, manifold, grid, noise_var, rng).g for _ in range(2500)]
        )
        emp = np.mean(np.abs(draws) ** 2)
        assert emp == pytest.approx(noise_var, rel=0.05)

    def test_rejects_nonpositive_noise(self):
        grid = PilotGrid.continuous(4, 75e3)
        path = PathParams(tau=0.0, theta=0.5, phi=0.5, gamma=np.array([1.0, 0.0]))
        with pytest.raises(ValueError):
            synth_snapshot(path, tiny_manifold(), grid, noise_var=0.0, rng=0)


class TestManifoldSynthesis:
    def test_single_isotropic_element_is_dc_only(self):
        ports = [ArrayPort(position=(0.0, 0.0, 0.0), boresight_azimuth=0.0,
                           pattern="isotropic", polarization="h")]
        manifold = build_synthetic_manifold(ports, m_a=5, m_e=3)
        coeffs = np.abs(manifold.g_h[0])
        dc = 1 * 5 + 2  # p=(m_e-1)/2, q=(m_a-1)/2
        assert coeffs[dc] == pytest.approx(1.0, abs=1e-12)
        others = np.delete(coeffs, dc)
        assert np.all(others < 1e-12)
        # reconstructed response constant over angle
        for phi, theta in [(0.1, 0.3), (3.0, 2.0), (5.5, 1.2)]:
            val = manifold.g_h[0] @ angle_steering(phi, theta, 5, 3)
            assert val == pytest.approx(1.0, abs=1e-10)

    def test_two_element_phase_difference_matches_plane_wave(self):
        # analytic plane-wave oracle: half-wavelength pair along x
        ports = [
            ArrayPort(position=(0.25, 0.0, 0.0), boresight_azimuth=0.0,
                      pattern="isotropic", polarization="h"),
            ArrayPort(position=(-0.25, 0.0, 0.0), boresight_azimuth=0.0,
                      pattern="isotropic", polarization="h"),
        ]
        manifold = build_synthetic_manifold(ports, m_a=13, m_e=9)
        theta = math.pi / 2
        for phi in np.linspace(0, TWO_PI, 17, endpoint=False):
            d = angle_steering(phi, theta, 13, 9)
            r0 = manifold.g_h[0] @ d
            r1 = manifold.g_h[1] @ d
            measured = np.angle(r0 / r1)
            analytic = TWO_PI * 0.5 * math.cos(phi)
            assert math.remainder(measured - analytic, TWO_PI) == pytest.approx(0.0, abs=2e-3)

    def test_cylindrical_array_round_trip_rms(self):
        ports = cylindrical_array()
        assert len(ports) == 20
        manifold = build_synthetic_manifold(ports, m_a=15, m_e=15)
        assert reconstruction_rms(manifold, ports) <= 0.01

    def test_insufficient_sampling_rejected(self):
        ports = cylindrical_array()
        with pytest.raises(ValueError):
            build_synthetic_manifold(ports, m_a=7, m_e=5, n_az=8, n_el=40)


class TestManifoldIO:
    def test_round_trip(self, tmp_path):
        manifold = build_synthetic_manifold(cylindrical_array(), m_a=7, m_e=5)
        path = tmp_path / "array.manifold"
        save_manifold(manifold, path)
        loaded = load_manifold(path)
        assert loaded.m_an == manifold.m_an
        np.testing.assert_array_equal(loaded.g_h, manifold.g_h)
        np.testing.assert_array_equal(loaded.g_v, manifold.g_v)
        assert loaded.g_f is None

    def test_round_trip_with_freq_gains(self, tmp_path):
        base = build_synthetic_manifold(cylindrical_array(), m_a=7, m_e=5)
        gains = np.exp(1j * np.linspace(0, 1, 16))
        manifold = ArrayManifold(m_an=base.m_an, m_a=7, m_e=5,
                                 g_h=base.g_h, g_v=base.g_v, g_f=gains)
        path = tmp_path / "array.manifold"
        save_manifold(manifold, path)
        loaded = load_manifold(path)
        np.testing.assert_array_equal(loaded.g_f, gains)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("not a manifold\n")
        with pytest.raises(ValueError):
            load_manifold(path)


def test_snapshot_validation():
    with pytest.raises(ValueError):
        ChannelSnapshot(g=np.ones(4), noise_var=0.0)
