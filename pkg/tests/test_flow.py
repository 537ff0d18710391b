import numpy as np
import pytest

from gnsflow.drift import SpectralField, smooth_drift
from gnsflow.flow import (
    NonFiniteStateError, PathEnsemble, brownian_source, endpoint_coupling, euler_step, heun_step,
    incompressibility_report, noise_displacement, noise_jacobian, sigma_values, simulate_ensemble,
    steps_for, worker_count,
)
from gnsflow.spectral import TWO_PI, NoiseBasis, PhaseTable, TrigPoly, build_noise_basis, uniform_grid


@pytest.fixture(scope="module")
def basis():
    return build_noise_basis(2)


@pytest.fixture
def pts():
    return np.random.default_rng(3).uniform(0, TWO_PI, (25, 2))


class TestSteps:
    def test_steps_for(self):
        assert steps_for(0.5, 1e-3) == 500
        with pytest.raises(ValueError, match="does not divide"):
            steps_for(0.5, 0.003)
        with pytest.raises(ValueError):
            steps_for(0.5, 0.0)

    def test_worker_count_env(self, monkeypatch):
        monkeypatch.setenv("GNSFLOW_WORKERS", "3")
        assert worker_count() == 3
        assert worker_count(2) == 2


class TestNoise:
    def test_nested_refinement(self, basis):
        src = brownian_source(basis, 0.1, 1e-3, 5, 5e-4)
        fine = src.increments(2)
        assert np.allclose(src.increments(2, 2), fine.reshape(-1, 2, len(basis)).sum(axis=1), atol=0)

    def test_replicas_independent_and_deterministic(self, basis):
        src = brownian_source(basis, 0.1, 1e-3, 5, None)
        assert np.array_equal(src.increments(0), src.increments(0))
        assert not np.allclose(src.increments(0), src.increments(1))

    def test_variance(self, basis):
        z = brownian_source(basis, 1.0, 1e-3, 1, None).increments(0)
        assert z.var() == pytest.approx(1e-3, rel=0.05)

    def test_bad_ratio(self, basis):
        with pytest.raises(ValueError):
            brownian_source(basis, 0.1, 1e-3, 0, 3e-4)


class TestKernels:
    def test_sigma_values_match_fields(self, basis, pts):
        vals = sigma_values(pts, basis)
        for i, f in enumerate(basis.fields()):
            assert np.allclose(vals[:, i], f(pts), atol=1e-13)

    def test_displacement_is_sigma_dw(self, basis, pts):
        dw = np.random.default_rng(1).standard_normal(len(basis))
        ref = np.einsum("nif,i->nf", sigma_values(pts, basis), dw)
        assert np.allclose(noise_displacement(PhaseTable(pts, basis.cutoff), dw, basis), ref, atol=1e-13)

    def test_jacobian_by_finite_differences(self, basis, pts):
        dw = np.random.default_rng(2).standard_normal(len(basis))
        M = noise_jacobian(PhaseTable(pts, basis.cutoff), dw, basis)
        h = 1e-6
        for b in range(2):
            e = np.zeros(2)
            e[b] = h
            fd = (noise_displacement(PhaseTable(pts + e, 2), dw, basis)
                  - noise_displacement(PhaseTable(pts - e, 2), dw, basis)) / (2 * h)
            assert np.allclose(M[..., :, b], fd, atol=1e-7)

    def test_heun_jacobian_is_derivative_of_step(self, basis, pts):
        drift = smooth_drift(0.1)
        dw = np.random.default_rng(4).standard_normal(len(basis)) * 0.05
        _, J = heun_step(pts, 0.0, 0.01, dw, basis, drift, np.broadcast_to(np.eye(2), (len(pts), 2, 2)).copy())
        h = 1e-6
        for b in range(2):
            e = np.zeros(2)
            e[b] = h
            xp, _ = heun_step(pts + e, 0.0, 0.01, dw, basis, drift)
            xm, _ = heun_step(pts - e, 0.0, 0.01, dw, basis, drift)
            fd = ((xp - xm + np.pi) % TWO_PI - np.pi) / (2 * h)
            assert np.allclose(J[..., :, b], fd, atol=1e-7)

    def test_euler_and_heun_agree_without_noise_for_constant_drift(self, pts):
        d = SpectralField.constant((0.3, -0.1), 1.0)
        empty = NoiseBasis.empty()
        a = euler_step(pts, 0.0, 0.1, np.zeros(0), empty, d)
        b, _ = heun_step(pts, 0.0, 0.1, np.zeros(0), empty, d)
        assert np.allclose(a, b)


class TestEnsembles:
    def test_constant_drift_exact_shift(self):
        d = SpectralField.constant((0.4, 0.2), 0.5)
        [e] = simulate_ensemble(NoiseBasis.empty(), d, 4, 0.01, 0)
        shift = (e.terminal - e.initial + np.pi) % TWO_PI - np.pi
        assert np.allclose(shift, [0.2, 0.1], atol=1e-12)

    def test_frozen_without_noise_or_drift(self):
        [e] = simulate_ensemble(NoiseBasis.empty(), SpectralField.zero(0.1), 4, 0.01, 0)
        assert np.array_equal(e.positions[-1], e.initial)

    def test_bit_identical_across_workers_and_chunks(self, basis):
        d = smooth_drift(0.05)
        a = simulate_ensemble(basis, d, 6, 0.01, 11, 5, chunk=5, workers=1)
        b = simulate_ensemble(basis, d, 6, 0.01, 11, 5, chunk=2, workers=3)
        assert all(np.array_equal(x.positions, y.positions) for x, y in zip(a, b))

    def test_replica_offset_reproduces_replica(self, basis):
        d = smooth_drift(0.05)
        full = simulate_ensemble(basis, d, 4, 0.01, 2, 3)
        [third] = simulate_ensemble(basis, d, 4, 0.01, 2, 1, replica_offset=2)
        assert np.array_equal(full[2].positions, third.positions)

    def test_thin_and_records(self, basis):
        [e] = simulate_ensemble(basis, SpectralField.zero(0.1), 4, 0.01, 0, thin=5)
        assert e.positions.shape == (3, 16, 2)
        assert np.allclose(e.times, [0, 0.05, 0.1])
        with pytest.raises(ValueError):
            simulate_ensemble(basis, SpectralField.zero(0.1), 4, 0.01, 0, thin=3)

    def test_increments_regenerated(self, basis):
        [e] = simulate_ensemble(basis, SpectralField.zero(0.1), 4, 0.01, 9)
        stored = e.increments.copy()
        fresh = PathEnsemble(e.initial, e.positions, e.dt, e.thin, e.seed, e.replica, e.noise_dt, e.basis, e.drift)
        assert np.array_equal(fresh.increments, stored)

    def test_nonfinite_flagged(self):
        V = smooth_drift(0.1).fields[0] * np.nan
        with pytest.raises(ValueError):
            SpectralField.steady(V, 0.1)

    def test_nonfinite_state_raises(self, basis, monkeypatch):
        import gnsflow.flow as flow

        monkeypatch.setattr(flow, "euler_step", lambda x, *a: x * np.nan)
        with pytest.raises(NonFiniteStateError):
            simulate_ensemble(basis, SpectralField.zero(0.02), 4, 0.01, 0)

    def test_points_argument(self, basis):
        p = np.array([[1.0, 2.0], [3.0, 4.0]])
        [e] = simulate_ensemble(basis, SpectralField.zero(0.02), 0, 0.01, 0, points=p)
        assert np.array_equal(e.initial, p)

    def test_heat_kernel_oracle_small(self, basis):
        # E exp(ik.g_T(x)) = exp(ik.x) exp(-|k|^2 T/2) for the normalized noise
        T = 0.2
        ens = simulate_ensemble(basis, SpectralField.zero(T), 8, 0.01, 0, 64, thin=20)
        for k in [(1, 0), (1, 1), (0, 2)]:
            k = np.array(k)
            per = np.array([np.mean(np.exp(1j * (e.terminal - e.initial) @ k)) for e in ens])
            se = np.sqrt((per.real.var(ddof=1) + per.imag.var(ddof=1)) / len(per))
            assert abs(per.mean() - np.exp(-0.5 * (k @ k) * T)) <= 3 * se


class TestIncompressibility:
    def test_report(self, basis):
        ens = simulate_ensemble(basis, smooth_drift(0.1), 32, 0.01, 0, 2)
        tests = [TrigPoly.cos((1, 0)), TrigPoly.sin((0, 1))]
        rep = incompressibility_report(ens, tests)
        assert rep.deviations.shape == (2, 11, 2)
        assert rep.max_deviation < 0.05
        assert np.max(np.abs(rep.deviations[:, 0])) < 1e-12
        assert rep.to_json()["n_records"] == 11

    def test_endpoint_coupling_moments(self, basis):
        ens = simulate_ensemble(NoiseBasis.empty(), SpectralField.zero(0.1), 16, 0.1, 0, 1)
        c = endpoint_coupling(ens)
        f = TrigPoly.cos((1, 0))
        mean, se = c.moments([f], [f])
        assert mean[0, 0] == pytest.approx(0.5, abs=1e-12)
        assert se[0, 0] == 0.0

    def test_uniform_grid_is_default_start(self, basis):
        [e] = simulate_ensemble(basis, SpectralField.zero(0.01), 5, 0.01, 0)
        assert np.array_equal(e.initial, uniform_grid(5))
