import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import dblquad

from gnsflow.drift import SpectralField, drift_energy, rough_drift
from gnsflow.spectral import TWO_PI, NoiseBasis, TrigPoly, VectorTrigPoly, build_noise_basis
from gnsflow.variational import (
    DriftParameterization, HeatShiftConfiguration, LadderSettings, MomentEstimator, MomentSet, OptimizerConfig,
    SimulationSettings, TableConfiguration, check_configuration, constraint_moments, minimize_energy, mixture_probe,
    prescribed_drift_flow, reference_configuration,
)


class TestConfigurations:
    def test_heat_shift_against_quadrature(self):
        shift, s = (0.4, -0.7), 0.3
        phi = lambda x: np.exp(np.cos(x[..., 0])) * (1 + 0.5 * np.sin(x[..., 1]))  # noqa: E731
        psi = TrigPoly.cos((1, 2)) + TrigPoly.sin((0, 1)) * 0.3
        table, se = HeatShiftConfiguration(shift, s).moments([phi], [psi])

        def integrand(x2, x1):
            y1, y2 = x1 + shift[0], x2 + shift[1]
            heat = np.exp(-s * 5 / 2) * np.cos(y1 + 2 * y2) + 0.3 * np.exp(-s / 2) * np.sin(y2)
            return phi(np.array([x1, x2])) * heat

        ref = dblquad(integrand, 0, TWO_PI, 0, TWO_PI)[0] / TWO_PI ** 2
        assert table[0, 0] == pytest.approx(ref, abs=1e-9)
        assert se[0, 0] == 0.0

    def test_diagonal_is_l2_inner(self):
        f = TrigPoly.cos((1, 0))
        t, _ = HeatShiftConfiguration.diagonal().moments([f], [f])
        assert t[0, 0] == pytest.approx(0.5)

    def test_check_configuration(self):
        eta = HeatShiftConfiguration((0.2, 0.1), 0.5)
        m = constraint_moments()
        assert check_configuration(eta, m.phis, m.psis)["pass"]

    def test_table_shape_checked(self):
        eta = TableConfiguration(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            eta.moments([TrigPoly.constant(1.0)], [TrigPoly.constant(1.0)])
        t, se = eta.moments([TrigPoly.constant(1.0)] * 2, [TrigPoly.constant(1.0)] * 2)
        assert se.shape == (2, 2)


class TestMoments:
    def test_count_and_pairs(self):
        m = constraint_moments()
        assert len(m) == 28
        assert len(set(m.pairs)) == 28
        assert all(0 <= j < len(m.phis) and 0 <= k < len(m.psis) for j, k in m.pairs)

    def test_select(self):
        m = MomentSet([0, 1], [0, 1, 2], [(1, 2), (0, 0)])
        assert np.array_equal(m.select(np.arange(6).reshape(2, 3)), [5, 0])


class TestParameterization:
    def test_size(self):
        p = DriftParameterization(Kb=1, bins=2, T=1.0)
        assert len(p.modes) == 4
        assert p.size == 2 * (2 + 8)

    @given(st.integers(0, 10_000), st.integers(0, 2), st.integers(1, 3))
    @settings(max_examples=25, deadline=None)
    def test_energy_matches_drift_energy(self, seed, Kb, bins):
        p = DriftParameterization(Kb=Kb, bins=bins, T=0.7)
        theta = np.random.default_rng(seed).standard_normal(p.size)
        assert p.energy(theta) == pytest.approx(drift_energy(p.build(theta)), rel=1e-10)

    def test_built_drift_is_divergence_free(self):
        p = DriftParameterization(Kb=2, bins=1, T=1.0)
        b = p.build(np.random.default_rng(0).standard_normal(p.size))
        assert b.max_divergence(np.random.default_rng(1).uniform(0, TWO_PI, (30, 2))) < 1e-10


class TestEstimator:
    def test_reference_configuration_reproduces_estimator(self):
        basis = build_noise_basis(1)
        sim = SimulationSettings(grid_side=8, dt=0.05, replicas=4, seed=2)
        b = SpectralField.constant((0.3, 0.1), 0.5)
        m = constraint_moments()
        eta = reference_configuration(b, basis, sim)
        table, _ = eta.moments(m.phis, m.psis)
        assert np.allclose(MomentEstimator(m, basis, sim)(b), m.select(table), atol=1e-12)
        assert eta.describe()["replicas"] == 4

    def test_common_random_numbers(self):
        basis = build_noise_basis(1)
        est = MomentEstimator(constraint_moments(), basis, SimulationSettings(grid_side=8, dt=0.05, replicas=3))
        b = SpectralField.zero(0.2)
        assert np.array_equal(est(b), est(b))
        assert est.evaluations == 2


class TestMinimize:
    def test_deterministic_shift_recovered(self):
        # no noise: the admissible constant drift is shift / T with energy |shift|^2 / (2T)
        T = 1.0
        target = HeatShiftConfiguration((0.3, 0.0), 0.0)
        param = DriftParameterization(Kb=0, bins=1, T=T)
        res = minimize_energy(target, NoiseBasis.empty(), param, OptimizerConfig(lambdas=(100.0, 1e4), budget=80),
                              SimulationSettings(grid_side=8, dt=0.1, replicas=1))
        assert res.method == "levenberg-marquardt"
        assert np.allclose(res.theta, [0.3, 0.0], atol=0.01)
        assert res.energy == pytest.approx(0.045, rel=0.05)
        assert res.converged and res.residual < 1e-2
        assert [h["iteration"] for h in res.history] == list(range(1, len(res.history) + 1))

    def test_trivial_target_gives_zero_drift(self):
        T = 0.2
        basis = build_noise_basis(1)
        res = minimize_energy(HeatShiftConfiguration((0.0, 0.0), T), basis, DriftParameterization(0, 1, T),
                              OptimizerConfig(budget=12), SimulationSettings(grid_side=8, dt=0.05, replicas=4))
        assert res.energy < 1e-3

    def test_same_seed_same_result(self):
        T = 0.2
        basis = build_noise_basis(1)
        args = (HeatShiftConfiguration((0.1, 0.0), T), basis, DriftParameterization(0, 1, T),
                OptimizerConfig(budget=12, seed=5), SimulationSettings(grid_side=8, dt=0.05, replicas=2, seed=5))
        a, b = minimize_energy(*args), minimize_energy(*args)
        assert np.array_equal(a.theta, b.theta) and a.to_json()["history"] == b.to_json()["history"]

    def test_spsa_above_threshold(self):
        T = 0.2
        param = DriftParameterization(Kb=1, bins=5, T=T)
        res = minimize_energy(HeatShiftConfiguration((0.0, 0.0), 0.0), NoiseBasis.empty(), param,
                              OptimizerConfig(budget=9, lambdas=(10.0,)),
                              SimulationSettings(grid_side=4, dt=0.1, replicas=1))
        assert res.method == "spsa" and res.evaluations <= 9 + 1


class TestMixture:
    def test_identical_drifts(self):
        T = 0.2
        b = SpectralField.constant((0.5, 0.0), T)
        out = mixture_probe(b, b, build_noise_basis(1), HeatShiftConfiguration((0.1, 0.0), T),
                            SimulationSettings(grid_side=8, dt=0.05, replicas=16))
        assert out["mixture_energy"] == pytest.approx(out["energy_1"])
        assert out["mixture_energy_se"] == 0.0
        assert out["pass"], out

    def test_detects_wrong_target(self):
        T = 0.2
        b = SpectralField.constant((0.5, 0.0), T)
        out = mixture_probe(b, b, NoiseBasis.empty(), HeatShiftConfiguration((-1.0, 0.0), 0.0),
                            SimulationSettings(grid_side=8, dt=0.05, replicas=4))
        assert not out["target_pass"]


class TestPrescribedDrift:
    def test_small_ladder(self):
        b = rough_drift(0.2, 2, cutoff=2, seed=1)
        cfg = LadderSettings(grid_side=8, dt=1e-2, replicas=2, partition=2)
        out = prescribed_drift_flow(b, (0.1, 0.05), build_noise_basis(1), cfg)
        assert out["checks"]["energy_contraction"] and out["checks"]["energy_nondecreasing"]
        assert out["checks"]["energy_lb_bounded"]
        assert [r["eps"] for r in out["ladder"]] == [0.1, 0.05]

    def test_smooth_steady_drift_is_its_own_limit(self):
        V = VectorTrigPoly.constant((0.4, 0.0))
        b = SpectralField.steady(V, 0.2)
        cfg = LadderSettings(grid_side=8, dt=1e-2, replicas=2, partition=2)
        row = prescribed_drift_flow(b, (0.05,), NoiseBasis.empty(), cfg)["ladder"][0]
        # the mollifier loses mass near the ends only, hodge leaves constants alone
        assert row["energy"] <= drift_energy(b)
