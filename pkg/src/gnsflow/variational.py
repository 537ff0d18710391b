"""Energy minimization under a prescribed final configuration, and flows with a prescribed rough drift.

The final configuration is a coupling eta on M x M with uniform marginals; a
drift b is admissible when E[Theta_T(phi, psi)] matches the eta-moments of a
fixed set of test pairs.  The minimization is a penalty method over a finite
drift family, evaluated with common random numbers so the objective is a smooth
deterministic function of the coefficients.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .drift import SpectralField, drift_energy, hodge_regularize, time_mollify
from .energy import GradientFamily, PartitionFamily, generalized_energy_lb
from .flow import EmpiricalCoupling, endpoint_coupling, iter_ensembles, simulate_ensemble, steps_for
from .spectral import (
    NoiseBasis, TestFunction, TrigPoly, VectorTrigPoly, evaluate_test_functions, l2_inner, mode_field,
    uniform_grid,
)
from .transport import drift_identity, quadrature_points, theta_series

# -- final configurations ----------------------------------------------------------------------


class FinalConfiguration:
    """A coupling eta(dx, dy) with uniform marginals, known through its moments."""

    def moments(self, phis: Sequence[TestFunction], psis: Sequence[TestFunction]) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class HeatShiftConfiguration(FinalConfiguration):
    """y = x + shift followed by the heat kernel run for ``heat_time``.

    This is the endpoint law of the flow with constant drift shift/T driven by a
    normalized noise basis for time heat_time (zero for the deterministic shift).
    Moments are int phi(x) (P_s psi)(x + shift) dx, exact for trig psi.
    """

    shift: tuple = (0.0, 0.0)
    heat_time: float = 0.0

    @classmethod
    def diagonal(cls) -> "HeatShiftConfiguration":
        return cls()

    def moments(self, phis, psis):
        moved = [ps.heat(self.heat_time).shift(self.shift) for ps in psis]
        pts = quadrature_points()
        table = np.empty((len(phis), len(psis)))
        for j, f in enumerate(phis):
            for k, g in enumerate(moved):
                if isinstance(f, TrigPoly):
                    table[j, k] = l2_inner(f, g)
                else:
                    table[j, k] = float(np.mean(np.asarray(f(pts)) * g(pts)))
        return table, np.zeros_like(table)

    def describe(self) -> dict:
        return {"kind": "heat_shift", "shift": list(self.shift), "heat_time": self.heat_time}


@dataclass(frozen=True)
class EmpiricalConfiguration(FinalConfiguration):
    coupling: EmpiricalCoupling

    def moments(self, phis, psis):
        return self.coupling.moments(phis, psis)

    def describe(self) -> dict:
        return {"kind": "empirical", "pairs": int(len(self.coupling.x)),
                "replicas": int(len(np.unique(self.coupling.replica)))}


@dataclass(frozen=True)
class TableConfiguration(FinalConfiguration):
    """Moments given directly for declared families (passthrough)."""

    table: np.ndarray
    se: np.ndarray | None = None

    def moments(self, phis, psis):
        t = np.asarray(self.table, dtype=float)
        if t.shape != (len(phis), len(psis)):
            raise ValueError(f"table shape {t.shape} does not match families ({len(phis)}, {len(psis)})")
        return t, (np.zeros_like(t) if self.se is None else np.asarray(self.se, dtype=float))

    def describe(self) -> dict:
        return {"kind": "table", "shape": list(np.shape(self.table))}


def moment_targets(eta: FinalConfiguration, phis, psis) -> tuple[np.ndarray, np.ndarray]:
    """Target table target[j, k] = int phi_j(x) psi_k(y) eta(dx, dy) and its standard error."""
    return eta.moments(phis, psis)


def check_configuration(eta: FinalConfiguration, phis, psis, tol: float = 1e-6, n_se: float = 3.0) -> dict:
    """First-marginal masses reproduced (psi = 1) and moments bounded by ||phi|| ||psi||."""
    from .transport import function_mean, function_norm

    one = TrigPoly.constant(1.0)
    table, se = eta.moments(list(phis), list(psis) + [one])
    masses = np.array([function_mean(f) for f in phis])
    mass_err = np.abs(table[:, -1] - masses)
    bound = np.outer([function_norm(f) for f in phis], [function_norm(g) for g in list(psis) + [one]])
    excess = np.abs(table) - bound - n_se * se
    return {"max_mass_error": float(mass_err.max(initial=0.0)), "max_excess": float(excess.max(initial=-np.inf)),
            "pass": bool(np.all(mass_err <= tol + n_se * se[:, -1]) and np.all(excess <= tol))}


@dataclass
class MomentSet:
    """Test pairs (phis[j], psis[k]) whose eta-moments define the constraint."""

    phis: list
    psis: list
    pairs: list

    def __len__(self) -> int:
        return len(self.pairs)

    def select(self, table: np.ndarray) -> np.ndarray:
        return np.array([table[j, k] for j, k in self.pairs])


def constraint_moments() -> MomentSet:
    """Four partition bumps (2 x 2) times the embedding family, plus degree-2 harmonic pairs: 28 moments.

    The harmonic pairs are (h, h) for the cos and sin of k in {(2,0), (0,2), (1,1), (1,-1)}
    and (cos k, sin k) for the same four k.
    """
    bumps = PartitionFamily(2).functions()
    emb = GradientFamily().functions
    ks = [(2, 0), (0, 2), (1, 1), (1, -1)]
    harm = [g(k) for k in ks for g in (TrigPoly.cos, TrigPoly.sin)]
    phis = bumps + harm
    psis = emb + harm
    pairs = [(j, k) for j in range(4) for k in range(4)]
    pairs += [(4 + h, 4 + h) for h in range(8)]
    pairs += [(4 + 2 * i, 4 + 2 * i + 1) for i in range(4)]
    return MomentSet(phis, psis, pairs)


# -- drift family ------------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftParameterization:
    """Per time bin: a constant vector plus unit-normalized A/B modes with 0 < |k|_inf <= Kb.

    Coefficient count is bins * (2 + 2 * #modes), #modes = 2 Kb (Kb + 1).
    """

    Kb: int
    bins: int
    T: float

    @property
    def modes(self) -> list[tuple[int, int]]:
        return [(k1, k2) for k1 in range(0, self.Kb + 1) for k2 in range(-self.Kb, self.Kb + 1)
                if (k1 > 0 or k2 > 0)]

    @property
    def per_bin(self) -> int:
        return 2 + 2 * len(self.modes)

    @property
    def size(self) -> int:
        return self.bins * self.per_bin

    def _unit_fields(self) -> list[VectorTrigPoly]:
        out = []
        for k in self.modes:
            n = float(np.hypot(*k))
            out += [mode_field(k, "A") * (1 / n), mode_field(k, "B") * (1 / n)]
        return out

    def build(self, theta: np.ndarray) -> SpectralField:
        theta = np.asarray(theta, dtype=float).reshape(self.bins, self.per_bin)
        units = self._unit_fields()
        fields = []
        for row in theta:
            V = VectorTrigPoly.constant(row[:2])
            for c, U in zip(row[2:], units):
                if c != 0.0:
                    V = V + U * float(c)
            fields.append(V)
        return SpectralField.piecewise(fields, self.T)

    @property
    def energy_weights(self) -> np.ndarray:
        """Diagonal W with drift_energy(build(theta)) = theta . W theta / 2."""
        w = np.full(self.per_bin, 0.5)
        w[:2] = 1.0
        return np.tile(w, self.bins) * (self.T / self.bins)

    def energy(self, theta: np.ndarray) -> float:
        return 0.5 * float(np.sum(self.energy_weights * np.asarray(theta) ** 2))

    def describe(self) -> dict:
        return {"Kb": self.Kb, "bins": self.bins, "T": self.T, "coefficients": self.size}


# -- objective ----------------------------------------------------------------------------------


@dataclass
class SimulationSettings:
    grid_side: int = 16
    dt: float = 1e-2
    replicas: int = 16
    seed: int = 0
    workers: int | None = None


class MomentEstimator:
    """E[Theta_T] over a moment set with common random numbers (fixed seed and replicas)."""

    def __init__(self, moments: MomentSet, basis: NoiseBasis, sim: SimulationSettings):
        self.moments = moments
        self.basis = basis
        self.sim = sim
        self.initial = uniform_grid(sim.grid_side)
        self.fx = evaluate_test_functions(moments.phis, self.initial) / len(self.initial)
        self.evaluations = 0

    def per_replica(self, drift: SpectralField) -> np.ndarray:
        """Theta_T(phi_j, psi_k) for every replica and moment pair, shape (R, n_pairs)."""
        S = steps_for(drift.T, self.sim.dt)
        rows = []
        for chunk in iter_ensembles(self.basis, drift, self.sim.grid_side, self.sim.dt, self.sim.seed,
                                    self.sim.replicas, thin=S, chunk=self.sim.replicas, workers=self.sim.workers):
            for ens in chunk:
                gy = evaluate_test_functions(self.moments.psis, ens.terminal)
                rows.append(self.moments.select(self.fx.T @ gy))
        self.evaluations += 1
        return np.array(rows)

    def __call__(self, drift: SpectralField) -> np.ndarray:
        return self.per_replica(drift).mean(axis=0)


def reference_configuration(drift: SpectralField, basis: NoiseBasis, sim: SimulationSettings) -> EmpiricalConfiguration:
    """Endpoint coupling of ``drift`` under the estimator's own common random numbers."""
    S = steps_for(drift.T, sim.dt)
    ens = simulate_ensemble(basis, drift, sim.grid_side, sim.dt, sim.seed, sim.replicas, thin=S,
                            workers=sim.workers)
    return EmpiricalConfiguration(endpoint_coupling(ens))


@dataclass
class OptimizerConfig:
    seed: int = 0
    lambdas: tuple = (10.0, 100.0)
    budget: int = 400
    fd_step: float = 1e-3
    max_fd_coefficients: int = 40
    residual_threshold: float = 0.05
    spsa_a: float = 0.2
    spsa_c: float = 0.05


@dataclass
class MinimizationResult:
    drift: SpectralField
    theta: np.ndarray
    energy: float
    residual: float
    objective: float
    history: list = field(default_factory=list)
    evaluations: int = 0
    iterations: int = 0
    seed: int = 0
    method: str = ""
    converged: bool = False
    param: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "energy": self.energy,
            "residual": self.residual,
            "objective": self.objective,
            "evaluations": self.evaluations,
            "iterations": self.iterations,
            "seed": self.seed,
            "method": self.method,
            "converged": self.converged,
            "flagged": not self.converged,
            "coefficients": self.theta.tolist(),
            "parameterization": self.param,
            "history": self.history,
            "drift": self.drift.to_json(),
        }


class _Objective:
    def __init__(self, est: MomentEstimator, param: DriftParameterization, target: np.ndarray):
        self.est = est
        self.param = param
        self.target = target
        self.W = param.energy_weights

    def residual(self, theta: np.ndarray) -> np.ndarray:
        return self.est(self.param.build(theta)) - self.target

    def value(self, theta: np.ndarray, r: np.ndarray, lam: float) -> float:
        return self.param.energy(theta) + lam * float(r @ r)


def _levenberg(obj: _Objective, theta, r, lam, budget, cfg, log):
    """Levenberg-Marquardt on E(theta) + lam |r(theta)|^2 with a forward-difference Jacobian.

    Returns the best iterate; each accepted step lowers the objective.
    """
    n = len(theta)
    W = obj.W
    F = obj.value(theta, r, lam)
    mu = 1e-3
    used = 0
    while used + n + 1 <= budget:
        J = np.empty((len(r), n))
        for i in range(n):
            e = theta.copy()
            e[i] += cfg.fd_step
            J[:, i] = (obj.residual(e) - r) / cfg.fd_step
        used += n
        g = W * theta + 2 * lam * J.T @ r
        H = np.diag(W) + 2 * lam * J.T @ J
        improved = False
        while used < budget:
            step = np.linalg.solve(H + mu * np.diag(np.diag(H) + 1e-12), -g)
            trial = theta + step
            r_t = obj.residual(trial)
            used += 1
            F_t = obj.value(trial, r_t, lam)
            if F_t < F:
                rel = (F - F_t) / max(abs(F), 1e-300)
                theta, r, F = trial, r_t, F_t
                mu = max(mu / 3, 1e-9)
                improved = True
                log(theta, r, lam, F)
                break
            mu *= 4
            if mu > 1e8:
                break
        if not improved or rel < 1e-10 or np.linalg.norm(step) < 1e-10:
            break
    return theta, r, used


def _spsa(obj: _Objective, theta, r, lam, budget, cfg, log, rng):
    """SPSA on the penalty with the exact energy gradient; best-so-far by objective."""
    W = obj.W
    best = (obj.value(theta, r, lam), theta, r)
    used = 0
    k = 0
    A = 0.1 * budget / 3
    while used + 3 <= budget:
        ak = cfg.spsa_a / (k + 1 + A) ** 0.602
        ck = cfg.spsa_c / (k + 1) ** 0.101
        delta = rng.choice([-1.0, 1.0], size=len(theta))
        rp = obj.residual(theta + ck * delta)
        rm = obj.residual(theta - ck * delta)
        gpen = lam * (rp @ rp - rm @ rm) / (2 * ck) * delta
        theta = theta - ak * (W * theta + gpen)
        r = obj.residual(theta)
        used += 3
        k += 1
        F = obj.value(theta, r, lam)
        if F < best[0]:
            best = (F, theta, r)
            log(theta, r, lam, F)
    return best[1], best[2], used


def minimize_energy(target: FinalConfiguration, basis: NoiseBasis, param: DriftParameterization,
                    opt: OptimizerConfig = OptimizerConfig(), sim: SimulationSettings | None = None,
                    moments: MomentSet | None = None) -> MinimizationResult:
    """Penalized energy minimization over a finite drift family.

    F(b) = drift_energy(b) + lam * sum (E[Theta_T] - target)^2 with lam running
    through ``opt.lambdas`` (each stage warm-started from the previous one).  The
    expectation uses common random numbers: the same seed and replicas at every
    evaluation.  Up to ``max_fd_coefficients`` coefficients, Levenberg-Marquardt
    with a finite-difference Jacobian; above, SPSA.
    """
    moments = moments or constraint_moments()
    sim = sim or SimulationSettings(seed=opt.seed)
    table, _ = moment_targets(target, moments.phis, moments.psis)
    tgt = moments.select(table)
    est = MomentEstimator(moments, basis, sim)
    obj = _Objective(est, param, tgt)
    theta = np.zeros(param.size)
    r = obj.residual(theta)
    history: list[dict] = []
    iteration = [0]

    def log(th, res, lam, F):
        iteration[0] += 1
        history.append({"iteration": iteration[0], "evaluations": est.evaluations, "lambda": lam,
                        "energy": param.energy(th), "residual": float(np.max(np.abs(res))), "objective": F})

    log(theta, r, opt.lambdas[0] if opt.lambdas else 0.0, obj.value(theta, r, opt.lambdas[0] if opt.lambdas else 0.0))
    method = "levenberg-marquardt" if param.size <= opt.max_fd_coefficients else "spsa"
    rng = np.random.default_rng(np.random.SeedSequence([opt.seed, 0x5B5A]))
    stages = list(opt.lambdas)
    for i, lam in enumerate(stages):
        remaining = opt.budget - est.evaluations
        share = remaining // (len(stages) - i)
        if method == "levenberg-marquardt":
            theta, r, _ = _levenberg(obj, theta, r, lam, share, opt, log)
        else:
            theta, r, _ = _spsa(obj, theta, r, lam, share, opt, log, rng)
    lam = stages[-1] if stages else 0.0
    drift = param.build(theta)
    res = float(np.max(np.abs(r))) if len(r) else 0.0
    return MinimizationResult(
        drift=drift, theta=theta, energy=drift_energy(drift), residual=res, objective=obj.value(theta, r, lam),
        history=history, evaluations=est.evaluations, iterations=iteration[0] - 1, seed=opt.seed, method=method,
        converged=res <= opt.residual_threshold, param=param.describe(),
    )


# -- prescribed rough drift ---------------------------------------------------------------------


@dataclass
class LadderSettings:
    grid_side: int = 32
    dt: float = 1e-3
    replicas: int = 8
    seed: int = 0
    partition: int = 8
    slack: float = 0.05
    identity_tol: float = 0.10
    workers: int | None = None


def identity_test_functions() -> tuple[list, list]:
    phis = [1 + TrigPoly.cos((0, 1)) * 0.5, 1 + TrigPoly.sin((1, 1)) * 0.5, 1 + TrigPoly.cos((1, -1)) * 0.5]
    psis = GradientFamily().functions
    return phis, psis


def prescribed_drift_flow(b_rough: SpectralField, eps_ladder: Sequence[float], basis: NoiseBasis,
                          cfg: LadderSettings = LadderSettings()) -> dict:
    """Regularize a rough divergence-free drift along an eps ladder and test the drift identity.

    For each eps, b_eps = time_mollify(hodge_regularize(b, eps), eps) drives the
    flow; the integrated drift of its transport functional is compared with the
    same flow tested against div(psi b) for the rough b.  The generalized-energy
    lower bound of each flow is checked against the energy of the rough drift.
    """
    E = drift_energy(b_rough)
    test_phis, psis = identity_test_functions()
    part = PartitionFamily(cfg.partition)
    phis = test_phis + part.functions()
    J0 = len(test_phis)
    rows = []
    for eps in eps_ladder:
        b_eps = time_mollify(hodge_regularize(b_rough, eps), eps)
        own = rough = None
        for chunk in iter_ensembles(basis, b_eps, cfg.grid_side, cfg.dt, cfg.seed, cfg.replicas,
                                    workers=cfg.workers):
            a = theta_series(chunk, phis, psis, keep_increments=False)
            b = theta_series([dataclasses.replace(e, drift=b_rough) for e in chunk], test_phis, psis,
                             keep_increments=False)
            own = a if own is None else own.merged(a)
            rough = b if rough is None else rough.merged(b)
        own_test = dataclasses.replace(own, phis=test_phis, theta=own.theta[:, :, :J0],
                                       drift=own.drift[:, :, :J0], lap=own.lap[:, :, :J0])
        ref = (np.sum(rough.drift[:, 1:-1], axis=1) + 0.5 * (rough.drift[:, 0] + rough.drift[:, -1])) * rough.dt
        ident = drift_identity(own_test, ref)
        lb = generalized_energy_lb(own, part, GradientFamily(), phi_offset=J0)
        rows.append({"eps": eps, "energy": drift_energy(b_eps), "identity_error": ident["relative_error"],
                     "energy_lb": lb.value, "energy_lb_se": lb.stderr})
    energies = [r["energy"] for r in rows]
    errors = [r["identity_error"] for r in rows]
    checks = {
        "energy_contraction": all(e <= E for e in energies),
        "energy_nondecreasing": all(b >= a - 1e-15 for a, b in zip(energies, energies[1:])),
        "identity_decreasing": all(b < a for a, b in zip(errors, errors[1:])),
        "identity_final": errors[-1] <= cfg.identity_tol if errors else True,
        "energy_lb_bounded": all(r["energy_lb"] <= E * (1 + cfg.slack) for r in rows),
    }
    return {"rough_energy": E, "ladder": rows, "checks": checks, "pass": all(checks.values())}


# -- convexity probe ----------------------------------------------------------------------------


def mixture_probe(b1: SpectralField, b2: SpectralField, basis: NoiseBasis, target: FinalConfiguration,
                  sim: SimulationSettings = SimulationSettings(replicas=64), moments: MomentSet | None = None,
                  n_se: float = 3.0) -> dict:
    """Half-half randomized mixture of two admissible drifts.

    A fair coin per replica (keyed by the seed) chooses the drift.  The mixture's
    energy is estimated by the replica mean of the chosen drift energies and
    compared with the average of the two energies; its endpoint moments are
    compared with the target.
    """
    moments = moments or constraint_moments()
    E1, E2 = drift_energy(b1), drift_energy(b2)
    rng = np.random.default_rng(np.random.SeedSequence([sim.seed, 0xC011]))
    coins = rng.integers(0, 2, size=sim.replicas)
    est = MomentEstimator(moments, basis, sim)
    per = {0: est.per_replica(b1), 1: est.per_replica(b2)}
    # replica r uses drift coins[r]; same replica noise under either drift
    vals = np.array([per[c][r] for r, c in enumerate(coins)])
    energies = np.where(coins == 0, E1, E2)
    E_mix = float(energies.mean())
    se_E = float(energies.std(ddof=1) / np.sqrt(len(energies)))
    table, tse = moment_targets(target, moments.phis, moments.psis)
    tgt, tgt_se = moments.select(table), moments.select(tse)
    mean = vals.mean(axis=0)
    se = np.sqrt(vals.var(axis=0, ddof=1) / len(vals) + tgt_se ** 2)
    dev = np.abs(mean - tgt)
    return {
        "energy_1": E1, "energy_2": E2, "mixture_energy": E_mix, "mixture_energy_se": se_E,
        "heads": int(coins.sum()),
        "energy_pass": bool(E_mix <= 0.5 * (E1 + E2) + n_se * se_E),
        "max_z": float(np.max(dev / np.maximum(se, 1e-300))),
        "target_pass": bool(np.all(dev <= n_se * se + 1e-12)),
        "pass": bool(E_mix <= 0.5 * (E1 + E2) + n_se * se_E and np.all(dev <= n_se * se + 1e-12)),
    }
