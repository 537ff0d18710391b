"""Factorization g = g~ o psi of a flow with drift into a drift-free stochastic flow and a random ODE flow.

g~ solves the Stratonovich equation dg~ = sigma(g~) o dW with its tangent flow J,
the pulled-back drift b~(t, y) = J(t, y)^-1 b(t, g~_t(y)) lives on the particle
grid of g~, and psi solves dpsi/dt = b~(t, psi).  The transport functional of g
is rebuilt as int theta_t(y) psi(g~_t(y)) dy with theta the solution of the
random transport equation d theta/dt = -b~ . grad theta, theta_0 = phi.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .drift import SpectralField, drift_energy
from .energy import GradientFamily, PartitionFamily, generalized_energy_lb
from .flow import NonFiniteStateError, brownian_source, heun_step, incompressibility_report, iter_ensembles, \
    steps_for, PathEnsemble
from .spectral import TWO_PI, NoiseBasis, TestFunction, TrigPoly, torus_distance, \
    uniform_grid, wrap
from .transport import TransportSeries, martingale_residual, weighted_series

PDE_GRID = 128
RECORD_GRID = 64


class DegenerateJacobianError(FloatingPointError):
    pass


@dataclass
class MartingaleFlowRecord:
    """Drift-free Stratonovich flow on a grid with its tangent flow, one replica."""

    basis: NoiseBasis
    side: int
    dt: float
    T: float
    seed: int
    replica: int
    noise_dt: float
    noise: np.ndarray                        # (S, n_fields)
    positions: np.ndarray | None = None      # (S+1, N, 2), None when streamed
    jacobians: np.ndarray | None = None      # (S+1, N, 2, 2)
    det_range: tuple = (1.0, 1.0)

    @property
    def S(self) -> int:
        return self.noise.shape[0]

    @property
    def stored(self) -> bool:
        return self.positions is not None

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.S + 1) * self.dt

    @property
    def initial(self) -> np.ndarray:
        return uniform_grid(self.side)

    def steps(self):
        """Yield (n, g~_{t_n}, J_{t_n}) for n = 0..S, from storage or recomputed."""
        if self.stored:
            for n in range(self.S + 1):
                yield n, self.positions[n], self.jacobians[n]
            return
        x = self.initial
        J = np.broadcast_to(np.eye(2), (len(x), 2, 2)).copy()
        yield 0, x, J
        lo, hi = 1.0, 1.0
        for n in range(self.S):
            x, J = heun_step(x, n * self.dt, self.dt, self.noise[n], self.basis, None, J)
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(J))):
                raise NonFiniteStateError("nonfinite tangent flow")
            d = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
            lo, hi = min(lo, float(d.min())), max(hi, float(d.max()))
            if lo <= 0:
                raise DegenerateJacobianError(f"det J reached {lo:.3e}; reduce dt or T")
            yield n + 1, x, J
        self.det_range = (lo, hi)

    def det(self) -> np.ndarray:
        J = self.jacobians
        return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]

    def det_report(self) -> dict:
        lo, hi = self.det_range
        return {"min_det": lo, "max_det": hi, "max_dev": max(hi - 1, 1 - lo),
                "bound": 5 * np.sqrt(self.dt), "positive": lo > 0}

    def as_ensemble(self) -> PathEnsemble:
        return PathEnsemble(self.initial, self.positions, self.dt, 1, self.seed, self.replica, self.noise_dt,
                            self.basis, SpectralField.zero(self.T), "heun", self.noise)

    def incompressibility(self, tests: Sequence[TestFunction]) -> dict:
        return incompressibility_report(self.as_ensemble(), tests).to_json()


def _heun_drift_free(x, noise, dt, basis):
    for n in range(noise.shape[0]):
        x, _ = heun_step(x, n * dt, dt, noise[n], basis, None)
    return x


def martingale_flow_with_jacobian(basis: NoiseBasis, side: int, dt: float, T: float, seed: int,
                                  replica: int = 0, noise_dt: float | None = None,
                                  store: bool = True) -> MartingaleFlowRecord:
    """Heun steps for g~ and its tangent flow J (exact derivative of the discrete map).

    With ``store=False`` only the noise is kept and the trajectory is recomputed
    on demand (det J is then tracked, and degeneracy raised, during each pass),
    which keeps fine grids within memory.
    """
    steps_for(T, dt)
    src = brownian_source(basis, T, dt, seed, noise_dt)
    noise = src.increments(replica, int(round(dt / src.noise_dt)))
    rec = MartingaleFlowRecord(basis, side, dt, T, seed, replica, src.noise_dt, noise)
    if store:
        xs, js = zip(*[(x, J) for _, x, J in rec.steps()])
        rec.positions, rec.jacobians = np.stack(xs), np.stack(js)
    return rec


def _pullback_step(drift: SpectralField, t: float, x: np.ndarray, J: np.ndarray) -> np.ndarray:
    b = drift.evaluate(t, x)
    out = np.linalg.solve(J, b[..., None])[..., 0]
    if not np.all(np.isfinite(out)):
        raise NonFiniteStateError("nonfinite pullback drift")
    return out


def pullback_drift(record: MartingaleFlowRecord, drift: SpectralField) -> np.ndarray:
    """b~(t_n, y) = J(t_n, y)^-1 b(t_n, g~_{t_n}(y)) at every step and grid point, shape (S+1, N, 2)."""
    if abs(drift.T - record.T) > 1e-12:
        raise ValueError("drift and record live on different horizons")
    return np.stack([_pullback_step(drift, n * record.dt, x, J) for n, x, J in record.steps()])


def bilinear(values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Periodic bilinear interpolation of grid values (side, side, ...) at points (..., 2)."""
    side = values.shape[0]
    h = TWO_PI / side
    u = np.mod(points, TWO_PI) / h
    i0 = np.floor(u).astype(int)
    f = u - i0
    i0 %= side
    i1 = (i0 + 1) % side
    a, b = i0[..., 0], i0[..., 1]
    c, d = i1[..., 0], i1[..., 1]
    extra = (None,) * (values.ndim - 2)
    fx = f[..., 0][(...,) + extra]
    fy = f[..., 1][(...,) + extra]
    return ((1 - fx) * (1 - fy) * values[a, b] + fx * (1 - fy) * values[c, b]
            + (1 - fx) * fy * values[a, d] + fx * fy * values[c, d])


def _rk4_frozen(grid: np.ndarray, y: np.ndarray, dt: float) -> np.ndarray:
    f = lambda z: bilinear(grid, z)  # noqa: E731
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(y)):
        raise NonFiniteStateError("psi left the resolved region")
    return y


def integrate_psi(record: MartingaleFlowRecord, drift: SpectralField, points: np.ndarray) -> np.ndarray:
    """RK4 for dpsi/dt = b~(t, psi), b~ bilinear in space and frozen over each step.

    b~ is formed step by step alongside g~ and J, so nothing of size S x N is kept.
    """
    y = np.asarray(points, dtype=float).copy()
    side = record.side
    for n, x, J in record.steps():
        if n == record.S:
            break
        grid = _pullback_step(drift, n * record.dt, x, J).reshape(side, side, 2)
        y = _rk4_frozen(grid, y, record.dt)
    return wrap(y)


def factorize(drift: SpectralField, record: MartingaleFlowRecord, particle_side: int = 16) -> dict:
    """max over particles of dist(g_T(x), g~_T(psi_T(x))) with g, g~ driven by the record's noise.

    The particles form a ``particle_side``^2 grid; g uses the same Heun scheme.
    """
    pts = uniform_grid(particle_side)
    [ens] = next(iter_ensembles(record.basis, drift, particle_side, record.dt, record.seed, 1,
                                noise_dt=record.noise_dt, thin=record.S, scheme="heun",
                                replica_offset=record.replica, workers=1))
    g_T = ens.terminal
    psi_T = integrate_psi(record, drift, pts)
    composed = _heun_drift_free(psi_T, record.noise, record.dt, record.basis)
    dist = torus_distance(g_T, composed)
    return {"max_distance": float(dist.max()), "mean_distance": float(dist.mean()),
            "particles": int(len(pts)), "dt": record.dt, "T": record.T}


def weak_divergence_check(record: MartingaleFlowRecord, drift: SpectralField, tests: Sequence[TrigPoly],
                          tol: float = 0.03) -> dict:
    """Weak divergence of b~: int <grad phi, b~(t, y)> dy by grid quadrature, for every step and test."""
    y = record.initial
    grads = [f.grad()(y) for f in tests]
    res = np.empty((record.S + 1, len(tests)))
    for n, x, J in record.steps():
        bt = _pullback_step(drift, n * record.dt, x, J)
        for k, g in enumerate(grads):
            res[n, k] = np.mean(np.sum(g * bt, axis=-1))
    m = float(np.max(np.abs(res)))
    return {"max_residual": m, "max_per_test": np.max(np.abs(res), axis=0).tolist(), "tol": tol, "pass": m <= tol}


@dataclass
class ThetaField:
    """Grid solution of the transport equation, snapshots at every step."""

    values: np.ndarray      # (S+1, side, side)
    times: np.ndarray
    phi: object = None
    meta: dict = field(default_factory=dict)

    @property
    def side(self) -> int:
        return self.values.shape[1]

    def integral(self) -> np.ndarray:
        return self.values.mean(axis=(1, 2))

    def square_integral(self) -> np.ndarray:
        return (self.values ** 2).mean(axis=(1, 2))

    def conservation(self) -> dict:
        m, q = self.integral(), self.square_integral()
        return {"mass_drift": float(np.max(np.abs(m - m[0]))),
                "l2_decay": float((q[0] - q[-1]) / q[0]) if q[0] > 0 else 0.0}

    def sample(self, n: int, points: np.ndarray) -> np.ndarray:
        return bilinear(self.values[n], points)


def transport_pde_theta(record: MartingaleFlowRecord, drift: SpectralField, phi: TestFunction,
                        side: int = PDE_GRID, btilde: np.ndarray | None = None) -> ThetaField:
    """Semi-Lagrangian solve of d theta/dt = -b~ . grad theta on a side^2 grid.

    theta(t+dt, y) = theta(t, y - dt b~(t, y)) with bilinear interpolation; b~ comes
    from the record grid by bilinear interpolation.  A uniform additive correction
    after each step restores int theta exactly (the continuous equation conserves it).
    """
    bt = pullback_drift(record, drift) if btilde is None else btilde
    grid = bt.reshape(record.S + 1, record.side, record.side, 2)
    y = uniform_grid(side)
    th = np.asarray(phi(y), dtype=float).reshape(side, side)
    mass = th.mean()
    out = [th]
    for n in range(record.S):
        v = bilinear(grid[n], y)
        th = bilinear(th, y - record.dt * v).reshape(side, side)
        th = th + (mass - th.mean())
        out.append(th)
    return ThetaField(np.stack(out), record.times.copy(), phi, {"side": side})


def theta_sigma_b(record: MartingaleFlowRecord, drift: SpectralField, thetas: Sequence[ThetaField],
                  psis: Sequence[TrigPoly], track: Sequence = ()) -> TransportSeries:
    """Theta_t(phi, psi) = int theta_t(y) psi(g~_t(y)) dy on the record grid.

    The series carries the drift integrand Theta(theta_t, div(psi b)) evaluated at
    g~, the Laplacian and the martingale integrands, plus the record's increments.
    """
    if not record.stored:
        raise ValueError("theta_sigma_b needs a stored record")
    y = record.initial
    w = np.stack([np.stack([t.sample(n, y) for t in thetas], axis=-1) for n in range(record.S + 1)])
    w = w / len(y)
    return weighted_series(w, record.positions, record.times, psis, drift, record.basis,
                           phis=[t.phi for t in thetas], track=track, increments=record.noise)


def flow_series_heun(record: MartingaleFlowRecord, drift: SpectralField, phis, psis) -> TransportSeries:
    """Theta of the flow g itself (same noise, Heun) on the record grid."""
    from .transport import theta_series

    [ens] = next(iter_ensembles(record.basis, drift, record.side, record.dt, record.seed, 1,
                                noise_dt=record.noise_dt, scheme="heun", replica_offset=record.replica,
                                workers=1))
    return theta_series(ens, phis, psis, keep_increments=False)


def construction_check(record: MartingaleFlowRecord, drift: SpectralField, phis: Sequence[TrigPoly],
                       psis: Sequence[TrigPoly], partition: int = 4, side: int = PDE_GRID,
                       slack: float = 0.05, match_tol: float = 0.05) -> dict:
    """Rebuild Theta from the transport equation and compare it with the flow.

    Checks: the energy lower bound of the rebuilt Theta (partition x embedding
    family) against the drift energy with ``slack``; the integrated drift
    identity (realized drift of the rebuilt Theta against int Theta(theta, div(psi b)));
    and agreement with the flow-built Theta on unit-norm pairs.
    """
    from .transport import function_norm

    bt = pullback_drift(record, drift)
    thetas = [transport_pde_theta(record, drift, f, side, bt) for f in phis]
    track = [(j, k) for j in range(len(phis)) for k in range(len(psis))]
    series = theta_sigma_b(record, drift, thetas, psis, track=track)

    # realized drift = Theta_T - Theta_0 - 1/2 int Lap - martingale part, against int D dt
    dt = record.dt
    left = lambda a: np.sum(a[:, :-1], axis=1) * dt  # noqa: E731
    realized = np.empty((len(phis), len(psis)))
    predicted = left(series.drift)[0]
    for p, (j, k) in enumerate(track):
        th = series.theta[0, :, j, k]
        mart = np.sum(series.mart[0, :-1, p] * series.increments[0], axis=-1).sum() if len(record.basis) else 0.0
        realized[j, k] = th[-1] - th[0] - 0.5 * left(series.lap[:, :, j, k])[0] - mart
    ident = float(np.linalg.norm(realized - predicted) / max(np.linalg.norm(predicted), 1e-300))

    flow = flow_series_heun(record, drift, phis, psis)
    norms = np.outer([function_norm(f) for f in phis], [g.norm() for g in psis])
    match = float(np.max(np.abs(series.theta[0] - flow.theta[0]) / norms))

    part = PartitionFamily(partition)
    grads = GradientFamily()
    p_thetas = [transport_pde_theta(record, drift, f, side, bt) for f in part.functions()]
    p_series = theta_sigma_b(record, drift, p_thetas, grads.functions)
    lb = generalized_energy_lb(p_series, part, grads)
    E = drift_energy(drift)
    cons = [t.conservation() for t in thetas]
    return {
        "drift_energy": E,
        "energy_lb": lb.value,
        "energy_bound_pass": bool(lb.value <= E * (1 + slack) + 1e-12),
        "identity_error": ident,
        "identity_pass": ident <= 0.10,
        "max_flow_mismatch": match,
        "match_pass": match <= match_tol,
        "martingale_residual": martingale_residual(series)["max_relative"],
        "conservation": cons,
        "pass": bool(lb.value <= E * (1 + slack) + 1e-12 and ident <= 0.10 and match <= match_tol),
    }
