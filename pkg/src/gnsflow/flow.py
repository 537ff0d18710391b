"""Lagrangian SDE flows dg = sigma(g) dW + b(t, g) dt on the torus.

All particles of one replica share a single Brownian path W (it is a flow of
maps, not a cloud of independent particles).  Increments are drawn from a
counter-based generator keyed by ``(seed, replica)`` in (step, field) order, so
any partition of the replicas over workers gives bit-identical output.  The
per-point stepping kernels only use elementwise operations for the same reason.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .drift import SpectralField
from .spectral import NoiseBasis, PhaseTable, TestFunction, evaluate_test_functions, uniform_grid, wrap

WORKERS_ENV = "GNSFLOW_WORKERS"


class NonFiniteStateError(FloatingPointError):
    pass


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def steps_for(T: float, dt: float) -> int:
    """Number of steps S with S*dt == T, or ValueError when dt does not divide T."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    S = int(round(T / dt))
    if S < 1 or abs(S * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"dt={dt} does not divide T={T}")
    return S


@dataclass(frozen=True)
class BrownianSource:
    """Gaussian increments keyed by (seed, replica); columns follow the basis field order.

    Increments are generated at resolution ``noise_dt`` and summed in blocks of
    ``ratio`` for a coarser step, so runs at dt and dt/2 see the same path.
    """

    seed: int
    n_fields: int
    noise_dt: float
    n_fine: int

    def increments(self, replica: int, ratio: int = 1) -> np.ndarray:
        if self.n_fine % ratio:
            raise ValueError("step ratio must divide the number of fine noise steps")
        if self.n_fields == 0:
            return np.zeros((self.n_fine // ratio, 0))
        ss = np.random.SeedSequence([int(self.seed) & 0xFFFFFFFFFFFFFFFF, int(replica)])
        rng = np.random.Generator(np.random.Philox(ss))
        z = rng.standard_normal((self.n_fine, self.n_fields)) * np.sqrt(self.noise_dt)
        if ratio == 1:
            return z
        return z.reshape(self.n_fine // ratio, ratio, self.n_fields).sum(axis=1)


def noise_displacement(table: PhaseTable, dw: np.ndarray, basis: NoiseBasis) -> np.ndarray:
    """sum_i sigma_i(x) dW_i; ``dw`` has shape batch + (n_fields,) broadcasting against points."""
    ks, ws = basis.classes
    shape = table.p1.shape[:-1]
    out = np.zeros(shape + (2,))
    pad = (slice(None),) * (dw.ndim - 1) + (None,) * (len(shape) - dw.ndim + 1)
    for c, ((k1, k2), w) in enumerate(zip(ks, ws)):
        e = table.phase(k1, k2)
        coeff = e.real * dw[..., 2 * c][pad] + e.imag * dw[..., 2 * c + 1][pad]
        out[..., 0] += (w * k2) * coeff
        out[..., 1] += (-w * k1) * coeff
    return out


def noise_jacobian(table: PhaseTable, dw: np.ndarray, basis: NoiseBasis) -> np.ndarray:
    """sum_i (grad sigma_i)(x) dW_i as matrices M[a, b] = d_b sigma^a."""
    ks, ws = basis.classes
    shape = table.p1.shape[:-1]
    out = np.zeros(shape + (2, 2))
    pad = (slice(None),) * (dw.ndim - 1) + (None,) * (len(shape) - dw.ndim + 1)
    for c, ((k1, k2), w) in enumerate(zip(ks, ws)):
        e = table.phase(k1, k2)
        coeff = -e.imag * dw[..., 2 * c][pad] + e.real * dw[..., 2 * c + 1][pad]
        v = (w * k2, -w * k1)
        for a in range(2):
            out[..., a, 0] += (v[a] * k1) * coeff
            out[..., a, 1] += (v[a] * k2) * coeff
    return out


def sigma_values(points: np.ndarray, basis: NoiseBasis) -> np.ndarray:
    """All basis fields at points, shape points.shape[:-1] + (n_fields, 2)."""
    ks, ws = basis.classes
    points = np.asarray(points, dtype=float)
    out = np.zeros(points.shape[:-1] + (len(basis), 2))
    if len(basis) == 0:
        return out
    e = PhaseTable(points, int(np.max(np.abs(ks)))).matrix(ks)
    v = np.stack([ws * ks[:, 1], -ws * ks[:, 0]], axis=-1)
    out[..., 0::2, :] = e.real[..., None] * v
    out[..., 1::2, :] = e.imag[..., None] * v
    return out


def _table_degree(basis: NoiseBasis, drift: SpectralField | None) -> int:
    d = basis.cutoff if len(basis) else 0
    if drift is not None:
        d = max(d, drift.degree)
    return d


def euler_step(x: np.ndarray, t: float, dt: float, dw: np.ndarray, basis: NoiseBasis,
               drift: SpectralField | None) -> np.ndarray:
    """One Euler-Maruyama step of the Ito equation, wrapped onto the torus."""
    table = PhaseTable(x, _table_degree(basis, drift))
    dx = noise_displacement(table, dw, basis) if len(basis) else np.zeros_like(x)
    if drift is not None:
        dx += drift.evaluate(t, x, table) * dt
    return wrap(x + dx)


def heun_step(x: np.ndarray, t: float, dt: float, dw: np.ndarray, basis: NoiseBasis,
              drift: SpectralField | None, jac: np.ndarray | None = None):
    """Stratonovich Heun step for x and, optionally, its tangent flow J.

    The J update is the exact derivative of the x update, so J is the Jacobian
    of the discrete flow map.
    """
    deg = _table_degree(basis, drift)
    t0 = PhaseTable(x, deg)
    s0 = noise_displacement(t0, dw, basis) if len(basis) else np.zeros_like(x)
    b0 = drift.evaluate(t, x, t0) * dt if drift is not None else 0.0
    xp = x + s0 + b0
    t1 = PhaseTable(xp, deg)
    s1 = noise_displacement(t1, dw, basis) if len(basis) else np.zeros_like(x)
    b1 = drift.evaluate(t, xp, t1) * dt if drift is not None else 0.0
    x_new = wrap(x + 0.5 * (s0 + s1) + 0.5 * (b0 + b1))
    if jac is None:
        return x_new, None
    m0 = noise_jacobian(t0, dw, basis)
    m1 = noise_jacobian(t1, dw, basis)
    if drift is not None:
        m0 = m0 + _drift_gradient(drift, t, x) * dt
        m1 = m1 + _drift_gradient(drift, t, xp) * dt
    jp = jac + m0 @ jac
    j_new = jac + 0.5 * (m0 @ jac + m1 @ jp)
    return x_new, j_new


def _drift_gradient(drift: SpectralField, t: float, x: np.ndarray) -> np.ndarray:
    V = drift.at(t)
    out = np.empty(x.shape[:-1] + (2, 2))
    out[..., 0, 0] = V.u1.d1()(x)
    out[..., 0, 1] = V.u1.d2()(x)
    out[..., 1, 0] = V.u2.d1()(x)
    out[..., 1, 1] = V.u2.d2()(x)
    return out


@dataclass
class PathEnsemble:
    """One replica: N particles started on a grid, positions at every ``thin``-th step.

    ``positions`` is time-major, shape (n_records, N, 2).  The Brownian increments
    are regenerated on demand from (seed, replica), never stored twice.
    """

    initial: np.ndarray
    positions: np.ndarray
    dt: float
    thin: int
    seed: int
    replica: int
    noise_dt: float
    basis: NoiseBasis
    drift: SpectralField
    scheme: str = "euler"
    _noise: np.ndarray | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return len(self.initial)

    @property
    def S(self) -> int:
        return steps_for(self.drift.T, self.dt)

    @property
    def T(self) -> float:
        return self.drift.T

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.positions.shape[0]) * self.thin * self.dt

    @property
    def terminal(self) -> np.ndarray:
        return self.positions[-1]

    @property
    def increments(self) -> np.ndarray:
        """Brownian increments per (step, field), shape (S, n_fields)."""
        if self._noise is None:
            self._noise = brownian_source(self.basis, self.drift.T, self.dt, self.seed,
                                          self.noise_dt).increments(self.replica, self._ratio)
        return self._noise

    @property
    def _ratio(self) -> int:
        return int(round(self.dt / self.noise_dt))

    def header(self) -> dict:
        return {
            "N": self.N,
            "S": self.S,
            "dt": self.dt,
            "T": self.T,
            "thin": self.thin,
            "n_records": int(self.positions.shape[0]),
            "seed": int(self.seed),
            "replica": int(self.replica),
            "noise_dt": self.noise_dt,
            "scheme": self.scheme,
            "basis_id": self.basis.id,
            "drift_id": self.drift.id,
        }


def brownian_source(basis: NoiseBasis, T: float, dt: float, seed: int, noise_dt: float | None) -> BrownianSource:
    noise_dt = dt if noise_dt is None else noise_dt
    ratio = int(round(dt / noise_dt))
    if ratio < 1 or abs(ratio * noise_dt - dt) > 1e-12 * dt:
        raise ValueError(f"dt={dt} must be an integer multiple of noise_dt={noise_dt}")
    return BrownianSource(int(seed), len(basis), noise_dt, steps_for(T, noise_dt))


def _simulate_batch(initial, replicas, basis, drift, dt, seed, noise_dt, thin, scheme):
    T = drift.T
    S = steps_for(T, dt)
    src = brownian_source(basis, T, dt, seed, noise_dt)
    ratio = int(round(dt / src.noise_dt))
    noise = np.stack([src.increments(r, ratio) for r in replicas])      # (B, S, nf)
    B = len(replicas)
    x = np.broadcast_to(initial, (B,) + initial.shape).copy()
    n_rec = S // thin + 1
    pos = np.empty((n_rec, B) + initial.shape)
    pos[0] = x
    drift_arg = None if drift.is_zero() else drift
    step = euler_step if scheme == "euler" else lambda *a: heun_step(*a)[0]
    for n in range(S):
        x = step(x, n * dt, dt, noise[:, n, :], basis, drift_arg)
        if (n + 1) % thin == 0:
            pos[(n + 1) // thin] = x
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError("nonfinite particle state")
    return [
        PathEnsemble(initial=initial, positions=pos[:, b].copy(), dt=dt, thin=thin, seed=seed,
                     replica=r, noise_dt=src.noise_dt, basis=basis, drift=drift, scheme=scheme,
                     _noise=noise[b])
        for b, r in enumerate(replicas)
    ]


def iter_ensembles(basis: NoiseBasis, drift: SpectralField, grid_side: int, dt: float, seed: int,
                   replicas: int, *, noise_dt: float | None = None, thin: int = 1,
                   points: np.ndarray | None = None, chunk: int = 8, workers: int | None = None,
                   scheme: str = "euler", replica_offset: int = 0) -> Iterator[list[PathEnsemble]]:
    """Yield lists of PathEnsemble, ``chunk`` replicas at a time, in replica order."""
    if points is None:
        if grid_side < 2:
            raise ValueError(f"grid_side must be >= 2, got {grid_side}")
        initial = uniform_grid(grid_side)
    else:
        initial = wrap(np.asarray(points, dtype=float).reshape(-1, 2))
    S = steps_for(drift.T, dt)
    if S % thin:
        raise ValueError(f"thin={thin} must divide the step count {S}")
    if scheme not in ("euler", "heun"):
        raise ValueError(f"unknown scheme {scheme!r}")
    ids = list(range(replica_offset, replica_offset + replicas))
    batches = [ids[i:i + chunk] for i in range(0, len(ids), chunk)]
    run = lambda reps: _simulate_batch(initial, reps, basis, drift, dt, seed, noise_dt, thin, scheme)  # noqa: E731
    n_workers = worker_count(workers)
    if n_workers == 1:
        for reps in batches:
            yield run(reps)
    else:
        with ThreadPoolExecutor(n_workers) as pool:
            yield from pool.map(run, batches)


def simulate_ensemble(basis: NoiseBasis, drift: SpectralField, grid_side: int, dt: float, seed: int,
                      replicas: int = 1, **kwargs) -> list[PathEnsemble]:
    out = []
    for part in iter_ensembles(basis, drift, grid_side, dt, seed, replicas, **kwargs):
        out.extend(part)
    return out


@dataclass
class IncompressibilityReport:
    times: np.ndarray
    deviations: np.ndarray          # (n_replicas, n_records, n_tests)

    @property
    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.deviations))) if self.deviations.size else 0.0

    def to_json(self) -> dict:
        return {
            "max_deviation": self.max_deviation,
            "max_per_test": np.max(np.abs(self.deviations), axis=(0, 1)).tolist(),
            "n_records": int(len(self.times)),
        }


def incompressibility_report(paths: PathEnsemble | Sequence[PathEnsemble],
                             tests: Sequence[TestFunction]) -> IncompressibilityReport:
    """(1/N) sum_i f(g_t(x_i)) - int f for every test f and recorded time."""
    if isinstance(paths, PathEnsemble):
        paths = [paths]
    exact = np.array([f.mean() if hasattr(f, "mean") else float(np.mean(f(paths[0].initial)))
                      for f in tests])
    devs = []
    for p in paths:
        vals = evaluate_test_functions(tests, p.positions)          # (n_rec, N, n_tests)
        devs.append(vals.mean(axis=1) - exact)
    return IncompressibilityReport(paths[0].times, np.stack(devs))


@dataclass
class EmpiricalCoupling:
    """Pairs (x, g_T(x)) pooled over particles and replicas; ``replica`` labels each pair."""

    x: np.ndarray
    y: np.ndarray
    replica: np.ndarray

    def moments(self, phis: Sequence[TestFunction], psis: Sequence[TestFunction]) -> tuple[np.ndarray, np.ndarray]:
        """Per-replica averages of phi_j(x) psi_k(y): returns (mean, standard error)."""
        fx = evaluate_test_functions(phis, self.x)
        gy = evaluate_test_functions(psis, self.y)
        reps = np.unique(self.replica)
        per = np.stack([np.einsum("nj,nk->jk", fx[self.replica == r], gy[self.replica == r])
                        / np.sum(self.replica == r) for r in reps])
        se = per.std(axis=0, ddof=1) / np.sqrt(len(reps)) if len(reps) > 1 else np.zeros(per.shape[1:])
        return per.mean(axis=0), se


def endpoint_coupling(ensembles: Sequence[PathEnsemble]) -> EmpiricalCoupling:
    xs = np.concatenate([e.initial for e in ensembles])
    ys = np.concatenate([e.terminal for e in ensembles])
    reps = np.concatenate([np.full(e.N, e.replica) for e in ensembles])
    return EmpiricalCoupling(xs, ys, reps)
