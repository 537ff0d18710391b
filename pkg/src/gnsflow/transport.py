"""The transport functional Theta_t(phi, psi) = int phi(x) psi(g_t(x)) dx and its checks.

Theta is computed by forward quadrature over the initial particle grid.  Along
with Theta the series records the integrands of its semimartingale
decomposition:

* ``drift[j, k]``  = Theta_t(phi_j, div(psi_k b(t)))      (drift of Theta-tilde)
* ``lap[j, k]``    = Theta_t(phi_j, Laplacian psi_k)
* ``mart[p, i]``   = Theta_t(phi_j, <grad psi_k, sigma_i>) for tracked pairs p = (j, k)

so that brackets, drift identities and the martingale residual can be checked
against the stored Brownian increments.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .drift import SpectralField
from .flow import EmpiricalCoupling, PathEnsemble
from .spectral import (
    PolyBank, TestFunction, TrigPoly, div_product, evaluate_test_functions, l2_inner, uniform_grid,
)

MAX_DEGREE = 48
RECORD_CHUNK = 16
CHUNK_ELEMENTS = 2_000_000
EXACT_TOL = 1e-6
NONNEG_TOL = 1e-9
BRACKET_RTOL = 0.10
BOUND_SLACK = 0.10
QUADRATURE_GRID = 256


class DegreeOverflowError(ValueError):
    pass


def quadrature_slack(N: int, norm: float = 1.0) -> float:
    """Conservative grid-quadrature budget, 2/sqrt(N) per unit test-function norm."""
    return 2.0 / np.sqrt(N) * norm


def describe(f: TestFunction) -> dict:
    if isinstance(f, TrigPoly):
        return {"kind": "trig", **f.to_json()}
    if hasattr(f, "describe"):
        return f.describe()
    return {"kind": "callable", "name": getattr(f, "__name__", repr(f))}


@lru_cache(maxsize=1)
def quadrature_points() -> np.ndarray:
    pts = uniform_grid(QUADRATURE_GRID)
    pts.flags.writeable = False
    return pts


def function_norm(f: TestFunction) -> float:
    if isinstance(f, TrigPoly):
        return f.norm()
    v = np.asarray(f(quadrature_points()))
    return float(np.sqrt(np.mean(v * v)))


def function_mean(f: TestFunction) -> float:
    if isinstance(f, TrigPoly):
        return f.mean()
    return float(np.mean(f(quadrature_points())))


def exact_inner(f: TestFunction, g: TrigPoly) -> float:
    if isinstance(f, TrigPoly):
        return l2_inner(f, g)
    pts = quadrature_points()
    return float(np.mean(np.asarray(f(pts)) * g(pts)))


def is_constant(f: TestFunction, value: float = 1.0) -> bool:
    if not isinstance(f, TrigPoly):
        return False
    g = f.trimmed()
    return g.degree == 0 and abs(g.mean() - value) < 1e-14


@dataclass
class TransportSeries:
    """Theta_t(phi_j, psi_k) per replica and recorded time, with decomposition integrands."""

    phis: list
    psis: list
    times: np.ndarray                    # (n_rec,)
    theta: np.ndarray                    # (R, n_rec, J, K)
    drift: np.ndarray                    # (R, n_rec, J, K)
    lap: np.ndarray                      # (R, n_rec, J, K)
    tracked: list = field(default_factory=list)
    mart: np.ndarray | None = None       # (R, n_rec, P, n_fields)
    increments: np.ndarray | None = None  # (R, S, n_fields) at the recording step
    replicas: np.ndarray | None = None
    masses: np.ndarray | None = None     # quadrature int phi_j over the particle grid
    N: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def R(self) -> int:
        return self.theta.shape[0]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def phi_norms(self) -> np.ndarray:
        return np.array([function_norm(f) for f in self.phis])

    def psi_norms(self) -> np.ndarray:
        return np.array([f.norm() for f in self.psis])

    def grad_norms(self) -> np.ndarray:
        """||grad psi_k||_{L2}."""
        return np.array([np.sqrt(l2_inner(f.d1(), f.d1()) + l2_inner(f.d2(), f.d2())) for f in self.psis])

    def grad_sup(self) -> np.ndarray:
        """Upper bound of ||grad psi_k||_{L_inf}, sharp on a fine grid."""
        pts = quadrature_points()
        out = []
        for f in self.psis:
            g = f.grad()(pts)
            out.append(float(np.sqrt(np.max(np.sum(g * g, axis=-1)))))
        return np.array(out)

    def track_index(self, pair) -> int:
        return self.tracked.index(tuple(pair))

    def merged(self, other: "TransportSeries") -> "TransportSeries":
        """Concatenate replicas of two series over the same families and times."""
        if len(self.phis) != len(other.phis) or len(self.psis) != len(other.psis) \
                or self.tracked != other.tracked or not np.allclose(self.times, other.times):
            raise ValueError("series have different families or time grids")
        cat = lambda a, b: None if a is None else np.concatenate([a, b])  # noqa: E731
        return TransportSeries(
            self.phis, self.psis, self.times, cat(self.theta, other.theta), cat(self.drift, other.drift),
            cat(self.lap, other.lap), list(self.tracked), cat(self.mart, other.mart),
            cat(self.increments, other.increments), cat(self.replicas, other.replicas),
            self.masses, self.N, dict(self.meta))

    def families(self) -> dict:
        return {"phis": [describe(f) for f in self.phis], "psis": [describe(f) for f in self.psis]}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["replica", "step", "time", "j", "k", "theta", "drift", "laplacian"])
            R, n, J, K = self.theta.shape
            for r in range(R):
                rep = int(self.replicas[r]) if self.replicas is not None else r
                for s in range(n):
                    for j in range(J):
                        for k in range(K):
                            w.writerow([rep, s, repr(float(self.times[s])), j, k,
                                        repr(float(self.theta[r, s, j, k])),
                                        repr(float(self.drift[r, s, j, k])),
                                        repr(float(self.lap[r, s, j, k]))])

    def summary(self) -> dict:
        mean_T = self.theta[:, -1].mean(axis=0)
        se_T = self.theta[:, -1].std(axis=0, ddof=1) / np.sqrt(self.R) if self.R > 1 else np.zeros_like(mean_T)
        return {
            "replicas": self.R,
            "n_records": int(len(self.times)),
            "T": self.T,
            "N": self.N,
            "tracked": [list(p) for p in self.tracked],
            "mean_theta_T": mean_T.tolist(),
            "se_theta_T": se_T.tolist(),
            "families": self.families(),
            **self.meta,
        }


def _psi_banks(psis: Sequence[TrigPoly], drift: SpectralField, basis, tracked_k, max_degree: int):
    """Per drift bin, one bank holding psi_k, Lap psi_k, div(psi_k b_bin) and <grad psi_k, sigma_i>."""
    base = list(psis) + [p.laplacian() for p in psis]
    fields = basis.fields()
    for k in tracked_k:
        g = psis[k].grad()
        base += [g.dot(f) for f in fields]
    banks = []
    for V in drift.fields:
        divs = [div_product(p, V).trimmed(1e-15) for p in psis]
        polys = base[:2 * len(psis)] + divs + base[2 * len(psis):]
        deg = max(q.degree for q in polys)
        if deg > max_degree:
            raise DegreeOverflowError(f"test polynomial degree {deg} exceeds max_degree={max_degree}")
        banks.append(PolyBank(polys))
    return banks


def _series_core(weights: np.ndarray, positions: np.ndarray, times: np.ndarray, drift: SpectralField,
                 banks, K: int, nf: int, tracked, tracked_k):
    """Sum_n w[n, j] f(x_n(t)) for every bank polynomial f and recorded time.

    ``weights`` is (N, J) for fixed quadrature weights or (n_rec, N, J) when they
    move with time.
    """
    moving = weights.ndim == 3
    N, J = weights.shape[-2:]
    wT = np.ascontiguousarray(np.swapaxes(weights, -1, -2))
    n_rec = positions.shape[0]
    theta = np.empty((n_rec, J, K))
    drift_out = np.empty((n_rec, J, K))
    lap = np.empty((n_rec, J, K))
    mart = np.zeros((n_rec, len(tracked), nf)) if tracked else None
    slot = {k: i for i, k in enumerate(tracked_k)}
    bins = np.array([drift.bin_index(t) for t in times])
    for b in np.unique(bins):
        idx = np.flatnonzero(bins == b)
        bank = banks[b]
        D = bank.degree
        # transform over particles when few phis, else evaluate the polynomials directly
        direct = moving or J * (D + 1) > bank.size
        width = bank.size if direct else J * (D + 1)
        chunk = max(1, min(RECORD_CHUNK, CHUNK_ELEMENTS // (N * max(width, (D + 1) * (2 * D + 1)))))
        for s in range(0, len(idx), chunk):
            rec = idx[s:s + chunk]
            X = positions[rec]
            if direct:
                th = np.matmul(wT[rec] if moving else wT, bank(X))
            else:
                th = bank.quadrature(weights, X)                     # (c, J, 3K + Kt*nf)
            theta[rec] = th[..., :K]
            lap[rec] = th[..., K:2 * K]
            drift_out[rec] = th[..., 2 * K:3 * K]
            for p, (j, k) in enumerate(tracked):
                o = 3 * K + slot[k] * nf
                mart[rec, p] = th[:, j, o:o + nf]
    return theta, drift_out, lap, mart


def _series_one(ens: PathEnsemble, phis, psis, tracked, tracked_k, banks):
    fx = evaluate_test_functions(phis, ens.initial) / ens.N          # (N, J) quadrature weights
    return _series_core(fx, ens.positions, ens.times, ens.drift, banks, len(psis), len(ens.basis),
                        tracked, tracked_k)


def weighted_series(weights: np.ndarray, positions: np.ndarray, times: np.ndarray, psis: Sequence[TrigPoly],
                    drift: SpectralField, basis, phis: Sequence | None = None, track: Sequence = (),
                    increments: np.ndarray | None = None, max_degree: int = MAX_DEGREE) -> TransportSeries:
    """Single-replica series sum_n weights[t, n, j] psi_k(positions[t, n]) with moving weights.

    ``weights`` already include the quadrature factor 1/N.
    """
    tracked = [tuple(int(v) for v in p) for p in track]
    tracked_k = sorted({k for _, k in tracked})
    banks = _psi_banks(psis, drift, basis, tracked_k, max_degree)
    th, dr, lp, mt = _series_core(weights, positions, times, drift, banks, len(psis), len(basis),
                                  tracked, tracked_k)
    J = weights.shape[-1]
    phis = list(phis) if phis is not None else [None] * J
    return TransportSeries(phis, list(psis), np.asarray(times), th[None], dr[None], lp[None], tracked,
                           None if mt is None else mt[None],
                           None if increments is None else np.asarray(increments)[None],
                           np.array([0]), weights[0].sum(axis=0), positions.shape[1], {"thin": 1})


def theta_series(paths: PathEnsemble | Sequence[PathEnsemble], phis: Sequence[TestFunction],
                 psis: Sequence[TrigPoly], track: Sequence = (), max_degree: int = MAX_DEGREE,
                 keep_increments: bool = True) -> TransportSeries:
    """Transport series of one or several replicas (all with the same grid, drift and times)."""
    if isinstance(paths, PathEnsemble):
        paths = [paths]
    if not paths:
        raise ValueError("no ensembles")
    if not all(isinstance(p, TrigPoly) for p in psis):
        raise TypeError("psi test functions must be TrigPoly")
    tracked = [tuple(int(v) for v in p) for p in track]
    tracked_k = sorted({k for _, k in tracked})
    ref = paths[0]
    banks = _psi_banks(psis, ref.drift, ref.basis, tracked_k, max_degree)
    out = [_series_one(e, phis, psis, tracked, tracked_k, banks) for e in paths]
    theta = np.stack([o[0] for o in out])
    drift = np.stack([o[1] for o in out])
    lap = np.stack([o[2] for o in out])
    mart = np.stack([o[3] for o in out]) if tracked else None
    incr = None
    if keep_increments and ref.thin == 1:
        incr = np.stack([e.increments for e in paths])
    masses = evaluate_test_functions(phis, ref.initial).mean(axis=0)
    meta = {"seed": int(ref.seed), "dt": ref.dt, "thin": ref.thin, "scheme": ref.scheme,
            "basis_id": ref.basis.id, "drift_id": ref.drift.id}
    return TransportSeries(list(phis), list(psis), ref.times, theta, drift, lap, tracked, mart, incr,
                           np.array([e.replica for e in paths]), masses, ref.N, meta)


def theta_series_streaming(ensembles, phis, psis, track=(), max_degree: int = MAX_DEGREE) -> TransportSeries:
    """Build a series chunk by chunk from ``iter_ensembles`` output, dropping positions as it goes."""
    series = None
    for chunk in ensembles:
        part = theta_series(chunk, phis, psis, track, max_degree)
        series = part if series is None else series.merged(part)
    if series is None:
        raise ValueError("no ensembles")
    return series


# -- checks ------------------------------------------------------------------------------------

def _require_full_resolution(series: TransportSeries):
    if series.meta.get("thin", 1) != 1:
        raise ValueError("bracket and residual checks need series recorded at every step")


def _corrected_increments(series: TransportSeries, j: int, k: int) -> np.ndarray:
    th = series.theta[:, :, j, k]
    dt = series.dt
    comp = (series.drift[:, :-1, j, k] + 0.5 * series.lap[:, :-1, j, k]) * dt
    return np.diff(th, axis=1) - comp


def bracket_check(series: TransportSeries, pairs: Sequence, slack: float = BOUND_SLACK,
                  rtol: float = BRACKET_RTOL) -> dict:
    """Realized covariation of drift-corrected increments versus the predicted bracket.

    Relative errors are scaled by sqrt(predicted[1,1] * predicted[2,2]) so that
    cross pairs with small covariation are not divided by zero.
    """
    _require_full_resolution(series)
    dt = series.dt
    T = series.T
    phi_n = series.phi_norms()
    grad_n = series.grad_norms()
    out = []
    for p1, p2 in pairs:
        p1, p2 = tuple(p1), tuple(p2)
        i1, i2 = series.track_index(p1), series.track_index(p2)
        m1 = series.mart[:, :-1, i1]
        m2 = series.mart[:, :-1, i2]
        predicted = np.sum(m1 * m2, axis=(1, 2)) * dt                      # (R,)
        pred11 = np.sum(m1 * m1, axis=(1, 2)) * dt
        pred22 = np.sum(m2 * m2, axis=(1, 2)) * dt
        realized = np.sum(_corrected_increments(series, *p1) * _corrected_increments(series, *p2), axis=1)
        scale = np.sqrt(pred11 * pred22)
        floor = 1e-14
        rel = np.where(scale > floor, np.abs(realized - predicted) / np.maximum(scale, floor),
                       np.where(np.abs(realized) <= 1e-10, 0.0, np.inf))
        entry = {
            "pair": [list(p1), list(p2)],
            "realized_mean": float(realized.mean()),
            "predicted_mean": float(predicted.mean()),
            "relative_error": float(rel.mean()),
            "relative_error_rms": float(np.sqrt(np.mean(rel ** 2))),
            "pass_identity": bool(rel.mean() <= rtol),
        }
        if p1 == p2:
            j, k = p1
            bound = phi_n[j] ** 2 * grad_n[k] ** 2
            rate_pred = np.max(np.sum(series.mart[:, :, i1] ** 2, axis=-1))
            entry.update({
                "bound_rate": float(bound),
                "realized_rate_max": float(np.max(realized) / T),
                "predicted_rate_max": float(rate_pred),
                "pass_bound": bool(np.max(realized) / T <= bound * (1 + slack) + 1e-14
                                   and rate_pred <= bound * (1 + slack) + 1e-14),
            })
        out.append(entry)
    return {
        "pairs": out,
        "mean_relative_error": float(np.mean([e["relative_error"] for e in out])) if out else 0.0,
        "pass": all(e["pass_identity"] and e.get("pass_bound", True) for e in out),
    }


def final_configuration_check(series: TransportSeries, target, n_se: float = 3.0) -> dict:
    """Replica mean of Theta_T(phi_j, psi_k) against target moments.

    ``target`` is an array (J, K), a pair (array, standard errors), an
    EmpiricalCoupling, or a callable ``(j, k) -> value``.
    """
    if series.R < 2:
        raise ValueError("need at least two replicas")
    vals = series.theta[:, -1]
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(series.R)
    J, K = mean.shape
    target_se = np.zeros_like(mean)
    if isinstance(target, EmpiricalCoupling):
        tgt, target_se = target.moments(series.phis, series.psis)
    elif callable(target):
        tgt = np.array([[target(j, k) for k in range(K)] for j in range(J)])
    elif isinstance(target, tuple):
        tgt, target_se = np.asarray(target[0], float), np.asarray(target[1], float)
    else:
        tgt = np.asarray(target, dtype=float)
    tot_se = np.sqrt(se ** 2 + target_se ** 2)
    dev = np.abs(mean - tgt)
    # exact agreement (no spread at all) passes with a rounding floor
    flags = dev > n_se * tot_se + 1e-12
    return {
        "mean": mean.tolist(),
        "se": se.tolist(),
        "target": tgt.tolist(),
        "z_max": float(np.max(np.where(tot_se > 0, np.maximum(dev - 1e-12, 0) / np.where(tot_se > 0, tot_se, 1), 0.0))),
        "max_deviation": float(np.max(dev)),
        "n_flagged": int(flags.sum()),
        "pass": bool(not flags.any()),
    }


def martingale_residual(series: TransportSeries) -> dict:
    """R_t = Theta_t - Theta_0 - int (D + Lap/2) ds - sum_i int Theta(phi, div(psi sigma_i)) dW^i, per tracked pair."""
    _require_full_resolution(series)
    if series.increments is None:
        raise ValueError("series carries no Brownian increments")
    dt = series.dt
    phi_n = series.phi_norms()
    psi_n = series.psi_norms()
    res = []
    for p, (j, k) in enumerate(series.tracked):
        th = series.theta[:, :, j, k]
        comp = np.cumsum((series.drift[:, :-1, j, k] + 0.5 * series.lap[:, :-1, j, k]) * dt, axis=1)
        if series.mart is not None and series.mart.shape[-1]:
            stoch = np.cumsum(np.sum(series.mart[:, :-1, p] * series.increments, axis=-1), axis=1)
        else:
            stoch = np.zeros_like(comp)
        R = th[:, 1:] - th[:, :1] - comp - stoch
        scale = phi_n[j] * psi_n[k]
        res.append({
            "pair": [j, k],
            "max_abs_R_T": float(np.max(np.abs(R[:, -1]))),
            "max_abs_R": float(np.max(np.abs(R))),
            "mean_R_T": float(np.mean(R[:, -1])),
            "scale": float(scale),
            "relative": float(np.max(np.abs(R[:, -1])) / scale) if scale > 0 else 0.0,
        })
    return {"pairs": res, "max_relative": max([r["relative"] for r in res], default=0.0)}


def drift_identity(series: TransportSeries, reference: np.ndarray) -> dict:
    """Compare int_0^T D dt from the series with a reference integrated drift (R, J, K) or (J, K).

    The error of each (j, k) is pooled over replicas and scaled by the replica-mean
    magnitude of the reference.
    """
    integ = _trapezoid(series.drift, series.dt)                 # (R, J, K)
    ref = np.broadcast_to(reference, integ.shape)
    diff = (integ - ref).mean(axis=0)
    mag = np.abs(ref.mean(axis=0))
    rel = np.sqrt(np.sum(diff ** 2)) / max(np.sqrt(np.sum(mag ** 2)), 1e-300)
    return {"integrated": integ.mean(axis=0).tolist(), "reference": ref.mean(axis=0).tolist(),
            "relative_error": float(rel)}


def _trapezoid(y: np.ndarray, dt: float) -> np.ndarray:
    return (np.sum(y[:, 1:-1], axis=1) + 0.5 * (y[:, 0] + y[:, -1])) * dt


# -- axiom sweep --------------------------------------------------------------------------------

@dataclass
class SweepFamilies:
    """Test functions for the full transport sweep, with roles recorded by index."""

    phis: list
    psis: list
    random_phi: list
    random_psi: list
    const_phi: int
    const_psi: int
    nonneg_phi: list
    nonneg_psi: list


def sweep_families(seed: int = 0, n: int = 6, degree: int = 2) -> SweepFamilies:
    rng = np.random.default_rng(seed)
    rand_phi = [TrigPoly.random(degree, rng, scale=0.5) for _ in range(n)]
    rand_psi = [TrigPoly.random(degree, rng, scale=0.5) for _ in range(n)]
    one = TrigPoly.constant(1.0)
    pos_phi = [1 + TrigPoly.cos((1, 0)) * 0.5 + TrigPoly.sin((0, 1)) * 0.4,
               1 + TrigPoly.cos((1, 1)) * 0.9]
    pos_psi = [1 + TrigPoly.sin((1, 0)) * 0.8, 1.5 + TrigPoly.cos((2, 1)) * 1.0 + TrigPoly.cos((0, 1)) * 0.4]
    phis = rand_phi + [one] + pos_phi
    psis = rand_psi + [one] + pos_psi
    return SweepFamilies(phis, psis, list(range(n)), list(range(n)), n, n,
                         [n + 1, n + 2], [n + 1, n + 2])


def axiom_sweep(series: TransportSeries, fam: SweepFamilies, target, energy_lb: float,
                bracket_pairs: Sequence | None = None) -> dict:
    """Check the eight generalized-flow properties on a series built from ``fam``.

    ``energy_lb`` is a lower-bound estimate of the generalized energy used in the
    drift-bound property.
    """
    th = series.theta
    phi_n = series.phi_norms()
    psi_n = series.psi_norms()
    rep = {}

    # (1) final configuration
    sub = TransportSeries(fam.phis, fam.psis, series.times, th, series.drift, series.lap, [], None, None,
                          series.replicas, series.masses, series.N)
    fc = final_configuration_check(sub, target)
    rep["1_final_configuration"] = {"z_max": fc["z_max"], "n_flagged": fc["n_flagged"], "pass": fc["pass"]}

    # (2) Theta(phi, 1) exact, Theta(1, psi) within quadrature slack
    means_phi = np.array([function_mean(f) for f in fam.phis])
    means_psi = np.array([f.mean() for f in fam.psis])
    e_phi = float(np.max(np.abs(th[:, :, :, fam.const_psi] - means_phi)))
    e_psi = np.max(np.abs(th[:, :, fam.const_phi, :] - means_psi), axis=(0, 1))
    slack = quadrature_slack(series.N, 1.0) * psi_n
    rep["2_marginals"] = {
        "max_dev_phi_1": e_phi, "max_dev_1_psi": float(np.max(e_psi)),
        "pass": bool(e_phi <= EXACT_TOL and np.all(e_psi <= slack + EXACT_TOL)),
    }

    # (3), (4) brackets and their bound
    if bracket_pairs is None:
        bracket_pairs = [(p, p) for p in series.tracked]
    br = bracket_check(series, bracket_pairs)
    rep["3_bracket"] = {"mean_relative_error": br["mean_relative_error"],
                        "max_relative_error": max((e["relative_error"] for e in br["pairs"]), default=0.0),
                        "pass": all(e["pass_identity"] for e in br["pairs"])}
    rep["4_bracket_bound"] = {"pass": all(e.get("pass_bound", True) for e in br["pairs"])}

    # (5) E int (D Theta-tilde)^2 <= 2 E' ||phi||^2 ||grad psi||_inf^2
    lhs = _trapezoid(series.drift ** 2, series.dt).mean(axis=0)                   # (J, K)
    rhs = 2 * energy_lb * np.outer(phi_n ** 2, series.grad_sup() ** 2)
    ok5 = lhs <= rhs * (1 + BOUND_SLACK) + 1e-12
    rep["5_drift_bound"] = {"max_ratio": float(np.max(np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1), 0))),
                            "energy_lb": energy_lb, "pass": bool(ok5.all())}

    # (6) start point
    start = np.array([[exact_inner(f, g) for g in fam.psis] for f in fam.phis])
    e6 = float(np.max(np.abs(th[:, 0] - start)))
    rep["6_start"] = {"max_dev": e6, "pass": e6 <= EXACT_TOL}

    # (7) nonnegativity
    sel = th[:, :, fam.nonneg_phi][:, :, :, fam.nonneg_psi]
    rep["7_nonnegative"] = {"min": float(sel.min()), "pass": bool(sel.min() >= -NONNEG_TOL)}

    # (8) |Theta| <= ||phi|| ||psi||
    excess = np.abs(th) - np.outer(phi_n, psi_n)
    rep["8_bounded"] = {"max_excess": float(excess.max()), "pass": bool(excess.max() <= EXACT_TOL)}

    rep["pass"] = all(v["pass"] for v in rep.values() if isinstance(v, dict))
    return rep


def bilinearity_defect(paths: PathEnsemble, a: float, f1: TestFunction, b: float, f2: TestFunction,
                       psis: Sequence[TrigPoly]) -> float:
    combo = lambda x: a * np.asarray(f1(x)) + b * np.asarray(f2(x))  # noqa: E731
    s = theta_series(paths, [f1, f2, combo], psis)
    return float(np.max(np.abs(s.theta[:, :, 2] - a * s.theta[:, :, 0] - b * s.theta[:, :, 1])))


def write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
