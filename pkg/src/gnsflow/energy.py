"""Kinetic energy of a flow and lower bounds of the energy of its transport functional.

The generalized energy of a transport functional is a supremum over a partition
of unity (phi_j) and a family (psi_k) with sum_k <grad psi_k, v>^2 <= |v|^2:

    1/2 sum_{j,k} E int_0^T D_t(phi_j, psi_k)^2 / int phi_j dt.

Any admissible family gives a lower bound.  Refining the partition should close
the gap to the flow energy, which this module measures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .drift import SpectralField, drift_energy
from .flow import iter_ensembles
from .spectral import TWO_PI, NoiseBasis, TrigPoly, uniform_grid
from .transport import TransportSeries, theta_series

MASS_FLOOR = 1e-12
BUMP_SCALE = 1.2
MASS_GRID = 256


def _periodic_offset(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    d = points - center
    return (d + np.pi) % TWO_PI - np.pi


class PartitionFamily:
    """Partition of unity by normalized squared-cosine bumps on an m x m grid of centers.

    Bump j is cos^2(pi r / (2 eps)) for r < eps (r the periodic distance to
    center j), divided by the sum of all bumps.  With eps = 1.2 times the grid
    spacing every point is covered, so the normalization is well defined.
    """

    def __init__(self, m: int, scale: float = BUMP_SCALE):
        if m < 1:
            raise ValueError(f"partition size must be >= 1, got {m}")
        self.m = m
        self.eps = scale * TWO_PI / m
        c = (np.arange(m) + 0.5) * TWO_PI / m
        c1, c2 = np.meshgrid(c, c, indexing="ij")
        self.centers = np.stack([c1.ravel(), c2.ravel()], axis=-1)
        self._cache: tuple | None = None
        self.masses = self.values(uniform_grid(MASS_GRID)).mean(axis=0)

    def __len__(self) -> int:
        return len(self.centers)

    def _raw(self, points: np.ndarray) -> np.ndarray:
        d = _periodic_offset(points[..., None, :], self.centers)
        r = np.sqrt(np.sum(d * d, axis=-1))
        return np.where(r < self.eps, np.cos(0.5 * np.pi * np.minimum(r, self.eps) / self.eps) ** 2, 0.0)

    def values(self, points) -> np.ndarray:
        """All bumps at once, last axis = bump."""
        points = np.asarray(points, dtype=float)
        if self._cache is not None and self._cache[0] is points:
            return self._cache[1]
        if self.m == 1:
            out = np.ones(points.shape[:-1] + (1,))
        else:
            raw = self._raw(points)
            out = raw / raw.sum(axis=-1, keepdims=True)
        self._cache = (points, out)
        return out

    def functions(self) -> list:
        return [PartitionBump(self, j) for j in range(len(self))]

    @property
    def delta(self) -> float:
        """min_j int phi_j / eps^2, with the integral in Lebesgue measure (area 4 pi^2)."""
        return float(np.min(self.masses) * TWO_PI ** 2 / self.eps ** 2)

    def describe(self) -> dict:
        return {"kind": "partition", "m": self.m, "eps": self.eps}


@dataclass(frozen=True)
class PartitionBump:
    family: PartitionFamily
    index: int

    def __call__(self, points) -> np.ndarray:
        return self.family.values(points)[..., self.index]

    def describe(self) -> dict:
        return {**self.family.describe(), "index": self.index}


class GradientFamily:
    """cos and sin of each coordinate: the flat embedding of the torus in 4-space.

    Their gradients satisfy sum_k <grad psi_k, v>^2 = |v|^2 for every tangent v.
    """

    def __init__(self):
        self.functions = [TrigPoly.cos((1, 0)), TrigPoly.sin((1, 0)), TrigPoly.cos((0, 1)), TrigPoly.sin((0, 1))]

    def __len__(self) -> int:
        return 4

    def metric_defect(self, points: np.ndarray, vectors: np.ndarray) -> float:
        """max |sum_k <grad psi_k, v>^2 - |v|^2| over the given (point, vector) pairs."""
        s = sum(np.sum(f.grad()(points) * vectors, axis=-1) ** 2 for f in self.functions)
        return float(np.max(np.abs(s - np.sum(vectors * vectors, axis=-1))))


@dataclass
class EnergyValue:
    value: float
    stderr: float = 0.0
    time_error: float = 0.0
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "time_error": self.time_error, **self.meta}


def flow_energy(drift: SpectralField) -> EnergyValue:
    """Kinetic energy of the flow driven by a deterministic drift, 1/2 int int |b|^2."""
    return EnergyValue(drift_energy(drift), meta={"kind": "flow"})


def generalized_energy_lb(series: TransportSeries, partition: PartitionFamily, grads: GradientFamily,
                          phi_offset: int = 0, psi_offset: int = 0) -> EnergyValue:
    """Lower bound of the generalized energy from one admissible family.

    The series must hold the partition functions at phis[phi_offset:] and the
    gradient family at psis[psi_offset:].  Theta_t(phi_j, 1) is replaced by the
    constant mass of phi_j; time is integrated by the trapezoid rule and the
    expectation by the replica mean.
    """
    masses = np.asarray(partition.masses)
    if np.any(masses < MASS_FLOOR):
        raise ValueError(f"partition mass below {MASS_FLOOR}: {masses.min():.3e}")
    J, K = len(partition), len(grads)
    D = series.drift[:, :, phi_offset:phi_offset + J, psi_offset:psi_offset + K]
    if D.shape[2:] != (J, K):
        raise ValueError("series does not contain the requested families")
    dt = series.times[1] - series.times[0] if len(series.times) > 1 else 0.0
    q = np.sum(D * D, axis=-1) / masses                       # (R, n, J)
    q = q.sum(axis=-1)                                       # (R, n)
    trap = 0.5 * (np.sum(q[:, 1:-1], axis=1) + 0.5 * (q[:, 0] + q[:, -1])) * dt
    left = 0.5 * np.sum(q[:, :-1], axis=1) * dt
    R = len(trap)
    return EnergyValue(
        float(trap.mean()),
        float(trap.std(ddof=1) / np.sqrt(R)) if R > 1 else 0.0,
        float(np.abs(trap - left).mean()),
        {"kind": "generalized_lb", "m": partition.m, "eps": partition.eps, "delta": partition.delta,
         "replicas": R},
    )


@dataclass
class EnergyConfig:
    grid_side: int = 64
    K: int = 0
    dt: float = 1e-3
    replicas: int = 1
    seed: int = 0
    ladder: tuple = (4, 8, 16)
    slack: float = 0.05
    thin: int = 1
    workers: int | None = None
    extra_psis: Sequence[TrigPoly] = ()


def energy_ladder(basis: NoiseBasis, drift: SpectralField, cfg: EnergyConfig) -> list[EnergyValue]:
    """Generalized-energy lower bounds for every partition size in ``cfg.ladder``.

    All rungs are evaluated on the same simulated replicas, streamed chunk by chunk.
    """
    partitions = [PartitionFamily(m) for m in cfg.ladder]
    grads = GradientFamily()
    phis = [f for p in partitions for f in p.functions()]
    offsets = np.cumsum([0] + [len(p) for p in partitions])
    series = None
    for chunk in iter_ensembles(basis, drift, cfg.grid_side, cfg.dt, cfg.seed, cfg.replicas,
                                thin=cfg.thin, workers=cfg.workers):
        part = theta_series(chunk, phis, grads.functions, keep_increments=False)
        series = part if series is None else series.merged(part)
    return [generalized_energy_lb(series, p, grads, phi_offset=int(o)) for p, o in zip(partitions, offsets)]


def energy_bound_check(basis: NoiseBasis, drift: SpectralField, cfg: EnergyConfig,
                       min_fraction: float | None = None) -> dict:
    """Flow energy against a refinement ladder of generalized-energy lower bounds.

    Passes when every bound is at most the flow energy times (1 + slack) and the
    gap to the flow energy at the finest rung is below the gap at the coarsest.
    ``min_fraction`` additionally requires the finest rung to reach that fraction
    of the flow energy.
    """
    E = flow_energy(drift).value
    ladder = energy_ladder(basis, drift, cfg)
    bounded = all(v.value <= E * (1 + cfg.slack) + 1e-12 for v in ladder)
    gaps = [E - v.value for v in ladder]
    shrinks = len(gaps) < 2 or gaps[-1] <= gaps[0] + 1e-12
    reached = True if min_fraction is None else ladder[-1].value >= min_fraction * E
    return {
        "flow_energy": E,
        "ladder": [{"m": v.meta["m"], "eps": v.meta["eps"], "value": v.value, "stderr": v.stderr,
                    "time_error": v.time_error, "delta": v.meta["delta"]} for v in ladder],
        "slack": cfg.slack,
        "bounded": bounded,
        "gap_shrinks": shrinks,
        "final_fraction": ladder[-1].value / E if E > 0 else 1.0,
        "pass": bool(bounded and shrinks and reached),
    }
