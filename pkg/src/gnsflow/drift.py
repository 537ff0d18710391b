"""Time-dependent divergence-free drifts, piecewise constant in time.

A drift is a list of time bins ``[t_i, t_{i+1})``, each carrying a
divergence-free :class:`VectorTrigPoly`.  Energies are exact (Parseval per bin),
and the regularizations used for rough drifts act mode by mode.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .spectral import TWO_PI, PhaseTable, TrigPoly, VectorTrigPoly, half_plane_modes

DIV_TOL = 1e-10
MOLLIFIER_NODES = 64


def leray_project(V: VectorTrigPoly) -> VectorTrigPoly:
    """Remove the gradient part of every Fourier mode (the constant mode is kept)."""
    d = V.degree
    c = V.padded(d)
    k = np.arange(-d, d + 1)
    k1, k2 = np.meshgrid(k, k, indexing="ij")
    ksq = (k1 ** 2 + k2 ** 2).astype(float)
    ksq[d, d] = 1.0
    dot = (k1 * c[0] + k2 * c[1]) / ksq
    out = np.stack([c[0] - k1 * dot, c[1] - k2 * dot])
    return VectorTrigPoly.from_array(out)


def _divergence_bound(V: VectorTrigPoly) -> float:
    return V.div().sup_bound()


@dataclass(frozen=True)
class _BinTerms:
    """Canonical mode list of one bin, laid out for fast point evaluation."""

    degree: int
    modes: np.ndarray        # (m, 2)
    const: np.ndarray        # (2,)
    cos: np.ndarray          # (m, 2)
    sin: np.ndarray          # (m, 2)

    @classmethod
    def from_field(cls, V: VectorTrigPoly) -> "_BinTerms":
        d = V.degree
        m1, c1, a1, b1 = TrigPoly(V.u1.padded(d)).terms()
        _, c2, a2, b2 = TrigPoly(V.u2.padded(d)).terms()
        keep = (a1 != 0) | (b1 != 0) | (a2 != 0) | (b2 != 0)
        return cls(d, m1[keep], np.array([c1, c2]),
                   np.stack([a1[keep], a2[keep]], axis=-1), np.stack([b1[keep], b2[keep]], axis=-1))

    def evaluate(self, table: PhaseTable) -> np.ndarray:
        """Sequential accumulation over modes; bitwise independent of batch shape."""
        shape = table.p1.shape[:-1]
        out = np.empty(shape + (2,))
        out[..., 0] = self.const[0]
        out[..., 1] = self.const[1]
        for (k1, k2), a, b in zip(self.modes, self.cos, self.sin):
            e = table.phase(k1, k2)
            cr, ci = e.real, e.imag
            out[..., 0] += a[0] * cr + b[0] * ci
            out[..., 1] += a[1] * cr + b[1] * ci
        return out


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Drift b(t, x) on [0, T]: bin i covers [edges[i], edges[i+1])."""

    edges: np.ndarray
    fields: tuple[VectorTrigPoly, ...]
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        object.__setattr__(self, "edges", edges)
        if edges.ndim != 1 or len(edges) != len(self.fields) + 1:
            raise ValueError("need len(edges) == number of bins + 1")
        if abs(edges[0]) > 0 or np.any(np.diff(edges) <= 0):
            raise ValueError("time grid must start at 0 and increase strictly")
        for i, V in enumerate(self.fields):
            if not np.all(np.isfinite(V.padded(V.degree))):
                raise ValueError(f"bin {i} has nonfinite coefficients")
            err = _divergence_bound(V)
            if err > DIV_TOL * max(1.0, V.u1.sup_bound() + V.u2.sup_bound()):
                raise ValueError(f"bin {i} is not divergence-free (|div| <= {err:.3e})")

    # construction

    @classmethod
    def zero(cls, T: float) -> "SpectralField":
        return cls(np.array([0.0, T]), (VectorTrigPoly.zero(),))

    @classmethod
    def constant(cls, c: Sequence[float], T: float) -> "SpectralField":
        return cls(np.array([0.0, T]), (VectorTrigPoly.constant(c),))

    @classmethod
    def steady(cls, V: VectorTrigPoly, T: float) -> "SpectralField":
        return cls(np.array([0.0, T]), (V,))

    @classmethod
    def piecewise(cls, fields: Sequence[VectorTrigPoly], T: float) -> "SpectralField":
        return cls(np.linspace(0.0, T, len(fields) + 1), tuple(fields))

    # structure

    @property
    def T(self) -> float:
        return float(self.edges[-1])

    @property
    def n_bins(self) -> int:
        return len(self.fields)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def degree(self) -> int:
        return max(V.degree for V in self.fields)

    def bin_index(self, t: float) -> int:
        i = int(np.searchsorted(self.edges, t, side="right")) - 1
        return min(max(i, 0), self.n_bins - 1)

    def at(self, t: float) -> VectorTrigPoly:
        return self.fields[self.bin_index(t)]

    def _terms(self, i: int) -> _BinTerms:
        key = ("terms", i)
        if key not in self._cache:
            self._cache[key] = _BinTerms.from_field(self.fields[i])
        return self._cache[key]

    def evaluate(self, t: float, points: np.ndarray, table: PhaseTable | None = None) -> np.ndarray:
        i = self.bin_index(t)
        terms = self._terms(i)
        if table is None or table.degree < terms.degree:
            table = PhaseTable(points, terms.degree)
        return terms.evaluate(table)

    def is_zero(self) -> bool:
        return all(np.all(V.padded(V.degree) == 0) for V in self.fields)

    def map_fields(self, fn) -> "SpectralField":
        return SpectralField(self.edges.copy(), tuple(fn(V) for V in self.fields))

    def max_divergence(self, points: np.ndarray) -> float:
        return max(float(np.max(np.abs(V.div()(points)))) for V in self.fields)

    # serialization

    def to_json(self) -> dict:
        bins = []
        for (t0, t1), V in zip(zip(self.edges[:-1], self.edges[1:]), self.fields):
            d = V.degree
            modes = [(0, 0)] + [tuple(k) for k in half_plane_modes(d)]
            entries = []
            for k in modes:
                c = []
                s = []
                for comp in (V.u1, V.u2):
                    ck = comp.padded(d)[k[0] + d, k[1] + d]
                    if k == (0, 0):
                        c.append(float(ck.real))
                        s.append(0.0)
                    else:
                        c.append(float(2 * ck.real))
                        s.append(float(-2 * ck.imag))
                if any(c) or any(s):
                    entries.append({"k": [int(k[0]), int(k[1])], "cos": c, "sin": s})
            bins.append({"t_start": float(t0), "t_end": float(t1), "modes": entries})
        return {"T": self.T, "bins": bins}

    @classmethod
    def from_json(cls, doc: dict) -> "SpectralField":
        edges = [doc["bins"][0]["t_start"]] + [b["t_end"] for b in doc["bins"]]
        fields = []
        for b in doc["bins"]:
            t1 = [(tuple(m["k"]), (m["cos"][0], m["sin"][0])) for m in b["modes"]]
            t2 = [(tuple(m["k"]), (m["cos"][1], m["sin"][1])) for m in b["modes"]]
            fields.append(VectorTrigPoly(TrigPoly.from_terms(t1), TrigPoly.from_terms(t2)))
        out = cls(np.array(edges), tuple(fields))
        if abs(out.T - float(doc["T"])) > 1e-12:
            raise ValueError("bins do not end at T")
        return out

    @property
    def id(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _field_sq_norm(V: VectorTrigPoly) -> float:
    c = V.padded(V.degree)
    return float(np.sum(np.abs(c) ** 2))


def drift_energy(b: SpectralField) -> float:
    """(1/2) int_0^T int_M |b|^2 dx dt, exact."""
    return 0.5 * float(sum(w * _field_sq_norm(V) for w, V in zip(b.widths, b.fields)))


def hodge_regularize(b: SpectralField, eps: float) -> SpectralField:
    """Multiply mode k by exp(-eps |k|^2): the Hodge heat semigroup on 1-forms of the flat torus."""
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")

    def smooth(V: VectorTrigPoly) -> VectorTrigPoly:
        d = V.degree
        k = np.arange(-d, d + 1)
        k1, k2 = np.meshgrid(k, k, indexing="ij")
        return VectorTrigPoly.from_array(V.padded(d) * np.exp(-eps * (k1 ** 2 + k2 ** 2)))

    return b.map_fields(smooth)


class Mollifier:
    """Normalized bump exp(-1/(1-(2s/eps)^2)) supported on (-eps/2, eps/2)."""

    def __init__(self, eps: float, nodes: int = MOLLIFIER_NODES):
        if eps <= 0:
            raise ValueError(f"mollifier width must be positive, got {eps}")
        self.eps = eps
        self.x, self.w = np.polynomial.legendre.leggauss(nodes)
        h = eps / 2
        self.norm = h * np.sum(self.w * self._raw(h * self.x))

    def _raw(self, s):
        u = (2.0 * np.asarray(s, dtype=float) / self.eps) ** 2
        out = np.zeros_like(u)
        inside = u < 1.0
        out[inside] = np.exp(-1.0 / (1.0 - u[inside]))
        return out

    def density(self, s) -> np.ndarray:
        return self._raw(s) / self.norm

    def second_antiderivative(self, u) -> np.ndarray:
        """G(u) = int_{-inf}^u int_{-inf}^v rho = int (u - s) rho(s) ds over s < u."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        h = self.eps / 2
        out = np.where(u >= h, u, 0.0)
        mid = (u > -h) & (u < h)
        for idx in np.flatnonzero(mid):
            a, c = -h, u[idx]
            s = 0.5 * (c - a) * self.x + 0.5 * (c + a)
            out[idx] = 0.5 * (c - a) * np.sum(self.w * (c - s) * self.density(s))
        return out


def mollification_weights(edges_in: np.ndarray, edges_out: np.ndarray, eps: float) -> np.ndarray:
    """W[o, i]: average over output bin o of the mollified indicator of input bin i.

    The drift outside [0, T] is zero, so W rows sum to less than one near the ends.
    """
    moll = Mollifier(eps)
    G = moll.second_antiderivative
    s0, s1 = edges_out[:-1, None], edges_out[1:, None]
    t0, t1 = edges_in[None, :-1], edges_in[None, 1:]
    shape = np.broadcast(s0, t0).shape

    def g(u):
        return G(np.broadcast_to(u, shape).ravel()).reshape(shape)

    integral = (g(s1 - t0) - g(s0 - t0)) - (g(s1 - t1) - g(s0 - t1))
    return integral / (s1 - s0)


def time_mollify(b: SpectralField, eps: float, n_bins: int | None = None) -> SpectralField:
    """Convolve every mode in time with the bump of support eps, zero-extended outside [0, T].

    The result is stored on a uniform grid of ``n_bins`` bins (default: width at most
    min(eps/4, smallest input bin)), each bin holding the exact time average of the
    mollified drift, which keeps the map an L2 contraction.
    """
    T = b.T
    if n_bins is None:
        h = min(eps / 4.0, float(np.min(b.widths)))
        n_bins = int(np.ceil(T / h - 1e-9))
    edges_out = np.linspace(0.0, T, n_bins + 1)
    W = mollification_weights(b.edges, edges_out, eps)
    d = b.degree
    coef = np.stack([V.padded(d) for V in b.fields])            # (B, 2, n, n)
    out = np.tensordot(W, coef, axes=(1, 0))
    return SpectralField(edges_out, tuple(VectorTrigPoly.from_array(c) for c in out))


def l2_distance(b1: SpectralField, b2: SpectralField) -> float:
    """|| b1 - b2 ||_{L2([0,T] x M)} on the common refinement of both time grids."""
    if abs(b1.T - b2.T) > 1e-12:
        raise ValueError("drifts live on different horizons")
    edges = np.union1d(b1.edges, b2.edges)
    total = 0.0
    for t0, t1 in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (t0 + t1)
        total += (t1 - t0) * _field_sq_norm(b1.at(mid) - b2.at(mid))
    return float(np.sqrt(total))


def rough_drift(T: float, n_bins: int, cutoff: int = 8, seed: int = 0, amplitude: float = 1.0) -> SpectralField:
    """Divergence-free drift with mode amplitudes |k|^-1 and pseudorandom signs, fresh per bin.

    Each mode is ``amplitude * s / |k| * (k2, -k1)/|k| * {cos, sin}(k.theta)`` with s = +-1:
    square integrable but rough in space and discontinuous in time.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    ks = half_plane_modes(cutoff)
    fields = []
    for _ in range(n_bins):
        signs = rng.choice([-1.0, 1.0], size=(len(ks), 2))
        t1, t2 = {}, {}
        for k, (sa, sb) in zip(ks, signs):
            n = float(np.hypot(*k))
            amp = amplitude / n / n
            t1[tuple(k)] = (sa * amp * k[1], sb * amp * k[1])
            t2[tuple(k)] = (-sa * amp * k[0], -sb * amp * k[0])
        fields.append(VectorTrigPoly(TrigPoly.from_terms(t1), TrigPoly.from_terms(t2)))
    return SpectralField.piecewise(fields, T)


def smooth_drift(T: float, amplitude: float = 1.0) -> SpectralField:
    """Steady mixture of the unit-normalized A_(1,0) and B_(1,1) modes (test fixture)."""
    from .spectral import mode_field

    V = mode_field((1, 0), "A") * amplitude + mode_field((1, 1), "B") * (amplitude / np.sqrt(2.0))
    return SpectralField.steady(V, T)


__all__ = [
    "SpectralField", "drift_energy", "hodge_regularize", "leray_project", "time_mollify",
    "l2_distance", "rough_drift", "smooth_drift", "Mollifier", "mollification_weights", "TWO_PI",
]
