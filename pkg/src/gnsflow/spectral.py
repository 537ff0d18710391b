"""Trigonometric polynomials on the flat 2-torus and the divergence-free noise basis.

Everything here is exact spectral arithmetic on finite Fourier sums.  A scalar
polynomial is stored as a Hermitian-symmetric array of complex coefficients
``c[k1 + D, k2 + D]`` so that

    f(theta) = sum_k c_k exp(i k . theta),    c_{-k} = conj(c_k).

Integrals use the normalized volume measure (total mass one), so
``l2_inner(f, g) = sum_k c_k conj(d_k)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.signal import convolve2d

TWO_PI = 2.0 * np.pi
STRUCTURE_TOL = 1e-10


def wrap(points: np.ndarray) -> np.ndarray:
    """Reduce angles into [0, 2*pi)."""
    out = np.mod(points, TWO_PI)
    # mod of a tiny negative number rounds up to exactly 2*pi
    out[out >= TWO_PI] = 0.0
    return out


def torus_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Geodesic distance on the flat torus, broadcasting over leading axes."""
    d = np.mod(np.asarray(p) - np.asarray(q) + np.pi, TWO_PI) - np.pi
    return np.sqrt(np.sum(d * d, axis=-1))


def uniform_grid(side: int) -> np.ndarray:
    """``side**2`` points of the uniform grid ``2*pi*(i, j)/side``, row-major in i."""
    if side < 1:
        raise ValueError(f"grid side must be positive, got {side}")
    h = TWO_PI / side
    a = np.arange(side) * h
    t1, t2 = np.meshgrid(a, a, indexing="ij")
    return np.stack([t1.ravel(), t2.ravel()], axis=-1)


@dataclass(frozen=True)
class TorusPoint:
    theta1: float
    theta2: float

    def __post_init__(self):
        w = wrap(np.array([self.theta1, self.theta2], dtype=float))
        object.__setattr__(self, "theta1", float(w[0]))
        object.__setattr__(self, "theta2", float(w[1]))

    def as_array(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2])


def half_plane_modes(degree: int) -> np.ndarray:
    """Canonical representatives of {k, -k} with 0 < |k|_inf <= degree.

    A wave vector is canonical when k1 > 0, or k1 == 0 and k2 > 0.
    """
    out = [(0, k2) for k2 in range(1, degree + 1)]
    out += [(k1, k2) for k1 in range(1, degree + 1) for k2 in range(-degree, degree + 1)]
    return np.array(out, dtype=int).reshape(-1, 2)


class PhaseTable:
    """Powers exp(i*a*theta1), a in [0, D], and exp(i*b*theta2), b in [-D, D].

    Built by repeated multiplication, which is elementwise and therefore gives
    identical bits whatever the batch shape of ``points``.
    """

    def __init__(self, points: np.ndarray, degree: int):
        points = np.asarray(points, dtype=float)
        self.degree = degree
        z1 = np.exp(1j * points[..., 0])
        z2 = np.exp(1j * points[..., 1])
        shape = points.shape[:-1]
        p1 = np.empty(shape + (degree + 1,), dtype=complex)
        p2 = np.empty(shape + (2 * degree + 1,), dtype=complex)
        p1[..., 0] = 1.0
        p2[..., degree] = 1.0
        for a in range(1, degree + 1):
            p1[..., a] = p1[..., a - 1] * z1
            p2[..., degree + a] = p2[..., degree + a - 1] * z2
            p2[..., degree - a] = np.conj(p2[..., degree + a])
        self.p1 = p1
        self.p2 = p2

    def phase(self, k1: int, k2: int) -> np.ndarray:
        """exp(i k.theta) for a canonical k (k1 >= 0)."""
        return self.p1[..., k1] * self.p2[..., k2 + self.degree]

    def matrix(self, modes: np.ndarray) -> np.ndarray:
        """Stack of exp(i k.theta) over canonical ``modes``, last axis = mode."""
        if len(modes) == 0:
            return np.zeros(self.p1.shape[:-1] + (0,), dtype=complex)
        return self.p1[..., modes[:, 0]] * self.p2[..., modes[:, 1] + self.degree]


class TrigPoly:
    """Real trigonometric polynomial on the torus with exact calculus."""

    __slots__ = ("coef",)

    def __init__(self, coef: np.ndarray):
        c = np.array(coef, dtype=complex)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] % 2 != 1:
            raise ValueError(f"coefficient array must be (2D+1, 2D+1), got {c.shape}")
        c = 0.5 * (c + np.conj(c[::-1, ::-1]))
        c.flags.writeable = False
        self.coef = c

    # construction

    @classmethod
    def zero(cls, degree: int = 0) -> "TrigPoly":
        return cls(np.zeros((2 * degree + 1, 2 * degree + 1), dtype=complex))

    @classmethod
    def constant(cls, value: float) -> "TrigPoly":
        return cls(np.array([[complex(value)]]))

    @classmethod
    def from_terms(cls, terms: dict | Iterable) -> "TrigPoly":
        """Build from ``{(k1, k2): (a, b)}`` meaning ``a cos(k.theta) + b sin(k.theta)``.

        Both k and -k may appear; their contributions add.
        """
        items = list(terms.items()) if isinstance(terms, dict) else list(terms)
        degree = max([max(abs(int(k[0])), abs(int(k[1]))) for k, _ in items] + [0])
        c = np.zeros((2 * degree + 1, 2 * degree + 1), dtype=complex)
        for (k1, k2), (a, b) in items:
            k1, k2 = int(k1), int(k2)
            if k1 == 0 and k2 == 0:
                c[degree, degree] += a
                continue
            c[degree + k1, degree + k2] += 0.5 * (a - 1j * b)
            c[degree - k1, degree - k2] += 0.5 * (a + 1j * b)
        return cls(c)

    @classmethod
    def cos(cls, k: Sequence[int], amplitude: float = 1.0) -> "TrigPoly":
        return cls.from_terms({tuple(k): (amplitude, 0.0)})

    @classmethod
    def sin(cls, k: Sequence[int], amplitude: float = 1.0) -> "TrigPoly":
        return cls.from_terms({tuple(k): (0.0, amplitude)})

    @classmethod
    def random(cls, degree: int, rng: np.random.Generator, scale: float = 1.0) -> "TrigPoly":
        terms = {(0, 0): (scale * rng.standard_normal(), 0.0)}
        for k in half_plane_modes(degree):
            terms[tuple(k)] = tuple(scale * rng.standard_normal(2))
        return cls.from_terms(terms)

    # structure

    @property
    def degree(self) -> int:
        return (self.coef.shape[0] - 1) // 2

    def padded(self, degree: int) -> np.ndarray:
        d = self.degree
        if degree < d:
            raise ValueError("cannot pad to a smaller degree")
        out = np.zeros((2 * degree + 1, 2 * degree + 1), dtype=complex)
        out[degree - d:degree + d + 1, degree - d:degree + d + 1] = self.coef
        return out

    def trimmed(self, tol: float = 0.0) -> "TrigPoly":
        c = self.coef
        d = self.degree
        while d > 0:
            ring = np.concatenate([c[0], c[-1], c[1:-1, 0], c[1:-1, -1]])
            if np.max(np.abs(ring)) > tol:
                break
            c = c[1:-1, 1:-1]
            d -= 1
        return TrigPoly(c)

    def terms(self) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
        """Canonical form: (modes, constant, cos coefficients, sin coefficients)."""
        d = self.degree
        modes = half_plane_modes(d)
        ck = self.coef[modes[:, 0] + d, modes[:, 1] + d] if len(modes) else np.zeros(0, complex)
        return modes, float(self.coef[d, d].real), 2.0 * ck.real, -2.0 * ck.imag

    def mean(self) -> float:
        return float(self.coef[self.degree, self.degree].real)

    # evaluation

    def __call__(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        modes, c0, a, b = self.terms()
        if len(modes) == 0:
            return np.full(points.shape[:-1], c0)
        e = PhaseTable(points, self.degree).matrix(modes)
        return c0 + e.real @ a + e.imag @ b

    # algebra

    def _binary(self, other: "TrigPoly", op) -> "TrigPoly":
        d = max(self.degree, other.degree)
        return TrigPoly(op(self.padded(d), other.padded(d)))

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = TrigPoly.constant(other)
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = TrigPoly.constant(other)
        return self._binary(other, np.subtract)

    def __neg__(self):
        return TrigPoly(-self.coef)

    def __mul__(self, other):
        if isinstance(other, TrigPoly):
            return TrigPoly(convolve2d(self.coef, other.coef))
        return TrigPoly(self.coef * float(other))

    __rmul__ = __mul__

    def __truediv__(self, scalar: float):
        return TrigPoly(self.coef / float(scalar))

    def allclose(self, other: "TrigPoly", atol: float = 1e-12) -> bool:
        d = max(self.degree, other.degree)
        return bool(np.max(np.abs(self.padded(d) - other.padded(d))) <= atol)

    # calculus

    def _wavenumbers(self):
        d = self.degree
        k = np.arange(-d, d + 1)
        return np.meshgrid(k, k, indexing="ij")

    def d1(self) -> "TrigPoly":
        k1, _ = self._wavenumbers()
        return TrigPoly(1j * k1 * self.coef)

    def d2(self) -> "TrigPoly":
        _, k2 = self._wavenumbers()
        return TrigPoly(1j * k2 * self.coef)

    def grad(self) -> "VectorTrigPoly":
        return VectorTrigPoly(self.d1(), self.d2())

    def laplacian(self) -> "TrigPoly":
        k1, k2 = self._wavenumbers()
        return TrigPoly(-(k1 ** 2 + k2 ** 2) * self.coef)

    def shift(self, a: Sequence[float]) -> "TrigPoly":
        """The polynomial x -> f(x + a)."""
        k1, k2 = self._wavenumbers()
        return TrigPoly(self.coef * np.exp(1j * (k1 * a[0] + k2 * a[1])))

    def heat(self, t: float) -> "TrigPoly":
        """Heat semigroup exp(t Delta / 2) applied to f."""
        k1, k2 = self._wavenumbers()
        return TrigPoly(self.coef * np.exp(-0.5 * t * (k1 ** 2 + k2 ** 2)))

    def norm(self) -> float:
        return float(np.sqrt(l2_inner(self, self)))

    def sup_bound(self) -> float:
        """Upper bound of sup |f|: the l1 norm of the coefficients."""
        return float(np.sum(np.abs(self.coef)))

    def to_json(self) -> dict:
        modes, c0, a, b = self.terms()
        return {
            "degree": self.degree,
            "constant": c0,
            "modes": [{"k": [int(k[0]), int(k[1])], "cos": float(x), "sin": float(y)}
                      for k, x, y in zip(modes, a, b) if x != 0.0 or y != 0.0],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrigPoly":
        terms = [((0, 0), (doc.get("constant", 0.0), 0.0))]
        terms += [(tuple(m["k"]), (m["cos"], m["sin"])) for m in doc["modes"]]
        p = cls.from_terms(terms)
        degree = int(doc.get("degree", p.degree))
        return TrigPoly(p.padded(degree)) if degree > p.degree else p

    def __repr__(self):
        return f"TrigPoly(degree={self.degree})"


def l2_inner(f: TrigPoly, g: TrigPoly) -> float:
    """Integral of f*g against the normalized volume measure."""
    d = max(f.degree, g.degree)
    return float(np.vdot(g.padded(d), f.padded(d)).real)


def trig_eval(f: TrigPoly, p) -> float | np.ndarray:
    if isinstance(p, TorusPoint):
        return float(f(p.as_array()))
    return f(p)


@dataclass(frozen=True)
class VectorTrigPoly:
    u1: TrigPoly
    u2: TrigPoly

    @classmethod
    def zero(cls) -> "VectorTrigPoly":
        return cls(TrigPoly.zero(), TrigPoly.zero())

    @classmethod
    def constant(cls, c: Sequence[float]) -> "VectorTrigPoly":
        return cls(TrigPoly.constant(c[0]), TrigPoly.constant(c[1]))

    @property
    def degree(self) -> int:
        return max(self.u1.degree, self.u2.degree)

    def __call__(self, points) -> np.ndarray:
        return np.stack([self.u1(points), self.u2(points)], axis=-1)

    def __add__(self, other: "VectorTrigPoly") -> "VectorTrigPoly":
        return VectorTrigPoly(self.u1 + other.u1, self.u2 + other.u2)

    def __sub__(self, other: "VectorTrigPoly") -> "VectorTrigPoly":
        return VectorTrigPoly(self.u1 - other.u1, self.u2 - other.u2)

    def __mul__(self, scalar: float) -> "VectorTrigPoly":
        return VectorTrigPoly(self.u1 * scalar, self.u2 * scalar)

    __rmul__ = __mul__

    def div(self) -> TrigPoly:
        return self.u1.d1() + self.u2.d2()

    def dot(self, other: "VectorTrigPoly") -> TrigPoly:
        return self.u1 * other.u1 + self.u2 * other.u2

    def directional(self, f: TrigPoly) -> TrigPoly:
        """<grad f, self>."""
        return f.d1() * self.u1 + f.d2() * self.u2

    def covariant(self, other: "VectorTrigPoly") -> "VectorTrigPoly":
        """Flat connection: (self . grad) other."""
        return VectorTrigPoly(self.directional(other.u1), self.directional(other.u2))

    def padded(self, degree: int) -> np.ndarray:
        """Coefficients as an array (2, 2D+1, 2D+1)."""
        return np.stack([self.u1.padded(degree), self.u2.padded(degree)])

    @classmethod
    def from_array(cls, coef: np.ndarray) -> "VectorTrigPoly":
        return cls(TrigPoly(coef[0]), TrigPoly(coef[1]))

    def allclose(self, other: "VectorTrigPoly", atol: float = 1e-12) -> bool:
        return self.u1.allclose(other.u1, atol) and self.u2.allclose(other.u2, atol)


def trig_calculus(f: TrigPoly) -> dict:
    return {"gradient": f.grad(), "laplacian": f.laplacian()}


def div_product(psi: TrigPoly, V: VectorTrigPoly) -> TrigPoly:
    """div(psi V) computed exactly: d1(psi V1) + d2(psi V2)."""
    return (psi * V.u1).d1() + (psi * V.u2).d2()


def mode_field(k: Sequence[int], parity: str) -> VectorTrigPoly:
    """Unweighted torus mode: A_k = (k2, -k1) cos(k.theta), B_k = (k2, -k1) sin(k.theta)."""
    k = (int(k[0]), int(k[1]))
    make = {"A": TrigPoly.cos, "B": TrigPoly.sin}[parity]
    return VectorTrigPoly(make(k, float(k[1])), make(k, float(-k[0])))


@dataclass(frozen=True)
class NoiseMode:
    k: tuple[int, int]
    parity: str
    weight: float


@dataclass(frozen=True)
class NoiseBasis:
    """Weighted divergence-free fields sigma_i with sum_i sigma_i (x) sigma_i = c * Id.

    Modes come in A/B pairs sharing one canonical wave vector and one weight;
    the stepping code relies on that pairing (``classes``).
    """

    cutoff: int
    decay: float
    normalization: float
    modes: tuple[NoiseMode, ...]
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def empty(cls) -> "NoiseBasis":
        return cls(cutoff=0, decay=0.0, normalization=0.0, modes=())

    def __len__(self) -> int:
        return len(self.modes)

    @property
    def classes(self) -> tuple[np.ndarray, np.ndarray]:
        """(wave vectors (m, 2), weights (m,)) of the A/B pairs, in field order."""
        if "classes" not in self._cache:
            ks = np.array([m.k for m in self.modes[0::2]], dtype=int).reshape(-1, 2)
            ws = np.array([m.weight for m in self.modes[0::2]], dtype=float)
            self._cache["classes"] = (ks, ws)
        return self._cache["classes"]

    def fields(self) -> list[VectorTrigPoly]:
        return [mode_field(m.k, m.parity) * m.weight for m in self.modes]

    def to_json(self) -> dict:
        return {
            "cutoff": self.cutoff,
            "decay": self.decay,
            "normalization": self.normalization,
            "modes": [{"k": list(m.k), "parity": m.parity, "weight": m.weight} for m in self.modes],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NoiseBasis":
        modes = tuple(NoiseMode((int(m["k"][0]), int(m["k"][1])), m["parity"], float(m["weight"]))
                      for m in doc["modes"])
        for a, b in zip(modes[0::2], modes[1::2]):
            if (a.parity, b.parity) != ("A", "B") or a.k != b.k or a.weight != b.weight:
                raise ValueError("noise modes must come in (A, B) pairs with equal k and weight")
        if len(modes) % 2:
            raise ValueError("odd number of noise modes")
        return cls(int(doc["cutoff"]), float(doc["decay"]), float(doc["normalization"]), modes)

    @property
    def id(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_noise_basis(K: int, decay: float = 2.0) -> NoiseBasis:
    """Fields lambda_k A_k, lambda_k B_k for 0 < |k|_inf <= K, rescaled so sum sigma sigma^T = Id."""
    if K < 1:
        raise ValueError(f"cutoff K must be >= 1, got {K}")
    if decay < 0:
        raise ValueError(f"decay must be nonnegative, got {decay}")
    ks = half_plane_modes(K)
    norms = np.sqrt(np.sum(ks.astype(float) ** 2, axis=1))
    lam = norms ** (-decay)
    # each A/B pair contributes lambda^2 v v^T with |v| = |k|; symmetry makes the sum c * Id
    c = 0.5 * np.sum(lam ** 2 * norms ** 2)
    lam = lam / np.sqrt(c)
    modes = []
    for k, w in zip(ks, lam):
        modes.append(NoiseMode((int(k[0]), int(k[1])), "A", float(w)))
        modes.append(NoiseMode((int(k[0]), int(k[1])), "B", float(w)))
    return NoiseBasis(cutoff=K, decay=float(decay), normalization=1.0, modes=tuple(modes))


@dataclass
class StructureReport:
    max_divergence: float
    max_covariance_deviation: float
    max_self_transport: float
    n_points: int
    tol: float = STRUCTURE_TOL

    @property
    def valid(self) -> bool:
        return max(self.max_divergence, self.max_covariance_deviation, self.max_self_transport) <= self.tol

    def to_json(self) -> dict:
        return {
            "max_divergence": self.max_divergence,
            "max_covariance_deviation": self.max_covariance_deviation,
            "max_self_transport": self.max_self_transport,
            "n_points": self.n_points,
            "tol": self.tol,
            "valid": self.valid,
        }


def check_structure(basis: NoiseBasis | Sequence[VectorTrigPoly], points: np.ndarray | None = None,
                    normalization: float | None = None) -> StructureReport:
    """Residuals of div sigma_i = 0, sum sigma_i sigma_i^T = c Id and sum (sigma_i . grad) sigma_i = 0."""
    if isinstance(basis, NoiseBasis):
        fields = basis.fields()
        c = basis.normalization if normalization is None else normalization
    else:
        fields = list(basis)
        c = 1.0 if normalization is None else normalization
    if points is None:
        rng = np.random.default_rng(20240601)
        points = np.concatenate([rng.uniform(0, TWO_PI, (100, 2)), uniform_grid(12)])
    points = np.asarray(points, dtype=float)
    cov = np.zeros(points.shape[:-1] + (2, 2))
    transport = np.zeros(points.shape)
    div_max = 0.0
    for f in fields:
        div_max = max(div_max, float(np.max(np.abs(f.div()(points)))))
        v = f(points)
        cov += v[..., :, None] * v[..., None, :]
        transport += f.covariant(f)(points)
    dev = float(np.max(np.abs(cov - c * np.eye(2)))) if len(points) else 0.0
    tr = float(np.max(np.abs(transport))) if len(points) else 0.0
    return StructureReport(div_max, dev, tr, len(points))


class PolyBank:
    """Several polynomials with coefficients laid out once for repeated evaluation.

    Coefficients are kept on the half plane k1 >= 0 (rows k1 > 0 doubled), so
    that sum_x w(x) f(x) = Re sum_k C_k F_k with F_k = sum_x w(x) exp(i k.x).
    """

    def __init__(self, polys: Sequence[TrigPoly]):
        self.size = len(polys)
        D = self.degree = max((p.degree for p in polys), default=0)
        half = np.zeros((self.size, D + 1, 2 * D + 1), dtype=complex)
        for j, p in enumerate(polys):
            half[j] = p.padded(D)[D:, :]
        half[:, 1:, :] *= 2.0
        flat = half.reshape(self.size, -1).T
        self.cr = np.ascontiguousarray(flat.real)
        self.ci = np.ascontiguousarray(flat.imag)

    def _combine(self, F: np.ndarray) -> np.ndarray:
        lead = F.shape[:-2]
        F = F.reshape(-1, self.cr.shape[0])
        out = np.ascontiguousarray(F.real) @ self.cr - np.ascontiguousarray(F.imag) @ self.ci
        return out.reshape(lead + (self.size,))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        t = PhaseTable(points, self.degree)
        return self._combine(t.p1[..., :, None] * t.p2[..., None, :])

    def quadrature(self, weights: np.ndarray, points: np.ndarray) -> np.ndarray:
        """sum_n weights[n, j] f_p(points[..., n, :]) with shape points.shape[:-2] + (J, P)."""
        points = np.asarray(points, dtype=float)
        t = PhaseTable(points, self.degree)
        J = weights.shape[1]
        lead = points.shape[:-2]
        n = points.shape[-2]
        D = self.degree
        # G[..., j, a, n] = w[n, j] p1[..., n, a]; F = G @ p2
        G = weights.T[:, None, :] * np.moveaxis(t.p1, -1, -2)[..., None, :, :]
        F = np.matmul(G.reshape(lead + (J * (D + 1), n)), t.p2)
        return self._combine(F.reshape(lead + (J, D + 1, 2 * D + 1)))


def evaluate_many(polys: Sequence[TrigPoly], points: np.ndarray) -> np.ndarray:
    """Values of several polynomials at shared points, shape points.shape[:-1] + (len(polys),)."""
    return PolyBank(polys)(points)


TestFunction = TrigPoly | Callable[[np.ndarray], np.ndarray]


def evaluate_test_functions(funcs: Sequence[TestFunction], points: np.ndarray) -> np.ndarray:
    """Values of trig polynomials or plain callables at points, last axis = function."""
    cols = [np.asarray(f(points), dtype=float) for f in funcs]
    return np.stack(cols, axis=-1) if cols else np.zeros(np.asarray(points).shape[:-1] + (0,))
