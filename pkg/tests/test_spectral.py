import json

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from gnsflow.spectral import (
    TWO_PI, NoiseBasis, PolyBank, TrigPoly, VectorTrigPoly, build_noise_basis, check_structure, div_product,
    evaluate_many, half_plane_modes, l2_inner, mode_field, torus_distance, uniform_grid, wrap,
)

X1, X2 = sp.symbols("x1 x2", real=True)


def sym(f: TrigPoly):
    """sympy expression of a TrigPoly built from its cos/sin terms."""
    modes, c0, a, b = f.terms()
    expr = sp.Float(c0)
    for (k1, k2), x, y in zip(modes, a, b):
        arg = int(k1) * X1 + int(k2) * X2
        expr += sp.Float(x) * sp.cos(arg) + sp.Float(y) * sp.sin(arg)
    return expr


def at(expr, points):
    fn = sp.lambdify((X1, X2), expr, "numpy")
    return np.broadcast_to(fn(points[:, 0], points[:, 1]), (len(points),))


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def pts(rng):
    return rng.uniform(0, TWO_PI, (40, 2))


polys = st.builds(lambda seed, d: TrigPoly.random(d, np.random.default_rng(seed)),
                  st.integers(0, 10_000), st.integers(0, 3))


class TestTrigPoly:
    def test_terms_roundtrip_matches_sympy(self, rng, pts):
        f = TrigPoly.random(3, rng)
        assert np.allclose(f(pts), at(sym(f), pts), atol=1e-12)

    def test_derivatives_against_sympy(self, rng, pts):
        f = TrigPoly.random(3, rng)
        e = sym(f)
        assert np.allclose(f.d1()(pts), at(sp.diff(e, X1), pts), atol=1e-11)
        assert np.allclose(f.d2()(pts), at(sp.diff(e, X2), pts), atol=1e-11)
        assert np.allclose(f.laplacian()(pts), at(sp.diff(e, X1, 2) + sp.diff(e, X2, 2), pts), atol=1e-10)

    def test_product_against_sympy(self, rng, pts):
        f, g = TrigPoly.random(2, rng), TrigPoly.random(2, rng)
        assert (f * g).degree == 4
        assert np.allclose((f * g)(pts), at(sym(f) * sym(g), pts), atol=1e-11)

    def test_shift_and_heat(self, pts):
        f = TrigPoly.cos((1, 2)) + TrigPoly.sin((0, 1)) * 0.5
        a = (0.3, -1.1)
        assert np.allclose(f.shift(a)(pts), f(pts + np.array(a)), atol=1e-12)
        h = f.heat(0.4)
        assert np.allclose(h(pts), np.exp(-0.2 * 5) * np.cos(pts @ [1, 2])
                           + 0.5 * np.exp(-0.2) * np.sin(pts[:, 1]), atol=1e-12)

    def test_mean_and_l2_inner_by_quadrature(self, rng):
        f, g = TrigPoly.random(3, rng), TrigPoly.random(2, rng)
        grid = uniform_grid(32)  # exact for degree < 16
        assert f.mean() == pytest.approx(f(grid).mean(), abs=1e-12)
        assert l2_inner(f, g) == pytest.approx(np.mean(f(grid) * g(grid)), abs=1e-12)
        assert f.norm() ** 2 == pytest.approx(np.mean(f(grid) ** 2), abs=1e-12)

    def test_sup_bound_dominates(self, rng):
        f = TrigPoly.random(3, rng)
        assert np.max(np.abs(f(uniform_grid(64)))) <= f.sup_bound() + 1e-12

    def test_json_roundtrip(self, rng):
        f = TrigPoly.random(2, rng)
        g = TrigPoly.from_json(json.loads(json.dumps(f.to_json())))
        assert g.allclose(f, atol=0)

    @given(polys)
    @settings(max_examples=30, deadline=None)
    def test_values_are_real_and_hermitian(self, f):
        c = f.coef
        assert np.allclose(c, np.conj(c[::-1, ::-1]))

    @given(polys, polys)
    @settings(max_examples=30, deadline=None)
    def test_inner_symmetric_and_linear(self, f, g):
        assert l2_inner(f, g) == pytest.approx(l2_inner(g, f), abs=1e-12)
        assert l2_inner(f * 2.0 + g, g) == pytest.approx(2 * l2_inner(f, g) + l2_inner(g, g), abs=1e-10)

    @given(polys)
    @settings(max_examples=20, deadline=None)
    def test_integration_by_parts(self, f):
        g = TrigPoly.cos((1, 1)) + TrigPoly.sin((2, 0))
        assert l2_inner(f.laplacian(), g) == pytest.approx(l2_inner(f, g.laplacian()), abs=1e-10)


class TestGeometry:
    def test_wrap_range(self):
        p = wrap(np.array([[-1e-18, TWO_PI], [7.0, -7.0]]))
        assert np.all((p >= 0) & (p < TWO_PI))

    def test_torus_distance_periodic(self):
        a = np.array([[0.1, 0.1]])
        b = np.array([[TWO_PI - 0.1, 0.1]])
        assert torus_distance(a, b)[0] == pytest.approx(0.2)

    def test_uniform_grid(self):
        g = uniform_grid(4)
        assert g.shape == (16, 2)
        assert np.allclose(np.sort(np.unique(g[:, 0])), np.arange(4) * TWO_PI / 4)

    def test_half_plane_modes_cover_one_of_each_pair(self):
        ks = {tuple(k) for k in half_plane_modes(2)}
        assert len(ks) == (25 - 1) // 2
        assert all((-k1, -k2) not in ks for k1, k2 in ks)


class TestFields:
    @pytest.mark.parametrize("parity", ["A", "B"])
    def test_modes_divergence_free(self, parity, pts):
        V = mode_field((2, -1), parity)
        assert np.max(np.abs(V.div()(pts))) < 1e-12

    def test_div_product_against_sympy(self, rng, pts):
        psi = TrigPoly.random(2, rng)
        V = VectorTrigPoly(TrigPoly.random(1, rng), TrigPoly.random(1, rng))
        e = sp.diff(sym(psi) * sym(V.u1), X1) + sp.diff(sym(psi) * sym(V.u2), X2)
        assert np.allclose(div_product(psi, V)(pts), at(e, pts), atol=1e-11)

    def test_covariant_self_transport_of_mode(self, pts):
        # (A . grad) A = 0 for a single mode: A is constant along its own direction
        V = mode_field((1, 2), "A")
        assert np.max(np.abs(V.covariant(V)(pts))) < 1e-12


class TestNoiseBasis:
    @pytest.mark.parametrize("K", [1, 2, 3])
    def test_structure(self, K):
        rep = check_structure(build_noise_basis(K))
        assert rep.valid
        assert max(rep.max_divergence, rep.max_covariance_deviation, rep.max_self_transport) <= 1e-10

    def test_size_and_pairs(self):
        b = build_noise_basis(2)
        assert len(b) == 2 * len(half_plane_modes(2))
        ks, ws = b.classes
        assert len(ks) == len(ws) == len(b) // 2

    def test_decay_changes_weights_not_normalization(self):
        b = build_noise_basis(3, decay=0.0)
        assert check_structure(b).valid
        _, ws = b.classes
        assert np.allclose(ws, ws[0])

    def test_json_roundtrip_and_id(self):
        b = build_noise_basis(2, 1.5)
        c = NoiseBasis.from_json(json.loads(json.dumps(b.to_json())))
        assert c.to_json() == b.to_json() and c.id == b.id

    def test_unpaired_modes_rejected(self):
        doc = build_noise_basis(1).to_json()
        doc["modes"] = doc["modes"][:-1]
        with pytest.raises(ValueError):
            NoiseBasis.from_json(doc)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            build_noise_basis(0)
        with pytest.raises(ValueError):
            build_noise_basis(2, decay=-1)

    def test_structure_detects_bad_field(self):
        bad = [VectorTrigPoly(TrigPoly.cos((1, 0)), TrigPoly.zero())]
        assert not check_structure(bad).valid

    def test_empty_basis(self):
        assert len(NoiseBasis.empty()) == 0


class TestPolyBank:
    def test_matches_direct_evaluation(self, rng):
        fs = [TrigPoly.random(d, rng) for d in (0, 1, 3)]
        p = rng.uniform(0, TWO_PI, (5, 30, 2))
        direct = np.stack([f(p) for f in fs], axis=-1)
        assert np.allclose(evaluate_many(fs, p), direct, atol=1e-12)

    def test_quadrature_matches_weighted_sum(self, rng):
        fs = [TrigPoly.random(2, rng) for _ in range(3)]
        p = rng.uniform(0, TWO_PI, (4, 50, 2))
        w = rng.standard_normal((50, 2))
        direct = np.einsum("nj,tnp->tjp", w, np.stack([f(p) for f in fs], axis=-1))
        assert np.allclose(PolyBank(fs).quadrature(w, p), direct, atol=1e-11)
