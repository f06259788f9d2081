import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import chebyshev as C
from numpy.polynomial import legendre as L

from hcfeedback.basis import (
    DomainMap,
    build_index_set,
    domain_map,
    eval_basis_row,
    eval_basis_rows,
    eval_univariate,
    hc_cardinality_bound,
    index_set_cardinality,
    univariate_table,
    weights,
)
from hcfeedback.errors import ConfigError, ResourceError


@pytest.mark.parametrize(
    "n, s, q", [(2, 16, 52), (18, 4, 226), (18, 8, 1879), (80, 4, 3481)]
)
def test_hyperbolic_cross_cardinality(n, s, q):
    I = build_index_set(n, s, "hc")
    assert I.q == q
    assert index_set_cardinality(n, s, "hc") == q
    assert np.all(np.prod(I.indices + 1, axis=1) <= s + 1)


def _brute(n, s, kind):
    out = set()
    for t in itertools.product(range(s + 1), repeat=n):
        a = np.array(t)
        if kind == "tp" or (kind == "td" and a.sum() <= s) or (kind == "hc" and np.prod(a + 1) <= s + 1):
            out.add(t)
    return out


@pytest.mark.parametrize("kind", ["hc", "td", "tp"])
@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_index_sets_match_brute_force(kind, n):
    for s in range(0, 7 if n < 4 else 5):
        I = build_index_set(n, s, kind)
        got = I.as_tuples()
        assert len(set(got)) == len(got)
        assert set(got) == _brute(n, s, kind)


def test_hc_brute_force_n6():
    assert set(build_index_set(6, 5).as_tuples()) == _brute(6, 5, "hc")


def test_tensor_and_total_degree_counts():
    assert build_index_set(3, 2, "tp").q == 27
    assert index_set_cardinality(80, 4, "td") == 1_929_501
    assert index_set_cardinality(80, 4, "td") == 1 + sum(math.comb(79 + j, j) for j in range(1, 5))


def test_ordering_product_then_lex():
    I = build_index_set(2, 16)
    rows = I.as_tuples()
    assert rows[0] == (0, 0)
    keys = [(math.prod(i + 1 for i in r), r) for r in rows]
    assert keys == sorted(keys)
    assert rows[:5] == [(0, 0), (0, 1), (1, 0), (0, 2), (2, 0)]


def test_cap_raises_resource_error():
    with pytest.raises(ResourceError):
        build_index_set(80, 4, "td", cap=10**6)
    with pytest.raises(ResourceError):
        build_index_set(30, 3, "tp")


def test_unknown_kind():
    with pytest.raises(ConfigError):
        build_index_set(2, 2, "sparse")


def test_index_set_monotone_and_nested():
    for n in (2, 3):
        for s in range(5):
            hc = set(build_index_set(n, s, "hc").as_tuples())
            td = set(build_index_set(n, s, "td").as_tuples())
            tp = set(build_index_set(n, s, "tp").as_tuples())
            assert hc <= td <= tp
            for kind, cur in (("hc", hc), ("td", td), ("tp", tp)):
                assert cur <= set(build_index_set(n, s + 1, kind).as_tuples())


def test_cardinality_bound():
    assert hc_cardinality_bound(80, 4) == pytest.approx(math.e**2 * 16 * 6400, rel=1e-12)
    assert hc_cardinality_bound(80, 4) == pytest.approx(7.566e5, rel=1e-3)
    assert 3481 <= hc_cardinality_bound(80, 4)
    for s in range(1, 10):
        assert hc_cardinality_bound(1, s) >= s + 1
    # at s=1 the set has n+1 elements, above e^2 once n >= 7
    assert index_set_cardinality(18, 1) > hc_cardinality_bound(18, 1)
    for s in range(2, 10):
        for n in (2, 5, 18, 80):
            assert index_set_cardinality(n, s) <= hc_cardinality_bound(n, s)


def test_univariate_examples():
    z = np.linspace(-1, 1, 7)
    v, d = eval_univariate("legendre", 0, z)
    np.testing.assert_allclose(v, 1 / math.sqrt(2))
    np.testing.assert_allclose(d, 0)
    v, d = eval_univariate("legendre", 1, z)
    np.testing.assert_allclose(v, math.sqrt(1.5) * z)
    np.testing.assert_allclose(d, math.sqrt(1.5))
    v, d = eval_univariate("chebyshev", 2, 1.0)
    assert v == pytest.approx(math.sqrt(2))
    assert d == pytest.approx(4 * math.sqrt(2))
    v, d = eval_univariate("chebyshev", 2, -1.0)
    assert d == pytest.approx(-4 * math.sqrt(2))


@pytest.mark.parametrize("family", ["legendre", "chebyshev"])
def test_univariate_against_numpy_polynomials(family):
    z = np.linspace(-1, 1, 41)
    val, der = univariate_table(family, 20, z)
    for k in range(21):
        c = np.zeros(k + 1)
        c[k] = 1
        if family == "legendre":
            ref, dref = L.legval(z, c), L.legval(z, L.legder(c))
            f = math.sqrt(k + 0.5)
        else:
            ref, dref = C.chebval(z, c), C.chebval(z, C.chebder(c))
            f = math.sqrt(2) if k else 1.0
        np.testing.assert_allclose(val[:, k], f * ref, atol=1e-11)
        np.testing.assert_allclose(der[:, k], f * dref, rtol=1e-10, atol=1e-9)


def test_orthonormality():
    x, w = L.leggauss(40)
    val, _ = univariate_table("legendre", 20, x)
    np.testing.assert_allclose(val.T @ (w[:, None] * val), np.eye(21), atol=1e-10)
    M = 40
    x = np.cos((2 * np.arange(1, M + 1) - 1) * np.pi / (2 * M))
    val, _ = univariate_table("chebyshev", 20, x)
    np.testing.assert_allclose(val.T @ val / M, np.eye(21), atol=1e-10)


@pytest.mark.parametrize("family", ["legendre", "chebyshev"])
def test_univariate_derivatives_finite_difference(family):
    z = np.linspace(-0.99, 0.99, 100)
    h = 1e-6
    _, der = univariate_table(family, 20, z)
    fd = (univariate_table(family, 20, z + h)[0] - univariate_table(family, 20, z - h)[0]) / (2 * h)
    scale = np.maximum(np.abs(der), 1.0)
    assert np.max(np.abs(fd - der) / scale) < 1e-6


def test_boundedness():
    z = np.linspace(-1, 1, 2001)
    val, _ = univariate_table("legendre", 20, z)
    assert np.all(np.abs(val) <= np.sqrt(np.arange(21) + 1) + 1e-12)
    val, _ = univariate_table("chebyshev", 20, z)
    assert np.all(np.abs(val) <= math.sqrt(2) + 1e-12)


def test_clamping_of_tiny_overshoot():
    v1, _ = eval_univariate("chebyshev", 3, 1.0 + 1e-13)
    v2, _ = eval_univariate("chebyshev", 3, 1.0)
    assert v1 == v2


def test_basis_row_hand_values():
    I = build_index_set(2, 4)
    k = I.position((1, 0))
    phi, dphi = eval_basis_row(I, "legendre", np.array([0.5, 0.3]))
    assert phi[k] == pytest.approx(math.sqrt(1.5) * 0.5 / math.sqrt(2))
    assert dphi[0, k] == pytest.approx(math.sqrt(1.5) / math.sqrt(2))
    assert dphi[1, k] == 0.0
    assert phi[0] == pytest.approx(0.5)
    np.testing.assert_array_equal(dphi[:, 0], 0.0)


@pytest.mark.parametrize("family", ["legendre", "chebyshev"])
def test_basis_rows_dense_reference(family, rng):
    I = build_index_set(4, 8)
    Z = rng.uniform(-1, 1, (20, 4))
    Phi, dPhi = eval_basis_rows(I, family, Z)
    val, der = univariate_table(family, 8, Z)
    ref = np.ones((20, I.q))
    for k, idx in enumerate(I.indices):
        for j, d in enumerate(idx):
            ref[:, k] *= val[:, j, d]
    np.testing.assert_allclose(Phi, ref, rtol=1e-12, atol=1e-14)
    h = 1e-6
    for m in range(4):
        e = np.zeros(4)
        e[m] = h
        fd = (eval_basis_rows(I, family, Z + e, False)[0] - eval_basis_rows(I, family, Z - e, False)[0]) / (2 * h)
        assert np.max(np.abs(fd - dPhi[:, m])) / np.max(np.abs(dPhi)) < 1e-6


def test_high_dimensional_evaluation_is_consistent(rng):
    I = build_index_set(80, 4)
    Z = rng.uniform(-1, 1, (3, 80))
    Phi, dPhi = eval_basis_rows(I, "legendre", Z)
    assert Phi.shape == (3, 3481) and dPhi.shape == (3, 80, 3481)
    k = I.position(np.eye(80, dtype=int)[7] * 3)
    expected = math.sqrt(3.5) * L.legval(Z[:, 7], [0, 0, 0, 1]) * 2.0 ** (-79 / 2)
    np.testing.assert_allclose(Phi[:, k], expected, rtol=1e-12)


def test_domain_map_examples():
    z, jac = domain_map([-3, -3], [3, 3], [0.0, 3.0])
    np.testing.assert_allclose(z, [0.0, 1.0])
    np.testing.assert_allclose(jac, [1 / 3, 1 / 3])
    dm = DomainMap([-1.0, 2.0], [1.0, 5.0])
    np.testing.assert_allclose(dm.to_unit(dm.lower), -1)
    np.testing.assert_allclose(dm.to_unit(dm.upper), 1)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-100, 100), min_size=3, max_size=3),
    st.lists(st.floats(0.01, 50), min_size=3, max_size=3),
    st.lists(st.floats(-1, 1), min_size=3, max_size=3),
)
def test_domain_map_round_trip(a, width, z):
    a = np.array(a)
    dm = DomainMap(a, a + np.array(width))
    x = dm.from_unit(np.array(z))
    np.testing.assert_allclose(dm.to_unit(x), z, atol=1e-10)
    np.testing.assert_allclose(dm.from_unit(dm.to_unit(x)), x, rtol=1e-14, atol=1e-12)


def test_weights():
    I = build_index_set(3, 8)
    w1 = weights(I, 1.0)
    assert w1.values[0] == 1.0
    assert np.all(w1.values[1:] > 1.0)
    np.testing.assert_allclose(w1.values, np.sqrt(np.prod(I.indices + 1, axis=1)))
    np.testing.assert_array_equal(weights(I, 0).values, 1.0)
    w = weights(I, "-inf")
    assert w.bypass and w.values[0] == 1.0
    for a in (-2.0, 0.5, 3.0):
        assert weights(I, a).values[0] == 1.0
    with pytest.raises(ConfigError):
        weights(I, "steep")
