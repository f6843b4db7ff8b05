import numpy as np
import pytest

from ftwist import core, metrics, twisted
from ftwist.errors import ConstructionError
from ftwist.metrics import CatalogEntry, TwistSpec

from oracles import SymbolicFinsler, product_expr

M = metrics.METRICS


def entry(m1, m2, twist, name="custom"):
    tw = metrics.TWISTS[twist] if isinstance(twist, str) else twist
    return CatalogEntry(name, M[m1], M[m2], tw)


def build(*args):
    return metrics.build(entry(*args))


def point(T, x, u, y, v):
    return np.array([[*x, *u, *y, *v]], dtype=float)


CONST2 = TwistSpec("const-2", "const", {"c": 2.0})
EXP_X = metrics.TWISTS["exp-x1"]


# --- product metric -----------------------------------------------------------------

def test_product_metric_examples():
    T = build("euclid-2d", "euclid-2d", "one")
    P = twisted.product_metric(T)
    z = point(T, [0.1, 0.2], [0.3, 0.4], [0.5, -1.0], [2.0, 0.25])
    assert P.value(z[:, :4], z[:, 4:])[0] == pytest.approx(np.linalg.norm(z[0, 4:]))
    T2 = build("euclid-2d", "euclid-2d", CONST2)
    P2 = twisted.product_metric(T2)
    assert P2.value(np.zeros((1, 4)), np.array([[0.5, 0, 1, 0]]))[0] == \
        pytest.approx(np.sqrt(0.25 + 4))


@pytest.mark.parametrize("eid", [e.id for e in metrics.catalog()])
def test_product_square_identity(eid):
    T = metrics.build(metrics.catalog_entry(eid))
    z = T.samples(20, 1)
    x, u, y, v = T.split(z)
    F2 = twisted.product_metric(T).F2(z)
    want = T.M1.F(x, y) ** 2 + T.f.f(x, u) ** 2 * T.M2.F(u, v) ** 2
    assert np.abs(F2 - want).max() < 1e-12


def test_slit_domain_excludes_zero_blocks():
    T = build("euclid-2d", "euclid-2d", "one")
    P = twisted.product_metric(T)
    assert not P.contains(np.array([[0, 0, 0, 0, 1, 1, 0, 0]]))[0]
    assert P.contains(np.array([[0, 0, 0, 0, 1, 1, 0, 1]]))[0]


# --- block metric --------------------------------------------------------------------

def test_block_metric_constant_two():
    T = build("euclid-2d", "euclid-2d", CONST2)
    g = twisted.block_metric(T, T.samples(3, 0))
    for k in range(3):
        np.testing.assert_allclose(g.entries[k], np.diag([1, 1, 4, 4]), atol=1e-8)
    assert np.all(g.block("12") == 0) and np.all(g.block("21") == 0)


def test_block_metric_direct_sum_for_unit_twist():
    T = build("randers-2d", "sphere-2d", "one")
    z = T.samples(5, 2)
    g = twisted.block_metric(T, z)
    zc1 = np.concatenate([z[:, :2], z[:, 4:6]], 1)
    zc2 = np.concatenate([z[:, 2:4], z[:, 6:]], 1)
    np.testing.assert_allclose(g.block("11"), core.fundamental_tensor(T.M1, zc1), atol=1e-12)
    np.testing.assert_allclose(g.block("22"), core.fundamental_tensor(T.M2, zc2), atol=1e-12)


# --- independent high-precision product oracle --------------------------------------

ORACLE_ENTRIES = ["randers-riem", "riem-randers", "randers-randers-twisted"]


@pytest.fixture(scope="module", params=ORACLE_ENTRIES)
def oracle_case(request):
    e = metrics.catalog_entry(request.param)
    T = metrics.build(e)
    z = T.samples(2, 9)
    ref = SymbolicFinsler(*product_expr(e))
    return T, z, twisted.jet(T, z), ref


def test_closed_form_against_symbolic_product(oracle_case):
    T, z, j, ref = oracle_case
    n = T.n
    for k, p in enumerate(z):
        x, y = p[:n], p[n:]
        assert np.abs(j.g[k] - ref.g(x, y)).max() < 1e-6
        assert np.abs(j.spray[k] - ref.spray(x, y)).max() < 1e-6
        assert np.abs(j.N[k] - ref.connection(x, y)).max() < 1e-5
        assert np.abs(j.cartan_lower[k] - ref.cartan(x, y)).max() < 1e-6


def test_berwald_against_symbolic_product(oracle_case):
    T, z, j, ref = oracle_case
    n = T.n
    for k, p in enumerate(z):
        B = ref.berwald(p[:n], p[n:])
        assert np.abs(j.berwald[k] - B).max() < 1e-4
        E = 0.5 * np.einsum("mjkm->jk", B)
        assert np.abs(j.mean_berwald[k] - E).max() < 1e-4


# --- spray and connection -------------------------------------------------------------

def test_unit_twist_spray_is_component_sprays():
    T = build("randers-2d", "sphere-2d", "one")
    z = T.samples(5, 3)
    G = twisted.twisted_spray(T, z)
    zc1 = np.concatenate([z[:, :2], z[:, 4:6]], 1)
    zc2 = np.concatenate([z[:, 2:4], z[:, 6:]], 1)
    np.testing.assert_allclose(G.block("1"), core.spray(T.M1, zc1), atol=1e-12)
    np.testing.assert_allclose(G.block("2"), core.spray(T.M2, zc2), atol=1e-12)


def test_exponential_twist_example():
    """n1 = n2 = 1, Euclidean factors, f = e^x."""
    T = build("euclid-1d", "euclid-1d", EXP_X)
    x, u, y, v = 0.3, -0.2, 0.7, 1.4
    z = point(T, [x], [u], [y], [v])
    G = twisted.twisted_spray(T, z).entries[0]
    np.testing.assert_allclose(G, [-0.5 * np.exp(2 * x) * v ** 2, v * y], atol=1e-9)
    N = twisted.connection_blocks(T, point(T, [0.0], [u], [y], [v])).entries[0]
    assert N[1, 0] == pytest.approx(v, abs=1e-12)
    oracle = core.spray(twisted.product_metric(T), z)[0]
    np.testing.assert_allclose(G, oracle, rtol=1e-9)


def test_constant_twist_connection_reduces():
    T = build("randers-2d", "randers-min-2d", "const-1.2")
    z = T.samples(5, 4)
    N = twisted.connection_blocks(T, z)
    assert np.all(N.block("12") == 0) and np.all(N.block("21") == 0)
    zc1 = np.concatenate([z[:, :2], z[:, 4:6]], 1)
    np.testing.assert_allclose(N.block("11"), core.nonlinear_connection(T.M1, zc1), atol=1e-12)


def test_connection_is_fiber_derivative_of_spray():
    T = metrics.build(metrics.catalog_entry("twisted-mixed"))
    z = T.samples(10, 5)
    P = twisted.product_metric(T)
    N, V = core.spray_fiber_derivatives(P, z, (1, 2))
    j = twisted.jet(T, z)
    assert np.abs(j.N - N).max() < 1e-5
    assert np.abs(j.vertical - V).max() < 1e-5


def test_prop1_homogeneity_identities():
    T = metrics.build(metrics.catalog_entry("randers-randers-twisted"))
    z = T.samples(20, 6)
    j = twisted.jet(T, z)
    Y = z[:, T.n:]
    assert np.abs(np.einsum("ncab,nb->nca", j.vertical, Y) - j.N).max() < 1e-6
    assert np.abs(np.einsum("nab,nb->na", j.N, Y) - 2 * j.spray).max() < 1e-6


# --- vertical coefficients ---------------------------------------------------------------

def test_vertical_mixed_block_exponential():
    T = build("euclid-1d", "sphere-2d", EXP_X)
    z = T.samples(5, 7)
    z[:, 0] = 0.0
    V = twisted.vertical_coeffs(T, z)
    zc2 = np.concatenate([z[:, 1:3], z[:, 4:]], 1)
    g2 = core.fundamental_tensor(T.M2, zc2)
    np.testing.assert_allclose(V.block("122")[:, 0], -g2, atol=1e-10)


def test_vertical_zero_block_and_constant_reduction():
    T = metrics.build(metrics.catalog_entry("twisted-mixed"))
    V = twisted.vertical_coeffs(T, T.samples(5, 8))
    assert np.all(V.block("211") == 0)
    Tc = build("randers-2d", "randers-min-2d", "const-1.5")
    z = Tc.samples(5, 8)
    Vc = twisted.vertical_coeffs(Tc, z)
    zc1 = np.concatenate([z[:, :2], z[:, 4:6]], 1)
    zc2 = np.concatenate([z[:, 2:4], z[:, 6:]], 1)
    _, V1 = core.spray_fiber_derivatives(Tc.M1, zc1, (1, 2))
    _, V2 = core.spray_fiber_derivatives(Tc.M2, zc2, (1, 2))
    assert np.abs(Vc.block("111") - V1).max() < 1e-7
    assert np.abs(Vc.block("222") - V2).max() < 1e-7
    for pat in ("112", "121", "122", "211", "212", "221"):
        assert np.abs(Vc.block(pat)).max() < 1e-12


# --- horizontal coefficients -------------------------------------------------------------

def test_horizontal_contraction_gives_connection():
    T = metrics.build(metrics.catalog_entry("randers-riem"))
    z = T.samples(10, 9)
    j = twisted.jet(T, z)
    Y = z[:, T.n:]
    assert np.abs(np.einsum("nabc,nc->nab", j.horizontal, Y) - j.N).max() < 1e-5


def test_horizontal_constant_twist_reduces():
    T = build("randers-2d", "sphere-2d", "const-1.5")
    z = T.samples(5, 10)
    H = twisted.horizontal_coeffs(T, z)
    zc1 = np.concatenate([z[:, :2], z[:, 4:6]], 1)
    assert np.abs(H.block("111") - core.horizontal_coefficients(T.M1, zc1)).max() < 1e-6
    for pat in ("112", "121", "122", "211", "212", "221"):
        assert np.abs(H.block(pat)).max() < 1e-8


def test_horizontal_mixed_block_riemannian_fiber():
    """F^γ_iβ = f^{-1} f_i δ^γ_β when the second factor is Riemannian."""
    T = metrics.build(metrics.catalog_entry("randers-riem"))
    z = T.samples(5, 11)
    j = twisted.jet(T, z)
    want = np.einsum("ni,gb->ngib", j.fx / j.fv[:, None], np.eye(T.n2))
    got = j.horizontal[:, 2:, :2, 2:]
    assert np.abs(got - want).max() < 1e-7
    oracle = core.horizontal_coefficients(twisted.product_metric(T), z)[:, 2:, :2, 2:]
    assert np.abs(oracle - want).max() < 1e-5


# --- adapted frame ----------------------------------------------------------------------

def test_adapted_frame_algebra():
    T = metrics.build(metrics.catalog_entry("randers-randers-twisted"))
    s = T.samples(1, 12)
    vt, ht, Jt = twisted.adapted_frame(T, s)
    vt, ht, Jt = vt[0], ht[0], Jt[0]
    n = T.n
    assert np.abs(vt @ vt - vt).max() < 1e-12
    assert np.abs(ht @ ht - ht).max() < 1e-12
    assert np.abs(vt @ ht).max() < 1e-12
    assert np.abs(Jt @ Jt).max() < 1e-12
    assert np.linalg.matrix_rank(vt) == n
    assert np.linalg.matrix_rank(Jt) == n
    hb = twisted.horizontal_basis(T, s)[0]
    np.testing.assert_allclose(Jt @ hb, np.vstack([np.zeros((n, n)), np.eye(n)]), atol=1e-12)
    np.testing.assert_allclose(ht @ hb, hb, atol=1e-12)
    # ker J = Im J = vertical subspace
    vertical = np.vstack([np.zeros((n, n)), np.eye(n)])
    assert np.abs(Jt @ vertical).max() == 0
    assert np.linalg.matrix_rank(np.hstack([Jt, vertical])) == n


# --- curvature --------------------------------------------------------------------------

def test_trivial_product_curvatures_vanish():
    T = metrics.build(metrics.catalog_entry("trivial"))
    z = T.samples(4, 13)
    assert np.abs(twisted.nonlinear_curvature(T, z).entries).max() < 1e-6
    assert np.abs(twisted.berwald_connection_curvature(T, z).entries).max() < 1e-6


def test_nonlinear_curvature_antisymmetric_and_contracted():
    T = metrics.build(metrics.catalog_entry("twisted-mixed"))
    z = T.samples(3, 14)
    R = twisted.nonlinear_curvature(T, z).entries
    assert np.abs(R + np.swapaxes(R, -1, -2)).max() == 0
    Rb = twisted.berwald_connection_curvature(T, z).entries
    Y = z[:, T.n:]
    assert np.abs(np.einsum("nabcd,nb->nacd", Rb, Y) - R).max() < 1e-4
    assert np.abs(Rb + np.swapaxes(Rb, -1, -2)).max() < 1e-10


# --- Cartan and Matsumoto --------------------------------------------------------------

def test_cartan_blocks():
    T = build("polar-2d", "sphere-2d", "trig-mixed")
    assert np.abs(twisted.cartan_blocks(T, T.samples(5, 15)).entries).max() < 1e-8
    T = metrics.build(metrics.catalog_entry("randers-riem"))
    z = T.samples(5, 15)
    C = twisted.cartan_blocks(T, z)
    assert np.abs(C.block("111")).max() > 1e-2
    for pat in C.patterns():
        if pat != "111":
            assert np.abs(C.block(pat)).max() < 1e-8


def test_lowered_cartan_scales_with_twist_squared():
    T = metrics.build(metrics.catalog_entry("riem-randers"))
    z = T.samples(5, 16)
    low = twisted.cartan_blocks(T, z, lowered=True).block("222")
    zc2 = np.concatenate([z[:, 1:3], z[:, 4:]], 1)
    f = T.f.f(z[:, :1], z[:, 1:3])
    np.testing.assert_allclose(low, f[:, None, None, None] ** 2 * core.cartan_tensor(T.M2, zc2),
                               atol=1e-12)


def test_matsumoto_contractions():
    T = build("euclid-1d", "randers-min-2d", "const-1.5")
    z = T.samples(20, 17)
    mc = twisted.matsumoto_contraction(T, z)
    lhs, rhs = mc["alpha"]
    assert np.abs(rhs).max() > 1e-3
    assert np.abs(lhs - rhs).max() < 1e-5
    zc2 = np.concatenate([z[:, 1:3], z[:, 4:]], 1)
    I2 = core.mean_cartan(T.M2, zc2)
    pos = I2 > 1e-3
    assert np.all(rhs[pos] < 0)
    Tr = build("randers-2d", "sphere-2d", "one")
    lhs, rhs = twisted.matsumoto_contraction(Tr, Tr.samples(5, 17))["alpha"]
    assert np.abs(lhs).max() < 1e-7 and np.abs(rhs).max() < 1e-12


# --- Berwald and mean Berwald ------------------------------------------------------------

def test_berwald_zero_families_and_riemannian_fiber():
    T = metrics.build(metrics.catalog_entry("randers-riem"))
    z = T.samples(5, 18)
    B = twisted.berwald_blocks(T, z)
    for pat in ("2122", "2112", "2111"):
        assert np.all(B.block(pat) == 0)
    assert np.abs(B.block("1222")).max() < 1e-8
    oracle = core.berwald_curvature(twisted.product_metric(T), z)
    assert np.abs(B.entries - oracle).max() < 1e-4


def test_mean_berwald_reductions_and_trace():
    T = build("polar-2d", "sphere-2d", "const-1.5")
    assert np.abs(twisted.mean_berwald_blocks(T, T.samples(5, 19)).entries).max() < 1e-6
    T = metrics.build(metrics.catalog_entry("euclid-randers"))
    z = T.samples(5, 19)
    E = twisted.mean_berwald_blocks(T, z)
    assert np.abs(E.block("12")).max() < 1e-10
    B = twisted.berwald_blocks(T, z).entries
    assert np.abs(E.entries - 0.5 * np.einsum("nmjkm->njk", B)).max() < 1e-10


def test_second_factor_mean_berwald_reading():
    """The I_{;α;β} term carries f^{-1}; the f/2 reading misses the oracle."""
    T = metrics.build(metrics.catalog_entry("riem-randers"))
    z = T.samples(10, 20)
    j = twisted.jet(T, z)
    oracle = core.mean_berwald(twisted.product_metric(T), z)[:, 1:, 1:]
    assert np.abs(j.mean_berwald[:, 1:, 1:] - oracle).max() < 1e-4
    assert np.abs(j.mean_berwald_alt - oracle).max() > 1e-3


def test_warped_reduction_drops_u_terms():
    T = metrics.build(metrics.catalog_entry("warped"))
    z = T.samples(5, 21)
    j = twisted.jet(T, z)
    assert np.all(j.fu == 0)
    assert np.all(j.Ngab == 0)
    fy = np.einsum("ni,ni->n", j.fx, z[:, T.n:T.n + T.n1])
    np.testing.assert_allclose(j.M2m, (fy / j.fv)[:, None, None] * np.eye(T.n2), atol=1e-12)


# --- block tensor ------------------------------------------------------------------------

def test_block_tensor_access_and_labels():
    bt = twisted.BlockTensor(np.arange(81.0).reshape(3, 3, 3, 3), 1, 2, "B", "ulll")
    assert bt.block("1222").shape == (1, 2, 2, 2)
    assert bt.label("2112") == "B^α_ijβ"
    assert len(list(bt.blocks())) == 16
    with pytest.raises(ValueError):
        bt.block("12")
    with pytest.raises(ValueError):
        bt.entries[0, 0, 0, 0] = 1.0


def test_twist_validation_catches_wrong_partials():
    tf = twisted.TwistFunction(lambda x, u: np.exp(x[..., 0]),
                               lambda x, u: 2 * np.exp(x)[..., :1],
                               lambda x, u: np.zeros(u.shape), "bad")
    with pytest.raises(ConstructionError, match="partials"):
        tf.validate([[-1, 1]], [[-1, 1]])
