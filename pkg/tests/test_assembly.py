"""Quadrature rules and sparse assembly of the coupled-system blocks."""

import math

import numpy as np
import pytest

from mhdfem.assembly import (
    FormError,
    assemble_bilinear,
    assemble_linear,
    domain_integral_vector,
    l2_norm_from_values,
    quadrature_rule,
    quadrature_weights,
)
from mhdfem.derham import (
    FieldFunction,
    canonical_interpolate,
    evaluate_curl_on_cells,
    evaluate_div_on_cells,
    evaluate_on_cells,
    make_space,
    physical_points,
    vertex_volume_weights,
)
from mhdfem.verify import builtin_case

RNG = np.random.default_rng(11)


# ----------------------------------------------------------------------
# quadrature rules


def test_rule_degree_one_is_centroid():
    rule = quadrature_rule(1)
    assert rule.points == pytest.approx(np.array([[0.25, 0.25, 0.25]]), abs=1e-14)
    assert rule.weights == pytest.approx([1.0 / 6.0], abs=1e-15)


def test_rule_integrates_xy():
    rule = quadrature_rule(2)
    val = np.einsum("q,q->", rule.weights, rule.points[:, 0] * rule.points[:, 1])
    assert val == pytest.approx(1.0 / 120.0, rel=1e-13)


@pytest.mark.parametrize("degree", range(1, 13))
def test_rule_weights(degree):
    rule = quadrature_rule(degree)
    assert np.all(rule.weights > 0)
    assert rule.weights.sum() == pytest.approx(1.0 / 6.0, rel=1e-14)


@pytest.mark.parametrize("degree", [1, 2, 3, 4, 5, 6, 8])
def test_rule_monomial_exactness(degree):
    # exact reference-tet integral of x^a y^b z^c is a! b! c! / (a+b+c+3)!
    rule = quadrature_rule(degree)
    x, y, z = rule.points.T
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            for c in range(degree + 1 - a - b):
                quad = np.einsum("q,q->", rule.weights, x**a * y**b * z**c)
                exact = (
                    math.factorial(a)
                    * math.factorial(b)
                    * math.factorial(c)
                    / math.factorial(a + b + c + 3)
                )
                assert quad == pytest.approx(exact, rel=1e-12), (a, b, c)


@pytest.mark.parametrize("degree", [0, 13, 2.5, "4"])
def test_rule_rejects_bad_degree(degree):
    with pytest.raises(FormError):
        quadrature_rule(degree)


def test_quadrature_weights_norm(mesh2):
    rule = quadrature_rule(2)
    wdet = quadrature_weights(mesh2, rule)
    assert wdet.sum() == pytest.approx(1.0, rel=1e-14)
    ones = np.ones(wdet.shape)
    assert l2_norm_from_values(ones, wdet) == pytest.approx(1.0, rel=1e-14)


# ----------------------------------------------------------------------
# mass and stiffness blocks


@pytest.mark.parametrize("kind", ["nedelec1_lowest", "rt_lowest", "lagrange_p2_vector"])
def test_vec_mass_spd(mesh1, topo1, kind):
    space = make_space(kind, "none", mesh1, topo1)
    M = assemble_bilinear("vec_mass", space, space).toarray()
    assert np.abs(M - M.T).max() <= 1e-15 * np.abs(M).max()
    np.linalg.cholesky(M)  # raises if not positive definite


def test_dg0_mass_is_volume_diagonal(mesh2, topo2):
    dg = make_space("dg0", "none", mesh2, topo2)
    M = assemble_bilinear("scalar_mass", dg, dg)
    assert M.toarray() == pytest.approx(np.diag(mesh2.volumes), abs=1e-16)


def test_p1_mass_row_sums_are_vertex_weights(mesh2, topo2):
    p1 = make_space("lagrange_p1", "none", mesh2, topo2)
    M = assemble_bilinear("scalar_mass", p1, p1)
    rowsum = np.asarray(M.sum(axis=1)).ravel()
    assert rowsum == pytest.approx(vertex_volume_weights(p1), rel=1e-13)


def test_grad_grad_annihilates_constants(mesh2, topo2):
    u = make_space("lagrange_p2_vector", "none", mesh2, topo2)
    K = assemble_bilinear("grad_grad", u, u)
    const = canonical_interpolate(u, lambda x: np.tile([1.0, -2.0, 0.5], (len(x), 1)))
    assert np.abs(K @ const.coeffs).max() <= 1e-13


# ----------------------------------------------------------------------
# pairings and their transpose relation


def test_curl_pairing_transpose_is_exact(mesh2, topo2):
    ned = make_space("nedelec1_lowest", "essential_zero", mesh2, topo2)
    rt = make_space("rt_lowest", "essential_zero", mesh2, topo2)
    A = assemble_bilinear("curl_mass_pairing", rt, ned)
    B = assemble_bilinear("weak_curl_pairing", ned, rt)
    diff = (A - B.T).tocoo()
    assert diff.nnz == 0 or np.abs(diff.data).max() == 0.0


def test_curl_pairing_value(mesh2, topo2):
    # (B, curl F) for interpolated smooth fields against direct quadrature
    ned = make_space("nedelec1_lowest", "none", mesh2, topo2)
    rt = make_space("rt_lowest", "none", mesh2, topo2)
    A = assemble_bilinear("curl_mass_pairing", rt, ned)
    B = canonical_interpolate(rt, lambda x: np.stack([x[:, 1], x[:, 2], x[:, 0]], axis=1))
    F = FieldFunction(ned, RNG.standard_normal(ned.ndof))
    lhs = F.coeffs @ (A @ B.coeffs)
    rule = quadrature_rule(4)
    wdet = quadrature_weights(mesh2, rule)
    Bvals = evaluate_on_cells(B, rule.points)
    curlF = evaluate_curl_on_cells(F)
    rhs = np.einsum("cq,cqd,cd->", wdet, Bvals, curlF)
    assert lhs == pytest.approx(rhs, rel=1e-13)


def test_div_scalar_gives_cell_integrals_of_div(mesh2, topo2):
    rt = make_space("rt_lowest", "none", mesh2, topo2)
    dg = make_space("dg0", "none", mesh2, topo2)
    D = assemble_bilinear("div_scalar", rt, dg)
    f = FieldFunction(rt, RNG.standard_normal(rt.ndof))
    assert D @ f.coeffs == pytest.approx(
        evaluate_div_on_cells(f) * mesh2.volumes, rel=1e-13, abs=1e-15
    )


def test_div_pressure_value(mesh2, topo2):
    u = make_space("lagrange_p2_vector", "essential_zero", mesh2, topo2)
    q = make_space("lagrange_p1_pressure", "none", mesh2, topo2)
    D = assemble_bilinear("div_pressure", u, q)
    uf = RNG.standard_normal(u.num_free)
    qf = RNG.standard_normal(q.num_free)
    lhs = qf @ (D @ uf)
    # direct quadrature of q * div(u)
    full = np.zeros(u.ndof)
    full[u.free] = uf
    uh = FieldFunction(u, full)
    rule = quadrature_rule(4)
    wdet = quadrature_weights(mesh2, rule)
    from mhdfem.derham import evaluate_grad_on_cells

    div_u = np.trace(evaluate_grad_on_cells(uh, rule.points), axis1=2, axis2=3)
    q_full = np.zeros(q.ndof)
    q_full[q.free] = qf
    q_vals = evaluate_on_cells(FieldFunction(q, q_full), rule.points)
    rhs = np.einsum("cq,cq,cq->", wdet, q_vals, div_u)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_grad_scalar_pairing_value(mesh2, topo2):
    ned = make_space("nedelec1_lowest", "none", mesh2, topo2)
    p1 = make_space("lagrange_p1", "none", mesh2, topo2)
    A = assemble_bilinear("grad_scalar_pairing", ned, p1)
    # test function psi(x) = c . x, so grad psi is constant
    c = np.array([0.4, -0.7, 1.2])
    psi = canonical_interpolate(p1, lambda x: x @ c)
    u = FieldFunction(ned, RNG.standard_normal(ned.ndof))
    lhs = psi.coeffs @ (A @ u.coeffs)
    rule = quadrature_rule(2)
    wdet = quadrature_weights(mesh2, rule)
    uvals = evaluate_on_cells(u, rule.points)
    rhs = np.einsum("cq,cqd,d->", wdet, uvals, c)
    assert lhs == pytest.approx(rhs, rel=1e-12)


# ----------------------------------------------------------------------
# quadratic forms of the differential blocks


def test_curl_curl_is_curl_norm(mesh2, topo2):
    ned = make_space("nedelec1_lowest", "none", mesh2, topo2)
    K = assemble_bilinear("curl_curl", ned, ned)
    f = FieldFunction(ned, RNG.standard_normal(ned.ndof))
    lhs = f.coeffs @ (K @ f.coeffs)
    curl = evaluate_curl_on_cells(f)
    rhs = np.einsum("c,cd,cd->", mesh2.volumes, curl, curl)
    assert lhs == pytest.approx(rhs, rel=1e-13)


def test_divdiv_is_div_norm(mesh2, topo2):
    rt = make_space("rt_lowest", "none", mesh2, topo2)
    K = assemble_bilinear("divdiv", rt, rt)
    f = FieldFunction(rt, RNG.standard_normal(rt.ndof))
    lhs = f.coeffs @ (K @ f.coeffs)
    div = evaluate_div_on_cells(f)
    rhs = np.einsum("c,c,c->", mesh2.volumes, div, div)
    assert lhs == pytest.approx(rhs, rel=1e-13)


# ----------------------------------------------------------------------
# the skew convection form


def test_convection_is_skew(mesh2, topo2):
    u = make_space("lagrange_p2_vector", "essential_zero", mesh2, topo2)
    w = canonical_interpolate(
        u, lambda x: np.stack([x[:, 1] * x[:, 2], -x[:, 0], x[:, 0] * x[:, 1]], axis=1)
    )
    C = assemble_bilinear("convection_skew", u, u, coefficient=w)
    scale = np.abs(C.data).max()
    sym = (C + C.T).tocoo()
    if sym.nnz:
        assert np.abs(sym.data).max() <= 1e-12 * scale
    for _ in range(5):
        x = RNG.standard_normal(u.num_free)
        assert abs(x @ (C @ x)) <= 1e-12 * scale * (x @ x)


# ----------------------------------------------------------------------
# load vectors


def test_zero_load(mesh1):
    ned = make_space("nedelec1_lowest", "none", mesh1)
    vec = assemble_linear(ned, lambda x: np.zeros((len(x), 3)))
    assert np.abs(vec).max() == 0.0


def test_constant_load_on_velocity_space(mesh2, topo2):
    # f = (1,0,0): entries are integrals of the x-component basis functions,
    # with closed forms int phi_vertex = -|T|/20 and int phi_edge = |T|/5
    u = make_space("lagrange_p2_vector", "essential_zero", mesh2, topo2)
    vec = assemble_linear(u, lambda x: np.tile([1.0, 0.0, 0.0], (len(x), 1)))
    vols = mesh2.volumes
    expected = np.zeros(u.ndof)
    contrib = np.concatenate(
        [np.tile(-vols[:, None] / 20.0, (1, 4)), np.tile(vols[:, None] / 5.0, (1, 6))],
        axis=1,
    )
    np.add.at(expected, u.dofmap[:, 0::3].ravel(), contrib.ravel())
    assert vec == pytest.approx(expected[u.free], abs=1e-15)


def test_load_pairing_matches_quadrature(mesh2, topo2):
    rt = make_space("rt_lowest", "none", mesh2, topo2)
    func = lambda x: np.stack([np.sin(x[:, 0]), x[:, 1] ** 2, np.cos(x[:, 2])], axis=1)
    vec = assemble_linear(rt, func, quad_degree=8)
    f = FieldFunction(rt, RNG.standard_normal(rt.ndof))
    lhs = vec @ f.coeffs
    rule = quadrature_rule(8)
    wdet = quadrature_weights(mesh2, rule)
    fvals = evaluate_on_cells(f, rule.points)
    gvals = func(physical_points(mesh2, rule.points).reshape(-1, 3)).reshape(fvals.shape)
    rhs = np.einsum("cq,cqd,cqd->", wdet, fvals, gvals)
    assert lhs == pytest.approx(rhs, rel=1e-13)


def test_magnetic_source_load_closes_ohm_identity(mesh2, topo2):
    # the magnetic source satisfies g = s (j - curl B / Rm) pointwise, so
    # <g, F> = s (j, F) - (s/Rm) (B, curl F) for any F with zero tangential
    # trace; checked with the interpolated exact electric field as F
    case = builtin_case("normal_B")
    ned = make_space("nedelec1_lowest", "essential_zero", mesh2, topo2)
    load = assemble_linear(ned, case.g, quad_degree=6)
    F = canonical_interpolate(ned, case.E)
    lhs = load @ F.coeffs[ned.free]

    rule = quadrature_rule(10)
    wdet = quadrature_weights(mesh2, rule)
    x = physical_points(mesh2, rule.points).reshape(-1, 3)
    j = case.E(x) + np.cross(case.u(x), case.B(x))
    B = case.B(x)
    Fvals = evaluate_on_cells(F, rule.points)
    curlF = evaluate_curl_on_cells(F)
    s, Rm = 1.0, 1.0
    rhs = s * np.einsum("cq,cqd,cqd->", wdet, j.reshape(Fvals.shape), Fvals)
    rhs -= (s / Rm) * np.einsum("cq,cqd,cd->", wdet, B.reshape(Fvals.shape), curlF)
    assert abs(lhs - rhs) <= 1e-8


def test_domain_integral_vector(mesh2, topo2):
    dg = make_space("dg0", "none", mesh2, topo2)
    assert domain_integral_vector(dg) == pytest.approx(mesh2.volumes, abs=1e-16)
    p1 = make_space("lagrange_p1_pressure", "none", mesh2, topo2)
    vec = domain_integral_vector(p1)
    assert vec == pytest.approx(vertex_volume_weights(p1), rel=1e-13)


# ----------------------------------------------------------------------
# determinism and error paths


def test_assembly_is_deterministic(mesh2, topo2):
    u = make_space("lagrange_p2_vector", "essential_zero", mesh2, topo2)
    w = canonical_interpolate(u, lambda x: np.stack([x[:, 1], x[:, 2], x[:, 0]], axis=1))
    A = assemble_bilinear("convection_skew", u, u, coefficient=w)
    B = assemble_bilinear("convection_skew", u, u, coefficient=w)
    assert np.array_equal(A.indptr, B.indptr)
    assert np.array_equal(A.indices, B.indices)
    assert np.array_equal(A.data, B.data)


def test_form_errors(mesh1, mesh2, topo1, topo2):
    ned1 = make_space("nedelec1_lowest", "none", mesh1, topo1)
    rt1 = make_space("rt_lowest", "none", mesh1, topo1)
    rt2 = make_space("rt_lowest", "none", mesh2, topo2)
    u1 = make_space("lagrange_p2_vector", "none", mesh1, topo1)
    with pytest.raises(FormError, match="unknown form"):
        assemble_bilinear("mass_mass", ned1, ned1)
    with pytest.raises(FormError, match="trial space"):
        assemble_bilinear("grad_grad", ned1, ned1)
    with pytest.raises(FormError, match="test space"):
        assemble_bilinear("curl_mass_pairing", rt1, rt1)
    with pytest.raises(FormError, match="different meshes"):
        assemble_bilinear("vec_mass", rt1, rt2)
    with pytest.raises(FormError, match="coefficient"):
        assemble_bilinear("convection_skew", u1, u1)
