"""Quadrature and finite element form assembly.

Tetrahedral quadrature uses conical-product Gauss-Jacobi rules: for any
requested degree the weights are strictly positive and polynomial
exactness is guaranteed by construction (the degree-1 rule degenerates
to the centroid rule with weight 1/6).

Bilinear forms are assembled cellwise with numpy tensor contractions and
scattered into sparse matrices over the free (unconstrained) degrees of
freedom; essential-zero boundary conditions are eliminated symmetrically
by restriction.  Zero-mean constraints are not handled here: they enter
as bordered rows/columns at the block-system level (see linalg).

Default quadrature degrees make every bilinear integrand exact on affine
cells: 4 for the fluid blocks, 5 for convection (P2 x grad P2 x P2),
3 for curl/divergence pairings, and 6 for the magnetic cross blocks,
whose double-cross velocity term (u x B) x B . v has degree 6.  Load
vectors against analytic sources default to degree 6.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi, roots_legendre

from . import derham
from .derham import FeSpace, FieldFunction

MAX_QUAD_DEGREE = 12


class FormError(Exception):
    """Raised for unknown forms or incompatible space/form combinations."""


@dataclass(frozen=True)
class QuadratureRule:
    """Points (nq, 3) in reference-tet coordinates and weights summing
    to the reference volume 1/6."""

    degree: int
    points: np.ndarray
    weights: np.ndarray


_rule_cache: dict = {}


def quadrature_rule(degree: int) -> QuadratureRule:
    """Positive-weight tetrahedral rule exact for polynomials of the
    given total degree (conical product construction)."""
    if not isinstance(degree, (int, np.integer)) or not 1 <= degree <= MAX_QUAD_DEGREE:
        raise FormError(f"unsupported quadrature degree {degree!r}")
    degree = int(degree)
    if degree in _rule_cache:
        return _rule_cache[degree]
    n = (degree + 2) // 2  # smallest n with 2n - 1 >= degree
    tu, wu = roots_jacobi(n, 2.0, 0.0)
    tv, wv = roots_jacobi(n, 1.0, 0.0)
    tw, ww = roots_legendre(n)
    u, wu = 0.5 * (tu + 1.0), wu / 8.0
    v, wv = 0.5 * (tv + 1.0), wv / 4.0
    w, ww = 0.5 * (tw + 1.0), ww / 2.0
    U, V, W = np.meshgrid(u, v, w, indexing="ij")
    WU, WV, WW = np.meshgrid(wu, wv, ww, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    z = (W * (1.0 - U) * (1.0 - V)).ravel()
    points = np.stack([x, y, z], axis=1)
    weights = (WU * WV * WW).ravel()
    rule = QuadratureRule(degree, points, weights)
    _rule_cache[degree] = rule
    return rule


# form_id -> (trial kinds, test kinds, default quadrature degree)
_VEC = ("lagrange_p2_vector", "nedelec1_lowest", "rt_lowest")
_P1 = ("lagrange_p1", "lagrange_p1_pressure")
FORM_TABLE = {
    "grad_grad": (("lagrange_p2_vector",), ("lagrange_p2_vector",), 4),
    "vec_mass": (_VEC, _VEC, 4),
    "scalar_mass": (_P1 + ("dg0",), _P1 + ("dg0",), 2),
    "scalar_stiffness": (_P1, _P1, 2),
    "curl_mass_pairing": (("rt_lowest",), ("nedelec1_lowest",), 3),
    "weak_curl_pairing": (("nedelec1_lowest",), ("rt_lowest",), 3),
    "div_scalar": (("rt_lowest",), ("dg0",), 3),
    "div_pressure": (("lagrange_p2_vector",), _P1, 4),
    "convection_skew": (("lagrange_p2_vector",), ("lagrange_p2_vector",), 5),
    "ohm_cross": (("lagrange_p2_vector",), ("nedelec1_lowest",), 6),
    "lorentz_cross": (("nedelec1_lowest", "lagrange_p2_vector"), ("lagrange_p2_vector",), 6),
    "divdiv": (("rt_lowest",), ("rt_lowest",), 3),
    "curl_curl": (("nedelec1_lowest",), ("nedelec1_lowest",), 1),
    "grad_scalar_pairing": (("nedelec1_lowest",), _P1, 3),
}
_NEEDS_COEFF = ("convection_skew", "ohm_cross", "lorentz_cross")


def _check_form(form_id, trial, test, coefficient):
    if form_id not in FORM_TABLE:
        raise FormError(f"unknown form {form_id!r}")
    trial_kinds, test_kinds, degree = FORM_TABLE[form_id]
    if trial.kind not in trial_kinds:
        raise FormError(f"form {form_id!r} does not accept trial space {trial.kind!r}")
    if test.kind not in test_kinds:
        raise FormError(f"form {form_id!r} does not accept test space {test.kind!r}")
    if trial.mesh is not test.mesh:
        raise FormError("trial and test spaces live on different meshes")
    if form_id in _NEEDS_COEFF and coefficient is None:
        raise FormError(f"form {form_id!r} needs a frozen coefficient field")
    return degree


def assemble_bilinear(
    form_id: str,
    trial: FeSpace,
    test: FeSpace,
    *,
    coefficient: FieldFunction | None = None,
    quad_degree: int | None = None,
) -> sp.csr_matrix:
    """Assemble a bilinear form into a CSR matrix over free dofs.

    Matrix layout: rows are test-space free dofs, columns trial-space
    free dofs.  ``coefficient`` is the frozen field of the Picard
    linearization (advecting velocity or previous magnetic iterate).
    """
    degree = _check_form(form_id, trial, test, coefficient)
    if quad_degree is not None:
        degree = quad_degree
    rule = quadrature_rule(degree)
    mesh = trial.mesh
    scale = np.abs(mesh.det_jacobians)  # reference weights sum to 1/6 = ref volume
    local = _local_matrices(form_id, trial, test, coefficient, rule, mesh)
    local = local * scale[:, None, None]
    return _scatter(local, trial, test)


def assemble_linear(
    space: FeSpace, func, *, quad_degree: int = 6
) -> np.ndarray:
    """Assemble a load vector over free dofs for an analytic source.

    ``func`` maps physical points (N, 3) to (N,) scalars or (N, 3)
    vectors, matching the space kind.
    """
    rule = quadrature_rule(quad_degree)
    mesh = space.mesh
    xq = derham.physical_points(mesh, rule.points)
    fvals = np.asarray(func(xq.reshape(-1, 3)), dtype=float)
    nc, nq = xq.shape[:2]
    wdet = rule.weights[None, :] * np.abs(mesh.det_jacobians)[:, None]
    if space.kind in ("lagrange_p1", "lagrange_p1_pressure"):
        fvals = fvals.reshape(nc, nq)
        cellvec = np.einsum("cq,cq,qa->ca", wdet, fvals, derham.p1_values(rule.points))
    elif space.kind == "dg0":
        fvals = fvals.reshape(nc, nq)
        cellvec = np.einsum("cq,cq->c", wdet, fvals)[:, None]
    elif space.kind == "nedelec1_lowest":
        fvals = fvals.reshape(nc, nq, 3)
        basis = derham.nedelec_values(mesh, rule.points)
        cellvec = np.einsum("cq,cqd,cqad->ca", wdet, fvals, basis)
    elif space.kind == "rt_lowest":
        fvals = fvals.reshape(nc, nq, 3)
        basis = derham.rt_values(mesh, rule.points)
        cellvec = np.einsum("cq,cqd,cqad->ca", wdet, fvals, basis)
    elif space.kind == "lagrange_p2_vector":
        fvals = fvals.reshape(nc, nq, 3)
        svals = derham.p2_scalar_values(rule.points)
        comp = np.einsum("cq,cqd,qa->cad", wdet, fvals, svals)
        cellvec = comp.reshape(nc, 30)
    else:
        raise FormError(f"cannot assemble a load on space kind {space.kind!r}")
    vec = np.zeros(space.ndof)
    np.add.at(vec, space.dofmap.ravel(), cellvec.ravel())
    return vec[space.free]


def domain_integral_vector(space: FeSpace, *, quad_degree: int = 2) -> np.ndarray:
    """Integrals of the basis functions over the domain (free dofs);
    the bordered row that realizes a zero-mean constraint."""
    if space.kind == "dg0":
        return space.mesh.volumes[space.free]
    return assemble_linear(space, lambda x: np.ones(len(x)), quad_degree=quad_degree)


# ----------------------------------------------------------------------
# local element matrices


def _local_matrices(form_id, trial, test, coefficient, rule, mesh):
    pts, w = rule.points, rule.weights
    if form_id == "grad_grad":
        g = derham.p2_scalar_gradients(mesh, pts)
        k = np.einsum("q,cqad,cqbd->cab", w, g, g)
        return _expand_vector_block(k)
    if form_id == "vec_mass":
        if trial.kind == "lagrange_p2_vector":
            s = derham.p2_scalar_values(pts)
            k = np.einsum("q,qa,qb->ab", w, s, s)
            return _expand_vector_block(np.broadcast_to(k, (mesh.num_cells,) + k.shape))
        va = _vector_basis(trial, pts)
        k = np.einsum("q,cqad,cqbd->cab", w, va, va)
        return k
    if form_id == "scalar_mass":
        s = _scalar_basis(trial, pts)
        k = np.einsum("q,qa,qb->ab", w, s, s)
        return np.broadcast_to(k, (mesh.num_cells,) + k.shape)
    if form_id == "scalar_stiffness":
        g = mesh.grad_lambda
        k = np.einsum("cad,cbd->cab", g, g) / 6.0
        return k
    if form_id in ("curl_mass_pairing", "weak_curl_pairing"):
        rt = derham.rt_values(mesh, pts)
        curls = derham.nedelec_curls(mesh)
        k = np.einsum("q,cqfd,ced->cef", w, rt, curls)  # rows edge-test, cols face-trial
        if form_id == "curl_mass_pairing":
            return k
        return np.ascontiguousarray(np.transpose(k, (0, 2, 1)))
    if form_id == "div_scalar":
        divs = derham.rt_divergences(mesh)  # constant per cell
        return (divs / 6.0)[:, None, :]  # (nc, 1, 4), weight sum 1/6
    if form_id == "div_pressure":
        g = derham.p2_scalar_gradients(mesh, pts)
        s = _scalar_basis(test, pts)
        k = np.einsum("q,qa,cqbj->cabj", w, s, g)  # test a, trial scalar b, comp j
        nc = mesh.num_cells
        return k.reshape(nc, k.shape[1], 30)
    if form_id == "convection_skew":
        s = derham.p2_scalar_values(pts)
        g = derham.p2_scalar_gradients(mesh, pts)
        wvals = derham.evaluate_on_cells(coefficient, pts)  # (nc, nq, 3)
        wg = np.einsum("cqd,cqbd->cqb", wvals, g)  # (w . grad) phi_b
        a = np.einsum("q,qa,cqb->cab", w, s, wg)
        return _expand_vector_block(0.5 * (a - np.transpose(a, (0, 2, 1))))
    if form_id == "divdiv":
        divs = derham.rt_divergences(mesh)
        return np.einsum("ca,cb->cab", divs, divs) / 6.0
    if form_id == "curl_curl":
        curls = derham.nedelec_curls(mesh)
        return np.einsum("cad,cbd->cab", curls, curls) / 6.0
    if form_id == "grad_scalar_pairing":
        ned = derham.nedelec_values(mesh, pts)
        g = mesh.grad_lambda  # P1 gradients, constant
        return np.einsum("q,cad,cqbd->cab", w, g, ned)
    if form_id == "ohm_cross":
        cross = _velocity_cross_basis(coefficient, trial, rule)  # (nc, nq, 30, 3)
        ned = derham.nedelec_values(mesh, pts)
        return np.einsum("q,cqad,cqbd->cab", w, ned, cross)  # rows edge-test, cols u-trial
    if form_id == "lorentz_cross":
        cross = _velocity_cross_basis(coefficient, test, rule)
        if trial.kind == "nedelec1_lowest":
            ned = derham.nedelec_values(mesh, pts)
            return np.einsum("q,cqad,cqbd->cab", w, cross, ned)
        other = cross if trial is test else _velocity_cross_basis(coefficient, trial, rule)
        return np.einsum("q,cqad,cqbd->cab", w, cross, other)
    raise FormError(f"unknown form {form_id!r}")


def _vector_basis(space, pts):
    if space.kind == "nedelec1_lowest":
        return derham.nedelec_values(space.mesh, pts)
    if space.kind == "rt_lowest":
        return derham.rt_values(space.mesh, pts)
    raise FormError(f"no vector basis for {space.kind!r}")


def _scalar_basis(space, pts):
    if space.kind in ("lagrange_p1", "lagrange_p1_pressure"):
        return derham.p1_values(pts)
    if space.kind == "dg0":
        return np.ones((len(np.atleast_2d(pts)), 1))
    raise FormError(f"no scalar basis for {space.kind!r}")


def _expand_vector_block(k):
    """Expand a scalar-level (nc, a, b) block to the interleaved vector
    layout (nc, 3a, 3b): identical action on each component."""
    nc, na, nb = k.shape
    out = np.zeros((nc, 3 * na, 3 * nb))
    for comp in range(3):
        out[:, comp::3, comp::3] = k
    return out


def _velocity_cross_basis(b_field, space, rule):
    """Tabulate (phi_a e_c) x B at quadrature points for the velocity
    basis: shape (nc, nq, 30, 3), local dof = 3a + c."""
    if space.kind != "lagrange_p2_vector":
        raise FormError("cross blocks need the velocity space")
    pts = rule.points
    bvals = derham.evaluate_on_cells(b_field, pts)  # (nc, nq, 3)
    s = derham.p2_scalar_values(pts)  # (nq, 10)
    eye = np.eye(3)
    # e_k x B for the three unit vectors: (nc, nq, 3 components, 3)
    ecb = np.stack(
        [np.cross(np.broadcast_to(eye[k], bvals.shape), bvals) for k in range(3)],
        axis=2,
    )
    cross = np.einsum("qa,cqke->cqake", s, ecb)  # (nc, nq, 10, 3, 3)
    nc, nq = bvals.shape[:2]
    return cross.reshape(nc, nq, 30, 3)


def _scatter(local, trial, test):
    """Scatter local matrices (nc, n_test, n_trial) into a CSR matrix
    over free dofs, eliminating essential constraints symmetrically."""
    rows = np.repeat(test.dofmap[:, :, None], trial.nloc, axis=2).ravel()
    cols = np.repeat(trial.dofmap[:, None, :], test.nloc, axis=1).ravel()
    mat = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(test.ndof, trial.ndof)
    ).tocsr()
    return mat[test.free][:, trial.free].tocsr()


def l2_norm_from_values(values: np.ndarray, wdet: np.ndarray) -> float:
    """L2 norm from tabulated values (nc, nq[, 3]) and combined weights."""
    if values.ndim == 3:
        sq = np.einsum("cqd,cqd->cq", values, values)
    else:
        sq = values * values
    return float(np.sqrt(np.einsum("cq,cq->", wdet, sq)))


def quadrature_weights(mesh, rule: QuadratureRule) -> np.ndarray:
    """Combined quadrature-by-cell weights w_q |det J_c|, (nc, nq)."""
    return rule.weights[None, :] * np.abs(mesh.det_jacobians)[:, None]
