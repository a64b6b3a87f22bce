"""Discrete differential operators, projections and solution norms.

The weak curl maps the face (div-conforming) space into the edge
(curl-conforming) space through a pre-factorized mass solve:

    (curl_h C, F) = (C, curl F)   for all F in the edge space.

The boundary-condition family is carried by the spaces themselves: with
essential-zero spaces this is the operator of the homogeneous complex,
with unconstrained spaces its natural-boundary variant.  The weak
divergence and the L^2 projection onto the edge space follow the same
pattern.  Alongside these live the Stokes projection, the divergence-free
constrained L^2 projection, and the norms in which the solver measures
increments and errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import assembly, derham, linalg
from .derham import FeSpace, FieldFunction


class OperatorError(Exception):
    """Raised for incompatible spaces or broken operator contracts."""


def _check_pair(space_a, kind_a, space_b, kind_b):
    if space_a.kind != kind_a or space_b.kind != kind_b:
        raise OperatorError(
            f"expected ({kind_a}, {kind_b}) spaces, got "
            f"({space_a.kind}, {space_b.kind})"
        )
    if space_a.mesh is not space_b.mesh:
        raise OperatorError("spaces live on different meshes")
    if (space_a.bc == "essential_zero") != (space_b.bc == "essential_zero"):
        raise OperatorError("spaces mix boundary-condition families")


class DiscreteCurl:
    """Weak curl from the face space into the edge space (mass solve)."""

    def __init__(self, curl_space: FeSpace, div_space: FeSpace):
        _check_pair(curl_space, "nedelec1_lowest", div_space, "rt_lowest")
        self.curl_space = curl_space
        self.div_space = div_space
        self.mass = assembly.assemble_bilinear("vec_mass", curl_space, curl_space)
        self.pairing = assembly.assemble_bilinear(
            "curl_mass_pairing", div_space, curl_space
        )
        self._lu = linalg._factorize(self.mass)

    def _mass_solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self._lu.solve(rhs)
        r = rhs - self.mass @ x
        rnorm, bnorm = np.linalg.norm(r), np.linalg.norm(rhs)
        if bnorm > 0 and rnorm > 1e-12 * bnorm:
            x = x + self._lu.solve(r)
        return x

    def apply(self, B: FieldFunction) -> FieldFunction:
        """curl_h B as a field in the edge space."""
        if B.space is not self.div_space:
            raise OperatorError("field does not belong to the operator's face space")
        rhs = self.pairing @ B.coeffs[self.div_space.free]
        out = np.zeros(self.curl_space.ndof)
        out[self.curl_space.free] = self._mass_solve(rhs)
        return FieldFunction(self.curl_space, out)

    def project(self, values: np.ndarray, rule) -> FieldFunction:
        """L^2 projection onto the edge space of a field tabulated at the
        rule's quadrature points, shape (nc, nq, 3)."""
        mesh = self.curl_space.mesh
        basis = derham.nedelec_values(mesh, rule.points)
        wdet = assembly.quadrature_weights(mesh, rule)
        cellvec = np.einsum("cq,cqd,cqad->ca", wdet, values, basis)
        rhs = np.zeros(self.curl_space.ndof)
        np.add.at(rhs, self.curl_space.dofmap.ravel(), cellvec.ravel())
        out = np.zeros(self.curl_space.ndof)
        out[self.curl_space.free] = self._mass_solve(rhs[self.curl_space.free])
        return FieldFunction(self.curl_space, out)


def l2_project_curl(
    curl_space: FeSpace, func, *, quad_degree: int = 6, _dcurl: DiscreteCurl | None = None
) -> FieldFunction:
    """L^2 projection of an analytic vector field onto the edge space."""
    mass = (
        _dcurl.mass
        if _dcurl is not None
        else assembly.assemble_bilinear("vec_mass", curl_space, curl_space)
    )
    rhs = assembly.assemble_linear(curl_space, func, quad_degree=quad_degree)
    out = np.zeros(curl_space.ndof)
    out[curl_space.free] = linalg.solve_direct(mass, rhs)
    return FieldFunction(curl_space, out)


class DiscreteDiv:
    """Weak divergence from the edge space into the vertex space:
    (div_h w, v) = -(w, grad v) for all v in the vertex space."""

    def __init__(self, grad_space: FeSpace, curl_space: FeSpace):
        _check_pair(grad_space, "lagrange_p1", curl_space, "nedelec1_lowest")
        self.grad_space = grad_space
        self.curl_space = curl_space
        self.mass = assembly.assemble_bilinear("scalar_mass", grad_space, grad_space)
        self.pairing = assembly.assemble_bilinear(
            "grad_scalar_pairing", curl_space, grad_space
        )
        self._lu = linalg._factorize(self.mass)

    def apply(self, w: FieldFunction) -> FieldFunction:
        if w.space is not self.curl_space:
            raise OperatorError("field does not belong to the operator's edge space")
        rhs = -(self.pairing @ w.coeffs[self.curl_space.free])
        out = np.zeros(self.grad_space.ndof)
        out[self.grad_space.free] = self._lu.solve(rhs)
        return FieldFunction(self.grad_space, out)


def stokes_project(
    u_space: FeSpace, p_space: FeSpace, grad_u_func, *, quad_degree: int = 6
):
    """Stokes projection of a velocity field given its gradient tensor.

    Solves (grad Pu, grad v) + (q_aux, div v) = (grad u, grad v),
    (div Pu, q) = 0 with zero-mean auxiliary pressure.  ``grad_u_func``
    maps (N, 3) points to (N, 3, 3) tensors G_ij = d_j u_i.  Returns
    (projected velocity, auxiliary pressure).
    """
    if u_space.kind != "lagrange_p2_vector" or u_space.bc != "essential_zero":
        raise OperatorError("Stokes projection needs the constrained velocity space")
    K = assembly.assemble_bilinear("grad_grad", u_space, u_space)
    D = assembly.assemble_bilinear("div_pressure", u_space, p_space)
    rhs_u = _grad_load(u_space, grad_u_func, quad_degree)
    w = assembly.domain_integral_vector(p_space)
    system = linalg.BlockSystem(
        field_order=("u", "p"),
        sizes={"u": u_space.num_free, "p": p_space.num_free},
        blocks={("u", "u"): K, ("u", "p"): D.T.tocsr(), ("p", "u"): D},
        rhs={"u": rhs_u},
        borders=[("p", w)],
    )
    A, b, imap = linalg.flatten(system)
    try:
        x = linalg.solve_direct(A, b)
    except linalg.SingularMatrixError as exc:
        raise OperatorError(
            f"Stokes system singular (velocity/pressure pair unstable): {exc}"
        ) from exc
    parts = linalg.unflatten(x, imap)
    pu = np.zeros(u_space.ndof)
    pu[u_space.free] = parts["u"]
    pp = np.zeros(p_space.ndof)
    pp[p_space.free] = parts["p"]
    return FieldFunction(u_space, pu), FieldFunction(p_space, pp)


def _grad_load(space: FeSpace, grad_func, quad_degree: int) -> np.ndarray:
    """Load vector int G : grad v for the velocity space."""
    rule = assembly.quadrature_rule(quad_degree)
    mesh = space.mesh
    xq = derham.physical_points(mesh, rule.points)
    G = np.asarray(grad_func(xq.reshape(-1, 3)), dtype=float).reshape(
        xq.shape[0], xq.shape[1], 3, 3
    )
    sg = derham.p2_scalar_gradients(mesh, rule.points)
    wdet = assembly.quadrature_weights(mesh, rule)
    comp = np.einsum("cq,cqij,cqaj->cai", wdet, G, sg)
    vec = np.zeros(space.ndof)
    np.add.at(vec, space.dofmap.ravel(), comp.reshape(mesh.num_cells, 30).ravel())
    return vec[space.free]


def divfree_l2_project(
    div_space: FeSpace, mult_space: FeSpace, func, *, quad_degree: int = 6
) -> FieldFunction:
    """Constrained L^2 projection onto the discretely divergence-free
    subspace of the face space (saddle-point solve).

    The multiplier space decides the constraint test space: with a
    zero-mean multiplier a bordered row is added (homogeneous-flux
    family); otherwise the full piecewise-constant space is used.
    """
    _check_div_mult(div_space, mult_space)
    M = assembly.assemble_bilinear("vec_mass", div_space, div_space)
    D = assembly.assemble_bilinear("div_scalar", div_space, mult_space)
    rhs = assembly.assemble_linear(div_space, func, quad_degree=quad_degree)
    borders = []
    if mult_space.mean_constraint:
        borders.append(("m", assembly.domain_integral_vector(mult_space)))
    system = linalg.BlockSystem(
        field_order=("B", "m"),
        sizes={"B": div_space.num_free, "m": mult_space.num_free},
        blocks={("B", "B"): M, ("B", "m"): D.T.tocsr(), ("m", "B"): D},
        rhs={"B": rhs},
        borders=borders,
    )
    A, b, imap = linalg.flatten(system)
    x = linalg.solve_direct(A, b)
    parts = linalg.unflatten(x, imap)
    out = np.zeros(div_space.ndof)
    out[div_space.free] = parts["B"]
    return FieldFunction(div_space, out)


def _check_div_mult(div_space, mult_space):
    if div_space.kind != "rt_lowest" or mult_space.kind != "dg0":
        raise OperatorError("projection needs (rt_lowest, dg0) spaces")
    if div_space.mesh is not mult_space.mesh:
        raise OperatorError("spaces live on different meshes")
    if (div_space.bc == "essential_zero") != mult_space.mean_constraint:
        raise OperatorError(
            "constrained-flux face space pairs with the zero-mean multiplier "
            "and the unconstrained face space with the full multiplier"
        )


# ----------------------------------------------------------------------
# norms


def lp_norm(f: FieldFunction, p: int = 2, *, quad_degree: int = 6) -> float:
    """L^p norm of a field by quadrature (p in {2, 3})."""
    if p not in (2, 3):
        raise OperatorError(f"unsupported exponent p={p}")
    rule = assembly.quadrature_rule(quad_degree)
    vals = derham.evaluate_on_cells(f, rule.points)
    wdet = assembly.quadrature_weights(f.space.mesh, rule)
    return _lp_from_values(vals, wdet, p)


def lp_norm_callable(mesh, func, p: int = 2, *, quad_degree: int = 6) -> float:
    """L^p norm of an analytic field by quadrature."""
    rule = assembly.quadrature_rule(quad_degree)
    xq = derham.physical_points(mesh, rule.points)
    vals = np.asarray(func(xq.reshape(-1, 3)), dtype=float)
    vals = vals.reshape(xq.shape[:2] + vals.shape[1:])
    wdet = assembly.quadrature_weights(mesh, rule)
    return _lp_from_values(vals, wdet, p)


def _lp_from_values(vals, wdet, p):
    if vals.ndim == 3:
        mag = np.sqrt(np.einsum("cqd,cqd->cq", vals, vals))
    else:
        mag = np.abs(vals)
    return float(np.einsum("cq,cq->", wdet, mag**p) ** (1.0 / p))


def norm_h1_vec(u: FieldFunction, *, quad_degree: int = 4) -> float:
    """Full H^1 norm of a velocity field."""
    return float(np.sqrt(lp_norm(u, 2, quad_degree=quad_degree) ** 2
                         + seminorm_h1_vec(u, quad_degree=quad_degree) ** 2))


def seminorm_h1_vec(u: FieldFunction, *, quad_degree: int = 4) -> float:
    """L^2 norm of the velocity gradient tensor."""
    rule = assembly.quadrature_rule(quad_degree)
    G = derham.evaluate_grad_on_cells(u, rule.points)
    wdet = assembly.quadrature_weights(u.space.mesh, rule)
    return float(np.sqrt(np.einsum("cq,cqij,cqij->", wdet, G, G)))


def norm_div_part(B: FieldFunction) -> float:
    """L^2 norm of the (cellwise constant) divergence of a face field."""
    div = derham.evaluate_div_on_cells(B)
    return float(np.sqrt((div * div) @ B.space.mesh.volumes))


def norm_curl_part(F: FieldFunction, *, quad_degree: int = 4) -> float:
    """L^2 norm of the (cellwise constant) curl of an edge field."""
    curl = derham.evaluate_curl_on_cells(F)
    return float(np.sqrt(np.einsum("cd,cd,c->", curl, curl, F.space.mesh.volumes)))


def norm_d(B: FieldFunction, dcurl: DiscreteCurl, *, quad_degree: int = 4) -> float:
    """Magnetic graph norm: (|B|^2 + |div B|^2 + |curl_h B|^2)^(1/2)."""
    curl_h = dcurl.apply(B)
    return float(
        np.sqrt(
            lp_norm(B, 2, quad_degree=quad_degree) ** 2
            + norm_div_part(B) ** 2
            + lp_norm(curl_h, 2, quad_degree=quad_degree) ** 2
        )
    )


def norm_w(u: FieldFunction, B: FieldFunction, dcurl: DiscreteCurl) -> float:
    """Combined solution norm |(u, B)|_W = (|u|_1^2 + |B|_d^2)^(1/2)."""
    return float(np.sqrt(norm_h1_vec(u) ** 2 + norm_d(B, dcurl) ** 2))


def norm_x(
    v: FieldFunction,
    F: FieldFunction,
    C: FieldFunction,
    B_minus: FieldFunction,
    *,
    quad_degree: int = 6,
) -> float:
    """Linearization norm on (velocity, electric, magnetic) triples:
    |v|^2 + |grad v|^2 + |curl F|^2 + |F + v x B-|^2 + |C|^2 + |div C|^2."""
    rule = assembly.quadrature_rule(quad_degree)
    mesh = v.space.mesh
    wdet = assembly.quadrature_weights(mesh, rule)
    vv = derham.evaluate_on_cells(v, rule.points)
    bb = derham.evaluate_on_cells(B_minus, rule.points)
    ff = derham.evaluate_on_cells(F, rule.points)
    ohm = ff + np.cross(vv, bb)
    ohm_sq = float(np.einsum("cq,cqd,cqd->", wdet, ohm, ohm))
    return float(
        np.sqrt(
            lp_norm(v, 2) ** 2
            + seminorm_h1_vec(v) ** 2
            + norm_curl_part(F) ** 2
            + ohm_sq
            + lp_norm(C, 2) ** 2
            + norm_div_part(C) ** 2
        )
    )


def norm_y(q: FieldFunction, r: FieldFunction | None) -> float:
    """Multiplier-pair norm (|q|^2 + |r|^2)^(1/2); r may be absent."""
    rq = lp_norm(q, 2, quad_degree=2) ** 2
    rr = 0.0 if r is None else lp_norm(r, 2, quad_degree=2) ** 2
    return float(np.sqrt(rq + rr))


class VelocityDualNorm:
    """Discrete dual norm sup <f, v> / |grad v| over the velocity space,
    realized by one stiffness solve per application."""

    def __init__(self, u_space: FeSpace, stiffness=None):
        self.space = u_space
        self.stiffness = (
            stiffness
            if stiffness is not None
            else assembly.assemble_bilinear("grad_grad", u_space, u_space)
        )
        self._lu = linalg._factorize(self.stiffness)

    def __call__(self, load_free: np.ndarray) -> float:
        x = self._lu.solve(load_free)
        val = float(load_free @ x)
        return float(np.sqrt(max(val, 0.0)))
