"""Lowest-order discrete de Rham spaces on tetrahedral meshes.

Six space kinds are provided:

* ``lagrange_p1``            scalar vertex elements (H(grad) slot)
* ``nedelec1_lowest``        first-kind edge elements (H(curl) slot)
* ``rt_lowest``              lowest Raviart-Thomas face elements (H(div) slot)
* ``dg0``                    piecewise constants (L^2 slot)
* ``lagrange_p2_vector``     vector quadratic Lagrange (velocity)
* ``lagrange_p1_pressure``   scalar P1 pressure (zero mean, no BC)

Edge and face degrees of freedom are oriented by ascending global vertex
index, which makes tangential/normal traces match across cells without
per-cell sign tables.  Basis functions are barycentric (Whitney) forms
evaluated directly on physical cells; on affine tetrahedra this equals
the covariant/contravariant Piola-mapped reference basis.

``bc="essential_zero"`` constrains the boundary trace to zero (vertex
values, edge circulations, face fluxes, or full velocity trace);
``bc="none"`` leaves all degrees of freedom free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import LOCAL_EDGES, LOCAL_FACES, Mesh, MeshTopology, build_topology


class SpaceError(Exception):
    """Raised for invalid space kind / boundary condition combinations."""


SCALAR_KINDS = ("lagrange_p1", "lagrange_p1_pressure", "dg0")
VECTOR_KINDS = ("lagrange_p2_vector", "nedelec1_lowest", "rt_lowest")
ALL_KINDS = SCALAR_KINDS + VECTOR_KINDS
BC_KINDS = ("essential_zero", "none")

# degree-5-exact Gauss rule on [0, 1] for edge circulations
_GAUSS3_X = np.array([0.5 - np.sqrt(15.0) / 10.0, 0.5, 0.5 + np.sqrt(15.0) / 10.0])
_GAUSS3_W = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])

# degree-4-exact 6-point triangle rule (two symmetric orbits), weights sum to 1
_TRI_A1, _TRI_W1 = 0.445948490915965, 0.223381589678011
_TRI_A2, _TRI_W2 = 0.091576213509771, 0.109951743655322
_TRI_BARY = np.array(
    [
        [1.0 - 2.0 * _TRI_A1, _TRI_A1, _TRI_A1],
        [_TRI_A1, 1.0 - 2.0 * _TRI_A1, _TRI_A1],
        [_TRI_A1, _TRI_A1, 1.0 - 2.0 * _TRI_A1],
        [1.0 - 2.0 * _TRI_A2, _TRI_A2, _TRI_A2],
        [_TRI_A2, 1.0 - 2.0 * _TRI_A2, _TRI_A2],
        [_TRI_A2, _TRI_A2, 1.0 - 2.0 * _TRI_A2],
    ]
)
_TRI_W = np.array([_TRI_W1] * 3 + [_TRI_W2] * 3)


@dataclass
class FeSpace:
    """A finite element space bound to a mesh and its topology."""

    kind: str
    bc: str
    mesh: Mesh
    topology: MeshTopology
    mean_constraint: bool
    ndof: int
    dofmap: np.ndarray          # (nc, nloc) local-to-global
    constrained: np.ndarray     # (ndof,) bool, essential dofs
    free: np.ndarray = field(init=False)
    global_to_free: np.ndarray = field(init=False)

    def __post_init__(self):
        self.free = np.flatnonzero(~self.constrained)
        g2f = np.full(self.ndof, -1, dtype=np.int64)
        g2f[self.free] = np.arange(len(self.free))
        self.global_to_free = g2f

    @property
    def num_free(self) -> int:
        return len(self.free)

    @property
    def nloc(self) -> int:
        return self.dofmap.shape[1]

    @property
    def is_vector(self) -> bool:
        return self.kind in VECTOR_KINDS


@dataclass
class FieldFunction:
    """A finite element field: a space and its full coefficient vector."""

    space: FeSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.ndof,):
            raise SpaceError(
                f"coefficient vector has length {len(self.coeffs)}, "
                f"space has {self.space.ndof} dofs"
            )

    def copy(self) -> "FieldFunction":
        return FieldFunction(self.space, self.coeffs.copy())

    @classmethod
    def zeros(cls, space: FeSpace) -> "FieldFunction":
        return cls(space, np.zeros(space.ndof))


def make_space(
    kind: str,
    bc: str,
    mesh: Mesh,
    topology: MeshTopology | None = None,
    *,
    mean_constraint: bool = False,
) -> FeSpace:
    """Build a finite element space of the given kind on a mesh."""
    if kind not in ALL_KINDS:
        raise SpaceError(f"unknown space kind {kind!r}")
    if bc not in BC_KINDS:
        raise SpaceError(f"unknown boundary condition {bc!r}")
    if topology is None:
        topology = build_topology(mesh)
    if kind in ("dg0", "lagrange_p1_pressure") and bc != "none":
        raise SpaceError(f"{kind} does not admit essential boundary conditions")
    if mean_constraint and kind not in ("dg0", "lagrange_p1_pressure"):
        raise SpaceError(f"mean constraint is only meaningful for L^2-type spaces, not {kind}")

    nv = mesh.num_vertices
    ne = topology.num_edges
    nc = mesh.num_cells

    if kind in ("lagrange_p1", "lagrange_p1_pressure"):
        ndof = nv
        dofmap = mesh.cells.copy()
        constrained = (
            topology.boundary_vertices.copy()
            if bc == "essential_zero"
            else np.zeros(ndof, dtype=bool)
        )
    elif kind == "nedelec1_lowest":
        ndof = ne
        dofmap = topology.cell_to_edge.copy()
        constrained = (
            topology.boundary_edges.copy()
            if bc == "essential_zero"
            else np.zeros(ndof, dtype=bool)
        )
    elif kind == "rt_lowest":
        ndof = topology.num_faces
        dofmap = topology.cell_to_face.copy()
        constrained = (
            topology.boundary_faces.copy()
            if bc == "essential_zero"
            else np.zeros(ndof, dtype=bool)
        )
    elif kind == "dg0":
        ndof = nc
        dofmap = np.arange(nc, dtype=np.int64)[:, None]
        constrained = np.zeros(ndof, dtype=bool)
    elif kind == "lagrange_p2_vector":
        scalar_map = np.concatenate([mesh.cells, nv + topology.cell_to_edge], axis=1)
        dofmap = (3 * scalar_map[:, :, None] + np.arange(3)).reshape(nc, 30)
        ndof = 3 * (nv + ne)
        constrained = np.zeros(ndof, dtype=bool)
        if bc == "essential_zero":
            scalar_bc = np.concatenate(
                [topology.boundary_vertices, topology.boundary_edges]
            )
            constrained = np.repeat(scalar_bc, 3)

    return FeSpace(
        kind=kind,
        bc=bc,
        mesh=mesh,
        topology=topology,
        mean_constraint=mean_constraint,
        ndof=ndof,
        dofmap=dofmap,
        constrained=constrained,
    )


# ----------------------------------------------------------------------
# basis tabulation


def cell_orientations(mesh: Mesh):
    """Per-cell local edge pairs and face triples reordered so global
    vertex indices ascend (the intrinsic orientation of each entity)."""
    if "orientations" not in mesh._cache:
        cells = mesh.cells
        le = np.array(LOCAL_EDGES, dtype=np.int64)
        ge = cells[:, le]
        order = np.argsort(ge, axis=2)
        edge_pairs = np.take_along_axis(
            np.broadcast_to(le, ge.shape).copy(), order, axis=2
        )
        lf = np.array(LOCAL_FACES, dtype=np.int64)
        gf = cells[:, lf]
        order = np.argsort(gf, axis=2)
        face_triples = np.take_along_axis(
            np.broadcast_to(lf, gf.shape).copy(), order, axis=2
        )
        mesh._cache["orientations"] = (edge_pairs, face_triples)
    return mesh._cache["orientations"]


def reference_barycentric(points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates (nq, 4) of reference-tet points (nq, 3)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lam0 = 1.0 - points.sum(axis=1)
    return np.concatenate([lam0[:, None], points], axis=1)


def p1_values(points: np.ndarray) -> np.ndarray:
    """P1 basis values, (nq, 4): the barycentric coordinates."""
    return reference_barycentric(points)


def p2_scalar_values(points: np.ndarray) -> np.ndarray:
    """Scalar P2 basis values, (nq, 10): 4 vertex + 6 edge functions."""
    lam = reference_barycentric(points)
    vert = lam * (2.0 * lam - 1.0)
    edge = np.stack([4.0 * lam[:, a] * lam[:, b] for a, b in LOCAL_EDGES], axis=1)
    return np.concatenate([vert, edge], axis=1)


def p2_scalar_gradients(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Scalar P2 basis gradients on every cell, (nc, nq, 10, 3)."""
    lam = reference_barycentric(points)
    G = mesh.grad_lambda
    nc, nq = mesh.num_cells, len(lam)
    out = np.empty((nc, nq, 10, 3))
    out[:, :, :4, :] = (4.0 * lam - 1.0)[None, :, :, None] * G[:, None, :, :]
    for k, (a, b) in enumerate(LOCAL_EDGES):
        out[:, :, 4 + k, :] = 4.0 * (
            lam[None, :, a, None] * G[:, None, b, :]
            + lam[None, :, b, None] * G[:, None, a, :]
        )
    return out


def nedelec_values(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Whitney edge basis values on every cell, (nc, nq, 6, 3)."""
    lam = reference_barycentric(points)
    ep, _ = cell_orientations(mesh)
    G = mesh.grad_lambda
    Ga = np.take_along_axis(G, ep[:, :, 0:1], axis=1)
    Gb = np.take_along_axis(G, ep[:, :, 1:2], axis=1)
    la = lam.T[ep[:, :, 0]].transpose(0, 2, 1)
    lb = lam.T[ep[:, :, 1]].transpose(0, 2, 1)
    return la[..., None] * Gb[:, None, :, :] - lb[..., None] * Ga[:, None, :, :]


def nedelec_curls(mesh: Mesh) -> np.ndarray:
    """Curls of the Whitney edge basis (constant per cell), (nc, 6, 3)."""
    ep, _ = cell_orientations(mesh)
    G = mesh.grad_lambda
    Ga = np.take_along_axis(G, ep[:, :, 0:1], axis=1)
    Gb = np.take_along_axis(G, ep[:, :, 1:2], axis=1)
    return 2.0 * np.cross(Ga, Gb)


def rt_values(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Whitney face (Raviart-Thomas) basis values, (nc, nq, 4, 3)."""
    lam = reference_barycentric(points)
    _, ft = cell_orientations(mesh)
    G = mesh.grad_lambda
    Ga = np.take_along_axis(G, ft[:, :, 0:1], axis=1)
    Gb = np.take_along_axis(G, ft[:, :, 1:2], axis=1)
    Gc = np.take_along_axis(G, ft[:, :, 2:3], axis=1)
    la = lam.T[ft[:, :, 0]].transpose(0, 2, 1)
    lb = lam.T[ft[:, :, 1]].transpose(0, 2, 1)
    lc = lam.T[ft[:, :, 2]].transpose(0, 2, 1)
    return 2.0 * (
        la[..., None] * np.cross(Gb, Gc)[:, None]
        + lb[..., None] * np.cross(Gc, Ga)[:, None]
        + lc[..., None] * np.cross(Ga, Gb)[:, None]
    )


def rt_divergences(mesh: Mesh) -> np.ndarray:
    """Divergences of the face basis (constant per cell), (nc, 4)."""
    _, ft = cell_orientations(mesh)
    G = mesh.grad_lambda
    Ga = np.take_along_axis(G, ft[:, :, 0:1], axis=1)
    Gb = np.take_along_axis(G, ft[:, :, 1:2], axis=1)
    Gc = np.take_along_axis(G, ft[:, :, 2:3], axis=1)
    return 6.0 * np.einsum("ced,ced->ce", Ga, np.cross(Gb, Gc))


def tabulate(space: FeSpace, cell: int, points: np.ndarray):
    """Basis values and exterior-derivative values on one cell.

    Returns ``(values, derivs)`` where derivs are gradients for Lagrange
    kinds, curls for the edge space, divergences for the face space and
    None for piecewise constants.  ``points`` are reference-tet
    coordinates.
    """
    if not 0 <= cell < space.mesh.num_cells:
        raise SpaceError(f"cell index {cell} out of range")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lam = reference_barycentric(points)
    if lam.min() < -1e-12 or lam.max() > 1.0 + 1e-12:
        raise SpaceError("points fall outside the reference tetrahedron")
    kind = space.kind
    nq = len(points)
    if kind in ("lagrange_p1", "lagrange_p1_pressure"):
        vals = p1_values(points)
        derivs = np.broadcast_to(space.mesh.grad_lambda[cell][None], (nq, 4, 3)).copy()
        return vals, derivs
    if kind == "dg0":
        return np.ones((nq, 1)), None
    if kind == "nedelec1_lowest":
        vals = nedelec_values(space.mesh, points)[cell]
        curls = nedelec_curls(space.mesh)[cell]
        return vals, np.broadcast_to(curls[None], (nq, 6, 3)).copy()
    if kind == "rt_lowest":
        vals = rt_values(space.mesh, points)[cell]
        divs = rt_divergences(space.mesh)[cell]
        return vals, np.broadcast_to(divs[None], (nq, 4)).copy()
    # lagrange_p2_vector
    svals = p2_scalar_values(points)
    sgrads = p2_scalar_gradients(space.mesh, points)[cell]
    vals = np.zeros((nq, 30, 3))
    derivs = np.zeros((nq, 30, 3, 3))
    for comp in range(3):
        vals[:, comp::3, comp] = svals
        derivs[:, comp::3, comp, :] = sgrads
    return vals, derivs


# ----------------------------------------------------------------------
# field evaluation


def evaluate_on_cells(f: FieldFunction, points: np.ndarray) -> np.ndarray:
    """Field values at reference points on every cell: (nc, nq) for
    scalar kinds, (nc, nq, 3) for vector kinds."""
    space = f.space
    local = f.coeffs[space.dofmap]  # (nc, nloc)
    kind = space.kind
    if kind in ("lagrange_p1", "lagrange_p1_pressure"):
        return np.einsum("qa,ca->cq", p1_values(points), local)
    if kind == "dg0":
        nq = len(np.atleast_2d(points))
        return np.repeat(local, nq, axis=1)
    if kind == "nedelec1_lowest":
        return np.einsum("cqad,ca->cqd", nedelec_values(space.mesh, points), local)
    if kind == "rt_lowest":
        return np.einsum("cqad,ca->cqd", rt_values(space.mesh, points), local)
    # lagrange_p2_vector: component-interleaved coefficients
    comps = local.reshape(space.mesh.num_cells, 10, 3)
    return np.einsum("qa,cad->cqd", p2_scalar_values(points), comps)


def evaluate_grad_on_cells(f: FieldFunction, points: np.ndarray) -> np.ndarray:
    """Velocity gradient tensors d_j u_i, (nc, nq, 3, 3)."""
    space = f.space
    if space.kind != "lagrange_p2_vector":
        raise SpaceError("gradient evaluation is for the velocity space")
    comps = f.coeffs[space.dofmap].reshape(space.mesh.num_cells, 10, 3)
    sgrads = p2_scalar_gradients(space.mesh, points)
    return np.einsum("cqaj,cai->cqij", sgrads, comps)


def evaluate_curl_on_cells(f: FieldFunction) -> np.ndarray:
    """Curl of an edge-space field (constant per cell), (nc, 3)."""
    if f.space.kind != "nedelec1_lowest":
        raise SpaceError("curl evaluation is for the edge space")
    local = f.coeffs[f.space.dofmap]
    return np.einsum("cad,ca->cd", nedelec_curls(f.space.mesh), local)


def evaluate_div_on_cells(f: FieldFunction) -> np.ndarray:
    """Divergence of a face-space field (constant per cell), (nc,)."""
    if f.space.kind != "rt_lowest":
        raise SpaceError("divergence evaluation is for the face space")
    local = f.coeffs[f.space.dofmap]
    return np.einsum("ca,ca->c", rt_divergences(f.space.mesh), local)


# ----------------------------------------------------------------------
# canonical interpolation


def canonical_interpolate(space: FeSpace, func) -> FieldFunction:
    """Degree-of-freedom interpolation: point values (Lagrange), edge
    circulations (edge space, Gauss rule exact to degree 5), face fluxes
    (face space, triangle rule exact to degree 4), cell means (dg0).

    ``func`` must accept an (N, 3) array of physical points and return
    (N,) for scalar kinds or (N, 3) for vector kinds.  Essential-zero
    constrained dofs are interpolated like any other (callers wanting a
    conforming member should pass a trace-compatible field).
    """
    mesh, topo = space.mesh, space.topology
    kind = space.kind
    if kind in ("lagrange_p1", "lagrange_p1_pressure"):
        return FieldFunction(space, np.asarray(func(mesh.vertices), dtype=float))
    if kind == "dg0":
        from .assembly import quadrature_rule

        rule = quadrature_rule(4)
        xq = physical_points(mesh, rule.points)  # (nc, nq, 3)
        vals = np.asarray(func(xq.reshape(-1, 3)), dtype=float).reshape(xq.shape[:2])
        means = 6.0 * np.einsum("q,cq->c", rule.weights, vals)
        return FieldFunction(space, means)
    if kind == "lagrange_p2_vector":
        mids = 0.5 * (mesh.vertices[topo.edges[:, 0]] + mesh.vertices[topo.edges[:, 1]])
        nodes = np.concatenate([mesh.vertices, mids], axis=0)
        vals = np.asarray(func(nodes), dtype=float)
        return FieldFunction(space, vals.reshape(-1))
    if kind == "nedelec1_lowest":
        pa = mesh.vertices[topo.edges[:, 0]]
        tang = mesh.vertices[topo.edges[:, 1]] - pa
        coeffs = np.zeros(space.ndof)
        for x, w in zip(_GAUSS3_X, _GAUSS3_W):
            fx = np.asarray(func(pa + x * tang), dtype=float)
            coeffs += w * np.einsum("ed,ed->e", fx, tang)
        return FieldFunction(space, coeffs)
    # rt_lowest: flux against the ascending-index area normal
    f = topo.faces
    pa, pb, pc = (mesh.vertices[f[:, k]] for k in range(3))
    area_normal = 0.5 * np.cross(pb - pa, pc - pa)
    coeffs = np.zeros(space.ndof)
    for lam, w in zip(_TRI_BARY, _TRI_W):
        x = lam[0] * pa + lam[1] * pb + lam[2] * pc
        fx = np.asarray(func(x), dtype=float)
        coeffs += w * np.einsum("fd,fd->f", fx, area_normal)
    return FieldFunction(space, coeffs)


def physical_points(mesh: Mesh, ref_points: np.ndarray) -> np.ndarray:
    """Map reference points into every cell, (nc, nq, 3)."""
    ref_points = np.atleast_2d(np.asarray(ref_points, dtype=float))
    X0 = mesh.cell_coords[:, 0, :]
    return X0[:, None, :] + np.einsum("qi,cid->cqd", ref_points, mesh.jacobians)


def zero_mean_project(f: FieldFunction) -> FieldFunction:
    """Subtract the volume-weighted mean from an L^2-type field."""
    space = f.space
    if space.kind == "dg0":
        vols = space.mesh.volumes
        mean = float(f.coeffs @ vols) / float(vols.sum())
        return FieldFunction(space, f.coeffs - mean)
    if space.kind in ("lagrange_p1", "lagrange_p1_pressure"):
        w = vertex_volume_weights(space)
        mean = float(f.coeffs @ w) / float(w.sum())
        return FieldFunction(space, f.coeffs - mean)
    raise SpaceError(f"zero-mean projection is not defined for {space.kind}")


def vertex_volume_weights(space: FeSpace) -> np.ndarray:
    """Integrals of the P1 basis functions: w_i = sum |T|/4 over cells at i."""
    w = np.zeros(space.ndof)
    np.add.at(w, space.mesh.cells.ravel(), np.repeat(space.mesh.volumes / 4.0, 4))
    return w


def field_mean(f: FieldFunction) -> float:
    """Volume mean of a scalar field (dg0 or P1 kinds)."""
    space = f.space
    vol = float(space.mesh.volumes.sum())
    if space.kind == "dg0":
        return float(f.coeffs @ space.mesh.volumes) / vol
    if space.kind in ("lagrange_p1", "lagrange_p1_pressure"):
        return float(f.coeffs @ vertex_volume_weights(space)) / vol
    raise SpaceError(f"mean is not defined for {space.kind}")
