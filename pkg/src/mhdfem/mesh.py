"""Tetrahedral meshes of polyhedral domains.

Provides the structured Kuhn subdivision of the unit cube, a reader for
Gmsh MSH 2.2 ASCII files, entity topology (edges, faces, incidence with
orientation signs) and mesh quality metrics.

Conventions used throughout the package:

* cell vertex orderings are repaired so every tetrahedron has positive
  volume (ascending vertex indices, last two swapped when needed);
* local edges of a cell are the vertex pairs
  ``[(0,1),(0,2),(0,3),(1,2),(1,3),(2,3)]``;
* local faces are opposite the like-numbered vertex,
  ``[(1,2,3),(0,2,3),(0,1,3),(0,1,2)]``;
* global edges and faces are stored as ascending vertex tuples, sorted
  lexicographically, and their intrinsic orientation (edge direction,
  face normal) is the one induced by ascending global vertex indices.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class MeshError(Exception):
    """Raised for malformed or degenerate mesh input."""


class ParseError(MeshError):
    """Raised when a mesh file cannot be parsed; carries the line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


LOCAL_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
LOCAL_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))


class Mesh:
    """A tetrahedral mesh: vertex coordinates, cells and region tags.

    Attributes
    ----------
    vertices : (nv, 3) float array
    cells : (nc, 4) int array, positively oriented
    cell_tags : (nc,) int array of region tags
    """

    def __init__(self, vertices, cells, cell_tags=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        cells = np.ascontiguousarray(cells, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be an (nv, 3) array")
        if cells.ndim != 2 or cells.shape[1] != 4:
            raise MeshError("cells must be an (nc, 4) array")
        if cells.size and (cells.min() < 0 or cells.max() >= len(self.vertices)):
            raise MeshError("cell refers to a vertex that does not exist")
        self.cells = _repair_orientation(self.vertices, cells)
        if cell_tags is None:
            cell_tags = np.zeros(len(self.cells), dtype=np.int64)
        self.cell_tags = np.asarray(cell_tags, dtype=np.int64)
        if self.cell_tags.shape != (len(self.cells),):
            raise MeshError("cell_tags must have one entry per cell")
        self._cache: dict = {}

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def cell_coords(self):
        """Vertex coordinates per cell, shape (nc, 4, 3)."""
        if "cell_coords" not in self._cache:
            self._cache["cell_coords"] = self.vertices[self.cells]
        return self._cache["cell_coords"]

    @property
    def jacobians(self):
        """Edge matrices J with rows v_i - v_0, shape (nc, 3, 3)."""
        if "jacobians" not in self._cache:
            X = self.cell_coords
            self._cache["jacobians"] = X[:, 1:, :] - X[:, :1, :]
        return self._cache["jacobians"]

    @property
    def det_jacobians(self):
        if "detj" not in self._cache:
            self._cache["detj"] = np.linalg.det(self.jacobians)
        return self._cache["detj"]

    @property
    def volumes(self):
        if "volumes" not in self._cache:
            self._cache["volumes"] = self.det_jacobians / 6.0
        return self._cache["volumes"]

    @property
    def grad_lambda(self):
        """Gradients of the four barycentric coordinates, shape (nc, 4, 3)."""
        if "grad_lambda" not in self._cache:
            inv_t = np.linalg.inv(self.jacobians)  # columns are grad lambda_i
            g = np.transpose(inv_t, (0, 2, 1))
            g0 = -g.sum(axis=1, keepdims=True)
            self._cache["grad_lambda"] = np.concatenate([g0, g], axis=1)
        return self._cache["grad_lambda"]

    @property
    def diameters(self):
        """Cell diameters (longest edge), shape (nc,)."""
        if "diameters" not in self._cache:
            X = self.cell_coords
            d = np.zeros(self.num_cells)
            for a, b in LOCAL_EDGES:
                d = np.maximum(d, np.linalg.norm(X[:, a] - X[:, b], axis=1))
            self._cache["diameters"] = d
        return self._cache["diameters"]


def _repair_orientation(vertices, cells):
    """Sort each cell's vertices ascending, then swap the last two if the
    resulting tetrahedron is negatively oriented.  Idempotent.  Raises on
    degenerate (zero-volume) cells."""
    cells = np.sort(cells, axis=1)
    X = vertices[cells]
    det = np.linalg.det(X[:, 1:, :] - X[:, :1, :])
    scale = np.maximum(np.abs(det).max() if len(det) else 1.0, 1.0)
    if np.any(np.abs(det) <= 1e-14 * scale):
        bad = int(np.argmin(np.abs(det)))
        raise MeshError(f"cell {bad} is degenerate (volume ~ 0)")
    flip = det < 0
    cells[flip, 2], cells[flip, 3] = cells[flip, 3], cells[flip, 2].copy()
    return cells


def unit_cube_mesh(n: int) -> Mesh:
    """Kuhn triangulation of the unit cube: n^3 subcubes, 6 tets each.

    All six tetrahedra of a subcube share its main diagonal, so the mesh
    is conforming and every cell has diameter sqrt(3)/n.
    """
    if n < 1:
        raise MeshError("n must be >= 1")
    m = n + 1
    grid = np.linspace(0.0, 1.0, m)
    xx, yy, zz = np.meshgrid(grid, grid, grid, indexing="ij")
    vertices = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def vid(i, j, k):
        return (i * m + j) * m + k

    cells = []
    corner_steps = list(itertools.permutations(range(3)))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                base = np.array([i, j, k])
                for perm in corner_steps:
                    c = [base.copy()]
                    p = base.copy()
                    for axis in perm:
                        p = p.copy()
                        p[axis] += 1
                        c.append(p)
                    cells.append([vid(*q) for q in c])
    return Mesh(vertices, np.array(cells, dtype=np.int64))


def read_gmsh_msh2(path: str) -> Mesh:
    """Read a Gmsh MSH 2.2 ASCII file.

    Keeps 4-node tetrahedra (element type 4) and their first physical tag;
    all other element types are ignored.  Node ids must be contiguous
    1..N; violations raise ParseError with the offending line number.
    """
    with open(path, "r") as fh:
        lines = fh.read().splitlines()

    def tokens(idx):
        return lines[idx].split()

    pos = 0
    nlines = len(lines)

    def expect(tag):
        nonlocal pos
        while pos < nlines and not lines[pos].strip():
            pos += 1
        if pos >= nlines or lines[pos].strip() != tag:
            raise ParseError(f"expected {tag}", pos + 1)
        pos += 1

    expect("$MeshFormat")
    fmt = tokens(pos)
    if len(fmt) != 3 or not fmt[0].startswith("2.2"):
        raise ParseError(f"unsupported mesh format {lines[pos]!r}", pos + 1)
    pos += 1
    expect("$EndMeshFormat")

    expect("$Nodes")
    try:
        nnodes = int(lines[pos])
    except ValueError:
        raise ParseError("node count is not an integer", pos + 1)
    pos += 1
    vertices = np.empty((nnodes, 3))
    for i in range(nnodes):
        t = tokens(pos)
        if len(t) != 4:
            raise ParseError("node line needs 'id x y z'", pos + 1)
        if int(t[0]) != i + 1:
            raise ParseError(f"non-contiguous node id {t[0]} (expected {i + 1})", pos + 1)
        vertices[i] = [float(t[1]), float(t[2]), float(t[3])]
        pos += 1
    expect("$EndNodes")

    expect("$Elements")
    try:
        nelem = int(lines[pos])
    except ValueError:
        raise ParseError("element count is not an integer", pos + 1)
    pos += 1
    cells = []
    tags = []
    for _ in range(nelem):
        t = tokens(pos)
        if len(t) < 3:
            raise ParseError("element line too short", pos + 1)
        etype = int(t[1])
        ntags = int(t[2])
        nodes = t[3 + ntags:]
        if etype == 4:
            if len(nodes) != 4:
                raise ParseError("tetrahedron needs exactly 4 nodes", pos + 1)
            conn = [int(s) - 1 for s in nodes]
            if any(v < 0 or v >= nnodes for v in conn):
                raise ParseError(f"unknown node reference in {lines[pos]!r}", pos + 1)
            cells.append(conn)
            tags.append(int(t[3]) if ntags > 0 else 0)
        pos += 1
    expect("$EndElements")

    if not cells:
        raise ParseError("file contains no tetrahedra", pos)
    return Mesh(vertices, np.array(cells, dtype=np.int64), np.array(tags, dtype=np.int64))


@dataclass
class MeshTopology:
    """Edge/face tables, boundary flags and signed incidence matrices.

    The incidence matrices are the coefficient-level differential
    operators of the lowest-order complex (integer entries):

    * ``grad_incidence`` (ne, nv): row of edge (a, b) is -1 at a, +1 at b;
    * ``curl_incidence`` (nf, ne): row of face (a, b, c) is +1 at (a, b),
      -1 at (a, c), +1 at (b, c) (Stokes around the ascending-index
      orientation);
    * ``div_incidence`` (nc, nf): +1 where the intrinsic face normal
      points out of the cell, -1 otherwise.

    Their composites curl*grad and div*curl vanish exactly (integer
    arithmetic).
    """

    edges: np.ndarray            # (ne, 2) ascending pairs, lexicographic
    faces: np.ndarray            # (nf, 3) ascending triples, lexicographic
    cell_to_edge: np.ndarray     # (nc, 6)
    cell_to_face: np.ndarray     # (nc, 4)
    boundary_faces: np.ndarray   # (nf,) bool
    boundary_edges: np.ndarray   # (ne,) bool
    boundary_vertices: np.ndarray  # (nv,) bool
    grad_incidence: sp.csr_matrix
    curl_incidence: sp.csr_matrix
    div_incidence: sp.csr_matrix

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_faces(self) -> int:
        return len(self.faces)


def build_topology(mesh: Mesh) -> MeshTopology:
    """Enumerate edges and faces of a mesh and build incidence operators."""
    nv = mesh.num_vertices
    nc = mesh.num_cells
    cells = mesh.cells

    pairs = np.sort(cells[:, LOCAL_EDGES], axis=2).reshape(-1, 2)
    keys = pairs[:, 0] * nv + pairs[:, 1]
    edge_keys, inverse = np.unique(keys, return_inverse=True)
    edges = np.stack([edge_keys // nv, edge_keys % nv], axis=1)
    cell_to_edge = inverse.reshape(nc, 6)

    triples = np.sort(cells[:, LOCAL_FACES], axis=2).reshape(-1, 3)
    fkeys = (triples[:, 0] * nv + triples[:, 1]) * nv + triples[:, 2]
    face_keys, finv = np.unique(fkeys, return_inverse=True)
    faces = np.stack(
        [face_keys // (nv * nv), (face_keys // nv) % nv, face_keys % nv], axis=1
    )
    cell_to_face = finv.reshape(nc, 4)

    counts = np.bincount(cell_to_face.ravel(), minlength=len(faces))
    if counts.max() > 2:
        raise MeshError("a face is shared by more than two cells")
    boundary_faces = counts == 1
    boundary_vertices = np.zeros(nv, dtype=bool)
    boundary_vertices[faces[boundary_faces].ravel()] = True
    edge_on_boundary = np.zeros(len(edges), dtype=bool)
    bf = faces[boundary_faces]
    if len(bf):
        bpairs = np.sort(bf[:, [(0, 1), (0, 2), (1, 2)]], axis=2).reshape(-1, 2)
        bkeys = bpairs[:, 0] * nv + bpairs[:, 1]
        edge_on_boundary[np.searchsorted(edge_keys, np.unique(bkeys))] = True

    grad_inc = _grad_incidence(edges, nv)
    curl_inc = _curl_incidence(faces, edge_keys, nv)
    div_inc = _div_incidence(mesh, faces, cell_to_face)

    return MeshTopology(
        edges=edges,
        faces=faces,
        cell_to_edge=cell_to_edge,
        cell_to_face=cell_to_face,
        boundary_faces=boundary_faces,
        boundary_edges=edge_on_boundary,
        boundary_vertices=boundary_vertices,
        grad_incidence=grad_inc,
        curl_incidence=curl_inc,
        div_incidence=div_inc,
    )


def _grad_incidence(edges, nv):
    ne = len(edges)
    rows = np.repeat(np.arange(ne), 2)
    cols = edges.ravel()
    data = np.tile(np.array([-1, 1], dtype=np.int64), ne)
    return sp.csr_matrix((data, (rows, cols)), shape=(ne, nv))


def _curl_incidence(faces, edge_keys, nv):
    nf = len(faces)
    sub = faces[:, [(0, 1), (0, 2), (1, 2)]]
    keys = sub[..., 0] * nv + sub[..., 1]
    eidx = np.searchsorted(edge_keys, keys.reshape(-1)).reshape(nf, 3)
    rows = np.repeat(np.arange(nf), 3)
    data = np.tile(np.array([1, -1, 1], dtype=np.int64), nf)
    return sp.csr_matrix((data, (rows, eidx.ravel())), shape=(nf, len(edge_keys)))


def _div_incidence(mesh, faces, cell_to_face):
    nc = mesh.num_cells
    verts = mesh.vertices
    signs = np.zeros((nc, 4), dtype=np.int64)
    for k in range(4):
        f = faces[cell_to_face[:, k]]
        pa, pb, pc = verts[f[:, 0]], verts[f[:, 1]], verts[f[:, 2]]
        normal = np.cross(pb - pa, pc - pa)
        opposite = verts[mesh.cells[:, k]]
        outward = np.einsum("ij,ij->i", normal, pa - opposite)
        if np.any(outward == 0):
            raise MeshError("degenerate cell while orienting faces")
        signs[:, k] = np.sign(outward).astype(np.int64)
    rows = np.repeat(np.arange(nc), 4)
    return sp.csr_matrix(
        (signs.ravel(), (rows, cell_to_face.ravel())), shape=(nc, len(faces))
    )


@dataclass
class MeshMetrics:
    h_max: float
    h_min: float
    shape_ratio: float
    volume: float
    num_vertices: int
    num_edges: int
    num_faces: int
    num_cells: int


def mesh_metrics(mesh: Mesh, topology: MeshTopology | None = None) -> MeshMetrics:
    """Diameters, shape regularity (diameter / inradius) and entity counts."""
    if topology is None:
        topology = build_topology(mesh)
    X = mesh.cell_coords
    vol = mesh.volumes
    areas = np.zeros(mesh.num_cells)
    for tri in LOCAL_FACES:
        p0, p1, p2 = X[:, tri[0]], X[:, tri[1]], X[:, tri[2]]
        areas += 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)
    inradius = 3.0 * vol / areas
    diameters = mesh.diameters
    return MeshMetrics(
        h_max=float(diameters.max()),
        h_min=float(diameters.min()),
        shape_ratio=float((diameters / inradius).max()),
        volume=float(vol.sum()),
        num_vertices=mesh.num_vertices,
        num_edges=topology.num_edges,
        num_faces=topology.num_faces,
        num_cells=mesh.num_cells,
    )
