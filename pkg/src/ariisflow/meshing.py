"""Tetrahedral meshes and the internal graded cylinder generator.

Meshes carry reference (initial) and current (deformed) vertex coordinates.
Boundary faces are stored with outward orientation and one tag each.
"""

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

__all__ = [
    "BoundaryTag",
    "TetMesh",
    "MeshError",
    "MeshEntanglementError",
    "generate_cylinder_mesh",
    "cell_diameters",
]

# local face (a, b, c) opposite vertex i, oriented outward for a
# positively oriented tet
_CELL_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])

_GEOM_TOL = 1e-10


class MeshError(Exception):
    pass


class MeshEntanglementError(MeshError):
    def __init__(self, cell_index, message=None):
        self.cell_index = cell_index
        super().__init__(message or f"inverted cell {cell_index}")


class BoundaryTag(IntEnum):
    INLET = 0
    OUTLET = 1
    WALL = 2


def _tet_volumes(vertices, cells):
    e = vertices[cells[:, 1:]] - vertices[cells[:, :1]]
    return np.linalg.det(e) / 6.0


@dataclass
class TetMesh:
    """Unstructured tet mesh with tagged boundary triangles.

    ``vertices`` are the current coordinates; ``reference_vertices`` never
    change after construction.  Coordinates are only updated through
    :meth:`update_vertices` (used by the mesh-motion machinery).
    """

    vertices: np.ndarray          # (n, 3) float64, current coordinates
    cells: np.ndarray             # (m, 4) int
    boundary_faces: np.ndarray    # (k, 3) int, outward-oriented
    boundary_tags: np.ndarray     # (k,) int, BoundaryTag values
    reference_vertices: np.ndarray = field(default=None)  # (n, 3)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        self.boundary_faces = np.ascontiguousarray(self.boundary_faces, dtype=np.int64)
        self.boundary_tags = np.ascontiguousarray(self.boundary_tags, dtype=np.int64)
        if self.reference_vertices is None:
            self.reference_vertices = self.vertices.copy()
        self.reference_vertices = np.ascontiguousarray(self.reference_vertices, dtype=float)
        self.reference_vertices.setflags(write=False)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    def cell_volumes(self, reference=False):
        verts = self.reference_vertices if reference else self.vertices
        return _tet_volumes(verts, self.cells)

    def cell_centroids(self, reference=False):
        verts = self.reference_vertices if reference else self.vertices
        return verts[self.cells].mean(axis=1)

    def boundary_nodes(self, tag=None):
        """Sorted unique vertex ids on the boundary (optionally one tag)."""
        faces = self.boundary_faces
        if tag is not None:
            faces = faces[self.boundary_tags == int(tag)]
        return np.unique(faces)

    def face_area_normals(self, faces=None):
        """Outward area-weighted normals (cross/2) of boundary faces."""
        if faces is None:
            faces = self.boundary_faces
        p = self.vertices[faces]
        return 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    def update_vertices(self, new_vertices):
        """Replace current coordinates; rejects inverted cells."""
        new_vertices = np.ascontiguousarray(new_vertices, dtype=float)
        if new_vertices.shape != self.reference_vertices.shape:
            raise MeshError("coordinate array shape mismatch")
        vols = _tet_volumes(new_vertices, self.cells)
        bad = np.flatnonzero(vols <= 0.0)
        if bad.size:
            raise MeshEntanglementError(int(bad[0]))
        self.vertices = new_vertices

    def validate(self):
        """Check orientation, boundary closure and tag partition."""
        vols = self.cell_volumes()
        bad = np.flatnonzero(vols <= 0.0)
        if bad.size:
            raise MeshEntanglementError(int(bad[0]), f"non-positive volume in cell {bad[0]}")
        uniq, counts, _ = _face_multiplicity(self.cells)
        if counts.max(initial=0) > 2:
            raise MeshError("face shared by more than two cells")
        boundary = uniq[counts == 1]
        tagged = np.sort(self.boundary_faces, axis=1)
        if tagged.shape[0] != np.unique(tagged, axis=0).shape[0]:
            raise MeshError("a face carries more than one tag")
        if tagged.shape[0] != boundary.shape[0] or not np.array_equal(
                np.unique(tagged, axis=0), boundary):
            raise MeshError("tagged faces do not match the mesh boundary "
                            "(untagged or spurious boundary face)")
        if not np.isin(self.boundary_tags, list(BoundaryTag)).all():
            raise MeshError("unknown boundary tag")
        return True


def _face_multiplicity(cells):
    """Unique sorted face keys, their multiplicities, and the oriented
    representative (first occurrence) of each."""
    oriented = cells[:, _CELL_FACES].reshape(-1, 3)
    keys = np.sort(oriented, axis=1)
    uniq, first, counts = np.unique(keys, axis=0, return_index=True, return_counts=True)
    return uniq, counts, oriented[first]


def _boundary_faces_of(cells):
    """Outward-oriented boundary faces (faces owned by exactly one cell)."""
    uniq, counts, rep = _face_multiplicity(cells)
    return np.ascontiguousarray(rep[counts == 1], dtype=np.int64)


# ---------------------------------------------------------------------------
# cylinder generator
# ---------------------------------------------------------------------------


def _disc_points_and_triangles(radius, h_plane, area_compensation=True):
    """Structured triangulation of a disc: center point plus rings.

    With ``area_compensation`` the points are scaled so the outer polygon
    has exactly the disc area pi r^2, which keeps discrete volumes and
    cross-section areas consistent with the analytic cylinder.
    """
    n_rings = max(1, int(round(radius / h_plane)))
    ring_counts = [max(6, int(round(2.0 * np.pi * radius * i / n_rings / h_plane)))
                   for i in range(1, n_rings + 1)]
    pts = [np.zeros((1, 2))]
    starts = [0]
    for i, m in enumerate(ring_counts, start=1):
        r = radius * i / n_rings
        th = 2.0 * np.pi * np.arange(m) / m
        starts.append(starts[-1] + pts[-1].shape[0])
        pts.append(np.column_stack([r * np.cos(th), r * np.sin(th)]))
    points = np.vstack(pts)
    ring_start = starts[1:]

    tris = []
    # innermost ring fans to the center
    m0 = ring_counts[0]
    for k in range(m0):
        tris.append((0, ring_start[0] + k, ring_start[0] + (k + 1) % m0))
    # annulus bands: two-pointer walk by angle
    for i in range(1, n_rings):
        inner, n_in = ring_start[i - 1], ring_counts[i - 1]
        outer, n_out = ring_start[i], ring_counts[i]
        ang_in = 2.0 * np.pi * np.arange(n_in + 1) / n_in
        ang_out = 2.0 * np.pi * np.arange(n_out + 1) / n_out
        a = b = 0
        while a < n_in or b < n_out:
            adv_inner = a < n_in and (b >= n_out or ang_in[a + 1] <= ang_out[b + 1])
            if adv_inner:
                tris.append((inner + a % n_in, outer + b % n_out,
                             inner + (a + 1) % n_in))
                a += 1
            else:
                tris.append((inner + a % n_in, outer + b % n_out,
                             outer + (b + 1) % n_out))
                b += 1
    tris = np.array(tris, dtype=np.int64)
    # orient all triangles counterclockwise
    p = points[tris]
    two_a = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) \
        - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    flip = two_a < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    if area_compensation:
        n_out = ring_counts[-1]
        points *= np.sqrt((2.0 * np.pi / n_out) / np.sin(2.0 * np.pi / n_out))
    return points, tris


def _axial_breakpoints(length, h_min, h_max, band_centers, band_halfwidth, growth):
    """Graded z-planes: spacing h_min inside refinement bands, growing to
    h_max away from them.  Band centers land exactly on planes."""

    def target(z):
        if not band_centers:
            return h_max
        d = min(max(0.0, abs(z - c) - band_halfwidth) for c in band_centers)
        return min(h_max, h_min + (growth - 1.0) * d)

    anchors = sorted({0.0, length, *[c for c in band_centers]})
    zs = [0.0]
    for a, b in zip(anchors[:-1], anchors[1:]):
        # equidistribute in the 1/h density so sizes track the target
        n_sub = 200
        sub = np.linspace(a, b, n_sub + 1)
        dens = np.array([1.0 / target(z) for z in sub])
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(sub))])
        n_layers = max(1, int(round(cum[-1])))
        targets = np.linspace(0.0, cum[-1], n_layers + 1)[1:]
        zs.extend(np.interp(targets, cum, sub).tolist())
    zs = np.array(zs)
    zs[-1] = length
    return zs


def _split_prism(bottom, top):
    """Split one prism into 3 tets with globally consistent diagonals.

    ``bottom``/``top`` are the 3 vertex ids of each face, aligned so top[i]
    sits above bottom[i].  Each quad face gets the diagonal through its
    smallest vertex id, so neighboring prisms always agree.
    """
    v = list(bottom) + list(top)
    imin = int(np.argmin(v))
    if imin < 3:
        r = imin
        w = [v[r], v[(r + 1) % 3], v[(r + 2) % 3],
             v[r + 3], v[(r + 1) % 3 + 3], v[(r + 2) % 3 + 3]]
    else:
        # smallest id on the top face: flip the prism, reversing the winding
        r = imin - 3
        w = [v[r + 3], v[(r + 2) % 3 + 3], v[(r + 1) % 3 + 3],
             v[r], v[(r + 2) % 3], v[(r + 1) % 3]]
    if min(w[1], w[5]) < min(w[2], w[4]):
        tets = [(w[0], w[1], w[2], w[5]), (w[0], w[1], w[5], w[4]), (w[0], w[4], w[5], w[3])]
    else:
        tets = [(w[0], w[1], w[2], w[4]), (w[0], w[4], w[2], w[5]), (w[0], w[4], w[5], w[3])]
    return tets


def generate_cylinder_mesh(radius, total_length, h_min, h_max=None, h_plane=None,
                           band_centers=(), band_halfwidth=0.003, growth=1.8,
                           area_compensation=True):
    """Conforming tet mesh of a cylinder along the x3 axis, base at x3 = 0.

    Axial layer spacing is ``h_min`` inside ``band_halfwidth`` of each band
    center and grows linearly to ``h_max`` away from the bands.  The
    in-plane target size defaults to 1.2 * h_min (capped at 0.8 * h_max).
    Inlet tag on the x3 = 0 disc, outlet at x3 = total_length, wall on the
    lateral surface.
    """
    if radius <= 0 or total_length <= 0:
        raise ValueError("radius and total_length must be positive")
    if h_max is None:
        h_max = h_min
    if not (0 < h_min <= h_max):
        raise ValueError("need 0 < h_min <= h_max")
    for c in band_centers:
        if not (0.0 <= c <= total_length):
            raise ValueError(f"grading band center {c} outside [0, {total_length}]")
    if h_plane is None:
        h_plane = min(1.2 * h_min, 0.8 * h_max)

    pts2d, tris = _disc_points_and_triangles(radius, h_plane, area_compensation)
    zs = _axial_breakpoints(total_length, h_min, h_max, tuple(band_centers),
                            band_halfwidth, growth)
    n_disc = pts2d.shape[0]
    n_planes = zs.size

    vertices = np.empty((n_disc * n_planes, 3))
    for j, z in enumerate(zs):
        vertices[j * n_disc:(j + 1) * n_disc, :2] = pts2d
        vertices[j * n_disc:(j + 1) * n_disc, 2] = z

    cells = []
    for j in range(n_planes - 1):
        lo = j * n_disc
        hi = (j + 1) * n_disc
        for t in tris:
            bottom = (lo + t[0], lo + t[1], lo + t[2])
            top = (hi + t[0], hi + t[1], hi + t[2])
            cells.extend(_split_prism(bottom, top))
    cells = np.array(cells, dtype=np.int64)

    # enforce positive orientation
    vols = _tet_volumes(vertices, cells)
    flip = vols < 0
    cells[flip] = cells[flip][:, [0, 1, 3, 2]]
    vols = _tet_volumes(vertices, cells)
    if np.any(vols <= 0):
        raise MeshError("degenerate cell in generated mesh")

    faces = _boundary_faces_of(cells)
    fz = vertices[faces][:, :, 2]
    tags = np.full(faces.shape[0], int(BoundaryTag.WALL), dtype=np.int64)
    tags[np.all(np.abs(fz) < _GEOM_TOL, axis=1)] = int(BoundaryTag.INLET)
    tags[np.all(np.abs(fz - total_length) < _GEOM_TOL, axis=1)] = int(BoundaryTag.OUTLET)

    mesh = TetMesh(vertices, cells, faces, tags)
    mesh.validate()
    return mesh


def cell_diameters(mesh):
    """Per-cell diameter (longest edge), with the global h_min and h_max."""
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    p = mesh.vertices[mesh.cells]
    d = np.stack([np.linalg.norm(p[:, i] - p[:, j], axis=1) for i, j in pairs], axis=1)
    diam = d.max(axis=1)
    return diam, float(diam.min()), float(diam.max())
