"""Mesh motion: prescribed boundary displacement laws, the harmonic lifting
solve, and the discrete ALE velocity.

Both benchmark laws act on a cylinder along x3 split into atrial /
ventricular / aortic compartments.  The lifting problem is a componentwise
P1 Laplace solve on the reference mesh with Dirichlet data on the whole
boundary; the stiffness factorization is cached since the reference mesh
never changes.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .fem import p1_geometry
from .meshing import MeshEntanglementError

__all__ = [
    "TimeTable",
    "Compartments",
    "RadialPulseLaw",
    "ShorteningLaw",
    "StaticLaw",
    "volume_match_coefficient",
    "LiftingSolver",
    "solve_lifting",
    "ale_velocity",
    "move_mesh",
]


@dataclass(frozen=True)
class TimeTable:
    """Piecewise-linear table of a scalar over time; constant outside the
    breakpoints."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if t.size != v.size or t.size == 0:
            raise ValueError("times and values must have equal nonzero length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("table times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __call__(self, t):
        return np.interp(t, self.times, self.values)

    @classmethod
    def constant(cls, value):
        return cls(np.array([0.0]), np.array([float(value)]))

    @classmethod
    def from_pairs(cls, pairs):
        arr = np.asarray(pairs, dtype=float)
        return cls(arr[:, 0], arr[:, 1])


@dataclass(frozen=True)
class Compartments:
    """Axial split of the reference cylinder into LA / LV / AA."""

    radius: float
    length_la: float
    length_lv: float
    total_length: float

    @property
    def z_mv(self):
        return self.length_la

    @property
    def z_av(self):
        return self.length_la + self.length_lv


def _unit_radial(points):
    """In-plane unit radial direction; zero on the axis."""
    r = np.hypot(points[:, 0], points[:, 1])
    e = np.zeros_like(points)
    off = r > 0.0
    e[off, 0] = points[off, 0] / r[off]
    e[off, 1] = points[off, 1] / r[off]
    return e


@dataclass(frozen=True)
class StaticLaw:
    """No wall motion."""

    def boundary_displacement(self, points, t):
        return np.zeros_like(np.asarray(points, dtype=float))

    def valve_plane_offset(self, valve_id, t):
        return np.zeros(3)


@dataclass(frozen=True)
class RadialPulseLaw:
    """Radial squeeze of the ventricular compartment with a Gaussian axial
    envelope: d = w_bar * A(t) * e_r * exp(-|x3 - L/2|^2 / (2 sigma^2)) for
    x3 inside the ventricular band, zero elsewhere.
    """

    compartments: Compartments
    amplitude: TimeTable
    w_bar: float = 4.6e-4
    sigma: float = 0.015

    def boundary_displacement(self, points, t):
        points = np.asarray(points, dtype=float)
        c = self.compartments
        z = points[:, 2]
        in_lv = (z >= c.z_mv) & (z < c.z_av)
        envelope = np.exp(-np.abs(z - 0.5 * c.total_length) ** 2 / (2.0 * self.sigma ** 2))
        mag = self.w_bar * float(self.amplitude(t)) * envelope * in_lv
        return _unit_radial(points) * mag[:, None]

    def valve_plane_offset(self, valve_id, t):
        return np.zeros(3)


def volume_match_coefficient(L_star, V_star, R_c):
    """Bulge amplitude c making the body of revolution with radius
    R_c + c*sin(pi s / L*) enclose exactly V* over length L*.

    Solves pi c^2 L*/2 + 4 R_c c L* + (pi R_c^2 L* - V*) = 0 for the root
    that vanishes at the nominal volume V* = pi R_c^2 L*.
    """
    if L_star <= 0 or V_star <= 0 or R_c <= 0:
        raise ValueError("L_star, V_star and R_c must be positive")
    disc = 16.0 * R_c ** 2 * L_star ** 2 \
        - 2.0 * np.pi * L_star * (np.pi * L_star * R_c ** 2 - V_star)
    if disc < 0.0:
        raise ValueError("unreachable volume for given length")
    return -4.0 * R_c / np.pi + np.sqrt(disc) / (np.pi * L_star)


@dataclass(frozen=True)
class ShorteningLaw:
    """Ventricular shortening: the LV wall follows a sinusoidal bulge whose
    amplitude matches a prescribed volume V*(t) at prescribed length L*(t);
    the aortic compartment translates rigidly by the length change.
    """

    compartments: Compartments
    length_lv_star: TimeTable      # L*(t) [m]
    volume_lv_star: TimeTable      # V*(t) [m^3]

    def boundary_displacement(self, points, t):
        points = np.asarray(points, dtype=float)
        c = self.compartments
        L_star = float(self.length_lv_star(t))
        V_star = float(self.volume_lv_star(t))
        bulge = volume_match_coefficient(L_star, V_star, c.radius)
        stretch = L_star - c.length_lv

        z = points[:, 2]
        d = np.zeros_like(points)
        in_lv = (z >= c.z_mv) & (z < c.z_av)
        in_aa = z >= c.z_av

        s = (z[in_lv] - c.z_mv) / c.length_lv
        # radial: relative stretch of the in-plane coordinates, so mesh nodes
        # slightly off the nominal radius (polygonal wall) stay put at c = 0
        factor = (c.radius + bulge * np.sin(np.pi * s)) / c.radius - 1.0
        d[in_lv, 0] = factor * points[in_lv, 0]
        d[in_lv, 1] = factor * points[in_lv, 1]
        d[in_lv, 2] = s * stretch
        d[in_aa, 2] = stretch
        return d

    def valve_plane_offset(self, valve_id, t):
        if valve_id == "AV":
            shift = float(self.length_lv_star(t)) - self.compartments.length_lv
            return np.array([0.0, 0.0, shift])
        return np.zeros(3)


# ---------------------------------------------------------------------------
# lifting
# ---------------------------------------------------------------------------


def _stiffness_matrix(vertices, cells):
    vols, grads = p1_geometry(vertices, cells)
    local = np.einsum("m,mad,mbd->mab", vols, grads, grads)
    rows = np.repeat(cells, 4, axis=1).ravel()
    cols = np.tile(cells, (1, 4)).ravel()
    n = vertices.shape[0]
    return sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsc()


class LiftingSolver:
    """Componentwise harmonic extension on the reference mesh with Dirichlet
    data on every boundary node; the interior factorization is reused."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.boundary = mesh.boundary_nodes()
        if self.boundary.size == 0:
            raise ValueError("lifting problem has no Dirichlet nodes")
        n = mesh.n_vertices
        self.interior = np.setdiff1d(np.arange(n), self.boundary)
        K = _stiffness_matrix(mesh.reference_vertices, mesh.cells)
        self._K_ib = K[self.interior][:, self.boundary]
        self._lu = splu(K[self.interior][:, self.interior].tocsc())

    def solve(self, d_boundary):
        """d_boundary: (n_boundary, 3) values aligned with boundary node ids."""
        d_boundary = np.asarray(d_boundary, dtype=float)
        if d_boundary.shape != (self.boundary.size, 3):
            raise ValueError("boundary displacement must be (n_boundary, 3)")
        n = self.mesh.n_vertices
        d = np.zeros((n, 3))
        d[self.boundary] = d_boundary
        if self.interior.size:
            rhs = -self._K_ib @ d_boundary
            d[self.interior] = self._lu.solve(rhs)
        return d


def solve_lifting(mesh, d_boundary):
    """One-off harmonic extension (see :class:`LiftingSolver`)."""
    return LiftingSolver(mesh).solve(d_boundary)


def ale_velocity(d_now, d_prev, dt):
    """First-order backward difference of the displacement field."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return (np.asarray(d_now, float) - np.asarray(d_prev, float)) / dt


def move_mesh(mesh, d):
    """Set current coordinates to reference + d; rejects inverted cells."""
    d = np.asarray(d, dtype=float)
    try:
        mesh.update_vertices(mesh.reference_vertices + d)
    except MeshEntanglementError:
        raise
    return mesh
