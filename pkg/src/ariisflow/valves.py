"""Planar immersed valves: signed distance, smoothed delta band, state
schedules and band-integrated quantities.

A valve is a plane clipped implicitly by the domain.  Its normal points
away from the ventricular compartment, its half-thickness sets the support
of the cosine delta bump, and its resistance scales the penalty force.
"""

import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .meshing import BoundaryTag
from .quadrature import tet_rule

__all__ = [
    "ValveState",
    "ValveSchedule",
    "ImmersedValve",
    "smoothed_delta",
    "signed_distance",
    "valve_state",
    "chi_iso",
    "band_cells",
    "discrete_band_mass",
    "band_resistive_integral",
]


class ValveState(Enum):
    OPEN = "open"
    CLOSED = "closed"


@dataclass(frozen=True)
class ValveSchedule:
    """Initial state plus an ordered list of (time, new_state) events.

    An event takes effect at the first time level >= its event time.
    """

    initial_state: ValveState = ValveState.CLOSED
    events: tuple = ()

    def __post_init__(self):
        events = tuple((float(t), ValveState(s)) for t, s in self.events)
        object.__setattr__(self, "events", events)
        prev_t = -np.inf
        prev_s = self.initial_state
        for t, s in events:
            if t <= prev_t:
                raise ValueError("event times must be strictly increasing")
            if s == prev_s:
                raise ValueError("consecutive schedule states must alternate")
            prev_t, prev_s = t, s

    def state_at(self, t):
        state = self.initial_state
        for et, es in self.events:
            if et <= t:
                state = es
            else:
                break
        return state


@dataclass(frozen=True)
class ImmersedValve:
    """Planar resistive surface with a smoothed band of half-thickness eps."""

    valve_id: str                      # "MV" or "AV"
    plane_point: np.ndarray            # (3,) a point on the plane [m]
    normal: np.ndarray                 # (3,) unit, outward w.r.t. the ventricle
    half_thickness: float              # eps_k [m]
    resistance: float                  # R_k [kg/(m s)]
    area: float = None                 # |Gamma_k| [m^2]; None until resolved
    schedule: ValveSchedule = field(default_factory=ValveSchedule)

    def __post_init__(self):
        p = np.asarray(self.plane_point, dtype=float).reshape(3)
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0.0:
            raise ValueError("valve normal must be nonzero")
        object.__setattr__(self, "plane_point", p)
        object.__setattr__(self, "normal", n / norm)
        if self.half_thickness <= 0.0:
            raise ValueError("half_thickness must be positive")
        if self.area is not None and self.area <= 0.0:
            raise ValueError("valve area must be positive")

    def displaced(self, offset):
        """Copy of the valve with the plane translated by ``offset``."""
        return replace(self, plane_point=self.plane_point + np.asarray(offset, float))

    def is_closed(self, t):
        return self.schedule.state_at(t) == ValveState.CLOSED


def smoothed_delta(phi, eps):
    """Cosine bump of half-width eps with unit 1D mass, peak 1/eps at 0."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    phi = np.asarray(phi, dtype=float)
    out = np.zeros_like(phi)
    inside = np.abs(phi) <= eps
    out[inside] = (1.0 + np.cos(np.pi * phi[inside] / eps)) / (2.0 * eps)
    if out.ndim == 0:
        return float(out)
    return out


def signed_distance(valve, x):
    """(x - plane_point) . n, positive on the normal side of the plane."""
    x = np.asarray(x, dtype=float)
    return (x - valve.plane_point) @ valve.normal


def valve_state(valve, t):
    return valve.schedule.state_at(t)


def chi_iso(valves, t):
    """1 iff every valve is closed at t, else 0."""
    return 1 if all(v.is_closed(t) for v in valves) else 0


def band_cells(valve, mesh):
    """Indices of cells whose vertex phi-range intersects the delta band."""
    phi = signed_distance(valve, mesh.vertices)[mesh.cells]
    return np.flatnonzero((phi.min(axis=1) <= valve.half_thickness)
                          & (phi.max(axis=1) >= -valve.half_thickness))


def _warn_if_clipped(valve, mesh):
    faces = mesh.boundary_faces
    open_bc = (mesh.boundary_tags == int(BoundaryTag.INLET)) \
        | (mesh.boundary_tags == int(BoundaryTag.OUTLET))
    if not open_bc.any():
        return
    phi = signed_distance(valve, mesh.vertices[np.unique(faces[open_bc])])
    if np.any(np.abs(phi) < valve.half_thickness):
        warnings.warn(
            f"valve {valve.valve_id}: delta band is clipped by an inlet/outlet "
            "boundary; the band mass will not represent the full section",
            stacklevel=2,
        )


def discrete_band_mass(valve, mesh, order=4):
    """Mesh quadrature of the band integral of delta, approximating the
    valve section area |Gamma_k|."""
    _warn_if_clipped(valve, mesh)
    idx = band_cells(valve, mesh)
    if idx.size == 0:
        return 0.0
    bary, w = tet_rule(order)
    verts = mesh.vertices[mesh.cells[idx]]          # (mb, 4, 3)
    vols = mesh.cell_volumes()[idx]
    xq = np.einsum("qa,mad->mqd", bary, verts)       # (mb, q, 3)
    phi = (xq - valve.plane_point) @ valve.normal
    dq = smoothed_delta(phi, valve.half_thickness)
    return float(np.einsum("m,q,mq->", vols, w, dq))


def band_resistive_integral(u_rel, mesh, valve, order=4):
    """Band quadrature of (R/eps) * delta * (u_rel . n) for a nodal field
    ``u_rel`` (the fluid velocity relative to the mesh and surface)."""
    idx = band_cells(valve, mesh)
    if idx.size == 0:
        return 0.0
    bary, w = tet_rule(order)
    cells = mesh.cells[idx]
    verts = mesh.vertices[cells]
    vols = mesh.cell_volumes()[idx]
    xq = np.einsum("qa,mad->mqd", bary, verts)
    phi = (xq - valve.plane_point) @ valve.normal
    dq = smoothed_delta(phi, valve.half_thickness)
    un_vertex = np.asarray(u_rel)[cells] @ valve.normal       # (mb, 4)
    un = np.einsum("qa,ma->mq", bary, un_vertex)
    coeff = valve.resistance / valve.half_thickness
    return coeff * float(np.einsum("m,q,mq,mq->", vols, w, dq, un))
