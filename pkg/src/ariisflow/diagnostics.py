"""Scalar probes, the ventricular pressure estimate, the iso-phase error
metric, plane-section fluxes, and time-series / field export."""

from dataclasses import dataclass, field

import numpy as np

from . import mesh_io
from .valves import ValveState, band_resistive_integral, smoothed_delta, signed_distance, valve_state

__all__ = [
    "CompartmentSpec",
    "TimeSeriesLog",
    "compartment_cells",
    "classify_cells",
    "compartment_pressure",
    "ventricular_volume",
    "pressure_estimate",
    "relative_pressure_error",
    "plane_section_integral",
    "valve_flux",
    "boundary_flux",
    "export_csv",
    "read_csv",
    "export_vtu",
]


@dataclass(frozen=True)
class CompartmentSpec:
    """Cell membership for one of LA / LV / AA, either an axial range on the
    reference cylinder or an explicit cell set."""

    compartment_id: str
    axial_range: tuple = None       # (z0, z1) on reference coordinates
    cell_set: np.ndarray = None

    def __post_init__(self):
        if (self.axial_range is None) == (self.cell_set is None):
            raise ValueError("give exactly one of axial_range or cell_set")


def compartment_cells(mesh, spec):
    if spec.cell_set is not None:
        return np.asarray(spec.cell_set, dtype=np.int64)
    z = mesh.cell_centroids(reference=True)[:, 2]
    z0, z1 = spec.axial_range
    return np.flatnonzero((z >= z0) & (z < z1))


def classify_cells(mesh, mv, av):
    """LV / LA / AA cell sets from the signed distance of current centroids
    to the two (possibly displaced) valve planes."""
    c = mesh.cell_centroids()
    phi_mv = signed_distance(mv, c)
    phi_av = signed_distance(av, c)
    lv = np.flatnonzero((phi_mv < 0.0) & (phi_av < 0.0))
    la = np.flatnonzero(phi_mv >= 0.0)
    aa = np.flatnonzero(phi_av >= 0.0)
    return {"LA": la, "LV": lv, "AA": aa}


def _band_cell_mask(mesh, valves, t=None):
    """Mask of cells with any vertex inside a closed valve's delta band."""
    mask = np.zeros(mesh.n_cells, dtype=bool)
    for v in valves:
        if t is not None and not v.is_closed(t):
            continue
        phi = signed_distance(v, mesh.vertices)[mesh.cells]
        mask |= (np.abs(phi) < v.half_thickness).any(axis=1)
    return mask


def compartment_pressure(p, mesh, cells_idx, closed_valves=(), t=None):
    """Volume-weighted average of the nodal pressure over a cell set,
    excluding cells that intersect any closed valve band."""
    cells_idx = np.asarray(cells_idx, dtype=np.int64)
    if closed_valves:
        mask = _band_cell_mask(mesh, closed_valves, t)
        cells_idx = cells_idx[~mask[cells_idx]]
    if cells_idx.size == 0:
        raise ValueError("empty compartment region after band exclusion")
    vols = mesh.cell_volumes()[cells_idx]
    p_cell = np.asarray(p)[mesh.cells[cells_idx]].mean(axis=1)
    return float(np.dot(vols, p_cell) / vols.sum())


def ventricular_volume(mesh, mv, av):
    """Current volume of the ventricular compartment; cells are attributed
    by the signed distance of their centroid to the valve planes."""
    lv = classify_cells(mesh, mv, av)["LV"]
    return float(mesh.cell_volumes()[lv].sum())


def pressure_estimate(state, valves, p_la, p_aa, mesh, order=4):
    """Area-weighted chamber pressure estimate from the external pressures
    and the band-resistive integrals; defined only with every valve closed."""
    for v in valves:
        if valve_state(v, state.t) != ValveState.CLOSED:
            raise ValueError("estimate undefined outside isovolumetric phase")
    ext = {"MV": p_la, "AV": p_aa}
    u_rel = state.u - state.u_ale
    num = 0.0
    den = 0.0
    for v in valves:
        num += v.area * ext[v.valve_id]
        num += band_resistive_integral(u_rel, mesh, v, order)
        den += v.area
    return num / den


def relative_pressure_error(p_lv, p_star, chi):
    """max |p_lv - p*| over iso samples divided by max |p*| there."""
    p_lv = np.asarray(p_lv, dtype=float)
    p_star = np.asarray(p_star, dtype=float)
    chi = np.asarray(chi)
    if not (p_lv.shape == p_star.shape == chi.shape):
        raise ValueError("series must be aligned")
    iso = chi >= 0.5
    if not iso.any():
        raise ValueError("empty isovolumetric window")
    denom = np.abs(p_star[iso]).max()
    if denom == 0.0:
        raise ValueError("reference pressure is identically zero on the window")
    return float(np.abs(p_lv[iso] - p_star[iso]).max() / denom)


# ---------------------------------------------------------------------------
# plane-section and boundary fluxes
# ---------------------------------------------------------------------------


_TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])


def _triangle_flux(pts, vals):
    """Sum of area * mean(vals) over triangles given as (k, 3, 3) points."""
    if pts.shape[0] == 0:
        return 0.0
    areas = 0.5 * np.linalg.norm(
        np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0]), axis=1)
    return float(np.dot(areas, vals.mean(axis=1)))


def plane_section_integral(mesh, plane_point, normal, nodal_field):
    """Integral of (field . n) over the triangulated plane-mesh intersection.

    The section is rebuilt per call by marching the tets that straddle the
    plane; exact for P1 fields.
    """
    normal = np.asarray(normal, float)
    normal = normal / np.linalg.norm(normal)
    phi = (mesh.vertices - np.asarray(plane_point, float)) @ normal
    phi = np.where(phi == 0.0, 1e-300, phi)
    fn = np.asarray(nodal_field) @ normal

    cphi = phi[mesh.cells]
    straddle = (cphi.min(axis=1) < 0.0) & (cphi.max(axis=1) > 0.0)
    cells = mesh.cells[straddle]
    if cells.shape[0] == 0:
        return 0.0
    pv = phi[cells]                                           # (m, 4)
    pi, pj = pv[:, _TET_EDGES[:, 0]], pv[:, _TET_EDGES[:, 1]]  # (m, 6)
    crossed = pi * pj < 0.0
    t = np.where(crossed, pi / (pi - pj), 0.0)
    vi = mesh.vertices[cells]                                  # (m, 4, 3)
    xi, xj = vi[:, _TET_EDGES[:, 0]], vi[:, _TET_EDGES[:, 1]]  # (m, 6, 3)
    pts = xi + t[:, :, None] * (xj - xi)
    fv = fn[cells]
    fi, fj = fv[:, _TET_EDGES[:, 0]], fv[:, _TET_EDGES[:, 1]]
    vals = fi + t * (fj - fi)

    # compact the crossed-edge entries to the front, preserving edge order
    order = np.argsort(~crossed, axis=1, kind="stable")
    pts = np.take_along_axis(pts, order[:, :, None], axis=1)
    vals = np.take_along_axis(vals, order, axis=1)
    counts = crossed.sum(axis=1)

    total = 0.0
    tri = counts == 3
    total += _triangle_flux(pts[tri, :3], vals[tri, :3])

    quad = counts == 4
    if quad.any():
        qp, qv = pts[quad, :4], vals[quad, :4]
        center = qp.mean(axis=1, keepdims=True)
        rel = qp - center
        ref = rel[:, 0] / np.linalg.norm(rel[:, 0], axis=1, keepdims=True)
        t2 = np.cross(np.broadcast_to(normal, ref.shape), ref)
        ang = np.arctan2(np.einsum("mkd,md->mk", rel, t2),
                         np.einsum("mkd,md->mk", rel, ref))
        idx = np.argsort(ang, axis=1)
        qp = np.take_along_axis(qp, idx[:, :, None], axis=1)
        qv = np.take_along_axis(qv, idx, axis=1)
        total += _triangle_flux(qp[:, [0, 1, 2]], qv[:, [0, 1, 2]])
        total += _triangle_flux(qp[:, [0, 2, 3]], qv[:, [0, 2, 3]])
    return total


def valve_flux(state, valve, mesh):
    """Volumetric flow rate of u - u_ALE through the valve plane [m^3/s]."""
    return plane_section_integral(mesh, valve.plane_point, valve.normal,
                                  state.u - state.u_ale)


def boundary_flux(mesh, nodal_field, tag=None):
    """Integral of (field . outward normal) over tagged boundary faces."""
    faces = mesh.boundary_faces
    if tag is not None:
        faces = faces[mesh.boundary_tags == int(tag)]
    n_area = mesh.face_area_normals(faces)
    f = np.asarray(nodal_field)[faces]            # (k, 3, 3)
    return float(np.einsum("kvd,kd->", f, n_area) / 3.0)


# ---------------------------------------------------------------------------
# time-series log and export
# ---------------------------------------------------------------------------


LOG_COLUMNS = [
    "t", "p_LA", "p_LV", "p_LV_mean", "p_AA", "p_star", "chi_iso",
    "mv_closed", "av_closed", "C_MV", "C_AV", "V_LV",
    "Q_MV", "Q_AV", "res_MV", "res_AV", "p_est",
]


@dataclass
class TimeSeriesLog:
    """Per-step scalar diagnostics, one record per accepted step (SI units)."""

    columns: tuple = tuple(LOG_COLUMNS)
    rows: list = field(default_factory=list)

    def append(self, record):
        missing = [c for c in self.columns if c not in record]
        if missing:
            raise ValueError(f"record missing columns {missing}")
        row = [float(record[c]) for c in self.columns]
        if self.rows and row[0] <= self.rows[-1][0]:
            raise ValueError("log times must be strictly increasing")
        self.rows.append(row)

    def column(self, name):
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def __len__(self):
        return len(self.rows)


def export_csv(log, path):
    lines = [",".join(log.columns)]
    for row in log.rows:
        lines.append(",".join(f"{v:.17g}" for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        body = fh.read().strip()
    log = TimeSeriesLog(columns=tuple(header))
    if body:
        data = np.array([[float(v) for v in line.split(",")]
                         for line in body.splitlines()])
        log.rows = [list(row) for row in data]
    return log


def export_vtu(state, mesh, path, valves=(), binary=False):
    """Field snapshot: velocity, pressure, displacement and the delta-band
    indicator (sum of the valve deltas at the nodes)."""
    indicator = np.zeros(mesh.n_vertices)
    for v in valves:
        indicator += smoothed_delta(signed_distance(v, mesh.vertices), v.half_thickness)
    mesh_io.write_vtu(path, mesh, point_data={
        "velocity": state.u,
        "pressure": state.p,
        "displacement": state.d,
        "valve_band": indicator,
    }, binary=binary)
