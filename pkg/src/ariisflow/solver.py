"""Stabilized P1-P1 finite-element discretization of the incompressible
Navier-Stokes equations on a moving mesh, with resistive immersed valve
bands and the isovolumetric pressure-correction load.

Time discretization is backward Euler with a semi-implicit convective term
(advecting velocity frozen at the previous step, relative to the mesh), so
each step costs one monolithic velocity-pressure solve.  SUPG/PSPG
stabilization uses an element tau combining time-step, convective, viscous
and band-reaction contributions; including the reaction keeps the
stabilization bounded inside the valve bands where the penalty dominates.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, gmres, spilu

from . import diagnostics
from .ale import LiftingSolver, ale_velocity, move_mesh
from .fem import FixedPattern, p1_geometry
from .meshing import BoundaryTag, MeshEntanglementError, cell_diameters
from .quadrature import tet_rule
from .valves import band_cells, band_resistive_integral, chi_iso, smoothed_delta

__all__ = [
    "FluidParams",
    "KrylovParams",
    "StabilizationParams",
    "PressureBCs",
    "AriisSettings",
    "ProbeSpec",
    "FluidState",
    "SolverError",
    "resistive_integral",
    "correction_coefficient",
    "correction_coefficients",
    "assemble_step_system",
    "solve_linear",
    "Simulation",
]

MMHG = 133.322  # Pa per mmHg


class SolverError(RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class KrylovParams:
    rtol: float = 1e-8
    max_iter: int = 600
    restart: int = 120
    ilu_drop_tol: float = 1e-5
    ilu_fill_factor: float = 20.0
    # reuse the incomplete factorization across steps; refresh when a solve
    # needs more than this many iterations or the valve layout changes
    refresh_iterations: int = 60


@dataclass(frozen=True)
class StabilizationParams:
    c_time: float = 2.0
    c_conv: float = 2.0
    c_visc: float = 4.0
    c_reaction: float = 1.0


@dataclass(frozen=True)
class FluidParams:
    rho: float = 1.06e3
    mu: float = 3.5e-3
    dt: float = 1e-3
    t_end: float = 0.2
    krylov: KrylovParams = field(default_factory=KrylovParams)
    stabilization: StabilizationParams = field(default_factory=StabilizationParams)
    band_quadrature_order: int = 4

    def __post_init__(self):
        if min(self.rho, self.mu, self.dt, self.t_end) <= 0:
            raise ValueError("rho, mu, dt and t_end must be positive")


@dataclass(frozen=True)
class PressureBCs:
    """Neumann pressure tables per open boundary; the wall is Dirichlet with
    the wall material velocity."""

    inlet: object   # TimeTable [Pa]
    outlet: object  # TimeTable [Pa]


@dataclass(frozen=True)
class AriisSettings:
    enabled: bool = False
    p_star: object = None                 # TimeTable [Pa]
    ext_pressure_mode: str = "boundary"   # "boundary" | "compartment"
    use_discrete_band_area: bool = False

    def __post_init__(self):
        if self.enabled and self.p_star is None:
            raise ValueError("p_star table required when the correction is enabled")
        if self.ext_pressure_mode not in ("boundary", "compartment"):
            raise ValueError("ext_pressure_mode must be 'boundary' or 'compartment'")


@dataclass(frozen=True)
class ProbeSpec:
    """Control volume for the ventricular pressure probe: a sphere on the
    axis, offset downwind of the mitral band by a number of band widths."""

    radius: float
    offset_bandwidths: float = 1.0


@dataclass
class FluidState:
    u: np.ndarray        # (n, 3) velocity [m/s]
    p: np.ndarray        # (n,) pressure [Pa]
    t: float
    d: np.ndarray        # (n, 3) mesh displacement [m]
    u_ale: np.ndarray    # (n, 3) mesh velocity [m/s]

    @classmethod
    def rest(cls, n):
        return cls(np.zeros((n, 3)), np.zeros(n), 0.0, np.zeros((n, 3)), np.zeros((n, 3)))

    def check_finite(self):
        for name in ("u", "p", "d", "u_ale"):
            if not np.isfinite(getattr(self, name)).all():
                raise SolverError(f"non-finite values in field '{name}' at t = {self.t}")


def resistive_integral(state, valve, mesh, order=4):
    """Band integral of the penalty force component along the valve normal,
    evaluated at the supplied state [Pa m^2]."""
    return band_resistive_integral(state.u - state.u_ale, mesh, valve, order)


def correction_coefficient(p_star_t, p_ext_k, resistive_sum, total_area):
    """Per-valve corrective amplitude from the target pressure, the external
    compartment pressure and the summed band-resistive integrals [Pa]."""
    return p_star_t - p_ext_k - resistive_sum / total_area


def correction_coefficients(state_prev, mesh, closed_valves, p_star_t, p_ext, order=4):
    """Corrective amplitudes for every closed valve (explicit evaluation at
    the previous step's state).  ``p_ext`` maps valve id to its external
    pressure."""
    total_area = sum(v.area for v in closed_valves)
    res_sum = sum(resistive_integral(state_prev, v, mesh, order) for v in closed_valves)
    return {
        v.valve_id: correction_coefficient(p_star_t, p_ext[v.valve_id], res_sum, total_area)
        for v in closed_valves
    }


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


class _Workspace:
    """Per-mesh assembly cache: dof map, frozen sparsity, edge pairs."""

    def __init__(self, mesh):
        cells = mesh.cells
        m = cells.shape[0]
        self.gdof = (4 * cells[:, :, None] + np.arange(4)).reshape(m, 16)
        rows = np.repeat(self.gdof, 16, axis=1)
        cols = np.tile(self.gdof, (1, 16))
        self.ndof = 4 * mesh.n_vertices
        self.pattern = FixedPattern(rows, cols, (self.ndof, self.ndof))
        self.wall_nodes = mesh.boundary_nodes(BoundaryTag.WALL)
        self.open_faces = {}
        for tag in (BoundaryTag.INLET, BoundaryTag.OUTLET):
            sel = mesh.boundary_tags == int(tag)
            self.open_faces[tag] = mesh.boundary_faces[sel]


def _cell_h(verts):
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    return np.max(np.stack([np.linalg.norm(verts[:, i] - verts[:, j], axis=1)
                            for i, j in pairs], axis=1), axis=1)


def assemble_step_system(state_prev, mesh, u_ale, valves, ariis_coeffs, bcs_values,
                         params, workspace=None):
    """Assemble the monolithic linear system for one implicit step.

    ``valves`` is a sequence of (valve, closed) pairs at the step time;
    ``ariis_coeffs`` maps valve ids to corrective amplitudes (empty when the
    correction is off or the step is not isovolumetric); ``bcs_values`` is a
    dict with scalar 'inlet' / 'outlet' pressures [Pa] and the (n, 3) array
    'wall_velocity'.  Returns (A, b, workspace).
    """
    if workspace is None:
        workspace = _Workspace(mesh)
    ws = workspace
    rho, mu, dt = params.rho, params.mu, params.dt
    stab = params.stabilization

    verts = mesh.vertices
    cells = mesh.cells
    m = cells.shape[0]
    V, G = p1_geometry(verts, cells)
    E = verts[cells]
    h = _cell_h(E)

    Uc = state_prev.u[cells]                     # (m, 4, 3)
    ALEc = u_ale[cells]
    Wc = Uc - ALEc
    s = np.einsum("mcd,mad->mca", Wc, G)         # w_c . grad(lambda_a)
    Ssum = s.sum(axis=1)                         # (m, 4)
    SU = Uc.sum(axis=1)                          # (m, 3)
    wbar = np.linalg.norm(Wc.mean(axis=1), axis=1)

    # band quadrature data for every closed valve
    bary, wq = tet_rule(params.band_quadrature_order)
    closed = [v for v, closed_flag in valves if closed_flag]
    band_data = []
    sigma_cell = np.zeros(m)
    for v in closed:
        idx = band_cells(v, mesh)
        if idx.size == 0:
            continue
        xq = np.einsum("qa,mad->mqd", bary, E[idx])
        phi = (xq - v.plane_point) @ v.normal
        dq = smoothed_delta(phi, v.half_thickness)
        sq = dq * (v.resistance / v.half_thickness)
        band_data.append((v, idx, dq, sq))
        sigma_cell[idx] += sq @ wq

    tau = 1.0 / np.sqrt(
        (stab.c_time * rho / dt) ** 2
        + (stab.c_conv * rho * wbar / h) ** 2
        + (stab.c_visc * mu / h ** 2) ** 2
        + (stab.c_reaction * sigma_cell) ** 2
    )

    V20 = V / 20.0
    V4 = V / 4.0
    gg = np.einsum("mad,mbd->mab", G, G)

    # velocity-velocity, component-diagonal part
    eye4 = np.eye(4)
    sTs = np.einsum("mca,mcb->mab", s, s)
    K1 = (rho / dt) * V20[:, None, None] * (1.0 + eye4) \
        + rho * V20[:, None, None] * (Ssum[:, None, :] + s) \
        + mu * V[:, None, None] * gg \
        + (tau * rho * rho * V20)[:, None, None] * (
            (Ssum[:, :, None] + s.transpose(0, 2, 1)) / dt
            + Ssum[:, :, None] * Ssum[:, None, :] + sTs)

    A5 = np.zeros((m, 4, 4, 4, 4))
    for al in range(3):
        A5[:, :, al, :, al] += K1
    A5[:, :, :3, :, :3] += np.einsum("m,mbi,maj->maibj", mu * V, G, G)

    # velocity-pressure and pressure-velocity couplings
    K_vp = -V4[:, None, None, None] * G[:, :, None, :] * np.ones((1, 1, 4, 1)) \
        + (tau * rho * V4)[:, None, None, None] * Ssum[:, :, None, None] \
        * G[:, None, :, :]                                        # (m, a, b, al)
    A5[:, :, :3, :, 3] += K_vp.transpose(0, 1, 3, 2)
    K_pv = V4[:, None, None, None] * G[:, None, :, :] \
        + (tau * V4 * rho)[:, None, None, None] * G[:, :, None, :] \
        * (1.0 / dt + Ssum)[:, None, :, None]                     # (m, a, b, be)
    A5[:, :, 3, :, :3] += K_pv
    A5[:, :, 3, :, 3] += (tau * V)[:, None, None] * gg

    b4 = np.zeros((m, 4, 4))
    b4[:, :, :3] += (rho / dt) * V20[:, None, None] * (SU[:, None, :] + Uc)
    b4[:, :, :3] += (tau * rho * rho / dt * V20)[:, None, None] * (
        Ssum[:, :, None] * SU[:, None, :] + np.einsum("mca,mcd->mad", s, Uc))
    b4[:, :, 3] += (tau * rho / dt * V4)[:, None] * np.einsum("mad,md->ma", G, SU)

    # band terms: penalty (implicit), its mesh-velocity part and the
    # corrective load (explicit)
    for v, idx, dq, sq in band_data:
        Vb = V[idx]
        Gb = G[idx]
        taub = tau[idx]
        Lam = bary                                       # (q, 4)
        ALEq = np.einsum("qa,mad->mqd", Lam, ALEc[idx])  # (mb, q, 3)
        sqa = np.einsum("qc,mca->mqa", Lam, s[idx])      # (mb, q, a)

        riis_ab = np.einsum("m,q,mq,qa,qb->mab", Vb, wq, sq, Lam, Lam) \
            + np.einsum("m,q,mqa,mq,qb->mab", taub * rho * Vb, wq, sqa, sq, Lam)
        dA5 = np.zeros((idx.size, 4, 4, 4, 4))
        for al in range(3):
            dA5[:, :, al, :, al] += riis_ab
        # PSPG coupling of the band reaction into the continuity rows
        dA5[:, :, 3, :, :3] += np.einsum("m,maj,q,mq,qb->mabj",
                                         taub * Vb, Gb, wq, sq, Lam)
        A5[idx] += dA5

        db4 = np.zeros((idx.size, 4, 4))
        db4[:, :, :3] += np.einsum("m,q,mq,qa,mqd->mad", Vb, wq, sq, Lam, ALEq)
        db4[:, :, :3] += np.einsum("m,q,mqa,mq,mqd->mad", taub * rho * Vb, wq, sqa, sq, ALEq)
        db4[:, :, 3] += np.einsum("m,q,mq,mqd,mad->ma", taub * Vb, wq, sq, ALEq, Gb)
        C = ariis_coeffs.get(v.valve_id)
        if C is not None:
            dmass = np.einsum("q,mq,qa->ma", wq, dq, Lam)            # (mb, a)
            db4[:, :, :3] -= C * Vb[:, None, None] * dmass[:, :, None] * v.normal
            supg_d = np.einsum("q,mqa,mq->ma", wq, sqa, dq)
            db4[:, :, :3] -= C * (taub * rho * Vb)[:, None, None] \
                * supg_d[:, :, None] * v.normal
            db4[:, :, 3] -= C * (taub * Vb)[:, None] * (Gb @ v.normal) \
                * np.einsum("q,mq->m", wq, dq)[:, None]
        b4[idx] += db4

    A = ws.pattern.assemble(A5.reshape(m, 16, 16))
    b = np.bincount(ws.gdof.ravel(), weights=b4.reshape(m, 16).ravel(),
                    minlength=ws.ndof)

    # Neumann pseudo-traction -p_bc n on the open boundaries
    for tag, key in ((BoundaryTag.INLET, "inlet"), (BoundaryTag.OUTLET, "outlet")):
        faces = ws.open_faces[tag]
        if faces.size == 0:
            continue
        p_bc = float(bcs_values[key])
        pf = verts[faces]
        n_area = 0.5 * np.cross(pf[:, 1] - pf[:, 0], pf[:, 2] - pf[:, 0])
        contrib = np.repeat(-p_bc * n_area / 3.0, 3, axis=0)         # (3k, 3)
        dofs = (4 * faces.reshape(-1, 1) + np.arange(3)).ravel()
        b += np.bincount(dofs, weights=contrib.ravel(), minlength=ws.ndof)

    # strong wall Dirichlet: velocity equals the wall material velocity
    wall = ws.wall_nodes
    fix_dofs = (4 * wall[:, None] + np.arange(3)).ravel()
    fix_vals = np.asarray(bcs_values["wall_velocity"])[wall].ravel()
    x_fix = np.zeros(ws.ndof)
    x_fix[fix_dofs] = fix_vals
    b = b - A @ x_fix
    mask = np.ones(ws.ndof)
    mask[fix_dofs] = 0.0
    D = sparse.diags(mask)
    A = D @ A @ D + sparse.diags(1.0 - mask)
    b[fix_dofs] = fix_vals
    return A.tocsr(), b, ws


class IluGmresSolver:
    """Restarted GMRES on the symmetrically equilibrated system, with an
    incomplete-LU preconditioner that is reused across solves until it
    degrades (or a refresh is forced)."""

    def __init__(self, krylov=KrylovParams()):
        self.krylov = krylov
        self._ilu = None
        self.last_iterations = 0

    def _factor(self, As):
        try:
            self._ilu = spilu(As, drop_tol=self.krylov.ilu_drop_tol,
                              fill_factor=self.krylov.ilu_fill_factor)
        except RuntimeError as exc:
            raise SolverError(f"preconditioner factorization failed: {exc}") from exc

    def _gmres(self, As, bs):
        kr = self.krylov
        n_inner = min(kr.restart, kr.max_iter)
        n_outer = max(1, kr.max_iter // n_inner)
        iters = 0

        def count(_):
            nonlocal iters
            iters += 1

        M = LinearOperator(As.shape, self._ilu.solve)
        x, info = gmres(As, bs, rtol=kr.rtol, atol=0.0, restart=n_inner,
                        maxiter=n_outer, M=M, callback=count, callback_type="pr_norm")
        return x, info, iters

    def solve(self, A, b, refresh=False):
        if not np.any(b):
            return np.zeros_like(b)
        diag = np.abs(A.diagonal())
        diag[diag == 0.0] = 1.0
        d = 1.0 / np.sqrt(diag)
        Dm = sparse.diags(d)
        As = (Dm @ A @ Dm).tocsc()
        bs = d * b
        if refresh or self._ilu is None:
            self._factor(As)
        x, info, iters = self._gmres(As, bs)
        if info != 0 or iters > self.krylov.refresh_iterations:
            # stale preconditioner: rebuild and, if needed, retry
            self._factor(As)
            if info != 0:
                x, info, iters = self._gmres(As, bs)
        self.last_iterations = iters
        if info != 0:
            res = float(np.linalg.norm(bs - As @ x) / np.linalg.norm(bs))
            raise SolverError(
                f"linear solver did not reach rtol={self.krylov.rtol:g} "
                f"(relative residual {res:.3e} after {iters} iterations)",
                residual=res, iterations=iters)
        return d * x


def solve_linear(A, b, krylov=KrylovParams()):
    """One-off GMRES + incomplete-LU solve of an assembled system."""
    return IluGmresSolver(krylov).solve(A, b, refresh=True)


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------


class Simulation:
    """Owns the mesh, valves, motion law and solver configuration; advances
    the coupled system one implicit step at a time and logs diagnostics."""

    def __init__(self, mesh, valves, motion, params, bcs, ariis=AriisSettings(),
                 probe=None):
        self.mesh = mesh
        self.base_valves = list(valves)
        self.motion = motion
        self.params = params
        self.bcs = bcs
        self.ariis = ariis
        self.probe = probe
        self.lifting = LiftingSolver(mesh)
        self.boundary_nodes = mesh.boundary_nodes()
        self.workspace = _Workspace(mesh)
        self.state = FluidState.rest(mesh.n_vertices)
        self.log = diagnostics.TimeSeriesLog()
        self.step_index = 0
        self.linear = IluGmresSolver(params.krylov)
        self._last_valve_flags = None
        self._resolve_valve_areas()
        self._check_band_resolution()

    # -- setup helpers ------------------------------------------------------

    def _resolve_valve_areas(self):
        from .valves import discrete_band_mass

        resolved = []
        for v in self.base_valves:
            if v.area is None or self.ariis.use_discrete_band_area:
                area = discrete_band_mass(v, self.mesh, self.params.band_quadrature_order)
                if area <= 0.0:
                    raise ValueError(f"valve {v.valve_id} band does not intersect the mesh")
                from dataclasses import replace
                v = replace(v, area=area)
            resolved.append(v)
        self.base_valves = resolved

    def _check_band_resolution(self):
        diam, _, _ = cell_diameters(self.mesh)
        for v in self.base_valves:
            idx = band_cells(v, self.mesh)
            if idx.size == 0:
                continue
            h_min_band = float(diam[idx].min())
            if v.half_thickness < 1.5 * h_min_band:
                warnings.warn(
                    f"valve {v.valve_id}: half-thickness {v.half_thickness:g} is below "
                    f"1.5 * h_min = {1.5 * h_min_band:g} over the band cells; the "
                    "smoothed band may be under-resolved", stacklevel=3)

    # -- per-step machinery --------------------------------------------------

    def valves_at(self, t):
        return [v.displaced(self.motion.valve_plane_offset(v.valve_id, t))
                for v in self.base_valves]

    def _external_pressures(self, t, state_prev):
        if self.ariis.ext_pressure_mode == "boundary":
            return {"MV": float(self.bcs.inlet(t)), "AV": float(self.bcs.outlet(t))}
        valves_t = self.valves_at(t)
        mv = next(v for v in valves_t if v.valve_id == "MV")
        av = next(v for v in valves_t if v.valve_id == "AV")
        classes = diagnostics.classify_cells(self.mesh, mv, av)
        closed = [v for v in valves_t if v.is_closed(t)]
        return {
            "MV": diagnostics.compartment_pressure(state_prev.p, self.mesh,
                                                   classes["LA"], closed, t),
            "AV": diagnostics.compartment_pressure(state_prev.p, self.mesh,
                                                   classes["AA"], closed, t),
        }

    def step(self):
        """Advance one time step; returns the new state."""
        params = self.params
        t_next = self.state.t + params.dt
        ref = self.mesh.reference_vertices

        d_b = self.motion.boundary_displacement(ref[self.boundary_nodes], t_next)
        d = self.lifting.solve(d_b)
        try:
            move_mesh(self.mesh, d)
        except MeshEntanglementError as exc:
            raise SolverError(f"mesh entanglement at t = {t_next:g} "
                              f"(cell {exc.cell_index})") from exc
        u_ale = ale_velocity(d, self.state.d, params.dt)

        valves_t = self.valves_at(t_next)
        chi = chi_iso(valves_t, t_next) if valves_t else 0
        coeffs = {}
        if self.ariis.enabled and chi == 1:
            p_ext = self._external_pressures(t_next, self.state)
            closed = [v for v in valves_t if v.is_closed(t_next)]
            coeffs = correction_coefficients(self.state, self.mesh, closed,
                                             float(self.ariis.p_star(t_next)), p_ext,
                                             params.band_quadrature_order)

        bcs_values = {
            "inlet": float(self.bcs.inlet(t_next)),
            "outlet": float(self.bcs.outlet(t_next)),
            "wall_velocity": u_ale,
        }
        valve_flags = [(v, v.is_closed(t_next)) for v in valves_t]
        A, b, _ = assemble_step_system(self.state, self.mesh, u_ale, valve_flags,
                                       coeffs, bcs_values, params, self.workspace)
        flags = tuple(closed for _, closed in valve_flags) + (bool(coeffs),)
        refresh = flags != self._last_valve_flags
        self._last_valve_flags = flags
        x = self.linear.solve(A, b, refresh=refresh)
        n = self.mesh.n_vertices
        unknowns = x.reshape(n, 4)
        new_state = FluidState(u=unknowns[:, :3].copy(), p=unknowns[:, 3].copy(),
                               t=t_next, d=d, u_ale=u_ale)
        new_state.check_finite()
        self.state = new_state
        self.step_index += 1
        self._record(valves_t, chi, coeffs)
        return new_state

    def _record(self, valves_t, chi, coeffs):
        t = self.state.t
        mv = next((v for v in valves_t if v.valve_id == "MV"), None)
        av = next((v for v in valves_t if v.valve_id == "AV"), None)
        closed = [v for v in valves_t if v.is_closed(t)]

        def comp_p(idx):
            try:
                return diagnostics.compartment_pressure(self.state.p, self.mesh,
                                                        idx, closed, t)
            except ValueError:
                return diagnostics.compartment_pressure(self.state.p, self.mesh, idx)

        if mv is not None and av is not None:
            classes = diagnostics.classify_cells(self.mesh, mv, av)
            p_la = comp_p(classes["LA"])
            p_aa = comp_p(classes["AA"])
            p_lv_mean = comp_p(classes["LV"])
            p_lv = self._control_volume_pressure(mv, closed, t, fallback=p_lv_mean)
            v_lv = diagnostics.ventricular_volume(self.mesh, mv, av)
        else:
            everything = np.arange(self.mesh.n_cells)
            p_la = p_aa = p_lv = p_lv_mean = comp_p(everything)
            v_lv = float(self.mesh.cell_volumes().sum())

        res = {"MV": 0.0, "AV": 0.0}
        flux = {"MV": 0.0, "AV": 0.0}
        for v in valves_t:
            flux[v.valve_id] = diagnostics.valve_flux(self.state, v, self.mesh)
            res[v.valve_id] = (resistive_integral(self.state, v, self.mesh,
                                                  self.params.band_quadrature_order)
                               if v.is_closed(t) else 0.0)
        if chi == 1 and mv is not None and av is not None:
            ext = {"MV": float(self.bcs.inlet(t)), "AV": float(self.bcs.outlet(t))}
            p_est = diagnostics.pressure_estimate(self.state, valves_t, ext["MV"],
                                                  ext["AV"], self.mesh,
                                                  self.params.band_quadrature_order)
        else:
            p_est = np.nan

        self.log.append({
            "t": t,
            "p_LA": p_la,
            "p_LV": p_lv,
            "p_LV_mean": p_lv_mean,
            "p_AA": p_aa,
            "p_star": float(self.ariis.p_star(t)) if self.ariis.p_star is not None else np.nan,
            "chi_iso": chi,
            "mv_closed": 1.0 if (mv is not None and mv.is_closed(t)) else 0.0,
            "av_closed": 1.0 if (av is not None and av.is_closed(t)) else 0.0,
            "C_MV": coeffs.get("MV", 0.0),
            "C_AV": coeffs.get("AV", 0.0),
            "V_LV": v_lv,
            "Q_MV": flux["MV"],
            "Q_AV": flux["AV"],
            "res_MV": res["MV"],
            "res_AV": res["AV"],
            "p_est": p_est,
        })

    def _control_volume_pressure(self, mv, closed, t, fallback):
        if self.probe is None:
            return fallback
        center = mv.plane_point - self.probe.offset_bandwidths \
            * (2.0 * mv.half_thickness) * mv.normal
        centroids = self.mesh.cell_centroids()
        idx = np.flatnonzero(np.linalg.norm(centroids - center, axis=1)
                             <= self.probe.radius)
        if idx.size == 0:
            idx = np.array([int(np.argmin(np.linalg.norm(centroids - center, axis=1)))])
        try:
            return diagnostics.compartment_pressure(self.state.p, self.mesh, idx,
                                                    closed, t)
        except ValueError:
            return diagnostics.compartment_pressure(self.state.p, self.mesh, idx)

    def run(self, t_end=None, on_step=None):
        """March to t_end (default params.t_end); on_step(sim) after each
        accepted step.  Returns the diagnostics log."""
        t_end = self.params.t_end if t_end is None else t_end
        n_steps = int(round((t_end - self.state.t) / self.params.dt))
        for _ in range(n_steps):
            try:
                self.step()
            except SolverError as exc:
                raise SolverError(
                    f"step {self.step_index + 1} failed at t = "
                    f"{self.state.t + self.params.dt:g}: {exc}",
                    residual=exc.residual, iterations=exc.iterations) from exc
            if on_step is not None:
                on_step(self)
        return self.log
