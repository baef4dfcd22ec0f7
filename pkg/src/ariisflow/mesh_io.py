"""Mesh import/export: Gmsh ASCII (v2.2 / v4.1) readers and a VTK XML
unstructured (.vtu) reader/writer.

The VTU writer stores boundary triangles alongside the tets with an integer
``boundary_tag`` cell array (-1 on tets), so a mesh round-trips through a
single file.  Point data (velocity, pressure, displacement) is written in
64-bit floats, either ASCII or inline base64 binary.
"""

import base64
import struct
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .meshing import BoundaryTag, MeshError, TetMesh, _boundary_faces_of

__all__ = ["import_mesh", "read_gmsh", "read_vtu", "write_vtu"]

_GMSH_TRI = 2
_GMSH_QUAD = 3
_GMSH_TET = 4
_VTK_TRI = 5
_VTK_TET = 10

_VOLUME_TYPES = {4: "tetrahedron", 5: "hexahedron", 6: "prism", 7: "pyramid"}


class MeshIOError(MeshError):
    pass


def _default_tag_map():
    return {
        "inlet": BoundaryTag.INLET,
        "outlet": BoundaryTag.OUTLET,
        "wall": BoundaryTag.WALL,
    }


def _resolve_tag(name, tag_map):
    key = name.strip().strip('"')
    for cand in (key, key.lower()):
        if cand in tag_map:
            return int(tag_map[cand])
    raise MeshIOError(f"boundary group '{name}' has no entry in the tag map")


def import_mesh(path, tag_map=None):
    """Read a tet mesh with tagged boundary faces from .msh or .vtu.

    ``tag_map`` maps physical-group names (Gmsh) to BoundaryTag; VTU files
    written by :func:`write_vtu` carry numeric tags directly.
    """
    path = Path(path)
    if path.suffix == ".vtu":
        mesh, _ = read_vtu(path)
        return mesh
    if path.suffix == ".msh":
        return read_gmsh(path, tag_map)
    raise MeshIOError(f"unsupported mesh format '{path.suffix}'")


# ---------------------------------------------------------------------------
# Gmsh readers
# ---------------------------------------------------------------------------


def _gmsh_sections(text):
    sections = {}
    pos = 0
    while True:
        start = text.find("$", pos)
        if start < 0:
            break
        eol = text.find("\n", start)
        name = text[start + 1:eol].strip()
        end_marker = f"$End{name}"
        end = text.find(end_marker, eol)
        if end < 0:
            raise MeshIOError(f"unterminated section ${name}")
        sections[name] = text[eol + 1:end].strip("\n")
        pos = end + len(end_marker)
    return sections


def read_gmsh(path, tag_map=None):
    tag_map = {**_default_tag_map(), **(tag_map or {})}
    text = Path(path).read_text()
    sections = _gmsh_sections(text)
    if "MeshFormat" not in sections:
        raise MeshIOError("not a Gmsh file: missing $MeshFormat")
    version = sections["MeshFormat"].split()[0]
    if version.startswith("2"):
        nodes, elements = _parse_gmsh22(sections)
        phys_of_surface = None
    elif version.startswith("4"):
        nodes, elements, phys_of_surface = _parse_gmsh41(sections)
    else:
        raise MeshIOError(f"unsupported Gmsh format version {version}")

    names = {}
    if "PhysicalNames" in sections:
        lines = sections["PhysicalNames"].splitlines()
        for line in lines[1:]:
            parts = line.split(maxsplit=2)
            if len(parts) == 3:
                names[(int(parts[0]), int(parts[1]))] = parts[2].strip().strip('"')

    tets = []
    tris = []
    for etype, phys, verts in elements:
        if etype == _GMSH_TET:
            tets.append(verts)
        elif etype == _GMSH_TRI:
            if phys_of_surface is not None and phys in phys_of_surface:
                phys = phys_of_surface[phys]
            tris.append((phys, verts))
        elif etype in (15, 1):  # points and lines: irrelevant here
            continue
        elif etype in _VOLUME_TYPES and etype != _GMSH_TET:
            raise MeshIOError(f"non-tetrahedral cell ({_VOLUME_TYPES[etype]}) in {path}")
        elif etype == _GMSH_QUAD:
            raise MeshIOError(f"non-tetrahedral cell (quadrilateral face) in {path}")
        else:
            raise MeshIOError(f"unsupported element type {etype} in {path}")
    if not tets:
        raise MeshIOError("no tetrahedra found")

    node_ids = np.array(sorted(nodes), dtype=np.int64)
    renum = {nid: i for i, nid in enumerate(node_ids.tolist())}
    vertices = np.array([nodes[nid] for nid in node_ids.tolist()])
    cells = np.array([[renum[v] for v in t] for t in tets], dtype=np.int64)

    tri_tags = {}
    for phys, verts in tris:
        key = tuple(sorted(renum[v] for v in verts))
        name = names.get((2, phys), str(phys))
        tri_tags[key] = _resolve_tag(name, tag_map)

    return _finalize_imported(vertices, cells, tri_tags)


def _parse_gmsh22(sections):
    node_lines = sections["Nodes"].splitlines()
    n_nodes = int(node_lines[0])
    nodes = {}
    for line in node_lines[1:n_nodes + 1]:
        parts = line.split()
        nodes[int(parts[0])] = [float(parts[1]), float(parts[2]), float(parts[3])]

    elem_lines = sections["Elements"].splitlines()
    n_elems = int(elem_lines[0])
    elements = []
    for line in elem_lines[1:n_elems + 1]:
        parts = [int(p) for p in line.split()]
        etype = parts[1]
        ntags = parts[2]
        phys = parts[3] if ntags >= 1 else 0
        verts = parts[3 + ntags:]
        elements.append((etype, phys, verts))
    return nodes, elements


def _parse_gmsh41(sections):
    # surface entity tag -> physical tag
    phys_of_surface = {}
    if "Entities" in sections:
        tokens = sections["Entities"].split()
        it = iter(tokens)
        n_pts, n_crv, n_srf, n_vol = (int(next(it)) for _ in range(4))
        for _ in range(n_pts):
            next(it)  # tag
            for _ in range(3):
                next(it)
            n_phys = int(next(it))
            for _ in range(n_phys):
                next(it)
        for _ in range(n_crv):
            next(it)
            for _ in range(6):
                next(it)
            n_phys = int(next(it))
            for _ in range(n_phys):
                next(it)
            n_bnd = int(next(it))
            for _ in range(n_bnd):
                next(it)
        for _ in range(n_srf):
            tag = int(next(it))
            for _ in range(6):
                next(it)
            n_phys = int(next(it))
            phys = [int(next(it)) for _ in range(n_phys)]
            if phys:
                phys_of_surface[tag] = phys[0]
            n_bnd = int(next(it))
            for _ in range(n_bnd):
                next(it)
        # volume entities are not needed

    tokens = sections["Nodes"].split()
    it = iter(tokens)
    n_blocks = int(next(it))
    next(it)  # numNodes
    next(it)  # minTag
    next(it)  # maxTag
    nodes = {}
    for _ in range(n_blocks):
        next(it)  # entityDim
        next(it)  # entityTag
        parametric = int(next(it))
        if parametric:
            raise MeshIOError("parametric nodes are not supported")
        n_in_block = int(next(it))
        tags = [int(next(it)) for _ in range(n_in_block)]
        for t in tags:
            nodes[t] = [float(next(it)), float(next(it)), float(next(it))]

    tokens = sections["Elements"].split()
    it = iter(tokens)
    n_blocks = int(next(it))
    next(it)
    next(it)
    next(it)
    elements = []
    nodes_per_type = {1: 2, 2: 3, 3: 4, 4: 4, 5: 8, 6: 6, 7: 5, 15: 1}
    for _ in range(n_blocks):
        next(it)  # entityDim
        entity_tag = int(next(it))
        etype = int(next(it))
        n_in_block = int(next(it))
        if etype not in nodes_per_type:
            raise MeshIOError(f"unsupported element type {etype}")
        npe = nodes_per_type[etype]
        for _ in range(n_in_block):
            next(it)  # element tag
            verts = [int(next(it)) for _ in range(npe)]
            elements.append((etype, entity_tag, verts))
    return nodes, elements, phys_of_surface


def _finalize_imported(vertices, cells, tri_tags):
    """Build a validated TetMesh from raw arrays plus a face-key -> tag map."""
    vols = np.linalg.det(vertices[cells[:, 1:]] - vertices[cells[:, :1]]) / 6.0
    flip = vols < 0
    cells = cells.copy()
    cells[flip] = cells[flip][:, [0, 1, 3, 2]]

    faces = _boundary_faces_of(cells)
    tags = np.empty(faces.shape[0], dtype=np.int64)
    for i, f in enumerate(faces):
        key = tuple(sorted(int(v) for v in f))
        if key not in tri_tags:
            raise MeshIOError(f"untagged boundary face {key}")
        tags[i] = tri_tags[key]
    extra = len(tri_tags) - faces.shape[0]
    if extra > 0:
        raise MeshIOError(f"{extra} tagged faces are not on the mesh boundary")

    mesh = TetMesh(vertices, cells, faces, tags)
    mesh.validate()
    return mesh


# ---------------------------------------------------------------------------
# VTK XML unstructured grid
# ---------------------------------------------------------------------------


def _encode_array(arr, binary):
    arr = np.asarray(arr)
    if binary:
        raw = arr.tobytes()
        header = struct.pack("<Q", len(raw))
        return base64.b64encode(header + raw).decode("ascii")
    if arr.dtype.kind == "f":
        return " ".join(f"{v:.17g}" for v in arr.ravel())
    return " ".join(str(int(v)) for v in arr.ravel())


_VTK_DTYPES = {
    "Float64": np.float64,
    "Float32": np.float32,
    "Int64": np.int64,
    "Int32": np.int32,
    "UInt8": np.uint8,
    "UInt64": np.uint64,
}
_DTYPE_NAMES = {np.dtype(v): k for k, v in _VTK_DTYPES.items()}


def _data_array_xml(name, arr, binary, n_components=None):
    arr = np.asarray(arr)
    dtype_name = _DTYPE_NAMES[arr.dtype]
    ncomp = n_components if n_components is not None else (arr.shape[1] if arr.ndim == 2 else 1)
    fmt = "binary" if binary else "ascii"
    return (f'<DataArray type="{dtype_name}" Name="{name}" '
            f'NumberOfComponents="{ncomp}" format="{fmt}">'
            f"{_encode_array(arr, binary)}</DataArray>")


def write_vtu(path, mesh, point_data=None, binary=False, include_boundary=True):
    """Write a .vtu snapshot of the mesh (current coordinates).

    ``point_data`` maps field names to (n,) or (n, 3) float arrays.  With
    ``include_boundary`` the boundary triangles are appended after the tets
    and a ``boundary_tag`` cell array (-1 on tets) is written, which is what
    the reader uses to rebuild the tagged mesh.
    """
    point_data = point_data or {}
    n_tets = mesh.n_cells
    conn = [mesh.cells.ravel()]
    offsets = [4 * np.arange(1, n_tets + 1)]
    types = [np.full(n_tets, _VTK_TET, dtype=np.uint8)]
    tag_arr = [np.full(n_tets, -1, dtype=np.int64)]
    n_cells = n_tets
    if include_boundary:
        k = mesh.boundary_faces.shape[0]
        conn.append(mesh.boundary_faces.ravel())
        offsets.append(4 * n_tets + 3 * np.arange(1, k + 1))
        types.append(np.full(k, _VTK_TRI, dtype=np.uint8))
        tag_arr.append(mesh.boundary_tags.astype(np.int64))
        n_cells += k

    parts = []
    parts.append('<?xml version="1.0"?>')
    parts.append('<VTKFile type="UnstructuredGrid" version="1.0" '
                 'byte_order="LittleEndian" header_type="UInt64">')
    parts.append("<UnstructuredGrid>")
    parts.append(f'<Piece NumberOfPoints="{mesh.n_vertices}" NumberOfCells="{n_cells}">')
    parts.append("<Points>")
    parts.append(_data_array_xml("Points", mesh.vertices.astype(np.float64), binary, 3))
    parts.append("</Points>")
    parts.append("<Cells>")
    parts.append(_data_array_xml("connectivity", np.concatenate(conn).astype(np.int64), binary, 1))
    parts.append(_data_array_xml("offsets", np.concatenate(offsets).astype(np.int64), binary, 1))
    parts.append(_data_array_xml("types", np.concatenate(types), binary, 1))
    parts.append("</Cells>")
    parts.append("<CellData>")
    parts.append(_data_array_xml("boundary_tag", np.concatenate(tag_arr), binary, 1))
    parts.append("</CellData>")
    parts.append("<PointData>")
    for name, arr in point_data.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape[0] != mesh.n_vertices:
            raise MeshIOError(f"point data '{name}' length mismatch")
        parts.append(_data_array_xml(name, arr, binary))
    parts.append("</PointData>")
    parts.append("</Piece>")
    parts.append("</UnstructuredGrid>")
    parts.append("</VTKFile>")
    Path(path).write_text("\n".join(parts))


def _decode_data_array(elem, header_dtype=np.uint64):
    dtype = _VTK_DTYPES[elem.get("type")]
    ncomp = int(elem.get("NumberOfComponents", "1"))
    fmt = elem.get("format", "ascii")
    text = (elem.text or "").strip()
    if fmt == "ascii":
        arr = np.array(text.split(), dtype=dtype)
    elif fmt == "binary":
        raw = base64.b64decode(text)
        header_size = np.dtype(header_dtype).itemsize
        (nbytes,) = struct.unpack("<Q" if header_size == 8 else "<I", raw[:header_size])
        arr = np.frombuffer(raw[header_size:header_size + nbytes], dtype=dtype).copy()
    else:
        raise MeshIOError(f"unsupported DataArray format '{fmt}'")
    if ncomp > 1:
        arr = arr.reshape(-1, ncomp)
    return arr


def read_vtu(path):
    """Read a .vtu written by :func:`write_vtu`; returns (mesh, point_data)."""
    try:
        tree = ET.parse(str(path))
    except ET.ParseError as exc:
        raise MeshIOError(f"cannot parse {path}: {exc}") from exc
    root = tree.getroot()
    header = root.get("header_type", "UInt32")
    header_dtype = np.uint64 if header == "UInt64" else np.uint32
    piece = root.find("./UnstructuredGrid/Piece")
    if piece is None:
        raise MeshIOError("no UnstructuredGrid/Piece element")

    points_elem = piece.find("./Points/DataArray")
    points = _decode_data_array(points_elem, header_dtype).astype(float).reshape(-1, 3)

    cell_arrays = {e.get("Name"): _decode_data_array(e, header_dtype)
                   for e in piece.findall("./Cells/DataArray")}
    conn = cell_arrays["connectivity"].astype(np.int64).ravel()
    offsets = cell_arrays["offsets"].astype(np.int64).ravel()
    types = cell_arrays["types"].astype(np.int64).ravel()

    cell_data = {e.get("Name"): _decode_data_array(e, header_dtype)
                 for e in piece.findall("./CellData/DataArray")}
    tags_all = cell_data.get("boundary_tag")

    starts = np.concatenate([[0], offsets[:-1]])
    tets = []
    tri_tags = {}
    for i, (s, e, t) in enumerate(zip(starts, offsets, types)):
        verts = conn[s:e]
        if t == _VTK_TET:
            tets.append(verts)
        elif t == _VTK_TRI:
            if tags_all is None:
                raise MeshIOError("boundary triangles present but no boundary_tag array")
            tri_tags[tuple(sorted(int(v) for v in verts))] = int(tags_all[i])
        else:
            raise MeshIOError(f"non-tetrahedral cell (VTK type {t})")
    if not tets:
        raise MeshIOError("no tetrahedra found")
    cells = np.array(tets, dtype=np.int64)

    point_data = {e.get("Name"): _decode_data_array(e, header_dtype).astype(float)
                  for e in piece.findall("./PointData/DataArray")}

    if tri_tags:
        mesh = _finalize_imported(points, cells, tri_tags)
    else:
        # geometry-only file: derive the boundary, tag everything as wall
        faces = _boundary_faces_of(cells)
        tags = np.full(faces.shape[0], int(BoundaryTag.WALL), dtype=np.int64)
        mesh = TetMesh(points, cells, faces, tags)
    return mesh, point_data
