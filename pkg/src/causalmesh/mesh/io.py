"""ASCII PLY and OBJ mesh serialization.

PLY is the canonical on-disk format: vertex coordinates are written as
``property double`` so that values survive a write/read round trip exactly,
and an optional per-vertex scalar channel (default ``signed_disp_mm``) can
ride along for visualization. OBJ export is provided for interoperability.
"""

from __future__ import annotations

import numpy as np

from .surface import SurfaceMesh
from .topology import build_topology


class MeshIOError(ValueError):
    """Raised when a mesh file cannot be parsed or written consistently."""


def _fmt(value: float) -> str:
    # 17 significant digits round-trips any IEEE double
    return format(float(value), ".17g")


def write_ply(path, vertices, faces, scalars=None, scalar_name: str = "signed_disp_mm") -> None:
    """Write an ASCII PLY file with double-precision vertex coordinates.

    Parameters
    ----------
    path : str or Path
        Output file path.
    vertices : array_like
        Vertex coordinates, shape (n, 3).
    faces : array_like
        Triangle indices, shape (m, 3).
    scalars : array_like, optional
        Per-vertex scalar channel of length n, stored as an extra
        double property named ``scalar_name``.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise MeshIOError(f"vertices must have shape (n, 3), got {vertices.shape}")
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise MeshIOError(f"faces must have shape (m, 3), got {faces.shape}")
    if scalars is not None:
        scalars = np.asarray(scalars, dtype=np.float64)
        if scalars.shape != (vertices.shape[0],):
            raise MeshIOError(
                f"scalar channel must have length {vertices.shape[0]}, got {scalars.shape}"
            )

    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {vertices.shape[0]}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if scalars is not None:
        lines.append(f"property double {scalar_name}")
    lines += [
        f"element face {faces.shape[0]}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for i, v in enumerate(vertices):
        row = f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}"
        if scalars is not None:
            row += f" {_fmt(scalars[i])}"
        lines.append(row)
    for f in faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def read_ply(path):
    """Read an ASCII PLY file.

    Returns
    -------
    (vertices, faces, scalars)
        Float64 (n, 3) vertices, int64 (m, 3) faces, and either the extra
        per-vertex scalar channel as a float64 (n,) array or None.
    """
    with open(path) as handle:
        raw = handle.read()
    tokens = raw.splitlines()
    if not tokens or tokens[0].strip() != "ply":
        raise MeshIOError(f"{path}: not a PLY file (missing 'ply' magic line)")

    vertex_count = face_count = None
    vertex_props: list[str] = []
    current_element = None
    body_start = None
    for lineno, line in enumerate(tokens[1:], start=2):
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise MeshIOError(f"{path}: only ascii PLY is supported, got {parts[1]}")
        elif parts[0] == "element":
            current_element = parts[1]
            if parts[1] == "vertex":
                vertex_count = int(parts[2])
            elif parts[1] == "face":
                face_count = int(parts[2])
        elif parts[0] == "property":
            if current_element == "vertex":
                if parts[1] == "list":
                    raise MeshIOError(f"{path}: list properties on vertices are not supported")
                vertex_props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = lineno
            break
    if body_start is None:
        raise MeshIOError(f"{path}: header never terminated with end_header")
    if vertex_count is None or face_count is None:
        raise MeshIOError(f"{path}: header is missing vertex or face element counts")
    if vertex_props[:3] != ["x", "y", "z"]:
        raise MeshIOError(f"{path}: vertex properties must start with x y z, got {vertex_props}")

    body = [ln for ln in tokens[body_start:] if ln.strip()]
    if len(body) < vertex_count + face_count:
        raise MeshIOError(
            f"{path}: expected {vertex_count + face_count} body lines, found {len(body)}"
        )

    n_props = len(vertex_props)
    vertex_rows = np.empty((vertex_count, n_props), dtype=np.float64)
    for i in range(vertex_count):
        fields = body[i].split()
        if len(fields) != n_props:
            raise MeshIOError(f"{path}: vertex line {i} has {len(fields)} fields, expected {n_props}")
        vertex_rows[i] = [float(x) for x in fields]
    vertices = vertex_rows[:, :3]
    scalars = vertex_rows[:, 3] if n_props > 3 else None

    faces = np.empty((face_count, 3), dtype=np.int64)
    for i in range(face_count):
        fields = body[vertex_count + i].split()
        if int(fields[0]) != 3:
            raise MeshIOError(f"{path}: face {i} has {fields[0]} vertices, only triangles supported")
        faces[i] = [int(x) for x in fields[1:4]]
    if faces.size and (faces.min() < 0 or faces.max() >= vertex_count):
        raise MeshIOError(f"{path}: face index out of range for {vertex_count} vertices")
    return vertices, faces, scalars


def write_obj(path, vertices, faces) -> None:
    """Write a Wavefront OBJ file (1-based face indices)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    lines = [f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}" for v in vertices]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in faces]
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def read_obj(path):
    """Read a Wavefront OBJ file; returns (vertices, faces) with 0-based faces."""
    vertices = []
    faces = []
    with open(path) as handle:
        for lineno, line in enumerate(handle, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshIOError(f"{path}:{lineno}: vertex line needs 3 coordinates")
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshIOError(f"{path}:{lineno}: only triangular faces are supported")
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if any(i <= 0 for i in idx):
                    raise MeshIOError(f"{path}:{lineno}: face indices must be positive (1-based)")
                faces.append([i - 1 for i in idx])
    if not vertices:
        raise MeshIOError(f"{path}: no vertices found")
    vertices = np.array(vertices, dtype=np.float64)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and faces.max() >= len(vertices):
        raise MeshIOError(f"{path}: face index out of range for {len(vertices)} vertices")
    return vertices, faces


def read_surface(path) -> SurfaceMesh:
    """Load a PLY or OBJ file into a SurfaceMesh (topology rebuilt from faces)."""
    name = str(path)
    if name.endswith(".ply"):
        vertices, faces, _ = read_ply(path)
    elif name.endswith(".obj"):
        vertices, faces = read_obj(path)
    else:
        raise MeshIOError(f"{path}: unsupported mesh format (expected .ply or .obj)")
    return SurfaceMesh(build_topology(faces, len(vertices)), vertices)


def write_surface(path, mesh: SurfaceMesh, scalars=None) -> None:
    """Write a SurfaceMesh to PLY or OBJ depending on the file suffix."""
    name = str(path)
    if name.endswith(".ply"):
        write_ply(path, mesh.vertices, mesh.topology.faces, scalars=scalars)
    elif name.endswith(".obj"):
        if scalars is not None:
            raise MeshIOError("OBJ cannot carry per-vertex scalar channels")
        write_obj(path, mesh.vertices, mesh.topology.faces)
    else:
        raise MeshIOError(f"{path}: unsupported mesh format (expected .ply or .obj)")
