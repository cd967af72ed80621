"""Surface meshes on a shared topology, with distance metrics and rigid alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .topology import MeshTopology, TopologyError


@dataclass(frozen=True)
class SurfaceMesh:
    """Vertex coordinates (millimetres) on a fixed shared triangulation."""

    topology: MeshTopology
    vertices: np.ndarray  # (|V|, 3) float64

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        if v.shape != (self.topology.vertex_count, 3):
            raise TopologyError(
                f"vertex array must be ({self.topology.vertex_count}, 3), got {v.shape}"
            )
        if not np.isfinite(v).all():
            raise ValueError("vertex coordinates must be finite")
        object.__setattr__(self, "vertices", v)

    def with_vertices(self, vertices: np.ndarray) -> "SurfaceMesh":
        return SurfaceMesh(self.topology, vertices)

    def flat(self) -> np.ndarray:
        """Row-major flattening to a 3|V| vector (x0, y0, z0, x1, ...)."""
        return self.vertices.reshape(-1)

    @property
    def vertex_count(self) -> int:
        return self.topology.vertex_count


def _check_shared_topology(x: SurfaceMesh, y: SurfaceMesh):
    if not x.topology.same_as(y.topology):
        raise TopologyError("meshes do not share a topology")


def ved(x: SurfaceMesh, y: SurfaceMesh) -> float:
    """Mean per-vertex Euclidean distance between two meshes, in mm."""
    _check_shared_topology(x, y)
    return float(np.linalg.norm(x.vertices - y.vertices, axis=1).mean())


def ved_vertices(a: np.ndarray, b: np.ndarray) -> float:
    """`ved` on raw (|V|, 3) arrays, for callers that bypass SurfaceMesh."""
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b), axis=1).mean())


def chamfer(x: SurfaceMesh, y: SurfaceMesh) -> float:
    """Symmetric mean nearest-neighbour distance between the vertex sets."""
    from scipy.spatial import cKDTree

    dx, _ = cKDTree(y.vertices).query(x.vertices)
    dy, _ = cKDTree(x.vertices).query(y.vertices)
    return float(0.5 * (dx.mean() + dy.mean()))


def mean_radius(meshes) -> float:
    """Mean distance of vertices to their mesh centroid, averaged over meshes."""
    radii = []
    for m in meshes:
        c = m.vertices.mean(axis=0)
        radii.append(np.linalg.norm(m.vertices - c, axis=1).mean())
    return float(np.mean(radii))


def enclosed_volume(mesh: SurfaceMesh) -> float:
    """Signed enclosed volume of a closed surface via the divergence theorem.

    Positive for consistently outward-wound faces. Sums the signed volumes
    of the tetrahedra spanned by the origin and each face.
    """
    v = mesh.vertices
    f = mesh.topology.faces
    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    return float(np.einsum("ij,ij->i", p0, np.cross(p1, p2)).sum() / 6.0)


def similarity_transform(source: np.ndarray, target: np.ndarray):
    """Least-squares similarity transform (Kabsch-Umeyama).

    Finds scale ``c``, proper rotation ``R`` (det +1) and translation ``t``
    minimizing ``sum_i || c R p_i + t - q_i ||^2`` over corresponding points.

    Parameters
    ----------
    source, target : np.ndarray
        (N, 3) matched point sets.

    Returns
    -------
    (c, R, t) : (float, (3, 3) ndarray, (3,) ndarray)
    """
    p = np.asarray(source, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError("source and target must be matching (N, 3) arrays")
    mu_p = p.mean(axis=0)
    mu_q = q.mean(axis=0)
    pc = p - mu_p
    qc = q - mu_q
    var_p = (pc**2).sum() / len(p)
    if var_p <= 1e-30:
        raise ValueError("degenerate source: all points coincide")
    cov = qc.T @ pc / len(p)
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    scale = float(np.trace(np.diag(d) @ s) / var_p)
    trans = mu_q - scale * rot @ mu_p
    return scale, rot, trans


def kabsch_umeyama_align(mesh: SurfaceMesh, template: SurfaceMesh) -> SurfaceMesh:
    """Register ``mesh`` to ``template`` by the best similarity transform."""
    _check_shared_topology(mesh, template)
    c, rot, t = similarity_transform(mesh.vertices, template.vertices)
    return mesh.with_vertices(c * mesh.vertices @ rot.T + t)
