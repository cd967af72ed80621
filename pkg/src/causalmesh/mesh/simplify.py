"""Quadric-error edge-collapse simplification and the pooling hierarchy.

Vertex quadrics are the summed plane quadrics of incident faces. Contractions
collapse existing edges (v_a, v_b) -> v_hat, where v_hat is chosen among
{v_a, v_b, midpoint} to minimize v_hat^T (Q_a + Q_b) v_hat, popped from a
min-heap ordered by (error, min index, max index) for cross-platform
determinism. Reversing the recorded contractions defines the up-sampling
(feature copy) used by the mesh decoder.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .surface import SurfaceMesh
from .topology import MeshTopology, TopologyError, build_topology

QUADRIC_REGULARIZER = 1e-9


@dataclass(frozen=True)
class Contraction:
    """One edge collapse: sources (keep, drop) merged into position target."""

    error: float
    target: np.ndarray  # (3,) position of the merged vertex
    keep: int  # surviving vertex id (fine-level indexing)
    drop: int  # removed vertex id (fine-level indexing)


@dataclass(frozen=True)
class SimplificationLevel:
    """Bookkeeping for one simplification step between two resolutions."""

    fine: MeshTopology
    coarse: MeshTopology
    factor: float
    fine_to_coarse: np.ndarray  # (|V|,) coarse index of each fine vertex
    coarse_rep: np.ndarray  # (|V'|,) fine id of each coarse vertex's survivor
    contractions: tuple[Contraction, ...]


class SimplificationHierarchy:
    """Ordered stack of simplification levels below a template mesh."""

    def __init__(self, template: SurfaceMesh, levels: list[SimplificationLevel], meshes: list[SurfaceMesh]):
        self.template = template
        self.levels = levels
        self.meshes = meshes  # coarse mesh per level

    def topology_at(self, depth: int) -> MeshTopology:
        """Topology at resolution ``depth`` (0 = template)."""
        if depth == 0:
            return self.template.topology
        return self.levels[depth - 1].coarse

    def vertex_counts(self) -> list[int]:
        return [self.topology_at(i).vertex_count for i in range(len(self.levels) + 1)]


def plane_quadric(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """4x4 quadric of a triangle's supporting plane; zero for degenerate faces."""
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm < 1e-300:
        return np.zeros((4, 4))
    n = n / norm
    d = -float(n @ p0)
    plane = np.append(n, d)
    return np.outer(plane, plane)


def vertex_quadrics(mesh: SurfaceMesh) -> np.ndarray:
    """(|V|, 4, 4) summed plane quadrics of each vertex's incident faces."""
    v = mesh.vertices
    q = np.zeros((mesh.vertex_count, 4, 4))
    for face in mesh.topology.faces:
        kp = plane_quadric(v[face[0]], v[face[1]], v[face[2]])
        for idx in face:
            q[idx] += kp
    return q


def contraction_error(q_sum: np.ndarray, position: np.ndarray, regularized: bool = True) -> float:
    """Surface error of placing the merged vertex at ``position``."""
    h = np.append(position, 1.0)
    q = q_sum + QUADRIC_REGULARIZER * np.eye(4) if regularized else q_sum
    return float(h @ q @ h)


def _best_candidate(pos_a, pos_b, q_sum):
    """Minimum-error placement among (v_a, v_b, midpoint); earlier wins ties."""
    best_err = math.inf
    best_pos = None
    for cand in (pos_a, pos_b, 0.5 * (pos_a + pos_b)):
        err = contraction_error(q_sum, cand)
        if err < best_err:
            best_err = err
            best_pos = cand
    return best_err, np.array(best_pos)


def quadric_simplify(mesh: SurfaceMesh, factor: float):
    """Collapse edges greedily until exactly ceil(|V| / factor) vertices remain.

    Returns
    -------
    (SurfaceMesh, SimplificationLevel)
        The simplified mesh and the level record needed to reverse the
        contractions (feature up-sampling) or replay them.
    """
    if factor <= 1.0:
        raise ValueError("simplification factor must be > 1")
    n = mesh.vertex_count
    target = math.ceil(n / factor)
    if target < 4:
        raise TopologyError(
            f"target vertex count {target} below minimum 4 (|V|={n}, S={factor})"
        )

    positions = mesh.vertices.copy()
    quadrics = vertex_quadrics(mesh)
    alive = np.ones(n, dtype=bool)
    version = np.zeros(n, dtype=np.int64)
    parent = np.arange(n)  # union-find: removed vertex -> survivor
    neighbours: list[set] = [set() for _ in range(n)]
    for a, b in mesh.topology.edges():
        neighbours[a].add(int(b))
        neighbours[b].add(int(a))

    heap: list = []
    seq = 0

    def push(a: int, b: int):
        nonlocal seq
        lo, hi = (a, b) if a < b else (b, a)
        err, pos = _best_candidate(positions[lo], positions[hi], quadrics[lo] + quadrics[hi])
        heapq.heappush(heap, (err, lo, hi, seq, version[lo], version[hi], pos))
        seq += 1

    for a, b in mesh.topology.edges():
        push(int(a), int(b))

    log: list[Contraction] = []
    remaining = n
    while remaining > target:
        if not heap:
            raise TopologyError("simplification stalled: no contractible edges left")
        err, lo, hi, _, ver_lo, ver_hi, pos = heapq.heappop(heap)
        if not (alive[lo] and alive[hi]):
            continue
        if version[lo] != ver_lo or version[hi] != ver_hi:
            continue
        keep, drop = lo, hi
        positions[keep] = pos
        quadrics[keep] = quadrics[keep] + quadrics[drop]
        alive[drop] = False
        parent[drop] = keep
        version[keep] += 1
        version[drop] += 1
        for w in list(neighbours[drop]):
            neighbours[w].discard(drop)
            if w != keep:
                neighbours[w].add(keep)
                neighbours[keep].add(w)
        neighbours[keep].discard(drop)
        neighbours[keep].discard(keep)
        neighbours[drop].clear()
        log.append(Contraction(float(err), pos.copy(), keep, drop))
        remaining -= 1
        for w in sorted(neighbours[keep]):
            push(keep, w)

    # resolve union-find chains to final survivors
    def find(i: int) -> int:
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    survivors = np.flatnonzero(alive)
    coarse_index = np.full(n, -1, dtype=np.int64)
    coarse_index[survivors] = np.arange(len(survivors))
    fine_to_coarse = np.array([coarse_index[find(i)] for i in range(n)], dtype=np.int64)

    coarse_faces = _collapse_faces(mesh.topology.faces, fine_to_coarse)
    coarse_topology = build_topology(coarse_faces, len(survivors))
    coarse_mesh = SurfaceMesh(coarse_topology, positions[survivors])
    level = SimplificationLevel(
        fine=mesh.topology,
        coarse=coarse_topology,
        factor=float(factor),
        fine_to_coarse=fine_to_coarse,
        coarse_rep=survivors.astype(np.int64),
        contractions=tuple(log),
    )
    return coarse_mesh, level


def _collapse_faces(faces: np.ndarray, fine_to_coarse: np.ndarray) -> np.ndarray:
    mapped = fine_to_coarse[faces]
    keep = (
        (mapped[:, 0] != mapped[:, 1])
        & (mapped[:, 1] != mapped[:, 2])
        & (mapped[:, 0] != mapped[:, 2])
    )
    mapped = mapped[keep]
    seen = set()
    rows = []
    for f in mapped:
        shift = int(np.argmin(f))
        canon = tuple(np.roll(f, -shift))
        if canon not in seen:
            seen.add(canon)
            rows.append(canon)
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def build_hierarchy(template: SurfaceMesh, factor: float, depth: int) -> SimplificationHierarchy:
    """Simplify ``depth`` times at the same factor, recording every level."""
    levels = []
    meshes = []
    current = template
    for _ in range(depth):
        current, level = quadric_simplify(current, factor)
        levels.append(level)
        meshes.append(current)
    return SimplificationHierarchy(template, levels, meshes)


def down_transfer(fine_features: np.ndarray, level: SimplificationLevel) -> np.ndarray:
    """Restrict fine features to the coarse level (surviving vertices keep theirs)."""
    fine_features = np.asarray(fine_features)
    if fine_features.shape[0] != level.fine.vertex_count:
        raise ValueError(
            f"expected {level.fine.vertex_count} rows, got {fine_features.shape[0]}"
        )
    return fine_features[level.coarse_rep]


def unsimplify(coarse_features: np.ndarray, level: SimplificationLevel) -> np.ndarray:
    """Reverse the contractions: each fine vertex receives its merge target's feature."""
    coarse_features = np.asarray(coarse_features)
    if coarse_features.shape[0] != level.coarse.vertex_count:
        raise ValueError(
            f"expected {level.coarse.vertex_count} rows, got {coarse_features.shape[0]}"
        )
    return coarse_features[level.fine_to_coarse]


def replay_contractions(level: SimplificationLevel, fine_vertices: np.ndarray) -> np.ndarray:
    """Re-apply the recorded contraction log; returns the coarse vertex array."""
    pos = np.array(fine_vertices, dtype=np.float64)
    alive = np.ones(level.fine.vertex_count, dtype=bool)
    for c in level.contractions:
        if not (alive[c.keep] and alive[c.drop]):
            raise ValueError("contraction log references a removed vertex")
        pos[c.keep] = c.target
        alive[c.drop] = False
    return pos[np.flatnonzero(alive)]
