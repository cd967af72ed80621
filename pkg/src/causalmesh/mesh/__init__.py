"""Mesh core: topology, spectral filtering, simplification, metrics, IO."""

from .chebyshev import cheb_filter
from .io import MeshIOError, read_obj, read_ply, read_surface, write_obj, write_ply, write_surface
from .simplify import (
    Contraction,
    SimplificationHierarchy,
    SimplificationLevel,
    build_hierarchy,
    down_transfer,
    quadric_simplify,
    replay_contractions,
    unsimplify,
)
from .surface import (
    SurfaceMesh,
    chamfer,
    enclosed_volume,
    kabsch_umeyama_align,
    mean_radius,
    similarity_transform,
    ved,
    ved_vertices,
)
from .topology import MeshTopology, TopologyError, build_topology, scale_laplacian

__all__ = [
    "MeshTopology",
    "TopologyError",
    "build_topology",
    "scale_laplacian",
    "SurfaceMesh",
    "ved",
    "ved_vertices",
    "chamfer",
    "enclosed_volume",
    "mean_radius",
    "similarity_transform",
    "kabsch_umeyama_align",
    "cheb_filter",
    "Contraction",
    "SimplificationLevel",
    "SimplificationHierarchy",
    "quadric_simplify",
    "build_hierarchy",
    "down_transfer",
    "unsimplify",
    "replay_contractions",
    "MeshIOError",
    "read_ply",
    "write_ply",
    "read_obj",
    "write_obj",
    "read_surface",
    "write_surface",
]
