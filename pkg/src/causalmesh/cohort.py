"""Synthetic cohort generator with a known ground-truth causal model.

Subjects are icosphere meshes deformed by closed-form assignments:

    a = 44 + eps_a,                eps_a ~ Gamma(4, scale=4)         [years]
    s = eps_s,                     eps_s ~ Bernoulli(0.48)           [1=male]
    b = 1180 + 140 s - 3 (a - 60) + n_b,   n_b ~ N(0, 50^2)          [ml]
    v = 1.5 + 0.016 b - 0.05 (a - 60) + n_v,  n_v ~ N(0, 1.2^2)      [ml]
    mesh = radial scale (v / template volume)^(1/3)
           x  (1 + spherical-harmonic bumps weighted by b and w),  w ~ N(0, I_2)

so brain volume decreases with age and is larger for males, structure volume
increases with brain volume, and the mesh carries both a scale signal (from v)
and a shape signal (from b and the per-subject latent w). Because every
assignment is deterministic given the stored noise, exact counterfactuals are
available for any intervention.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .mesh.io import read_ply, write_ply
from .mesh.surface import SurfaceMesh, enclosed_volume
from .mesh.topology import build_topology

MANIFEST_HEADER = ["id", "age", "sex", "brain_volume", "structure_volume", "mesh_path", "split"]

_ICO_T = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTICES = np.array(
    [
        (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
        (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
        (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


def make_icosphere(subdivisions: int) -> SurfaceMesh:
    """Unit icosphere with 10 * 4^n + 2 vertices and outward-wound faces."""
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    vertices = list(_ICO_VERTICES / np.linalg.norm(_ICO_VERTICES[0]))
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in midpoint_cache:
                p = vertices[i] + vertices[j]
                vertices.append(p / np.linalg.norm(p))
                midpoint_cache[key] = len(vertices) - 1
            return midpoint_cache[key]

        next_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            next_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = next_faces
    vertex_array = np.array(vertices, dtype=np.float64)
    topology = build_topology(np.array(faces, dtype=np.int64), len(vertices))
    return SurfaceMesh(topology, vertex_array)


@lru_cache(maxsize=8)
def icosphere_template(subdivisions: int) -> SurfaceMesh:
    return make_icosphere(subdivisions)


@dataclass(frozen=True)
class SubjectNoise:
    """Exogenous variables of one subject; enough to replay the ground truth."""

    eps_a: float
    eps_s: int
    n_b: float
    n_v: float
    w: np.ndarray  # (2,) shape latent


@dataclass(frozen=True)
class GroundTruthScm:
    """Closed-form causal model behind the synthetic cohort."""

    subdivisions: int = 2
    age_offset: float = 44.0
    age_shape: float = 4.0
    age_scale: float = 4.0
    sex_p: float = 0.48
    b_base: float = 1180.0
    b_sex: float = 140.0
    b_age: float = -3.0
    b_noise: float = 50.0
    b_floor: float = 400.0
    v_base: float = 1.5
    v_b: float = 0.016
    v_age: float = -0.05
    v_noise: float = 1.2
    v_floor: float = 5.0
    bump_b: float = 0.03
    bump_w: float = 0.05
    b_center: float = 1250.0
    b_spread: float = 120.0

    def template(self) -> SurfaceMesh:
        return icosphere_template(self.subdivisions)

    def sample_noise(self, rng: np.random.Generator) -> SubjectNoise:
        return SubjectNoise(
            eps_a=float(rng.gamma(self.age_shape, self.age_scale)),
            eps_s=int(rng.random() < self.sex_p),
            n_b=float(rng.normal(0.0, self.b_noise)),
            n_v=float(rng.normal(0.0, self.v_noise)),
            w=rng.normal(0.0, 1.0, size=2),
        )

    def assign(self, noise: SubjectNoise, interventions: dict | None = None) -> dict:
        """Evaluate the covariate assignments, overriding intervened nodes."""
        iv = dict(interventions or {})
        unknown = set(iv) - {"a", "s", "b", "v"}
        if unknown:
            raise KeyError(f"unknown intervention node(s): {sorted(unknown)}")
        a = float(iv.get("a", self.age_offset + noise.eps_a))
        s = int(iv.get("s", noise.eps_s))
        b = float(
            iv.get(
                "b",
                max(
                    self.b_base + self.b_sex * s + self.b_age * (a - 60.0) + noise.n_b,
                    self.b_floor,
                ),
            )
        )
        v = float(
            iv.get(
                "v",
                max(
                    self.v_base + self.v_b * b + self.v_age * (a - 60.0) + noise.n_v,
                    self.v_floor,
                ),
            )
        )
        return {"a": a, "s": s, "b": b, "v": v}

    def mesh_for(self, v: float, b: float, w: np.ndarray) -> SurfaceMesh:
        """Deform the template: radial volume scaling times harmonic bumps.

        The radius is calibrated against the discrete template's enclosed
        volume so the generated mesh encloses ~v ml (1 ml = 1000 mm^3), and
        the bump fields are zero-mean on the sphere so they perturb shape
        with only a second-order effect on volume.
        """
        template = self.template()
        dirs = template.vertices
        b_tilde = (b - self.b_center) / self.b_spread
        bump = self.bump_b * b_tilde * (dirs[:, 2] ** 2 - 1.0 / 3.0)
        bump = bump + self.bump_w * (w[0] * dirs[:, 0] * dirs[:, 1] + w[1] * dirs[:, 0] * dirs[:, 2])
        radial = np.clip(1.0 + bump, 0.2, None)
        unit_volume = _unit_template_volume(self.subdivisions)
        radius_mm = (1000.0 * v / unit_volume) ** (1.0 / 3.0)
        return template.with_vertices(radius_mm * radial[:, None] * dirs)

    def generate(self, noise: SubjectNoise, interventions: dict | None = None):
        """(covariates, mesh) for one subject under optional interventions."""
        record = self.assign(noise, interventions)
        mesh = self.mesh_for(record["v"], record["b"], noise.w)
        return record, mesh


@lru_cache(maxsize=8)
def _unit_template_volume(subdivisions: int) -> float:
    return enclosed_volume(icosphere_template(subdivisions))


def oracle_counterfactual(scm: GroundTruthScm, noise: SubjectNoise, interventions: dict):
    """Exact counterfactual from the generator's own closed forms."""
    return scm.generate(noise, interventions)


@dataclass
class ManifestRow:
    id: str
    age: float
    sex: int
    brain_volume: float
    structure_volume: float
    mesh_path: str
    split: str


@dataclass
class CohortManifest:
    """Rows of generated subjects plus the directory they live in."""

    root: Path
    rows: list[ManifestRow] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def path(self) -> Path:
        return self.root / "manifest.csv"

    def mesh_file(self, row: ManifestRow) -> Path:
        return self.root / row.mesh_path

    def write(self) -> Path:
        out = self.path()
        with open(out, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(MANIFEST_HEADER)
            for r in self.rows:
                writer.writerow(
                    [
                        r.id,
                        format(r.age, ".17g"),
                        r.sex,
                        format(r.brain_volume, ".17g"),
                        format(r.structure_volume, ".17g"),
                        r.mesh_path,
                        r.split,
                    ]
                )
        return out

    @staticmethod
    def read(path) -> "CohortManifest":
        path = Path(path)
        rows = []
        with open(path, newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader)
            if header != MANIFEST_HEADER:
                raise ValueError(f"{path}: unexpected manifest header {header}")
            for rec in reader:
                rows.append(
                    ManifestRow(
                        id=rec[0],
                        age=float(rec[1]),
                        sex=int(rec[2]),
                        brain_volume=float(rec[3]),
                        structure_volume=float(rec[4]),
                        mesh_path=rec[5],
                        split=rec[6],
                    )
                )
        return CohortManifest(root=path.parent, rows=rows)


def subject_rng(seed: int, subject_index: int) -> np.random.Generator:
    """Independent per-subject stream derived from (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence((seed, subject_index)))


def sample_cohort(
    scm: GroundTruthScm,
    counts: tuple[int, int, int],
    seed: int,
    out_dir,
) -> CohortManifest:
    """Generate subjects, write PLY meshes plus manifest.csv and noise.npz.

    Split sizes are ``counts = (train, val, test)``; subjects are assigned to
    splits in generation order. Everything is deterministic given ``seed``.
    """
    out_dir = Path(out_dir)
    mesh_dir = out_dir / "meshes"
    mesh_dir.mkdir(parents=True, exist_ok=True)
    n_total = sum(counts)
    split_names = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]

    manifest = CohortManifest(root=out_dir)
    noise_rows = {"eps_a": [], "eps_s": [], "n_b": [], "n_v": [], "w": []}
    ids = []
    for idx in range(n_total):
        rng = subject_rng(seed, idx)
        noise = scm.sample_noise(rng)
        record, mesh = scm.generate(noise)
        subject_id = f"s{idx:05d}"
        rel_path = f"meshes/{subject_id}.ply"
        write_ply(out_dir / rel_path, mesh.vertices, mesh.topology.faces)
        manifest.rows.append(
            ManifestRow(
                id=subject_id,
                age=record["a"],
                sex=record["s"],
                brain_volume=record["b"],
                structure_volume=record["v"],
                mesh_path=rel_path,
                split=split_names[idx],
            )
        )
        ids.append(subject_id)
        noise_rows["eps_a"].append(noise.eps_a)
        noise_rows["eps_s"].append(noise.eps_s)
        noise_rows["n_b"].append(noise.n_b)
        noise_rows["n_v"].append(noise.n_v)
        noise_rows["w"].append(noise.w)
    manifest.write()
    np.savez(
        out_dir / "noise.npz",
        id=np.array(ids),
        eps_a=np.array(noise_rows["eps_a"]),
        eps_s=np.array(noise_rows["eps_s"], dtype=np.int64),
        n_b=np.array(noise_rows["n_b"]),
        n_v=np.array(noise_rows["n_v"]),
        w=np.array(noise_rows["w"]),
    )
    return manifest


def load_noise(out_dir) -> dict[str, SubjectNoise]:
    """Per-subject exogenous noise saved by sample_cohort, keyed by id."""
    data = np.load(Path(out_dir) / "noise.npz")
    table = {}
    for i, subject_id in enumerate(data["id"]):
        table[str(subject_id)] = SubjectNoise(
            eps_a=float(data["eps_a"][i]),
            eps_s=int(data["eps_s"][i]),
            n_b=float(data["n_b"][i]),
            n_v=float(data["n_v"][i]),
            w=data["w"][i],
        )
    return table


def load_split_arrays(manifest: CohortManifest, split: str):
    """Stack one split into training arrays.

    Returns
    -------
    dict with keys ``a``, ``s``, ``b``, ``v`` (float64 vectors), ``x``
    (float64 array of shape (n, |V|, 3)) and ``ids`` (list of str).
    """
    rows = manifest.split(split)
    if not rows:
        raise ValueError(f"manifest has no rows for split '{split}'")
    a = np.array([r.age for r in rows])
    s = np.array([float(r.sex) for r in rows])
    b = np.array([r.brain_volume for r in rows])
    v = np.array([r.structure_volume for r in rows])
    meshes = []
    faces = None
    for r in rows:
        vertices, f, _ = read_ply(manifest.mesh_file(r))
        if faces is None:
            faces = f
        meshes.append(vertices)
    return {
        "a": a,
        "s": s,
        "b": b,
        "v": v,
        "x": np.stack(meshes),
        "faces": faces,
        "ids": [r.id for r in rows],
    }
