"""Quantitative evaluation procedures over a trained shape model.

Reports are plain tables/curves serialized as JSON and CSV with stable key
order and shortest round-trip float formatting, so rerunning an evaluation
from the same checkpoint and seed reproduces the files byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.decomposition import PCA

from .mesh.surface import SurfaceMesh, chamfer, mean_radius, ved
from .scm import CovariateRecord, Intervention, StructuralCausalModel


@dataclass
class PcaModel:
    """Linear baseline fitted on flattened vertex vectors of the train split."""

    mean: np.ndarray  # (3|V|,)
    components: np.ndarray  # (k, 3|V|)
    explained_variance: np.ndarray  # (k,)
    explained_variance_ratio: np.ndarray  # (k,)

    @staticmethod
    def fit(x: np.ndarray, k: int) -> "PcaModel":
        flat = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
        k = min(k, flat.shape[0], flat.shape[1])
        pca = PCA(n_components=k, svd_solver="full")
        pca.fit(flat)
        return PcaModel(
            mean=pca.mean_,
            components=pca.components_,
            explained_variance=pca.explained_variance_,
            explained_variance_ratio=pca.explained_variance_ratio_,
        )

    def reconstruct(self, x: np.ndarray, k: int | None = None) -> np.ndarray:
        """Project onto the first k components and back; preserves input shape."""
        k = self.components.shape[0] if k is None else k
        if k > self.components.shape[0]:
            raise ValueError(f"requested {k} components, model has {self.components.shape[0]}")
        flat = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
        comp = self.components[:k]
        coeff = (flat - self.mean) @ comp.T
        return (self.mean + coeff @ comp).reshape(x.shape)


@dataclass
class EvalReport:
    """Named tables (lists of row dicts) and curves, reproducibly serializable."""

    name: str
    tables: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "name": self.name,
            "tables": self.tables,
            "curves": self.curves,
            "metadata": self.metadata,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"

    def table_csv(self, table: str) -> str:
        rows = self.tables[table]
        out = io.StringIO()
        if rows:
            writer = csv.DictWriter(out, fieldnames=list(rows[0].keys()), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _csv_cell(v) for k, v in row.items()})
        return out.getvalue()

    def write(self, out_dir) -> list:
        """Write <name>.json plus one CSV per table; returns written paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        json_path = out_dir / f"{self.name}.json"
        json_path.write_text(self.to_json())
        written.append(json_path)
        for table in self.tables:
            path = out_dir / f"{self.name}_{table}.csv"
            path.write_text(self.table_csv(table))
            written.append(path)
        return written


def _csv_cell(value):
    if isinstance(value, float):
        return format(value, ".17g")
    return value


def _stats(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "median": float(np.median(arr)),
    }


def _records(data: dict) -> list:
    return [
        CovariateRecord(a=float(data["a"][i]), s=float(data["s"][i]),
                        b=float(data["b"][i]), v=float(data["v"][i]))
        for i in range(len(data["a"]))
    ]


def _meshes(data: dict, topology) -> list:
    return [SurfaceMesh(topology, data["x"][i]) for i in range(len(data["a"]))]


def _batch_ved(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample VED between two (n, |V|, 3) stacks."""
    return np.linalg.norm(np.asarray(x) - np.asarray(y), axis=-1).mean(axis=-1)


def reconstruction_table(
    model: StructuralCausalModel,
    test_data: dict,
    pca: PcaModel,
    pca_ks=(8, 16, 32),
    seed: int = 0,
) -> EvalReport:
    """Test-split reconstruction errors for each decoding mode plus PCA baselines."""
    if len(test_data["a"]) == 0:
        raise ValueError("empty test set")
    topo = model.template.topology
    records = _records(test_data)
    meshes = _meshes(test_data, topo)
    x = np.asarray(test_data["x"], dtype=np.float64)
    n = len(records)

    values = {k: torch.as_tensor(test_data[k], dtype=torch.float64) for k in ("a", "s", "b", "v")}
    cond = model.mesh_conditioning(values).to(model.cvae.dtype_)
    xt = torch.as_tensor(x, dtype=model.cvae.dtype_)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        mu_z, _ = model.cvae.encode(xt, cond)
        mu, sigma = model.cvae.decode(mu_z, cond)
        u_inf = (torch.as_tensor(x) - mu.to(torch.float64)) / sigma.to(torch.float64)
        x_inferred = (u_inf * sigma.to(torch.float64) + mu.to(torch.float64)).numpy()
        u_smp = torch.randn(x.shape, dtype=torch.float64, generator=g)
        x_sampled = (u_smp * sigma.to(torch.float64) + mu.to(torch.float64)).numpy()

    rows = []

    def add_mode(mode: str, recon: np.ndarray):
        veds = _batch_ved(x, recon)
        chams = [
            chamfer(meshes[i], SurfaceMesh(topo, recon[i])) for i in range(n)
        ]
        row = {"mode": mode}
        row.update({f"ved_{k}": v for k, v in _stats(veds).items()})
        row.update({f"chamfer_{k}": v for k, v in _stats(chams).items()})
        rows.append(row)

    add_mode("inferred_u", x_inferred)
    add_mode("sampled_u", x_sampled)
    for k in pca_ks:
        k_eff = min(k, pca.components.shape[0])
        add_mode(f"pca_{k_eff}", pca.reconstruct(x, k_eff))

    return EvalReport(
        name="reconstruction",
        tables={"modes": rows},
        metadata={"n_test": n, "seed": seed, "pca_ks": list(pca_ks)},
    )


def pca_compactness(meshes_a: np.ndarray, meshes_b: np.ndarray, k: int = 16) -> EvalReport:
    """Explained-variance-ratio curves for two mesh populations."""
    report = EvalReport(name="compactness")
    notes = {}
    for label, stack in (("a", meshes_a), ("b", meshes_b)):
        stack = np.asarray(stack, dtype=np.float64)
        k_eff = min(k, stack.shape[0], stack.reshape(stack.shape[0], -1).shape[1])
        if k_eff < k:
            notes[label] = f"rank limited to {k_eff}"
        fitted = PcaModel.fit(stack, k_eff)
        report.curves[label] = [float(r) for r in fitted.explained_variance_ratio]
    report.metadata = {"k": k, **({"notes": notes} if notes else {})}
    return report


def specificity(
    model: StructuralCausalModel,
    z_x,
    interventions: dict,
    n_per_setting: int,
    test_data: dict,
    seed: int = 0,
) -> EvalReport:
    """Mean VED from each generated post-interventional mesh to the test set."""
    test_x = np.asarray(test_data["x"], dtype=np.float64)
    rows = []
    for j, (label, iv) in enumerate(sorted(interventions.items())):
        meshes, _ = model.intervene_population(iv, z_x, n_per_setting, seed=seed + j)
        errors = []
        for m in meshes:
            diffs = np.linalg.norm(test_x - m.vertices[None], axis=-1).mean(axis=-1)
            errors.append(float(diffs.mean()))
        row = {"intervention": label, "n": n_per_setting}
        row.update({f"specificity_{k}": v for k, v in _stats(errors).items()})
        rows.append(row)
    return EvalReport(
        name="specificity",
        tables={"interventions": rows},
        metadata={"seed": seed, "n_test": int(test_x.shape[0])},
    )


def latent_interpolation(
    model: StructuralCausalModel,
    dims,
    offset: float,
    v_bar: float,
    b_bar: float,
):
    """Mean shape at z=0 plus per-dimension +/- offset meshes.

    Returns a list of (label, SurfaceMesh, signed displacement field) where
    the displacement is the per-vertex distance to the mean shape, signed by
    the outward radial direction.
    """
    D = model.cvae.config.latent_dim
    for d in dims:
        if d >= D:
            raise ValueError(f"latent dim {d} out of range for D={D}")
    values = {"b": torch.tensor(b_bar, dtype=torch.float64), "v": torch.tensor(v_bar, dtype=torch.float64)}
    cond = model.mesh_conditioning({**values, "a": torch.tensor(1.0), "s": torch.tensor(0.0)})
    cond = cond.to(model.cvae.dtype_)
    with torch.no_grad():
        z0 = torch.zeros(model.cvae.config.latent_dim, dtype=model.cvae.dtype_)
        mu0, _ = model.cvae.decode(z0, cond)
        base = mu0.to(torch.float64).numpy()
        out = [("mean", SurfaceMesh(model.template.topology, base), np.zeros(base.shape[0]))]
        centroid = base.mean(axis=0)
        radial = base - centroid
        radial /= np.linalg.norm(radial, axis=1, keepdims=True)
        for d in dims:
            for sign in (+1.0, -1.0):
                z = z0.clone()
                z[d] = sign * offset
                mu, _ = model.cvae.decode(z, cond)
                verts = mu.to(torch.float64).numpy()
                disp = verts - base
                signed = np.sign((disp * radial).sum(axis=1)) * np.linalg.norm(disp, axis=1)
                label = f"z{d}{'+' if sign > 0 else '-'}{offset:g}"
                out.append((label, SurfaceMesh(model.template.topology, verts), signed))
    return out


def trait_preservation(
    model: StructuralCausalModel,
    test_data: dict,
    age_deltas=(5, 10, 15, 20),
    include_identity: bool = True,
    max_subjects: int | None = None,
) -> EvalReport:
    """Round-trip counterfactual error per intervention bucket.

    For each subject: apply do(a := a + delta) (or the sex flip), then on the
    result apply do(b := b_obs, v := v_obs), and measure VED back to the
    observed mesh. Buckets pool +delta and -delta.
    """
    topo = model.template.topology
    records = _records(test_data)
    meshes = _meshes(test_data, topo)
    if max_subjects is not None:
        records = records[:max_subjects]
        meshes = meshes[:max_subjects]
    radius = mean_radius(meshes)

    buckets: dict = {}
    if include_identity:
        buckets["identity"] = [(lambda r: Intervention({"a": r.a}))]
    for delta in age_deltas:
        buckets[f"do(a+-{delta})"] = [
            (lambda r, d=delta: Intervention({"a": r.a + d})),
            (lambda r, d=delta: Intervention({"a": max(r.a - d, 1.0)})),
        ]
    buckets["do(s)"] = [(lambda r: Intervention({"s": 1.0 - r.s}))]

    rows = []
    for label, makers in buckets.items():
        veds = []
        for record, mesh in zip(records, meshes):
            for make_iv in makers:
                r1, m1 = model.counterfactual(record, mesh, make_iv(record))
                _, m2 = model.counterfactual(r1, m1, Intervention({"b": record.b, "v": record.v}))
                veds.append(ved(m2, mesh))
        row = {"bucket": label, "n": len(veds)}
        row.update({f"ved_{k}": val for k, val in _stats(veds).items()})
        row["median_pct_radius"] = float(100.0 * np.median(veds) / radius)
        rows.append(row)
    return EvalReport(
        name="trait_preservation",
        tables={"buckets": rows},
        metadata={"mean_radius_mm": radius, "n_subjects": len(records),
                  "age_deltas": list(age_deltas)},
    )


def counterfactual_trajectories(
    model: StructuralCausalModel,
    record: CovariateRecord,
    mesh: SurfaceMesh,
    age_offsets=(5, 10, 15, 20),
    sex_values=(0.0, 0.2, 0.4, 0.6, 1.0),
    scale_factors=(0.8, 0.9, 1.0, 1.1, 1.2),
):
    """Covariate paths (b_cf, v_cf) under the four intervention families.

    Returns a dict family -> list of rows with keys
    (step, a, s, b, v, ved_to_observed).
    """
    families: dict = {"do_a": [], "do_s": [], "do_b": [], "do_v": []}
    grids = {
        "do_a": [("a", record.a + t) for t in
                 [0.0, *[+t for t in age_offsets], *[-t for t in age_offsets if record.a - t > 0]]],
        "do_s": [("s", s) for s in sex_values],
        "do_b": [("b", record.b * f) for f in scale_factors],
        "do_v": [("v", record.v * f) for f in scale_factors],
    }
    for family, steps in grids.items():
        for node, value in steps:
            r_cf, m_cf = model.counterfactual(record, mesh, Intervention({node: value}))
            families[family].append(
                {
                    "step": f"do {node}={value:.6g}",
                    "a": r_cf.a,
                    "s": r_cf.s,
                    "b": r_cf.b,
                    "v": r_cf.v,
                    "ved_to_observed": ved(m_cf, mesh),
                }
            )
    return families


def write_trajectory_csv(path, rows) -> None:
    """Trajectory CSV with the canonical column set."""
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(
            handle, fieldnames=["step", "a", "s", "b", "v", "ved_to_observed"], lineterminator="\n"
        )
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_cell(v) for k, v in row.items()})


def shape_projection(
    model: StructuralCausalModel,
    z_x,
    n: int = 5000,
    intervention: Intervention | None = None,
    seed: int = 0,
    embedding=None,
) -> EvalReport:
    """2D embedding of generated meshes with covariate annotations.

    ``embedding`` maps an (n, 3|V|) array to (n, 2); defaults to PCA, which
    keeps the report deterministic.
    """
    iv = intervention or Intervention({})
    meshes, records = model.intervene_population(iv, z_x, n, seed=seed)
    flat = np.stack([m.vertices.reshape(-1) for m in meshes])
    if embedding is None:
        coords = PCA(n_components=2, svd_solver="full").fit_transform(flat)
    else:
        coords = np.asarray(embedding(flat))
    rows = [
        {
            "x_embed": float(coords[i, 0]),
            "y_embed": float(coords[i, 1]),
            "a": records[i].a,
            "s": records[i].s,
            "b": records[i].b,
            "v": records[i].v,
        }
        for i in range(n)
    ]
    return EvalReport(
        name="shape_projection",
        tables={"points": rows},
        metadata={"seed": seed, "n": n, "intervention": dict(iv.assignments)},
    )
