"""Structural causal model over (age, sex, brain volume, structure volume, mesh).

Mechanisms hang on a small DAG (default: b <- {s, a}, v <- {b, a},
x <- {v, b}). Conditioning contexts are assembled from parent values, using
the whitened intermediates for continuous covariates and the raw value for
sex. The engine provides ancestral sampling, the covariate log-evidence
(the alpha term of the training objective), exact abduction, interventions,
and the abduct / intervene / re-propagate counterfactual procedure.

Counterfactual propagation is change-tracked: a node that is neither
intervened on nor downstream of a changed parent keeps its observed value
bit-for-bit rather than being recomputed through the flow round trip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .cvae import MeshCvae, reparam_forward, reparam_inverse
from .flows import BernoulliMechanism, FlowMechanism, make_age_mechanism, make_volume_mechanism
from .mesh.surface import SurfaceMesh

COVARIATE_NODES = ("a", "s", "b", "v")
DEFAULT_PARENTS = {
    "a": (),
    "s": (),
    "b": ("s", "a"),
    "v": ("b", "a"),
    "x": ("v", "b"),
}


@dataclass(frozen=True)
class CausalGraph:
    """Parent map over nodes {a, s, b, v, x}; must be acyclic."""

    parents: dict = field(default_factory=lambda: dict(DEFAULT_PARENTS))

    def __post_init__(self):
        nodes = set(COVARIATE_NODES) | {"x"}
        if set(self.parents) != nodes:
            raise ValueError(f"graph must cover nodes {sorted(nodes)}, got {sorted(self.parents)}")
        for node, pa in self.parents.items():
            unknown = set(pa) - nodes
            if unknown:
                raise ValueError(f"unknown parent(s) {sorted(unknown)} of node {node}")
            if "x" in pa:
                raise ValueError("the mesh node x cannot be a parent")
        self.topological_order()  # raises on cycles

    def topological_order(self) -> list:
        """Kahn's algorithm; raises ValueError if the graph has a cycle."""
        remaining = {n: set(pa) for n, pa in self.parents.items()}
        order = []
        while remaining:
            ready = sorted(n for n, pa in remaining.items() if not pa)
            if not ready:
                raise ValueError("causal graph contains a cycle")
            for n in ready:
                order.append(n)
                del remaining[n]
            for pa in remaining.values():
                pa.difference_update(ready)
        return order


@dataclass(frozen=True)
class CovariateRecord:
    """One subject's covariates: years, binary sex, millilitres, millilitres."""

    a: float
    s: float
    b: float
    v: float

    def __post_init__(self):
        for name in ("a", "b", "v"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ValueError(f"covariate {name} must be finite and positive, got {value}")
        if not math.isfinite(self.s):
            raise ValueError("covariate s must be finite")

    def value(self, node: str) -> float:
        return getattr(self, node)


@dataclass
class ExogenousState:
    """Noise sufficient to regenerate a subject through the mechanisms."""

    eps_a: float
    eps_s: float
    eps_b: float
    eps_v: float
    z_x: torch.Tensor  # (D,)
    u_x: torch.Tensor  # (|V|, 3) float64


@dataclass(frozen=True)
class Intervention:
    """Partial map node -> value, e.g. do(a := 80, s := 0.5)."""

    assignments: dict

    def __post_init__(self):
        for node, value in self.assignments.items():
            if node not in COVARIATE_NODES:
                raise ValueError(f"cannot intervene on unknown node '{node}'")
            value = float(value)
            if not math.isfinite(value):
                raise ValueError(f"intervention value for {node} must be finite")
            if node in ("a", "b", "v") and value <= 0:
                raise ValueError(f"intervention on {node} must be positive, got {value}")

    @staticmethod
    def parse(tokens) -> "Intervention":
        """Parse ``do`` syntax tokens like ["a=80", "s=0.5"]."""
        if isinstance(tokens, str):
            tokens = tokens.split()
        assignments = {}
        for tok in tokens:
            if tok == "do":
                continue
            if "=" not in tok:
                raise ValueError(f"intervention token '{tok}' is not of the form node=value")
            node, _, raw = tok.partition("=")
            node = node.strip()
            if node in assignments:
                raise ValueError(f"node '{node}' intervened on twice")
            try:
                assignments[node] = float(raw)
            except ValueError:
                raise ValueError(f"intervention value '{raw}' for {node} is not a number") from None
        return Intervention(assignments)

    def __contains__(self, node: str) -> bool:
        return node in self.assignments

    def __bool__(self) -> bool:
        return bool(self.assignments)


class StructuralCausalModel(nn.Module):
    """All mechanisms plus the graph wiring them together."""

    def __init__(
        self,
        cvae: MeshCvae,
        mech_a: FlowMechanism,
        mech_s: BernoulliMechanism,
        mech_b: FlowMechanism,
        mech_v: FlowMechanism,
        graph: CausalGraph | None = None,
    ):
        super().__init__()
        self.graph = graph or CausalGraph()
        self.cvae = cvae
        self.mech_a = mech_a
        self.mech_s = mech_s
        self.mech_b = mech_b
        self.mech_v = mech_v
        for node in ("b", "v"):
            mech = self.mechanism(node)
            expected = len(self.graph.parents[node])
            if mech.context_dim != expected:
                raise ValueError(
                    f"mechanism {node} expects context dim {mech.context_dim}, "
                    f"graph provides {expected} parents"
                )
        if len(self.graph.parents["x"]) != cvae.config.conditioning_dim:
            raise ValueError("mesh conditioning dim does not match graph parents of x")

    @property
    def template(self) -> SurfaceMesh:
        return self.cvae.template

    def mechanism(self, node: str):
        return {"a": self.mech_a, "s": self.mech_s, "b": self.mech_b, "v": self.mech_v}[node]

    # -- context assembly ---------------------------------------------------

    def _context_feature(self, node: str, values: dict) -> torch.Tensor:
        """Parent feature: raw value for sex, whitened intermediate otherwise."""
        value = torch.as_tensor(values[node], dtype=torch.float64)
        if node == "s":
            return value
        return self.mechanism(node).intermediate_of(value)

    def context_for(self, node: str, values: dict) -> torch.Tensor | None:
        parents = self.graph.parents[node]
        if not parents:
            return None
        feats = [self._context_feature(p, values) for p in parents]
        return torch.stack(feats, dim=-1)

    def mesh_conditioning(self, values: dict) -> torch.Tensor:
        return self.context_for("x", values)

    # -- observational sampling ---------------------------------------------

    def sample_observational(self, n: int, seed: int):
        """Ancestral sampling; returns list of (record, mesh, exogenous state)."""
        if n == 0:
            return []
        g = torch.Generator().manual_seed(seed)
        eps = {
            "a": torch.randn(n, dtype=torch.float64, generator=g),
            "s": self.mech_s.sample_noise(n, g),
            "b": torch.randn(n, dtype=torch.float64, generator=g),
            "v": torch.randn(n, dtype=torch.float64, generator=g),
        }
        D = self.cvae.config.latent_dim
        V = self.template.vertex_count
        z = torch.randn(n, D, dtype=torch.float64, generator=g)
        u = torch.randn(n, V, 3, dtype=torch.float64, generator=g)

        values: dict = {}
        with torch.no_grad():
            for node in ("a", "s", "b", "v"):
                if node == "s":
                    values["s"] = eps["s"]
                    continue
                ctx = self.context_for(node, values)
                values[node], _ = self.mechanism(node).forward_map(eps[node], ctx)
            cond = self.mesh_conditioning(values)
            mu, sigma = self.cvae.decode(z.to(self.cvae.dtype_), cond.to(self.cvae.dtype_))
            x = reparam_forward(u, mu, sigma)

        out = []
        for i in range(n):
            record = CovariateRecord(
                a=float(values["a"][i]), s=float(values["s"][i]),
                b=float(values["b"][i]), v=float(values["v"][i]),
            )
            mesh = SurfaceMesh(self.template.topology, x[i].numpy())
            state = ExogenousState(
                eps_a=float(eps["a"][i]), eps_s=float(eps["s"][i]),
                eps_b=float(eps["b"][i]), eps_v=float(eps["v"][i]),
                z_x=z[i], u_x=u[i],
            )
            out.append((record, mesh, state))
        return out

    # -- densities ------------------------------------------------------------

    def covariate_log_evidence_batch(self, a, s, b, v) -> torch.Tensor:
        """alpha = log p(a) + log p(s) + log p(b|pa) + log p(v|pa), per sample."""
        values = {
            "a": torch.as_tensor(a, dtype=torch.float64),
            "s": torch.as_tensor(s, dtype=torch.float64),
            "b": torch.as_tensor(b, dtype=torch.float64),
            "v": torch.as_tensor(v, dtype=torch.float64),
        }
        total = None
        for node in COVARIATE_NODES:
            ctx = self.context_for(node, values)
            lp = self.mechanism(node).log_prob(values[node], ctx)
            total = lp if total is None else total + lp
        return total

    def covariate_log_evidence(self, record: CovariateRecord) -> float:
        with torch.no_grad():
            alpha = self.covariate_log_evidence_batch(record.a, record.s, record.b, record.v)
        return float(alpha)

    # -- abduction ------------------------------------------------------------

    def _check_mesh(self, mesh: SurfaceMesh):
        if not mesh.topology.same_as(self.template.topology):
            raise ValueError("mesh topology does not match the model template")

    def abduct(self, record: CovariateRecord, mesh: SurfaceMesh, z_samples: int = 0, seed: int = 0) -> ExogenousState:
        """Infer all exogenous noise for one subject.

        Covariate noise comes from exact flow inversion and eps_s is the
        observed sex. The latent z_x is the posterior mean when z_samples=0,
        otherwise the average of z_samples posterior draws; u_x is the exact
        location-scale inverse of the observed vertices given that latent.
        """
        self._check_mesh(mesh)
        values = {"a": record.a, "s": record.s, "b": record.b, "v": record.v}
        with torch.no_grad():
            eps = {}
            for node in ("a", "b", "v"):
                ctx = self.context_for(node, values)
                e, _ = self.mechanism(node).inverse_map(
                    torch.as_tensor(values[node], dtype=torch.float64), ctx
                )
                eps[node] = float(e)
            cond = self.mesh_conditioning(values)
            x = torch.from_numpy(np.ascontiguousarray(mesh.vertices))
            mu_z, log_var = self.cvae.encode(x.to(self.cvae.dtype_), cond.to(self.cvae.dtype_))
            if z_samples == 0:
                z = mu_z
            else:
                g = torch.Generator().manual_seed(seed)
                draws = [self.cvae.sample_posterior(mu_z, log_var, generator=g) for _ in range(z_samples)]
                z = torch.stack(draws).mean(dim=0)
            mu, sigma = self.cvae.decode(z, cond.to(self.cvae.dtype_))
            u = reparam_inverse(x, mu, sigma)
        return ExogenousState(
            eps_a=eps["a"], eps_s=float(record.s), eps_b=eps["b"], eps_v=eps["v"],
            z_x=z.to(torch.float64), u_x=u,
        )

    # -- counterfactuals --------------------------------------------------------

    def _propagate(self, state: ExogenousState, intervention: Intervention, observed: CovariateRecord | None):
        """Re-evaluate mechanisms in topological order under an intervention.

        With an observed record, nodes whose parents are all unchanged and
        that are not themselves intervened on keep the observed value
        exactly; everything downstream of a change is recomputed from the
        stored noise.
        """
        eps = {"a": state.eps_a, "s": state.eps_s, "b": state.eps_b, "v": state.eps_v}
        values: dict = {}
        changed: dict = {}
        with torch.no_grad():
            for node in COVARIATE_NODES:
                if node in intervention:
                    value = float(intervention.assignments[node])
                    values[node] = value
                    changed[node] = observed is None or value != observed.value(node)
                    continue
                parents_changed = any(changed[p] for p in self.graph.parents[node])
                if observed is not None and not parents_changed:
                    values[node] = observed.value(node)
                    changed[node] = False
                    continue
                ctx = self.context_for(node, values)
                if node == "s":
                    value = float(eps["s"])
                else:
                    out, _ = self.mechanism(node).forward_map(
                        torch.as_tensor(eps[node], dtype=torch.float64), ctx
                    )
                    value = float(out)
                values[node] = value
                changed[node] = observed is None or value != observed.value(node)
            cond = self.mesh_conditioning(values)
            mu, sigma = self.cvae.decode(state.z_x.to(self.cvae.dtype_), cond.to(self.cvae.dtype_))
            x = reparam_forward(state.u_x, mu, sigma)
        record = CovariateRecord(a=values["a"], s=values["s"], b=values["b"], v=values["v"])
        mesh = SurfaceMesh(self.template.topology, x.numpy())
        return record, mesh

    def predict(self, state: ExogenousState) -> tuple:
        """Regenerate the observation encoded by an exogenous state."""
        return self._propagate(state, Intervention({}), observed=None)

    def counterfactual(
        self,
        record: CovariateRecord,
        mesh: SurfaceMesh,
        intervention: Intervention,
        z_samples: int = 0,
        seed: int = 0,
    ):
        """Abduct, intervene, re-propagate; returns (record_cf, mesh_cf)."""
        state = self.abduct(record, mesh, z_samples=z_samples, seed=seed)
        return self._propagate(state, intervention, observed=record)

    def intervene_population(self, intervention: Intervention, z_x, n: int, seed: int):
        """Population-level intervention with a fixed mesh latent.

        Samples fresh covariate noise n times, applies the intervention,
        propagates, and decodes the likelihood mean (u = 0) for each subject
        with the shared z_x. Returns the meshes and their covariate records.
        """
        g = torch.Generator().manual_seed(seed)
        eps = {
            "a": torch.randn(n, dtype=torch.float64, generator=g),
            "s": self.mech_s.sample_noise(n, g),
            "b": torch.randn(n, dtype=torch.float64, generator=g),
            "v": torch.randn(n, dtype=torch.float64, generator=g),
        }
        values: dict = {}
        with torch.no_grad():
            for node in COVARIATE_NODES:
                if node in intervention:
                    values[node] = torch.full(
                        (n,), float(intervention.assignments[node]), dtype=torch.float64
                    )
                    continue
                ctx = self.context_for(node, values)
                if node == "s":
                    values[node] = eps["s"]
                else:
                    values[node], _ = self.mechanism(node).forward_map(eps[node], ctx)
            cond = self.mesh_conditioning(values)
            z = torch.as_tensor(z_x, dtype=self.cvae.dtype_).expand(n, -1)
            mu, _ = self.cvae.decode(z, cond.to(self.cvae.dtype_))
        meshes = [SurfaceMesh(self.template.topology, mu[i].to(torch.float64).numpy()) for i in range(n)]
        records = [
            CovariateRecord(
                a=float(values["a"][i]), s=float(values["s"][i]),
                b=float(values["b"][i]), v=float(values["v"][i]),
            )
            for i in range(n)
        ]
        return meshes, records


def make_model(
    template: SurfaceMesh,
    cvae_config,
    normalisations: dict | None = None,
    graph: CausalGraph | None = None,
    seed: int = 0,
    dtype=torch.float32,
    spline_bins: int = 8,
) -> StructuralCausalModel:
    """Assemble a fresh model: flow mechanisms wired per the graph plus the CVAE."""
    graph = graph or CausalGraph()
    norms = normalisations or {}
    cvae = MeshCvae(template, cvae_config, dtype=dtype, seed=seed)
    mech_a = make_age_mechanism(norms.get("a"), bins=spline_bins)
    mech_s = BernoulliMechanism()
    mech_b = make_volume_mechanism("b", len(graph.parents["b"]), norms.get("b"))
    mech_v = make_volume_mechanism("v", len(graph.parents["v"]), norms.get("v"))
    return StructuralCausalModel(cvae, mech_a, mech_s, mech_b, mech_v, graph)
