"""Joint SVI training of all mechanisms and checkpoint serialization.

One Adam optimizer with two parameter groups (covariate flows at 1e-3, mesh
mechanism at 1e-4) ascends the ELBO with a single Monte-Carlo particle per
step. Sex is fitted by closed-form MLE before gradient training starts.
Divergence (any non-finite ELBO term) aborts the run, restores the last
epoch's parameters and raises TrainingDivergedError.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .cvae import ElboDivergenceError, MeshCvae, MeshCvaeConfig, elbo_terms
from .flows import fit_normalisation
from .mesh.surface import SurfaceMesh
from .mesh.topology import build_topology
from .scm import CausalGraph, StructuralCausalModel, make_model

CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when training hits a non-finite loss; model holds last good state."""

    def __init__(self, epoch: int, term: str):
        super().__init__(f"training diverged at epoch {epoch} (term: {term}); restored last good state")
        self.epoch = epoch
        self.term = term


@dataclass
class TrainingConfig:
    epochs: int = 1000
    batch_size: int = 256
    lr_covariates: float = 1e-3
    lr_mesh: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_covariates <= 0 or self.lr_mesh <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class EpochStats:
    epoch: int
    elbo: float
    alpha: float
    recon: float
    kl: float
    recon_ved: float
    val_elbo: float | None = None


def _tensorize(data: dict):
    return {
        "a": torch.as_tensor(data["a"], dtype=torch.float64),
        "s": torch.as_tensor(data["s"], dtype=torch.float64),
        "b": torch.as_tensor(data["b"], dtype=torch.float64),
        "v": torch.as_tensor(data["v"], dtype=torch.float64),
        "x": torch.as_tensor(data["x"], dtype=torch.float64),
    }


def _batch_elbo(model: StructuralCausalModel, t: dict, idx: torch.Tensor, generator):
    alpha = model.covariate_log_evidence_batch(
        t["a"][idx], t["s"][idx], t["b"][idx], t["v"][idx]
    )
    cond = model.mesh_conditioning({k: t[k][idx] for k in ("a", "s", "b", "v")})
    x = t["x"][idx].to(model.cvae.dtype_)
    return elbo_terms(
        model.cvae, x, cond.to(model.cvae.dtype_), alpha.to(model.cvae.dtype_), generator=generator
    )


def evaluate_elbo(model: StructuralCausalModel, data: dict, seed: int = 0) -> float:
    """Deterministic mean ELBO over a dataset (fixed MC noise from seed)."""
    t = _tensorize(data)
    g = torch.Generator().manual_seed(seed)
    n = t["a"].shape[0]
    total = 0.0
    with torch.no_grad():
        for start in range(0, n, 512):
            idx = torch.arange(start, min(start + 512, n))
            out = _batch_elbo(model, t, idx, g)
            total += float(out["elbo"].sum())
    return total / n


def _reconstruction_ved(model: StructuralCausalModel, t: dict, max_n: int = 128) -> float:
    """Mean VED between data and the decoder mean at the posterior mean latent."""
    n = min(max_n, t["a"].shape[0])
    idx = torch.arange(n)
    with torch.no_grad():
        cond = model.mesh_conditioning({k: t[k][idx] for k in ("a", "s", "b", "v")})
        x = t["x"][idx].to(model.cvae.dtype_)
        mu_z, _ = model.cvae.encode(x, cond.to(model.cvae.dtype_))
        mu, _ = model.cvae.decode(mu_z, cond.to(model.cvae.dtype_))
        dist = torch.linalg.norm(x.to(torch.float64) - mu.to(torch.float64), dim=-1)
    return float(dist.mean())


def make_optimizer(model: StructuralCausalModel, config: TrainingConfig) -> torch.optim.Optimizer:
    """One Adam with separate learning rates for flows and the mesh model."""
    flow_params = (
        list(model.mech_a.parameters())
        + list(model.mech_b.parameters())
        + list(model.mech_v.parameters())
    )
    return torch.optim.Adam(
        [
            {"params": flow_params, "lr": config.lr_covariates},
            {"params": list(model.cvae.parameters()), "lr": config.lr_mesh},
        ]
    )


def train_model(
    model: StructuralCausalModel,
    data: dict,
    config: TrainingConfig,
    val_data: dict | None = None,
    start_epoch: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
) -> list[EpochStats]:
    """Gradient-ascend the ELBO; returns the per-epoch training log.

    ``data`` holds arrays a, s, b, v, x as produced by cohort loading. Sex
    theta is fitted by MLE here. On divergence the last completed epoch's
    parameters are restored before TrainingDivergedError is raised.

    ``config.epochs`` counts the epochs run by this call; with a nonzero
    ``start_epoch`` (resume) the log numbering continues from there.
    """
    t = _tensorize(data)
    model.mech_s.fit_mle(t["s"])
    n = t["a"].shape[0]
    if optimizer is None:
        optimizer = make_optimizer(model, config)
    g_shuffle = torch.Generator().manual_seed(config.seed + 2 * start_epoch)
    g_mc = torch.Generator().manual_seed(config.seed + 2 * start_epoch + 1)
    log: list[EpochStats] = []
    last_good = copy.deepcopy(model.state_dict())
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        perm = torch.randperm(n, generator=g_shuffle)
        sums = {"elbo": 0.0, "alpha": 0.0, "recon": 0.0, "kl": 0.0}
        try:
            for start in range(0, n, config.batch_size):
                idx = perm[start : start + config.batch_size]
                out = _batch_elbo(model, t, idx, g_mc)
                loss = -out["elbo"].mean()
                if not torch.isfinite(loss):
                    raise ElboDivergenceError("loss")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                for key in sums:
                    sums[key] += float(out[key].detach().sum())
        except ElboDivergenceError as err:
            model.load_state_dict(last_good)
            raise TrainingDivergedError(epoch, err.term) from err
        stats = EpochStats(
            epoch=epoch,
            elbo=sums["elbo"] / n,
            alpha=sums["alpha"] / n,
            recon=sums["recon"] / n,
            kl=sums["kl"] / n,
            recon_ved=_reconstruction_ved(model, t),
            val_elbo=evaluate_elbo(model, val_data, seed=config.seed) if val_data else None,
        )
        log.append(stats)
        last_good = copy.deepcopy(model.state_dict())
    return log


def derive_template(data: dict) -> SurfaceMesh:
    """Training template: the dataset topology with mean train vertices."""
    faces = data["faces"]
    mean_vertices = np.asarray(data["x"]).mean(axis=0)
    return SurfaceMesh(build_topology(faces, mean_vertices.shape[0]), mean_vertices)


def fit_whitening(data: dict) -> dict:
    """Train-split whitening statistics for the three continuous covariates."""
    return {
        "a": fit_normalisation(torch.as_tensor(data["a"])),
        "b": fit_normalisation(torch.as_tensor(data["b"])),
        "v": fit_normalisation(torch.as_tensor(data["v"])),
    }


def save_checkpoint(
    path,
    model: StructuralCausalModel,
    training_log: list[EpochStats],
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    """Single-archive checkpoint: config, parameters, template, topology hash."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "cvae_config": asdict(model.cvae.config),
        "graph_parents": dict(model.graph.parents),
        "spline_bins": model.mech_a.body.bins,
        "dtype": "float64" if model.cvae.dtype_ == torch.float64 else "float32",
        "state_dict": model.state_dict(),
        "topology_hash": model.template.topology.hash(),
        "template_vertices": np.asarray(model.template.vertices),
        "template_faces": np.asarray(model.template.topology.faces),
        "training_log": [asdict(e) for e in training_log],
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, expected_topology_hash: str | None = None):
    """Rebuild a model from a checkpoint; refuses a mismatched template hash.

    Returns (model, payload).
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    if expected_topology_hash is not None and payload["topology_hash"] != expected_topology_hash:
        raise ValueError(
            "checkpoint topology hash does not match the requested template; refusing to load"
        )
    template = SurfaceMesh(
        build_topology(payload["template_faces"], payload["template_vertices"].shape[0]),
        payload["template_vertices"],
    )
    if template.topology.hash() != payload["topology_hash"]:
        raise ValueError("checkpoint is internally inconsistent: template hash mismatch")
    cfg_dict = dict(payload["cvae_config"])
    cfg_dict["encoder_channels"] = tuple(cfg_dict["encoder_channels"])
    config = MeshCvaeConfig(**cfg_dict)
    dtype = torch.float64 if payload["dtype"] == "float64" else torch.float32
    model = make_model(
        template,
        config,
        graph=CausalGraph(payload["graph_parents"]),
        dtype=dtype,
        spline_bins=payload["spline_bins"],
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
