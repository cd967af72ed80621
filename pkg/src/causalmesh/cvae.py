"""Conditional mesh VAE: the amortised mechanism that generates vertices.

Encoder and decoder are stacks of Chebyshev spectral convolutions over a
quadric simplification hierarchy. Both are conditioned on the whitened
volume intermediates [v_hat, b_hat]: the encoder concatenates them to the
flattened features before the latent head, the decoder concatenates them
to the latent before the dense lift. The decoder ends in two parallel
order-K output convolutions producing the likelihood location and scale,
and the mesh itself is produced by the exact location-scale map
x = u * sigma + mu whose inverse recovers the sensor noise u.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .mesh.chebyshev import cheb_filter
from .mesh.simplify import build_hierarchy
from .mesh.surface import SurfaceMesh
from .mesh.topology import MeshTopology


class ElboDivergenceError(FloatingPointError):
    """Raised when an ELBO term goes non-finite; names the offending term."""

    def __init__(self, term: str):
        super().__init__(f"non-finite ELBO term: {term}")
        self.term = term


@dataclass(frozen=True)
class MeshCvaeConfig:
    """Architecture knobs for the mesh mechanism."""

    latent_dim: int = 32
    cheb_order: int = 10
    pool_factor: float = 2.0
    encoder_channels: tuple = (32, 64, 128)
    conditioning_dim: int = 2
    sigma_floor: float = 1e-4
    log_var_clamp: float = 12.0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.cheb_order < 1:
            raise ValueError("cheb_order must be >= 1")
        if self.pool_factor <= 1.0:
            raise ValueError("pool_factor must be > 1")
        if not self.encoder_channels:
            raise ValueError("encoder_channels must be non-empty")


class ChebConv(nn.Module):
    """Order-K spectral convolution with fan-in scaled Gaussian init."""

    def __init__(self, topology: MeshTopology, in_channels: int, out_channels: int, order: int, dtype):
        super().__init__()
        self.topology = topology
        std = math.sqrt(2.0 / (in_channels * order))
        theta = torch.randn(order, in_channels, out_channels, dtype=dtype) * std
        self.theta = nn.Parameter(theta)

    def forward(self, x):
        return cheb_filter(self.topology, x, self.theta)


class MeshCvae(nn.Module):
    """Conditional VAE over registered meshes with a fixed template topology."""

    def __init__(self, template: SurfaceMesh, config: MeshCvaeConfig, dtype=torch.float32, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.config = config
        self.dtype_ = dtype
        self.template = template
        depth = len(config.encoder_channels)
        self.hierarchy = build_hierarchy(template, config.pool_factor, depth)
        self.topologies = [self.hierarchy.topology_at(i) for i in range(depth + 1)]
        # pooling index maps, registered so they follow the module's device
        for i, level in enumerate(self.hierarchy.levels):
            self.register_buffer(
                f"_down_{i}", torch.from_numpy(level.coarse_rep.copy()), persistent=False
            )
            self.register_buffer(
                f"_up_{i}", torch.from_numpy(level.fine_to_coarse.copy()), persistent=False
            )

        K = config.cheb_order
        cond = config.conditioning_dim
        chans = [3, *config.encoder_channels]
        self.encoder_convs = nn.ModuleList(
            ChebConv(self.topologies[i], chans[i], chans[i + 1], K, dtype) for i in range(depth)
        )
        coarse_n = self.topologies[depth].vertex_count
        flat = coarse_n * chans[-1]
        self.encoder_head = nn.Linear(flat + cond, 2 * config.latent_dim, dtype=dtype)
        self.decoder_lift = nn.Linear(config.latent_dim + cond, flat, dtype=dtype)
        dec_chans = [*reversed(config.encoder_channels), 3]
        self.decoder_convs = nn.ModuleList(
            ChebConv(self.topologies[depth - 1 - i], dec_chans[i], dec_chans[i + 1], K, dtype)
            for i in range(depth)
        )
        self.mu_head = ChebConv(self.topologies[0], 3, 3, K, dtype)
        self.sigma_head = ChebConv(self.topologies[0], 3, 3, K, dtype)
        self.act = nn.ELU()
        # likelihood location is a residual on the template so training starts
        # at the population mean instead of the origin
        self.register_buffer(
            "template_offset", torch.from_numpy(np.ascontiguousarray(template.vertices)).to(dtype)
        )

    def _check_vertices(self, x: torch.Tensor):
        v = self.template.vertex_count
        if x.shape[-2] != v or x.shape[-1] != 3:
            raise ValueError(f"expected vertex array (..., {v}, 3), got {tuple(x.shape)}")

    def _cond(self, conditioning: torch.Tensor) -> torch.Tensor:
        conditioning = torch.as_tensor(conditioning, dtype=self.dtype_)
        if conditioning.shape[-1] != self.config.conditioning_dim:
            raise ValueError(
                f"conditioning must have last dim {self.config.conditioning_dim}"
            )
        return conditioning

    def encode(self, x, conditioning):
        """q(z | x, v_hat, b_hat) parameters: (mu_z, log_var_z), each (B, D)."""
        x = torch.as_tensor(x, dtype=self.dtype_)
        self._check_vertices(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        cond = self._cond(conditioning)
        if cond.ndim == 1:
            cond = cond[None]
        h = x - self.template_offset  # deviations are the informative signal
        for i, conv in enumerate(self.encoder_convs):
            h = self.act(conv(h))
            h = h[:, getattr(self, f"_down_{i}"), :]
        h = h.reshape(h.shape[0], -1)
        h = torch.cat([h, cond], dim=-1)
        out = self.encoder_head(h)
        mu_z, log_var = out.chunk(2, dim=-1)
        log_var = torch.clamp(log_var, -self.config.log_var_clamp, self.config.log_var_clamp)
        if squeeze:
            return mu_z[0], log_var[0]
        return mu_z, log_var

    def decode(self, z, conditioning):
        """Likelihood parameters (mu, sigma), each (B, |V|, 3), sigma >= floor."""
        z = torch.as_tensor(z, dtype=self.dtype_)
        squeeze = z.ndim == 1
        if squeeze:
            z = z[None]
        cond = self._cond(conditioning)
        if cond.ndim == 1:
            cond = cond[None]
        depth = len(self.decoder_convs)
        h = self.decoder_lift(torch.cat([z, cond], dim=-1))
        coarse_n = self.topologies[depth].vertex_count
        h = h.reshape(z.shape[0], coarse_n, -1)
        for i, conv in enumerate(self.decoder_convs):
            level_idx = depth - 1 - i
            h = h[:, getattr(self, f"_up_{level_idx}"), :]
            h = self.act(conv(h))
        mu = self.mu_head(h) + self.template_offset
        sigma = nn.functional.softplus(self.sigma_head(h)) + self.config.sigma_floor
        if squeeze:
            return mu[0], sigma[0]
        return mu, sigma

    def sample_posterior(self, mu_z, log_var, generator=None):
        eps = torch.randn(mu_z.shape, generator=generator, dtype=mu_z.dtype, device=mu_z.device)
        return mu_z + torch.exp(0.5 * log_var) * eps


def reparam_forward(u, mu, sigma):
    """Exact location-scale map x = u * sigma + mu, computed in float64."""
    u64 = torch.as_tensor(u, dtype=torch.float64)
    mu64 = torch.as_tensor(mu, dtype=torch.float64)
    sigma64 = torch.as_tensor(sigma, dtype=torch.float64)
    if torch.any(sigma64 <= 0):
        raise ValueError("sigma must be strictly positive")
    return u64 * sigma64 + mu64


def reparam_inverse(x, mu, sigma):
    """Exact inverse u = (x - mu) / sigma, computed in float64."""
    x64 = torch.as_tensor(x, dtype=torch.float64)
    mu64 = torch.as_tensor(mu, dtype=torch.float64)
    sigma64 = torch.as_tensor(sigma, dtype=torch.float64)
    if torch.any(sigma64 <= 0):
        raise ValueError("sigma must be strictly positive")
    return (x64 - mu64) / sigma64


def reparam_log_det(sigma):
    """log |det| of the location-scale map: sum of log sigma."""
    sigma64 = torch.as_tensor(sigma, dtype=torch.float64)
    return torch.log(sigma64).sum(dim=tuple(range(1, sigma64.ndim))) if sigma64.ndim > 1 else torch.log(sigma64).sum()


def gaussian_kl(mu_z, log_var):
    """KL[q || N(0, I)] in closed form, per sample; always >= 0."""
    return 0.5 * (torch.exp(log_var) + mu_z**2 - 1.0 - log_var).sum(dim=-1)


def mesh_log_likelihood(x, mu, sigma):
    """log p(x | z, parents) via change of variables through the location-scale map.

    Identical to the diagonal Gaussian density N(x; mu, sigma^2) summed over
    the 3|V| coordinates.
    """
    u = (x - mu) / sigma
    per_coord = -0.5 * u**2 - torch.log(sigma) - 0.5 * math.log(2.0 * math.pi)
    return per_coord.sum(dim=(-2, -1))


def elbo_terms(model: MeshCvae, x, conditioning, alpha, generator=None):
    """Per-sample ELBO = alpha + E_q[log p(x|z, parents)] - KL, one MC particle.

    Parameters
    ----------
    x : (B, |V|, 3) tensor of registered meshes.
    conditioning : (B, 2) tensor of [v_hat, b_hat].
    alpha : (B,) tensor of summed covariate mechanism log-densities.

    Returns
    -------
    dict with per-sample tensors ``elbo``, ``alpha``, ``recon``, ``kl`` plus
    the sampled latent. Raises ElboDivergenceError naming any non-finite term.
    """
    x = torch.as_tensor(x, dtype=model.dtype_)
    mu_z, log_var = model.encode(x, conditioning)
    z = model.sample_posterior(mu_z, log_var, generator=generator)
    mu, sigma = model.decode(z, conditioning)
    recon = mesh_log_likelihood(x, mu, sigma)
    kl = gaussian_kl(mu_z, log_var)
    alpha = torch.as_tensor(alpha, dtype=recon.dtype)
    for term, value in (("alpha", alpha), ("reconstruction", recon), ("kl", kl)):
        if not torch.all(torch.isfinite(value)):
            raise ElboDivergenceError(term)
    return {
        "elbo": alpha + recon - kl,
        "alpha": alpha,
        "recon": recon,
        "kl": kl,
        "z": z,
        "mu": mu,
        "sigma": sigma,
    }


def reconstruct_exact(model: MeshCvae, mesh: SurfaceMesh, conditioning) -> SurfaceMesh:
    """Round-trip a mesh through (z, u) abduction and exact regeneration.

    Uses the posterior mean latent and the exactly inverted sensor noise, so
    the output equals the input to floating-point precision.
    """
    x = torch.from_numpy(np.ascontiguousarray(mesh.vertices))
    with torch.no_grad():
        mu_z, _ = model.encode(x.to(model.dtype_), conditioning)
        mu, sigma = model.decode(mu_z, conditioning)
        u = reparam_inverse(x, mu, sigma)
        x_rec = reparam_forward(u, mu, sigma)
    return mesh.with_vertices(x_rec.numpy())
