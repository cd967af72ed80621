"""Invertible covariate mechanisms built from simple normalizing flows.

Each continuous covariate mechanism is a chain

    value = exp( AffineNormalisation( body(eps; context) ) )

where the body is a monotone linear spline (age) or a conditional affine
transform (brain and structure volumes) and AffineNormalisation carries
frozen whitening statistics of the log-values. The intermediate below the
exp/normalisation head (the whitened log-value) is what downstream
networks condition on. Sex is a Bernoulli mechanism whose noise is the
value itself.

All flow arithmetic runs in float64 so round trips hold to well below 1e-6.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

LOG_SCALE_CLAMP = 7.0


class ExpHead(nn.Module):
    """y = exp(u); log|dy/du| = u."""

    def transform(self, u, context=None):
        return torch.exp(u), u

    def invert(self, y, context=None):
        if torch.any(y <= 0):
            raise ValueError("exp-headed mechanism requires strictly positive values")
        u = torch.log(y)
        return u, u


class AffineNormalisation(nn.Module):
    """Frozen whitening statistics applied in log-space.

    Forward direction is de-whitening (u -> loc + scale * u); the inverse
    produces the whitened intermediate used for conditioning.
    """

    def __init__(self, loc: float = 0.0, scale: float = 1.0):
        super().__init__()
        if scale <= 0:
            raise ValueError("scale must be strictly positive")
        self.register_buffer("loc", torch.tensor(float(loc), dtype=torch.float64))
        self.register_buffer("scale", torch.tensor(float(scale), dtype=torch.float64))

    def transform(self, u, context=None):
        y = self.loc + self.scale * u
        return y, torch.log(self.scale).expand_as(u)

    def invert(self, y, context=None):
        u = (y - self.loc) / self.scale
        return u, torch.log(self.scale).expand_as(u)


def fit_normalisation(samples: torch.Tensor) -> AffineNormalisation:
    """Whitening statistics (mean, std) of log(samples), frozen thereafter."""
    samples = torch.as_tensor(samples, dtype=torch.float64)
    if samples.numel() < 2:
        raise ValueError("need at least 2 samples to fit whitening statistics")
    if torch.any(samples <= 0):
        raise ValueError("whitening is fitted in log-space; samples must be positive")
    logs = torch.log(samples)
    loc = float(logs.mean())
    scale = float(logs.std(unbiased=False))
    if scale < 1e-12:
        raise ValueError("zero variance in log-samples; cannot whiten")
    return AffineNormalisation(loc, scale)


class _ContextNet(nn.Module):
    """context -> scalar through dense layers of widths 8 and 16, LeakyReLU(0.1)."""

    def __init__(self, context_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(context_dim, 8),
            nn.LeakyReLU(0.1),
            nn.Linear(8, 16),
            nn.LeakyReLU(0.1),
            nn.Linear(16, 1),
        ).to(torch.float64)

    def forward(self, context):
        return self.net(context).squeeze(-1)


class ConditionalAffine(nn.Module):
    """u -> loc(c) + exp(log_scale(c)) * u with the log-scale clamped to [-7, 7]."""

    def __init__(self, context_dim: int):
        super().__init__()
        self.context_dim = context_dim
        self.loc_net = _ContextNet(context_dim)
        self.log_scale_net = _ContextNet(context_dim)

    def _params(self, context):
        if context is None or context.shape[-1] != self.context_dim:
            raise ValueError(f"expected context with last dim {self.context_dim}")
        loc = self.loc_net(context)
        log_scale = torch.clamp(self.log_scale_net(context), -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        return loc, log_scale

    def transform(self, u, context=None):
        loc, log_scale = self._params(context)
        return loc + torch.exp(log_scale) * u, log_scale

    def invert(self, y, context=None):
        loc, log_scale = self._params(context)
        return (y - loc) * torch.exp(-log_scale), log_scale


class LinearSpline(nn.Module):
    """Monotone piecewise-linear map on [-bound, bound] with identity tails.

    Bin widths and heights are softmax-normalized so the spline maps the
    interval onto itself; zero-initialized parameters give the identity,
    which keeps early training stable.
    """

    def __init__(self, bins: int = 8, bound: float = 3.0):
        super().__init__()
        self.bins = bins
        self.bound = float(bound)
        self.w_raw = nn.Parameter(torch.zeros(bins, dtype=torch.float64))
        self.h_raw = nn.Parameter(torch.zeros(bins, dtype=torch.float64))

    def _knots(self):
        span = 2.0 * self.bound
        widths = torch.softmax(self.w_raw, dim=0) * span
        heights = torch.softmax(self.h_raw, dim=0) * span
        zero = torch.zeros(1, dtype=widths.dtype, device=widths.device)
        xk = torch.cat([zero, torch.cumsum(widths, 0)]) - self.bound
        yk = torch.cat([zero, torch.cumsum(heights, 0)]) - self.bound
        return xk, yk, widths, heights

    def _locate(self, knots, t):
        # bin index; gradient flows through the linear map, not the index
        idx = torch.searchsorted(knots.detach(), t.detach()) - 1
        return torch.clamp(idx, 0, self.bins - 1)

    def transform(self, u, context=None):
        xk, yk, widths, heights = self._knots()
        inside = (u > -self.bound) & (u < self.bound)
        idx = self._locate(xk, u)
        slope = heights[idx] / widths[idx]
        y_in = yk[idx] + (u - xk[idx]) * slope
        y = torch.where(inside, y_in, u)
        logdet = torch.where(inside, torch.log(slope), torch.zeros_like(u))
        return y, logdet

    def invert(self, y, context=None):
        xk, yk, widths, heights = self._knots()
        inside = (y > -self.bound) & (y < self.bound)
        idx = self._locate(yk, y)
        slope = heights[idx] / widths[idx]
        u_in = xk[idx] + (y - yk[idx]) / slope
        u = torch.where(inside, u_in, y)
        logdet = torch.where(inside, torch.log(slope), torch.zeros_like(y))
        return u, logdet


class FlowMechanism(nn.Module):
    """One continuous causal mechanism: exp o AffineNormalisation o body.

    ``forward_map`` turns standard-normal noise into a positive value and
    reports the whitened intermediate; ``inverse_map`` recovers the noise
    (abduction); ``log_prob`` is the exact change-of-variables density.
    """

    def __init__(self, name: str, body: nn.Module, normalisation: AffineNormalisation, context_dim: int = 0):
        super().__init__()
        self.name = name
        self.context_dim = context_dim
        self.body = body
        self.normalisation = normalisation
        self.head = ExpHead()

    def _check_context(self, context):
        if self.context_dim == 0:
            if context is not None:
                raise ValueError(f"{self.name}: mechanism takes no context")
            return None
        if context is None:
            raise ValueError(f"{self.name}: mechanism requires a context of dim {self.context_dim}")
        context = torch.as_tensor(context, dtype=torch.float64)
        if context.shape[-1] != self.context_dim:
            raise ValueError(
                f"{self.name}: expected context dim {self.context_dim}, got {context.shape[-1]}"
            )
        return context

    def forward_map(self, eps, context=None):
        """(value, intermediate) from noise; strictly increasing in eps."""
        eps = torch.as_tensor(eps, dtype=torch.float64)
        context = self._check_context(context)
        u, _ = self.body.transform(eps, context)
        if not torch.all(torch.isfinite(u)):
            raise FloatingPointError(f"{self.name}: non-finite intermediate")
        m, _ = self.normalisation.transform(u)
        value, _ = self.head.transform(m)
        return value, u

    def inverse_map(self, value, context=None):
        """(eps, intermediate) by inverting the chain; value must be positive."""
        value = torch.as_tensor(value, dtype=torch.float64)
        context = self._check_context(context)
        m, _ = self.head.invert(value)
        u, _ = self.normalisation.invert(m)
        eps, _ = self.body.invert(u, context)
        return eps, u

    def intermediate_of(self, value):
        """Whitened log-value (a-hat / b-hat / v-hat); context-free partial inverse."""
        value = torch.as_tensor(value, dtype=torch.float64)
        m, _ = self.head.invert(value)
        u, _ = self.normalisation.invert(m)
        return u

    def log_prob(self, value, context=None):
        """Exact log-density via change of variables under a N(0,1) base."""
        value = torch.as_tensor(value, dtype=torch.float64)
        context = self._check_context(context)
        m, ld_head = self.head.invert(value)
        u, ld_norm = self.normalisation.invert(m)
        eps, ld_body = self.body.invert(u, context)
        base = -0.5 * eps**2 - 0.5 * math.log(2.0 * math.pi)
        return base - (ld_head + ld_norm + ld_body)


class BernoulliMechanism(nn.Module):
    """Binary mechanism s = eps_s with eps_s ~ Bernoulli(theta)."""

    def __init__(self, theta: float = 0.5):
        super().__init__()
        self.register_buffer("theta", torch.tensor(float(theta), dtype=torch.float64))

    def fit_mle(self, samples) -> None:
        """Closed-form MLE: theta = sample mean, clamped away from {0, 1}."""
        samples = torch.as_tensor(samples, dtype=torch.float64)
        theta = float(samples.mean())
        self.theta.fill_(min(max(theta, 1e-6), 1.0 - 1e-6))

    def forward_map(self, eps, context=None):
        eps = torch.as_tensor(eps, dtype=torch.float64)
        return eps, eps

    def inverse_map(self, value, context=None):
        value = torch.as_tensor(value, dtype=torch.float64)
        return value, value

    def log_prob(self, value, context=None):
        value = torch.as_tensor(value, dtype=torch.float64)
        if torch.any((value != 0.0) & (value != 1.0)):
            raise ValueError("Bernoulli mechanism expects values in {0, 1}")
        return value * torch.log(self.theta) + (1.0 - value) * torch.log(1.0 - self.theta)

    def sample_noise(self, n: int, generator: torch.Generator) -> torch.Tensor:
        u = torch.rand(n, generator=generator, dtype=torch.float64)
        return (u < self.theta).to(torch.float64)


def make_age_mechanism(normalisation: AffineNormalisation | None = None, bins: int = 8) -> FlowMechanism:
    """f_A = exp o AffineNormalisation o LinearSpline, unconditional."""
    return FlowMechanism("a", LinearSpline(bins=bins), normalisation or AffineNormalisation())


def make_volume_mechanism(name: str, context_dim: int, normalisation: AffineNormalisation | None = None) -> FlowMechanism:
    """f_B / f_V = exp o AffineNormalisation o ConditionalAffine(context)."""
    return FlowMechanism(name, ConditionalAffine(context_dim), normalisation or AffineNormalisation(), context_dim)
