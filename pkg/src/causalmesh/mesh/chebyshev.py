"""Spectral graph filtering with truncated Chebyshev polynomials."""

from __future__ import annotations

import torch

from .topology import MeshTopology


def _operator_matmul(op: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Apply the (V, V) operator along the vertex dim of (..., V, F) features."""
    if x.ndim == 2:
        return op @ x
    # fold batch into the feature dimension: (B, V, F) -> (V, B*F)
    b, v, f = x.shape
    folded = x.permute(1, 0, 2).reshape(v, b * f)
    out = op @ folded
    return out.reshape(v, b, f).permute(1, 0, 2)


def cheb_filter(
    topology: MeshTopology, x: torch.Tensor, theta: torch.Tensor
) -> torch.Tensor:
    """Filter vertex features with a K-truncated Chebyshev polynomial.

    Computes ``y_i = sum_j sum_k (theta_{j,i})_k T_k(L~) x_j`` where ``L~``
    is the rescaled Laplacian, via the three-term recurrence
    ``T_k = 2 L~ T_{k-1} - T_{k-2}``; cost O(K |V| F1 F2). Differentiable
    in ``x`` and ``theta``.

    Parameters
    ----------
    topology : MeshTopology
        Supplies the cached rescaled Laplacian.
    x : torch.Tensor
        (|V|, F1) or (B, |V|, F1) vertex features.
    theta : torch.Tensor
        (K, F1, F2) filter coefficients, K >= 1.

    Returns
    -------
    torch.Tensor
        (|V|, F2) or (B, |V|, F2) filtered features.
    """
    if theta.ndim != 3:
        raise ValueError(f"theta must be (K, F1, F2), got shape {tuple(theta.shape)}")
    k, f_in, _ = theta.shape
    if k < 1:
        raise ValueError("Chebyshev order K must be >= 1")
    if x.shape[-1] != f_in:
        raise ValueError(
            f"feature dim mismatch: x has F1={x.shape[-1]}, theta expects {f_in}"
        )
    if x.shape[-2] != topology.vertex_count:
        raise ValueError(
            f"vertex dim mismatch: x has {x.shape[-2]}, topology has "
            f"{topology.vertex_count}"
        )
    op = topology.torch_operator(x.dtype)

    t_prev = x  # T_0(L~) x
    y = t_prev @ theta[0]
    if k == 1:
        return y
    t_curr = _operator_matmul(op, x)  # T_1(L~) x
    y = y + t_curr @ theta[1]
    for order in range(2, k):
        t_next = 2.0 * _operator_matmul(op, t_curr) - t_prev
        y = y + t_next @ theta[order]
        t_prev, t_curr = t_curr, t_next
    return y
