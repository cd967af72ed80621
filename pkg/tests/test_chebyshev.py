"""Chebyshev filtering checked against dense eigendecomposition and finite differences."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from causalmesh.mesh.chebyshev import cheb_filter
from causalmesh.mesh.topology import MeshTopology

from test_topology import chain_faces, connected_triangulations


def dense_cheb_oracle(topology: MeshTopology, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Evaluate the same filter through a dense eigendecomposition.

    Diagonalizes the rescaled Laplacian, applies the Chebyshev recurrence to
    its eigenvalues, and recombines: sum_k U diag(T_k(w)) U^T x theta_k.
    """
    scaled = topology.scaled_laplacian().toarray()
    w, u = np.linalg.eigh(scaled)
    k = theta.shape[0]
    t_prev = np.ones_like(w)
    t_curr = w.copy()
    out = (u @ np.diag(t_prev) @ u.T @ x) @ theta[0]
    if k > 1:
        out = out + (u @ np.diag(t_curr) @ u.T @ x) @ theta[1]
    for order in range(2, k):
        t_next = 2.0 * w * t_curr - t_prev
        out = out + (u @ np.diag(t_next) @ u.T @ x) @ theta[order]
        t_prev, t_curr = t_curr, t_next
    return out


def random_case(rng: np.random.Generator, n: int, k: int, f_in: int = 3, f_out: int = 4):
    faces = chain_faces(n)
    topo = MeshTopology(faces, n)
    x = rng.standard_normal((n, f_in))
    theta = rng.standard_normal((k, f_in, f_out))
    return topo, x, theta


class TestSpectralOracle:
    @given(connected_triangulations(), st.integers(1, 8))
    @settings(max_examples=25)
    def test_matches_dense_eigendecomposition(self, graph, k):
        n, faces = graph
        rng = np.random.default_rng(n * 31 + k)
        topo = MeshTopology(faces, n)
        x = rng.standard_normal((n, 2))
        theta = rng.standard_normal((k, 2, 3))
        got = cheb_filter(topo, torch.from_numpy(x), torch.from_numpy(theta)).numpy()
        want = dense_cheb_oracle(topo, x, theta)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_order_one_is_pointwise_linear(self):
        rng = np.random.default_rng(0)
        topo, x, theta = random_case(rng, 10, 1)
        got = cheb_filter(topo, torch.from_numpy(x), torch.from_numpy(theta)).numpy()
        assert np.allclose(got, x @ theta[0], atol=1e-14)


class TestAlgebra:
    def test_linear_in_features_and_coefficients(self):
        rng = np.random.default_rng(1)
        topo, x, theta = random_case(rng, 14, 4)
        x2 = rng.standard_normal(x.shape)
        xt, x2t, th = map(torch.from_numpy, (x, x2, theta))
        lhs = cheb_filter(topo, 2.0 * xt + x2t, th)
        rhs = 2.0 * cheb_filter(topo, xt, th) + cheb_filter(topo, x2t, th)
        assert torch.allclose(lhs, rhs, atol=1e-12)
        lhs_theta = cheb_filter(topo, xt, 3.0 * th)
        assert torch.allclose(lhs_theta, 3.0 * cheb_filter(topo, xt, th), atol=1e-12)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(2)
        topo, _, theta = random_case(rng, 12, 5)
        xb = torch.from_numpy(rng.standard_normal((7, 12, 3)))
        th = torch.from_numpy(theta)
        batched = cheb_filter(topo, xb, th)
        for i in range(7):
            assert torch.allclose(batched[i], cheb_filter(topo, xb[i], th), atol=1e-12)

    def test_shape_validation(self):
        rng = np.random.default_rng(3)
        topo, x, theta = random_case(rng, 8, 3)
        with pytest.raises(ValueError):
            cheb_filter(topo, torch.from_numpy(x), torch.from_numpy(theta[0]))
        with pytest.raises(ValueError):
            cheb_filter(topo, torch.from_numpy(x[:, :2]), torch.from_numpy(theta))
        with pytest.raises(ValueError):
            cheb_filter(topo, torch.from_numpy(x[:-1]), torch.from_numpy(theta))
        with pytest.raises(ValueError):
            cheb_filter(topo, torch.from_numpy(x), torch.from_numpy(theta[:0]))


class TestGradients:
    def test_finite_difference_gradient_wrt_features(self):
        rng = np.random.default_rng(4)
        topo, x, theta = random_case(rng, 9, 4)
        xt = torch.from_numpy(x).requires_grad_(True)
        th = torch.from_numpy(theta)
        proj = torch.from_numpy(rng.standard_normal((9, 4)))
        loss = (cheb_filter(topo, xt, th) * proj).sum()
        (grad,) = torch.autograd.grad(loss, xt)
        h = 1e-6
        for idx in [(0, 0), (4, 1), (8, 2)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fp = float((cheb_filter(topo, torch.from_numpy(xp), th) * proj).sum())
            fm = float((cheb_filter(topo, torch.from_numpy(xm), th) * proj).sum())
            fd = (fp - fm) / (2.0 * h)
            assert abs(fd - float(grad[idx])) <= 1e-6 * max(1.0, abs(fd))

    def test_gradient_flows_to_coefficients(self):
        rng = np.random.default_rng(5)
        topo, x, theta = random_case(rng, 9, 3)
        th = torch.from_numpy(theta).requires_grad_(True)
        loss = cheb_filter(topo, torch.from_numpy(x), th).pow(2).sum()
        loss.backward()
        assert th.grad is not None and torch.isfinite(th.grad).all()
