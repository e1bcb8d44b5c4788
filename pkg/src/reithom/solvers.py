"""Batched conjugate gradients and constant-coefficient spectral preconditioners.

All routines operate on stacks of independent problems: arrays are
(m, *node_shape) and per-problem scalars are (m,).  Lanes that converge
are frozen (zero step) while the remaining lanes keep iterating.
"""
from __future__ import annotations

import numpy as np
import scipy.fft

from . import grids


def _axes(nd: int) -> tuple[int, ...]:
    return tuple(range(-nd, 0))


def dot_nodes(a: np.ndarray, b: np.ndarray, nd: int) -> np.ndarray:
    return np.sum(a * b, axis=_axes(nd))


def norm_nodes(a: np.ndarray, nd: int) -> np.ndarray:
    return np.sqrt(dot_nodes(a, a, nd))


def bcast(s: np.ndarray, nd: int) -> np.ndarray:
    """Broadcast per-problem scalars over node axes."""
    return np.reshape(s, np.shape(s) + (1,) * nd)


def pcg_batch(
    apply_A,
    b: np.ndarray,
    nd: int,
    rtol: float,
    maxiter: int,
    apply_M=None,
    project=None,
) -> np.ndarray:
    """Solve A x = b per lane for SPD A, preconditioned, kernel-projected."""
    x = np.zeros_like(b)
    r = b.copy()
    if project is not None:
        r = project(r)
    bn = norm_nodes(r, nd)
    live = bn > 0
    if not live.any():
        return x
    z = apply_M(r) if apply_M is not None else r.copy()
    if project is not None and apply_M is not None:
        z = project(z)
    p = z.copy()
    rz = dot_nodes(r, z, nd)
    for _ in range(maxiter):
        active = live & (norm_nodes(r, nd) > rtol * bn)
        if not active.any():
            break
        Ap = apply_A(p)
        if project is not None:
            Ap = project(Ap)
        pAp = dot_nodes(p, Ap, nd)
        ok = active & (pAp > 0)
        alpha = np.where(ok, rz / np.where(pAp == 0.0, 1.0, pAp), 0.0)
        x = x + bcast(alpha, nd) * p
        r = r - bcast(alpha, nd) * Ap
        z = apply_M(r) if apply_M is not None else r.copy()
        if project is not None and apply_M is not None:
            z = project(z)
        rz_new = dot_nodes(r, z, nd)
        beta = np.where(rz > 0, rz_new / np.where(rz == 0.0, 1.0, rz), 0.0)
        rz = rz_new
        p = z + bcast(beta, nd) * p
    return x


class PeriodicSpectralPreconditioner:
    """Pseudo-inverse of the unit-coefficient stiffness on a periodic grid.

    The constant-coefficient operator is a convolution, so its spectrum is
    the FFT of one column; kernel modes (constants, and the checkerboard on
    even 2D grids) are zeroed, matching the solver's subspace projection.
    """

    def __init__(self, grid: grids.PeriodicCellGrid):
        self.grid = grid
        self.nd = grid.dim
        delta = np.zeros(grid.node_shape)
        delta[(0,) * grid.dim] = 1.0
        col = grids.grad_adjoint(grids.gradient(delta, grid), grid)
        eig = scipy.fft.rfftn(col, axes=_axes(self.nd)).real
        cutoff = 1e-12 * np.max(np.abs(eig))
        with np.errstate(divide="ignore"):
            inv = np.where(np.abs(eig) <= cutoff, 0.0, 1.0 / eig)
        self._inv = inv

    def __call__(self, r: np.ndarray, kappa: np.ndarray) -> np.ndarray:
        ax = _axes(self.nd)
        rhat = scipy.fft.rfftn(r, axes=ax)
        out = scipy.fft.irfftn(rhat * self._inv, s=self.grid.node_shape, axes=ax)
        return out / bcast(np.maximum(kappa, 1e-300), self.nd)


class DirichletSpectralPreconditioner:
    """Exact inverse of mass/dt + kappa * L for the constant-coefficient
    stiffness L on a domain grid, via the type-I sine transform.

    The interior stencil is probed numerically; sin products diagonalize it
    because the discretization is symmetric under axis reflections.
    """

    def __init__(self, grid: grids.DomainGrid):
        self.grid = grid
        self.nd = grid.dim
        n = grid.n
        delta = np.zeros(grid.node_shape)
        center = (n // 2,) * grid.dim
        delta[center] = 1.0
        col = grids.grad_adjoint(grids.gradient(delta, grid), grid)
        k = np.arange(1, n)
        cos = np.cos(np.pi * k / n)
        if grid.dim == 1:
            c0 = col[center[0]]
            c1 = col[center[0] + 1]
            self._eig = c0 + 2.0 * c1 * cos
        else:
            i, j = center
            c00 = col[i, j]
            c10 = col[i + 1, j]
            c01 = col[i, j + 1]
            c11 = col[i + 1, j + 1]
            self._eig = (
                c00
                + 2.0 * c10 * cos[:, None]
                + 2.0 * c01 * cos[None, :]
                + 4.0 * c11 * cos[:, None] * cos[None, :]
            )
        self._mass = grid.h**grid.dim

    def __call__(self, r: np.ndarray, kappa: np.ndarray, inv_dt: float) -> np.ndarray:
        ax = _axes(self.nd)
        if self.nd == 1:
            rin = r[..., 1:-1]
        else:
            rin = r[..., 1:-1, 1:-1]
        rhat = scipy.fft.dstn(rin, type=1, axes=ax)
        denom = self._mass * inv_dt + bcast(np.maximum(kappa, 1e-300), self.nd) * self._eig
        xin = scipy.fft.idstn(rhat / denom, type=1, axes=ax)
        out = np.zeros_like(r)
        if self.nd == 1:
            out[..., 1:-1] = xin
        else:
            out[..., 1:-1, 1:-1] = xin
        return out


def apply_element_jacobian(A: np.ndarray, v: np.ndarray, grid) -> np.ndarray:
    """G^T W (A . G v) for per-element tangent blocks A of shape (..., d, d)."""
    g = grids.gradient(v, grid)
    if grid.dim == 1 and A.shape[-1] == 1:
        sig = A[..., 0, 0] * g[..., 0]
        return grids.grad_adjoint(sig[..., None], grid)
    sig = np.einsum("...ij,...j->...i", A, g)
    return grids.grad_adjoint(sig, grid)
