"""Uniform tensor grids and the discrete calculus used by every solver.

Nodal fields live on grid nodes, vector fields on elements (one gradient
value per element).  All operations accept arbitrary leading batch axes:
a periodic field is (..., n) or (..., n, n), its gradient (..., n, 1) or
(..., n, n, 2).  d=1 uses forward differences (wrapped on cell grids),
d=2 uses bilinear-element gradients evaluated at element centers.
divergence is the exact negative adjoint of gradient under the grid
quadrature weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .orlicz import DiscreteField


def wrap_unit(x):
    """Map coordinates into [0, 1) with floor-based wrapping."""
    x = np.asarray(x, dtype=float)
    return x - np.floor(x)


@dataclass(frozen=True)
class PeriodicCellGrid:
    """Unit cell (0,1)^dim with n nodes per axis and wrapped elements."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigError("cell grid dimension must be 1 or 2")
        if self.n < 2:
            raise ConfigError("cell grid needs at least 2 nodes per axis")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def node_shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def element_shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def n_nodes(self) -> int:
        return self.n**self.dim

    def node_coords(self) -> np.ndarray:
        """Node positions, shape (*node_shape, dim)."""
        axes = [np.arange(self.n) * self.h] * self.dim
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def element_centers(self) -> np.ndarray:
        return self.node_coords() + 0.5 * self.h

    @property
    def node_weights(self) -> float:
        return self.h**self.dim

    @property
    def element_weights(self) -> float:
        return self.h**self.dim


@dataclass(frozen=True)
class DomainGrid:
    """Unit box (0,1)^dim with n elements per axis and Dirichlet boundary."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigError("domain grid dimension must be 1 or 2")
        if self.n < 2:
            raise ConfigError("domain grid needs at least 2 elements per axis")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def node_shape(self) -> tuple[int, ...]:
        return (self.n + 1,) * self.dim

    @property
    def element_shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    def node_coords(self) -> np.ndarray:
        axes = [np.linspace(0.0, 1.0, self.n + 1)] * self.dim
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def element_centers(self) -> np.ndarray:
        axes = [(np.arange(self.n) + 0.5) * self.h] * self.dim
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @property
    def node_weights(self) -> np.ndarray:
        """Trapezoid weights: h/2 at boundary nodes, h inside (tensorized)."""
        w1 = np.full(self.n + 1, self.h)
        w1[0] = w1[-1] = 0.5 * self.h
        if self.dim == 1:
            return w1
        return np.outer(w1, w1)

    @property
    def element_weights(self) -> float:
        return self.h**self.dim

    @property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.node_shape, dtype=bool)
        if self.dim == 1:
            mask[0] = mask[-1] = True
        else:
            mask[0, :] = mask[-1, :] = True
            mask[:, 0] = mask[:, -1] = True
        return mask


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of (0, horizon] into steps backward-Euler slabs."""

    horizon: float
    steps: int

    def __post_init__(self):
        if self.horizon <= 0 or self.steps < 1:
            raise ConfigError("time grid needs horizon > 0 and steps >= 1")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


@dataclass(frozen=True)
class ThetaGrid:
    """Uniform quadrature on the fast-time cell (0,1)."""

    n_tau: int = 8

    def __post_init__(self):
        if self.n_tau < 1:
            raise ConfigError("need at least one fast-time node")

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_tau) / self.n_tau

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_tau, 1.0 / self.n_tau)


def gradient(u: np.ndarray, grid) -> np.ndarray:
    """Per-element gradient of a nodal field; output (..., *elements, dim)."""
    u = np.asarray(u, dtype=float)
    h = grid.h
    if isinstance(grid, PeriodicCellGrid):
        if grid.dim == 1:
            g = (np.roll(u, -1, axis=-1) - u) / h
            return g[..., None]
        ux = np.roll(u, -1, axis=-2)
        uy = np.roll(u, -1, axis=-1)
        uxy = np.roll(ux, -1, axis=-1)
        gx = (ux - u + uxy - uy) / (2 * h)
        gy = (uy - u + uxy - ux) / (2 * h)
        return np.stack([gx, gy], axis=-1)
    if grid.dim == 1:
        g = (u[..., 1:] - u[..., :-1]) / h
        return g[..., None]
    a = u[..., :-1, :-1]
    b = u[..., 1:, :-1]
    c = u[..., :-1, 1:]
    d = u[..., 1:, 1:]
    gx = (b - a + d - c) / (2 * h)
    gy = (c - a + d - b) / (2 * h)
    return np.stack([gx, gy], axis=-1)


def grad_adjoint(sigma: np.ndarray, grid) -> np.ndarray:
    """Weak-form load G^T W sigma: nodal vector of sum_e w_e sigma_e . Dphi_i.

    This is the assembled residual contribution of an element flux; it
    equals minus the weighted divergence.
    """
    sigma = np.asarray(sigma, dtype=float)
    if isinstance(grid, PeriodicCellGrid):
        if grid.dim == 1:
            s = sigma[..., 0]
            return np.roll(s, 1, axis=-1) - s
        half_h = 0.5 * grid.h
        sx = sigma[..., 0]
        sy = sigma[..., 1]
        ax = np.roll(sx, 1, axis=-2) - sx
        ay = np.roll(sy, 1, axis=-1) - sy
        out = ax + np.roll(ax, 1, axis=-1) + ay + np.roll(ay, 1, axis=-2)
        return out * half_h
    if grid.dim == 1:
        s = sigma[..., 0]
        out = np.zeros(s.shape[:-1] + (grid.n + 1,))
        out[..., :-1] -= s
        out[..., 1:] += s
        return out
    half_h = 0.5 * grid.h
    sx = sigma[..., 0] * half_h
    sy = sigma[..., 1] * half_h
    out = np.zeros(sx.shape[:-2] + (grid.n + 1, grid.n + 1))
    out[..., :-1, :-1] -= sx + sy
    out[..., 1:, :-1] += sx - sy
    out[..., :-1, 1:] += sy - sx
    out[..., 1:, 1:] += sx + sy
    return out


def divergence(sigma: np.ndarray, grid) -> np.ndarray:
    """Nodal divergence defined by <div sigma, u> = -<sigma, grad u>."""
    return -grad_adjoint(sigma, grid) / grid.node_weights


def integrate(u: np.ndarray, grid) -> np.ndarray:
    """Quadrature of a nodal field over the grid's box."""
    u = np.asarray(u, dtype=float)
    axes = tuple(range(-grid.dim, 0))
    return np.sum(u * grid.node_weights, axis=axes)


def integrate_elements(v: np.ndarray, grid, vector: bool = False) -> np.ndarray:
    """Quadrature of an element field; set vector=True for (..., E, dim)."""
    v = np.asarray(v, dtype=float)
    if vector:
        axes = tuple(range(-grid.dim - 1, -1))
    else:
        axes = tuple(range(-grid.dim, 0))
    return np.sum(v * grid.element_weights, axis=axes)


def cell_average(u: np.ndarray, grid) -> np.ndarray:
    return integrate(u, grid)  # unit-volume cells


def project_zero_mean(u: np.ndarray, grid) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    mean = cell_average(u, grid)
    return u - np.reshape(mean, np.shape(mean) + (1,) * grid.dim)


def gradient_kernel_basis(grid: PeriodicCellGrid) -> list[np.ndarray]:
    """Orthonormal nodal basis (unweighted) of the discrete gradient kernel.

    Constants always; on even 2D grids the center-quadrature bilinear
    gradient also kills the (-1)^(i+j) checkerboard.
    """
    modes = [np.full(grid.node_shape, 1.0 / np.sqrt(grid.n_nodes))]
    if grid.dim == 2 and grid.n % 2 == 0:
        i = np.arange(grid.n)
        cb = ((-1.0) ** (i[:, None] + i[None, :])) / np.sqrt(grid.n_nodes)
        modes.append(cb)
    return modes


def project_gradient_kernel(u: np.ndarray, grid: PeriodicCellGrid) -> np.ndarray:
    """Remove every discrete gradient-kernel component from a nodal field."""
    u = np.asarray(u, dtype=float)
    axes = tuple(range(-grid.dim, 0))
    for mode in gradient_kernel_basis(grid):
        coef = np.sum(u * mode, axis=axes)
        u = u - np.reshape(coef, np.shape(coef) + (1,) * grid.dim) * mode
    return u


def trace_eval(v, eps: float, x, t):
    """Evaluate v(x, t, x/eps, t/eps, x/eps^2) with fast arguments wrapped."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    return v(x, t, wrap_unit(x / eps), wrap_unit(t / eps), wrap_unit(x / (eps * eps)))


def restrict_nodes(u: np.ndarray, fine, coarse) -> np.ndarray:
    """Sample a fine nodal field at the shared nodes of a coarser grid."""
    if fine.dim != coarse.dim:
        raise ConfigError("restriction needs matching dimensions")
    if fine.n % coarse.n != 0:
        raise ConfigError(
            f"fine resolution {fine.n} is not an integer refinement of {coarse.n}"
        )
    r = fine.n // coarse.n
    u = np.asarray(u, dtype=float)
    if fine.dim == 1:
        return u[..., ::r]
    return u[..., ::r, ::r]


def as_discrete_field(u: np.ndarray, grid) -> DiscreteField:
    """Bundle a nodal field with its quadrature weights for Orlicz norms."""
    u = np.asarray(u, dtype=float)
    w = np.broadcast_to(np.asarray(grid.node_weights, dtype=float), u.shape)
    return DiscreteField(u.copy(), w.copy())
