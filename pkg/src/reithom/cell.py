"""Periodic mean-zero cell-problem solvers for the nested correctors.

A corrector is the periodic, mean-zero nodal field pi satisfying the
discrete weak equation  sum_e w_e a_e(xi + (D pi)_e) . (D theta)_e = 0
for every periodic test field theta.  Solves are batched: a stack of
independent problems advances together through damped Newton steps with
preconditioned conjugate-gradient linear solves, falling back to
frozen-coefficient Picard iterations for stragglers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import grids, operators, solvers
from .errors import ConfigError, SolverError

_ARMIJO = 1e-4


@dataclass(frozen=True)
class SolverParams:
    """Controls for the damped Newton iteration.

    tol is relative to the zero-corrector load norm (or the starting
    residual if that is larger), cg_rtol is the inner Krylov reduction.
    """

    tol: float = 1e-10
    max_iter: int = 50
    backtrack_factor: float = 0.5
    min_step: float = 1.0 / 1024.0
    picard_iters: int = 20
    cg_rtol: float = 1e-12
    cg_maxiter: Optional[int] = None
    precondition: bool = True

    def __post_init__(self):
        if self.tol <= 0:
            raise ConfigError("solver tolerance must be positive")
        if self.max_iter < 0 or self.picard_iters < 0:
            raise ConfigError("iteration budgets must be nonnegative")
        if not 0 < self.backtrack_factor < 1:
            raise ConfigError("backtrack factor must lie in (0, 1)")


class SeparableCellFlux:
    """Separable operator frozen to a per-element scalar times G(lam)."""

    symmetric = True

    def __init__(self, op: operators.FluxOperator, scale):
        self.op = op
        self.scale = np.asarray(scale, dtype=float)

    def flux(self, lam):
        return self.scale[..., None] * self.op.profile(lam)

    def jac(self, lam):
        return self.scale[..., None, None] * self.op.profile_jac(lam)

    def picard_coeff(self, lam):
        lam = np.asarray(lam, dtype=float)
        if self.op.kind == "linear":
            return self.scale * np.ones(lam.shape[:-1])
        delta = self.op.delta
        r = np.sqrt(np.sum(lam * lam, axis=-1) + delta * delta)
        rs = np.maximum(r, 1e-300)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(r > 0, self.op.nf.deriv_fn(rs) / rs, 0.0)
        top = float(np.max(g)) if np.size(g) else 0.0
        floor = 1e-8 * top if top > 0 else 1.0
        return self.scale * np.maximum(g, floor)


class FrozenPointFlux:
    """Generic operator frozen at (y, tau), z sampled at element centers."""

    def __init__(self, op: operators.FluxOperator, y, tau, grid):
        self.op = op
        self.y = np.asarray(y, dtype=float)
        self.tau = float(tau)
        self.z = grid.element_centers()
        self.symmetric = bool(op.potential)

    def flux(self, lam):
        return operators.flux_eval(self.op, self.y, self.tau, self.z, lam)

    def jac(self, lam):
        return operators.flux_jacobian(self.op, self.y, self.tau, self.z, lam)

    def picard_coeff(self, lam):
        return None


class CallableCellFlux:
    """Plain vectorized map lam -> sigma with optional analytic Jacobian."""

    def __init__(self, fn: Callable, jac_fn: Optional[Callable] = None,
                 symmetric: bool = True):
        self.fn = fn
        self.jac_fn = jac_fn
        self.symmetric = symmetric

    def flux(self, lam):
        return np.asarray(self.fn(lam), dtype=float)

    def jac(self, lam):
        if self.jac_fn is not None:
            return np.asarray(self.jac_fn(lam), dtype=float)
        return _fd_jacobian(self.flux, lam)

    def picard_coeff(self, lam):
        return None


class OuterCellFlux:
    """Mid-scale flux h(y, tau, xi) frozen at tau, y at element centers."""

    def __init__(self, h: Callable, tau, grid, h_jac: Optional[Callable] = None,
                 symmetric: bool = True):
        self.h = h
        self.tau = float(tau)
        self.y = grid.element_centers()
        self.h_jac = h_jac
        self.symmetric = symmetric

    def flux(self, lam):
        return np.asarray(self.h(self.y, self.tau, lam), dtype=float)

    def jac(self, lam):
        if self.h_jac is not None:
            return np.asarray(self.h_jac(self.y, self.tau, lam), dtype=float)
        return _fd_jacobian(self.flux, lam)

    def picard_coeff(self, lam):
        return None


def _fd_jacobian(fn, lam):
    lam = np.asarray(lam, dtype=float)
    d = lam.shape[-1]
    step = 1e-6 * np.maximum(1.0, np.sqrt(np.sum(lam * lam, axis=-1)))[..., None]
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        cols.append((fn(lam + step * e) - fn(lam - step * e)) / (2.0 * step[..., 0:1]))
    return np.stack([c for c in cols], axis=-1)


def frozen_operator_flux(op: operators.FluxOperator, y, tau, grid):
    """Freeze (y, tau) in op as a cell-flux evaluator on the given grid."""
    if op.separable:
        c = float(np.asarray(op.cpoly(np.asarray(y, dtype=float), tau)))
        scale = c * op.gpoly(grid.element_centers())
        return SeparableCellFlux(op, scale)
    return FrozenPointFlux(op, y, tau, grid)


def as_cell_flux(flux, flux_jac=None, symmetric=True):
    if hasattr(flux, "flux") and hasattr(flux, "jac"):
        return flux
    if callable(flux):
        return CallableCellFlux(flux, flux_jac, symmetric)
    raise ConfigError("flux must be a cell-flux evaluator or a callable")


@dataclass
class CellBatchSolution:
    pi: np.ndarray            # (m, *node_shape)
    grad_pi: np.ndarray       # (m, *element_shape, d)
    flux: np.ndarray          # corrected flux per element
    avg_flux: np.ndarray      # (m, d) cell averages of the corrected flux
    residual_norm: np.ndarray
    scale: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    history: np.ndarray       # (sweeps, m) residual norms
    picard_used: bool = False


@dataclass
class CorrectorSolution:
    """Mean-zero periodic corrector with solver diagnostics."""

    pi: np.ndarray
    grad_pi: np.ndarray
    flux: np.ndarray
    avg_flux: np.ndarray
    residual_norm: float
    scale: float
    iterations: int
    converged: bool
    trace: np.ndarray         # rows (iteration, residual norm)
    grid: grids.PeriodicCellGrid

    def pi_field(self):
        return grids.as_discrete_field(self.pi, self.grid)


@dataclass
class CellProblemSpec:
    """One periodic cell problem: flux evaluator, imposed gradient, grid."""

    flux: object
    xi: np.ndarray
    grid: grids.PeriodicCellGrid
    params: SolverParams = SolverParams()
    flux_jac: Optional[Callable] = None
    symmetric: bool = True
    initial: Optional[np.ndarray] = None


def _mean_trace(A, d, nd):
    tr = np.einsum("...ii->...", A) / d
    return tr.mean(axis=tuple(range(-nd, 0)))


def solve_cell_batch(cf, xi, grid, params: Optional[SolverParams] = None,
                     initial: Optional[np.ndarray] = None) -> CellBatchSolution:
    """Solve a stack of periodic cell problems sharing one flux evaluator.

    Args:
        cf: evaluator with flux(lam) -> (m, *elements, d), jac(lam) ->
            (m, *elements, d, d), picard_coeff(lam) -> positive coefficient
            field or None, and a symmetric flag; lam carries the batch axis.
        xi: imposed mean gradients, shape (m, d).
        grid: PeriodicCellGrid with matching dimension.
        params: SolverParams, defaults when omitted.
        initial: optional starting guesses, shape (m, *node_shape); kernel
            components (mean, and the checkerboard on even 2D grids) are
            projected out before iterating.

    Returns:
        CellBatchSolution with correctors, per-element corrected fluxes,
        cell-average fluxes, and per-problem diagnostics.

    Raises:
        SolverError: some problem is still above tolerance after Newton,
            backtracking, and the Picard fallback, or the Jacobian went
            non-finite.
    """
    if params is None:
        params = SolverParams()
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if not np.all(np.isfinite(xi)):
        raise ConfigError("xi must be finite")
    m, d = xi.shape
    if d != grid.dim:
        raise ConfigError("xi dimension does not match the grid")
    nd = grid.dim
    el_axes = tuple(range(-nd, 0))
    xi_b = xi.reshape((m,) + (1,) * nd + (d,))
    lam_shape = (m,) + grid.element_shape + (d,)

    def project(v):
        return grids.project_gradient_kernel(v, grid)

    def residual_at(pi):
        lam = xi_b + grids.gradient(pi, grid)
        return grids.grad_adjoint(cf.flux(lam), grid), lam

    lam0 = np.ascontiguousarray(np.broadcast_to(xi_b, lam_shape))
    load = grids.grad_adjoint(cf.flux(lam0), grid)
    scale = solvers.norm_nodes(load, nd)

    if initial is None:
        pi = np.zeros((m,) + grid.node_shape)
        F = load.copy()
        lam = lam0.copy()
    else:
        pi = np.ascontiguousarray(
            np.broadcast_to(np.asarray(initial, dtype=float), (m,) + grid.node_shape))
        pi = project(pi)
        F, lam = residual_at(pi)
    res = solvers.norm_nodes(F, nd)
    thresh = params.tol * np.maximum(scale, res)
    history = [res.copy()]
    iters = np.zeros(m, dtype=int)
    failed = np.zeros(m, dtype=bool)

    precond = solvers.PeriodicSpectralPreconditioner(grid) if params.precondition else None
    cg_maxiter = params.cg_maxiter if params.cg_maxiter is not None else 200 + 2 * grid.n_nodes

    def linear_step(A, rhs, sym_ok):
        Asym = 0.5 * (A + np.swapaxes(A, -1, -2))
        kappa = np.maximum(_mean_trace(Asym, d, nd), 1e-12)
        if sym_ok:
            def apply_A(v):
                return solvers.apply_element_jacobian(Asym, v, grid)
            apply_M = (lambda r: precond(r, kappa)) if precond is not None else None
            return solvers.pcg_batch(apply_A, rhs, nd, params.cg_rtol,
                                     cg_maxiter, apply_M, project)
        At = np.swapaxes(A, -1, -2)

        def apply_N(v):
            return solvers.apply_element_jacobian(
                At, solvers.apply_element_jacobian(A, v, grid), grid)

        rhs_n = solvers.apply_element_jacobian(At, rhs, grid)
        apply_M = (lambda r: precond(precond(r, kappa), kappa)) if precond is not None else None
        return solvers.pcg_batch(apply_N, rhs_n, nd, params.cg_rtol,
                                 cg_maxiter, apply_M, project)

    def damped_update(direction, active):
        nonlocal pi, F, lam, res
        t = np.ones(m)
        pending = active.copy()
        bottomed = np.zeros(m, dtype=bool)
        while pending.any():
            step = np.where(pending, t, 0.0)
            trial = pi + solvers.bcast(step, nd) * direction
            F_t, lam_t = residual_at(trial)
            res_t = solvers.norm_nodes(F_t, nd)
            good = pending & (res_t <= (1.0 - _ARMIJO * t) * res)
            if good.any():
                gm = solvers.bcast(good, nd)
                pi = np.where(gm, trial, pi)
                F = np.where(gm, F_t, F)
                lam = np.where(gm[..., None], lam_t, lam)
                res = np.where(good, res_t, res)
                pending = pending & ~good
            t = np.where(pending, t * params.backtrack_factor, t)
            drop = pending & (t < params.min_step)
            bottomed |= drop
            pending = pending & ~drop
        return bottomed

    sym_ok = bool(getattr(cf, "symmetric", True))
    for _ in range(params.max_iter):
        active = (res > thresh) & ~failed
        if not active.any():
            break
        A = cf.jac(lam)
        if not np.all(np.isfinite(A)):
            raise SolverError("non-finite Jacobian entries in cell solve")
        rhs = -F * solvers.bcast(active.astype(float), nd)
        delta = project(linear_step(A, rhs, sym_ok))
        iters += active.astype(int)
        failed |= damped_update(delta, active)
        history.append(res.copy())

    picard_used = False
    if (res > thresh).any() and params.picard_iters > 0:
        probe = cf.picard_coeff(lam)
        if probe is not None:
            picard_used = True
            stuck = np.zeros(m, dtype=bool)
            for _ in range(params.picard_iters):
                work = (res > thresh) & ~stuck
                if not work.any():
                    break
                coeff = np.ascontiguousarray(
                    np.broadcast_to(np.asarray(cf.picard_coeff(lam), dtype=float),
                                    lam.shape[:-1]))
                kappa = np.maximum(coeff.mean(axis=el_axes), 1e-12)

                def apply_P(v, _c=coeff):
                    g = grids.gradient(v, grid)
                    return grids.grad_adjoint(_c[..., None] * g, grid)

                rhs = -grids.grad_adjoint(coeff[..., None] * lam0, grid)
                rhs = rhs * solvers.bcast(work.astype(float), nd)
                apply_M = (lambda r: precond(r, kappa)) if precond is not None else None
                target = project(solvers.pcg_batch(
                    apply_P, rhs, nd, params.cg_rtol, cg_maxiter, apply_M, project))
                iters += work.astype(int)
                stuck |= damped_update(target - pi, work)
                history.append(res.copy())

    converged = res <= thresh
    if not converged.all():
        rel = res / np.maximum(thresh / params.tol, 1e-300)
        raise SolverError(
            "cell solver failed to converge: worst relative residual "
            f"{float(np.max(rel)):.3e} after {int(np.max(iters))} iterations")

    sigma = cf.flux(lam)
    avg = grids.integrate_elements(sigma, grid, vector=True)
    return CellBatchSolution(
        pi=pi, grad_pi=lam - xi_b, flux=sigma, avg_flux=np.atleast_2d(avg),
        residual_norm=res, scale=scale, iterations=iters, converged=converged,
        history=np.stack(history, axis=0), picard_used=picard_used)


def _single(batch: CellBatchSolution, grid) -> CorrectorSolution:
    k = batch.history.shape[0]
    trace = np.column_stack([np.arange(k, dtype=float), batch.history[:, 0]])
    return CorrectorSolution(
        pi=batch.pi[0], grad_pi=batch.grad_pi[0], flux=batch.flux[0],
        avg_flux=batch.avg_flux[0], residual_norm=float(batch.residual_norm[0]),
        scale=float(batch.scale[0]), iterations=int(batch.iterations[0]),
        converged=bool(batch.converged[0]), trace=trace, grid=grid)


def solve_cell(spec: CellProblemSpec) -> CorrectorSolution:
    """Solve one periodic mean-zero cell problem from its spec."""
    cf = as_cell_flux(spec.flux, spec.flux_jac, spec.symmetric)
    xi = np.atleast_1d(np.asarray(spec.xi, dtype=float))
    initial = None
    if spec.initial is not None:
        initial = np.asarray(spec.initial, dtype=float)[None]
    batch = solve_cell_batch(cf, xi[None], spec.grid, spec.params, initial)
    return _single(batch, spec.grid)


def solve_inner_corrector(op: operators.FluxOperator, y, tau, xi, zgrid,
                          params: Optional[SolverParams] = None,
                          initial: Optional[np.ndarray] = None) -> CorrectorSolution:
    """Corrector of op frozen at (y, tau), solved on the inner cell grid."""
    cf = frozen_operator_flux(op, y, tau, zgrid)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    init = None if initial is None else np.asarray(initial, dtype=float)[None]
    batch = solve_cell_batch(cf, xi[None], zgrid, params, init)
    return _single(batch, zgrid)


def solve_outer_corrector(h: Callable, tau, xi, ygrid,
                          params: Optional[SolverParams] = None,
                          h_jac: Optional[Callable] = None,
                          symmetric: bool = True,
                          initial: Optional[np.ndarray] = None) -> CorrectorSolution:
    """Corrector of a mid-scale flux h(y, tau, xi) frozen at tau."""
    cf = OuterCellFlux(h, tau, ygrid, h_jac, symmetric)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    init = None if initial is None else np.asarray(initial, dtype=float)[None]
    batch = solve_cell_batch(cf, xi[None], ygrid, params, init)
    return _single(batch, ygrid)
