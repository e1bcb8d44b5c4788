"""Backward-Euler marching for the homogenized and fine-scale problems.

Both solvers march the same implicit step: at each time level solve

    w (u - u_prev)/dt + G^T W sigma(G u) - w f = 0

on interior nodes with homogeneous Dirichlet data, by Newton with
backtracking and a preconditioned conjugate-gradient linear solve.  The
macroscopic problem evaluates an effective flux (tabulated or callable);
the fine problem traces oscillatory coefficients along x/eps, t/eps,
x/eps^2 at element centers, with fast time frozen at the implicit
(end-of-step) level.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import cell, effective, grids, operators, solvers
from .cell import SolverParams
from .errors import ConfigError, SolverError

_ARMIJO = 1e-4


class MacroFlux:
    """Effective-mode flux evaluator: a tabulated q or a direct callable.

    Table mode interpolates multilinearly and differentiates with central
    differences at half the table spacing, so the tangent never sits on an
    interpolation plateau.  Evaluations outside the box are clamped
    silently but the overshoot is tracked in max_excess; the strict-mode
    range check in macro_solve turns converged-state overshoot into an
    error while leaving Newton free to probe past the edge.
    """

    def __init__(self, table: Optional[effective.EffectiveFluxTable] = None,
                 fn: Optional[Callable] = None,
                 jac_fn: Optional[Callable] = None):
        if (table is None) == (fn is None):
            raise ConfigError("provide exactly one of table or fn")
        self.table = table
        self.fn = fn
        self.jac_fn = jac_fn
        self.symmetric = True
        self.max_excess = 0.0
        if table is not None:
            self._lo = np.array([ax[0] for ax in table.axes])
            self._hi = np.array([ax[-1] for ax in table.axes])
            self._steps = np.array([0.5 * (ax[1] - ax[0]) for ax in table.axes])

    def _clip(self, lam):
        clipped = np.clip(lam, self._lo, self._hi)
        excess = float(np.max(np.abs(lam - clipped), initial=0.0))
        self.max_excess = max(self.max_excess, excess)
        return clipped

    def sigma(self, lam):
        if self.table is not None:
            pts = self._clip(np.asarray(lam, dtype=float))
            return effective.interp_q(self.table, pts)
        return np.asarray(self.fn(np.asarray(lam, dtype=float)), dtype=float)

    def jac(self, lam):
        lam = np.asarray(lam, dtype=float)
        d = lam.shape[-1]
        if self.table is not None:
            cols = []
            for j in range(d):
                e = np.zeros(d)
                e[j] = 1.0
                hj = self._steps[j]
                hi = self._clip(lam + hj * e)
                lo = self._clip(lam - hj * e)
                denom = np.maximum(hi[..., j] - lo[..., j], 1e-300)
                cols.append((effective.interp_q(self.table, hi)
                             - effective.interp_q(self.table, lo))
                            / denom[..., None])
            return np.stack(cols, axis=-1)
        if self.jac_fn is not None:
            return np.asarray(self.jac_fn(lam), dtype=float)
        return cell._fd_jacobian(self.sigma, lam)


class OscillatoryFlux:
    """Fine-mode flux: the operator traced along the fast scales.

    Coefficients live at element centers (the gradient collocation
    points); set_time fixes the fast time to the step's implicit level.
    """

    def __init__(self, op: operators.FluxOperator, eps: float,
                 grid: grids.DomainGrid):
        if eps <= 0:
            raise ConfigError("eps must be positive")
        x = grid.element_centers()
        self.op = op
        self.eps = float(eps)
        self.y = grids.wrap_unit(x / eps)
        self.z = grids.wrap_unit(x / (eps * eps))
        self.symmetric = bool(op.potential)
        self.tau = 0.0
        if op.separable:
            self._gz = op.gpoly(self.z)
            self._coeff = None

    def set_time(self, t: float):
        tau = float(grids.wrap_unit(np.asarray(t) / self.eps))
        if self.op.separable:
            if self._coeff is None or not self.op.time_invariant:
                self._coeff = self.op.cpoly(self.y, tau) * self._gz
        self.tau = tau

    def sigma(self, lam):
        lam = np.asarray(lam, dtype=float)
        if self.op.separable:
            return self._coeff[..., None] * self.op.profile(lam)
        return operators.flux_eval(self.op, self.y, self.tau, self.z, lam)

    def jac(self, lam):
        lam = np.asarray(lam, dtype=float)
        if self.op.separable:
            return self._coeff[..., None, None] * self.op.profile_jac(lam)
        return operators.flux_jacobian(self.op, self.y, self.tau, self.z, lam)


@dataclass
class ParabolicProblem:
    """Zero-data initial/boundary value problem on the unit box.

    mode "effective" carries a tabulated or callable effective flux;
    mode "fine" carries an oscillatory operator and its scale eps.
    source is a callable f(x, t) on nodal coordinates, a per-step array
    (steps, *node_shape) at implicit times, or a constant.  u_init, when
    given, replaces the zero initial state; it must vanish on the boundary.
    """

    mode: str
    grid: grids.DomainGrid
    tgrid: grids.TimeGrid
    source: object
    params: SolverParams = SolverParams()
    table: Optional[effective.EffectiveFluxTable] = None
    q_fn: Optional[Callable] = None
    q_jac: Optional[Callable] = None
    op: Optional[operators.FluxOperator] = None
    eps: Optional[float] = None
    strict: bool = True
    u_init: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in ("effective", "fine"):
            raise ConfigError(f"unknown problem mode {self.mode!r}")
        if self.u_init is not None:
            u0 = np.array(self.u_init, dtype=float)
            if u0.shape != self.grid.node_shape:
                raise ConfigError("u_init must be a nodal field on the grid")
            bd = self.grid.boundary_mask
            if np.max(np.abs(u0[bd]), initial=0.0) > 1e-12:
                raise ConfigError("u_init must vanish on the boundary")
            u0[bd] = 0.0
            self.u_init = u0
        if self.mode == "effective":
            if (self.table is None) == (self.q_fn is None):
                raise ConfigError("effective mode needs a table or a q callable")
        else:
            if self.op is None or self.eps is None:
                raise ConfigError("fine mode needs an operator and eps")
            if self.eps <= 0:
                raise ConfigError("eps must be positive")
            if self.op.dim != self.grid.dim:
                raise ConfigError("operator dimension must match the grid")


def effective_problem(grid, tgrid, source, table=None, q_fn=None, q_jac=None,
                      params=None, strict=True, u_init=None) -> ParabolicProblem:
    return ParabolicProblem(
        mode="effective", grid=grid, tgrid=tgrid, source=source,
        params=params if params is not None else SolverParams(),
        table=table, q_fn=q_fn, q_jac=q_jac, strict=strict, u_init=u_init)


def fine_problem(grid, tgrid, source, op, eps, params=None,
                 u_init=None) -> ParabolicProblem:
    return ParabolicProblem(
        mode="fine", grid=grid, tgrid=tgrid, source=source,
        params=params if params is not None else SolverParams(),
        op=op, eps=eps, u_init=u_init)


@dataclass
class SolutionHistory:
    """Time-indexed nodal fields with per-step solver diagnostics.

    work accumulates |u(0)|_2^2 + 2 sum_k dt <f^k, u^k>, the initial
    energy plus discrete source work; it bounds the squared L2 norm from
    above and fills the energy column of the diagnostics export.
    dissipation accumulates dt * int B(|Du|) when an N-function is
    attached (monitored, not asserted).
    """

    grid: grids.DomainGrid
    tgrid: grids.TimeGrid
    snapshots: np.ndarray
    newton_iters: np.ndarray
    residuals: np.ndarray
    l2_norms: np.ndarray
    work: np.ndarray
    dissipation: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def field_at(self, m: int) -> np.ndarray:
        return self.snapshots[m]

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[-1]

    def energy_margin(self) -> float:
        """min over steps of (source work - squared L2 norm); the discrete
        energy inequality makes this nonnegative up to roundoff."""
        return float(np.min(self.work - self.l2_norms**2))

    def long_rows(self):
        """(step, index, value) rows over every snapshot, C-order nodes."""
        for m in range(self.snapshots.shape[0]):
            flat = self.snapshots[m].ravel()
            for i in range(flat.shape[0]):
                yield m, i, flat[i]

    def diagnostic_rows(self):
        """(step, newton_iters, residual, l2_norm, energy) rows, step >= 1."""
        for m in range(1, self.snapshots.shape[0]):
            yield (m, int(self.newton_iters[m - 1]),
                   float(self.residuals[m - 1]),
                   float(self.l2_norms[m]), float(self.work[m]))


def _step(u_prev, dt, flux, f_step, grid, params, precond):
    """One backward-Euler step; returns (u, newton_iters, residual_norm)."""
    nd = grid.dim
    w = grid.node_weights
    mask = (~grid.boundary_mask).astype(float)
    inv_dt = 1.0 / dt
    f_w = w * f_step

    def residual_at(u):
        lam = grids.gradient(u, grid)
        R = (w * inv_dt * (u - u_prev)
             + grids.grad_adjoint(flux.sigma(lam), grid) - f_w) * mask
        return R, lam

    load = (f_w + w * inv_dt * u_prev) * mask
    scale = float(np.sqrt(np.sum(load * load)))
    u = u_prev.copy()
    F, lam = residual_at(u)
    res = float(np.sqrt(np.sum(F * F)))
    thresh = params.tol * max(scale, res)
    if res <= thresh:
        return u, 0, res

    cg_maxiter = (params.cg_maxiter if params.cg_maxiter is not None
                  else 200 + 2 * (grid.n + 1) ** grid.dim)
    sym_ok = bool(getattr(flux, "symmetric", True))

    def project(v):
        return v * mask

    def linear_step(A, rhs):
        Asym = 0.5 * (A + np.swapaxes(A, -1, -2))
        kappa = np.maximum(
            float(np.mean(np.einsum("...ii->...", Asym)) / grid.dim), 1e-12)
        if sym_ok:
            def apply_J(v):
                vm = v * mask
                return (w * inv_dt * vm
                        + solvers.apply_element_jacobian(Asym, vm, grid)) * mask
            apply_M = None
            if precond is not None:
                apply_M = lambda r: precond(r, kappa, inv_dt)
            return solvers.pcg_batch(apply_J, rhs, nd, params.cg_rtol,
                                     cg_maxiter, apply_M, project)
        At = np.swapaxes(A, -1, -2)

        def apply_Jv(v, blocks):
            vm = v * mask
            return (w * inv_dt * vm
                    + solvers.apply_element_jacobian(blocks, vm, grid)) * mask

        def apply_N(v):
            return apply_Jv(apply_Jv(v, A), At)

        rhs_n = apply_Jv(rhs, At)
        apply_M = None
        if precond is not None:
            apply_M = lambda r: precond(precond(r, kappa, inv_dt), kappa, inv_dt)
        return solvers.pcg_batch(apply_N, rhs_n, nd, params.cg_rtol,
                                 cg_maxiter, apply_M, project)

    iters = 0
    for _ in range(params.max_iter):
        if res <= thresh:
            break
        A = flux.jac(lam)
        if not np.all(np.isfinite(A)):
            raise SolverError("non-finite Jacobian entries in time step")
        delta = linear_step(A, -F)
        iters += 1
        t = 1.0
        accepted = False
        while t >= params.min_step:
            trial = u + t * delta
            F_t, lam_t = residual_at(trial)
            res_t = float(np.sqrt(np.sum(F_t * F_t)))
            if res_t <= (1.0 - _ARMIJO * t) * res:
                u, F, lam, res = trial, F_t, lam_t, res_t
                accepted = True
                break
            t *= params.backtrack_factor
        if not accepted:
            break
    if res > thresh:
        rel = res / max(scale, 1e-300)
        raise SolverError(
            f"implicit step failed to converge: relative residual {rel:.3e} "
            f"after {iters} Newton iterations")
    return u, iters, res


def implicit_step(u_prev, dt, flux, f_step, grid,
                  params: Optional[SolverParams] = None,
                  precond=None) -> np.ndarray:
    """Solve one backward-Euler step of the discrete weak form.

    Args:
        u_prev: nodal field at the previous level, zero on the boundary.
        dt: step size.
        flux: evaluator with sigma(lam) -> (*elements, dim) and
            jac(lam) -> (*elements, dim, dim); a symmetric attribute
            selects plain CG versus a normal-equations solve.
        f_step: nodal source at the implicit time level (array or scalar).
        grid: DomainGrid.
        params: SolverParams; defaults when omitted.
        precond: optional DirichletSpectralPreconditioner to reuse.

    Returns:
        Nodal field u with the step residual at or below tolerance.

    Raises:
        SolverError: Newton with backtracking stalled above tolerance.
    """
    if params is None:
        params = SolverParams()
    u_prev = np.asarray(u_prev, dtype=float)
    f_step = np.broadcast_to(np.asarray(f_step, dtype=float), grid.node_shape)
    if precond is None and params.precondition:
        precond = solvers.DirichletSpectralPreconditioner(grid)
    u, _, _ = _step(u_prev, dt, flux, f_step, grid, params, precond)
    return u


def _source_field(source, x, t, m, grid, tgrid):
    if callable(source):
        out = np.asarray(source(x, t), dtype=float)
        return np.broadcast_to(out, grid.node_shape)
    arr = np.asarray(source, dtype=float)
    if arr.ndim == 0:
        return np.broadcast_to(arr, grid.node_shape)
    if arr.shape == (tgrid.steps,) + grid.node_shape:
        return arr[m - 1]
    raise ConfigError(
        "source must be a callable f(x, t), a scalar, or an array of "
        f"per-step fields with shape {(tgrid.steps,) + grid.node_shape}")


def _march(problem: ParabolicProblem, flux, set_time=None,
           nf=None) -> SolutionHistory:
    grid, tgrid = problem.grid, problem.tgrid
    params = problem.params
    M = tgrid.steps
    dt = tgrid.dt
    x = grid.node_coords()
    precond = (solvers.DirichletSpectralPreconditioner(grid)
               if params.precondition else None)
    snapshots = np.zeros((M + 1,) + grid.node_shape)
    if problem.u_init is not None:
        snapshots[0] = problem.u_init
    newton_iters = np.zeros(M, dtype=int)
    residuals = np.zeros(M)
    l2 = np.zeros(M + 1)
    l2[0] = float(np.sqrt(grids.integrate(snapshots[0] ** 2, grid)))
    work = np.zeros(M + 1)
    work[0] = l2[0] ** 2
    diss = np.zeros(M + 1) if nf is not None else None
    max_grad = 0.0
    u = snapshots[0].copy()
    for m in range(1, M + 1):
        t = m * dt
        f_m = _source_field(problem.source, x, t, m, grid, tgrid)
        if set_time is not None:
            set_time(t)
        try:
            u, it, res = _step(u, dt, flux, f_m, grid, params, precond)
        except SolverError as exc:
            raise SolverError(f"step {m} (t={t:.6g}): {exc}") from exc
        lam = grids.gradient(u, grid)
        gmax = float(np.max(np.abs(lam)))
        max_grad = max(max_grad, gmax)
        if problem.mode == "effective" and problem.table is not None and problem.strict:
            box = float(problem.table.axes[0][-1])
            if gmax > box + 1e-9 * max(1.0, box):
                raise ConfigError(
                    f"step {m}: solution gradient {gmax:.4g} left the "
                    f"effective-flux table box {box:.4g}")
        snapshots[m] = u
        newton_iters[m - 1] = it
        residuals[m - 1] = res
        l2[m] = float(np.sqrt(grids.integrate(u * u, grid)))
        work[m] = work[m - 1] + 2.0 * dt * float(grids.integrate(f_m * u, grid))
        if diss is not None:
            r = np.sqrt(np.sum(lam * lam, axis=-1))
            diss[m] = diss[m - 1] + dt * float(
                grids.integrate_elements(nf.eval_fn(r), grid))
    history = SolutionHistory(
        grid=grid, tgrid=tgrid, snapshots=snapshots,
        newton_iters=newton_iters, residuals=residuals, l2_norms=l2,
        work=work, dissipation=diss,
        meta={"mode": problem.mode, "max_gradient": max_grad})
    return history


def macro_solve(problem: ParabolicProblem) -> SolutionHistory:
    """March the homogenized problem driven by the effective flux.

    Strict table mode raises when a converged step's gradient leaves the
    table box; Newton trial states may probe past the edge (evaluations
    clamp) without tripping the guard.
    """
    if problem.mode != "effective":
        raise ConfigError("macro_solve needs a problem in effective mode")
    flux = MacroFlux(table=problem.table, fn=problem.q_fn,
                     jac_fn=problem.q_jac)
    history = _march(problem, flux)
    history.meta["q_source"] = "table" if problem.table is not None else "callable"
    history.meta["table_clamp_excess"] = flux.max_excess
    return history


def fine_solve(problem: ParabolicProblem) -> SolutionHistory:
    """March the oscillatory problem at scale eps.

    Guards: the mesh must resolve the inner scale (error when
    h > eps^2/4, warning when h > eps^2/8) and the time grid must resolve
    the fast time (steps >= 8/eps).
    """
    if problem.mode != "fine":
        raise ConfigError("fine_solve needs a problem in fine mode")
    grid, eps = problem.grid, problem.eps
    if grid.h > eps * eps / 4.0 + 1e-12:
        raise ConfigError(
            f"mesh size {grid.h:.4g} cannot resolve the inner scale: need "
            f"h <= eps^2/4 = {eps * eps / 4.0:.4g}")
    if grid.h > eps * eps / 8.0 + 1e-12:
        warnings.warn(
            f"mesh size {grid.h:.4g} is marginal for the inner scale "
            f"eps^2 = {eps * eps:.4g}; aim for h <= eps^2/8")
    if problem.tgrid.steps < 8.0 / eps - 1e-9:
        raise ConfigError(
            f"{problem.tgrid.steps} steps cannot resolve the fast time: "
            f"need at least 8/eps = {8.0 / eps:.4g}")
    flux = OscillatoryFlux(problem.op, eps, grid)
    nf = problem.op.nf if problem.op.separable else None
    history = _march(problem, flux, set_time=flux.set_time, nf=nf)
    history.meta["eps"] = eps
    return history
