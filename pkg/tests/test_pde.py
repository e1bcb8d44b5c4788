import numpy as np
import pytest

from reithom import effective, grids, operators, pde
from reithom.cell import SolverParams
from reithom.errors import ConfigError, SolverError


def heat_flux(kappa=1.0):
    return pde.MacroFlux(fn=lambda lam: kappa * lam,
                         jac_fn=lambda lam: kappa * np.broadcast_to(
                             np.eye(lam.shape[-1]), lam.shape + (lam.shape[-1],)))


def test_step_zero_source_zero_state():
    g = grids.DomainGrid(1, 32)
    u = pde.implicit_step(np.zeros(g.node_shape), 0.1, heat_flux(),
                          np.zeros(g.node_shape), g)
    assert np.array_equal(u, np.zeros(g.node_shape))


def test_step_matches_dense_linear_solve():
    g = grids.DomainGrid(1, 32)
    dt = 1e-2
    h = g.h
    n_int = g.n - 1
    K = (np.diag(np.full(n_int, 2.0)) + np.diag(np.full(n_int - 1, -1.0), 1)
         + np.diag(np.full(n_int - 1, -1.0), -1)) / h
    A = np.eye(n_int) * h / dt + K
    b = np.full(n_int, h)
    ref = np.linalg.solve(A, b)
    u = pde.implicit_step(np.zeros(g.node_shape), dt, heat_flux(),
                          np.ones(g.node_shape), g)
    assert np.max(np.abs(u[1:-1] - ref)) <= 1e-12
    assert u[0] == 0.0 and u[-1] == 0.0


def test_linear_flux_takes_one_newton_iteration():
    g = grids.DomainGrid(1, 64)
    tg = grids.TimeGrid(1.0, 8)
    prob = pde.effective_problem(g, tg, 1.0, q_fn=lambda lam: 3.0 * lam)
    hist = pde.macro_solve(prob)
    assert np.all(hist.newton_iters == 1)


def test_macro_zero_source_stays_zero():
    g = grids.DomainGrid(1, 32)
    tg = grids.TimeGrid(1.0, 6)
    prob = pde.effective_problem(g, tg, 0.0, q_fn=lambda lam: lam)
    hist = pde.macro_solve(prob)
    assert np.array_equal(hist.snapshots, np.zeros_like(hist.snapshots))
    assert np.all(hist.newton_iters == 0)


def test_macro_reproduces_space_time_polynomial():
    # u(x,t) = t x (1-x) is exact for backward Euler with a quadratic
    # space profile, so the discrete solution matches to solver tolerance
    kappa = 2.0
    g = grids.DomainGrid(1, 32)
    tg = grids.TimeGrid(1.0, 16)
    x = g.node_coords()[..., 0]

    def f(xc, t):
        xx = xc[..., 0]
        return xx * (1.0 - xx) + 2.0 * kappa * t

    prob = pde.effective_problem(g, tg, f, q_fn=lambda lam: kappa * lam)
    hist = pde.macro_solve(prob)
    for m in (4, 16):
        t = m * tg.dt
        exact = t * x * (1.0 - x)
        assert np.max(np.abs(hist.snapshots[m] - exact)) <= 1e-8


def test_macro_steady_state_matches_elliptic_limit():
    g = grids.DomainGrid(1, 64)
    tg = grids.TimeGrid(2.0, 32)
    prob = pde.effective_problem(
        g, tg, lambda x, t: np.sin(np.pi * x[..., 0]),
        q_fn=lambda lam: 3.0 * lam)
    hist = pde.macro_solve(prob)
    x = g.node_coords()[..., 0]
    ref = np.sin(np.pi * x) / (3.0 * np.pi**2)
    err = np.max(np.abs(hist.final - ref)) / np.max(ref)
    assert err <= 0.02


def test_dissipativity_and_energy_ledger():
    g = grids.DomainGrid(1, 48)
    tg = grids.TimeGrid(1.0, 12)
    f_steps = np.zeros((12,) + g.node_shape)
    f_steps[:3] = 1.0
    prob = pde.effective_problem(
        g, tg, f_steps,
        q_fn=lambda lam: np.sqrt(np.sum(lam * lam, axis=-1))[..., None] * lam)
    hist = pde.macro_solve(prob)
    tail = hist.l2_norms[3:]
    assert np.all(np.diff(tail) <= 1e-14)
    assert hist.energy_margin() >= -1e-12
    rows = list(hist.diagnostic_rows())
    assert len(rows) == 12 and rows[0][0] == 1


def test_unforced_decay_from_initial_state():
    g = grids.DomainGrid(1, 48)
    tg = grids.TimeGrid(0.5, 16)
    x = g.node_coords()[..., 0]
    u0 = np.sin(np.pi * x) + 0.3 * np.sin(3 * np.pi * x)
    prob = pde.effective_problem(
        g, tg, 0.0, u_init=u0,
        q_fn=lambda lam: lam + 0.5 * np.abs(lam) * lam)
    hist = pde.macro_solve(prob)
    assert np.array_equal(hist.snapshots[0][1:-1], u0[1:-1])
    assert hist.snapshots[0][0] == 0.0 and hist.snapshots[0][-1] == 0.0
    assert np.all(np.diff(hist.l2_norms) < 0.0)
    assert hist.energy_margin() >= -1e-12
    with pytest.raises(ConfigError, match="boundary"):
        pde.effective_problem(g, tg, 0.0, u_init=np.ones(g.node_shape),
                              q_fn=lambda lam: lam)
    with pytest.raises(ConfigError, match="nodal"):
        pde.effective_problem(g, tg, 0.0, u_init=np.zeros(5),
                              q_fn=lambda lam: lam)


def test_identical_fluxes_identical_histories():
    g = grids.DomainGrid(1, 32)
    tg = grids.TimeGrid(0.5, 8)
    mk = lambda: pde.effective_problem(
        g, tg, 1.0, q_fn=lambda lam: 2.0 * lam + lam**3)
    h1 = pde.macro_solve(mk())
    h2 = pde.macro_solve(mk())
    assert np.array_equal(h1.snapshots, h2.snapshots)


def test_macro_table_mode_matches_callable():
    one = operators.constant_poly(1.0, 1)
    op = operators.linear_separable(one, one)
    cg = grids.PeriodicCellGrid(1, 16)
    table = effective.tabulate_q(op, box=1.0, n_xi=5, ygrid=cg, zgrid=cg)
    g = grids.DomainGrid(1, 32)
    tg = grids.TimeGrid(0.5, 8)
    hist_t = pde.macro_solve(pde.effective_problem(g, tg, 1.0, table=table))
    hist_f = pde.macro_solve(pde.effective_problem(g, tg, 1.0,
                                                   q_fn=lambda lam: lam))
    assert np.max(np.abs(hist_t.snapshots - hist_f.snapshots)) <= 1e-10
    assert hist_t.meta["q_source"] == "table"
    assert hist_t.meta["max_gradient"] <= 1.0


def test_macro_strict_table_range_guard():
    one = operators.constant_poly(1.0, 1)
    op = operators.linear_separable(one, one)
    cg = grids.PeriodicCellGrid(1, 16)
    small = effective.tabulate_q(op, box=0.05, n_xi=5, ygrid=cg, zgrid=cg)
    g = grids.DomainGrid(1, 32)
    tg = grids.TimeGrid(0.5, 4)
    with pytest.raises(ConfigError, match="step 1"):
        pde.macro_solve(pde.effective_problem(g, tg, 1.0, table=small))
    hist = pde.macro_solve(
        pde.effective_problem(g, tg, 1.0, table=small, strict=False))
    assert hist.meta["table_clamp_excess"] > 0.0


def test_fine_identity_matches_macro():
    one = operators.constant_poly(1.0, 1)
    op = operators.linear_separable(one, one)
    g = grids.DomainGrid(1, 32)
    tg = grids.TimeGrid(1.0, 16)
    fine = pde.fine_solve(pde.fine_problem(g, tg, 1.0, op, eps=0.5))
    eye = np.eye(1)
    macro = pde.macro_solve(pde.effective_problem(
        g, tg, 1.0, q_fn=lambda lam: lam,
        q_jac=lambda lam: np.broadcast_to(eye, lam.shape + (1,))))
    assert np.max(np.abs(fine.snapshots - macro.snapshots)) <= 1e-12
    assert fine.meta["eps"] == 0.5
    assert fine.dissipation is not None
    assert np.all(np.diff(fine.dissipation) >= 0.0)


def test_fine_zero_source_stays_zero():
    op = operators.reference_linear(1)
    g = grids.DomainGrid(1, 128)
    tg = grids.TimeGrid(1.0, 32)
    hist = pde.fine_solve(pde.fine_problem(g, tg, 0.0, op, eps=0.25))
    assert np.array_equal(hist.snapshots, np.zeros_like(hist.snapshots))


def test_fine_oscillatory_run_is_sane():
    op = operators.reference_linear(1)
    g = grids.DomainGrid(1, 128)
    tg = grids.TimeGrid(0.5, 32)
    hist = pde.fine_solve(pde.fine_problem(g, tg, 1.0, op, eps=0.25))
    assert np.all(hist.snapshots[:, 0] == 0.0)
    assert np.all(hist.snapshots[:, -1] == 0.0)
    assert hist.energy_margin() >= -1e-12
    assert 0.0 < hist.l2_norms[-1] < 1.0


def test_fine_resolution_guards():
    op = operators.reference_linear(1)
    tg = grids.TimeGrid(1.0, 16)
    with pytest.raises(ConfigError, match="resolve the inner scale"):
        pde.fine_solve(pde.fine_problem(grids.DomainGrid(1, 8), tg, 1.0,
                                        op, eps=0.5))
    with pytest.warns(UserWarning, match="marginal"):
        pde.fine_solve(pde.fine_problem(grids.DomainGrid(1, 16),
                                        grids.TimeGrid(1.0, 16), 1.0,
                                        op, eps=0.5))
    with pytest.warns(UserWarning, match="marginal"):
        with pytest.raises(ConfigError, match="fast time"):
            pde.fine_solve(pde.fine_problem(grids.DomainGrid(1, 64),
                                            grids.TimeGrid(1.0, 8), 1.0,
                                            op, eps=0.25))


def test_oscillatory_flux_fast_time_wraps():
    c = operators.TrigPoly(
        dim=1, const=2.0,
        modes=(operators.TrigMode(k=(1,), m=1, cos_amp=0.5),))
    op = operators.linear_separable(c, operators.constant_poly(1.0, 1))
    g = grids.DomainGrid(1, 64)
    flux = pde.OscillatoryFlux(op, 0.25, g)
    flux.set_time(0.125)
    c1 = flux._coeff.copy()
    flux.set_time(0.375)
    assert np.array_equal(c1, flux._coeff)
    flux.set_time(0.25)
    assert not np.array_equal(c1, flux._coeff)


def test_step_failure_raises_with_step_index():
    g = grids.DomainGrid(1, 32)
    tg = grids.TimeGrid(1.0, 4)
    prob = pde.effective_problem(
        g, tg, 10.0,
        q_fn=lambda lam: lam * np.sum(lam * lam, axis=-1)[..., None] ** 2,
        params=SolverParams(max_iter=1))
    with pytest.raises(SolverError, match="step 1"):
        pde.macro_solve(prob)


def test_problem_validation():
    g = grids.DomainGrid(1, 16)
    tg = grids.TimeGrid(1.0, 4)
    with pytest.raises(ConfigError):
        pde.ParabolicProblem(mode="bogus", grid=g, tgrid=tg, source=0.0)
    with pytest.raises(ConfigError):
        pde.effective_problem(g, tg, 0.0)
    with pytest.raises(ConfigError):
        pde.effective_problem(g, tg, 0.0, q_fn=lambda lam: lam,
                              table="also")
    with pytest.raises(ConfigError):
        pde.fine_problem(g, tg, 0.0, operators.reference_linear(1), eps=-1.0)
    with pytest.raises(ConfigError):
        pde.fine_problem(g, tg, 0.0, operators.reference_linear(2), eps=0.5)
    with pytest.raises(ConfigError):
        pde.MacroFlux()
    with pytest.raises(ConfigError):
        bad = np.zeros((3, 5))
        pde.macro_solve(pde.effective_problem(g, tg, bad,
                                              q_fn=lambda lam: lam))
