"""End-to-end acceptance suite.

One test per criterion, each printing a single PASS/FAIL line with the
measured numbers.  The heavy d=1 reference convergence study is shared
between the homogenization and pairing criteria through a module fixture.
"""

import time

import numpy as np
import pytest
from scipy.integrate import quad

from reithom import (cell, config, effective, grids, harness, operators,
                     orlicz, pde)


def _report(num, ok, detail):
    print(f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {num:02d}: {detail}"


def test_criterion_01_linear_reference_effective_flux():
    t0 = time.perf_counter()
    op = operators.reference_linear()
    g = grids.PeriodicCellGrid(1, 256)
    q = float(effective.effective_flux_q(op, np.array([1.0]), g, g,
                                         grids.ThetaGrid(8))[0])
    elapsed = time.perf_counter() - t0
    err = abs(q - 3.0)
    _report(1, err <= 1e-3 and elapsed <= 30.0,
            f"q(1) = {q:.6f}, |q - 3| = {err:.2e}, {elapsed:.1f}s")


def test_criterion_02_power_law_effective_flux():
    t0 = time.perf_counter()
    op = operators.reference_power_law(p=3.0, dim=1)
    val, _ = quad(lambda z: (2.0 + np.sin(2.0 * np.pi * z)) ** -0.5, 0.0, 1.0)
    oracle = val ** -2.0
    g = grids.PeriodicCellGrid(1, 256)
    q = float(effective.effective_flux_q(op, np.array([1.0]), g, g,
                                         grids.ThetaGrid(8))[0])
    elapsed = time.perf_counter() - t0
    rel = abs(q - oracle) / oracle
    _report(2, rel <= 1e-3 and elapsed <= 60.0,
            f"q(1) = {q:.6f} vs quadrature {oracle:.6f}, "
            f"rel = {rel:.2e}, {elapsed:.1f}s")


def test_criterion_03_structural_invariants_of_q():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20260822)
    worst_zero = worst_odd = 0.0
    worst_mono = np.inf
    for d in (1, 2):
        n = 256 if d == 1 else 32
        g = grids.PeriodicCellGrid(d, n)
        tg = grids.ThetaGrid(8)
        for op in (operators.reference_linear(dim=d),
                   operators.reference_power_law(p=3.0, dim=d)):
            table = effective.tabulate_q(op, 1.0, 9, g, g, tg)
            pts = table.sample_points()
            vals = table.sample_values()
            worst_zero = max(worst_zero, float(table.meta["q_at_zero_max_abs"]))
            assert np.array_equal(pts[::-1], -pts)
            worst_odd = max(worst_odd, float(np.max(np.abs(vals + vals[::-1]))))
            m = pts.shape[0]
            i = rng.integers(0, m, 100)
            j = rng.integers(0, m, 100)
            inner = np.sum((vals[i] - vals[j]) * (pts[i] - pts[j]), axis=-1)
            worst_mono = min(worst_mono, float(inner.min()))
    elapsed = time.perf_counter() - t0
    ok = (worst_zero <= 1e-8 and worst_odd <= 1e-8
          and worst_mono >= -1e-10 and elapsed <= 600.0)
    _report(3, ok,
            f"|q(0)| <= {worst_zero:.2e}, oddness <= {worst_odd:.2e}, "
            f"monotonicity min {worst_mono:.2e} on 100 pairs x 4 tables, "
            f"{elapsed:.1f}s")


def test_criterion_04_corrector_invariants():
    params = cell.SolverParams()
    zg = grids.PeriodicCellGrid(1, 256)
    tg = grids.ThetaGrid(8)
    xi = np.array([1.0])
    worst_mean = worst_zero = 0.0
    for op in (operators.reference_linear(),
               operators.reference_power_law(p=3.0)):
        inner = cell.solve_inner_corrector(op, np.zeros(1), 0.0, xi, zg,
                                           params)
        outer = effective.outer_corrector(op, 0.0, xi, zg, zg, tg, params)
        for sol in (inner, outer):
            assert sol.converged
            worst_mean = max(worst_mean,
                             abs(float(grids.cell_average(sol.pi, sol.grid))))
        z0 = cell.solve_inner_corrector(op, np.zeros(1), 0.0, np.zeros(1),
                                        zg, params)
        worst_zero = max(worst_zero, float(np.max(np.abs(z0.pi))))

    op = operators.reference_power_law(p=3.0)
    nodes = zg.node_coords()[..., 0]
    guess = grids.project_zero_mean(0.25 * np.sin(2.0 * np.pi * nodes), zg)
    s1 = cell.solve_inner_corrector(op, np.zeros(1), 0.0, xi, zg, params)
    s2 = cell.solve_inner_corrector(op, np.zeros(1), 0.0, xi, zg, params,
                                    initial=guess)
    w = np.full(zg.node_shape, zg.h)
    gap = orlicz.luxemburg_norm(orlicz.DiscreteField(s1.pi - s2.pi, w), op.nf)
    ok = worst_mean <= 1e-12 and worst_zero <= 1e-12 and gap <= 1e-8
    _report(4, ok,
            f"corrector mean <= {worst_mean:.2e} (periodic storage exact), "
            f"|pi(0)| <= {worst_zero:.2e}, "
            f"initial-guess gap {gap:.2e} in Luxemburg norm")


def test_criterion_05_axiom_certification():
    details = []
    ok = True
    for op in (operators.reference_linear(),
               operators.reference_power_law(p=3.0)):
        rep = operators.verify_axioms(op, n_samples=10_000, seed=7, tol=1e-10)
        ok = ok and (rep.passed and rep.monotonicity_violations == 0
                     and rep.zero_worst == 0.0
                     and rep.periodicity_worst == 0.0)
        details.append(f"{op.kind}: mono viol {rep.monotonicity_violations}, "
                       f"zero {rep.zero_worst:.1e}, "
                       f"periodicity {rep.periodicity_worst:.1e}")
    _report(5, ok, "; ".join(details) + " (10000 samples each)")


def test_criterion_06_orlicz_layer():
    worst_closed = 0.0
    w = np.full(64, 1.0 / 64.0)
    for p in (2.0, 3.0):
        nf = orlicz.power(p)
        for c in (0.5, 2.0):
            got = orlicz.luxemburg_norm(
                orlicz.DiscreteField(np.full(64, c), w), nf)
            worst_closed = max(worst_closed, abs(got - c * p ** (-1.0 / p)))

    rng = np.random.default_rng(99)
    sandwich_ok = True
    cases = [(orlicz.power(2.0), 2.0, 2.0), (orlicz.power(3.0), 3.0, 3.0),
             (orlicz.power_log(2.0), 2.0, 3.0)]
    for nf, rho1, rho2 in cases:
        for _ in range(50):
            v = rng.standard_normal(50) * rng.uniform(0.05, 5.0)
            wts = rng.uniform(0.005, 0.05, 50)
            u = orlicz.DiscreteField(v, wts)
            k = orlicz.luxemburg_norm(u, nf)
            mod = orlicz.modular(u, nf)
            if k > 1 + 1e-9:
                sandwich_ok &= (mod >= k ** rho1 * (1 - 1e-9)
                                and mod <= k ** rho2 * (1 + 1e-9))
            elif 0 < k < 1 - 1e-9:
                sandwich_ok &= (mod <= k ** rho1 * (1 + 1e-9)
                                and mod >= k ** rho2 * (1 - 1e-9))

    worst_simonenko = 0.0
    for p in (2.0, 3.0):
        lo, hi = orlicz.simonenko_indices(orlicz.power(p))
        worst_simonenko = max(worst_simonenko, abs(lo - p), abs(hi - p))

    t = np.logspace(-3, 2, 32)
    s = np.logspace(-3, 2, 32)
    tt, ss = np.meshgrid(t, s)
    young_ok = True
    for nf in (orlicz.power(3.0), orlicz.power_log(2.0)):
        rhs = nf(tt) + nf.conjugate_eval(ss)
        young_ok &= bool(np.all(tt * ss <= rhs * (1 + 1e-9) + 1e-12))

    ok = (worst_closed <= 1e-10 and sandwich_ok
          and worst_simonenko <= 1e-12 and young_ok)
    _report(6, ok,
            f"closed-form norm err {worst_closed:.1e}, sandwich "
            f"{'ok' if sandwich_ok else 'violated'} on 150 fields, "
            f"Simonenko err {worst_simonenko:.1e}, Young "
            f"{'ok' if young_ok else 'violated'} on 32x32 grid")


def test_criterion_07_macro_solver_verification():
    t0 = time.perf_counter()
    rep = harness.run_manufactured_test(config.default_config())

    def qf(lam):
        return lam

    def qj(lam):
        return np.broadcast_to(np.eye(1), lam.shape + (1,)).copy()

    g = grids.DomainGrid(1, 64)
    tg = grids.TimeGrid(1.0, 16)
    zero = pde.macro_solve(pde.effective_problem(g, tg, 0.0, q_fn=qf,
                                                 q_jac=qj))
    zero_ok = float(np.max(np.abs(zero.snapshots))) == 0.0

    rng = np.random.default_rng(11)
    decay_ok = True
    for _ in range(3):
        u0 = rng.standard_normal(g.n + 1)
        u0[0] = u0[-1] = 0.0
        hist = pde.macro_solve(pde.effective_problem(
            g, tg, 0.0, q_fn=qf, q_jac=qj, u_init=u0))
        decay_ok &= bool(np.all(np.diff(hist.l2_norms)
                                <= 1e-12 * max(1.0, hist.l2_norms[0])))
    elapsed = time.perf_counter() - t0
    ok = (rep.order_s >= 1.8 and rep.order_t >= 0.9 and zero_ok
          and decay_ok and elapsed <= 60.0)
    _report(7, ok,
            f"orders s {rep.order_s:.2f} / t {rep.order_t:.2f}, "
            f"f=0 identically zero: {zero_ok}, seeded decay: {decay_ok}, "
            f"{elapsed:.1f}s")


@pytest.fixture(scope="module")
def reference_study():
    cfg = config.default_config()
    t0 = time.perf_counter()
    report = harness.run_convergence_study(cfg)
    return cfg, report, time.perf_counter() - t0


def test_criterion_08_homogenization_convergence(reference_study):
    cfg, rep, elapsed = reference_study
    l2s = [r.rel_l2 for r in rep.rows]
    luxs = [r.rel_lux for r in rep.rows]
    strict = (all(b < a for a, b in zip(l2s, l2s[1:]))
              and all(b < a for a, b in zip(luxs, luxs[1:])))
    ok = strict and l2s[-1] <= 0.05 and elapsed <= 600.0
    chain = " -> ".join(f"{v:.3e}" for v in l2s)
    _report(8, ok,
            f"rel_l2 {chain} (final <= 0.05: {l2s[-1] <= 0.05}), "
            f"Luxemburg strictly decreasing: "
            f"{all(b < a for a, b in zip(luxs, luxs[1:]))}, {elapsed:.1f}s")


def test_criterion_09_two_scale_pairing(reference_study):
    cfg, rep, _ = reference_study
    t0 = time.perf_counter()
    ts = harness.run_twoscale_test(cfg, report=rep)
    elapsed = time.perf_counter() - t0
    bad = sorted(pid for pid, v in ts.by_phi.items()
                 if not all(b < a for a, b in zip(v, v[1:])))
    ok = len(ts.by_phi) == 8 and not bad and elapsed <= 600.0
    _report(9, ok,
            ("all 8 solution/gradient pairings decreasing"
             if not bad else "non-decreasing: " + ", ".join(bad))
            + f", {elapsed:.1f}s")


def _determinism_run(out):
    cfg = config.config_from_dict({
        "grid": {"n": 64, "M": 64},
        "epsilons": [0.25, 0.125],
        "effective": {"n_xi": 5},
        "manufactured": {"ladder": [[16, 16], [32, 64]]},
    })
    rep = harness.run_convergence_study(cfg, out_dir=out)
    harness.run_twoscale_test(cfg, report=rep, out_dir=out)
    cg = cfg.cell_grid()
    table = effective.tabulate_q(cfg.op, cfg.box, cfg.n_xi, cg, cg,
                                 cfg.theta_grid(), cfg.solver_params(),
                                 h_mode=cfg.h_mode,
                                 inner_mode=cfg.inner_mode)
    harness.write_table_csv(table, out / "q_table.csv")
    harness.run_manufactured_test(cfg, out_dir=out)
    harness.write_field_csv(rep.u0.final, rep.grid, out / "macro_final.csv")


def _mask_runtime(path):
    lines = path.read_text().splitlines()
    out = []
    for line in lines:
        cols = line.split(",")
        out.append(",".join(cols[:3]))
    return "\n".join(out)


def test_criterion_10_determinism(tmp_path):
    out1 = tmp_path / "run1"
    out2 = tmp_path / "run2"
    out1.mkdir()
    out2.mkdir()
    _determinism_run(out1)
    _determinism_run(out2)
    identical = []
    for name in ("twoscale.csv", "manufactured.csv", "q_table.csv",
                 "macro_final.csv"):
        identical.append((out1 / name).read_bytes() == (out2 / name).read_bytes())
    conv_same = (_mask_runtime(out1 / "convergence.csv")
                 == _mask_runtime(out2 / "convergence.csv"))
    ok = all(identical) and conv_same
    _report(10, ok,
            "bitwise-identical CSVs across reruns "
            "(runtime_s wall-clock column masked in convergence.csv)")
