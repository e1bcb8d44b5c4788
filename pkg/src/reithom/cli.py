"""Command line front end.

Subcommands mirror the library drivers: cell correctors, effective-flux
tables, macroscopic and oscillatory solves, the convergence and two-scale
pairing studies, the manufactured-solution order check, and the operator
axiom audit.  Every run writes its fully resolved configuration next to
the outputs, CSV files per the fixed schemas, and PNG figures unless
--no-plots is given.

Exit codes: 0 success, 2 failed verification check, 3 solver breakdown,
4 configuration error.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import cell, config, effective, grids, harness, operators, pde, plots
from .errors import CheckError, ConfigError, SolverError


def _energy_check(hist, label):
    margin = hist.energy_margin()
    scale = max(1.0, float(np.max(hist.work, initial=0.0)))
    if margin < -1e-8 * scale:
        raise CheckError(
            f"{label}: energy ledger margin {margin:.3e} is negative "
            "beyond roundoff")


def _cmd_cell(cfg, out, render):
    params = cfg.solver_params()
    zgrid = cfg.cell_grid()
    xi = np.asarray(cfg.cell_xi, dtype=float)
    inner = cell.solve_inner_corrector(cfg.op, np.zeros(cfg.dim), 0.0, xi,
                                       zgrid, params)
    outer = effective.outer_corrector(cfg.op, 0.0, xi, zgrid, zgrid,
                                      cfg.theta_grid(), params,
                                      h_mode=cfg.h_mode,
                                      inner_mode=cfg.inner_mode)
    for label, sol in (("inner", inner), ("outer", outer)):
        if not sol.converged:
            raise SolverError(f"{label} corrector did not converge: "
                              f"residual {sol.residual_norm:.3e}")
        mean = abs(float(grids.cell_average(sol.pi, sol.grid)))
        if mean > 1e-10:
            raise CheckError(f"{label} corrector mean {mean:.3e} "
                             "exceeds 1e-10")
    harness.write_field_csv(inner.pi, zgrid, out / "inner_corrector.csv")
    harness.write_field_csv(outer.pi, zgrid, out / "outer_corrector.csv")
    if render:
        plots.corrector_figure(inner.pi, zgrid, out / "inner_corrector.png",
                               "inner corrector")
        plots.corrector_figure(outer.pi, zgrid, out / "outer_corrector.png",
                               "outer corrector")
    with np.printoptions(precision=8):
        print(f"inner: iterations {inner.iterations}, "
              f"residual {inner.residual_norm:.3e}, "
              f"averaged flux {inner.avg_flux}")
        print(f"outer: iterations {outer.iterations}, "
              f"residual {outer.residual_norm:.3e}, "
              f"averaged flux {outer.avg_flux}")


def _cmd_effective(cfg, out, render):
    cg = cfg.cell_grid()
    table = effective.tabulate_q(cfg.op, cfg.box, cfg.n_xi, cg, cg,
                                 cfg.theta_grid(), cfg.solver_params(),
                                 h_mode=cfg.h_mode, inner_mode=cfg.inner_mode)
    harness.write_table_csv(table, out / "q_table.csv",
                            out / "q_table_meta.toml")
    if render:
        plots.table_figure(table, out / "q_table.png")
    q0 = float(table.meta["q_at_zero_max_abs"])
    mono = float(table.meta["neighbor_monotonicity_min"])
    print(f"table: {table.sample_points().shape[0]} samples, "
          f"|q(0)| {q0:.3e}, neighbor monotonicity min {mono:.3e}")
    if q0 > 1e-8:
        raise CheckError(f"effective flux at zero is {q0:.3e}, above 1e-8")
    if mono < -1e-10:
        raise CheckError(f"neighbor monotonicity minimum {mono:.3e} "
                         "is negative beyond 1e-10")


def _cmd_macro(cfg, out, render):
    inputs = harness.build_effective_inputs(cfg)
    hist = pde.macro_solve(pde.effective_problem(
        cfg.domain_grid(), cfg.time_grid(), cfg.source(),
        params=cfg.solver_params(), **inputs))
    harness.write_field_csv(hist.final, hist.grid, out / "macro_final.csv")
    harness.write_diagnostics_csv(hist, out / "macro_diagnostics.csv")
    if render:
        plots.field_figure(hist.final, hist.grid, out / "macro_final.png",
                           "homogenized final state")
        plots.diagnostics_figure(hist, out / "macro_diagnostics.png")
    print(f"macro: {hist.snapshots.shape[0] - 1} steps, "
          f"final |u|_L2 {hist.l2_norms[-1]:.6e}, "
          f"q source {hist.meta.get('q_source', cfg.q_mode)}")
    _energy_check(hist, "macro")


def _cmd_fine(cfg, out, render):
    for eps in cfg.epsilons:
        n_f = harness.fine_resolution(cfg.n, eps)
        fgrid = grids.DomainGrid(cfg.dim, n_f)
        hist = pde.fine_solve(pde.fine_problem(
            fgrid, cfg.time_grid(), cfg.source(), cfg.op, eps,
            cfg.solver_params()))
        tag = f"{eps:g}".replace(".", "p")
        harness.write_field_csv(hist.final, fgrid,
                                out / f"fine_final_eps{tag}.csv")
        harness.write_diagnostics_csv(hist,
                                      out / f"fine_diagnostics_eps{tag}.csv")
        if render:
            plots.field_figure(hist.final, fgrid,
                               out / f"fine_final_eps{tag}.png",
                               f"oscillatory final state, eps = {eps:g}")
        print(f"fine eps {eps:g}: n {n_f}, "
              f"final |u|_L2 {hist.l2_norms[-1]:.6e}")
        _energy_check(hist, f"fine eps {eps:g}")


def _cmd_convergence(cfg, out, render):
    report = harness.run_convergence_study(cfg, out_dir=out)
    if render:
        plots.convergence_figure(report.rows, out / "convergence.png")
        plots.field_figure(report.u0.final, report.grid,
                           out / "macro_final.png",
                           "homogenized final state")
        eps_min = min(report.restricted)
        plots.field_figure(report.restricted[eps_min][-1], report.grid,
                           out / "fine_final_restricted.png",
                           f"restricted oscillatory state, eps = {eps_min:g}")
    for row in report.rows:
        print(f"eps {row.epsilon:g}: rel_l2 {row.rel_l2:.4e}, "
              f"rel_lux {row.rel_lux:.4e}  ({row.runtime_s:.1f}s)")
    if len(report.rows) >= 2 and not (report.monotone_l2
                                      and report.monotone_lux):
        raise CheckError("homogenization errors are not strictly decreasing "
                         "across the epsilon list")
    if not report.final_ok:
        tol = cfg.tolerances["final_rel_l2"]
        raise CheckError(f"final relative L2 error {report.rows[-1].rel_l2:.4e} "
                         f"exceeds {tol:g}")


def _cmd_twoscale(cfg, out, render):
    ts = harness.run_twoscale_test(cfg, out_dir=out)
    if render:
        plots.twoscale_figure(ts.rows, out / "twoscale.png")
    for phi_id, defects in sorted(ts.by_phi.items()):
        trend = " -> ".join(f"{d:.3e}" for d in defects)
        print(f"{phi_id}: {trend}")
    if len(cfg.epsilons) >= 2:
        bad = sorted(k for k, ok in ts.monotone.items() if not ok)
        if bad:
            raise CheckError("pairing defects are not decreasing for: "
                             + ", ".join(bad))


def _cmd_manufactured(cfg, out, render):
    report = harness.run_manufactured_test(cfg, out_dir=out)
    if render:
        plots.manufactured_figure(report.rows, out / "manufactured.png")
    for row in report.rows:
        print(f"n {row.n}, M {row.M}: max_err {row.max_err:.4e}")
    print(f"orders: spatial {report.order_s:.3f}, "
          f"temporal {report.order_t:.3f}")


def _cmd_verify_axioms(cfg, out, render):
    tols = cfg.tolerances
    report = operators.verify_axioms(cfg.op, cfg.nf,
                                     n_samples=int(tols["axiom_samples"]),
                                     seed=cfg.seed,
                                     tol=float(tols["axiom_tol"]))
    rows = [("zero_at_zero", report.zero_worst),
            ("periodicity", report.periodicity_worst),
            ("monotonicity", report.monotonicity_worst_violation),
            ("growth", report.growth_worst_violation)]
    if report.oddness_worst is not None:
        rows.append(("oddness", report.oddness_worst))
    harness.write_csv(out / "axioms.csv", ["check", "worst_violation"], rows)
    for name, worst in rows:
        print(f"{name}: worst violation {worst:.3e}")
    if not report.passed:
        raise CheckError(f"structure axiom audit failed on {report.n_samples} "
                         f"samples (tol {report.tol:g})")


_COMMANDS = [
    ("cell", _cmd_cell, "solve the inner and outer cell correctors"),
    ("effective", _cmd_effective, "tabulate the effective flux"),
    ("macro", _cmd_macro, "run the homogenized parabolic solve"),
    ("fine", _cmd_fine, "run the oscillatory solves for each epsilon"),
    ("convergence", _cmd_convergence,
     "compare oscillatory and homogenized solutions across epsilon"),
    ("twoscale", _cmd_twoscale, "run the reiterated two-scale pairing test"),
    ("manufactured", _cmd_manufactured,
     "check discretization orders against a manufactured solution"),
    ("verify-axioms", _cmd_verify_axioms,
     "audit the operator structure axioms by seeded sampling"),
]


def _parser():
    ap = argparse.ArgumentParser(
        prog="reithom",
        description="Reiterated periodic homogenization of parabolic "
                    "problems with Orlicz growth: solvers and studies.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, _, help_text in _COMMANDS:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", default=None,
                       help="experiment TOML (library defaults when omitted)")
        p.add_argument("--out", metavar="DIR", default=None,
                       help="output directory (overrides the config)")
        p.add_argument("--no-plots", action="store_true",
                       help="skip figure rendering")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    dispatch = {name: fn for name, fn, _ in _COMMANDS}
    try:
        if args.config is not None:
            cfg = config.load_config(args.config)
        else:
            cfg = config.default_config()
        out = Path(args.out) if args.out is not None else Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        config.write_resolved_config(cfg, out / "resolved.toml")
        dispatch[args.command](cfg, out, not args.no_plots)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 4
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3
    except CheckError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
