"""Run configuration: TOML loading, validation, canonical re-emission.

The configuration file is TOML with sections [operator], [nfunction],
[grid], [source], [effective], [cell], [manufactured], [tolerances] and
top-level keys epsilons, q_mode, h_mode, seed, out_dir.  The [operator],
[nfunction], and [source] sections are taken as given when present
(either a preset name or an explicit trigonometric spec); the remaining
sections fill unspecified keys from defaults.  Unknown keys are rejected.

Every run re-emits the fully resolved configuration next to its outputs
so a result directory is self-describing; dump_toml writes sections and
keys in sorted order with round-trip float formatting, which makes the
emitted file a deterministic function of the resolved values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import grids, operators, orlicz
from .cell import SolverParams
from .errors import ConfigError

_PRESETS = ("reference-linear", "reference-power", "identity")

_DEFAULTS = {
    "epsilons": [0.25, 0.125, 0.0625],
    "q_mode": "table",
    "h_mode": "z-only",
    "seed": 1234,
    "out_dir": "out",
    "operator": {"preset": "reference-linear"},
    "nfunction": {"kind": "power", "p": 2.0},
    "grid": {"d": 1, "n": 128, "n_tau": 8, "T": 1.0, "M": 128},
    "source": {"kind": "constant", "value": 1.0, "ramp": 1.0},
    "effective": {"box": 1.0, "n_xi": 9, "inner_mode": "auto"},
    "cell": {"xi": [1.0]},
    "manufactured": {"kappa": 1.0, "ladder": [[32, 32], [64, 128], [128, 512]]},
    "tolerances": {
        "solver_tol": 1e-10,
        "final_rel_l2": 0.05,
        "order_s_min": 1.8,
        "order_t_min": 0.9,
        "axiom_tol": 1e-10,
        "axiom_samples": 10000,
    },
}

_ATOMIC_SECTIONS = ("operator", "nfunction", "source")


def _check_keys(d: dict, allowed, where: str):
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) {extra} in {where}")


def _as_int(v, name, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer")
    if lo is not None and v < lo:
        raise ConfigError(f"{name} must be >= {lo}")
    return int(v)


def _as_float(v, name, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name} must be a number")
    v = float(v)
    if positive and v <= 0:
        raise ConfigError(f"{name} must be positive")
    return v


def _trig_from_spec(spec: dict, dim: int, where: str) -> operators.TrigPoly:
    _check_keys(spec, ("const", "modes"), where)
    modes = []
    for i, md in enumerate(spec.get("modes", [])):
        _check_keys(md, ("k", "m", "cos_amp", "sin_amp"), f"{where}.modes[{i}]")
        k = tuple(_as_int(v, f"{where}.modes[{i}].k entry") for v in md.get("k", ()))
        if len(k) != dim:
            raise ConfigError(f"{where}.modes[{i}].k must have {dim} entries")
        modes.append(operators.TrigMode(
            k=k, m=_as_int(md.get("m", 0), f"{where}.modes[{i}].m"),
            cos_amp=_as_float(md.get("cos_amp", 0.0), "cos_amp"),
            sin_amp=_as_float(md.get("sin_amp", 0.0), "sin_amp")))
    return operators.TrigPoly(
        dim=dim, const=_as_float(spec.get("const", 0.0), f"{where}.const"),
        modes=tuple(modes))


def _trig_spec(poly: operators.TrigPoly) -> dict:
    return {
        "const": float(poly.const),
        "modes": [
            {"k": list(m.k), "m": int(m.m), "cos_amp": float(m.cos_amp),
             "sin_amp": float(m.sin_amp)}
            for m in poly.modes
        ],
    }


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved run parameters plus the built operator and N-function."""

    dim: int
    n: int
    n_tau: int
    horizon: float
    steps: int
    epsilons: tuple
    q_mode: str
    h_mode: str
    seed: int
    out_dir: str
    box: float
    n_xi: int
    inner_mode: str
    cell_xi: tuple
    kappa: float
    ladder: tuple
    tolerances: dict
    operator_spec: dict
    nfunction_spec: dict
    source_spec: dict
    op: operators.FluxOperator
    nf: orlicz.NFunction

    def domain_grid(self) -> grids.DomainGrid:
        return grids.DomainGrid(self.dim, self.n)

    def cell_grid(self) -> grids.PeriodicCellGrid:
        return grids.PeriodicCellGrid(self.dim, self.n)

    def time_grid(self) -> grids.TimeGrid:
        return grids.TimeGrid(self.horizon, self.steps)

    def theta_grid(self) -> grids.ThetaGrid:
        return grids.ThetaGrid(self.n_tau)

    def solver_params(self) -> SolverParams:
        return SolverParams(tol=self.tolerances["solver_tol"])

    def source(self):
        """Source term for the parabolic solves, per the [source] section.

        The t**ramp factor switches the forcing on smoothly; a cold
        start injects large high-order time derivatives at t = 0 that
        dominate the Fourier coefficients the fast-time pairings
        measure.
        """
        kind = self.source_spec["kind"]
        value = self.source_spec["value"]
        ramp = self.source_spec["ramp"]
        if kind == "zero":
            return 0.0
        if kind == "constant" and ramp == 0.0:
            return value
        if kind == "constant":
            def f(x, t):
                return value * t ** ramp * np.ones(x.shape[:-1])
            return f
        def f(x, t):
            return value * t ** ramp * np.prod(np.sin(np.pi * x), axis=-1)
        return f

    def resolved(self) -> dict:
        return {
            "epsilons": [float(e) for e in self.epsilons],
            "q_mode": self.q_mode,
            "h_mode": self.h_mode,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "operator": dict(self.operator_spec),
            "nfunction": dict(self.nfunction_spec),
            "grid": {"d": self.dim, "n": self.n, "n_tau": self.n_tau,
                     "T": self.horizon, "M": self.steps},
            "source": dict(self.source_spec),
            "effective": {"box": self.box, "n_xi": self.n_xi,
                          "inner_mode": self.inner_mode},
            "cell": {"xi": [float(v) for v in self.cell_xi]},
            "manufactured": {"kappa": self.kappa,
                             "ladder": [list(r) for r in self.ladder]},
            "tolerances": dict(self.tolerances),
        }


def _build_nfunction(spec: dict) -> tuple[orlicz.NFunction, dict]:
    _check_keys(spec, ("kind", "p"), "[nfunction]")
    kind = spec.get("kind", "power")
    p = _as_float(spec.get("p", 2.0), "nfunction.p")
    if p <= 1.0:
        raise ConfigError("nfunction.p must exceed 1")
    if kind == "power":
        return orlicz.power(p), {"kind": "power", "p": p}
    if kind == "power-log":
        return orlicz.power_log(p), {"kind": "power-log", "p": p}
    raise ConfigError(f"unknown nfunction kind {kind!r}")


def _build_operator(spec: dict, nf: orlicz.NFunction, nf_spec: dict,
                    dim: int) -> tuple[operators.FluxOperator, dict]:
    if "preset" in spec:
        _check_keys(spec, ("preset", "dim", "delta"), "[operator]")
        preset = spec["preset"]
        odim = _as_int(spec.get("dim", dim), "operator.dim", lo=1)
        delta = _as_float(spec.get("delta", 1e-8), "operator.delta")
        if preset == "reference-linear":
            op = operators.reference_linear(odim)
        elif preset == "reference-power":
            op = operators.reference_power_law(nf_spec["p"], odim, delta)
        elif preset == "identity":
            one = operators.constant_poly(1.0, odim)
            op = operators.linear_separable(one, one)
        else:
            raise ConfigError(
                f"unknown operator preset {preset!r}; choose from {_PRESETS}")
        out = {"preset": preset, "dim": odim}
        if preset == "reference-power":
            out["delta"] = delta
        return op, out
    _check_keys(spec, ("kind", "dim", "delta", "c", "gamma"), "[operator]")
    kind = spec.get("kind")
    if kind not in ("linear", "power"):
        raise ConfigError("operator needs a preset or kind = linear | power")
    odim = _as_int(spec.get("dim", dim), "operator.dim", lo=1)
    c = _trig_from_spec(spec.get("c", {"const": 1.0}), odim, "operator.c")
    g = _trig_from_spec(spec.get("gamma", {"const": 1.0}), odim, "operator.gamma")
    out = {"kind": kind, "dim": odim, "c": _trig_spec(c), "gamma": _trig_spec(g)}
    if kind == "linear":
        if nf_spec != {"kind": "power", "p": 2.0}:
            raise ConfigError(
                "linear operators are certified against the quadratic "
                "growth function; set nfunction = {kind='power', p=2.0}")
        return operators.linear_separable(c, g), out
    delta = _as_float(spec.get("delta", 1e-8), "operator.delta")
    out["delta"] = delta
    return operators.power_law(nf, c, g, delta=delta), out


def config_from_dict(data: dict) -> ExperimentConfig:
    """Validate a configuration mapping and build the run objects.

    Raises:
        ConfigError: unknown keys, invalid values, or inconsistent specs.
    """
    _check_keys(data, tuple(_DEFAULTS), "configuration")
    merged = {}
    for key, dflt in _DEFAULTS.items():
        if isinstance(dflt, dict) and key not in _ATOMIC_SECTIONS:
            sub = dict(dflt)
            user = data.get(key, {})
            if not isinstance(user, dict):
                raise ConfigError(f"[{key}] must be a section")
            _check_keys(user, tuple(dflt), f"[{key}]")
            sub.update(user)
            merged[key] = sub
        else:
            merged[key] = data.get(key, dflt)

    gr = merged["grid"]
    dim = _as_int(gr["d"], "grid.d", lo=1)
    if dim > 2:
        raise ConfigError("grid.d must be 1 or 2")
    n = _as_int(gr["n"], "grid.n", lo=2)
    n_tau = _as_int(gr["n_tau"], "grid.n_tau", lo=1)
    horizon = _as_float(gr["T"], "grid.T", positive=True)
    steps = _as_int(gr["M"], "grid.M", lo=1)

    eps = merged["epsilons"]
    if not isinstance(eps, (list, tuple)) or not eps:
        raise ConfigError("epsilons must be a nonempty list")
    eps = tuple(_as_float(e, "epsilon") for e in eps)
    for e in eps:
        if not 0.0 < e <= 1.0:
            raise ConfigError("each epsilon must lie in (0, 1]")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ConfigError("epsilons must be strictly decreasing")

    q_mode = merged["q_mode"]
    if q_mode not in ("table", "direct"):
        raise ConfigError("q_mode must be 'table' or 'direct'")
    h_mode = merged["h_mode"]
    if h_mode not in ("z-only", "theta-z"):
        raise ConfigError("h_mode must be 'z-only' or 'theta-z'")
    seed = _as_int(merged["seed"], "seed", lo=0)
    out_dir = merged["out_dir"]
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("out_dir must be a nonempty string")

    eff = merged["effective"]
    box = _as_float(eff["box"], "effective.box", positive=True)
    n_xi = _as_int(eff["n_xi"], "effective.n_xi", lo=3)
    if n_xi % 2 == 0:
        raise ConfigError("effective.n_xi must be odd so 0 is a sample")
    inner_mode = eff["inner_mode"]
    if inner_mode not in ("auto", "direct", "table"):
        raise ConfigError("effective.inner_mode must be auto, direct, or table")

    src = merged["source"]
    _check_keys(src, ("kind", "value", "ramp"), "[source]")
    s_kind = src.get("kind", "constant")
    if s_kind not in ("constant", "sine", "zero"):
        raise ConfigError("source.kind must be constant, sine, or zero")
    s_value = _as_float(src.get("value", 1.0), "source.value")
    s_ramp = _as_float(src.get("ramp", 1.0), "source.ramp")
    if s_ramp < 0:
        raise ConfigError("source.ramp must be nonnegative")
    source_spec = {"kind": s_kind, "value": s_value, "ramp": s_ramp}

    man = merged["manufactured"]
    kappa = _as_float(man["kappa"], "manufactured.kappa", positive=True)
    ladder = []
    for row in man["ladder"]:
        if not isinstance(row, (list, tuple)) or len(row) != 2:
            raise ConfigError("manufactured.ladder rows must be [n, M] pairs")
        ladder.append((_as_int(row[0], "ladder n", lo=2),
                       _as_int(row[1], "ladder M", lo=1)))
    if len(ladder) < 2:
        raise ConfigError("manufactured.ladder needs at least two rungs")

    tol = dict(_DEFAULTS["tolerances"])
    tol.update(merged["tolerances"])
    tol = {
        "solver_tol": _as_float(tol["solver_tol"], "solver_tol", positive=True),
        "final_rel_l2": _as_float(tol["final_rel_l2"], "final_rel_l2",
                                  positive=True),
        "order_s_min": _as_float(tol["order_s_min"], "order_s_min"),
        "order_t_min": _as_float(tol["order_t_min"], "order_t_min"),
        "axiom_tol": _as_float(tol["axiom_tol"], "axiom_tol", positive=True),
        "axiom_samples": _as_int(tol["axiom_samples"], "axiom_samples", lo=1),
    }

    nf, nf_spec = _build_nfunction(merged["nfunction"])
    op, op_spec = _build_operator(merged["operator"], nf, nf_spec, dim)
    if op.dim != dim:
        raise ConfigError(
            f"operator dimension {op.dim} does not match grid.d = {dim}")

    cl = merged["cell"]
    _check_keys(cl, ("xi",), "[cell]")
    if isinstance(data.get("cell"), dict) and "xi" in data["cell"]:
        cell_xi = tuple(_as_float(v, "cell.xi entry") for v in cl["xi"])
        if len(cell_xi) != dim:
            raise ConfigError(f"cell.xi must have {dim} entries")
    else:
        cell_xi = (1.0,) * dim

    return ExperimentConfig(
        dim=dim, n=n, n_tau=n_tau, horizon=horizon, steps=steps,
        epsilons=eps, q_mode=q_mode, h_mode=h_mode, seed=seed,
        out_dir=out_dir, box=box, n_xi=n_xi, inner_mode=inner_mode,
        cell_xi=cell_xi, kappa=kappa, ladder=tuple(ladder), tolerances=tol,
        operator_spec=op_spec, nfunction_spec=nf_spec,
        source_spec=source_spec, op=op, nf=nf)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed configuration {path}: {exc}") from exc
    return config_from_dict(data)


def default_config() -> ExperimentConfig:
    return config_from_dict({})


def _fmt_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_scalar(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize value of type {type(v).__name__}")


def _emit_table(d: dict, prefix: tuple, lines: list):
    plain = [k for k, v in sorted(d.items())
             if not isinstance(v, dict)
             and not (isinstance(v, list) and v
                      and all(isinstance(x, dict) for x in v))]
    arrays = [k for k, v in sorted(d.items())
              if isinstance(v, list) and v
              and all(isinstance(x, dict) for x in v)]
    subs = [k for k, v in sorted(d.items()) if isinstance(v, dict)]
    for k in plain:
        lines.append(f"{k} = {_fmt_scalar(d[k])}")
    for k in arrays:
        name = ".".join(prefix + (k,))
        for item in d[k]:
            lines.append("")
            lines.append(f"[[{name}]]")
            _emit_table(item, prefix + (k,), lines)
    for k in subs:
        name = ".".join(prefix + (k,))
        lines.append("")
        lines.append(f"[{name}]")
        _emit_table(d[k], prefix + (k,), lines)


def dump_toml(data: dict) -> str:
    """Serialize a mapping to TOML with sorted keys (deterministic)."""
    lines = []
    _emit_table(data, (), lines)
    return "\n".join(lines) + "\n"


def write_resolved_config(cfg: ExperimentConfig, path):
    """Write the fully resolved configuration for reproducibility."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_toml(cfg.resolved()))
