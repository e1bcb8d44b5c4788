"""Monotone flux maps a(y, tau, z, lam) and their structural axioms.

Canonical argument order everywhere: slow cell variable y, fast time tau,
inner cell variable z, gradient lam.  Built-in families are separable,
a = c(y, tau) * gamma(z) * G(lam), with trigonometric-polynomial
coefficients so periodicity in every cell variable is exact in floating
point.  Each constructor ships growth and monotonicity constants
(c0, c1, c2) certified by a brute-force ratio scan over the gradient box:

    |a(l) - a(l')|        <= c0 * Btilde^{-1}(B(c1 |l - l'|))
    (a(l) - a(l')).(l-l') >= c2 * B(|l - l'|)
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError
from .orlicz import NFunction, _bisect_increasing, power

_TINY = 1e-300
_DYADIC = 1 << 26  # sampling lattice that keeps integer shifts float-exact


@dataclass(frozen=True)
class TrigMode:
    k: tuple[int, ...]
    m: int = 0
    cos_amp: float = 0.0
    sin_amp: float = 0.0


@dataclass(frozen=True)
class TrigPoly:
    """Real trigonometric polynomial on the unit cell, periodic by construction.

    Phases are reduced modulo 1 before the trig call, so evaluation at a
    point and at any integer shift of it returns bitwise-equal values.
    """

    dim: int
    const: float = 0.0
    modes: tuple[TrigMode, ...] = ()

    def __call__(self, points, tau=0.0):
        x = np.asarray(points, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected trailing axis of size {self.dim}")
        tau = np.asarray(tau, dtype=float)
        out = np.broadcast_arrays(x[..., 0], tau)[0] * 0.0 + self.const
        for mode in self.modes:
            ph = tau * mode.m
            for i, ki in enumerate(mode.k):
                if ki:
                    ph = ph + ki * x[..., i]
            ph = ph - np.floor(ph)
            if mode.cos_amp:
                out = out + mode.cos_amp * np.cos(2 * np.pi * ph)
            if mode.sin_amp:
                out = out + mode.sin_amp * np.sin(2 * np.pi * ph)
        return out

    @property
    def time_invariant(self) -> bool:
        return all(mode.m == 0 for mode in self.modes)

    def bounds(self) -> tuple[float, float]:
        """Certified (lower, upper) bounds: dense scan plus Lipschitz guard."""
        return _trig_bounds(self)


@functools.lru_cache(maxsize=64)
def _trig_bounds(poly: TrigPoly) -> tuple[float, float]:
    n = 4096 if poly.dim == 1 else 256
    axes = [np.arange(n) / n] * poly.dim
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    if poly.time_invariant:
        vals = poly(pts)
        h = 1.0 / n
    else:
        ntau = 128
        tau = (np.arange(ntau) / ntau).reshape((ntau,) + (1,) * poly.dim)
        vals = poly(pts[None], tau)
        h = max(1.0 / n, 1.0 / ntau)
    lip = sum(
        2 * np.pi * (sum(abs(k) for k in mode.k) + abs(mode.m))
        * (abs(mode.cos_amp) + abs(mode.sin_amp))
        for mode in poly.modes
    )
    guard = lip * h
    return float(vals.min() - guard), float(vals.max() + guard)


def constant_poly(value: float, dim: int) -> TrigPoly:
    return TrigPoly(dim=dim, const=value)


def reference_slow_coefficient(dim: int = 1) -> TrigPoly:
    """c(y) = 2 + sin(2 pi y_1)."""
    k = (1,) + (0,) * (dim - 1)
    return TrigPoly(dim=dim, const=2.0, modes=(TrigMode(k=k, sin_amp=1.0),))


def reference_inner_coefficient(dim: int = 1) -> TrigPoly:
    """gamma(z) = 2 + sin(2 pi z_1)."""
    k = (1,) + (0,) * (dim - 1)
    return TrigPoly(dim=dim, const=2.0, modes=(TrigMode(k=k, sin_amp=1.0),))


@dataclass(frozen=True)
class FluxOperator:
    """A flux map with certified structure constants.

    Separable kinds ("linear", "power-law") expose their factors so
    solvers can precompute coefficients on grids; "custom" kinds evaluate
    through eval_fn and only promise what the caller certifies.
    """

    dim: int
    kind: str
    nf: NFunction | None
    cpoly: TrigPoly | None
    gpoly: TrigPoly | None
    delta: float
    potential: bool
    c0: float | None
    c1: float | None
    c2: float | None
    lam_box: float
    eval_fn: Callable | None = None
    jac_fn: Callable | None = None

    @property
    def separable(self) -> bool:
        return self.kind in ("linear", "power-law")

    @property
    def time_invariant(self) -> bool:
        return self.separable and self.cpoly.time_invariant

    def profile(self, lam: np.ndarray) -> np.ndarray:
        """Gradient response G(lam) of the separable kinds."""
        lam = np.asarray(lam, dtype=float)
        if self.kind == "linear":
            return lam.copy()
        r = np.sqrt(np.sum(lam * lam, axis=-1) + self.delta * self.delta)
        rs = np.maximum(r, _TINY)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(r > 0, self.nf.deriv_fn(rs) / rs, 0.0)
        return g[..., None] * lam

    def profile_jac(self, lam: np.ndarray) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        d = self.dim
        if self.kind == "linear":
            return np.broadcast_to(np.eye(d), lam.shape[:-1] + (d, d)).copy()
        r = np.sqrt(np.sum(lam * lam, axis=-1) + self.delta * self.delta)
        rs = np.maximum(r, _TINY)
        b = self.nf.deriv_fn(rs)
        if self.nf.kind == "power":
            bp = (self.nf.p - 1.0) * rs ** (self.nf.p - 2.0)
        else:
            h = 1e-6 * np.maximum(rs, 1.0)
            bp = (self.nf.deriv_fn(rs + h) - self.nf.deriv_fn(np.maximum(rs - h, 0.0))) / (2 * h)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(r > 0, b / rs, 0.0)
            gp_over_r = np.where(r > 0, (bp - g) / (rs * rs), 0.0)
        eye = np.eye(d)
        outer = lam[..., :, None] * lam[..., None, :]
        return g[..., None, None] * eye + gp_over_r[..., None, None] * outer

    def coeff(self, y: np.ndarray, tau, z: np.ndarray) -> np.ndarray:
        """Scalar multiplier c(y, tau) * gamma(z) of the separable kinds."""
        return self.cpoly(y, tau) * self.gpoly(z)


def flux_eval(op: FluxOperator, y, tau, z, lam) -> np.ndarray:
    """a(y, tau, z, lam); all array arguments broadcast together."""
    lam = np.asarray(lam, dtype=float)
    if op.separable:
        return op.coeff(y, tau, z)[..., None] * op.profile(lam)
    return np.asarray(op.eval_fn(y, tau, z, lam), dtype=float)


def flux_jacobian(op: FluxOperator, y, tau, z, lam) -> np.ndarray:
    """d a / d lam as (..., dim, dim); finite differences when not supplied."""
    lam = np.asarray(lam, dtype=float)
    if op.separable:
        return op.coeff(y, tau, z)[..., None, None] * op.profile_jac(lam)
    if op.jac_fn is not None:
        return np.asarray(op.jac_fn(y, tau, z, lam), dtype=float)
    d = op.dim
    step = 1e-6 * np.maximum(1.0, np.sqrt(np.sum(lam * lam, axis=-1)))
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        hp = lam + step[..., None] * e
        hm = lam - step[..., None] * e
        cols.append(
            (flux_eval(op, y, tau, z, hp) - flux_eval(op, y, tau, z, hm))
            / (2 * step[..., None])
        )
    return np.stack(cols, axis=-1)


def _conjugate_inverse(nf: NFunction, u: np.ndarray) -> np.ndarray:
    """Btilde^{-1} by closed form (power) or bisection on the conjugate."""
    u = np.asarray(u, dtype=float)
    if nf.kind == "power":
        q = nf.p / (nf.p - 1.0)
        return (q * u) ** (1.0 / q)
    return _bisect_increasing(nf.conjugate_eval, u)


def _ratio_scan_pairs(dim: int, box: float) -> tuple[np.ndarray, np.ndarray]:
    """Pair sample (lam, lam') covering the certification box densely."""
    if dim == 1:
        g = np.linspace(-box, box, 241)
        l1, l2 = np.meshgrid(g, g, indexing="ij")
        lam = l1.reshape(-1, 1)
        lam2 = l2.reshape(-1, 1)
        # structured near-diagonal pairs probe the small-separation limit
        seps = np.concatenate([np.logspace(-5, 0, 24) * box, -np.logspace(-5, 0, 24) * box])
        base = np.linspace(-box, box, 41)
        bl, sl = np.meshgrid(base, seps, indexing="ij")
        lam = np.concatenate([lam, bl.reshape(-1, 1)])
        lam2 = np.concatenate([lam2, (bl + sl).reshape(-1, 1)])
        return lam, lam2
    # rotationally invariant profiles: radii and mutual angle suffice
    rmax = box * np.sqrt(2.0)
    r1 = np.linspace(0.0, rmax, 49)
    r2 = np.linspace(0.0, rmax, 49)
    th = np.linspace(0.0, np.pi, 37)
    R1, R2, TH = np.meshgrid(r1, r2, th, indexing="ij")
    lam = np.stack([R1, np.zeros_like(R1)], axis=-1).reshape(-1, 2)
    lam2 = np.stack([R2 * np.cos(TH), R2 * np.sin(TH)], axis=-1).reshape(-1, 2)
    seps = np.logspace(-5, -0.5, 16) * box
    base_r = np.linspace(0.1 * box, rmax, 13)
    BR, SP = np.meshgrid(base_r, seps, indexing="ij")
    extra1 = np.stack([BR, np.zeros_like(BR)], axis=-1).reshape(-1, 2)
    extra2 = np.stack([BR + SP, np.zeros_like(BR)], axis=-1).reshape(-1, 2)
    return np.concatenate([lam, extra1]), np.concatenate([lam2, extra2])


def _profile_ratio_bounds(op: FluxOperator, box: float) -> tuple[float, float]:
    """(min monotonicity ratio, max growth ratio) of the bare profile G."""
    lam, lam2 = _ratio_scan_pairs(op.dim, box)
    diff = op.profile(lam) - op.profile(lam2)
    dl = lam - lam2
    dist = np.sqrt(np.sum(dl * dl, axis=-1))
    keep = dist > 0
    diff, dl, dist = diff[keep], dl[keep], dist[keep]
    inner = np.sum(diff * dl, axis=-1)
    bdist = op.nf(dist)
    mono = inner / bdist
    growth = np.sqrt(np.sum(diff * diff, axis=-1)) / _conjugate_inverse(op.nf, bdist)
    return float(mono.min()), float(growth.max())


@functools.lru_cache(maxsize=32)
def _certified_profile_bounds(kind: str, p: float, delta: float, dim: int, box: float):
    nf = power(2.0) if kind == "linear" else power(p)
    probe = FluxOperator(
        dim=dim, kind=kind, nf=nf, cpoly=None, gpoly=None, delta=delta,
        potential=True, c0=None, c1=None, c2=None, lam_box=box,
    )
    return _profile_ratio_bounds(probe, box)


_SAFETY = 0.995


def _build_separable(kind, nf, cpoly, gpoly, delta, lam_box) -> FluxOperator:
    dim = cpoly.dim
    if gpoly.dim != dim:
        raise ConfigError("slow and inner coefficients must share a dimension")
    if not gpoly.time_invariant:
        raise ConfigError("the inner coefficient gamma may not depend on tau")
    c_lo, c_hi = cpoly.bounds()
    g_lo, g_hi = gpoly.bounds()
    if c_lo <= 0 or g_lo <= 0:
        raise ConfigError("coefficients must be strictly positive on their cells")
    if kind == "linear":
        mono, grow = 2.0, 1.0  # |d|^2 / (|d|^2/2) and |d| / |d| for B = t^2/2
    elif nf.kind == "power":
        mono, grow = _certified_profile_bounds(kind, float(nf.p), float(delta), dim, float(lam_box))
    else:
        probe = FluxOperator(
            dim=dim, kind=kind, nf=nf, cpoly=None, gpoly=None, delta=delta,
            potential=True, c0=None, c1=None, c2=None, lam_box=lam_box,
        )
        mono, grow = _profile_ratio_bounds(probe, lam_box)
    if mono <= 0:
        raise ConfigError("profile failed the monotonicity scan; no usable c2")
    return FluxOperator(
        dim=dim,
        kind=kind,
        nf=nf,
        cpoly=cpoly,
        gpoly=gpoly,
        delta=delta,
        potential=True,
        c0=c_hi * g_hi * grow / _SAFETY,
        c1=1.0,
        c2=c_lo * g_lo * mono * _SAFETY,
        lam_box=lam_box,
    )


def linear_separable(cpoly: TrigPoly, gpoly: TrigPoly, lam_box: float = 2.0) -> FluxOperator:
    """a = c(y, tau) * gamma(z) * lam, certified against B = t^2/2."""
    return _build_separable("linear", power(2.0), cpoly, gpoly, 0.0, lam_box)


def power_law(
    nf: NFunction,
    cpoly: TrigPoly,
    gpoly: TrigPoly,
    delta: float = 1e-8,
    lam_box: float = 2.0,
) -> FluxOperator:
    """a = c * gamma * b(|lam|_delta) * lam / |lam|_delta with |l|_d = sqrt(|l|^2 + d^2)."""
    if delta < 0:
        raise ConfigError("delta must be nonnegative")
    return _build_separable("power-law", nf, cpoly, gpoly, delta, lam_box)


def custom_operator(
    eval_fn,
    dim: int,
    jac_fn=None,
    nf: NFunction | None = None,
    potential: bool = False,
    c0: float | None = None,
    c1: float | None = None,
    c2: float | None = None,
    lam_box: float = 2.0,
) -> FluxOperator:
    """Wrap a user flux a(y, tau, z, lam); constants are the caller's claim."""
    return FluxOperator(
        dim=dim, kind="custom", nf=nf, cpoly=None, gpoly=None, delta=0.0,
        potential=potential, c0=c0, c1=c1, c2=c2, lam_box=lam_box,
        eval_fn=eval_fn, jac_fn=jac_fn,
    )


def reference_linear(dim: int = 1) -> FluxOperator:
    return linear_separable(
        reference_slow_coefficient(dim), reference_inner_coefficient(dim)
    )


def reference_power_law(p: float = 3.0, dim: int = 1, delta: float = 1e-8) -> FluxOperator:
    return power_law(
        power(p), constant_poly(1.0, dim), reference_inner_coefficient(dim), delta=delta
    )


@dataclass(frozen=True)
class AxiomReport:
    """Worst-case defects from seeded sampling of the structure axioms."""

    n_samples: int
    seed: int
    lam_box: float
    tol: float
    c0: float
    c1: float
    c2: float
    zero_worst: float
    periodicity_worst: float
    oddness_worst: float | None
    monotonicity_worst_violation: float
    monotonicity_violations: int
    growth_worst_violation: float
    growth_violations: int

    @property
    def passed(self) -> bool:
        checks = [
            self.zero_worst <= self.tol,
            self.periodicity_worst <= self.tol,
            self.monotonicity_violations == 0,
            self.growth_violations == 0,
        ]
        if self.oddness_worst is not None:
            checks.append(self.oddness_worst <= self.tol)
        return all(checks)

    def rows(self) -> list[tuple[str, float, bool]]:
        out = [
            ("zero_at_zero", self.zero_worst, self.zero_worst <= self.tol),
            ("periodicity", self.periodicity_worst, self.periodicity_worst <= self.tol),
            ("monotonicity", self.monotonicity_worst_violation, self.monotonicity_violations == 0),
            ("growth", self.growth_worst_violation, self.growth_violations == 0),
        ]
        if self.oddness_worst is not None:
            out.append(("oddness", self.oddness_worst, self.oddness_worst <= self.tol))
        return out


def verify_axioms(
    op: FluxOperator,
    nf: NFunction | None = None,
    n_samples: int = 10_000,
    seed: int = 0,
    lam_box: float | None = None,
    tol: float = 1e-10,
    c0: float | None = None,
    c1: float | None = None,
    c2: float | None = None,
) -> AxiomReport:
    """Sample the growth, monotonicity, zero, and periodicity axioms.

    Cell coordinates are drawn on a dyadic lattice so that the integer
    shifts of the periodicity check are exact in floating point; gradients
    are uniform in the certification box.  Any constant can be overridden
    to probe a sharper or looser claim than the shipped one.
    """
    nf = nf or op.nf
    if nf is None:
        raise ConfigError("verify_axioms needs an N-function")
    c0 = op.c0 if c0 is None else c0
    c1 = op.c1 if c1 is None else c1
    c2 = op.c2 if c2 is None else c2
    if c0 is None or c1 is None or c2 is None:
        raise ConfigError("operator carries no certified constants; pass c0, c1, c2")
    box = op.lam_box if lam_box is None else lam_box
    rng = np.random.default_rng(seed)
    n, d = n_samples, op.dim

    def dyadic(shape):
        return rng.integers(0, _DYADIC, shape).astype(float) / _DYADIC

    y = dyadic((n, d))
    tau = dyadic(n)
    z = dyadic((n, d))
    lam = rng.uniform(-box, box, (n, d))
    lam2 = rng.uniform(-box, box, (n, d))

    a1 = flux_eval(op, y, tau, z, lam)
    a2 = flux_eval(op, y, tau, z, lam2)
    diff = a1 - a2
    dl = lam - lam2
    dist = np.sqrt(np.sum(dl * dl, axis=-1))
    inner = np.sum(diff * dl, axis=-1)
    bdist = nf(dist)
    mono_gap = c2 * bdist - inner
    mono_viol = int(np.sum(mono_gap > tol))
    growth_gap = np.sqrt(np.sum(diff * diff, axis=-1)) - c0 * _conjugate_inverse(nf, nf(c1 * dist))
    growth_viol = int(np.sum(growth_gap > tol))

    zero_worst = float(
        np.max(np.abs(flux_eval(op, y, tau, z, np.zeros((n, d)))))
    )

    shifts_y = rng.integers(1, 4, (n, d)).astype(float)
    shifts_z = rng.integers(1, 4, (n, d)).astype(float)
    shifts_m = rng.integers(1, 4, n).astype(float)
    a_shift = flux_eval(op, y + shifts_y, tau + shifts_m, z + shifts_z, lam)
    per_worst = float(np.max(np.abs(a_shift - a1)))

    odd_worst = None
    if op.separable:
        odd_worst = float(np.max(np.abs(flux_eval(op, y, tau, z, -lam) + a1)))

    return AxiomReport(
        n_samples=n,
        seed=seed,
        lam_box=box,
        tol=tol,
        c0=c0,
        c1=c1,
        c2=c2,
        zero_worst=zero_worst,
        periodicity_worst=per_worst,
        oddness_worst=odd_worst,
        monotonicity_worst_violation=float(np.max(mono_gap)),
        monotonicity_violations=mono_viol,
        growth_worst_violation=float(np.max(growth_gap)),
        growth_violations=growth_viol,
    )
