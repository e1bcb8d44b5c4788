"""N-functions, their conjugates, Simonenko indices, and Luxemburg norms.

An N-function here is B(t) = int_0^t b(s) ds with b an odd, strictly
increasing, unbounded density.  Everything below works on magnitudes
(t >= 0); callers take absolute values first.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import SolverError

BISECT_RTOL = 1e-12
BISECT_MAX_ITER = 200
INDEX_SAMPLES = 64
INDEX_RANGE = (1e-6, 1e6)

_MAX_EXPANSIONS = 600


def _as_positive_array(t, name: str) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError(f"{name} must be nonnegative")
    return t


@dataclass(frozen=True)
class NFunction:
    """A Young function with power-type upper and lower index bounds.

    Attributes:
        kind: "power", "power-log", or "custom".
        eval_fn: vectorized B(t) for t >= 0.
        deriv_fn: vectorized density b(t) for t >= 0.
        p: exponent parameter for the built-in kinds, None for custom.
        rho0: witness constant for t**2 <= B(rho0 * t) at large t, or None
            when the quadratic lower bound fails as t grows.
    """

    kind: str
    eval_fn: Callable[[np.ndarray], np.ndarray]
    deriv_fn: Callable[[np.ndarray], np.ndarray]
    p: float | None = None
    rho0: float | None = None

    def __call__(self, t):
        t = _as_positive_array(t, "t")
        return self.eval_fn(t)

    def deriv(self, t):
        t = _as_positive_array(t, "t")
        return self.deriv_fn(t)

    def deriv_inverse(self, s):
        """Invert the density by bisection: returns t with b(t) = s."""
        s = _as_positive_array(s, "s")
        return _bisect_increasing(self.deriv_fn, s)

    def conjugate_eval(self, s):
        """Conjugate value sup_t (t*s - B(t)).

        Closed form for the power kind; otherwise through the maximizer
        t* = b^{-1}(s), for which the supremum equals s*t* - B(t*).
        """
        s = _as_positive_array(s, "s")
        if self.kind == "power":
            q = self.p / (self.p - 1.0)
            return s**q / q
        t_star = _bisect_increasing(self.deriv_fn, s)
        return s * t_star - self.eval_fn(t_star)

    def conjugate(self) -> "NFunction":
        """Conjugate N-function; its density is the inverse of this one's."""
        if self.kind == "power":
            return power(self.p / (self.p - 1.0))
        return NFunction(
            kind="custom",
            eval_fn=self.conjugate_eval,
            deriv_fn=self.deriv_inverse,
        )


def power(p: float) -> NFunction:
    """B(t) = t**p / p.  Requires p > 1."""
    if p <= 1:
        raise ValueError("power kind needs p > 1")
    if p >= 2:
        rho0 = p ** (1.0 / p)
    else:
        rho0 = None
        warnings.warn(
            f"power({p}): t**2 <= B(rho0*t) fails for large t when p < 2; "
            "recording no rho0 witness",
            stacklevel=2,
        )
    return NFunction(
        kind="power",
        eval_fn=lambda t: t**p / p,
        deriv_fn=lambda t: t ** (p - 1.0),
        p=p,
        rho0=rho0,
    )


def power_log(p: float) -> NFunction:
    """B(t) = t**p * log(1 + t).  Requires p >= 1."""
    if p < 1:
        raise ValueError("power-log kind needs p >= 1")
    if p >= 2:
        rho0 = (1.0 / np.log(2.0)) ** (1.0 / p)
    else:
        rho0 = None
        warnings.warn(
            f"power-log({p}): t**2 <= B(rho0*t) fails for large t when p < 2; "
            "recording no rho0 witness",
            stacklevel=2,
        )
    return NFunction(
        kind="power-log",
        eval_fn=lambda t: t**p * np.log1p(t),
        deriv_fn=lambda t: p * t ** (p - 1.0) * np.log1p(t) + t**p / (1.0 + t),
        p=p,
        rho0=rho0,
    )


def custom(eval_fn, deriv_fn, p: float | None = None) -> NFunction:
    """Wrap user-supplied B and b.  No index or growth claims are made."""
    return NFunction(kind="custom", eval_fn=eval_fn, deriv_fn=deriv_fn, p=p)


def _bisect_increasing(fn, targets: np.ndarray) -> np.ndarray:
    """Solve fn(t) = s elementwise for increasing fn with fn(0) = 0.

    Geometric bracket expansion followed by bisection to relative
    tolerance BISECT_RTOL within BISECT_MAX_ITER iterations.
    """
    s = np.asarray(targets, dtype=float)
    scalar = s.ndim == 0
    s = np.atleast_1d(s).astype(float)
    hi = np.ones_like(s)
    with np.errstate(over="ignore", invalid="ignore"):
        short = fn(hi) < s
        for _ in range(_MAX_EXPANSIONS):
            if not short.any():
                break
            hi[short] *= 2.0
            short = fn(hi) < s
        else:
            raise SolverError(
                "density bracket expansion failed; b does not reach the target "
                "(unbounded density assumption violated)"
            )
        lo = np.zeros_like(s)
        for _ in range(BISECT_MAX_ITER):
            mid = 0.5 * (lo + hi)
            below = fn(mid) < s
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= BISECT_RTOL * np.maximum(hi, 1e-300)):
                break
    out = 0.5 * (lo + hi)
    out[s == 0.0] = 0.0
    return out[0] if scalar else out


def simonenko_indices(
    nf: NFunction,
    t_min: float = INDEX_RANGE[0],
    t_max: float = INDEX_RANGE[1],
    samples: int = INDEX_SAMPLES,
) -> tuple[float, float]:
    """(min, max) of t*b(t)/B(t) over a log-spaced sample grid."""
    if t_min <= 0 or t_max <= t_min:
        raise ValueError("need 0 < t_min < t_max")
    t = np.logspace(np.log10(t_min), np.log10(t_max), samples)
    denom = nf(t)
    if np.any(denom <= 0):
        raise ValueError("B(t) vanished on the sample grid; indices undefined")
    ratio = t * nf.deriv(t) / denom
    return float(ratio.min()), float(ratio.max())


@dataclass(frozen=True)
class DiscreteField:
    """Sampled function with positive quadrature weights, for norms."""

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if v.shape != w.shape:
            raise ValueError("values and weights must have matching shapes")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "weights", w)


def modular(u: DiscreteField, nf: NFunction) -> float:
    """Weighted modular sum(w * B(|v|))."""
    with np.errstate(over="ignore"):
        return float(np.sum(u.weights * nf(np.abs(u.values))))


def luxemburg_norm(u: DiscreteField, nf: NFunction) -> float:
    """Smallest k > 0 with sum(w * B(|v|/k)) <= 1, by bisection.

    Returns 0.0 for the zero field.  Relative tolerance BISECT_RTOL.
    """
    v = np.abs(u.values)
    w = u.weights
    vmax = float(v.max()) if v.size else 0.0
    if vmax == 0.0:
        return 0.0

    def rho(k: float) -> float:
        with np.errstate(over="ignore"):
            return float(np.sum(w * nf(v / k)))

    k = vmax
    if rho(k) > 1.0:
        lo = k
        hi = 2.0 * k
        for _ in range(_MAX_EXPANSIONS):
            if rho(hi) <= 1.0:
                break
            lo = hi
            hi *= 2.0
        else:
            raise SolverError("Luxemburg bracket expansion failed upward")
    else:
        hi = k
        lo = 0.5 * k
        for _ in range(_MAX_EXPANSIONS):
            if rho(lo) > 1.0:
                break
            hi = lo
            lo *= 0.5
        else:
            raise SolverError("Luxemburg bracket expansion failed downward")
    for _ in range(BISECT_MAX_ITER):
        if hi - lo <= BISECT_RTOL * hi:
            break
        mid = 0.5 * (lo + hi)
        if rho(mid) > 1.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
