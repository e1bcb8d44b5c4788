from __future__ import annotations

import numpy as np
import pytest

from reithom import operators as ops
from reithom import orlicz
from reithom.errors import ConfigError


def test_trig_poly_eval():
    c = ops.reference_slow_coefficient(1)
    y = np.array([[0.0], [0.25], [0.5]])
    assert np.allclose(c(y), [2.0, 3.0, 2.0], atol=1e-12)
    two_d = ops.TrigPoly(
        dim=2, const=1.0, modes=(ops.TrigMode(k=(1, -1), cos_amp=0.5),)
    )
    pt = np.array([0.3, 0.3])
    assert two_d(pt) == pytest.approx(1.5, abs=1e-12)


def test_trig_poly_time_mode():
    c = ops.TrigPoly(dim=1, const=2.0, modes=(ops.TrigMode(k=(0,), m=1, cos_amp=0.5),))
    assert not c.time_invariant
    assert c(np.array([0.1]), tau=0.0) == pytest.approx(2.5)
    assert c(np.array([0.1]), tau=0.25) == pytest.approx(2.0)


def test_trig_poly_exact_periodicity():
    poly = ops.TrigPoly(
        dim=2,
        const=1.5,
        modes=(ops.TrigMode(k=(2, 1), m=3, cos_amp=0.3, sin_amp=-0.7),),
    )
    rng = np.random.default_rng(0)
    pts = rng.integers(0, 1 << 26, (100, 2)).astype(float) / (1 << 26)
    tau = rng.integers(0, 1 << 26, 100).astype(float) / (1 << 26)
    base = poly(pts, tau)
    shifted = poly(pts + np.array([2.0, 5.0]), tau + 7.0)
    assert np.array_equal(base, shifted)


def test_trig_poly_bounds_cover_range():
    lo, hi = ops.reference_slow_coefficient(1).bounds()
    assert 0.99 <= lo <= 1.0
    assert 3.0 <= hi <= 3.01


def test_linear_flux_values():
    op = ops.linear_separable(ops.constant_poly(1.0, 1), ops.constant_poly(1.0, 1))
    lam = np.array([[3.0], [-1.5], [0.0]])
    y = np.zeros((3, 1))
    z = np.zeros((3, 1))
    out = ops.flux_eval(op, y, 0.0, z, lam)
    assert np.array_equal(out, lam)


def test_power_law_flux_value():
    op = ops.reference_power_law(3.0)
    # gamma(0) = 2, b(t) = t^2, so a = 2 * |lam| * lam = 8 at lam = 2
    out = ops.flux_eval(op, np.zeros((1,)) [None], 0.0, np.zeros((1, 1)), np.array([[2.0]]))
    assert out[0, 0] == pytest.approx(8.0, rel=1e-8)
    bare = ops.power_law(
        orlicz.power(3.0), ops.constant_poly(1.0, 1), ops.constant_poly(1.0, 1)
    )
    out = ops.flux_eval(bare, np.zeros((1, 1)), 0.0, np.zeros((1, 1)), np.array([[2.0]]))
    assert out[0, 0] == pytest.approx(4.0, rel=1e-8)


def test_zero_at_zero_exact():
    for op in (ops.reference_linear(1), ops.reference_power_law(3.0)):
        out = ops.flux_eval(op, np.array([[0.37]]), 0.11, np.array([[0.93]]), np.zeros((1, 1)))
        assert np.all(out == 0.0)


def test_oddness_exact():
    op = ops.reference_power_law(3.0)
    rng = np.random.default_rng(4)
    lam = rng.uniform(-2, 2, (50, 1))
    y = rng.random((50, 1))
    z = rng.random((50, 1))
    a_plus = ops.flux_eval(op, y, 0.3, z, lam)
    a_minus = ops.flux_eval(op, y, 0.3, z, -lam)
    assert np.array_equal(a_plus, -a_minus)


def test_linear_jacobian_constant():
    op = ops.linear_separable(ops.constant_poly(2.0, 2), ops.constant_poly(3.0, 2))
    lam = np.array([[0.4, -1.0]])
    jac = ops.flux_jacobian(op, np.zeros((1, 2)), 0.0, np.zeros((1, 2)), lam)
    assert np.allclose(jac[0], 6.0 * np.eye(2), atol=1e-12)


def test_power_jacobian_closed_form_1d():
    op = ops.power_law(
        orlicz.power(3.0), ops.constant_poly(1.0, 1), ops.constant_poly(1.0, 1), delta=0.0
    )
    jac = ops.flux_jacobian(op, np.zeros((1, 1)), 0.0, np.zeros((1, 1)), np.array([[1.0]]))
    # d/dl (|l| l) = 2|l|
    assert jac[0, 0, 0] == pytest.approx(2.0, rel=1e-12)


def test_jacobian_matches_finite_difference():
    op = ops.reference_power_law(3.0, dim=2)
    rng = np.random.default_rng(8)
    lam = rng.uniform(-2, 2, (20, 2))
    y = rng.random((20, 2))
    z = rng.random((20, 2))
    jac = ops.flux_jacobian(op, y, 0.2, z, lam)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (
            ops.flux_eval(op, y, 0.2, z, lam + e) - ops.flux_eval(op, y, 0.2, z, lam - e)
        ) / (2 * h)
        assert np.allclose(jac[..., j], fd, atol=1e-5)
    # potential operators have symmetric tangents
    assert np.allclose(jac, np.swapaxes(jac, -1, -2), atol=1e-12)


def test_potential_gradient_consistency():
    # for separable kinds the flux is the lam-gradient of W = c*gamma*B(|lam|_delta)
    for op in (ops.reference_linear(1), ops.reference_power_law(3.0)):
        nf = op.nf
        y = np.array([[0.21]])
        z = np.array([[0.68]])
        coeff = op.coeff(y, 0.0, z)

        def W(lam):
            r = np.sqrt(np.sum(lam * lam, axis=-1) + op.delta**2)
            return coeff * nf(r)

        rng = np.random.default_rng(2)
        for _ in range(10):
            lam = rng.uniform(-2, 2, (1, 1))
            h = 1e-6
            fd = (W(lam + h) - W(lam - h)) / (2 * h)
            a = ops.flux_eval(op, y, 0.0, z, lam)
            assert a[0, 0] == pytest.approx(float(fd[0]), abs=1e-5)


def test_reference_constants():
    lin = ops.reference_linear(1)
    assert 1.9 <= lin.c2 <= 2.0
    # sup c * sup gamma = 9 with a small safety factor
    assert 9.0 <= lin.c0 <= 9.2
    assert lin.c1 == 1.0
    plaw = ops.reference_power_law(3.0)
    assert 1.3 <= plaw.c2 <= 1.5  # p 2^(2-p) = 1.5 is the sharp profile ratio
    assert plaw.c0 > 0


def test_verify_axioms_linear_reference():
    op = ops.reference_linear(1)
    rep = ops.verify_axioms(op, n_samples=10_000, seed=123)
    assert rep.passed
    assert rep.zero_worst == 0.0
    assert rep.periodicity_worst == 0.0
    assert rep.oddness_worst == 0.0
    assert rep.monotonicity_violations == 0
    assert rep.growth_violations == 0
    # the sharp claim c2 = 2 also holds: inner product = c*gamma*|dl|^2 >= 2 B(|dl|)
    sharp = ops.verify_axioms(op, n_samples=10_000, seed=123, c2=2.0)
    assert sharp.monotonicity_violations == 0


def test_verify_axioms_detects_false_claim():
    op = ops.reference_linear(1)
    rep = ops.verify_axioms(op, n_samples=10_000, seed=123, c2=2.4)
    assert rep.monotonicity_violations > 0
    assert not rep.passed


def test_verify_axioms_power_law():
    op = ops.reference_power_law(3.0)
    rep = ops.verify_axioms(op, n_samples=10_000, seed=7)
    assert rep.passed
    assert rep.zero_worst == 0.0
    assert rep.periodicity_worst == 0.0


def test_verify_axioms_deterministic():
    op = ops.reference_linear(1)
    a = ops.verify_axioms(op, n_samples=2_000, seed=11)
    b = ops.verify_axioms(op, n_samples=2_000, seed=11)
    assert a == b


def test_custom_operator_needs_constants():
    op = ops.custom_operator(lambda y, t, z, lam: lam, dim=1)
    with pytest.raises(ConfigError):
        ops.verify_axioms(op, nf=orlicz.power(2.0))
    ok = ops.verify_axioms(
        op, nf=orlicz.power(2.0), n_samples=500, c0=1.0, c1=1.0, c2=2.0
    )
    assert ok.monotonicity_violations == 0


def test_custom_jacobian_finite_difference_fallback():
    op = ops.custom_operator(lambda y, t, z, lam: lam * 3.0, dim=2)
    jac = ops.flux_jacobian(op, np.zeros((1, 2)), 0.0, np.zeros((1, 2)), np.array([[0.5, 1.0]]))
    assert np.allclose(jac[0], 3.0 * np.eye(2), atol=1e-6)


def test_constructor_validation():
    with pytest.raises(ConfigError):
        # gamma may not carry a fast-time mode
        bad_gamma = ops.TrigPoly(dim=1, const=2.0, modes=(ops.TrigMode(k=(1,), m=1, sin_amp=1.0),))
        ops.linear_separable(ops.constant_poly(1.0, 1), bad_gamma)
    with pytest.raises(ConfigError):
        # coefficient dips below zero
        weak = ops.TrigPoly(dim=1, const=0.5, modes=(ops.TrigMode(k=(1,), sin_amp=1.0),))
        ops.linear_separable(weak, ops.constant_poly(1.0, 1))
    with pytest.raises(ConfigError):
        ops.linear_separable(ops.constant_poly(1.0, 1), ops.constant_poly(1.0, 2))


def test_time_invariance_flag():
    assert ops.reference_linear(1).time_invariant
    c_tau = ops.TrigPoly(dim=1, const=2.0, modes=(ops.TrigMode(k=(0,), m=1, sin_amp=0.5),))
    op = ops.linear_separable(c_tau, ops.constant_poly(1.0, 1))
    assert not op.time_invariant
