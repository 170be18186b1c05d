import numpy as np
import pytest

from fc2t2 import poly1d
from fc2t2.oracle import bisect_root
from fc2t2.poly1d import (DegreeError, fit_exp_poly, mexp, mexp_fit_bound,
                          poly_add, poly_compose, poly_differentiate,
                          poly_eval, poly_integrate, poly_mul, quartic_roots)


def test_eval_matches_power_sum():
    rng = np.random.default_rng(0)
    c = rng.normal(size=5)
    for x in rng.normal(size=10):
        direct = sum(ci * x ** i for i, ci in enumerate(c))
        assert poly_eval(c, x) == pytest.approx(direct, rel=1e-13)


def test_integrate_and_differentiate():
    assert np.allclose(poly_integrate([0, 0, 1]), [0, 0, 0, 1 / 3])
    rng = np.random.default_rng(1)
    c = rng.normal(size=6)
    assert np.allclose(poly_differentiate(poly_integrate(c)), c)


def test_mul_and_compose():
    # (1 + x)(1 - x) = 1 - x^2
    assert np.allclose(poly_mul([1, 1], [1, -1]), [1, 0, -1])
    # p(q(x)) against pointwise evaluation
    rng = np.random.default_rng(2)
    p, q = rng.normal(size=4), rng.normal(size=5)
    comp = poly_compose(p, q)
    xs = rng.normal(size=8)
    assert np.allclose(poly_eval(comp, xs), poly_eval(p, poly_eval(q, xs)))


def test_degree_cap_enforced():
    big = np.ones(poly1d.DEGREE_CAP)
    with pytest.raises(DegreeError):
        poly_mul(big, big)


def test_add_uneven_lengths():
    assert np.allclose(poly_add([1, 2], [0, 0, 3]), [1, 2, 3])


def test_quartic_known_roots():
    # (x-1)(x-2)(x-3)(x-4)
    c = np.array([24.0, -50.0, 35.0, -10.0, 1.0])
    assert np.allclose(quartic_roots(c), [1, 2, 3, 4], atol=1e-9)


def test_quartic_no_real_roots():
    assert quartic_roots(np.array([1.0, 0, 0, 0, 1.0])).size == 0


def test_degenerate_leading_coefficient_demotes():
    # effectively linear: 1e-15 x^4 + x - 1
    r = quartic_roots(np.array([-1.0, 1.0, 0.0, 0.0, 1e-15]))
    assert r.size == 1
    assert r[0] == pytest.approx(1.0, abs=1e-9)


def test_repeated_root():
    # (x-2)^2 (x^2+1)
    c = np.array([4.0, -4.0, 5.0, -4.0, 1.0])
    r = quartic_roots(c)
    assert r.size == 1
    assert r[0] == pytest.approx(2.0, abs=1e-6)


def test_biquadratic():
    # x^4 - 5x^2 + 4 = (x^2-1)(x^2-4)
    r = quartic_roots(np.array([4.0, 0.0, -5.0, 0.0, 1.0]))
    assert np.allclose(r, [-2, -1, 1, 2], atol=1e-9)


def test_thousand_random_quartics_vs_bisection():
    """Closed-form roots agree with a bisection oracle to 1e-8."""
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(1000):
        coeffs = rng.normal(size=5)
        roots = quartic_roots(coeffs)
        # verify every closed-form root against bisection on a local bracket
        for r in roots:
            f = lambda x: float(poly_eval(coeffs, x))
            # find a sign-changing bracket around r by expanding outward
            for half in (1e-6, 1e-4, 1e-2, 1.0):
                lo, hi = r - half, r + half
                if np.sign(f(lo)) != np.sign(f(hi)):
                    rb = bisect_root(f, lo, hi)
                    worst = max(worst, abs(rb - r))
                    break
            else:
                # even root (no sign change): accept tiny residual instead
                scale = float(np.max(np.abs(coeffs)))
                assert abs(f(r)) < 1e-6 * scale
    assert worst <= 1e-8


def test_roots_never_missed_on_sign_change_grid():
    rng = np.random.default_rng(3)
    for _ in range(200):
        coeffs = rng.normal(size=5)
        xs = np.linspace(-10, 10, 2001)
        ys = poly_eval(coeffs, xs)
        crossings = np.nonzero(np.diff(np.sign(ys)) != 0)[0]
        roots = quartic_roots(coeffs)
        for i in crossings:
            assert np.any(np.abs(roots - xs[i]) < 0.02), \
                "closed form missed a sign change the grid saw"


def test_exp_fit_bound_recorded():
    bound = mexp_fit_bound()
    assert 0 < bound < 1e-2
    grid = np.linspace(0, poly1d.EXP_FIT_RANGE, 2000)
    err = np.max(np.abs(poly_eval(fit_exp_poly(), grid) - np.exp(-grid)))
    assert err <= bound + 1e-12


def test_mexp_clamped_past_range():
    assert mexp(6.0) == 0.0
    assert mexp(poly1d.EXP_FIT_RANGE + 1e-9) == 0.0
