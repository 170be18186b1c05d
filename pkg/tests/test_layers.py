import numpy as np
import pytest

from fc2t2.expansion import Engine, SourceSet
from fc2t2.kernel import KernelModel
from fc2t2.layers import (depth_forward, depth_jvp, explicit_forward,
                          explicit_jvp, line_integral_forward,
                          line_integral_jvp, surface_gradient_forward,
                          surface_gradient_jvp, volumetric_forward,
                          volumetric_jvp)
from fc2t2.oracle import (naive_sum, quadrature_line_integral,
                          quadrature_render, scan_first_root)
from fc2t2.poly1d import mexp_fit_bound
from fc2t2.ray import Camera, domain_span, generate_rays


@pytest.fixture(scope="module")
def engine():
    return Engine(KernelModel("gaussian", 50.0, 4), 3, lsq=True,
                  check_admissibility=False)


@pytest.fixture(scope="module")
def scene():
    rng = np.random.default_rng(7)
    p = rng.uniform(-0.6, 0.6, (40, 3))
    w = -(np.abs(rng.normal(size=(40, 1))) * 0.5 + 0.3)
    return p, w


@pytest.fixture(scope="module")
def bundle():
    cam = Camera(position=np.array([0.0, 0.0, -2.5]), look_at=np.zeros(3),
                 up=np.array([0.0, 1.0, 0.0]), fov_deg=30.0, width=3, height=3)
    return generate_rays(cam)


def _adjoint_check(fwd, jvp, w, p, out_shape, seed, n_dirs=5, eps=1e-6,
                   tol=1e-5):
    """Dot-product identity <jvp(y_bar), (dw, dp)> == y_bar . FD directional
    derivative of the layer's own forward."""
    rng = np.random.default_rng(seed)
    for _ in range(n_dirs):
        y_bar = rng.normal(size=out_shape)
        g = jvp(y_bar)
        dw = rng.normal(size=w.shape)
        dp = rng.normal(size=p.shape)
        fd_w = np.sum(y_bar * (fwd(w + eps * dw, p) - fwd(w - eps * dw, p))
                      / (2 * eps))
        fd_p = np.sum(y_bar * (fwd(w, p + eps * dp) - fwd(w, p - eps * dp))
                      / (2 * eps))
        assert np.sum(g.w_bar * dw) == pytest.approx(fd_w, rel=tol, abs=1e-10)
        assert np.sum(g.p_bar * dp) == pytest.approx(fd_p, rel=tol, abs=1e-10)


# -- explicit --------------------------------------------------------------

def test_explicit_forward_matches_oracle(engine, scene):
    p, w = scene
    rng = np.random.default_rng(0)
    q = rng.uniform(-0.8, 0.8, (200, 3))
    res = explicit_forward(engine, SourceSet(p, w), q)
    exact = naive_sum(engine.kernel, p, w, q)
    rel = np.linalg.norm(res.values - exact) / np.linalg.norm(exact)
    assert rel < 1e-2


def test_explicit_adjoints(engine, scene):
    p, w = scene
    rng = np.random.default_rng(1)
    q = rng.uniform(-0.8, 0.8, (30, 3))
    res = explicit_forward(engine, SourceSet(p, w), q)
    _adjoint_check(
        lambda wv, pv: explicit_forward(engine, SourceSet(pv, wv), q).values,
        lambda yb: explicit_jvp(yb, res), w, p, (30, 1), seed=2)


def test_explicit_q_bar_matches_fd(engine, scene):
    p, w = scene
    rng = np.random.default_rng(3)
    q = rng.uniform(-0.7, 0.7, (10, 3))
    res = explicit_forward(engine, SourceSet(p, w), q)
    y_bar = rng.normal(size=(10, 1))
    g = explicit_jvp(y_bar, res)
    dq = rng.normal(size=q.shape)
    eps = 1e-6
    fd = np.sum(y_bar * (explicit_forward(engine, SourceSet(p, w), q + eps * dq).values
                         - explicit_forward(engine, SourceSet(p, w), q - eps * dq).values)
                / (2 * eps))
    assert np.sum(g.q_bar * dq) == pytest.approx(fd, rel=1e-5)


# -- depth -----------------------------------------------------------------

def test_depth_hits_reevaluate_to_zero(engine, scene, bundle):
    p, w = scene
    res = depth_forward(engine, SourceSet(p, w), bundle, bias=0.3)
    assert res.hit.any()
    f = res.accessor.value(res.points[res.hit])[:, 0] + res.bias
    assert np.max(np.abs(f)) <= 1e-6


def test_depth_matches_scan_bisection_oracle(engine, scene, bundle):
    p, w = scene
    res = depth_forward(engine, SourceSet(p, w), bundle, bias=0.3)
    t_in, t_out = domain_span(bundle)
    for i in np.flatnonzero(res.hit):
        def f(t):
            pt = bundle.origins[i] + t * bundle.directions[i]
            return float(res.accessor.value(pt[None, :])[0, 0]) + res.bias
        ref = scan_first_root(f, t_in[i] + 1e-9, t_out[i] - 1e-9, 2e-3)
        assert res.lengths[i] == pytest.approx(ref, abs=1e-8)


def test_depth_scale_invariance(engine, scene, bundle):
    """Scaling the field (weights and bias together) moves no root."""
    p, w = scene
    a = depth_forward(engine, SourceSet(p, w), bundle, bias=0.3)
    b = depth_forward(engine, SourceSet(p, 3.0 * w), bundle, bias=0.9)
    assert np.array_equal(a.hit, b.hit)
    assert np.allclose(a.lengths[a.hit], b.lengths[b.hit], atol=1e-9)


def test_depth_dead_pixel_rule(engine, scene, bundle):
    """A ray whose field is non-positive at domain entry never reports a
    hit, even though the biased field has roots along it."""
    p, w = scene
    res = depth_forward(engine, SourceSet(p, w), bundle, bias=-0.2)
    assert not res.hit.any()
    assert res.diagnostics["dead_pixels"] == bundle.count


def test_depth_adjoints(engine, scene, bundle):
    p, w = scene
    res = depth_forward(engine, SourceSet(p, w), bundle, bias=0.3)
    hit0 = res.hit.copy()

    def fwd(wv, pv):
        r = depth_forward(engine, SourceSet(pv, wv), bundle, bias=0.3)
        return np.where(hit0 & r.hit, r.lengths, 0.0)

    _adjoint_check(fwd, lambda yb: depth_jvp(yb, res), w, p,
                   (bundle.count,), seed=4)


def test_depth_jvp_zero_tangent(engine, scene, bundle):
    p, w = scene
    res = depth_forward(engine, SourceSet(p, w), bundle, bias=0.3)
    g = depth_jvp(np.zeros(bundle.count), res)
    assert not g.w_bar.any() and not g.p_bar.any()


# -- surface gradient ------------------------------------------------------

def test_surface_gradient_outputs_field_gradient(engine, scene, bundle):
    p, w = scene
    res = surface_gradient_forward(engine, SourceSet(p, w), bundle, bias=0.3)
    ref = res.accessor.partials(res.points[res.hit])[:, 0, :]
    assert np.allclose(res.grads[res.hit], ref, atol=1e-12)


def test_surface_gradient_adjoints(engine, scene, bundle):
    p, w = scene
    res = surface_gradient_forward(engine, SourceSet(p, w), bundle, bias=0.3)
    hit0 = res.hit.copy()

    def fwd(wv, pv):
        r = surface_gradient_forward(engine, SourceSet(pv, wv), bundle,
                                     bias=0.3)
        return np.where((hit0 & r.hit)[:, None], r.grads, 0.0)

    _adjoint_check(fwd, lambda yb: surface_gradient_jvp(yb, res), w, p,
                   (bundle.count, 3), seed=5)


# -- line integral ---------------------------------------------------------

def test_line_integral_zero_weights(engine, bundle):
    p = np.zeros((1, 3))
    res = line_integral_forward(engine, SourceSet(p, np.zeros((1, 1))), bundle)
    assert not res.values.any()


def test_line_integral_linear_in_w(engine, scene, bundle):
    p, w = scene
    a = line_integral_forward(engine, SourceSet(p, w), bundle).values
    b = line_integral_forward(engine, SourceSet(p, 2.5 * w), bundle).values
    assert np.allclose(b, 2.5 * a, atol=1e-12)


def test_line_integral_matches_accessor_quadrature(engine, scene, bundle):
    p, w = scene
    res = line_integral_forward(engine, SourceSet(p, w), bundle)
    t_in, t_out = domain_span(bundle)
    for i in range(bundle.count):
        ref = quadrature_line_integral(res.accessor.value, bundle.origins[i],
                                       bundle.directions[i], t_in[i], t_out[i],
                                       4096, level=engine.levels)
        assert res.values[i] == pytest.approx(ref, rel=1e-6, abs=1e-12)


def test_line_integral_adjoints(engine, scene, bundle):
    p, w = scene
    res = line_integral_forward(engine, SourceSet(p, w), bundle)
    _adjoint_check(
        lambda wv, pv: line_integral_forward(engine, SourceSet(pv, wv),
                                             bundle).values,
        lambda yb: line_integral_jvp(yb, res), w, p, (bundle.count, 1),
        seed=6)


# -- volumetric ------------------------------------------------------------

@pytest.fixture(scope="module")
def vol_scene(scene):
    p, w = scene
    rng = np.random.default_rng(8)
    w_sigma = -w                         # positive densities
    w_color = rng.uniform(0.2, 1.0, (p.shape[0], 2))
    background = np.array([0.4, 0.8])
    return p, w_sigma, w_color, background


def test_volumetric_zero_density_returns_background(engine, vol_scene, bundle):
    p, w_sigma, w_color, bg = vol_scene
    res = volumetric_forward(engine, p, np.zeros_like(w_sigma), w_color,
                             bundle, bg)
    assert np.array_equal(res.rgb, np.broadcast_to(bg, res.rgb.shape))


def test_volumetric_matches_quadrature_renderer(engine, vol_scene, bundle):
    p, w_sigma, w_color, bg = vol_scene
    res = volumetric_forward(engine, p, w_sigma, w_color, bundle, bg)
    t_in, t_out = domain_span(bundle)
    bound = 2.0 * mexp_fit_bound()
    for i in range(bundle.count):
        ref, _ = quadrature_render(res.accessor.value, bundle.origins[i],
                                   bundle.directions[i], t_in[i], t_out[i],
                                   background=bg, n=8192)
        assert np.max(np.abs(res.rgb[i] - ref)) <= bound


def test_volumetric_early_exit_on_dense_scene(engine, vol_scene, bundle):
    p, w_sigma, w_color, bg = vol_scene
    res = volumetric_forward(engine, p, 50.0 * w_sigma, w_color, bundle, bg)
    assert not res.alive.all()           # some segments were culled
    assert np.all(np.isfinite(res.rgb))


def test_volumetric_adjoints(engine, vol_scene, bundle):
    p, w_sigma, w_color, bg = vol_scene
    # flip a few densities negative so the relu subgradient path is exercised
    w_sigma = w_sigma.copy()
    w_sigma[::7] *= -1.0
    res = volumetric_forward(engine, p, w_sigma, w_color, bundle, bg)
    w_all = np.concatenate([w_sigma, w_color], axis=1)

    def fwd(wv, pv):
        return volumetric_forward(engine, pv, wv[:, :1], wv[:, 1:],
                                  bundle, bg).rgb

    _adjoint_check(fwd, lambda yb: volumetric_jvp(yb, res), w_all, p,
                   (bundle.count, 2), seed=9, tol=1e-4)


def test_volumetric_relu_masks_clipped_weights(engine, vol_scene, bundle):
    p, w_sigma, w_color, bg = vol_scene
    w_sigma = w_sigma.copy()
    w_sigma[::3] *= -1.0
    res = volumetric_forward(engine, p, w_sigma, w_color, bundle, bg)
    g = volumetric_jvp(np.ones((bundle.count, 2)), res)
    assert not g.w_bar[::3, 0].any()


# -- shared machinery ------------------------------------------------------

def test_each_jvp_costs_one_expansion(engine, scene, vol_scene, bundle):
    p, w = scene
    _, w_sigma, w_color, bg = vol_scene
    q = np.zeros((4, 3)) + 0.1
    runs = [
        (lambda: explicit_forward(engine, SourceSet(p, w), q),
         lambda r: explicit_jvp(np.ones((4, 1)), r)),
        (lambda: depth_forward(engine, SourceSet(p, w), bundle, bias=0.3),
         lambda r: depth_jvp(np.ones(bundle.count), r)),
        (lambda: surface_gradient_forward(engine, SourceSet(p, w), bundle,
                                          bias=0.3),
         lambda r: surface_gradient_jvp(np.ones((bundle.count, 3)), r)),
        (lambda: line_integral_forward(engine, SourceSet(p, w), bundle),
         lambda r: line_integral_jvp(np.ones((bundle.count, 1)), r)),
        (lambda: volumetric_forward(engine, p, w_sigma, w_color, bundle, bg),
         lambda r: volumetric_jvp(np.ones((bundle.count, 2)), r)),
    ]
    for fwd, jvp in runs:
        res = fwd()
        before = engine.expansion_count
        jvp(res)
        assert engine.expansion_count == before + 1
