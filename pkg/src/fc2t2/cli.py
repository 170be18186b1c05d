"""Command-line entry points reproducing the desk-scale experiments.

Commands::

    fc2t2 fit-sdf       train the explicit layer on an (analytic) SDF
    fc2t2 fit-depth     train the depth layer on a target depth image
    fc2t2 fit-radiance  train the volumetric layer on posed RGB images
    fc2t2 render        render depth / normal / volumetric images from a
                        checkpoint
    fc2t2 verify        run the oracle suite; nonzero exit on failure
    fc2t2 bench         timing / FLOP table across levels and sizes

Every run directory receives a manifest (config echo + input hashes), a
metrics CSV, and matplotlib figures rendered from the same data.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import dataio, report
from .expansion import Engine, SourceSet
from .flops import l2p_flops, p2m_flops
from .kernel import DEFAULT_ALPHA, KernelModel
from .layers import (depth_forward, depth_jvp, explicit_forward, explicit_jvp,
                     surface_gradient_forward, volumetric_forward,
                     volumetric_jvp)
from .oracle import (OracleReport, naive_field, naive_sum,
                     quadrature_line_integral, quadrature_render,
                     scan_first_root)
from .ray import Camera, RayBundle, domain_span, generate_rays
from .trainer import (Optimizer, TrainConfig, init_params, l1_term,
                      loss_and_tangent)

_SDF_BUILDERS = {
    "sphere": lambda spec: dataio.sdf_sphere(spec.get("center", (0, 0, 0)),
                                             spec.get("radius", 0.5)),
    "box": lambda spec: dataio.sdf_box(spec.get("center", (0, 0, 0)),
                                       spec.get("half", (0.4, 0.4, 0.4))),
    "torus": lambda spec: dataio.sdf_torus(spec.get("center", (0, 0, 0)),
                                           spec.get("major", 0.5),
                                           spec.get("minor", 0.15)),
}


def _build_sdf(spec: dict):
    kind = spec.get("kind", "sphere")
    if kind == "union":
        return dataio.sdf_union(*[_build_sdf(s) for s in spec["parts"]])
    if kind not in _SDF_BUILDERS:
        raise ValueError(f"unknown sdf kind {kind!r}")
    return _SDF_BUILDERS[kind](spec)


def _make_engine(cfg: dict) -> Engine:
    levels = int(cfg.get("levels", 4))
    alpha = float(cfg.get("alpha", DEFAULT_ALPHA[levels]))
    kernel = KernelModel(cfg.get("kernel", "gaussian"), alpha,
                         int(cfg.get("rho", 4)))
    return Engine(kernel, levels, lsq=bool(cfg.get("lsq", True)),
                  check_admissibility=bool(cfg.get("check_admissibility",
                                                   False)))


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg.get("train", {})
    return TrainConfig(
        optimizer=t.get("optimizer", "adam"),
        learning_rate=float(t.get("learning_rate", 1e-2)),
        lr_schedule=[tuple(x) for x in t.get("lr_schedule", [])],
        epochs=int(t.get("epochs", 100)),
        l1_weight=float(t.get("l1_weight", 0.0)),
        init_scheme=t.get("init_scheme", "uniform"),
        init_scale=float(t.get("init_scale", 1e-2)),
        seed=int(cfg.get("seed", 0)),
        loss=t.get("loss", "mae"),
        train_positions=bool(t.get("train_positions", True)),
    )


def _elapsed(cfg: dict, t_start: float) -> float:
    """Wall time for metrics rows; pinned to 0 in deterministic mode so
    reruns with the same config and seed are byte-identical."""
    return 0.0 if cfg.get("deterministic") else time.perf_counter() - t_start


def _prepare_out(cfg: dict) -> str:
    out = cfg.get("out", "out")
    os.makedirs(out, exist_ok=True)
    return out


def _as_float32_io(cfg: dict, *arrays: np.ndarray) -> list[np.ndarray]:
    """The engine computes in float64; precision 32 quantizes parameters at
    the I/O boundary."""
    if int(cfg.get("precision", 64)) == 32:
        return [a.astype(np.float32).astype(np.float64) for a in arrays]
    return list(arrays)


# -- fit-sdf ---------------------------------------------------------------

def cmd_fit_sdf(cfg: dict) -> dict:
    out = _prepare_out(cfg)
    engine = _make_engine(cfg)
    tc = _train_config(cfg)
    rng = np.random.default_rng(tc.seed)

    if "points" in cfg:
        data = dataio.load_points(cfg["points"])
    else:
        sdf = _build_sdf(cfg.get("sdf", {"kind": "sphere"}))
        data = dataio.sample_sdf(sdf, int(cfg.get("samples", 100_000)),
                                 seed=tc.seed)
    q_all, target_all = data.locations, data.values

    sources, bias = init_params(int(cfg.get("sources", 10_000)), 1,
                                tc.init_scheme, tc.init_scale, tc.seed)
    bias = float(cfg.get("bias_init", float(np.mean(target_all))))
    if cfg.get("solver", "adam") == "cgls":
        return _fit_sdf_cgls(cfg, out, engine, tc, sources, q_all, target_all)
    opt = Optimizer(tc)
    batch = int(cfg.get("batch", min(20_000, q_all.shape[0])))
    rows = []
    t_start = time.perf_counter()
    for epoch in range(tc.epochs):
        idx = (rng.choice(q_all.shape[0], batch, replace=False)
               if batch < q_all.shape[0] else slice(None))
        q, target = q_all[idx], target_all[idx]
        res = explicit_forward(engine, sources, q)
        pred = res.values + bias
        loss, tangent = loss_and_tangent(pred, target, tc.loss)
        reg, reg_grad = l1_term(sources.w, tc.l1_weight)
        g = explicit_jvp(tangent, res)
        bias_bar = float(np.sum(tangent))
        sources, bias = opt.step(sources, g.w_bar + reg_grad, g.p_bar, epoch,
                                 bias=bias, bias_bar=bias_bar)
        rows.append({"epoch": epoch, "loss": f"{loss + reg:.10e}",
                     "data_loss": f"{loss:.10e}",
                     "seconds": f"{_elapsed(cfg, t_start):.3f}"})

    # final full-set MAE with the trained parameters
    res = explicit_forward(engine, sources, q_all)
    final_mae = float(np.mean(np.abs(res.values + bias - target_all)))
    rows.append({"epoch": tc.epochs, "loss": f"{final_mae:.10e}",
                 "data_loss": f"{final_mae:.10e}",
                 "seconds": f"{_elapsed(cfg, t_start):.3f}"})

    p_io, w_io = _as_float32_io(cfg, sources.p, sources.w)
    ckpt = dataio.Checkpoint(levels=engine.levels, rho=engine.rho,
                             kernel=engine.kernel.family,
                             alpha=engine.kernel.alpha, p=p_io, w=w_io,
                             bias=bias)
    ckpt_path = os.path.join(out, "sdf.ckpt")
    dataio.save_checkpoint(ckpt_path, ckpt)
    report.write_metrics_csv(os.path.join(out, "metrics.csv"),
                             ["epoch", "loss", "data_loss", "seconds"], rows)
    report.plot_loss_curve(os.path.join(out, "loss.png"),
                           [int(r["epoch"]) for r in rows],
                           [float(r["data_loss"]) for r in rows],
                           ylabel=tc.loss, title="sdf fit")
    report.write_manifest(out, cfg, [cfg.get("points", "")])
    if cfg.get("render_normals", False):
        cam = dataio.load_cameras(cfg["cameras"])[0][0] if "cameras" in cfg \
            else Camera(position=np.array([0.0, 0.0, -2.5]),
                        look_at=np.zeros(3), up=np.array([0.0, 1.0, 0.0]),
                        fov_deg=40.0, width=128, height=128)
        img = _render_normals_image(engine, sources, bias, cam)
        dataio.save_image(os.path.join(out, "normals.ppm"), img)
        report.plot_image_grid(os.path.join(out, "normals.png"), [img],
                               ["normal shading"])
    return {"final_mae": final_mae, "checkpoint": ckpt_path,
            "sources": sources, "bias": bias,
            "seconds": time.perf_counter() - t_start}


def _fit_sdf_cgls(cfg: dict, out: str, engine: Engine, tc: TrainConfig,
                  sources: SourceSet, q_all: np.ndarray,
                  target_all: np.ndarray) -> dict:
    """Conjugate-gradient least squares on the (w, bias) subproblem.

    The explicit layer is linear in its weights, so each iteration is one
    forward product (expand sources, evaluate at the samples) and one
    adjoint product (expand the residual at the samples, evaluate at the
    sources); positions stay at their seeded initialization.
    """
    p_src = sources.p
    M = q_all.shape[0]
    d = target_all[:, 0]

    def a_fwd(w, b):
        acc = engine.expand(SourceSet(p_src, w[:, None]))
        return acc.value(q_all)[:, 0] + b

    def a_adj(r):
        acc = engine.expand(SourceSet(q_all, r[:, None]))
        return acc.value(p_src)[:, 0], float(np.sum(r))

    w = np.zeros(p_src.shape[0])
    bias = 0.0
    t_start = time.perf_counter()
    r = d - a_fwd(w, bias)
    s_w, s_b = a_adj(r)
    pk_w, pk_b = s_w.copy(), s_b
    gamma = float(s_w @ s_w + s_b * s_b)
    rows = []
    for it in range(tc.epochs):
        qk = a_fwd(pk_w, pk_b)
        alpha = gamma / float(qk @ qk)
        w += alpha * pk_w
        bias += alpha * pk_b
        r -= alpha * qk
        s_w, s_b = a_adj(r)
        gamma_new = float(s_w @ s_w + s_b * s_b)
        beta = gamma_new / gamma
        pk_w = s_w + beta * pk_w
        pk_b = s_b + beta * pk_b
        gamma = gamma_new
        mae = float(np.mean(np.abs(r)))
        rows.append({"epoch": it, "loss": f"{mae:.10e}",
                     "data_loss": f"{mae:.10e}",
                     "seconds": f"{_elapsed(cfg, t_start):.3f}"})

    final = SourceSet(p_src, w[:, None])
    final_mae = float(np.mean(np.abs(a_fwd(w, bias) - d)))
    rows.append({"epoch": tc.epochs, "loss": f"{final_mae:.10e}",
                 "data_loss": f"{final_mae:.10e}",
                 "seconds": f"{_elapsed(cfg, t_start):.3f}"})
    ckpt_path = os.path.join(out, "sdf.ckpt")
    p_io, w_io = _as_float32_io(cfg, final.p, final.w)
    dataio.save_checkpoint(ckpt_path, dataio.Checkpoint(
        levels=engine.levels, rho=engine.rho, kernel=engine.kernel.family,
        alpha=engine.kernel.alpha, p=p_io, w=w_io, bias=bias))
    report.write_metrics_csv(os.path.join(out, "metrics.csv"),
                             ["epoch", "loss", "data_loss", "seconds"], rows)
    report.plot_loss_curve(os.path.join(out, "loss.png"),
                           [int(r_["epoch"]) for r_ in rows],
                           [float(r_["data_loss"]) for r_ in rows],
                           ylabel="mae", title="sdf fit (cgls)")
    report.write_manifest(out, cfg, [cfg.get("points", "")])
    return {"final_mae": final_mae, "checkpoint": ckpt_path,
            "sources": final, "bias": bias,
            "seconds": time.perf_counter() - t_start}


def _shade_normals(res) -> np.ndarray:
    """Normal-shaded image from a surface-gradient RootResult."""
    g = res.grads
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    n = np.where(norm > 0, g / np.maximum(norm, 1e-12), 0.0)
    shade = 0.5 * (n + 1.0)
    shade[~res.hit] = 0.0
    return shade


def _render_normals_image(engine, sources, bias, camera: Camera) -> np.ndarray:
    bundle = generate_rays(camera)
    res = surface_gradient_forward(engine, sources, bundle, bias=bias)
    return _shade_normals(res).reshape(camera.height, camera.width, 3)


# -- fit-depth -------------------------------------------------------------

def cmd_fit_depth(cfg: dict) -> dict:
    out = _prepare_out(cfg)
    engine = _make_engine(cfg)
    tc = _train_config(cfg)

    cameras = dataio.load_cameras(cfg["cameras"])
    camera, image_path = cameras[0]
    bundle = generate_rays(camera)
    if image_path:
        target = dataio.load_image(image_path)[:, :, 0].reshape(-1)
        target = target * float(cfg.get("depth_scale", 1.0))
    else:
        target = np.asarray(cfg["target_depths"], dtype=np.float64).reshape(-1)
    valid_target = np.isfinite(target)

    sources, _ = init_params(int(cfg.get("sources", 2_000)), 1,
                             tc.init_scheme, tc.init_scale, tc.seed)
    # negative blobs carve the surface out of a positive ambient bias
    sources = SourceSet(sources.p, -np.abs(sources.w))
    bias = float(cfg.get("bias_init", 0.2))
    miss_penalty = float(cfg.get("miss_penalty", 0.1))
    opt = Optimizer(tc)
    rows = []
    t_start = time.perf_counter()
    res = None
    for epoch in range(tc.epochs):
        res = depth_forward(engine, sources, bundle, bias=bias)
        if epoch == 0 and not res.hit.any():
            raise RuntimeError(
                "all rays dead at initialization; raise bias_init or shrink "
                "the weight init scale")
        mask = res.hit & valid_target
        loss, tangent = loss_and_tangent(
            np.where(mask, res.lengths, 0.0), np.where(mask, target, 0.0),
            tc.loss, mask=mask)
        miss_frac = float(np.mean(~mask))
        g = depth_jvp(tangent, res)
        reg, reg_grad = l1_term(sources.w, tc.l1_weight)
        sources, bias = opt.step(sources, g.w_bar + reg_grad, g.p_bar, epoch,
                                 bias=bias,
                                 bias_bar=miss_penalty * miss_frac)
        rows.append({"epoch": epoch, "loss": f"{loss:.10e}",
                     "miss_fraction": f"{miss_frac:.6f}",
                     "seconds": f"{_elapsed(cfg, t_start):.3f}"})

    depth_img = np.where(res.hit, res.lengths, 0.0).reshape(camera.height,
                                                            camera.width)
    scale = max(float(depth_img.max()), 1e-12)
    dataio.save_image(os.path.join(out, "depth.ppm"), depth_img / scale)
    ckpt_path = os.path.join(out, "depth.ckpt")
    dataio.save_checkpoint(ckpt_path, dataio.Checkpoint(
        levels=engine.levels, rho=engine.rho, kernel=engine.kernel.family,
        alpha=engine.kernel.alpha, p=sources.p, w=sources.w, bias=bias))
    report.write_metrics_csv(os.path.join(out, "metrics.csv"),
                             ["epoch", "loss", "miss_fraction", "seconds"],
                             rows)
    report.plot_loss_curve(os.path.join(out, "loss.png"),
                           [int(r["epoch"]) for r in rows],
                           [float(r["loss"]) for r in rows],
                           ylabel=tc.loss, title="depth fit")
    report.plot_image_grid(os.path.join(out, "depth.png"),
                           [depth_img / scale], ["predicted depth"])
    report.write_manifest(out, cfg, [cfg.get("cameras", "")])
    return {"final_loss": float(rows[-1]["loss"]), "checkpoint": ckpt_path,
            "sources": sources, "bias": bias}


# -- fit-radiance ----------------------------------------------------------

def cmd_fit_radiance(cfg: dict) -> dict:
    out = _prepare_out(cfg)
    engine = _make_engine(cfg)
    tc = _train_config(cfg)
    rng = np.random.default_rng(tc.seed)
    background = np.asarray(cfg.get("background", [1.0, 1.0, 1.0]),
                            dtype=np.float64)

    cameras = dataio.load_cameras(cfg["cameras"])
    bundles, targets = [], []
    for cam, image_path in cameras:
        bundles.append(generate_rays(cam))
        targets.append(dataio.load_image(image_path).reshape(-1, 3))

    # train on a pooled ray set over the training frames; each epoch sees a
    # random minibatch drawn across every pose at once
    holdout = int(cfg.get("holdout", 0))
    n_train = len(cameras) - holdout
    pool_o = np.concatenate([bundles[i].origins for i in range(n_train)])
    pool_d = np.concatenate([bundles[i].directions for i in range(n_train)])
    pool_t = np.concatenate([targets[i] for i in range(n_train)])
    batch = min(int(cfg.get("rays_per_batch", 2048)), pool_o.shape[0])

    n_sources = int(cfg.get("sources", 2_000))
    sources, _ = init_params(n_sources, 4, tc.init_scheme, tc.init_scale,
                             tc.seed)
    w_sigma = np.abs(sources.w[:, :1]) * float(cfg.get("sigma_init_scale",
                                                       1.0))
    w_color = np.abs(sources.w[:, 1:]) * float(cfg.get("color_init_scale",
                                                       1.0))
    p = sources.p
    opt = Optimizer(tc)
    rows = []
    t_start = time.perf_counter()
    for epoch in range(tc.epochs):
        idx = rng.choice(pool_o.shape[0], size=batch, replace=False)
        mb = RayBundle(origins=pool_o[idx], directions=pool_d[idx])
        res = volumetric_forward(engine, p, w_sigma, w_color, mb, background)
        loss, tangent = loss_and_tangent(res.rgb, pool_t[idx], tc.loss)
        g = volumetric_jvp(tangent, res)
        packed = SourceSet(p, np.concatenate([w_sigma, w_color], axis=1))
        reg, reg_grad = l1_term(packed.w, tc.l1_weight)
        packed, _ = opt.step(packed, g.w_bar + reg_grad, g.p_bar, epoch)
        p, w_sigma, w_color = packed.p, packed.w[:, :1], packed.w[:, 1:]
        rows.append({"epoch": epoch, "loss": f"{loss:.10e}",
                     "seconds": f"{_elapsed(cfg, t_start):.3f}"})

    sparsity = float(np.mean(w_sigma > 0.0))
    ckpt_path = os.path.join(out, "radiance.ckpt")
    dataio.save_checkpoint(ckpt_path, dataio.Checkpoint(
        levels=engine.levels, rho=engine.rho, kernel=engine.kernel.family,
        alpha=engine.kernel.alpha, p=p,
        w=np.concatenate([w_sigma, w_color], axis=1)))
    report.write_metrics_csv(os.path.join(out, "metrics.csv"),
                             ["epoch", "loss", "seconds"], rows)
    report.plot_loss_curve(os.path.join(out, "loss.png"),
                           [int(r["epoch"]) for r in rows],
                           [float(r["loss"]) for r in rows],
                           ylabel=tc.loss, title="radiance fit")

    renders, frame_mse = [], []
    for i, (cam, _) in enumerate(cameras):
        res = volumetric_forward(engine, p, w_sigma, w_color, bundles[i],
                                 background)
        img = res.rgb.reshape(cam.height, cam.width, 3)
        renders.append(img)
        frame_mse.append(float(np.mean((res.rgb - targets[i]) ** 2)))
        dataio.save_image(os.path.join(out, f"render_{i:02d}.ppm"), img)
    report.plot_image_grid(os.path.join(out, "renders.png"), renders,
                           [f"pose {i} mse {frame_mse[i]:.1e}"
                            for i in range(len(renders))])
    report.write_manifest(out, cfg, [cfg.get("cameras", "")])
    holdout_mse = (float(np.mean(frame_mse[n_train:])) if holdout
                   else float("nan"))
    print(f"density sparsity: {sparsity:.3f} of sources have positive "
          "clipped density")
    return {"final_loss": float(rows[-1]["loss"]), "checkpoint": ckpt_path,
            "p": p, "w_sigma": w_sigma, "w_color": w_color,
            "renders": renders, "sparsity": sparsity,
            "frame_mse": frame_mse, "holdout_mse": holdout_mse,
            "seconds": time.perf_counter() - t_start}


# -- render ----------------------------------------------------------------

def cmd_render(cfg: dict) -> dict:
    out = _prepare_out(cfg)
    ckpt = dataio.load_checkpoint(cfg["checkpoint"])
    kernel = KernelModel(ckpt.kernel, ckpt.alpha, ckpt.rho)
    engine = Engine(kernel, ckpt.levels, lsq=bool(cfg.get("lsq", True)),
                    check_admissibility=False)
    mode = cfg.get("mode", "volumetric")
    cameras = dataio.load_cameras(cfg["cameras"])
    paths = []
    images = []
    for i, (cam, _) in enumerate(cameras):
        bundle = generate_rays(cam)
        if mode == "volumetric":
            if ckpt.w.shape[1] < 2:
                raise ValueError("checkpoint has no color channels")
            background = np.asarray(cfg.get("background",
                                            [1.0] * (ckpt.w.shape[1] - 1)))
            res = volumetric_forward(engine, ckpt.p, ckpt.w[:, :1],
                                     ckpt.w[:, 1:], bundle, background)
            img = res.rgb.reshape(cam.height, cam.width, -1)
        elif mode == "depth":
            if ckpt.w.shape[1] != 1:
                raise ValueError("depth rendering expects 1 channel")
            res = depth_forward(engine, SourceSet(ckpt.p, ckpt.w), bundle,
                                bias=ckpt.bias)
            depth = np.where(res.hit, res.lengths, 0.0)
            img = (depth / max(depth.max(), 1e-12)).reshape(cam.height,
                                                            cam.width)
        elif mode == "normal":
            if ckpt.w.shape[1] != 1:
                raise ValueError("normal rendering expects 1 channel")
            res = surface_gradient_forward(engine, SourceSet(ckpt.p, ckpt.w),
                                           bundle, bias=ckpt.bias)
            img = _shade_normals(res).reshape(cam.height, cam.width, 3)
        else:
            raise ValueError(f"unknown render mode {mode!r}")
        path = os.path.join(out, f"{mode}_{i:02d}.ppm")
        dataio.save_image(path, img)
        paths.append(path)
        images.append(img)
    report.plot_image_grid(os.path.join(out, f"{mode}.png"), images,
                           [f"camera {i}" for i in range(len(images))])
    report.write_manifest(out, cfg, [cfg["checkpoint"], cfg.get("cameras", "")])
    return {"paths": paths, "images": images}


# -- verify ----------------------------------------------------------------

def _verify_checks(cfg: dict) -> list[tuple[str, float, float]]:
    """(name, max_err, tol) rows for the oracle suite; small configs so the
    whole suite runs in seconds."""
    from .layers import line_integral_forward, line_integral_jvp
    from .poly1d import mexp_fit_bound, poly_eval, quartic_roots

    rng = np.random.default_rng(0)
    checks: list[tuple[str, float, float]] = []
    engine = _make_engine({**cfg, "levels": min(int(cfg.get("levels", 3)), 4)})
    alpha = engine.kernel.alpha
    n = 400
    p = rng.uniform(-0.8, 0.8, (n, 3))
    w = rng.normal(size=(n, 1))

    acc = engine.expand(SourceSet(p, w))
    q = rng.uniform(-0.9, 0.9, (500, 3))
    exact = naive_sum(engine.kernel, p, w, q)
    rel = np.linalg.norm(acc.value(q) - exact) / np.linalg.norm(exact)
    checks.append(("expansion_vs_naive_rel_l2", float(rel), 1e-2))

    # JVP adjoint identity on the line-integral layer
    cam = Camera(position=np.array([0.0, 0.0, -2.5]), look_at=np.zeros(3),
                 up=np.array([0.0, 1.0, 0.0]), fov_deg=30.0, width=3,
                 height=3)
    bundle = generate_rays(cam)
    res = line_integral_forward(engine, SourceSet(p, w), bundle)
    worst = 0.0
    for _ in range(5):
        yb = rng.normal(size=res.values.shape)
        g = line_integral_jvp(yb, res)
        dw = rng.normal(size=w.shape)
        eps = 1e-6
        hi = line_integral_forward(engine, SourceSet(p, w + eps * dw),
                                   bundle).values
        lo = line_integral_forward(engine, SourceSet(p, w - eps * dw),
                                   bundle).values
        fd = float(np.sum(yb * (hi - lo) / (2 * eps)))
        worst = max(worst, abs(float(np.sum(g.w_bar * dw)) - fd)
                    / max(abs(fd), 1e-12))
    checks.append(("line_integral_jvp_adjoint_rel", worst, 1e-2))

    # analytic integration vs quadrature on the accessor
    t_in, t_out = domain_span(bundle)
    worst = 0.0
    for i in range(bundle.count):
        ref = quadrature_line_integral(res.accessor.value, bundle.origins[i],
                                       bundle.directions[i], t_in[i],
                                       t_out[i], 4096, level=engine.levels)
        worst = max(worst, float(np.max(np.abs(res.values[i] - ref))
                                 / max(np.max(np.abs(ref)), 1e-12)))
    checks.append(("line_integral_vs_quadrature_rel", worst, 1e-6))

    # Ferrari vs bisection
    worst = 0.0
    for _ in range(200):
        coeffs = rng.normal(size=5)
        for root in quartic_roots(coeffs):
            f = lambda x: float(poly_eval(coeffs, x))
            for half in (1e-6, 1e-4, 1e-2, 1.0):
                lo_b, hi_b = root - half, root + half
                if np.sign(f(lo_b)) != np.sign(f(hi_b)):
                    from .oracle import bisect_root
                    worst = max(worst,
                                abs(bisect_root(f, lo_b, hi_b) - root))
                    break
    checks.append(("ferrari_vs_bisection_abs", worst, 1e-8))

    # FLOP model
    engine.flops.reset()
    engine.expand(SourceSet(p, w)).value(q)
    p2m_err = abs(engine.flops.stages["p2m"] - p2m_flops(n, engine.rho,
                                                         engine.table.size))
    l2p_err = abs(engine.flops.stages["l2p"]
                  - l2p_flops(q.shape[0], engine.rho, engine.table.size))
    checks.append(("flop_model_p2m_l2p_abs", float(p2m_err + l2p_err), 0.0))
    return checks


def cmd_verify(cfg: dict) -> int:
    failures = 0
    for name, err, tol in _verify_checks(cfg):
        ok = err <= tol
        failures += not ok
        print(f"{name}\t{err:.6e}\t{tol:.6e}\t{'pass' if ok else 'FAIL'}")
    return 1 if failures else 0


# -- bench -----------------------------------------------------------------

def cmd_bench(cfg: dict) -> dict:
    out = _prepare_out(cfg)
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    levels_list = cfg.get("bench_levels", [4])
    sizes = cfg.get("bench_sizes", [(1000, 1000), (10_000, 10_000)])
    rows = []
    labels, times = [], []
    for levels in levels_list:
        engine = _make_engine({**cfg, "levels": levels})
        for n, m in sizes:
            p = rng.uniform(-0.9, 0.9, (n, 3))
            w = rng.normal(size=(n, 1))
            q = rng.uniform(-0.9, 0.9, (m, 3))
            engine.flops.reset()
            t0 = time.perf_counter()
            acc = engine.expand(SourceSet(p, w))
            t_expand = time.perf_counter() - t0
            t0 = time.perf_counter()
            acc.value(q)
            t_query = time.perf_counter() - t0
            counts = dict(engine.flops.stages)
            m2l_share = counts.get("m2l", 0) / max(engine.flops.total(), 1)
            rows.append({
                "levels": levels, "N": n, "M": m,
                "expand_seconds": f"{t_expand:.4f}",
                "query_seconds": f"{t_query:.4f}",
                "p2m_flops": counts.get("p2m", 0),
                "l2p_flops": counts.get("l2p", 0),
                "m2l_flops": counts.get("m2l", 0),
                "total_flops": engine.flops.total(),
                "m2l_share": f"{m2l_share:.3f}",
            })
            labels.append(f"L{levels} N={n} M={m}")
            times.append(t_expand + t_query)
    fields = list(rows[0].keys())
    report.write_metrics_csv(os.path.join(out, "bench.csv"), fields, rows)
    report.plot_bench_bars(os.path.join(out, "bench.png"), labels, times,
                           title="expand + query wall time")
    report.write_manifest(out, cfg)
    return {"rows": rows}


# -- argument plumbing -----------------------------------------------------

def _parse_args(argv: list[str] | None) -> dict:
    parser = argparse.ArgumentParser(prog="fc2t2")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("fit-sdf", "fit-depth", "fit-radiance", "render", "verify",
                 "bench"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None)
        sp.add_argument("--levels", type=int, default=None)
        sp.add_argument("--rho", type=int, default=None)
        sp.add_argument("--alpha", type=float, default=None)
        sp.add_argument("--lsq", choices=["on", "off"], default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--precision", type=int, choices=[32, 64],
                        default=None)
        sp.add_argument("--out", type=str, default=None)
        if name == "render":
            sp.add_argument("--checkpoint", type=str, default=None)
            sp.add_argument("--mode", type=str, default=None)
        if name in ("fit-depth", "fit-radiance", "render"):
            sp.add_argument("--cameras", type=str, default=None)
    ns = parser.parse_args(argv)
    cfg: dict = {}
    if ns.config:
        with open(ns.config) as f:
            cfg.update(json.load(f))
    overrides = {k: v for k, v in vars(ns).items()
                 if k not in ("command", "config") and v is not None}
    if "lsq" in overrides:
        overrides["lsq"] = overrides["lsq"] == "on"
    cfg.update(overrides)
    cfg["command"] = ns.command
    return cfg


def _apply_threads(cfg: dict) -> None:
    threads = cfg.get("threads") or os.environ.get("FC2T2_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def main(argv: list[str] | None = None) -> int:
    cfg = _parse_args(argv)
    _apply_threads(cfg)
    command = cfg.pop("command")
    if command == "fit-sdf":
        result = cmd_fit_sdf(cfg)
        print(f"final MAE {result['final_mae']:.6e}")
        return 0
    if command == "fit-depth":
        result = cmd_fit_depth(cfg)
        print(f"final loss {result['final_loss']:.6e}")
        return 0
    if command == "fit-radiance":
        result = cmd_fit_radiance(cfg)
        print(f"final loss {result['final_loss']:.6e}")
        return 0
    if command == "render":
        result = cmd_render(cfg)
        print("\n".join(result["paths"]))
        return 0
    if command == "verify":
        return cmd_verify(cfg)
    if command == "bench":
        cmd_bench(cfg)
        return 0
    raise AssertionError(command)


if __name__ == "__main__":
    sys.exit(main())
