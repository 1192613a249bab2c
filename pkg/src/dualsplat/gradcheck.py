"""Pinned finite-difference verification suites.

Each suite builds a small deterministic scene (at most 10 splats, 8x8
pixels), evaluates a scalar loss plus its analytic gradients, and checks
every (sampled) parameter coordinate against central differences at the
standard step of 1e-4 in double precision.
"""

from __future__ import annotations

import numpy as np

from .losses import LossWeights
from .lightfield import LightFieldConfig, LightFieldNet
from .mathutil import logit
from .optim import GradCheckReport, grad_check
from .renderer import RenderConfig, rasterize, rasterize_backward
from .scene import Camera, EnvironmentMap, FrameBuffers, GaussianSet, \
    ROLE_REFLECTION
from .shading import (ShadingInputs, compose, compose_vjp,
                      deferred_reflection, deferred_reflection_backward,
                      env_colors_backward, env_colors_for_set)
from .trainer import color_loss_and_grad, normal_consistency_terms

GRAD_TOL = 1e-4
FD_STEP = 1e-4


def _tiny_camera(width=8, height=8):
    return Camera.look_at([0.25, -0.15, -3.3], [0.0, 0.0, 0.0],
                          up=(0.0, 1.0, 0.0), fx=13.0, fy=13.0,
                          cx=width / 2.0, cy=height / 2.0,
                          width=width, height=height)


def _tiny_set(n=6, seed=11, role=ROLE_REFLECTION):
    rng = np.random.default_rng(seed)
    tu = rng.normal(size=(n, 3))
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = rng.normal(size=(n, 3))
    tv -= np.sum(tv * tu, axis=1, keepdims=True) * tu
    tv /= np.linalg.norm(tv, axis=1, keepdims=True)
    kwargs = {}
    if role == ROLE_REFLECTION:
        kwargs = {"fresnel_logit": logit(rng.uniform(0.1, 0.6, (n, 3))),
                  "reflectivity_logit": logit(rng.uniform(0.2, 0.7, n))}
    return GaussianSet(
        centers=rng.normal(0.0, 0.45, (n, 3)),
        tangent_u=tu, tangent_v=tv,
        log_scales=np.log(rng.uniform(0.35, 0.8, (n, 2))),
        opacity_logit=logit(rng.uniform(0.3, 0.8, n)),
        sh_coeffs=rng.normal(0.0, 0.12, (n, 4, 3)),
        role=role, **kwargs)


def _set_params(gset):
    params = {"centers": gset.centers, "tangent_u": gset.tangent_u,
              "tangent_v": gset.tangent_v, "log_scales": gset.log_scales,
              "opacity_logit": gset.opacity_logit,
              "sh_coeffs": gset.sh_coeffs}
    if gset.role == ROLE_REFLECTION:
        params["fresnel_logit"] = gset.fresnel_logit
        params["reflectivity_logit"] = gset.reflectivity_logit
    return params


def _grads_from(pg, gset):
    out = {"centers": pg.centers, "tangent_u": pg.tangent_u,
           "tangent_v": pg.tangent_v, "log_scales": pg.log_scales,
           "opacity_logit": pg.opacity_logit, "sh_coeffs": pg.sh_coeffs}
    if gset.role == ROLE_REFLECTION:
        out["fresnel_logit"] = pg.fresnel_logit
        out["reflectivity_logit"] = pg.reflectivity_logit
    return out


def suite_rasterizer(max_coords=24) -> GradCheckReport:
    """Every disk parameter through a random linear functional of every
    rendered buffer."""
    gset = _tiny_set()
    cam = _tiny_camera()
    cfg = RenderConfig(background_color=(0.15, 0.3, 0.45))
    rng = np.random.default_rng(23)
    probe = FrameBuffers.zeros(cam.height, cam.width)
    for name in ("color", "alpha", "depth", "normal", "reflectivity",
                 "fresnel0", "position"):
        setattr(probe, name, rng.normal(size=getattr(probe, name).shape))

    def loss_and_grads():
        buf = rasterize(gset, cam, cfg)
        loss = sum(float(np.sum(getattr(buf, n) * getattr(probe, n)))
                   for n in ("color", "alpha", "depth", "normal",
                             "reflectivity", "fresnel0", "position"))
        pg = rasterize_backward(gset, cam, cfg, probe)
        return loss, _grads_from(pg, gset)

    return grad_check(loss_and_grads, _set_params(gset), step=FD_STEP,
                      max_coords_per_param=max_coords,
                      rng=np.random.default_rng(1))


def suite_shading(max_coords=24) -> GradCheckReport:
    """Deferred shading inputs and the per-disk environment color path."""
    rng = np.random.default_rng(31)
    h = w = 8
    cam = _tiny_camera()
    field = LightFieldNet(
        LightFieldConfig(hidden_dim=10, depth=3, enc_levels_pos=3,
                         enc_levels_dir=3),
        [-2.0, -2.0, -2.0], [2.0, 2.0, 2.0], seed=3)

    scat = rng.uniform(0.1, 0.9, (h, w, 3))
    refl_unused = np.zeros((h, w, 3))
    reflectivity = rng.uniform(0.05, 0.9, (h, w))
    fresnel0 = rng.uniform(0.1, 0.9, (h, w, 3))
    normal = rng.normal(size=(h, w, 3))
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    normal *= rng.uniform(0.6, 1.0, (h, w, 1))   # blended normals shrink
    position = rng.normal(0.0, 0.8, (h, w, 3))
    alpha = rng.uniform(0.55, 1.0, (h, w))
    gt = rng.uniform(0.0, 1.0, (h, w, 3))
    weights = LossWeights()

    def loss_and_grads():
        inputs = ShadingInputs(scat_color=scat, refl_color=refl_unused,
                               reflectivity=reflectivity, fresnel0=fresnel0,
                               normal=normal, position=position,
                               alpha=alpha, camera=cam)
        i_refl, cache = deferred_reflection(inputs, field, want_cache=True)
        composed = compose(scat, i_refl, reflectivity)
        l_c, l_hf, d_comp = color_loss_and_grad(composed, gt, weights)
        d_scat, d_refl, d_r = compose_vjp(scat, i_refl, reflectivity, d_comp)
        bufg, _ = deferred_reflection_backward(inputs, field, d_refl, cache)
        loss = l_c + weights.lambda_hf * l_hf
        return loss, {"scat": d_scat, "reflectivity": d_r,
                      "fresnel0": bufg["fresnel0"],
                      "normal": bufg["normal"],
                      "position": bufg["position"]}

    report = grad_check(
        loss_and_grads,
        {"scat": scat, "reflectivity": reflectivity, "fresnel0": fresnel0,
         "normal": normal, "position": position},
        step=FD_STEP, max_coords_per_param=max_coords,
        rng=np.random.default_rng(2))

    # per-disk environment reflection colors
    gset = _tiny_set(n=5, seed=17)
    env = EnvironmentMap(np.abs(rng.normal(0.4, 0.2, (8, 16, 3))) + 0.05)
    probe = rng.normal(size=(5, 3))

    def env_loss_and_grads():
        colors, cache = env_colors_for_set(gset, env, cam, want_cache=True)
        loss = float(np.sum(colors * probe))
        g_tex, g_f, g_cen, g_tu, g_tv = env_colors_backward(
            gset, env, cam, probe, cache)
        return loss, {"texels": g_tex, "fresnel_logit": g_f,
                      "centers": g_cen, "tangent_u": g_tu, "tangent_v": g_tv}

    env_report = grad_check(
        env_loss_and_grads,
        {"texels": env.texels, "fresnel_logit": gset.fresnel_logit,
         "centers": gset.centers, "tangent_u": gset.tangent_u,
         "tangent_v": gset.tangent_v},
        step=FD_STEP, max_coords_per_param=max_coords,
        rng=np.random.default_rng(3))

    for key, val in env_report.per_param.items():
        report.per_param[f"env.{key}"] = val
    report.n_checked += env_report.n_checked
    if env_report.max_rel_err > report.max_rel_err:
        report.max_rel_err = env_report.max_rel_err
        report.worst_param = f"env.{env_report.worst_param}"
        report.worst_index = env_report.worst_index
    return report


def suite_field(max_coords=40) -> GradCheckReport:
    """Light-field weights and both encoded inputs."""
    rng = np.random.default_rng(41)
    net = LightFieldNet(
        LightFieldConfig(hidden_dim=8, depth=3, enc_levels_pos=2,
                         enc_levels_dir=2),
        [-1.0, -1.0, -1.0], [1.0, 1.0, 1.0], seed=5)
    x = rng.uniform(-0.9, 0.9, (6, 3))
    d = rng.normal(size=(6, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    probe = rng.normal(size=(6, 3))

    def loss_and_grads():
        rgb = net.forward(x, d)
        loss = float(np.sum(rgb * probe))
        w_grads, gx, gd = net.backward(probe)
        return loss, {**w_grads, "x": gx, "dirs": gd}

    params = dict(net.params())
    params["x"] = x
    params["dirs"] = d
    return grad_check(loss_and_grads, params, step=FD_STEP,
                      max_coords_per_param=max_coords,
                      rng=np.random.default_rng(4))


def suite_losses(max_coords=40) -> GradCheckReport:
    """Photometric + high-frequency + normal-consistency gradients."""
    rng = np.random.default_rng(53)
    h = w = 8
    pred = rng.uniform(0.1, 0.9, (h, w, 3))
    gt = rng.uniform(0.1, 0.9, (h, w, 3))
    weights = LossWeights()

    def color_fn():
        l_c, l_hf, d = color_loss_and_grad(pred, gt, weights)
        return l_c + weights.lambda_hf * l_hf, {"pred": d}

    report = grad_check(color_fn, {"pred": pred}, step=FD_STEP,
                        max_coords_per_param=max_coords,
                        rng=np.random.default_rng(5))

    from .losses import normal_loss, normal_loss_backward
    n1 = rng.normal(size=(h, w, 3))
    n1 /= np.linalg.norm(n1, axis=-1, keepdims=True)
    n2 = rng.normal(size=(h, w, 3))
    n2 /= np.linalg.norm(n2, axis=-1, keepdims=True)
    alpha = rng.uniform(0.0, 1.0, (h, w))

    def normal_fn():
        loss = normal_loss(n1, n2, alpha)
        g1, g2 = normal_loss_backward(n1, n2, alpha)
        return loss, {"n1": g1, "n2": g2}

    nrep = grad_check(normal_fn, {"n1": n1, "n2": n2}, step=FD_STEP,
                      max_coords_per_param=max_coords,
                      rng=np.random.default_rng(6))
    for key, val in nrep.per_param.items():
        report.per_param[f"normal.{key}"] = val
    report.n_checked += nrep.n_checked
    if nrep.max_rel_err > report.max_rel_err:
        report.max_rel_err = nrep.max_rel_err
        report.worst_param = f"normal.{nrep.worst_param}"
        report.worst_index = nrep.worst_index
    return report


def suite_pipeline(max_coords=10) -> GradCheckReport:
    """End-to-end render -> composed losses -> parameter gradients on a
    3-splat scene, exercising the same chain the trainer assembles."""
    gset = _tiny_set(n=3, seed=71)
    cam = _tiny_camera()
    cfg = RenderConfig(background_color=(0.2, 0.25, 0.3))
    rng = np.random.default_rng(73)
    gt = rng.uniform(0.0, 1.0, (cam.height, cam.width, 3))
    weights = LossWeights(lambda_n_scat=0.05, lambda_hf=0.1)

    def loss_and_grads():
        buf = rasterize(gset, cam, cfg)
        l_c, l_hf, d_color = color_loss_and_grad(buf.color, gt, weights)
        l_n, g_normal, g_depth, g_alpha = normal_consistency_terms(
            buf, cam, weights.lambda_n_scat)
        grad = FrameBuffers.zeros(cam.height, cam.width)
        grad.color = d_color
        if g_normal is not None:
            grad.normal = g_normal
            grad.depth = g_depth
            grad.alpha = g_alpha
        pg = rasterize_backward(gset, cam, cfg, grad)
        loss = l_c + weights.lambda_n_scat * l_n + weights.lambda_hf * l_hf
        return loss, _grads_from(pg, gset)

    return grad_check(loss_and_grads, _set_params(gset), step=FD_STEP,
                      max_coords_per_param=max_coords,
                      rng=np.random.default_rng(7))


SUITES = {
    "rasterizer": suite_rasterizer,
    "shading": suite_shading,
    "field": suite_field,
    "losses": suite_losses,
    "pipeline": suite_pipeline,
}


def run_suites(scope: str = "all"):
    """Run one named suite or all of them; returns {name: report}."""
    names = list(SUITES) if scope == "all" else [scope]
    return {name: SUITES[name]() for name in names}
