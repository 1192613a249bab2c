"""Deferred composition of scattering and reflection images.

The composed image is a per-pixel affine blend I = (1-R)*I_scat + R*I_refl.
During the residual-fitting stage the reflection image comes from
per-Gaussian environment lookups; in the final stage it is produced by
querying the reflection light field per pixel and applying a Schlick
Fresnel factor.  Every forward routine here has an explicit adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeMismatch, WrongSetRole
from .mathutil import normalize_rows, normalize_rows_vjp, sigmoid_grad
from .scene import Camera, EnvironmentMap, GaussianSet, ROLE_REFLECTION


@dataclass
class ShadingInputs:
    """Per-pixel buffers consumed by deferred reflection shading.

    alpha is the reflection pass coverage; pixels below the coverage
    threshold receive zero reflected radiance.
    """

    scat_color: np.ndarray      # (H, W, 3)
    refl_color: np.ndarray      # (H, W, 3), may be unused in field mode
    reflectivity: np.ndarray    # (H, W)
    fresnel0: np.ndarray        # (H, W, 3)
    normal: np.ndarray          # (H, W, 3) blended, length <= 1
    position: np.ndarray        # (H, W, 3) blended world hit points
    alpha: np.ndarray           # (H, W) reflection coverage
    camera: Camera

    def __post_init__(self):
        shape = self.scat_color.shape[:2]
        for name in ("refl_color", "reflectivity", "fresnel0", "normal",
                     "position", "alpha"):
            if getattr(self, name).shape[:2] != shape:
                raise ShapeMismatch(f"{name} resolution differs from scat_color")


def reflect_dir(view_dir, normal):
    """Mirror the viewing direction (camera->surface) about the normal."""
    view_dir = np.asarray(view_dir, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    d = np.sum(view_dir * normal, axis=-1, keepdims=True)
    return view_dir - 2.0 * d * normal


def reflect_dir_vjp(view_dir, normal, grad_out):
    """VJPs of reflect_dir w.r.t. (view_dir, normal)."""
    d = np.sum(view_dir * normal, axis=-1, keepdims=True)
    gd = np.sum(grad_out * normal, axis=-1, keepdims=True)
    g_view = grad_out - 2.0 * gd * normal
    g_normal = -2.0 * (d * grad_out + gd * view_dir)
    return g_view, g_normal


def fresnel_schlick(fresnel0, normal, view_dir):
    """Schlick reflectance F0 + (1-F0)*(1 - n.(-w_o))^5, componentwise.

    The cosine is clamped to [0, 1]; with a camera-facing normal the clamp
    only engages past grazing.
    """
    fresnel0 = np.asarray(fresnel0, dtype=np.float64)
    cos = np.clip(np.sum(np.asarray(normal) * (-np.asarray(view_dir)),
                         axis=-1, keepdims=True), 0.0, 1.0)
    return fresnel0 + (1.0 - fresnel0) * (1.0 - cos) ** 5


def fresnel_schlick_vjp(fresnel0, normal, view_dir, grad_out):
    """VJPs of fresnel_schlick w.r.t. (fresnel0, normal, view_dir)."""
    raw = np.sum(normal * (-view_dir), axis=-1, keepdims=True)
    cos = np.clip(raw, 0.0, 1.0)
    one_m = (1.0 - cos)
    g_f0 = grad_out * (1.0 - one_m ** 5)
    g_cos = np.sum(grad_out * (1.0 - fresnel0), axis=-1, keepdims=True) \
        * (-5.0) * one_m ** 4
    g_cos = np.where((raw > 0.0) & (raw < 1.0), g_cos, 0.0)
    g_normal = g_cos * (-view_dir)
    g_view = g_cos * (-normal)
    return g_f0, g_normal, g_view


def compose(scat, refl, reflectivity):
    """Blend transmitted and reflected radiance: (1-R)*scat + R*refl."""
    scat = np.asarray(scat, dtype=np.float64)
    refl = np.asarray(refl, dtype=np.float64)
    reflectivity = np.asarray(reflectivity, dtype=np.float64)
    if scat.shape != refl.shape or scat.shape[:-1] != reflectivity.shape:
        raise ShapeMismatch(
            f"compose shapes scat={scat.shape} refl={refl.shape} "
            f"R={reflectivity.shape}")
    R = reflectivity[..., None]
    return (1.0 - R) * scat + R * refl


def compose_vjp(scat, refl, reflectivity, grad_out):
    """VJPs of compose w.r.t. (scat, refl, reflectivity)."""
    R = reflectivity[..., None]
    g_scat = grad_out * (1.0 - R)
    g_refl = grad_out * R
    g_R = np.sum(grad_out * (refl - scat), axis=-1)
    return g_scat, g_refl, g_R


def deferred_reflection(inputs: ShadingInputs, net, alpha_threshold=0.5,
                        want_cache=False):
    """Reflected radiance per pixel from the reflection light field.

    For each covered pixel: the view direction runs camera->surface point,
    the blended normal is normalized, the mirrored direction and normalized
    position are fed to the field, and the result is modulated by the
    Schlick Fresnel factor.  Pixels below alpha_threshold are zero.
    """
    h, w = inputs.alpha.shape
    out = np.zeros((h, w, 3))
    n_len = np.linalg.norm(inputs.normal, axis=-1)
    mask = (inputs.alpha >= alpha_threshold) & (n_len > 1e-8)
    idx = np.flatnonzero(mask.reshape(-1))
    cache = {"mask": mask, "idx": idx}
    if idx.size == 0:
        return (out, cache) if want_cache else out

    pos = inputs.position.reshape(-1, 3)[idx]
    nrm_raw = inputs.normal.reshape(-1, 3)[idx]
    f0 = inputs.fresnel0.reshape(-1, 3)[idx]

    view_raw = pos - inputs.camera.position
    w_o = normalize_rows(view_raw)
    n_hat = normalize_rows(nrm_raw)
    w_r = reflect_dir(w_o, n_hat)
    x_norm = net.normalize_position(pos)
    rgb = net.forward(x_norm, w_r)
    F = fresnel_schlick(f0, n_hat, w_o)
    out.reshape(-1, 3)[idx] = F * rgb

    cache.update(pos=pos, nrm_raw=nrm_raw, f0=f0, view_raw=view_raw,
                 w_o=w_o, n_hat=n_hat, w_r=w_r, x_norm=x_norm, rgb=rgb, F=F)
    return (out, cache) if want_cache else out


def deferred_reflection_backward(inputs: ShadingInputs, net, grad_out,
                                 cache):
    """Adjoint of deferred_reflection.

    Returns (grad buffers dict with fresnel0/normal/position entries,
    field weight gradients).  The field's own backward consumes the cache
    stored by its forward pass.
    """
    h, w = inputs.alpha.shape
    g_f0_buf = np.zeros((h, w, 3))
    g_nrm_buf = np.zeros((h, w, 3))
    g_pos_buf = np.zeros((h, w, 3))
    idx = cache["idx"]
    if idx.size == 0:
        return ({"fresnel0": g_f0_buf, "normal": g_nrm_buf,
                 "position": g_pos_buf}, net.zero_grads())

    g = np.asarray(grad_out).reshape(-1, 3)[idx]
    F, rgb = cache["F"], cache["rgb"]
    g_F = g * rgb
    g_rgb = g * F

    w_grads, g_x_norm, g_w_r = net.backward(g_rgb)
    g_pos = net.normalize_position_vjp(cache["pos"], g_x_norm)

    g_f0, g_nhat_f, g_wo_f = fresnel_schlick_vjp(
        cache["f0"], cache["n_hat"], cache["w_o"], g_F)
    g_wo_r, g_nhat_r = reflect_dir_vjp(cache["w_o"], cache["n_hat"], g_w_r)
    g_nhat = g_nhat_f + g_nhat_r
    g_wo = g_wo_f + g_wo_r

    g_nrm = normalize_rows_vjp(cache["nrm_raw"], g_nhat)
    g_pos += normalize_rows_vjp(cache["view_raw"], g_wo)

    g_f0_buf.reshape(-1, 3)[idx] = g_f0
    g_nrm_buf.reshape(-1, 3)[idx] = g_nrm
    g_pos_buf.reshape(-1, 3)[idx] = g_pos
    return ({"fresnel0": g_f0_buf, "normal": g_nrm_buf,
             "position": g_pos_buf}, w_grads)


def _oriented_reflection_dirs(gset: GaussianSet, camera: Camera):
    """Per-disk camera-facing normals and mirror directions at the centers."""
    view_raw = gset.centers - camera.position
    w_o = normalize_rows(view_raw)
    nraw = gset.raw_normals()
    n_unit = normalize_rows(nraw)
    flip = np.where(np.sum(n_unit * w_o, axis=1) > 0.0, -1.0, 1.0)
    n_face = n_unit * flip[:, None]
    w_r = reflect_dir(w_o, n_face)
    return view_raw, w_o, nraw, n_unit, flip, n_face, w_r


def env_colors_for_set(gset: GaussianSet, env: EnvironmentMap,
                       camera: Camera, want_cache=False):
    """Per-Gaussian reflection color prior f0 * E(w_r) for a whole set.

    w_r mirrors the camera->center direction about the disk normal
    (oriented toward the camera).
    """
    if gset.role != ROLE_REFLECTION:
        raise WrongSetRole("environment reflection colors need a reflection set")
    view_raw, w_o, nraw, n_unit, flip, n_face, w_r = \
        _oriented_reflection_dirs(gset, camera)
    f0 = gset.fresnel0
    e = env.query(w_r)
    colors = f0 * e
    if not want_cache:
        return colors
    cache = dict(view_raw=view_raw, w_o=w_o, nraw=nraw, flip=flip,
                 n_face=n_face, w_r=w_r, f0=f0, e=e)
    return colors, cache


def env_colors_backward(gset: GaussianSet, env: EnvironmentMap,
                        camera: Camera, grad_colors, cache):
    """Adjoint of env_colors_for_set.

    Returns (env texel grads, fresnel logit grads, center grads,
    tangent_u grads, tangent_v grads).
    """
    g_f0 = grad_colors * cache["e"]
    g_e = grad_colors * cache["f0"]
    g_f_logit = g_f0 * sigmoid_grad(cache["f0"])

    g_tex, g_wr = env.query_backward(cache["w_r"], g_e)
    g_wo, g_nface = reflect_dir_vjp(cache["w_o"], cache["n_face"], g_wr)
    g_nunit = g_nface * cache["flip"][:, None]
    g_nraw = normalize_rows_vjp(cache["nraw"], g_nunit)
    g_tu = np.cross(gset.tangent_v, g_nraw)
    g_tv = np.cross(g_nraw, gset.tangent_u)
    g_centers = normalize_rows_vjp(cache["view_raw"], g_wo)
    return g_tex, g_f_logit, g_centers, g_tu, g_tv


def per_gaussian_env_color(disk_index: int, gset: GaussianSet,
                           env: EnvironmentMap, camera: Camera):
    """Reflection color prior for one disk (see env_colors_for_set)."""
    colors = env_colors_for_set(gset, env, camera)
    return colors[disk_index]
