"""Three-stage training pipeline.

Stage 1 fits scattering disks to the multi-view images.  Stage 2 freezes
them, initializes reflection disks from the converged set, colors those
disks from a learnable environment map along per-disk mirror directions,
and supervises the composed image, so the photometric residual left by
stage 1 drives reflectivity and surface orientation.  Stage 3 freezes the
reflection geometry and jointly trains the scattering set, the reflection
attributes, and the reflection light field through deferred shading.

The trainer is deterministic under (seed, config): view order comes from
the owned RNG, densification is rule-based, and checkpoints capture every
piece of mutable state so a resumed run is bit-identical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, StagePlan, config_from_dict, config_to_dict
from .dataset_io import SceneDataset
from .errors import DivergenceDetected, EmptySet, InsufficientViews
from .lightfield import LightFieldNet
from .losses import (LossWeights, hf_loss, hf_loss_backward, mae_degrees,
                     normal_loss, normal_loss_backward, psnr, rgb_error_backward,
                     rgb_loss, ssim, total_loss)
from .mathutil import logit, normalize_rows, normalize_rows_vjp, sh_basis_size
from .optim import ParamGroup, ParamRegistry
from .renderer import (FrameBuffers, RenderConfig, depth_to_normal,
                       depth_to_normal_vjp, rasterize, rasterize_backward)
from .scene import (Camera, EnvironmentMap, GaussianSet, ROLE_REFLECTION,
                    ROLE_SCATTERING, make_reflection_attrs)
from .shading import (ShadingInputs, compose, compose_vjp,
                      deferred_reflection, deferred_reflection_backward,
                      env_colors_backward, env_colors_for_set)

_ALPHA_FLOOR = 1e-4

SCAT_TAGS = ("scat-geometry", "scat-appearance")
REFL_TAGS = ("refl-geometry", "refl-appearance")


def init_scatter_set(bounds_lo, bounds_hi, n_points: int, sh_degree: int,
                     init_opacity: float, rng: np.random.Generator) -> GaussianSet:
    """Random disks filling the scene bounds."""
    lo = np.asarray(bounds_lo, dtype=np.float64)
    hi = np.asarray(bounds_hi, dtype=np.float64)
    centers = rng.uniform(lo, hi, (n_points, 3))
    tu = rng.normal(size=(n_points, 3))
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = rng.normal(size=(n_points, 3))
    tv -= np.sum(tv * tu, axis=1, keepdims=True) * tu
    tv /= np.linalg.norm(tv, axis=1, keepdims=True)
    extent = float(np.mean(hi - lo))
    s0 = 0.9 * extent / np.sqrt(n_points)
    k = sh_basis_size(sh_degree)
    return GaussianSet(
        centers=centers, tangent_u=tu, tangent_v=tv,
        log_scales=np.full((n_points, 2), np.log(s0)),
        opacity_logit=np.full(n_points, logit(init_opacity)),
        sh_coeffs=np.zeros((n_points, k, 3)),
        role=ROLE_SCATTERING)


def init_reflection_set(scat: GaussianSet, fresnel_init=0.04,
                        reflectivity_init=0.1) -> GaussianSet:
    """Copy the converged scattering disks and attach reflection attributes."""
    if len(scat) == 0:
        raise EmptySet("cannot initialize reflections from an empty set")
    f_logit, r_logit = make_reflection_attrs(len(scat), fresnel_init,
                                             reflectivity_init)
    return GaussianSet(
        centers=scat.centers.copy(), tangent_u=scat.tangent_u.copy(),
        tangent_v=scat.tangent_v.copy(), log_scales=scat.log_scales.copy(),
        opacity_logit=scat.opacity_logit.copy(),
        sh_coeffs=scat.sh_coeffs.copy(), role=ROLE_REFLECTION,
        fresnel_logit=f_logit, reflectivity_logit=r_logit)


def compute_residuals(dataset: SceneDataset, scat: GaussianSet,
                      cfg: RenderConfig, threads: int = 1,
                      out_dir: Optional[str] = None):
    """Per-view photometric residual gt - rendered scattering color."""
    residuals = []
    for cam, img in zip(dataset.cameras, dataset.images):
        buf = rasterize(scat, cam, cfg, threads=threads)
        residuals.append(np.asarray(img, dtype=np.float64) - buf.color)
    if out_dir is not None:
        path = Path(out_dir) / "residuals.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, **{f"view_{i:04d}": r for i, r in enumerate(residuals)})
    return residuals


def densify_and_prune(gset: GaussianSet, mean_grads, plan: StagePlan,
                      extent: float):
    """Adaptive density control: split large high-gradient disks, clone
    small ones, prune transparent ones.

    Returns (new_set, keep_idx) where keep_idx lists the surviving
    original rows (split parents are replaced by their children, which,
    like clones, start with fresh optimizer state).
    """
    n = len(gset)
    opacity = gset.opacities
    max_scale = np.max(gset.scales, axis=1)
    prune = (opacity < plan.prune_opacity) \
        | (max_scale > plan.size_prune_frac * extent)
    if gset.role == ROLE_REFLECTION and plan.reflectivity_prune > 0.0:
        # a reflection disk whose reflectivity has died contributes
        # nothing to the composition; removing it keeps the reflection
        # set (and its rendered normals) on the reflective surfaces
        r_prune = prune | (gset.reflectivity < plan.reflectivity_prune)
        if np.count_nonzero(~r_prune) >= 16:
            prune = r_prune
    alive = ~prune
    over_idx = np.flatnonzero((mean_grads > plan.densify_grad_threshold)
                              & alive)
    # each selected disk adds exactly one row; respect the disk budget,
    # preferring the strongest gradients
    budget = plan.max_disks - int(np.count_nonzero(alive))
    if over_idx.size > max(budget, 0):
        order = np.argsort(mean_grads[over_idx])[::-1]
        over_idx = over_idx[order[:max(budget, 0)]]
    over = np.zeros(n, dtype=bool)
    over[over_idx] = True
    big = max_scale > plan.densify_scale_frac * extent
    split = over & big
    clone = over & ~big

    keep_idx = np.flatnonzero(alive & ~split)
    split_idx = np.flatnonzero(split)
    clone_idx = np.flatnonzero(clone)

    def parts(arr, transform=None):
        kept = arr[keep_idx]
        news = []
        if split_idx.size:
            for sign in (1.0, -1.0):
                child = arr[split_idx].copy()
                if transform is not None:
                    child = transform(child, split_idx, sign)
                news.append(child)
        if clone_idx.size:
            news.append(arr[clone_idx].copy())
        if news:
            return np.concatenate([kept] + news, axis=0)
        return kept.copy()

    major = np.argmax(gset.scales, axis=1)

    def move_center(child, idx, sign):
        axis = np.where(major[idx, None] == 0, gset.tangent_u[idx],
                        gset.tangent_v[idx])
        step = gset.scales[idx, major[idx]]
        return child + sign * 0.5 * step[:, None] * axis

    def shrink(child, idx, sign):
        return child - np.log(plan.split_scale_factor)

    kwargs = {}
    if gset.role == ROLE_REFLECTION:
        kwargs["fresnel_logit"] = parts(gset.fresnel_logit)
        kwargs["reflectivity_logit"] = parts(gset.reflectivity_logit)
    new_set = GaussianSet(
        centers=parts(gset.centers, move_center),
        tangent_u=parts(gset.tangent_u),
        tangent_v=parts(gset.tangent_v),
        log_scales=parts(gset.log_scales, shrink),
        opacity_logit=parts(gset.opacity_logit),
        sh_coeffs=parts(gset.sh_coeffs),
        role=gset.role, **kwargs)
    return new_set, keep_idx


_SET_PARAM_FIELDS = (
    ("centers", "geometry", "position"),
    ("tangent_u", "geometry", "tangent"),
    ("tangent_v", "geometry", "tangent"),
    ("log_scales", "geometry", "log_scale"),
    ("opacity_logit", "geometry", "opacity"),
    ("sh_coeffs", "appearance", "sh"),
)


def color_loss_and_grad(composed, gt, weights: LossWeights):
    """Photometric + high-frequency loss with the gradient on the image.

    Returns (l_color, l_hf, d_composed); the high-frequency selection is
    folded into the upstream per-pixel weights before the shared backward.
    """
    l_c, e = rgb_loss(composed, gt, weights.lambda_dssim)
    h, w = e.shape
    grad_e = np.full((h, w), 1.0 / (h * w))
    l_hf = 0.0
    if weights.lambda_hf > 0.0:
        valid = np.ones((h, w), dtype=bool)
        l_hf = hf_loss(e, valid, weights.hf_percentile, weights.epsilon)
        grad_e = grad_e + weights.lambda_hf * hf_loss_backward(
            e, valid, weights.hf_percentile, weights.epsilon)
    d_comp = rgb_error_backward(composed, gt, weights.lambda_dssim, grad_e)
    return l_c, l_hf, d_comp


def normal_consistency_terms(buf: FrameBuffers, cam: Camera, lam: float):
    """Normal consistency between blended normals and depth-derived ones.

    The depth buffer is coverage-normalized before unprojection.  Returns
    (loss, grad normal buffer, grad depth buffer, grad alpha buffer); the
    gradients are None when lam == 0.
    """
    alpha = buf.alpha
    nraw = buf.normal
    nblend = normalize_rows(nraw)
    af = np.maximum(alpha, _ALPHA_FLOOR)
    zmean = buf.depth / af
    ndepth = depth_to_normal(zmean, alpha, cam)
    l_n = normal_loss(nblend, ndepth, alpha)
    if lam <= 0.0:
        return l_n, None, None, None
    g_blend, g_depthn = normal_loss_backward(nblend, ndepth, alpha)
    g_normal = normalize_rows_vjp(nraw, lam * g_blend)
    gz = depth_to_normal_vjp(zmean, alpha, cam, lam * g_depthn)
    g_depth = gz / af
    g_alpha = np.where(alpha > _ALPHA_FLOOR,
                       -gz * buf.depth / (af * af), 0.0)
    return l_n, g_normal, g_depth, g_alpha


class Trainer:
    """Owns the scene state and drives the staged optimization."""

    def __init__(self, dataset: SceneDataset, config: RunConfig,
                 out_dir: Optional[str] = None, _defer_init: bool = False):
        if len(dataset) < 2:
            raise InsufficientViews(
                f"training needs at least 2 views, got {len(dataset)}")
        self.dataset = dataset
        self.config = config
        self.out_dir = Path(out_dir) if out_dir else None
        self.rng = np.random.default_rng(config.seed)
        self.stage = 1
        self.it = 0
        self.log_rows = []
        self.refl: Optional[GaussianSet] = None
        self.field: Optional[LightFieldNet] = None
        self._scat_frozen = None          # cached stage-2 renders, derived
        self._grad_accum = {}
        self._grad_count = {}
        if not _defer_init:
            m = config.model
            self.scat = init_scatter_set(
                dataset.bounds_lo, dataset.bounds_hi, m.init_points,
                m.sh_degree, m.init_opacity, self.rng)
            self.env = EnvironmentMap.constant(m.env_height, 0.5)
            self._reset_grad_stats("scat")
            self.registry = self._build_registry()
            self._apply_stage_freezing()

    # ---- registry wiring ------------------------------------------------
    def _set_groups(self, prefix: str, gset: GaussianSet):
        r = self.config.rates
        lr_by_kind = {"position": r.position, "tangent": r.tangent,
                      "log_scale": r.log_scale, "opacity": r.opacity,
                      "sh": r.sh}
        groups = []
        total_iters = (self.config.plan.stage1_iters
                       + self.config.plan.stage3_iters)
        for field_name, tag_suffix, kind in _SET_PARAM_FIELDS:
            kwargs = {}
            if kind == "position":
                kwargs = {"lr_final": r.position * r.position_final_frac,
                          "lr_decay_steps": max(total_iters, 1)}
            groups.append(ParamGroup(
                f"{prefix}.{field_name}", getattr(gset, field_name),
                lr_by_kind[kind], f"{prefix}-{tag_suffix}", **kwargs))
        if gset.role == ROLE_REFLECTION:
            groups.append(ParamGroup(f"{prefix}.fresnel_logit",
                                     gset.fresnel_logit, r.refl_attr,
                                     "refl-attrs"))
            groups.append(ParamGroup(f"{prefix}.reflectivity_logit",
                                     gset.reflectivity_logit, r.refl_attr,
                                     "refl-attrs"))
        return groups

    def _build_registry(self) -> ParamRegistry:
        reg = ParamRegistry()
        for g in self._set_groups("scat", self.scat):
            reg.add(g)
        if self.refl is not None:
            for g in self._set_groups("refl", self.refl):
                reg.add(g)
        reg.add(ParamGroup("env.texels", self.env.texels,
                           self.config.rates.env, "env-map"))
        if self.field is not None:
            for name, arr in self.field.params().items():
                reg.add(ParamGroup(f"field.{name}", arr,
                                   self.config.rates.field, "light-field"))
        return reg

    def _frozen_tags(self):
        plan = self.config.plan
        if self.stage == 1:
            return {"refl-geometry", "refl-appearance", "refl-attrs",
                    "env-map", "light-field"}
        if self.stage == 2:
            return {"scat-geometry", "scat-appearance", "light-field"}
        tags = {"refl-geometry", "refl-appearance"}
        if plan.stage3_reflection_model == "field":
            if not plan.env_trainable_stage3:
                tags.add("env-map")
        else:
            tags.add("light-field")
        return tags

    def _apply_stage_freezing(self):
        self.registry.set_frozen_tags(self._frozen_tags())

    def _reset_grad_stats(self, name: str):
        gset = self.scat if name == "scat" else self.refl
        self._grad_accum[name] = np.zeros(len(gset))
        self._grad_count[name] = np.zeros(len(gset))

    # ---- stage progression ----------------------------------------------
    @property
    def done(self) -> bool:
        return self.stage > 3

    def run(self, max_steps: Optional[int] = None):
        """Advance until finished (or max_steps iterations)."""
        steps = 0
        while not self.done:
            if self.it >= self.config.plan.stage_iters(self.stage):
                self._advance_stage()
                continue
            if max_steps is not None and steps >= max_steps:
                return self
            self.step()
            steps += 1
        return self

    def stage1_fit(self):
        """Run the scattering fit to the end of stage 1."""
        while self.stage == 1 and not self.done:
            if self.it >= self.config.plan.stage1_iters:
                self._advance_stage()
                break
            self.step()
        return self.scat

    def stage2_fit(self):
        while self.stage <= 2 and not self.done:
            if self.it >= self.config.plan.stage_iters(self.stage):
                self._advance_stage()
                if self.stage > 2:
                    break
                continue
            self.step()
        return self.refl, self.env

    def stage3_fit(self):
        self.run()
        return self.scat, self.refl, self.field

    def _advance_stage(self):
        if self.stage == 1:
            residual_dir = str(self.out_dir) if self.out_dir else None
            self.residual_stats = self._residual_summary(residual_dir)
            m = self.config.model
            self.refl = init_reflection_set(self.scat, m.fresnel_init,
                                            m.reflectivity_init)
            self._reset_grad_stats("refl")
            self.registry = self._build_registry()
            self.stage = 2
        elif self.stage == 2:
            if self.config.plan.stage3_iters > 0:
                self._build_field()
            self.registry = self._build_registry()
            self.stage = 3
        else:
            self.stage = 4
        self.it = 0
        self._scat_frozen = None
        self._apply_stage_freezing()
        if self.config.checkpoint_each_stage and self.out_dir and not self.done:
            self.save(self.out_dir / f"stage{self.stage - 1}.ckpt.npz")

    def _residual_summary(self, out_dir):
        residuals = compute_residuals(self.dataset, self.scat,
                                      self.config.render,
                                      threads=self.config.threads,
                                      out_dir=out_dir)
        return {"mean_abs": float(np.mean([np.mean(np.abs(r))
                                           for r in residuals]))}

    def _build_field(self):
        lo = self.refl.centers.min(axis=0)
        hi = self.refl.centers.max(axis=0)
        pad = np.maximum(0.05 * (hi - lo), 1e-3)
        self.field = LightFieldNet(self.config.field, lo - pad, hi + pad,
                                   seed=self.config.seed + 7)

    # ---- shared loss plumbing -------------------------------------------
    def _color_grad(self, composed, gt, weights: LossWeights):
        return color_loss_and_grad(composed, gt, weights)

    def _normal_consistency(self, buf: FrameBuffers, cam: Camera, lam: float):
        return normal_consistency_terms(buf, cam, lam)

    def _pick_view(self) -> int:
        return int(self.rng.integers(len(self.dataset)))

    def _gt(self, v: int):
        return np.asarray(self.dataset.images[v], dtype=np.float64)

    def _refl_render_cfg(self) -> RenderConfig:
        return replace(self.config.render, background_color=(0.0, 0.0, 0.0))

    # ---- stage steps ------------------------------------------------------
    def step(self):
        if self.stage == 1:
            losses = self._step_stage1()
        elif self.stage == 2:
            losses = self._step_stage2()
        else:
            losses = self._step_stage3()
        if not np.isfinite(losses["total"]):
            raise DivergenceDetected(
                f"stage {self.stage} iteration {self.it}: loss "
                f"{losses['total']}")
        self.it += 1
        if self.config.log_every and (self.it % self.config.log_every == 0
                                      or self.it == 1):
            self.log_rows.append({"stage": self.stage, "iter": self.it,
                                  **{k: float(v) for k, v in losses.items()}})
        if (self.config.dump_every and self.out_dir
                and self.it % self.config.dump_every == 0):
            self._dump_images(f"s{self.stage}_it{self.it:05d}")

    def _active_sh_degree(self) -> int:
        """SH bands unlock gradually so early fits cannot bake
        view-dependent appearance into the color model."""
        ramp = self.config.model.sh_ramp_interval
        if self.stage != 1 or ramp <= 0:
            return self.config.model.sh_degree
        return min(self.it // ramp, self.config.model.sh_degree)

    def _step_stage1(self):
        v = self._pick_view()
        cam = self.dataset.cameras[v]
        gt = self._gt(v)
        w = self.config.weights
        deg = self._active_sh_degree()
        buf, cache = rasterize(self.scat, cam, self.config.render,
                               threads=self.config.threads, return_cache=True,
                               active_sh_degree=deg)
        l_c, l_hf, d_color = self._color_grad(buf.color, gt, w)
        l_n, g_normal, g_depth, g_alpha = self._normal_consistency(
            buf, cam, w.lambda_n_scat)
        grad = FrameBuffers.zeros(cam.height, cam.width)
        grad.color = d_color
        if g_normal is not None:
            grad.normal = g_normal
            grad.depth = g_depth
            grad.alpha = g_alpha
        pg = rasterize_backward(self.scat, cam, self.config.render, grad,
                                cache=cache, active_sh_degree=deg)
        self._step_set("scat", pg)
        self._maybe_densify("scat")
        self._maybe_reset_opacity("scat")
        total = total_loss(l_c, 0.0, l_n, l_hf, w)
        return {"total": total, "color": l_c, "normal_scat": l_n, "hf": l_hf}

    def _ensure_scat_frozen(self):
        if self._scat_frozen is None:
            self._scat_frozen = [
                rasterize(self.scat, cam, self.config.render,
                          threads=self.config.threads).color
                for cam in self.dataset.cameras]

    def _step_stage2(self):
        self._ensure_scat_frozen()
        v = self._pick_view()
        cam = self.dataset.cameras[v]
        gt = self._gt(v)
        w = self.config.weights
        cfg_refl = self._refl_render_cfg()

        colors, ccache = env_colors_for_set(self.refl, self.env, cam,
                                            want_cache=True)
        buf, cache = rasterize(self.refl, cam, cfg_refl, colors=colors,
                               threads=self.config.threads, return_cache=True)
        i_scat = self._scat_frozen[v]
        composed = compose(i_scat, buf.color, buf.reflectivity)

        l_c, l_hf, d_comp = self._color_grad(composed, gt, w)
        _, d_refl, d_r = compose_vjp(i_scat, buf.color, buf.reflectivity,
                                     d_comp)
        l_n, g_normal, g_depth, g_alpha = self._normal_consistency(
            buf, cam, w.lambda_n_refl)
        grad = FrameBuffers.zeros(cam.height, cam.width)
        grad.color = d_refl
        grad.reflectivity = d_r
        if g_normal is not None:
            grad.normal = g_normal
            grad.depth = g_depth
            grad.alpha = g_alpha
        pg = rasterize_backward(self.refl, cam, cfg_refl, grad,
                                colors=colors, cache=cache)
        g_tex, g_f, g_cen, g_tu, g_tv = env_colors_backward(
            self.refl, self.env, cam, pg.colors, ccache)
        pg.fresnel_logit += g_f
        pg.centers += g_cen
        pg.tangent_u += g_tu
        pg.tangent_v += g_tv
        self._step_set("refl", pg)
        self.registry.step({"env.texels": g_tex})
        np.clip(self.env.texels, 0.0, None, out=self.env.texels)
        if self.config.plan.densify_stage2:
            self._maybe_densify("refl")
        self._maybe_reset_opacity("refl")
        total = total_loss(l_c, l_n, 0.0, l_hf, w)
        return {"total": total, "color": l_c, "normal_refl": l_n, "hf": l_hf}

    def _step_stage3(self):
        v = self._pick_view()
        cam = self.dataset.cameras[v]
        gt = self._gt(v)
        w = self.config.weights
        plan = self.config.plan
        cfg_refl = self._refl_render_cfg()
        use_field = plan.stage3_reflection_model == "field"

        buf_s, cache_s = rasterize(self.scat, cam, self.config.render,
                                   threads=self.config.threads,
                                   return_cache=True)
        if use_field:
            colors = None
            ccache = None
        else:
            colors, ccache = env_colors_for_set(self.refl, self.env, cam,
                                                want_cache=True)
        buf_r, cache_r = rasterize(self.refl, cam, cfg_refl, colors=colors,
                                   threads=self.config.threads,
                                   return_cache=True)

        if use_field:
            inputs = ShadingInputs(
                scat_color=buf_s.color, refl_color=buf_r.color,
                reflectivity=buf_r.reflectivity, fresnel0=buf_r.fresnel0,
                normal=buf_r.normal, position=buf_r.position,
                alpha=buf_r.alpha, camera=cam)
            i_refl, shcache = deferred_reflection(inputs, self.field,
                                                  want_cache=True)
        else:
            i_refl = buf_r.color
        composed = compose(buf_s.color, i_refl, buf_r.reflectivity)

        l_c, l_hf, d_comp = self._color_grad(composed, gt, w)
        d_scat, d_refl, d_r = compose_vjp(buf_s.color, i_refl,
                                          buf_r.reflectivity, d_comp)
        l_n_scat, gs_normal, gs_depth, gs_alpha = self._normal_consistency(
            buf_s, cam, w.lambda_n_scat)
        # reflection geometry is frozen: value logged, no gradient path
        l_n_refl = self._normal_consistency(buf_r, cam, 0.0)[0]

        grad_s = FrameBuffers.zeros(cam.height, cam.width)
        grad_s.color = d_scat
        if gs_normal is not None:
            grad_s.normal = gs_normal
            grad_s.depth = gs_depth
            grad_s.alpha = gs_alpha
        pg_s = rasterize_backward(self.scat, cam, self.config.render, grad_s,
                                  cache=cache_s)
        self._step_set("scat", pg_s)

        grad_r = FrameBuffers.zeros(cam.height, cam.width)
        grad_r.reflectivity = d_r
        if use_field:
            buf_grads, field_grads = deferred_reflection_backward(
                inputs, self.field, d_refl, shcache)
            grad_r.fresnel0 = buf_grads["fresnel0"]
            grad_r.normal = buf_grads["normal"]
            grad_r.position = buf_grads["position"]
        else:
            grad_r.color = d_refl
        pg_r = rasterize_backward(self.refl, cam, cfg_refl, grad_r,
                                  colors=colors, cache=cache_r)
        if not use_field:
            g_tex, g_f, g_cen, g_tu, g_tv = env_colors_backward(
                self.refl, self.env, cam, pg_r.colors, ccache)
            pg_r.fresnel_logit += g_f
            pg_r.centers += g_cen
            pg_r.tangent_u += g_tu
            pg_r.tangent_v += g_tv
            self.registry.step({"env.texels": g_tex})
            np.clip(self.env.texels, 0.0, None, out=self.env.texels)
        self._step_set("refl", pg_r)
        if use_field:
            self.registry.step({f"field.{k}": g
                                for k, g in field_grads.items()})
        total = total_loss(l_c, l_n_refl, l_n_scat, l_hf, w)
        return {"total": total, "color": l_c, "normal_scat": l_n_scat,
                "normal_refl": l_n_refl, "hf": l_hf}

    def _step_set(self, prefix: str, pg):
        gset = self.scat if prefix == "scat" else self.refl
        grads = {f"{prefix}.centers": pg.centers,
                 f"{prefix}.tangent_u": pg.tangent_u,
                 f"{prefix}.tangent_v": pg.tangent_v,
                 f"{prefix}.log_scales": pg.log_scales,
                 f"{prefix}.opacity_logit": pg.opacity_logit}
        if pg.sh_coeffs is not None:
            grads[f"{prefix}.sh_coeffs"] = pg.sh_coeffs
        if pg.fresnel_logit is not None:
            grads[f"{prefix}.fresnel_logit"] = pg.fresnel_logit
            grads[f"{prefix}.reflectivity_logit"] = pg.reflectivity_logit
        self.registry.step(grads)
        if not self.registry.groups[f"{prefix}.tangent_u"].frozen:
            gset.orthonormalize_tangents()
        norms = np.linalg.norm(pg.centers, axis=1)
        self._grad_accum[prefix] += norms
        self._grad_count[prefix] += norms > 0

    def _maybe_reset_opacity(self, prefix: str):
        """Periodically clamp opacities down so disks must re-earn their
        contribution; disks nothing pulls back up fade and get pruned."""
        plan = self.config.plan
        interval = (plan.opacity_reset_interval if self.stage == 1
                    else plan.opacity_reset_interval_stage2)
        if interval <= 0:
            return
        it = self.it + 1
        stage_iters = plan.stage_iters(self.stage)
        if it % interval != 0 or it > plan.densify_until_frac * stage_iters:
            return
        gset = self.scat if prefix == "scat" else self.refl
        # just below the prune threshold: disks that regrow survive the
        # next densification pass, disks with no pull get removed there
        cap = logit(0.8 * plan.prune_opacity)
        np.minimum(gset.opacity_logit, cap, out=gset.opacity_logit)
        group = self.registry.groups[f"{prefix}.opacity_logit"]
        group.m[:] = 0.0
        group.v[:] = 0.0

    def _maybe_densify(self, prefix: str):
        plan = self.config.plan
        stage_iters = plan.stage_iters(self.stage)
        if plan.densify_interval <= 0:
            return
        it = self.it + 1
        if it % plan.densify_interval != 0:
            return
        if it > plan.densify_until_frac * stage_iters:
            return
        gset = self.scat if prefix == "scat" else self.refl
        frozen = self.registry.groups[f"{prefix}.centers"].frozen
        if frozen:
            return
        mean = self._grad_accum[prefix] / np.maximum(
            self._grad_count[prefix], 1.0)
        extent = float(np.mean(self.dataset.bounds_hi
                               - self.dataset.bounds_lo))
        if prefix == "refl" and it <= 0.3 * stage_iters:
            # reflectivity hasn't differentiated yet; hold the r-prune
            plan = replace(plan, reflectivity_prune=0.0)
        new_set, keep_idx = densify_and_prune(gset, mean, plan, extent)
        n_new = len(new_set) - keep_idx.size
        for field_name, _, _ in _SET_PARAM_FIELDS:
            group = self.registry.groups[f"{prefix}.{field_name}"]
            group.resize_rows(keep_idx, n_new)
            group.param = getattr(new_set, field_name)
        if new_set.role == ROLE_REFLECTION:
            for field_name in ("fresnel_logit", "reflectivity_logit"):
                group = self.registry.groups[f"{prefix}.{field_name}"]
                group.resize_rows(keep_idx, n_new)
                group.param = getattr(new_set, field_name)
        if prefix == "scat":
            self.scat = new_set
        else:
            self.refl = new_set
        self._reset_grad_stats(prefix)

    # ---- rendering / evaluation ------------------------------------------
    def render_view(self, cam: Camera):
        """Render every output image for one camera at the current state."""
        out = {}
        buf_s = rasterize(self.scat, cam, self.config.render,
                          threads=self.config.threads)
        out["scat"] = buf_s.color
        out["normal_scat"] = normalize_rows(buf_s.normal)
        out["alpha_scat"] = buf_s.alpha
        if self.refl is None:
            out["composed"] = buf_s.color
            return out
        cfg_refl = self._refl_render_cfg()
        use_field = (self.field is not None
                     and self.config.plan.stage3_reflection_model == "field")
        colors = None if use_field else env_colors_for_set(
            self.refl, self.env, cam)
        buf_r = rasterize(self.refl, cam, cfg_refl, colors=colors,
                          threads=self.config.threads)
        if use_field:
            inputs = ShadingInputs(
                scat_color=buf_s.color, refl_color=buf_r.color,
                reflectivity=buf_r.reflectivity, fresnel0=buf_r.fresnel0,
                normal=buf_r.normal, position=buf_r.position,
                alpha=buf_r.alpha, camera=cam)
            i_refl = deferred_reflection(inputs, self.field)
        else:
            i_refl = buf_r.color
        out["refl"] = i_refl
        out["reflectivity"] = buf_r.reflectivity
        out["normal_refl"] = normalize_rows(buf_r.normal)
        out["alpha_refl"] = buf_r.alpha
        out["composed"] = compose(buf_s.color, i_refl, buf_r.reflectivity)
        return out

    def evaluate(self, dataset: Optional[SceneDataset] = None):
        """PSNR/SSIM per view, plus MAE over the glass mask when ground
        truth normals exist (reflection normals once stage 2 has run,
        scattering normals before)."""
        ds = dataset if dataset is not None else self.dataset
        per_view = []
        for i, (cam, img) in enumerate(zip(ds.cameras, ds.images)):
            rendered = self.render_view(cam)
            gt = np.asarray(img, dtype=np.float64)
            row = {"view": i,
                   "psnr": psnr(rendered["composed"], gt),
                   "ssim": ssim(rendered["composed"], gt)}
            if ds.normals is not None and ds.masks is not None \
                    and np.any(ds.masks[i]):
                key = "normal_refl" if "normal_refl" in rendered \
                    else "normal_scat"
                row["mae_deg"] = mae_degrees(
                    rendered[key], np.asarray(ds.normals[i], dtype=np.float64),
                    ds.masks[i])
            per_view.append(row)
        agg = {"psnr": float(np.mean([r["psnr"] for r in per_view])),
               "ssim": float(np.mean([r["ssim"] for r in per_view]))}
        maes = [r["mae_deg"] for r in per_view if "mae_deg" in r]
        if maes:
            agg["mae_deg"] = float(np.mean(maes))
        return {"per_view": per_view, "aggregate": agg}

    def _dump_images(self, stem: str):
        from .image_io import write_png
        cam = self.dataset.cameras[0]
        rendered = self.render_view(cam)
        dump_dir = self.out_dir / "dumps"
        dump_dir.mkdir(parents=True, exist_ok=True)
        write_png(dump_dir / f"{stem}_composed.png", rendered["composed"])
        write_png(dump_dir / f"{stem}_scat.png", rendered["scat"])
        if "refl" in rendered:
            write_png(dump_dir / f"{stem}_refl.png", rendered["refl"])
            write_png(dump_dir / f"{stem}_R.png", rendered["reflectivity"])
        write_png(dump_dir / f"{stem}_normal.png",
                  0.5 * (rendered.get("normal_refl",
                                      rendered["normal_scat"]) + 1.0))

    def write_log(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if not self.log_rows:
            return
        keys = sorted({k for row in self.log_rows for k in row})
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.log_rows)

    # ---- checkpointing -----------------------------------------------------
    def _set_arrays(self, prefix: str, gset: GaussianSet):
        out = {f"{prefix}.{name}": getattr(gset, name)
               for name, _, _ in _SET_PARAM_FIELDS}
        if gset.role == ROLE_REFLECTION:
            out[f"{prefix}.fresnel_logit"] = gset.fresnel_logit
            out[f"{prefix}.reflectivity_logit"] = gset.reflectivity_logit
        return out

    def save(self, path):
        arrays = self._set_arrays("scat", self.scat)
        if self.refl is not None:
            arrays.update(self._set_arrays("refl", self.refl))
        arrays["env.texels"] = self.env.texels
        if self.field is not None:
            arrays.update({f"field.{k}": v
                           for k, v in self.field.state_arrays().items()})
        arrays.update(self.registry.state_arrays())
        for name in self._grad_accum:
            arrays[f"stats.{name}.accum"] = self._grad_accum[name]
            arrays[f"stats.{name}.count"] = self._grad_count[name]
        meta = {
            "config": config_to_dict(self.config),
            "stage": self.stage,
            "it": self.it,
            "rng_state": self.rng.bit_generator.state,
            "has_refl": self.refl is not None,
            "has_field": self.field is not None,
            "log_rows": self.log_rows,
        }
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path, dataset: SceneDataset, out_dir=None):
        arrays, meta = load_checkpoint(path)
        config = config_from_dict(meta["config"])
        trainer = cls(dataset, config, out_dir=out_dir, _defer_init=True)
        trainer.stage = int(meta["stage"])
        trainer.it = int(meta["it"])
        trainer.log_rows = list(meta.get("log_rows", []))

        def build_set(prefix, role):
            kwargs = {}
            if role == ROLE_REFLECTION:
                kwargs["fresnel_logit"] = arrays[f"{prefix}.fresnel_logit"]
                kwargs["reflectivity_logit"] = arrays[
                    f"{prefix}.reflectivity_logit"]
            return GaussianSet(
                centers=arrays[f"{prefix}.centers"],
                tangent_u=arrays[f"{prefix}.tangent_u"],
                tangent_v=arrays[f"{prefix}.tangent_v"],
                log_scales=arrays[f"{prefix}.log_scales"],
                opacity_logit=arrays[f"{prefix}.opacity_logit"],
                sh_coeffs=arrays[f"{prefix}.sh_coeffs"],
                role=role, **kwargs)

        trainer.scat = build_set("scat", ROLE_SCATTERING)
        if meta["has_refl"]:
            trainer.refl = build_set("refl", ROLE_REFLECTION)
        trainer.env = EnvironmentMap(arrays["env.texels"])
        if meta["has_field"]:
            trainer.field = LightFieldNet(
                config.field, arrays["field.bounds_lo"],
                arrays["field.bounds_hi"], seed=config.seed + 7)
            trainer.field.load_state_arrays(
                {k[len("field."):]: v for k, v in arrays.items()
                 if k.startswith("field.")})
        for name in ("scat", "refl"):
            if f"stats.{name}.accum" in arrays:
                trainer._grad_accum[name] = np.ascontiguousarray(
                    arrays[f"stats.{name}.accum"])
                trainer._grad_count[name] = np.ascontiguousarray(
                    arrays[f"stats.{name}.count"])
        trainer.registry = trainer._build_registry()
        trainer.registry.load_state_arrays(arrays)
        trainer.rng = np.random.default_rng()
        trainer.rng.bit_generator.state = meta["rng_state"]
        trainer._apply_stage_freezing()
        return trainer
