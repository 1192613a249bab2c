"""Differentiable forward rasterization of Gaussian disk sets and its adjoint.

The rasterizer intersects per-pixel view rays with each disk's tangent
plane, evaluates a low-pass-floored Gaussian kernel at the local (u, v)
coordinate, sorts fragments per pixel by disk-center view depth, and
front-to-back alpha blends every attribute channel (color, normal, depth,
reflectivity, base reflectance, world intersection point).

Implementation notes:
  * Disks are processed struct-of-arrays; per-pixel fragment lists are one
    flat array segmented by pixel index, so blending and its adjoint are
    expressed as segmented scans (no per-pixel Python loops).
  * The image is processed in fixed 16-row bands regardless of thread
    count, so single-threaded and tile-parallel renders are bit-identical.
  * The backward pass recomputes the fragment lists from the scene unless
    the forward cache is supplied; all parameter gradients are exact
    adjoints of the forward arithmetic (validated by finite differences).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import MissingForwardState
from .mathutil import normalize_rows, normalize_rows_vjp, sh_basis, \
    sh_basis_grad, sh_basis_size, sigmoid, sigmoid_grad
from .scene import Camera, FrameBuffers, GaussianSet, ROLE_REFLECTION

BAND_ROWS = 16
# caps for numerically safe logs / divisions near fully opaque fragments
_LOG_ALPHA_CAP = 1.0 - 1e-15
_ONE_MINUS_A_FLOOR = 1e-9


@dataclass
class RenderConfig:
    near_clip: float = 0.05
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    background_color: tuple = (0.0, 0.0, 0.0)
    lowpass_sigma: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha_cutoff < 1.0:
            raise ValueError("alpha_cutoff must lie in (0, 1)")
        if not 0.0 < self.transmittance_floor < 1.0:
            raise ValueError("transmittance_floor must lie in (0, 1)")

    @property
    def background(self):
        return np.asarray(self.background_color, dtype=np.float64)


@dataclass
class SplatFragment:
    """One ray-disk hit: local coords, view depth, Gaussian kernel value."""

    gaussian_index: int
    local_uv: np.ndarray
    depth: float
    weight: float


def gaussian_weight(uv, screen_dist, cfg: RenderConfig) -> float:
    """Low-pass-floored kernel: max of the object-space Gaussian at (u, v)
    and a screen-space Gaussian of scale lowpass_sigma at screen_dist."""
    u, v = float(uv[0]), float(uv[1])
    g_obj = np.exp(-0.5 * (u * u + v * v))
    g_lp = np.exp(-0.5 * (screen_dist / cfg.lowpass_sigma) ** 2)
    return float(max(g_obj, g_lp))


def ray_splat_intersect(camera: Camera, pixel, disk, near_clip: float = 0.05,
                        gaussian_index: int = 0) -> Optional[SplatFragment]:
    """Intersect the ray through a continuous pixel coordinate with a disk.

    Returns None (a miss) when the ray is parallel to the disk plane or the
    hit lies at or before the near clip.  The returned (u, v, depth)
    satisfies the screen-space mapping (x*z, y*z, z, 1) = W @ H @ (u, v, 1, 1).
    """
    o = camera.position
    d = camera.pixel_ray_dirs(float(pixel[0]), float(pixel[1]))
    n = np.cross(np.asarray(disk.tangent_u, dtype=np.float64),
                 np.asarray(disk.tangent_v, dtype=np.float64))
    denom = float(d @ n)
    if abs(denom) < 1e-12 * max(1.0, float(np.linalg.norm(d) * np.linalg.norm(n))):
        return None
    center = np.asarray(disk.center, dtype=np.float64)
    tau = float((center - o) @ n) / denom
    if not np.isfinite(tau) or tau <= near_clip:
        return None
    delta = o + tau * d - center
    u = float(delta @ disk.tangent_u) / disk.scale_u
    v = float(delta @ disk.tangent_v) / disk.scale_v
    weight = float(np.exp(-0.5 * (u * u + v * v)))
    return SplatFragment(gaussian_index=gaussian_index,
                         local_uv=np.array([u, v]), depth=tau, weight=weight)


class _Prep:
    """Per-disk quantities shared by every band of one render."""

    __slots__ = ("origin", "rotation", "visible", "zc", "nraw", "n_render",
                 "flip", "colors", "clamp_mask", "view_vec", "alpha", "scales",
                 "proj", "r_act", "f0_act", "x0", "x1", "y0", "y1",
                 "colors_override", "plane_num", "lin_d", "lin_u", "lin_v",
                 "e_u", "e_v", "r2_obj", "r2_lp", "depth_rank",
                 "active_sh_degree")


class RasterCache:
    """Forward state reused by rasterize_backward (scene-shaped)."""

    def __init__(self, prep, bands, n_disks, height, width, has_override):
        self.prep = prep
        self.bands = bands
        self.n_disks = n_disks
        self.height = height
        self.width = width
        self.has_override = has_override

    def matches(self, gset, camera, colors):
        return (self.n_disks == len(gset)
                and self.height == camera.height
                and self.width == camera.width
                and self.has_override == (colors is not None))


@dataclass
class GaussianSetGrads:
    """Parameter gradients shaped like the GaussianSet arrays.

    ``colors`` is populated instead of ``sh_coeffs`` when the rasterization
    used an externally supplied per-disk color table.
    """

    centers: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    log_scales: np.ndarray
    opacity_logit: np.ndarray
    sh_coeffs: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    fresnel_logit: Optional[np.ndarray] = None
    reflectivity_logit: Optional[np.ndarray] = None

    @classmethod
    def zeros_for(cls, gset: GaussianSet, colors_override: bool):
        n = len(gset)
        g = cls(
            centers=np.zeros((n, 3)),
            tangent_u=np.zeros((n, 3)),
            tangent_v=np.zeros((n, 3)),
            log_scales=np.zeros((n, 2)),
            opacity_logit=np.zeros(n),
        )
        if colors_override:
            g.colors = np.zeros((n, 3))
        else:
            g.sh_coeffs = np.zeros_like(gset.sh_coeffs)
        if gset.role == ROLE_REFLECTION:
            g.fresnel_logit = np.zeros((n, 3))
            g.reflectivity_logit = np.zeros(n)
        return g

    def add_(self, other):
        for name in ("centers", "tangent_u", "tangent_v", "log_scales",
                     "opacity_logit", "sh_coeffs", "colors",
                     "fresnel_logit", "reflectivity_logit"):
            mine = getattr(self, name)
            theirs = getattr(other, name)
            if mine is not None and theirs is not None:
                mine += theirs
        return self


def _prepare(gset: GaussianSet, camera: Camera, cfg: RenderConfig,
             colors_override, active_sh_degree=None) -> _Prep:
    p = _Prep()
    p.origin = camera.position
    p.rotation = camera.rotation
    p.colors_override = colors_override is not None
    p.active_sh_degree = gset.sh_degree if active_sh_degree is None \
        else min(active_sh_degree, gset.sh_degree)
    n = len(gset)

    centers_cam = gset.centers @ camera.rotation.T + camera.translation
    p.zc = centers_cam[:, 2]
    p.visible = p.zc > cfg.near_clip

    p.nraw = gset.raw_normals()
    nunit = normalize_rows(p.nraw)
    p.view_vec = gset.centers - p.origin
    facing_away = np.sum(nunit * p.view_vec, axis=1) > 0.0
    p.flip = np.where(facing_away, -1.0, 1.0)
    p.n_render = nunit * p.flip[:, None]

    if colors_override is not None:
        p.colors = np.asarray(colors_override, dtype=np.float64)
        p.clamp_mask = None
    else:
        wdir = normalize_rows(p.view_vec)
        k_act = sh_basis_size(p.active_sh_degree)
        basis = sh_basis(wdir, p.active_sh_degree)
        pre = np.einsum("nk,nkc->nc", basis,
                        gset.sh_coeffs[:, :k_act]) + 0.5
        p.clamp_mask = pre > 0.0
        p.colors = np.maximum(pre, 0.0)

    p.alpha = gset.opacities
    p.scales = gset.scales
    if gset.role == ROLE_REFLECTION:
        p.r_act = gset.reflectivity
        p.f0_act = gset.fresnel0
    else:
        p.r_act = np.zeros(n)
        p.f0_act = np.zeros((n, 3))

    # screen-space center projection (guarded by visibility)
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(p.visible, p.zc, 1.0)
        px_c = camera.fx * centers_cam[:, 0] / zs + camera.cx
        py_c = camera.fy * centers_cam[:, 1] / zs + camera.cy
    p.proj = np.stack([px_c, py_c], axis=1)

    p.plane_num = np.einsum("ij,ij->i", gset.centers - p.origin, p.nraw)

    # the per-fragment ray dot products d.n, d.t_u, d.t_v are linear in
    # continuous pixel coordinates; precompute their coefficient triples
    def lin_coeffs(world_vecs):
        w = world_vecs @ camera.rotation.T   # rows: R @ vec
        c0 = w[:, 0] / camera.fx
        c1 = w[:, 1] / camera.fy
        c2 = w[:, 2] - camera.cx * c0 - camera.cy * c1
        return np.stack([c0, c1, c2], axis=1)

    p.lin_d = lin_coeffs(p.nraw)
    p.lin_u = lin_coeffs(gset.tangent_u)
    p.lin_v = lin_coeffs(gset.tangent_v)
    op = p.origin - gset.centers
    p.e_u = np.einsum("ij,ij->i", op, gset.tangent_u)
    p.e_v = np.einsum("ij,ij->i", op, gset.tangent_v)

    # exact kernel support: alpha * G >= cutoff within these squared radii
    with np.errstate(divide="ignore"):
        log_ratio = np.log(np.maximum(p.alpha / cfg.alpha_cutoff, 1e-300))
    p.r2_obj = np.where(log_ratio > 0.0, 2.0 * log_ratio, -1.0)
    p.r2_lp = np.where(log_ratio > 0.0,
                       2.0 * cfg.lowpass_sigma ** 2 * log_ratio, -1.0)
    zorder = np.lexsort((np.arange(n), p.zc))
    p.depth_rank = np.empty(n, dtype=np.int64)
    p.depth_rank[zorder] = np.arange(n)

    # conservative screen bounding box from the +-k sigma corner points;
    # k is the per-disk radius at which alpha * G drops below the cutoff
    k = np.sqrt(np.maximum(p.r2_obj, 1.0))
    eu = (k * p.scales[:, 0])[:, None] * gset.tangent_u
    ev = (k * p.scales[:, 1])[:, None] * gset.tangent_v
    corners = np.stack([gset.centers + eu + ev, gset.centers + eu - ev,
                        gset.centers - eu + ev, gset.centers - eu - ev], axis=1)
    corners_cam = corners @ camera.rotation.T + camera.translation
    cz = corners_cam[:, :, 2]
    safe = np.all(cz > 1e-6, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cxs = camera.fx * corners_cam[:, :, 0] / cz + camera.cx
        cys = camera.fy * corners_cam[:, :, 1] / cz + camera.cy
    pad = cfg.lowpass_sigma * np.sqrt(2.0 * np.log(1.0 / cfg.alpha_cutoff)) \
        + 1.0
    xmin = np.where(safe, np.min(cxs, axis=1) - pad, 0.0)
    xmax = np.where(safe, np.max(cxs, axis=1) + pad, float(camera.width))
    ymin = np.where(safe, np.min(cys, axis=1) - pad, 0.0)
    ymax = np.where(safe, np.max(cys, axis=1) + pad, float(camera.height))

    # exact screen AABB of the projected k-sigma ellipse via its dual
    # conic; intersect with the corner box (tighter for tilted disks)
    krt = camera.rotation * np.array([[camera.fx], [camera.fy], [1.0]])
    krt = krt + np.array([[camera.cx], [camera.cy], [0.0]]) \
        * camera.rotation[2]
    a1 = (p.scales[:, 0] * k)[:, None] * (gset.tangent_u @ krt.T)
    a2 = (p.scales[:, 1] * k)[:, None] * (gset.tangent_v @ krt.T)
    t = camera.translation
    tpix = np.array([camera.fx * t[0] + camera.cx * t[2],
                     camera.fy * t[1] + camera.cy * t[2], t[2]])
    a3 = gset.centers @ krt.T + tpix
    with np.errstate(invalid="ignore"):
        d00 = a1[:, 0] ** 2 + a2[:, 0] ** 2 - a3[:, 0] ** 2
        d11 = a1[:, 1] ** 2 + a2[:, 1] ** 2 - a3[:, 1] ** 2
        d22 = a1[:, 2] ** 2 + a2[:, 2] ** 2 - a3[:, 2] ** 2
        d02 = a1[:, 0] * a1[:, 2] + a2[:, 0] * a2[:, 2] - a3[:, 0] * a3[:, 2]
        d12 = a1[:, 1] * a1[:, 2] + a2[:, 1] * a2[:, 2] - a3[:, 1] * a3[:, 2]
        tx = d02 * d02 - d00 * d22
        ty = d12 * d12 - d11 * d22
        okc = (d22 < -1e-12) & (tx > 0.0) & (ty > 0.0) & safe
        sx = np.sqrt(np.maximum(tx, 0.0))
        sy = np.sqrt(np.maximum(ty, 0.0))
        ex_lo = (d02 + sx) / d22
        ex_hi = (d02 - sx) / d22
        ey_lo = (d12 + sy) / d22
        ey_hi = (d12 - sy) / d22
    xmin = np.where(okc, np.maximum(xmin, ex_lo - pad), xmin)
    xmax = np.where(okc, np.minimum(xmax, ex_hi + pad), xmax)
    ymin = np.where(okc, np.maximum(ymin, ey_lo - pad), ymin)
    ymax = np.where(okc, np.minimum(ymax, ey_hi + pad), ymax)

    p.x0 = np.clip(np.floor(xmin), 0, camera.width).astype(np.int64)
    p.x1 = np.clip(np.ceil(xmax), 0, camera.width).astype(np.int64)
    p.y0 = np.clip(np.floor(ymin), 0, camera.height).astype(np.int64)
    p.y1 = np.clip(np.ceil(ymax), 0, camera.height).astype(np.int64)
    return p


class _BandFragments:
    """Sorted fragment arrays for one row band."""

    __slots__ = ("pix", "disk", "u", "v", "tau", "a", "ghat", "branch_obj",
                 "d", "px", "py", "log1m", "T_in", "alive", "w",
                 "seg_start", "seg_id", "seg_first_idx", "seg_pixels",
                 "T_final", "n_pix", "y0")


def _band_fragments(gset, camera, cfg, prep, y0, y1):
    """Generate, cull, and depth-sort fragments for image rows [y0, y1)."""
    width = camera.width
    bf = _BandFragments()
    bf.y0 = y0
    bf.n_pix = (y1 - y0) * width

    by0 = np.maximum(prep.y0, y0)
    by1 = np.minimum(prep.y1, y1)
    wbox = prep.x1 - prep.x0
    hbox = by1 - by0
    counts = np.where(prep.visible, wbox * hbox, 0)
    counts = np.maximum(counts, 0)
    sel = np.flatnonzero(counts > 0)
    if sel.size == 0:
        _finish_empty(bf)
        return bf

    csel = counts[sel]
    total = int(csel.sum())
    starts = np.zeros(csel.size, dtype=np.int64)
    np.cumsum(csel[:-1], out=starts[1:])
    disk = np.repeat(sel, csel)
    rel = np.arange(total, dtype=np.int64) - np.repeat(starts, csel)
    wrep = np.repeat(wbox[sel], csel)
    ix = np.repeat(prep.x0[sel], csel) + rel % wrep
    iy = np.repeat(by0[sel], csel) + rel // wrep
    px = ix.astype(np.float64) + 0.5
    py = iy.astype(np.float64) + 0.5

    # evaluate the linear forms d.n, d.t_u, d.t_v at the pixel coordinate
    ld = prep.lin_d[disk]
    denom = ld[:, 0] * px + ld[:, 1] * py + ld[:, 2]
    num = prep.plane_num[disk]
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = num / denom
    ok = (np.abs(denom) > 1e-12) & np.isfinite(tau) & (tau > cfg.near_clip)

    lu = prep.lin_u[disk]
    lv = prep.lin_v[disk]
    su = prep.scales[disk, 0]
    sv = prep.scales[disk, 1]
    u = (prep.e_u[disk] + tau * (lu[:, 0] * px + lu[:, 1] * py + lu[:, 2])) / su
    v = (prep.e_v[disk] + tau * (lv[:, 0] * px + lv[:, 1] * py + lv[:, 2])) / sv
    r2 = u * u + v * v
    sd2 = (px - prep.proj[disk, 0]) ** 2 + (py - prep.proj[disk, 1]) ** 2
    keep = ((ok & (r2 <= prep.r2_obj[disk] + 1e-9))
            | (sd2 <= prep.r2_lp[disk] + 1e-9))
    # the low-pass branch still needs a valid plane hit for depth/position
    keep &= ok

    if not np.any(keep):
        _finish_empty(bf)
        return bf

    kidx = np.flatnonzero(keep)
    disk = disk[kidx]
    u = u[kidx]
    v = v[kidx]
    tau = tau[kidx]
    px = px[kidx]
    py = py[kidx]
    sd2 = sd2[kidx]
    pix = (iy[kidx] - y0) * width + ix[kidx]

    g_obj = np.exp(-0.5 * (u * u + v * v))
    g_lp = np.exp(-0.5 * sd2 / (cfg.lowpass_sigma ** 2))
    ghat = np.maximum(g_obj, g_lp)
    a = prep.alpha[disk] * ghat
    final = a >= cfg.alpha_cutoff
    if not np.all(final):
        fi = np.flatnonzero(final)
        disk, u, v, tau, px, py, pix = (arr[fi] for arr in
                                        (disk, u, v, tau, px, py, pix))
        g_obj, g_lp, ghat, a = (arr[fi] for arr in (g_obj, g_lp, ghat, a))

    order = np.argsort(pix * np.int64(len(gset)) + prep.depth_rank[disk])
    bf.disk = disk[order]
    bf.pix = pix[order]
    bf.u = u[order]
    bf.v = v[order]
    bf.tau = tau[order]
    bf.a = a[order]
    bf.ghat = ghat[order]
    bf.branch_obj = g_obj[order] >= g_lp[order]
    bf.px = px[order]
    bf.py = py[order]
    dcam = np.stack([(bf.px - camera.cx) / camera.fx,
                     (bf.py - camera.cy) / camera.fy,
                     np.ones_like(bf.px)], axis=1)
    bf.d = dcam @ camera.rotation

    # segmented transmittance scan over the per-pixel fragment runs
    m = bf.pix.size
    bf.log1m = np.log1p(-np.minimum(bf.a, _LOG_ALPHA_CAP))
    csum = np.cumsum(bf.log1m)
    bf.seg_start = np.empty(m, dtype=bool)
    bf.seg_start[0] = True
    bf.seg_start[1:] = bf.pix[1:] != bf.pix[:-1]
    bf.seg_first_idx = np.flatnonzero(bf.seg_start)
    bf.seg_id = np.cumsum(bf.seg_start) - 1
    start_of = bf.seg_first_idx[bf.seg_id]
    base = np.where(start_of > 0, csum[np.maximum(start_of - 1, 0)], 0.0)
    pre = np.concatenate([[0.0], csum[:-1]])
    bf.T_in = np.exp(pre - base)
    bf.alive = bf.T_in >= cfg.transmittance_floor
    bf.w = np.where(bf.alive, bf.a * bf.T_in, 0.0)

    alive_idx = np.where(bf.alive, np.arange(m), 0)
    last_alive = np.maximum.reduceat(alive_idx, bf.seg_first_idx)
    bf.seg_pixels = bf.pix[bf.seg_first_idx]
    bf.T_final = np.exp(csum[last_alive] - base[bf.seg_first_idx])
    return bf


def _finish_empty(bf):
    for name in ("pix", "disk"):
        setattr(bf, name, np.empty(0, dtype=np.int64))
    for name in ("u", "v", "tau", "a", "ghat", "log1m", "T_in", "w",
                 "px", "py"):
        setattr(bf, name, np.empty(0))
    bf.branch_obj = np.empty(0, dtype=bool)
    bf.alive = np.empty(0, dtype=bool)
    bf.seg_start = np.empty(0, dtype=bool)
    bf.seg_id = np.empty(0, dtype=np.int64)
    bf.seg_first_idx = np.empty(0, dtype=np.int64)
    bf.seg_pixels = np.empty(0, dtype=np.int64)
    bf.T_final = np.empty(0)
    bf.d = np.empty((0, 3))


def _blend_band(prep, cfg, bf, out: FrameBuffers, y0, y1, width):
    npix = bf.n_pix
    T_fin = np.ones(npix)
    if bf.seg_pixels.size:
        T_fin[bf.seg_pixels] = bf.T_final

    def acc(values):
        return np.bincount(bf.pix, weights=values, minlength=npix)

    rows = slice(y0, y1)
    shape2 = (y1 - y0, width)
    if bf.pix.size:
        wX = bf.w[:, None] * (prep.origin + bf.tau[:, None] * bf.d)
        cols = prep.colors[bf.disk]
        nrm = prep.n_render[bf.disk]
        f0 = prep.f0_act[bf.disk]
        for c in range(3):
            out.color[rows, :, c] = acc(bf.w * cols[:, c]).reshape(shape2)
            out.normal[rows, :, c] = acc(bf.w * nrm[:, c]).reshape(shape2)
            out.fresnel0[rows, :, c] = acc(bf.w * f0[:, c]).reshape(shape2)
            out.position[rows, :, c] = acc(wX[:, c]).reshape(shape2)
        out.depth[rows] = acc(bf.w * bf.tau).reshape(shape2)
        out.reflectivity[rows] = acc(bf.w * prep.r_act[bf.disk]).reshape(shape2)
    out.alpha[rows] = (1.0 - T_fin).reshape(shape2)
    out.color[rows] += T_fin.reshape(shape2)[:, :, None] * cfg.background
    return T_fin


def rasterize(gset: GaussianSet, camera: Camera, cfg: RenderConfig,
              colors=None, threads: int = 1, return_cache: bool = False,
              active_sh_degree=None):
    """Rasterize a Gaussian set into per-pixel frame buffers.

    colors, when given, is an (N, 3) table replacing the per-disk SH color
    evaluation (used when disk colors come from the environment lookup).
    active_sh_degree limits the SH bands evaluated (training ramps it up).
    threads > 1 renders the fixed row bands concurrently; band boundaries
    do not depend on the thread count, so results are bit-identical.
    """
    out = FrameBuffers.zeros(camera.height, camera.width)
    prep = _prepare(gset, camera, cfg, colors, active_sh_degree)
    bands = []
    edges = list(range(0, camera.height, BAND_ROWS)) + [camera.height]

    def run_band(i):
        y0, y1 = edges[i], edges[i + 1]
        bf = _band_fragments(gset, camera, cfg, prep, y0, y1)
        return y0, y1, bf

    if threads > 1 and len(edges) > 2:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_band, range(len(edges) - 1)))
    else:
        results = [run_band(i) for i in range(len(edges) - 1)]

    for y0, y1, bf in results:
        _blend_band(prep, cfg, bf, out, y0, y1, camera.width)
        bands.append(bf)

    if return_cache:
        cache = RasterCache(prep, bands, len(gset), camera.height,
                            camera.width, colors is not None)
        return out, cache
    return out


def _band_backward(gset, camera, cfg, prep, bf, grad_flat, grads):
    """Accumulate parameter gradients from one band's fragments.

    grad_flat: dict of band-local flattened gradient images.
    """
    gT_fin = grad_flat["color"] @ cfg.background - grad_flat["alpha"]
    if bf.pix.size == 0:
        return
    m = bf.pix.size
    n = len(gset)

    # channels with all-zero incoming gradients contribute nothing; the
    # guards keep stage passes that touch few buffers cheap
    use = {name: bool(np.any(grad_flat[name])) for name in grad_flat}
    zeros3 = np.zeros((0, 3))
    gcol = grad_flat["color"][bf.pix] if use["color"] else zeros3
    gnrm = grad_flat["normal"][bf.pix] if use["normal"] else zeros3
    gf0 = grad_flat["fresnel0"][bf.pix] if use["fresnel0"] else zeros3
    gpos = grad_flat["position"][bf.pix] if use["position"] else zeros3
    gdep = grad_flat["depth"][bf.pix] if use["depth"] else None
    grefl = grad_flat["reflectivity"][bf.pix] if use["reflectivity"] else None

    cols = prep.colors[bf.disk]
    X = prep.origin + bf.tau[:, None] * bf.d

    gw = np.zeros(m)
    if use["color"]:
        gw += np.einsum("ij,ij->i", gcol, cols)
    if use["normal"]:
        gw += np.einsum("ij,ij->i", gnrm, prep.n_render[bf.disk])
    if use["fresnel0"]:
        gw += np.einsum("ij,ij->i", gf0, prep.f0_act[bf.disk])
    if use["position"]:
        gw += np.einsum("ij,ij->i", gpos, X)
    if use["depth"]:
        gw += gdep * bf.tau
    if use["reflectivity"]:
        gw += grefl * prep.r_act[bf.disk]

    # dL/da through the transmittance products (suffix sums per pixel)
    q = gw * bf.w
    cq = np.cumsum(q)
    start_of = bf.seg_first_idx[bf.seg_id]
    base_q = np.where(start_of > 0, cq[np.maximum(start_of - 1, 0)], 0.0)
    incl = cq - base_q
    seg_total = np.add.reduceat(q, bf.seg_first_idx)
    suffix = seg_total[bf.seg_id] - incl

    T_fin_seg = bf.T_final[bf.seg_id]
    gT_seg = gT_fin[bf.pix]
    da = np.where(
        bf.alive,
        gw * bf.T_in - (suffix + gT_seg * T_fin_seg)
        / np.maximum(1.0 - bf.a, _ONE_MINUS_A_FLOOR),
        0.0)

    # per-fragment gradients on the blended attributes themselves
    wcol = bf.w[:, None]
    gtau_ch = np.zeros(m)
    if use["depth"]:
        gtau_ch += gdep * bf.w
    if use["position"]:
        gtau_ch += np.einsum("ij,ij->i", gpos * wcol, bf.d)

    # kernel chain: a = alpha * max(g_obj, g_lp)
    alpha_d = prep.alpha[bf.disk]
    dghat = da * alpha_d
    dalpha = da * bf.ghat
    g_obj = np.where(bf.branch_obj, bf.ghat, 0.0)
    dgobj = np.where(bf.branch_obj, dghat, 0.0)
    du = -bf.u * g_obj * dgobj
    dv = -bf.v * g_obj * dgobj
    dglp = np.where(bf.branch_obj, 0.0, dghat)
    g_lp = np.where(bf.branch_obj, 0.0, bf.ghat)
    dsd2 = dglp * (-g_lp / (2.0 * cfg.lowpass_sigma ** 2))
    dprojx = dsd2 * (-2.0) * (bf.px - prep.proj[bf.disk, 0])
    dprojy = dsd2 * (-2.0) * (bf.py - prep.proj[bf.disk, 1])

    # ray-plane chain: u = ((o + tau*d - p) . t_u)/s_u, tau = ((p-o).n)/(d.n)
    tu = gset.tangent_u[bf.disk]
    tv = gset.tangent_v[bf.disk]
    su = prep.scales[bf.disk, 0]
    sv = prep.scales[bf.disk, 1]
    nr = prep.nraw[bf.disk]
    denom = np.einsum("ij,ij->i", bf.d, nr)
    delta = X - gset.centers[bf.disk]

    d_dot_tu = np.einsum("ij,ij->i", bf.d, tu)
    d_dot_tv = np.einsum("ij,ij->i", bf.d, tv)
    gtau = gtau_ch + du * d_dot_tu / su + dv * d_dot_tv / sv

    dp_frag = (-du / su)[:, None] * tu + (-dv / sv)[:, None] * tv \
        + (gtau / denom)[:, None] * nr
    g_n = (-gtau / denom)[:, None] * delta
    dtu_frag = (du / su)[:, None] * delta + np.cross(tv, g_n)
    dtv_frag = (dv / sv)[:, None] * delta + np.cross(g_n, tu)
    dlog_su = -du * bf.u
    dlog_sv = -dv * bf.v

    def scat3(values):
        return np.stack([np.bincount(bf.disk, weights=values[:, c],
                                     minlength=n) for c in range(3)], axis=1)

    def scat1(values):
        return np.bincount(bf.disk, weights=values, minlength=n)

    grads.centers += scat3(dp_frag)
    grads.tangent_u += scat3(dtu_frag)
    grads.tangent_v += scat3(dtv_frag)
    grads.log_scales[:, 0] += scat1(dlog_su)
    grads.log_scales[:, 1] += scat1(dlog_sv)
    grads.opacity_logit += scat1(dalpha) * sigmoid_grad(prep.alpha)

    # projected-center chain from the low-pass branch
    dproj = np.stack([scat1(dprojx), scat1(dprojy)], axis=1)
    if np.any(dproj):
        centers_cam = gset.centers @ camera.rotation.T + camera.translation
        zc = np.where(prep.visible, prep.zc, 1.0)
        dXc = dproj[:, 0] * camera.fx / zc
        dYc = dproj[:, 1] * camera.fy / zc
        dZc = (-dproj[:, 0] * camera.fx * centers_cam[:, 0] / zc ** 2
               - dproj[:, 1] * camera.fy * centers_cam[:, 1] / zc ** 2)
        grads.centers += np.stack([dXc, dYc, dZc], axis=1) @ camera.rotation

    # blended normal channel back to the tangent frame
    if use["normal"]:
        g_nrender = scat3(gnrm * wcol)
        g_unit = g_nrender * prep.flip[:, None]
        g_nraw = normalize_rows_vjp(prep.nraw, g_unit)
        grads.tangent_u += np.cross(gset.tangent_v, g_nraw)
        grads.tangent_v += np.cross(g_nraw, gset.tangent_u)

    # color channel: either the override table or the SH evaluation
    if use["color"]:
        g_colors = scat3(gcol * wcol)
        if prep.colors_override:
            grads.colors += g_colors
        else:
            deg = prep.active_sh_degree
            k_act = sh_basis_size(deg)
            gpre = g_colors * prep.clamp_mask
            wdir = normalize_rows(prep.view_vec)
            basis = sh_basis(wdir, deg)
            grads.sh_coeffs[:, :k_act] += basis[:, :, None] * gpre[:, None, :]
            bgrad = sh_basis_grad(wdir, deg)
            coef_g = np.einsum("nkc,nc->nk", gset.sh_coeffs[:, :k_act], gpre)
            g_wdir = np.einsum("nk,nkd->nd", coef_g, bgrad)
            grads.centers += normalize_rows_vjp(prep.view_vec, g_wdir)

    if gset.role == ROLE_REFLECTION:
        if use["fresnel0"]:
            grads.fresnel_logit += scat3(gf0 * wcol) * sigmoid_grad(prep.f0_act)
        if use["reflectivity"]:
            grads.reflectivity_logit += scat1(grefl * bf.w) \
                * sigmoid_grad(prep.r_act)


def rasterize_backward(gset: GaussianSet, camera: Camera, cfg: RenderConfig,
                       grad_buffers: FrameBuffers, colors=None,
                       cache: Optional[RasterCache] = None,
                       active_sh_degree=None) -> GaussianSetGrads:
    """Adjoint of rasterize: pull frame-buffer gradients onto parameters.

    When cache is omitted the fragment lists are recomputed from the scene
    (they are deterministic); a supplied cache must match the scene shape,
    otherwise MissingForwardState is raised.
    """
    if cache is not None and not cache.matches(gset, camera, colors):
        raise MissingForwardState(
            "forward cache does not match the scene/camera it is used with")
    if cache is None:
        prep = _prepare(gset, camera, cfg, colors, active_sh_degree)
        edges = list(range(0, camera.height, BAND_ROWS)) + [camera.height]
        bands = [_band_fragments(gset, camera, cfg, prep, edges[i], edges[i + 1])
                 for i in range(len(edges) - 1)]
    else:
        prep = cache.prep
        bands = cache.bands

    grads = GaussianSetGrads.zeros_for(gset, colors is not None)
    width = camera.width
    for bf in bands:
        y0 = bf.y0
        y1 = y0 + bf.n_pix // width
        grad_flat = {
            "color": grad_buffers.color[y0:y1].reshape(-1, 3),
            "alpha": grad_buffers.alpha[y0:y1].reshape(-1),
            "depth": grad_buffers.depth[y0:y1].reshape(-1),
            "normal": grad_buffers.normal[y0:y1].reshape(-1, 3),
            "reflectivity": grad_buffers.reflectivity[y0:y1].reshape(-1),
            "fresnel0": grad_buffers.fresnel0[y0:y1].reshape(-1, 3),
            "position": grad_buffers.position[y0:y1].reshape(-1, 3),
        }
        _band_backward(gset, camera, cfg, prep, bf, grad_flat, grads)
    return grads


def depth_to_normal(depth, alpha, camera: Camera):
    """Normals from the depth buffer via central finite differences.

    Each pixel is unprojected along its own view ray; the normal is the
    normalized cross product of the horizontal and vertical point
    differences, oriented toward the camera.  Border pixels and pixels
    with alpha < 0.5 are zero.
    """
    h, w = depth.shape
    out = np.zeros((h, w, 3))
    if h < 3 or w < 3:
        return out
    ys, xs = np.mgrid[0:h, 0:w]
    dirs = camera.pixel_ray_dirs(xs + 0.5, ys + 0.5)
    P = camera.position + depth[:, :, None] * dirs
    dx = P[1:-1, 2:] - P[1:-1, :-2]
    dy = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(dx, dy)
    n = normalize_rows(n)
    to_pix = P[1:-1, 1:-1] - camera.position
    flip = np.where(np.sum(n * to_pix, axis=-1) > 0.0, -1.0, 1.0)
    n *= flip[:, :, None]
    valid = alpha[1:-1, 1:-1] >= 0.5
    out[1:-1, 1:-1] = np.where(valid[:, :, None], n, 0.0)
    return out


def depth_to_normal_vjp(depth, alpha, camera: Camera, grad_normal):
    """VJP of depth_to_normal onto the depth buffer."""
    h, w = depth.shape
    gdepth = np.zeros((h, w))
    if h < 3 or w < 3:
        return gdepth
    ys, xs = np.mgrid[0:h, 0:w]
    dirs = camera.pixel_ray_dirs(xs + 0.5, ys + 0.5)
    P = camera.position + depth[:, :, None] * dirs
    dx = P[1:-1, 2:] - P[1:-1, :-2]
    dy = P[2:, 1:-1] - P[:-2, 1:-1]
    raw = np.cross(dx, dy)
    n = normalize_rows(raw)
    to_pix = P[1:-1, 1:-1] - camera.position
    flip = np.where(np.sum(n * to_pix, axis=-1) > 0.0, -1.0, 1.0)
    valid = alpha[1:-1, 1:-1] >= 0.5

    g = grad_normal[1:-1, 1:-1] * (valid * flip)[:, :, None]
    g_raw = normalize_rows_vjp(raw, g)
    gdx = np.cross(dy, g_raw)
    gdy = np.cross(g_raw, dx)

    gP = np.zeros((h, w, 3))
    gP[1:-1, 2:] += gdx
    gP[1:-1, :-2] -= gdx
    gP[2:, 1:-1] += gdy
    gP[:-2, 1:-1] -= gdy
    gdepth = np.einsum("ijc,ijc->ij", gP, dirs)
    return gdepth
