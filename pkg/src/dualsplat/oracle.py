"""Analytic ray-traced ground truth for parametric transmissive scenes.

A scene is a glass surface (plane patch or sphere cap) in front of a
textured backdrop plane, plus either an analytic far-field environment or
emissive near-field quads on the camera side.  At a glass hit the pixel
radiance splits exactly into (1 - R)*transmitted + R*reflected, with the
transmitted ray continuing along a straight line.  Reflection and Fresnel
terms are written out locally (independent of the shading module) so the
tracer can serve as a genuine cross-check.

Everything is deterministic: one ray per pixel center, no sampling noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import UnknownPreset
from .scene import Camera

_EPS = 1e-9
_RAY_OFFSET = 1e-6


# ---------------------------------------------------------------------------
# procedural radiance functions (named, so dataset provenance stays textual)

def _tex_soft_checker(points):
    # band-limited enough for a small splat budget to fit cleanly, so the
    # photometric residual concentrates on the view-dependent glass
    x, y = points[..., 0], points[..., 1]
    r = 0.55 + 0.25 * np.sin(1.3 * x + 0.7) \
        + 0.12 * np.sin(2.2 * x) * np.sin(2.2 * y)
    g = 0.5 + 0.25 * np.sin(1.1 * y - 0.4) \
        + 0.12 * np.sin(2.2 * x + 1.2) * np.sin(2.0 * y)
    b = 0.45 + 0.22 * np.sin(0.9 * (x + y)) + 0.1 * np.sin(1.8 * x - 1.4 * y)
    return np.clip(np.stack([r, g, b], axis=-1), 0.02, 0.98)


def _tex_smooth_rgb(points):
    x, y = points[..., 0], points[..., 1]
    r = 0.55 + 0.3 * np.sin(0.9 * x + 0.3)
    g = 0.5 + 0.3 * np.sin(0.8 * y - 0.2)
    b = 0.5 + 0.25 * np.cos(0.7 * (x - y))
    return np.clip(np.stack([r, g, b], axis=-1), 0.02, 0.98)


def _emit_warm_panel(a, b):
    base = np.array([0.95, 0.55, 0.15])
    mod = 0.5 + 0.5 * np.tanh(3.0 * np.sin(3.5 * a) * np.sin(2.8 * b + 0.4))
    return np.clip(mod[..., None] * base + 0.04, 0.0, 1.0)


def _emit_cool_panel(a, b):
    base = np.array([0.2, 0.55, 0.95])
    mod = 0.5 + 0.5 * np.tanh(3.0 * np.cos(3.2 * a + 0.5) * np.sin(3.4 * b))
    return np.clip(mod[..., None] * base + 0.04, 0.0, 1.0)


def _emit_stripe_panel(a, b):
    base = np.array([0.85, 0.85, 0.35])
    mod = 0.5 + 0.5 * np.tanh(3.5 * np.sin(4.0 * a + 1.2 * b))
    return np.clip(mod[..., None] * base + 0.04, 0.0, 1.0)


def _env_sky_gradient(dirs):
    # dim sky: reflected panels read as bright shapes on a dark ground,
    # giving the direction-indexed lookups high-contrast edges
    up = np.clip(dirs[..., 1], -1.0, 1.0)
    r = 0.10 + 0.06 * up
    g = 0.12 + 0.07 * up
    b = 0.16 + 0.10 * up
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def _env_sky_blob(dirs):
    base = _env_sky_gradient(dirs)
    axis = np.array([0.3, 0.6, -0.75])
    axis = axis / np.linalg.norm(axis)
    d = np.sum(dirs * axis, axis=-1)
    blob = np.exp((np.clip(d, -1.0, 1.0) - 1.0) / 0.03)
    return np.clip(base + blob[..., None] * np.array([0.55, 0.5, 0.3]), 0.0, 1.0)


TEXTURES: Dict[str, Callable] = {
    "soft-checker": _tex_soft_checker,
    "smooth-rgb": _tex_smooth_rgb,
}
EMISSIONS: Dict[str, Callable] = {
    "warm-panel": _emit_warm_panel,
    "cool-panel": _emit_cool_panel,
    "stripe-panel": _emit_stripe_panel,
}
ENVIRONMENTS: Dict[str, Callable] = {
    "sky-gradient": _env_sky_gradient,
    "sky-blob": _env_sky_blob,
}


# ---------------------------------------------------------------------------
# geometry

@dataclass
class GlassPlane:
    center: np.ndarray
    axis_u: np.ndarray          # unit, spans the patch
    axis_v: np.ndarray
    half_u: float
    half_v: float

    @property
    def normal(self):
        n = np.cross(self.axis_u, self.axis_v)
        return n / np.linalg.norm(n)


@dataclass
class GlassSphere:
    center: np.ndarray
    radius: float
    cap_axis: np.ndarray        # unit, toward the cameras
    cap_cos: float = 0.15       # accept hits whose normal . cap_axis >= this


@dataclass
class Quad:
    """Finite textured/emissive rectangle; edge vectors carry half extents."""

    center: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    radiance: str               # key into TEXTURES/EMISSIONS (local-coords fn)
    kind: str = "emission"      # "emission" uses (a, b); "texture" uses world

    def normal(self):
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)


@dataclass
class OracleScene:
    glass: object = None                    # GlassPlane | GlassSphere | None
    reflectivity_mode: str = "constant"     # "constant" | "schlick"
    reflectivity_value: float = 0.4
    fresnel0_star: float = 0.04             # used in schlick mode
    backdrop: Optional[Quad] = None
    quads: List[Quad] = field(default_factory=list)
    environment: str = "sky-gradient"
    bounds_lo: np.ndarray = field(default_factory=lambda: np.array([-2.5, -2.5, -0.5]))
    bounds_hi: np.ndarray = field(default_factory=lambda: np.array([2.5, 2.5, 2.0]))


def _quad_intersect(quad: Quad, origins, dirs):
    """Nearest-hit parameters for a batch of rays against one quad.

    Returns (t, hit_points, valid); t = inf where there is no hit.
    """
    n = quad.normal()
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((quad.center - origins) @ n) / denom
    lu2 = float(quad.edge_u @ quad.edge_u)
    lv2 = float(quad.edge_v @ quad.edge_v)
    t_safe = np.where(np.isfinite(t), t, 0.0)
    X = origins + t_safe[..., None] * dirs
    local = X - quad.center
    a = (local @ quad.edge_u) / lu2
    b = (local @ quad.edge_v) / lv2
    valid = (np.abs(denom) > _EPS) & np.isfinite(t) & (t > _RAY_OFFSET) \
        & (np.abs(a) <= 1.0) & (np.abs(b) <= 1.0)
    t = np.where(valid, t, np.inf)
    return t, X, a, b, valid


def _quad_radiance(quad: Quad, X, a, b):
    fn = EMISSIONS[quad.radiance] if quad.kind == "emission" \
        else TEXTURES[quad.radiance]
    if quad.kind == "emission":
        return fn(a, b)
    return fn(X)


def _scene_radiance(scene: OracleScene, origins, dirs):
    """Radiance seen along rays that ignore the glass: nearest quad or
    backdrop hit, else the environment."""
    shape = dirs.shape[:-1]
    best_t = np.full(shape, np.inf)
    out = np.zeros(shape + (3,))
    surfaces = list(scene.quads)
    if scene.backdrop is not None:
        surfaces.append(scene.backdrop)
    for quad in surfaces:
        t, X, a, b, valid = _quad_intersect(quad, origins, dirs)
        closer = valid & (t < best_t)
        if np.any(closer):
            rad = _quad_radiance(quad, X, a, b)
            out[closer] = rad[closer]
            best_t = np.where(closer, t, best_t)
    miss = ~np.isfinite(best_t)
    if np.any(miss):
        unit = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        out[miss] = ENVIRONMENTS[scene.environment](unit[miss])
    return out


def _glass_intersect(scene: OracleScene, origins, dirs):
    """Glass hit test: (t, hit points, camera-facing unit normals, mask)."""
    shape = dirs.shape[:-1]
    if scene.glass is None:
        return (np.full(shape, np.inf), np.zeros(shape + (3,)),
                np.zeros(shape + (3,)), np.zeros(shape, dtype=bool))
    g = scene.glass
    if isinstance(g, GlassPlane):
        quad = Quad(center=g.center, edge_u=g.axis_u * g.half_u,
                    edge_v=g.axis_v * g.half_v, radiance="", kind="emission")
        t, X, _, _, valid = _quad_intersect(quad, origins, dirs)
        n = np.broadcast_to(g.normal, shape + (3,)).copy()
    else:
        oc = origins - g.center
        bq = 2.0 * np.sum(dirs * oc, axis=-1)
        aq = np.sum(dirs * dirs, axis=-1)
        cq = np.sum(oc * oc, axis=-1) - g.radius ** 2
        disc = bq * bq - 4.0 * aq * cq
        ok = disc > 0.0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t = (-bq - sq) / (2.0 * aq)
        valid = ok & (t > _RAY_OFFSET)
        t = np.where(valid, t, np.inf)
        X = origins + np.where(valid, t, 0.0)[..., None] * dirs
        n = (X - g.center) / g.radius
        within_cap = np.sum(n * g.cap_axis, axis=-1) >= g.cap_cos
        valid = valid & within_cap
        t = np.where(valid, t, np.inf)
    # orient normals toward the ray origin side
    facing = np.sum(n * dirs, axis=-1) > 0.0
    n = np.where(facing[..., None], -n, n)
    return t, X, n, valid


def _fresnel_reflectivity(scene: OracleScene, dirs, normals):
    """R* per pixel, from either the constant or the Schlick model.

    Written out locally (not shared with the shading module) so oracle and
    model implementations stay independent.
    """
    unit = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    cos = np.clip(np.sum(normals * (-unit), axis=-1), 0.0, 1.0)
    if scene.reflectivity_mode == "constant":
        return np.full(cos.shape, scene.reflectivity_value)
    f0 = scene.fresnel0_star
    return f0 + (1.0 - f0) * (1.0 - cos) ** 5


def trace_view(scene: OracleScene, camera: Camera, return_components=False):
    """Render one view: (image, camera-facing glass normals, glass mask).

    With return_components=True, also returns the transmitted and
    reflected radiance maps T and S; on the mask the image satisfies
    image = (1 - R)*T + R*S exactly.
    """
    h, w = camera.height, camera.width
    ys, xs = np.mgrid[0:h, 0:w]
    dirs = camera.pixel_ray_dirs(xs + 0.5, ys + 0.5)
    origin = camera.position

    t_g, X_g, n_g, mask = _glass_intersect(scene, origin, dirs)
    direct = _scene_radiance(scene, origin, dirs)

    img = direct.copy()
    T = direct.copy()
    S = np.zeros_like(direct)
    normals = np.where(mask[..., None], n_g, 0.0)
    R = np.zeros((h, w))
    if np.any(mask):
        hit = X_g[mask]
        d_hit = dirs[mask]
        n_hit = n_g[mask]
        # transmitted ray continues along the same straight line
        trans = _scene_radiance(scene, hit + _RAY_OFFSET * d_hit, d_hit)
        mirror = d_hit - 2.0 * np.sum(d_hit * n_hit, axis=-1, keepdims=True) * n_hit
        refl = _scene_radiance(scene, hit + _RAY_OFFSET * mirror, mirror)
        r_star = _fresnel_reflectivity(scene, d_hit, n_hit)
        img[mask] = (1.0 - r_star)[:, None] * trans + r_star[:, None] * refl
        T[mask] = trans
        S[mask] = refl
        R[mask] = r_star
    if return_components:
        return img, normals, mask, T, S, R
    return img, normals, mask


# ---------------------------------------------------------------------------
# presets and dataset generation

def _default_backdrop(texture="soft-checker", z=1.6):
    # a finite patch: the periphery shows the smooth sky, which a small
    # splat budget fits cleanly, keeping diffuse residuals low
    return Quad(center=np.array([0.0, 0.0, z]),
                edge_u=np.array([7.0, 0.0, 0.0]),
                edge_v=np.array([0.0, 7.0, 0.0]),
                radiance=texture, kind="texture")


def _glass_plane_patch(half=1.7):
    """Glass patch tilted ~29 degrees away from the backdrop plane.

    The tilt keeps the glass normal well separated from the transmitted
    surface's normal (otherwise a normal-accuracy comparison against the
    pre-disentanglement fit would be vacuous) and spreads the incidence
    angles seen by an orbiting camera, which makes the Fresnel-driven
    reflection strength clearly view-dependent.
    """
    n = np.array([0.5, 0.25, -1.0])
    n /= np.linalg.norm(n)
    axis_u = np.cross([0.0, 1.0, 0.0], n)
    axis_u /= np.linalg.norm(axis_u)
    axis_v = np.cross(n, axis_u)
    return GlassPlane(center=np.zeros(3), axis_u=axis_u, axis_v=axis_v,
                      half_u=half, half_v=half)


def _nearfield_quads():
    # panels sit on the camera side along the mirrored view directions of
    # the tilted glass, but outside the orbit's view cones: they are seen
    # almost exclusively through the reflection, with strong parallax
    return [
        Quad(center=np.array([10.5, 2.0, -5.5]),
             edge_u=np.array([0.0, 5.5, 0.0]),
             edge_v=np.array([1.2, 0.0, 6.0]),
             radiance="warm-panel"),
        Quad(center=np.array([4.0, 10.0, -5.0]),
             edge_u=np.array([5.8, 0.0, 0.0]),
             edge_v=np.array([0.0, 1.2, 5.6]),
             radiance="stripe-panel"),
        Quad(center=np.array([-10.0, 1.6, -5.8]),
             edge_u=np.array([0.0, 5.4, 0.0]),
             edge_v=np.array([-1.0, 0.0, 5.6]),
             radiance="cool-panel"),
    ]


def preset_scene(name: str) -> OracleScene:
    """Parametric scene archetypes used by the data generator."""
    if name == "glass-plane-farfield":
        return OracleScene(glass=_glass_plane_patch(),
                           reflectivity_mode="schlick",
                           fresnel0_star=0.28,
                           backdrop=_default_backdrop(),
                           quads=[], environment="sky-blob")
    if name == "glass-plane-nearfield":
        return OracleScene(glass=_glass_plane_patch(),
                           reflectivity_mode="schlick",
                           fresnel0_star=0.28,
                           backdrop=_default_backdrop(),
                           quads=_nearfield_quads(),
                           environment="sky-gradient")
    if name == "glass-sphere-nearfield":
        return OracleScene(glass=GlassSphere(center=np.array([0.0, 0.0, 0.6]),
                                             radius=1.1,
                                             cap_axis=np.array([0.0, 0.0, -1.0]),
                                             cap_cos=0.15),
                           reflectivity_mode="schlick",
                           fresnel0_star=0.28,
                           backdrop=_default_backdrop(z=2.0),
                           quads=_nearfield_quads(),
                           environment="sky-gradient")
    if name == "diffuse-only":
        return OracleScene(glass=None,
                           backdrop=_default_backdrop(texture="smooth-rgb"),
                           quads=[], environment="sky-gradient")
    raise UnknownPreset(f"no scene preset named '{name}'")


PRESET_NAMES = ("glass-plane-farfield", "glass-plane-nearfield",
                "glass-sphere-nearfield", "diffuse-only")


def orbit_camera(azimuth, elevation, radius, resolution, target=(0.0, 0.0, 0.0),
                 fov_deg=46.0):
    """Camera on the z<0 side of the scene looking at the target."""
    target = np.asarray(target, dtype=np.float64)
    ce, se = np.cos(elevation), np.sin(elevation)
    pos = target + radius * np.array([np.sin(azimuth) * ce, se,
                                      -np.cos(azimuth) * ce])
    f = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2.0)
    return Camera.look_at(pos, target, up=(0.0, 1.0, 0.0),
                          fx=f, fy=f, cx=resolution / 2.0, cy=resolution / 2.0,
                          width=resolution, height=resolution)


def generate_dataset(scene: OracleScene, n_train: int, n_test: int,
                     resolution: int, seed: int, min_mask_frac: float = 0.05,
                     meta: Optional[dict] = None):
    """Trace disjoint train/test camera orbits; returns (train, test).

    Poses are jittered deterministically from the seed; train views must
    show the glass in at least min_mask_frac of their pixels (scenes are
    authored so this holds; violations raise).
    """
    from .dataset_io import SceneDataset

    rng = np.random.default_rng(seed)
    # asymmetric orbit biased toward the glass tilt: all views keep the
    # patch well inside the frame while incidence angles vary widely
    az_lo, az_hi = -0.75, 1.05
    datasets = []
    has_glass = scene.glass is not None
    for split, count, phase in (("train", n_train, 0.0), ("test", n_test, 0.5)):
        cams, imgs, normals, masks = [], [], [], []
        for i in range(count):
            frac = (i + phase + rng.uniform(-0.18, 0.18)) / max(count, 1)
            az = az_lo + (az_hi - az_lo) * frac
            el = 0.2 * np.sin(2.1 * np.pi * frac + phase) \
                + rng.uniform(-0.06, 0.06)
            radius = 3.6 * (1.0 + rng.uniform(-0.04, 0.04))
            cam = orbit_camera(az, el, radius, resolution)
            img, nmap, mask = trace_view(scene, cam)
            if split == "train" and has_glass:
                frac_mask = np.count_nonzero(mask) / mask.size
                if frac_mask < min_mask_frac:
                    raise ValueError(
                        f"train view {i} shows only {frac_mask:.1%} glass; "
                        f"scene must be authored with the glass visible")
            cams.append(cam)
            imgs.append(img.astype(np.float32))
            normals.append(nmap.astype(np.float32))
            masks.append(mask)
        datasets.append(SceneDataset(
            cameras=cams, images=imgs,
            normals=normals if has_glass else None,
            masks=masks if has_glass else [np.zeros_like(m) for m in masks],
            bounds_lo=scene.bounds_lo.copy(), bounds_hi=scene.bounds_hi.copy(),
            meta=dict(meta or {}, split=split, seed=seed,
                      resolution=resolution)))
    return datasets[0], datasets[1]
