"""Core domain types: Gaussian disks, cameras, environment map, frame buffers.

Gaussian sets are stored struct-of-arrays so the rasterizer can work on
whole parameter tensors; ``GaussianDisk`` is the per-primitive view used by
single-disk operations and tests.  Constrained attributes are kept in
unconstrained form (logits for opacity/reflectance, logs for scales) so
that optimizer steps can never leave the valid range.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateTangents, LengthMismatch, ShapeMismatch, WrongSetRole
from .mathutil import logit, sh_basis, sh_basis_size, sigmoid

ROLE_SCATTERING = "scattering"
ROLE_REFLECTION = "reflection"


@dataclass
class GaussianDisk:
    """A flat elliptical splat: center, tangent frame, scales, opacity, SH color."""

    center: np.ndarray          # (3,)
    tangent_u: np.ndarray       # (3,)
    tangent_v: np.ndarray       # (3,)
    log_scale_u: float
    log_scale_v: float
    opacity_logit: float
    sh_coeffs: np.ndarray       # ((degree+1)^2, 3)

    @property
    def scale_u(self) -> float:
        return float(np.exp(self.log_scale_u))

    @property
    def scale_v(self) -> float:
        return float(np.exp(self.log_scale_v))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class ReflectionAttributes:
    """Per-Gaussian base reflectance (RGB) and scalar reflectivity, as logits."""

    fresnel_logit: np.ndarray   # (3,)
    reflectivity_logit: float

    @property
    def fresnel0(self) -> np.ndarray:
        return sigmoid(self.fresnel_logit)

    @property
    def reflectivity(self) -> float:
        return float(sigmoid(self.reflectivity_logit))


def disk_homography(disk: GaussianDisk) -> np.ndarray:
    """4x4 matrix H with columns [s_u*t_u | s_v*t_v | 0 | center].

    H @ (u, v, 1, 1) recovers the tangent-plane point
    center + s_u*t_u*u + s_v*t_v*v.
    """
    H = np.zeros((4, 4), dtype=np.float64)
    H[:3, 0] = disk.scale_u * np.asarray(disk.tangent_u, dtype=np.float64)
    H[:3, 1] = disk.scale_v * np.asarray(disk.tangent_v, dtype=np.float64)
    H[:3, 3] = np.asarray(disk.center, dtype=np.float64)
    H[3, 3] = 1.0
    return H


def disk_normal(disk: GaussianDisk) -> np.ndarray:
    """Unit normal of the disk plane, normalize(t_u x t_v)."""
    n = np.cross(np.asarray(disk.tangent_u, dtype=np.float64),
                 np.asarray(disk.tangent_v, dtype=np.float64))
    length = np.linalg.norm(n)
    if length < 1e-12:
        raise DegenerateTangents("tangent vectors are parallel")
    return n / length


def sh_eval(coeffs, view_dir, degree: int):
    """View-dependent color: sum_k c_k Y_k(dir) + 0.5, clamped at 0.

    coeffs: (K, 3) with K = (degree+1)^2; view_dir: unit 3-vector.
    The +0.5 offset and zero clamp are the storage convention for SH color.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    expected = sh_basis_size(degree)
    if coeffs.shape != (expected, 3):
        raise LengthMismatch(
            f"expected {expected} SH coefficient rows for degree {degree}, "
            f"got shape {coeffs.shape}")
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64), degree)
    return np.maximum(basis @ coeffs + 0.5, 0.0)


class GaussianSet:
    """A set of Gaussian disks stored as parallel parameter arrays.

    role is either "scattering" or "reflection"; only reflection sets carry
    the fresnel/reflectivity logit arrays.
    """

    def __init__(self, centers, tangent_u, tangent_v, log_scales,
                 opacity_logit, sh_coeffs, role=ROLE_SCATTERING,
                 fresnel_logit=None, reflectivity_logit=None):
        self.centers = np.ascontiguousarray(centers, dtype=np.float64)
        self.tangent_u = np.ascontiguousarray(tangent_u, dtype=np.float64)
        self.tangent_v = np.ascontiguousarray(tangent_v, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float64)
        self.opacity_logit = np.ascontiguousarray(opacity_logit, dtype=np.float64)
        self.sh_coeffs = np.ascontiguousarray(sh_coeffs, dtype=np.float64)
        self.role = role
        if role == ROLE_REFLECTION:
            if fresnel_logit is None or reflectivity_logit is None:
                raise WrongSetRole("reflection set requires reflection attributes")
            self.fresnel_logit = np.ascontiguousarray(fresnel_logit, dtype=np.float64)
            self.reflectivity_logit = np.ascontiguousarray(
                reflectivity_logit, dtype=np.float64)
        else:
            if fresnel_logit is not None or reflectivity_logit is not None:
                raise WrongSetRole("scattering set cannot carry reflection attributes")
            self.fresnel_logit = None
            self.reflectivity_logit = None
        self.validate()

    def validate(self):
        n = self.centers.shape[0]
        shapes = {
            "centers": (n, 3), "tangent_u": (n, 3), "tangent_v": (n, 3),
            "log_scales": (n, 2), "opacity_logit": (n,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name} has shape {getattr(self, name).shape}, "
                                    f"expected {shape}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n \
                or self.sh_coeffs.shape[2] != 3:
            raise ShapeMismatch(f"sh_coeffs has shape {self.sh_coeffs.shape}")
        k = self.sh_coeffs.shape[1]
        if int(np.sqrt(k)) ** 2 != k:
            raise LengthMismatch(f"{k} SH rows is not a (degree+1)^2 count")
        if self.role == ROLE_REFLECTION:
            if self.fresnel_logit.shape != (n, 3):
                raise ShapeMismatch("fresnel_logit shape mismatch")
            if self.reflectivity_logit.shape != (n,):
                raise ShapeMismatch("reflectivity_logit shape mismatch")

    def __len__(self):
        return self.centers.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(np.sqrt(self.sh_coeffs.shape[1])) - 1

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logit)

    @property
    def fresnel0(self):
        if self.role != ROLE_REFLECTION:
            raise WrongSetRole("fresnel0 only exists on reflection sets")
        return sigmoid(self.fresnel_logit)

    @property
    def reflectivity(self):
        if self.role != ROLE_REFLECTION:
            raise WrongSetRole("reflectivity only exists on reflection sets")
        return sigmoid(self.reflectivity_logit)

    def raw_normals(self):
        """Unnormalized plane normals t_u x t_v, one per disk."""
        return np.cross(self.tangent_u, self.tangent_v)

    def orthonormalize_tangents(self):
        """Gram-Schmidt: unit t_u, then t_v made orthogonal to it and unit.

        Called after every optimizer step; the renderer assumes frames stay
        within round-off of orthonormal between steps.
        """
        nu = np.linalg.norm(self.tangent_u, axis=1, keepdims=True)
        self.tangent_u /= np.maximum(nu, 1e-12)
        dot = np.sum(self.tangent_v * self.tangent_u, axis=1, keepdims=True)
        self.tangent_v -= dot * self.tangent_u
        nv = np.linalg.norm(self.tangent_v, axis=1, keepdims=True)
        self.tangent_v /= np.maximum(nv, 1e-12)

    def disks(self):
        """Materialize per-disk views (copies) for inspection and tests."""
        out = []
        for i in range(len(self)):
            out.append(GaussianDisk(
                center=self.centers[i].copy(),
                tangent_u=self.tangent_u[i].copy(),
                tangent_v=self.tangent_v[i].copy(),
                log_scale_u=float(self.log_scales[i, 0]),
                log_scale_v=float(self.log_scales[i, 1]),
                opacity_logit=float(self.opacity_logit[i]),
                sh_coeffs=self.sh_coeffs[i].copy(),
            ))
        return out

    def refl_attrs(self):
        if self.role != ROLE_REFLECTION:
            raise WrongSetRole("no reflection attributes on a scattering set")
        return [ReflectionAttributes(self.fresnel_logit[i].copy(),
                                     float(self.reflectivity_logit[i]))
                for i in range(len(self))]

    @classmethod
    def from_disks(cls, disks, role=ROLE_SCATTERING, refl_attrs=None):
        n = len(disks)
        k = disks[0].sh_coeffs.shape[0] if n else sh_basis_size(0)
        kwargs = {}
        if role == ROLE_REFLECTION:
            if refl_attrs is None or len(refl_attrs) != n:
                raise WrongSetRole("reflection set needs one attribute row per disk")
            kwargs["fresnel_logit"] = np.array([a.fresnel_logit for a in refl_attrs])
            kwargs["reflectivity_logit"] = np.array(
                [a.reflectivity_logit for a in refl_attrs])
        return cls(
            centers=np.array([d.center for d in disks]).reshape(n, 3),
            tangent_u=np.array([d.tangent_u for d in disks]).reshape(n, 3),
            tangent_v=np.array([d.tangent_v for d in disks]).reshape(n, 3),
            log_scales=np.array([[d.log_scale_u, d.log_scale_v] for d in disks]
                                ).reshape(n, 2),
            opacity_logit=np.array([d.opacity_logit for d in disks]).reshape(n),
            sh_coeffs=np.array([d.sh_coeffs for d in disks]).reshape(n, k, 3),
            role=role, **kwargs)

    def clone(self):
        kwargs = {}
        if self.role == ROLE_REFLECTION:
            kwargs["fresnel_logit"] = self.fresnel_logit.copy()
            kwargs["reflectivity_logit"] = self.reflectivity_logit.copy()
        return GaussianSet(
            self.centers.copy(), self.tangent_u.copy(), self.tangent_v.copy(),
            self.log_scales.copy(), self.opacity_logit.copy(),
            self.sh_coeffs.copy(), role=self.role, **kwargs)


@dataclass
class Camera:
    """Pinhole camera; x right, y down, z forward in camera space.

    rotation/translation map world points to camera space:
    X_cam = rotation @ X_world + translation.
    """

    rotation: np.ndarray        # (3, 3)
    translation: np.ndarray     # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.width < 1 or self.height < 1:
            raise ShapeMismatch("camera resolution must be at least 1x1")
        if abs(np.linalg.det(self.world_to_screen)) < 1e-12:
            raise ShapeMismatch("world-to-screen matrix is singular")

    @property
    def intrinsics(self):
        return (self.fx, self.fy, self.cx, self.cy)

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def world_to_camera(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @property
    def world_to_screen(self) -> np.ndarray:
        """W mapping homogeneous world points to (x*z, y*z, z, 1)."""
        K = np.array([[self.fx, 0.0, self.cx, 0.0],
                      [0.0, self.fy, self.cy, 0.0],
                      [0.0, 0.0, 1.0, 0.0],
                      [0.0, 0.0, 0.0, 1.0]])
        return K @ self.world_to_camera

    def pixel_ray_dirs(self, px, py):
        """World-space ray directions for continuous pixel coords.

        Directions are scaled so the camera-space forward component is 1;
        a point at parameter t along the ray then has view depth exactly t.
        """
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        d = np.stack([(px - self.cx) / self.fx,
                      (py - self.cy) / self.fy,
                      np.ones_like(px)], axis=-1)
        return d @ self.rotation   # == (R^T @ d^T)^T

    def view_depths(self, points):
        """Camera-space z for an (..., 3) array of world points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation[2] + self.translation[2]

    @classmethod
    def look_at(cls, position, target, up, fx, fy, cx, cy, width, height):
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        nr = np.linalg.norm(right)
        if nr < 1e-12:
            raise DegenerateTangents("up vector parallel to view direction")
        right /= nr
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=0)
        return cls(rotation=R, translation=-R @ position,
                   fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)


class EnvironmentMap:
    """Equirectangular radiance map with bilinear sampling.

    Longitude wraps; latitude clamps at the poles.  Row 0 is the +y pole
    (phi = atan2(x, z), theta = asin(y)).
    """

    def __init__(self, texels):
        texels = np.ascontiguousarray(texels, dtype=np.float64)
        if texels.ndim != 3 or texels.shape[2] != 3:
            raise ShapeMismatch("environment texels must be (H, W, 3)")
        if texels.shape[1] != 2 * texels.shape[0]:
            raise ShapeMismatch("equirectangular map requires W = 2H")
        if np.any(texels < 0):
            raise ShapeMismatch("environment radiance must be non-negative")
        self.texels = texels

    @property
    def height(self):
        return self.texels.shape[0]

    @property
    def width(self):
        return self.texels.shape[1]

    @classmethod
    def constant(cls, height=64, value=0.5):
        tex = np.full((height, 2 * height, 3), np.float64(value))
        tex *= np.ones(3)
        return cls(tex)

    def texel_center_direction(self, row, col):
        """Unit direction whose bilinear footprint is exactly texel (row, col)."""
        phi = ((col + 0.5) / self.width - 0.5) * 2.0 * np.pi
        theta = (0.5 - (row + 0.5) / self.height) * np.pi
        ct = np.cos(theta)
        return np.array([ct * np.sin(phi), np.sin(theta), ct * np.cos(phi)])

    def _lookup_coords(self, dirs):
        d = np.asarray(dirs, dtype=np.float64)
        x, y, z = d[..., 0], d[..., 1], d[..., 2]
        phi = np.arctan2(x, z)
        theta = np.arcsin(np.clip(y, -1.0, 1.0))
        u = (phi / (2.0 * np.pi) + 0.5) * self.width - 0.5
        v = (0.5 - theta / np.pi) * self.height - 0.5
        return u, v

    def _bilinear_taps(self, dirs):
        u, v = self._lookup_coords(dirs)
        j0 = np.floor(u)
        fu = u - j0
        j0 = (j0.astype(np.int64)) % self.width
        j1 = (j0 + 1) % self.width
        vc = np.clip(v, 0.0, self.height - 1.0)
        i0 = np.floor(vc).astype(np.int64)
        fv = vc - i0
        i1 = np.minimum(i0 + 1, self.height - 1)
        return i0, i1, j0, j1, fu, fv

    def query(self, dirs):
        """Bilinearly interpolated radiance for (..., 3) unit directions."""
        i0, i1, j0, j1, fu, fv = self._bilinear_taps(dirs)
        t = self.texels
        fu = fu[..., None]
        fv = fv[..., None]
        top = (1.0 - fu) * t[i0, j0] + fu * t[i0, j1]
        bot = (1.0 - fu) * t[i1, j0] + fu * t[i1, j1]
        return (1.0 - fv) * top + fv * bot

    def query_backward(self, dirs, grad_rgb):
        """VJP of query: returns (texel gradient array, direction gradients)."""
        d = np.asarray(dirs, dtype=np.float64)
        g = np.asarray(grad_rgb, dtype=np.float64)
        flat_d = d.reshape(-1, 3)
        flat_g = g.reshape(-1, 3)
        i0, i1, j0, j1, fu, fv = self._bilinear_taps(flat_d)

        grad_tex = np.zeros_like(self.texels)
        w00 = ((1.0 - fu) * (1.0 - fv))[:, None] * flat_g
        w01 = (fu * (1.0 - fv))[:, None] * flat_g
        w10 = ((1.0 - fu) * fv)[:, None] * flat_g
        w11 = (fu * fv)[:, None] * flat_g
        np.add.at(grad_tex, (i0, j0), w00)
        np.add.at(grad_tex, (i0, j1), w01)
        np.add.at(grad_tex, (i1, j0), w10)
        np.add.at(grad_tex, (i1, j1), w11)

        t = self.texels
        # d(value)/dfu and d(value)/dfv from the bilinear expression
        top = (1.0 - fu)[:, None] * t[i0, j0] + fu[:, None] * t[i0, j1]
        bot = (1.0 - fu)[:, None] * t[i1, j0] + fu[:, None] * t[i1, j1]
        dval_dfu = ((1.0 - fv)[:, None] * (t[i0, j1] - t[i0, j0])
                    + fv[:, None] * (t[i1, j1] - t[i1, j0]))
        dval_dfv = bot - top
        gu = np.sum(flat_g * dval_dfu, axis=1)
        gv = np.sum(flat_g * dval_dfv, axis=1)

        # chain to the direction through (phi, theta); dv is zero where the
        # latitude coordinate sits in the clamped pole caps
        x, y, z = flat_d[:, 0], flat_d[:, 1], flat_d[:, 2]
        u, v = self._lookup_coords(flat_d)
        gv = np.where((v > 0.0) & (v < self.height - 1.0), gv, 0.0)
        du_dphi = self.width / (2.0 * np.pi)
        dv_dtheta = -self.height / np.pi
        gphi = gu * du_dphi
        gtheta = gv * dv_dtheta
        r2 = np.maximum(x * x + z * z, 1e-18)
        y_c = np.clip(y, -1.0 + 1e-12, 1.0 - 1e-12)
        dtheta_dy = 1.0 / np.sqrt(1.0 - y_c * y_c)
        grad_dirs = np.zeros_like(flat_d)
        grad_dirs[:, 0] = gphi * z / r2
        grad_dirs[:, 2] = gphi * (-x) / r2
        grad_dirs[:, 1] = gtheta * dtheta_dy
        return grad_tex, grad_dirs.reshape(d.shape)


def env_query(env: EnvironmentMap, dirs):
    """Module-level alias for EnvironmentMap.query."""
    return env.query(dirs)


@dataclass
class FrameBuffers:
    """Per-pixel rasterization outputs, each (H, W[, C]).

    Blended normals are convex-ish combinations of unit disk normals, so
    their length is <= 1; pixels with zero coverage hold exact zeros.
    """

    color: np.ndarray           # (H, W, 3)
    alpha: np.ndarray           # (H, W)
    depth: np.ndarray           # (H, W)
    normal: np.ndarray          # (H, W, 3)
    reflectivity: np.ndarray    # (H, W)
    fresnel0: np.ndarray        # (H, W, 3)
    position: np.ndarray        # (H, W, 3)

    @property
    def height(self):
        return self.color.shape[0]

    @property
    def width(self):
        return self.color.shape[1]

    @classmethod
    def zeros(cls, height, width):
        return cls(
            color=np.zeros((height, width, 3)),
            alpha=np.zeros((height, width)),
            depth=np.zeros((height, width)),
            normal=np.zeros((height, width, 3)),
            reflectivity=np.zeros((height, width)),
            fresnel0=np.zeros((height, width, 3)),
            position=np.zeros((height, width, 3)),
        )


def make_reflection_attrs(n, fresnel0=0.04, reflectivity=0.1):
    """Logit-space attribute arrays for n disks at the given activations."""
    f_logit = np.full((n, 3), logit(fresnel0))
    r_logit = np.full(n, logit(reflectivity))
    return f_logit, r_logit
