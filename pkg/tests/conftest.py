import numpy as np
import pytest

from dualsplat.mathutil import logit
from dualsplat.scene import Camera, GaussianSet, ROLE_REFLECTION, ROLE_SCATTERING


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_orthonormal_tangents(rng, n):
    tu = rng.normal(size=(n, 3))
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = rng.normal(size=(n, 3))
    tv -= np.sum(tv * tu, axis=1, keepdims=True) * tu
    tv /= np.linalg.norm(tv, axis=1, keepdims=True)
    return tu, tv


def make_set(rng, n=5, role=ROLE_SCATTERING, sh_rows=1, center_scale=0.4,
             scale_range=(0.3, 0.7), opacity_range=(0.3, 0.8)):
    tu, tv = random_orthonormal_tangents(rng, n)
    kwargs = {}
    if role == ROLE_REFLECTION:
        kwargs = {"fresnel_logit": logit(rng.uniform(0.1, 0.6, (n, 3))),
                  "reflectivity_logit": logit(rng.uniform(0.2, 0.7, n))}
    return GaussianSet(
        centers=rng.normal(0.0, center_scale, (n, 3)),
        tangent_u=tu, tangent_v=tv,
        log_scales=np.log(rng.uniform(*scale_range, (n, 2))),
        opacity_logit=logit(rng.uniform(*opacity_range, n)),
        sh_coeffs=rng.normal(0.0, 0.15, (n, sh_rows, 3)),
        role=role, **kwargs)


def small_camera(width=16, height=16, distance=3.5, fov_px=30.0):
    return Camera.look_at([0.2, -0.1, -distance], [0.0, 0.0, 0.0],
                          up=(0.0, 1.0, 0.0), fx=fov_px, fy=fov_px,
                          cx=width / 2.0, cy=height / 2.0,
                          width=width, height=height)


@pytest.fixture
def camera16():
    return small_camera()
