"""Small numeric helpers: stable logistic maps, vector calculus, SH basis.

Everything operates on float64 numpy arrays and is written so that each
forward routine has a matching vector-Jacobian product (``*_vjp``) used by
the hand-rolled backward passes elsewhere in the package.
"""

from __future__ import annotations

import numpy as np

from .errors import LengthMismatch


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(y):
    """Derivative of the logistic expressed through its output y."""
    return y * (1.0 - y)


def logit(p):
    """Inverse of :func:`sigmoid`; p must lie strictly inside (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_rows(v, eps=1e-12):
    """Normalize the last axis of v; rows shorter than eps map to zero."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > eps, v / np.maximum(n, eps), 0.0)


def normalize_rows_vjp(v, grad_unit, eps=1e-12):
    """VJP of normalize_rows: pulls grad on the unit vector back onto v."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.maximum(n, eps)
    u = v / safe
    proj = np.sum(grad_unit * u, axis=-1, keepdims=True)
    g = (grad_unit - proj * u) / safe
    return np.where(n > eps, g, 0.0)


def cross_vjp(a, b, grad_c):
    """VJPs of c = a x b (last-axis cross product)."""
    return np.cross(b, grad_c), np.cross(grad_c, a)


# Real spherical harmonics, hardcoded through degree 3 (the usual splatting
# polynomial table).  Basis index k runs over (l, m) in the standard order.
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
          0.3731763325901154, -0.4570457994644658, 1.445305721320277,
          -0.5900435899266435)

MAX_SH_DEGREE = 3


def sh_basis_size(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs, degree: int):
    """Evaluate the real SH basis at unit directions.

    dirs: (..., 3) unit vectors.  Returns (..., (degree+1)^2).
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise LengthMismatch(f"SH degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    cols = [np.full_like(x, _SH_C0)]
    if degree >= 1:
        cols += [-_SH_C1 * y, _SH_C1 * z, -_SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            _SH_C2[0] * x * y,
            _SH_C2[1] * y * z,
            _SH_C2[2] * (2.0 * zz - xx - yy),
            _SH_C2[3] * x * z,
            _SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            _SH_C3[0] * y * (3.0 * xx - yy),
            _SH_C3[1] * x * y * z,
            _SH_C3[2] * y * (4.0 * zz - xx - yy),
            _SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            _SH_C3[4] * x * (4.0 * zz - xx - yy),
            _SH_C3[5] * z * (xx - yy),
            _SH_C3[6] * x * (xx - yy),
        ]
    return np.stack(cols, axis=-1)


def sh_basis_grad(dirs, degree: int):
    """Gradient of each basis function w.r.t. the (unnormalized) direction.

    Returns (..., K, 3) with K = (degree+1)^2.  The chain rule through
    direction normalization is the caller's job.
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise LengthMismatch(f"SH degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)

    def vec(gx, gy, gz):
        return np.stack([gx, gy, gz], axis=-1)

    rows = [vec(zero, zero, zero)]
    if degree >= 1:
        rows += [
            vec(zero, np.full_like(x, -_SH_C1), zero),
            vec(zero, zero, np.full_like(x, _SH_C1)),
            vec(np.full_like(x, -_SH_C1), zero, zero),
        ]
    if degree >= 2:
        rows += [
            vec(_SH_C2[0] * y, _SH_C2[0] * x, zero),
            vec(zero, _SH_C2[1] * z, _SH_C2[1] * y),
            vec(-2.0 * _SH_C2[2] * x, -2.0 * _SH_C2[2] * y, 4.0 * _SH_C2[2] * z),
            vec(_SH_C2[3] * z, zero, _SH_C2[3] * x),
            vec(2.0 * _SH_C2[4] * x, -2.0 * _SH_C2[4] * y, zero),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            vec(6.0 * _SH_C3[0] * x * y, _SH_C3[0] * (3.0 * xx - 3.0 * yy), zero),
            vec(_SH_C3[1] * y * z, _SH_C3[1] * x * z, _SH_C3[1] * x * y),
            vec(-2.0 * _SH_C3[2] * x * y, _SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
                8.0 * _SH_C3[2] * y * z),
            vec(-6.0 * _SH_C3[3] * x * z, -6.0 * _SH_C3[3] * y * z,
                _SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)),
            vec(_SH_C3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * _SH_C3[4] * x * y,
                8.0 * _SH_C3[4] * x * z),
            vec(2.0 * _SH_C3[5] * x * z, -2.0 * _SH_C3[5] * y * z,
                _SH_C3[5] * (xx - yy)),
            vec(_SH_C3[6] * (3.0 * xx - yy), -2.0 * _SH_C3[6] * x * y, zero),
        ]
    return np.stack(rows, axis=-2)
