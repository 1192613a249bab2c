"""Training losses and evaluation metrics.

The photometric loss blends L1 with structural dissimilarity
(1 - SSIM)/2 under an 11x11 sigma-1.5 Gaussian window; the same per-pixel
error map feeds the high-frequency loss, which averages the error over
the pixels above its nearest-rank percentile threshold (selection treated
as constant in the backward pass).  Metrics: PSNR (capped at a 99 dB
sentinel), SSIM, and mean angular error in degrees over a mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, ShapeMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_n_refl: float = 0.15
    lambda_n_scat: float = 0.05
    lambda_hf: float = 0.1
    hf_percentile: float = 90.0
    epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("lambda_dssim", "lambda_n_refl", "lambda_n_scat",
                     "lambda_hf", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.hf_percentile < 100.0:
            raise ValueError("hf_percentile must lie in (0, 100)")


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _filter2(img, kernel=_KERNEL):
    """Separable same-size zero-padded filtering of an (H, W) image."""
    r = kernel.size // 2
    h, w = img.shape
    pad = np.zeros((h + 2 * r, w))
    pad[r:r + h] = img
    tmp = np.zeros((h, w))
    for t in range(kernel.size):
        tmp += kernel[t] * pad[t:t + h]
    pad2 = np.zeros((h, w + 2 * r))
    pad2[:, r:r + w] = tmp
    out = np.zeros((h, w))
    for t in range(kernel.size):
        out += kernel[t] * pad2[:, t:t + w]
    return out


def _ssim_channel_stats(x, y):
    ux = _filter2(x)
    uy = _filter2(y)
    uxx = _filter2(x * x)
    uyy = _filter2(y * y)
    uxy = _filter2(x * y)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    a1 = 2.0 * ux * uy + c1
    a2 = 2.0 * (uxy - ux * uy) + c2
    b1 = ux * ux + uy * uy + c1
    b2 = (uxx - ux * ux) + (uyy - uy * uy) + c2
    return ux, uy, a1, a2, b1, b2


def ssim_map(pred, gt):
    """Per-pixel, per-channel SSIM map for images in [0, 1]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"ssim shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[:, :, None]
        gt = gt[:, :, None]
    out = np.empty_like(pred)
    for c in range(pred.shape[2]):
        _, _, a1, a2, b1, b2 = _ssim_channel_stats(pred[:, :, c], gt[:, :, c])
        out[:, :, c] = (a1 * a2) / (b1 * b2)
    return out


def ssim(pred, gt) -> float:
    """Mean windowed SSIM over pixels and channels."""
    return float(np.mean(ssim_map(pred, gt)))


def _ssim_backward_channel(x, y, gmap):
    """Gradient of sum(gmap * ssim_map_channel) w.r.t. x."""
    ux, uy, a1, a2, b1, b2 = _ssim_channel_stats(x, y)
    s = (a1 * a2) / (b1 * b2)
    d_ux = 2.0 * uy * (a2 - a1) / (b1 * b2) - 2.0 * ux * s * (1.0 / b1 - 1.0 / b2)
    d_uxx = -s / b2
    d_uxy = 2.0 * a1 / (b1 * b2)
    # adjoint of filtering is filtering with the same symmetric kernel
    gx = _filter2(gmap * d_ux)
    gx += 2.0 * x * _filter2(gmap * d_uxx)
    gx += y * _filter2(gmap * d_uxy)
    return gx


def rgb_loss(pred, gt, lam: float):
    """Photometric loss and its per-pixel error map.

    loss = (1-lam)*mean|pred-gt| + lam*(1-SSIM)/2, and the returned map
    e satisfies mean(e) == loss (so the high-frequency loss can reuse it).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"rgb_loss shapes differ: {pred.shape} vs {gt.shape}")
    l1_map = np.mean(np.abs(pred - gt), axis=-1)
    if lam > 0.0:
        smap = np.mean(ssim_map(pred, gt), axis=-1)
    else:
        smap = np.ones_like(l1_map)
    e = (1.0 - lam) * l1_map + lam * (1.0 - smap) / 2.0
    return float(np.mean(e)), e


def rgb_error_backward(pred, gt, lam: float, grad_e):
    """Gradient of sum(grad_e * e) w.r.t. pred, e from rgb_loss.

    Passing grad_e = 1/(H*W) gives the gradient of the scalar loss.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    grad_e = np.asarray(grad_e, dtype=np.float64)
    c = pred.shape[-1]
    g = np.sign(pred - gt) * ((1.0 - lam) / c) * grad_e[:, :, None]
    if lam > 0.0:
        gmap = grad_e * (-lam / (2.0 * c))
        for ch in range(c):
            g[:, :, ch] += _ssim_backward_channel(pred[:, :, ch],
                                                  gt[:, :, ch], gmap)
    return g


def normal_loss(blended_normal, depth_normal, alpha):
    """Mean (1 - n . n_hat) over pixels with coverage and both normals set."""
    n = np.asarray(blended_normal, dtype=np.float64)
    nh = np.asarray(depth_normal, dtype=np.float64)
    valid = _normal_valid_mask(n, nh, alpha)
    count = int(np.count_nonzero(valid))
    if count == 0:
        return 0.0
    dots = np.sum(n * nh, axis=-1)
    return float(np.sum((1.0 - dots)[valid]) / count)


def _normal_valid_mask(n, nh, alpha):
    return ((np.asarray(alpha) >= 0.5)
            & (np.linalg.norm(n, axis=-1) > 1e-8)
            & (np.linalg.norm(nh, axis=-1) > 1e-8))


def normal_loss_backward(blended_normal, depth_normal, alpha):
    """Gradients of normal_loss w.r.t. both normal maps."""
    n = np.asarray(blended_normal, dtype=np.float64)
    nh = np.asarray(depth_normal, dtype=np.float64)
    valid = _normal_valid_mask(n, nh, alpha)
    count = max(int(np.count_nonzero(valid)), 1)
    scale = valid[:, :, None] / count
    return -nh * scale, -n * scale


def hf_threshold(e, valid_mask, percentile: float) -> float:
    """Nearest-rank percentile of the error over valid pixels."""
    vals = np.asarray(e)[np.asarray(valid_mask, dtype=bool)]
    if vals.size == 0:
        raise EmptyMask("no valid pixels for the high-frequency threshold")
    rank = max(1, int(np.ceil(percentile / 100.0 * vals.size)))
    return float(np.sort(vals, kind="stable")[rank - 1])


def hf_loss(e, valid_mask, percentile: float, epsilon: float = 1e-8):
    """Mean error over the pixels whose error strictly exceeds the
    nearest-rank percentile threshold."""
    e = np.asarray(e, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    tau = hf_threshold(e, valid, percentile)
    sel = valid & (e > tau)
    total = float(np.sum(e[sel]))
    return total / (np.count_nonzero(sel) + epsilon)


def hf_loss_backward(e, valid_mask, percentile: float, epsilon: float = 1e-8):
    """Gradient of hf_loss w.r.t. e with the selection and threshold frozen."""
    e = np.asarray(e, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    tau = hf_threshold(e, valid, percentile)
    sel = valid & (e > tau)
    return sel / (np.count_nonzero(sel) + epsilon)


def total_loss(l_color, l_n_refl, l_n_scat, l_hf, weights: LossWeights) -> float:
    """Weighted sum of the loss components."""
    return float(l_color
                 + weights.lambda_n_refl * l_n_refl
                 + weights.lambda_n_scat * l_n_scat
                 + weights.lambda_hf * l_hf)


PSNR_SENTINEL = 99.0


def psnr(pred, gt) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"psnr shapes differ: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse <= 0.0:
        return PSNR_SENTINEL
    return min(10.0 * np.log10(1.0 / mse), PSNR_SENTINEL)


def mae_degrees(pred_normals, gt_normals, mask) -> float:
    """Mean angular error in degrees between unit normal maps over a mask."""
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        raise EmptyMask("mean angular error needs a non-empty mask")
    dots = np.sum(np.asarray(pred_normals, dtype=np.float64)
                  * np.asarray(gt_normals, dtype=np.float64), axis=-1)
    ang = np.degrees(np.arccos(np.clip(dots[mask], -1.0, 1.0)))
    return float(np.mean(ang))
