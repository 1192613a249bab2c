"""Reflection light field: Fourier-encoded staged-fusion MLP.

The network maps a normalized surface position and a mirrored view
direction to reflected RGB radiance.  The early layers see only the
encoded position; at the fusion layer the hidden features are
concatenated with the encoded direction, and the encoded position is
re-injected through a skip connection.  All five architecture axes
(width, depth, encoding order, skip, staged fusion) are configurable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateBounds, MissingForwardState, ShapeMismatch
from .mathutil import sigmoid


def fourier_encode(p, levels: int):
    """Frequency encoding: per component, (sin(2^l pi p), cos(2^l pi p))
    for l = 0..levels-1.  (B, n) input -> (B, 2*levels*n) output."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    b, n = p.shape
    freqs = (2.0 ** np.arange(levels)) * np.pi
    ang = p[:, :, None] * freqs[None, None, :]          # (B, n, L)
    enc = np.empty((b, n, levels, 2))
    enc[..., 0] = np.sin(ang)
    enc[..., 1] = np.cos(ang)
    return enc.reshape(b, 2 * levels * n)


def fourier_encode_vjp(p, levels: int, grad_enc):
    """VJP of fourier_encode onto p."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    b, n = p.shape
    freqs = (2.0 ** np.arange(levels)) * np.pi
    ang = p[:, :, None] * freqs[None, None, :]
    g = np.asarray(grad_enc).reshape(b, n, levels, 2)
    dp = g[..., 0] * np.cos(ang) * freqs - g[..., 1] * np.sin(ang) * freqs
    return dp.sum(axis=2)


def encoding_dim(n_components: int, levels: int) -> int:
    return 2 * levels * n_components


@dataclass
class LightFieldConfig:
    hidden_dim: int = 256
    depth: int = 8
    enc_levels_pos: int = 12
    enc_levels_dir: int = 12
    use_skip: bool = True
    use_staged_fusion: bool = True
    fusion_layer: Optional[int] = None   # 1-based; default ceil(depth/2)+1

    def resolved_fusion_layer(self) -> int:
        if self.fusion_layer is not None:
            return self.fusion_layer
        return math.ceil(self.depth / 2) + 1


class LightFieldNet:
    """Staged-fusion MLP with hand-written forward and backward passes."""

    def __init__(self, config: LightFieldConfig, bounds_lo, bounds_hi,
                 seed: int = 0):
        self.config = config
        self.bounds_lo = np.asarray(bounds_lo, dtype=np.float64).reshape(3)
        self.bounds_hi = np.asarray(bounds_hi, dtype=np.float64).reshape(3)
        if np.any(self.bounds_hi - self.bounds_lo < 1e-9):
            raise DegenerateBounds(
                f"normalization box has empty extent: lo={self.bounds_lo} "
                f"hi={self.bounds_hi}")
        self.weights = []
        self.biases = []
        rng = np.random.default_rng(seed)
        for d_in, d_out in self.layer_dims():
            bound = math.sqrt(6.0 / d_in)
            self.weights.append(rng.uniform(-bound, bound, (d_in, d_out)))
            self.biases.append(np.zeros(d_out))
        self._cache = None

    # ---- architecture -------------------------------------------------
    @property
    def enc_dim_pos(self):
        return encoding_dim(3, self.config.enc_levels_pos)

    @property
    def enc_dim_dir(self):
        return encoding_dim(3, self.config.enc_levels_dir)

    def fusion_input_dim(self) -> int:
        extra = 0
        if self.config.use_staged_fusion:
            extra += self.enc_dim_dir
        if self.config.use_skip:
            extra += self.enc_dim_pos
        return self.config.hidden_dim + extra

    def layer_dims(self):
        """(d_in, d_out) for every weight matrix, hidden layers then output."""
        cfg = self.config
        fusion = cfg.resolved_fusion_layer()
        dims = []
        for i in range(1, cfg.depth + 1):
            if i == 1:
                d_in = self.enc_dim_pos if cfg.use_staged_fusion \
                    else self.enc_dim_pos + self.enc_dim_dir
                if fusion == 1:
                    d_in = self.fusion_input_dim() - cfg.hidden_dim + d_in
            elif i == fusion:
                d_in = self.fusion_input_dim()
            else:
                d_in = cfg.hidden_dim
            dims.append((d_in, cfg.hidden_dim))
        dims.append((cfg.hidden_dim, 3))
        return dims

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self):
        """Flat name -> array view of every learnable tensor."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params().items()}

    # ---- position normalization ---------------------------------------
    def normalize_position(self, x_world):
        """Map world points into the [-1, 1]^3 box, clamping outside."""
        span = self.bounds_hi - self.bounds_lo
        y = 2.0 * (np.asarray(x_world) - self.bounds_lo) / span - 1.0
        return np.clip(y, -1.0, 1.0)

    def normalize_position_vjp(self, x_world, grad_y):
        span = self.bounds_hi - self.bounds_lo
        y = 2.0 * (np.asarray(x_world) - self.bounds_lo) / span - 1.0
        inside = (y > -1.0) & (y < 1.0)
        return np.where(inside, grad_y * 2.0 / span, 0.0)

    # ---- forward / backward -------------------------------------------
    def forward(self, x_norm, dirs):
        """RGB in (0,1)^3 for (B, 3) normalized positions and unit dirs."""
        x_norm = np.atleast_2d(np.asarray(x_norm, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        if x_norm.shape != dirs.shape or x_norm.shape[1] != 3:
            raise ShapeMismatch(
                f"expected matching (B, 3) inputs, got {x_norm.shape} "
                f"and {dirs.shape}")
        cfg = self.config
        fusion = cfg.resolved_fusion_layer()
        enc_p = fourier_encode(x_norm, cfg.enc_levels_pos)
        enc_d = fourier_encode(dirs, cfg.enc_levels_dir)

        h = enc_p if cfg.use_staged_fusion else np.concatenate(
            [enc_p, enc_d], axis=1)
        inputs = []
        masks = []
        for i in range(1, cfg.depth + 1):
            if i == fusion:
                parts = [h]
                if cfg.use_staged_fusion:
                    parts.append(enc_d)
                if cfg.use_skip:
                    parts.append(enc_p)
                h = np.concatenate(parts, axis=1) if len(parts) > 1 else h
            inputs.append(h)
            z = h @ self.weights[i - 1] + self.biases[i - 1]
            mask = z > 0.0
            masks.append(mask)
            h = np.where(mask, z, 0.0)
        inputs.append(h)
        y = h @ self.weights[-1] + self.biases[-1]
        rgb = sigmoid(y)
        self._cache = {
            "x_norm": x_norm, "dirs": dirs, "enc_p": enc_p, "enc_d": enc_d,
            "inputs": inputs, "masks": masks, "rgb": rgb,
        }
        return rgb

    def backward(self, grad_rgb):
        """Adjoint of the last forward call.

        Returns (weight-gradient dict, grad w.r.t. x_norm, grad w.r.t. dirs).
        """
        cache = self._cache
        grad_rgb = np.atleast_2d(np.asarray(grad_rgb, dtype=np.float64))
        if cache is None:
            raise MissingForwardState("backward called before forward")
        if grad_rgb.shape != cache["rgb"].shape:
            raise MissingForwardState(
                f"grad shape {grad_rgb.shape} does not match the cached "
                f"forward output {cache['rgb'].shape}")
        cfg = self.config
        fusion = cfg.resolved_fusion_layer()
        grads = {}

        rgb = cache["rgb"]
        delta = grad_rgb * rgb * (1.0 - rgb)
        i_out = cfg.depth
        grads[f"W{i_out}"] = cache["inputs"][-1].T @ delta
        grads[f"b{i_out}"] = delta.sum(axis=0)
        g_h = delta @ self.weights[-1].T

        g_enc_p = np.zeros_like(cache["enc_p"])
        g_enc_d = np.zeros_like(cache["enc_d"])
        for i in range(cfg.depth, 0, -1):
            delta = g_h * cache["masks"][i - 1]
            grads[f"W{i - 1}"] = cache["inputs"][i - 1].T @ delta
            grads[f"b{i - 1}"] = delta.sum(axis=0)
            g_in = delta @ self.weights[i - 1].T
            if i == fusion:
                ofs = cfg.hidden_dim if i > 1 else (
                    self.enc_dim_pos if cfg.use_staged_fusion
                    else self.enc_dim_pos + self.enc_dim_dir)
                g_h = g_in[:, :ofs]
                if cfg.use_staged_fusion:
                    g_enc_d += g_in[:, ofs:ofs + self.enc_dim_dir]
                    ofs += self.enc_dim_dir
                if cfg.use_skip:
                    g_enc_p += g_in[:, ofs:ofs + self.enc_dim_pos]
            else:
                g_h = g_in
        if cfg.use_staged_fusion:
            g_enc_p += g_h
        else:
            g_enc_p += g_h[:, :self.enc_dim_pos]
            g_enc_d += g_h[:, self.enc_dim_pos:]

        g_x = fourier_encode_vjp(cache["x_norm"], cfg.enc_levels_pos, g_enc_p)
        g_d = fourier_encode_vjp(cache["dirs"], cfg.enc_levels_dir, g_enc_d)
        return grads, g_x, g_d

    # ---- serialization -------------------------------------------------
    def state_arrays(self):
        """Flat dict of everything needed to rebuild the net."""
        out = {"bounds_lo": self.bounds_lo, "bounds_hi": self.bounds_hi}
        out.update(self.params())
        return out

    def load_state_arrays(self, state):
        self.bounds_lo = np.asarray(state["bounds_lo"], dtype=np.float64)
        self.bounds_hi = np.asarray(state["bounds_hi"], dtype=np.float64)
        for i in range(len(self.weights)):
            self.weights[i] = np.ascontiguousarray(state[f"W{i}"],
                                                   dtype=np.float64)
            self.biases[i] = np.ascontiguousarray(state[f"b{i}"],
                                                  dtype=np.float64)

    def dump_flat(self):
        """Debug dump: (shape header list, flat concatenated float array)."""
        shapes = [(f"W{i}", w.shape) for i, w in enumerate(self.weights)]
        shapes += [(f"b{i}", b.shape) for i, b in enumerate(self.biases)]
        flat = np.concatenate([w.ravel() for w in self.weights]
                              + [b.ravel() for b in self.biases])
        return shapes, flat


def field_forward(net: LightFieldNet, x_norm, dirs):
    """Functional alias for LightFieldNet.forward."""
    return net.forward(x_norm, dirs)


def field_backward(net: LightFieldNet, x_norm, dirs, grad_rgb):
    """Functional alias for LightFieldNet.backward.

    Validates that (x_norm, dirs) match the cached forward inputs.
    """
    cache = net._cache
    if cache is None:
        raise MissingForwardState("backward called before forward")
    x_norm = np.atleast_2d(np.asarray(x_norm, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if not (np.array_equal(x_norm, cache["x_norm"])
            and np.array_equal(dirs, cache["dirs"])):
        raise MissingForwardState(
            "backward inputs differ from the cached forward inputs")
    return net.backward(grad_rgb)
