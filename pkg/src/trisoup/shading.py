"""Neural deferred shading.

A pixel's 7 color features and the degree-2 SH encoding of its view
direction (9 values) feed a shared 16-16-16-3 MLP (ReLU hidden, sigmoid
output).  Feature channels 0-3 are read as RGBA and blended with the MLP
color: ``A * RGB + (1 - A) * mlp``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SH_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))
SH_C1 = 0.4886025119029199  # sqrt(3 / (4 pi))
SH_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)

N_IN = 16
N_HIDDEN = 16

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@dataclass
class ShadingNet:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @classmethod
    def xavier(cls, rng: np.random.Generator) -> "ShadingNet":
        def glorot(fan_out, fan_in):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_out, fan_in))

        return cls(glorot(N_HIDDEN, N_IN), np.zeros(N_HIDDEN),
                   glorot(N_HIDDEN, N_HIDDEN), np.zeros(N_HIDDEN),
                   glorot(3, N_HIDDEN), np.zeros(3))

    @classmethod
    def zeros(cls) -> "ShadingNet":
        return cls(np.zeros((N_HIDDEN, N_IN)), np.zeros(N_HIDDEN),
                   np.zeros((N_HIDDEN, N_HIDDEN)), np.zeros(N_HIDDEN),
                   np.zeros((3, N_HIDDEN)), np.zeros(3))

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "ShadingNet":
        return ShadingNet(**{k: v.copy() for k, v in self.params().items()})


def sh_encode(dirs) -> np.ndarray:
    """Real spherical harmonics up to degree 2 of directions (..., 3) -> (..., 9)."""
    d = np.asarray(dirs, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[0] * y * z,
        SH_C2[1] * (3.0 * z * z - 1.0),
        SH_C2[0] * x * z,
        SH_C2[2] * (x * x - y * y),
    ], axis=-1)


def _forward(features, dirs, net: ShadingNet):
    x = np.concatenate([features, sh_encode(dirs)], axis=-1)
    a1 = x @ net.W1.T + net.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ net.W2.T + net.b2
    h2 = np.maximum(a2, 0.0)
    mlp = _sigmoid(h2 @ net.W3.T + net.b3)
    return x, a1, h1, a2, h2, mlp


def shade(features, dirs, net: ShadingNet) -> np.ndarray:
    """Final RGB of features (..., 7) seen along unit directions (..., 3)."""
    features = np.asarray(features, dtype=np.float64)
    *_, mlp = _forward(features, dirs, net)
    a = features[..., 3:4]
    return a * features[..., :3] + (1.0 - a) * mlp


def shade_backward(features, dirs, net: ShadingNet, grad_rgb):
    """Reverse-mode gradients of ``sum(shade(...) * grad_rgb)``.

    Returns ``(grad_features (..., 7), grad_params dict)``; parameter
    gradients are summed over all leading axes.
    """
    features = np.asarray(features, dtype=np.float64)
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    x, a1, h1, a2, h2, mlp = _forward(features, dirs, net)
    a = features[..., 3:4]

    g_feat = np.zeros_like(features)
    g_feat[..., :3] = a * grad_rgb
    g_feat[..., 3] = np.sum(grad_rgb * (features[..., :3] - mlp), axis=-1)

    g_o = grad_rgb * (1.0 - a) * mlp * (1.0 - mlp)
    g_h2 = g_o @ net.W3
    g_a2 = g_h2 * (a2 > 0.0)
    g_h1 = g_a2 @ net.W2
    g_a1 = g_h1 * (a1 > 0.0)
    g_x = g_a1 @ net.W1
    g_feat += g_x[..., :7]

    def outer(g, inp):
        return g.reshape(-1, g.shape[-1]).T @ inp.reshape(-1, inp.shape[-1])

    lead = tuple(range(g_o.ndim - 1))
    grads = {
        "W1": outer(g_a1, x), "b1": g_a1.sum(axis=lead),
        "W2": outer(g_a2, h1), "b2": g_a2.sum(axis=lead),
        "W3": outer(g_o, h2), "b3": g_o.sum(axis=lead),
    }
    return g_feat, grads
