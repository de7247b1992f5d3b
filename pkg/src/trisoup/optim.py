"""Adam, VectorAdam and the exponential learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class Moments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, param: np.ndarray, vector: bool = False) -> "Moments":
        v_shape = param.shape[:-1] if vector else param.shape
        return cls(np.zeros_like(param), np.zeros(v_shape))

    def select(self, keep) -> "Moments":
        return Moments(self.m[keep], self.v[keep], self.t)

    def append_zeros(self, n: int) -> "Moments":
        m = np.concatenate([self.m, np.zeros((n,) + self.m.shape[1:])])
        v = np.concatenate([self.v, np.zeros((n,) + self.v.shape[1:])])
        return Moments(m, v, self.t)


def adam_step(param, grad, mom: Moments, lr: float, beta1=BETA1, beta2=BETA2, eps=EPS) -> np.ndarray:
    """In-place Adam update with bias correction; returns ``param``."""
    mom.t += 1
    mom.m *= beta1
    mom.m += (1.0 - beta1) * grad
    mom.v *= beta2
    mom.v += (1.0 - beta2) * grad * grad
    m_hat = mom.m / (1.0 - beta1 ** mom.t)
    v_hat = mom.v / (1.0 - beta2 ** mom.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


def vectoradam_step(param, grad, mom: Moments, lr: float, beta1=BETA1, beta2=BETA2, eps=EPS) -> np.ndarray:
    """Adam whose second moment tracks the squared norm of each trailing 3-vector.

    ``param`` and ``grad`` have shape (..., 3); ``mom.v`` has shape (...).
    The update of each vector is a positive multiple of its first moment,
    so rotating every gradient rotates every update.
    """
    mom.t += 1
    mom.m *= beta1
    mom.m += (1.0 - beta1) * grad
    mom.v *= beta2
    mom.v += (1.0 - beta2) * np.sum(grad * grad, axis=-1)
    m_hat = mom.m / (1.0 - beta1 ** mom.t)
    v_hat = mom.v / (1.0 - beta2 ** mom.t)
    param -= lr * m_hat / (np.sqrt(v_hat)[..., None] + eps)
    return param


def lr_at(iteration: int, lr0: float, total: int, decay: float = 100.0) -> float:
    """Exponential anneal from ``lr0`` to ``lr0 / decay`` over ``total`` iterations."""
    if total <= 0:
        return lr0
    return lr0 * decay ** (-iteration / total)
