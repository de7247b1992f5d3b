"""Stochastic opacity masking on a single pixel's fragment list.

Each fragment draws an independent threshold ``tau ~ U[0, 1)`` and
survives when ``alpha > tau``; the pixel shows the nearest survivor.  The
winner is therefore a random variable with

    p(f) = alpha_f * prod_{g in front of f} (1 - alpha_g),
    p(background) = prod_f (1 - alpha_f),

and ``d log p(f) / d alpha_g`` is ``1 / alpha_f`` for ``g == f``,
``-1 / (1 - alpha_g)`` for ``g`` in front of ``f``, and zero otherwise.
Background behaves as a fragment at infinite depth.

"In front" is the strict order on ``(depth, triangle index)``, which is
also how the rasterizer breaks depth ties.  Nothing here sorts except the
enumeration oracles.
"""
from __future__ import annotations

import numpy as np
from numba import njit

BACKGROUND = -1
ALPHA_EPS = 1e-6

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@njit(cache=True)
def _mix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def counter_uniform(seed, iteration, view, pixel, slot):
    """Uniform [0, 1) keyed by ``(seed, iteration, view, pixel, slot)``."""
    h = _mix(np.uint64(seed))
    h = _mix(h ^ np.uint64(iteration))
    h = _mix(h ^ np.uint64(view))
    h = _mix(h ^ np.uint64(pixel))
    h = _mix(h ^ np.uint64(slot))
    return float(h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


def _tris(depths, tris):
    return np.arange(len(depths)) if tris is None else np.asarray(tris)


def in_front(depths, tris=None) -> np.ndarray:
    """``m[g, f]`` is True when fragment ``g`` is strictly in front of ``f``."""
    d = np.asarray(depths, dtype=np.float64)
    t = _tris(d, tris)
    return (d[:, None] < d[None, :]) | ((d[:, None] == d[None, :]) & (t[:, None] < t[None, :]))


def sample_stochastic(depths, alphas, taus, tris=None):
    """Winner index for thresholds ``taus``: shape (F,) -> int, (N, F) -> (N,).

    Single pass over the fragments with a running depth minimum.
    """
    depths = np.asarray(depths, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64)
    t = _tris(depths, tris)
    single = taus.ndim == 1
    taus = np.atleast_2d(taus)
    best = np.full(taus.shape[0], BACKGROUND, dtype=np.int64)
    best_d = np.full(taus.shape[0], np.inf)
    best_t = np.full(taus.shape[0], np.iinfo(np.int64).max)
    for k in range(depths.shape[0]):
        ok = (alphas[k] > taus[:, k]) & (
            (depths[k] < best_d) | ((depths[k] == best_d) & (t[k] < best_t)))
        best = np.where(ok, k, best)
        best_d = np.where(ok, depths[k], best_d)
        best_t = np.where(ok, t[k], best_t)
    return int(best[0]) if single else best


def draw_winners(depths, alphas, rng: np.random.Generator, n: int, tris=None) -> np.ndarray:
    taus = rng.random((n, len(depths)))
    return sample_stochastic(depths, alphas, taus, tris)


def score_terms(depths, alphas, winner, tris=None, eps: float = ALPHA_EPS) -> np.ndarray:
    """``d log p(winner) / d alpha`` per fragment; ``winner`` may be an array.

    Alphas are clamped into ``[eps, 1 - eps]`` before dividing.
    """
    depths = np.asarray(depths, dtype=np.float64)
    a = np.clip(np.asarray(alphas, dtype=np.float64), eps, 1.0 - eps)
    winner = np.asarray(winner)
    front = in_front(depths, tris)
    # background acts as a fragment behind everything
    front_bg = np.concatenate([front, np.ones((len(depths), 1), dtype=bool)], axis=1)
    col = np.where(winner < 0, len(depths), winner)
    is_front = front_bg[:, col].T  # (..., F)
    is_winner = np.arange(len(depths)) == winner[..., None]
    return np.where(is_winner, 1.0 / a, np.where(is_front, -1.0 / (1.0 - a), 0.0))


def score_gradients(depths, alphas, winner, pixel_loss, tris=None) -> np.ndarray:
    """Per-fragment alpha gradient of the score term, ``loss * d log p / d alpha``."""
    return np.asarray(pixel_loss)[..., None] * score_terms(depths, alphas, winner, tris)


# ---------------------------------------------------------------------------
# oracles (may sort)
# ---------------------------------------------------------------------------

def selection_probability(alphas_sorted, target) -> float:
    """``p(target)`` for depth-sorted alphas; ``target < 0`` is background."""
    a = np.asarray(alphas_sorted, dtype=np.float64)
    if target < 0:
        return float(np.prod(1.0 - a))
    return float(a[target] * np.prod(1.0 - a[:target]))


def outcome_probabilities(depths, alphas, tris=None) -> np.ndarray:
    """Probabilities of each fragment (input order) followed by background."""
    depths = np.asarray(depths, dtype=np.float64)
    t = _tris(depths, tris)
    order = np.lexsort((t, depths))
    a = np.asarray(alphas, dtype=np.float64)[order]
    p = np.empty(len(depths) + 1)
    for rank, k in enumerate(order):
        p[k] = selection_probability(a, rank)
    p[-1] = selection_probability(a, BACKGROUND)
    return p


def l1_pixel_loss(color, gt):
    return float(np.mean(np.abs(np.asarray(color) - np.asarray(gt))))


def expected_loss_and_gradient(depths, alphas, colors, gt, background, loss=l1_pixel_loss, tris=None):
    """Exact expected pixel loss and its derivative with respect to each alpha.

    Enumerates the ``F + 1`` outcomes and differentiates the closed-form
    product weights.
    """
    depths = np.asarray(depths, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    n = len(depths)
    t = _tris(depths, tris)
    order = np.lexsort((t, depths))
    losses = np.array([loss(c, gt) for c in np.asarray(colors)[order]] + [loss(background, gt)])
    a = alphas[order]

    def weight(f, skip=None):
        # transmittance in front of f (or everything for background), optionally skipping one factor
        stop = n if f < 0 else f
        w = 1.0
        for g in range(stop):
            if g != skip:
                w *= 1.0 - a[g]
        return w

    expected = sum(a[f] * weight(f) * losses[f] for f in range(n)) + weight(-1) * losses[n]
    grad_sorted = np.zeros(n)
    for g in range(n):
        acc = weight(g) * losses[g]
        for f in range(g + 1, n):
            acc -= a[f] * weight(f, skip=g) * losses[f]
        acc -= weight(-1, skip=g) * losses[n]
        grad_sorted[g] = acc
    grad = np.empty(n)
    grad[order] = grad_sorted
    return float(expected), grad


def expected_color(depths, alphas, colors, background, tris=None) -> np.ndarray:
    p = outcome_probabilities(depths, alphas, tris)
    return p[:-1] @ np.asarray(colors, dtype=np.float64) + p[-1] * np.asarray(background)


def reference_sorted_winner(depths, alphas, taus, tris=None) -> int:
    """Depth-sort then scan: the textbook counterpart of ``sample_stochastic``."""
    depths = np.asarray(depths, dtype=np.float64)
    t = _tris(depths, tris)
    for k in np.lexsort((t, depths)):
        if alphas[k] > taus[k]:
            return int(k)
    return BACKGROUND


def reference_sorted_scores(depths, alphas, winner, tris=None, eps: float = ALPHA_EPS) -> np.ndarray:
    depths = np.asarray(depths, dtype=np.float64)
    a = np.clip(np.asarray(alphas, dtype=np.float64), eps, 1.0 - eps)
    t = _tris(depths, tris)
    s = np.zeros(len(depths))
    for k in np.lexsort((t, depths)):
        if k == winner:
            s[k] = 1.0 / a[k]
            break
        s[k] = -1.0 / (1.0 - a[k])
    return s

