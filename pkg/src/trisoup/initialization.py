"""Initial triangle soups: from a point cloud or uniformly inside a box."""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from .scene import TriangleSoup
from .texture import TextureGridSet


def fps(points, k: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; starts from a seeded random point."""
    pts = np.asarray(points, dtype=np.float64)
    if not 0 < k <= len(pts):
        raise ValueError(f"cannot pick {k} of {len(pts)} points")
    rng = np.random.default_rng(seed)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(len(pts))
    dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for i in range(1, k):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(pts - pts[chosen[i]], axis=1))
    return chosen


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` uniformly distributed rotation matrices (from random unit quaternions)."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def equilateral(centers, radius, rng: np.random.Generator) -> np.ndarray:
    """Equilateral triangles (N, 3, 3) of circumradius ``radius`` with random orientation."""
    centers = np.asarray(centers, dtype=np.float64)
    ang = 2.0 * np.pi * np.arange(3) / 3.0
    local = np.stack([np.cos(ang), np.sin(ang), np.zeros(3)], axis=-1)  # (3, 3)
    rot = random_rotations(len(centers), rng)
    radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), (len(centers),))
    return centers[:, None, :] + radius[:, None, None] * np.einsum("nij,kj->nki", rot, local)


def init_triangles(points, target_count: int, seed: int = 0, r_min: int = 3,
                   r_max: int = 3) -> TriangleSoup:
    """Seeds: two thirds by farthest-point sampling, the rest uniformly at random.

    Circumradius is a quarter of the mean nearest-neighbor distance between
    the seeds.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < target_count:
        raise ValueError(f"need at least {target_count} points, got {len(pts)}")
    rng = np.random.default_rng(seed)
    n_fps = min(math.ceil(2 * target_count / 3), target_count)
    seeds = fps(pts, n_fps, seed)
    rest = np.setdiff1d(np.arange(len(pts)), seeds)
    extra = rng.choice(rest, target_count - n_fps, replace=False)
    centers = pts[np.concatenate([seeds, extra])]
    if len(centers) > 1:
        d, _ = cKDTree(centers).query(centers, k=2)
        radius = 0.25 * float(d[:, 1].mean())
    else:
        radius = 0.01
    verts = equilateral(centers, radius, rng)
    return TriangleSoup(verts, TextureGridSet.zeros(target_count, r_min, r_max))


def init_random_bbox(bbox, target_count: int, radius: float = 0.01, seed: int = 0,
                     r_min: int = 3, r_max: int = 3) -> TriangleSoup:
    """Uniform seeds inside ``bbox = (lo, hi)`` with a fixed circumradius."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    if np.any(hi < lo):
        raise ValueError("bbox upper corner below lower corner")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(lo, hi, size=(target_count, 3))
    verts = equilateral(centers, radius, rng)
    return TriangleSoup(verts, TextureGridSet.zeros(target_count, r_min, r_max))
