"""Structural edits of the soup: edge splits, coverage pruning, random-init resampling.

Every edit returns the new soup together with ``source``: for each new
triangle, the index of the triangle it continues (its parameters and
optimizer state carry over), or -1 for a freshly created one.
"""
from __future__ import annotations

import numpy as np

from .raster import deterministic_winners, fragment_alphas, project_soup, rasterize
from .scene import Camera, TriangleSoup
from .texture import TextureGridSet, interpolate, lattice_coords


def projected_edge_lengths(vertices, cameras: list[Camera]) -> np.ndarray:
    """Per-edge pixel length (T, 3), maximised over views; edge ``e`` joins ``e`` and ``e+1``.

    Views where the triangle is clipped by the near plane do not count.
    """
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3, 3)
    out = np.zeros((vertices.shape[0], 3))
    for cam in cameras:
        proj = project_soup(vertices, cam)
        s = proj.screen
        lengths = np.linalg.norm(np.roll(s, -1, axis=1) - s, axis=-1)
        lengths[~proj.valid] = 0.0
        np.maximum(out, lengths, out=out)
    return out


def coverage_counts(soup: TriangleSoup, cameras: list[Camera]) -> np.ndarray:
    """Pixels where each triangle is the deterministic winner, summed over views."""
    counts = np.zeros(len(soup), dtype=np.int64)
    if len(soup) == 0:
        return counts
    for cam in cameras:
        frags = rasterize(soup.vertices, cam)
        win = deterministic_winners(frags, fragment_alphas(frags, soup.textures))
        counts += np.bincount(frags.tri[win[win >= 0]], minlength=len(soup))
    return counts


def _child_textures(textures: TextureGridSet, parent: int, corners: np.ndarray) -> dict[int, np.ndarray]:
    """Finest-level lattice of a child whose corners sit at parent barycentric weights ``corners`` (3, 3)."""
    r = textures.r_max
    c = lattice_coords(r)  # (P, 2) child (b1, b2)
    w = np.column_stack([1.0 - c[:, 0] - c[:, 1], c[:, 0], c[:, 1]]) @ corners
    sampled = interpolate(textures.effective[parent], w[:, 1:], r)
    return {lv: (sampled if lv == r else np.zeros_like(arr[parent]))
            for lv, arr in textures.levels.items()}


def split_triangles(soup: TriangleSoup, tris, edges) -> tuple[TriangleSoup, np.ndarray]:
    """Split each ``tris[i]`` at the midpoint of its edge ``edges[i]``.

    The first child replaces the parent in place, the second is appended.
    Both children start with fresh parameters: their finest level samples
    the parent's pre-sigmoid field, coarser levels are zero.
    """
    tris = np.asarray(tris, dtype=np.int64)
    edges = np.asarray(edges, dtype=np.int64)
    n = len(soup)
    source = np.concatenate([np.arange(n), np.full(len(tris), -1)])
    if len(tris) == 0:
        return soup.copy(), source
    verts = np.concatenate([soup.vertices, np.zeros((len(tris), 3, 3))])
    levels = {r: np.concatenate([v, np.zeros((len(tris),) + v.shape[1:])])
              for r, v in soup.textures.levels.items()}
    eye = np.eye(3)
    for i, (t, e) in enumerate(zip(tris, edges)):
        a, b, o = e, (e + 1) % 3, (e + 2) % 3
        mid = 0.5 * (eye[a] + eye[b])
        for slot, corners in ((t, np.stack([eye[a], mid, eye[o]])),
                              (n + i, np.stack([mid, eye[b], eye[o]]))):
            verts[slot] = corners @ soup.vertices[t]
            for r, arr in _child_textures(soup.textures, t, corners).items():
                levels[r][slot] = arr
        source[t] = -1
    tex = TextureGridSet(levels, soup.textures.r_min, soup.textures.r_max, soup.textures.activated)
    return TriangleSoup(verts, tex), source


def split_long_edges(soup: TriangleSoup, cameras: list[Camera], threshold_fraction: float = 0.2):
    """Split every triangle whose longest projected edge exceeds ``threshold_fraction * height``."""
    if len(soup) == 0:
        return soup.copy(), np.arange(0)
    lengths = projected_edge_lengths(soup.vertices, cameras)
    limit = threshold_fraction * cameras[0].height
    longest = lengths.max(axis=1)
    tris = np.flatnonzero(longest > limit)
    return split_triangles(soup, tris, lengths[tris].argmax(axis=1))


def prune_to_budget(soup: TriangleSoup, coverage, budget: int):
    """Drop the lowest-coverage triangles (ties: lower index first) until at most ``budget`` remain."""
    n = len(soup)
    if n <= budget:
        return soup.copy(), np.arange(n)
    order = np.lexsort((np.arange(n), np.asarray(coverage)))
    keep = np.sort(order[n - budget:])
    return soup.select(keep), keep


def resample_random_init(soup: TriangleSoup, coverage, budget: int, cameras: list[Camera]):
    """Remove never-visible triangles, then split the longest projected edge until ``budget`` is met.

    If no triangle is visible the soup is left unpruned, so the count never
    drops to zero.
    """
    coverage = np.asarray(coverage)
    keep = np.flatnonzero(coverage > 0)
    if len(keep) == 0:
        keep = np.arange(len(soup))
    cur = soup.select(keep)
    source = keep
    if len(cur) > budget:
        cur, sub = prune_to_budget(cur, coverage[keep], budget)
        source = source[sub]
    if len(cur) == 0:
        return cur, source
    lengths = projected_edge_lengths(cur.vertices, cameras)
    while len(cur) < budget:
        t = int(np.argmax(lengths.max(axis=1)))
        e = int(np.argmax(lengths[t]))
        cur, sub = split_triangles(cur, [t], [e])
        source = np.where(sub >= 0, source[np.maximum(sub, 0)], -1)
        lengths = np.concatenate([lengths, np.zeros((1, 3))])
        lengths[[t, -1]] = projected_edge_lengths(cur.vertices[[t, -1]], cameras)
    return cur, source
