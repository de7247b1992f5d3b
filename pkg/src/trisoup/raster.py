"""Depth-tested rasterization of a triangle soup.

Fragments are kept per pixel in a CSR layout: the fragments of pixel
``p = y * width + x`` are ``offsets[p]:offsets[p + 1]``, listed in
ascending triangle index.  Triangles are two-sided; any triangle with a
vertex at or in front of the near plane is culled whole.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .scene import Camera, TriangleSoup
from .texture import ALPHA, N_COLOR, locate

BACKGROUND = -1


@dataclass
class FragmentBuffer:
    width: int
    height: int
    offsets: np.ndarray  # (H*W + 1,) int64
    tri: np.ndarray  # (F,) int64
    bary: np.ndarray  # (F, 2)
    depth: np.ndarray  # (F,)

    def __len__(self):
        return self.tri.shape[0]

    def pixel(self, x: int, y: int):
        """``(tri, bary, depth)`` of the fragments covering pixel ``(x, y)``."""
        p = y * self.width + x
        s = slice(self.offsets[p], self.offsets[p + 1])
        return self.tri[s], self.bary[s], self.depth[s]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets).reshape(self.height, self.width)


@dataclass
class ProjectedSoup:
    cam_vertices: np.ndarray  # (T, 3, 3) camera space
    screen: np.ndarray  # (T, 3, 2)
    depth: np.ndarray  # (T, 3)
    valid: np.ndarray  # (T,) bool


def project_soup(vertices: np.ndarray, camera: Camera) -> ProjectedSoup:
    pc = camera.to_camera(vertices)
    d = pc[..., 2]
    valid = np.all(d > camera.near, axis=-1)
    safe = np.where(d > camera.near, d, 1.0)
    sx = camera.fx * pc[..., 0] / safe + camera.cx
    sy = camera.fy * pc[..., 1] / safe + camera.cy
    return ProjectedSoup(pc, np.stack([sx, sy], axis=-1), d, valid)


@njit(cache=True)
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@njit(cache=True)
def _owns_boundary(ax, ay, bx, by, sign):
    # Fill rule on the orientation-normalized edge direction; a shared
    # edge is traversed in opposite directions by its two triangles.
    dx = (bx - ax) * sign
    dy = (by - ay) * sign
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


@njit(cache=True)
def covers(screen_t, px, py):
    """Pixel-center coverage test and screen-space weights of one triangle."""
    x0, y0 = screen_t[0, 0], screen_t[0, 1]
    x1, y1 = screen_t[1, 0], screen_t[1, 1]
    x2, y2 = screen_t[2, 0], screen_t[2, 1]
    area = _edge(x0, y0, x1, y1, x2, y2)
    if area == 0.0:
        return False, 0.0, 0.0, 0.0
    sign = 1.0 if area > 0.0 else -1.0
    w0 = _edge(x1, y1, x2, y2, px, py) * sign
    w1 = _edge(x2, y2, x0, y0, px, py) * sign
    w2 = _edge(x0, y0, x1, y1, px, py) * sign
    if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
        return False, 0.0, 0.0, 0.0
    if w0 == 0.0 and not _owns_boundary(x1, y1, x2, y2, sign):
        return False, 0.0, 0.0, 0.0
    if w1 == 0.0 and not _owns_boundary(x2, y2, x0, y0, sign):
        return False, 0.0, 0.0, 0.0
    if w2 == 0.0 and not _owns_boundary(x0, y0, x1, y1, sign):
        return False, 0.0, 0.0, 0.0
    inv = 1.0 / (area * sign)
    return True, w0 * inv, w1 * inv, w2 * inv


@njit(cache=True)
def perspective_bary(l0, l1, l2, d0, d1, d2):
    """Perspective-correct ``(b1, b2, depth)`` from screen-space weights."""
    q0 = l0 / d0
    q1 = l1 / d1
    q2 = l2 / d2
    s = q0 + q1 + q2
    return q1 / s, q2 / s, 1.0 / s


@njit(cache=True)
def _bbox(screen_t, width, height):
    xmin = min(screen_t[0, 0], screen_t[1, 0], screen_t[2, 0])
    xmax = max(screen_t[0, 0], screen_t[1, 0], screen_t[2, 0])
    ymin = min(screen_t[0, 1], screen_t[1, 1], screen_t[2, 1])
    ymax = max(screen_t[0, 1], screen_t[1, 1], screen_t[2, 1])
    x0 = max(0, int(np.floor(xmin - 0.5)))
    x1 = min(width - 1, int(np.ceil(xmax - 0.5)))
    y0 = max(0, int(np.floor(ymin - 0.5)))
    y1 = min(height - 1, int(np.ceil(ymax - 0.5)))
    return x0, x1, y0, y1


@njit(cache=True)
def _rasterize(screen, depth, valid, width, height, near):
    n_tri = screen.shape[0]
    counts = np.zeros(width * height + 1, dtype=np.int64)
    for t in range(n_tri):
        if not valid[t]:
            continue
        x0, x1, y0, y1 = _bbox(screen[t], width, height)
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                hit, l0, l1, l2 = covers(screen[t], x + 0.5, y + 0.5)
                if hit:
                    b1, b2, d = perspective_bary(l0, l1, l2, depth[t, 0], depth[t, 1], depth[t, 2])
                    if d > near:
                        counts[y * width + x + 1] += 1
    offsets = np.cumsum(counts)
    total = offsets[-1]
    tri = np.empty(total, dtype=np.int64)
    bary = np.empty((total, 2), dtype=np.float64)
    dep = np.empty(total, dtype=np.float64)
    cursor = offsets[:-1].copy()
    for t in range(n_tri):
        if not valid[t]:
            continue
        x0, x1, y0, y1 = _bbox(screen[t], width, height)
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                hit, l0, l1, l2 = covers(screen[t], x + 0.5, y + 0.5)
                if hit:
                    b1, b2, d = perspective_bary(l0, l1, l2, depth[t, 0], depth[t, 1], depth[t, 2])
                    if d > near:
                        p = y * width + x
                        k = cursor[p]
                        tri[k] = t
                        bary[k, 0] = b1
                        bary[k, 1] = b2
                        dep[k] = d
                        cursor[p] = k + 1
    return offsets, tri, bary, dep


def rasterize(soup_or_vertices, camera: Camera, projected: ProjectedSoup | None = None) -> FragmentBuffer:
    """Every pixel-center fragment of every visible triangle."""
    verts = soup_or_vertices.vertices if isinstance(soup_or_vertices, TriangleSoup) else soup_or_vertices
    proj = project_soup(verts, camera) if projected is None else projected
    offsets, tri, bary, dep = _rasterize(np.ascontiguousarray(proj.screen), np.ascontiguousarray(proj.depth),
                                         proj.valid, camera.width, camera.height, camera.near)
    return FragmentBuffer(camera.width, camera.height, offsets, tri, bary, dep)


@njit(cache=True)
def fragment_logits(tri, bary, effective, channel, n):
    """Pre-sigmoid value of one texture channel at every fragment."""
    out = np.empty(tri.shape[0])
    for k in range(tri.shape[0]):
        a, b, c, w0, w1, w2 = locate(bary[k, 0], bary[k, 1], n)
        e = effective[tri[k]]
        out[k] = w0 * e[a, channel] + w1 * e[b, channel] + w2 * e[c, channel]
    return out


def fragment_alphas(frags: FragmentBuffer, textures) -> np.ndarray:
    z = fragment_logits(frags.tri, frags.bary, textures.effective, ALPHA, 1 << textures.r_max)
    if textures.activated:
        return z
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


@njit(cache=True)
def _select_threshold(offsets, tri, depth, alpha, threshold):
    n_pix = offsets.shape[0] - 1
    winner = np.full(n_pix, -1, dtype=np.int64)
    for p in range(n_pix):
        best = -1
        for k in range(offsets[p], offsets[p + 1]):
            if alpha[k] > threshold:
                if best < 0 or depth[k] < depth[best] or (depth[k] == depth[best] and tri[k] < tri[best]):
                    best = k
        winner[p] = best
    return winner


def select_deterministic(depths, alphas, tris=None) -> int:
    """Index of the nearest fragment with alpha > 0.5, or ``BACKGROUND``.

    One pass with a running minimum; equal depths go to the smaller
    triangle index.
    """
    best = BACKGROUND
    for k, (d, a) in enumerate(zip(depths, alphas)):
        if a > 0.5:
            if best == BACKGROUND or d < depths[best] or (
                    d == depths[best] and tris is not None and tris[k] < tris[best]):
                best = k
    return best


def deterministic_winners(frags: FragmentBuffer, alphas: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Fragment index of the winner at every pixel (-1 for background), flat (H*W,)."""
    return _select_threshold(frags.offsets, frags.tri, frags.depth, alphas, threshold)


@njit(cache=True)
def gather_features(winner, tri, bary, effective, n):
    """Pre-sigmoid 8-channel feature of the winning fragment at each pixel."""
    out = np.zeros((winner.shape[0], effective.shape[2]))
    for p in range(winner.shape[0]):
        k = winner[p]
        if k < 0:
            continue
        a, b, c, w0, w1, w2 = locate(bary[k, 0], bary[k, 1], n)
        e = effective[tri[k]]
        for ch in range(effective.shape[2]):
            out[p, ch] = w0 * e[a, ch] + w1 * e[b, ch] + w2 * e[c, ch]
    return out


def shade_winners(winner, frags: FragmentBuffer, textures, net, camera: Camera, background):
    """RGB (H*W, 3) of the given winners; also returns features and view dirs."""
    from .shading import shade

    feats = gather_features(winner, frags.tri, frags.bary, textures.effective, 1 << textures.r_max)
    if not textures.activated:
        feats = 0.5 * (np.tanh(0.5 * feats) + 1.0)
    dirs = camera.pixel_rays().reshape(-1, 3)
    rgb = np.empty((winner.shape[0], 3))
    rgb[:] = background
    fg = winner >= 0
    if np.any(fg):
        rgb[fg] = shade(feats[fg, :N_COLOR], dirs[fg], net)
    return rgb, feats, dirs


def render_deterministic(soup: TriangleSoup, camera: Camera, net, background):
    """Binary-opacity render: ``(rgb (H,W,3), tri ids (H,W), depth (H,W))``."""
    frags = rasterize(soup, camera)
    alphas = fragment_alphas(frags, soup.textures)
    winner = deterministic_winners(frags, alphas)
    rgb, _, _ = shade_winners(winner, frags, soup.textures, net, camera,
                              np.asarray(background, dtype=np.float64))
    fg = winner >= 0
    ids = np.full(winner.shape, -1, dtype=np.int64)
    ids[fg] = frags.tri[winner[fg]]
    depth = np.full(winner.shape, np.inf)
    depth[fg] = frags.depth[winner[fg]]
    h, w = camera.height, camera.width
    return rgb.reshape(h, w, 3), ids.reshape(h, w), depth.reshape(h, w)
