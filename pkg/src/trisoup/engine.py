"""Training-time differentiable rasterization of a whole view.

Forward: rasterize, draw one threshold per fragment from a counter-based
RNG keyed by ``(seed, iteration, view, pixel, fragment slot)``, keep the
nearest surviving fragment per pixel and shade it.

Backward, all accumulated into the pre-sigmoid finest texture lattice
(``grad_effective``), the shading net and the vertices:

* color: the exact color of each sampled winner, through the shading net,
  the sigmoid and the winner's interpolation weights;
* opacity: the score term ``pixel_loss * d log p / d alpha`` for every
  fragment of the pixel, applied in logit space, where it reads
  ``(1 - alpha)`` for the winner and ``-alpha`` for fragments in front;
* motion: edge gradients on every horizontally or vertically adjacent pixel
  pair whose winners differ.  The nearer winner's boundary crosses the
  segment between the two pixel centers at a parameter ``e`` (0 at the
  nearer winner's pixel).  The pixel containing the crossing is modelled as
  a box-filtered blend of the two colors whose coverage grows one-for-one
  with ``e``.  For a geometric silhouette ``e`` is the intersection with the
  triangle edge; pairs are only taken along the axis most perpendicular to
  the edge.  When the nearer triangle also covers the other pixel (an
  opacity-induced boundary), ``e = (a_p - 0.5) / (a_p - a_q)`` on its alpha
  field, and both axes contribute with weight 1/2.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .metrics import photometric_loss, photometric_loss_grad
from .raster import (FragmentBuffer, ProjectedSoup, covers, fragment_logits, gather_features,
                     project_soup, rasterize)
from .scene import Camera, TriangleSoup
from .shading import ShadingNet, shade, shade_backward
from .stochastic import counter_uniform
from .texture import ALPHA, N_CHANNELS, N_COLOR, locate, locate_grad


@njit(cache=True)
def stochastic_winners(offsets, tri, depth, alpha, seed, iteration, view):
    n_pix = offsets.shape[0] - 1
    winner = np.full(n_pix, -1, dtype=np.int64)
    for p in range(n_pix):
        best = -1
        for k in range(offsets[p], offsets[p + 1]):
            tau = counter_uniform(seed, iteration, view, p, k - offsets[p])
            if alpha[k] > tau:
                if best < 0 or depth[k] < depth[best] or (depth[k] == depth[best] and tri[k] < tri[best]):
                    best = k
        winner[p] = best
    return winner


@dataclass
class StochasticRenderBuffers:
    camera: Camera
    frags: FragmentBuffer
    proj: ProjectedSoup
    alpha: np.ndarray  # per fragment
    winner: np.ndarray  # (H*W,) fragment index or -1
    features: np.ndarray  # (H*W, 8) post-activation feature of the winner
    rgb: np.ndarray  # (H*W, 3)
    dirs: np.ndarray  # (H*W, 3)
    background: np.ndarray

    @property
    def image(self) -> np.ndarray:
        return self.rgb.reshape(self.camera.height, self.camera.width, 3)

    def winner_tri(self) -> np.ndarray:
        ids = np.full(self.winner.shape, -1, dtype=np.int64)
        fg = self.winner >= 0
        ids[fg] = self.frags.tri[self.winner[fg]]
        return ids


@dataclass
class GradientBuffers:
    effective: np.ndarray  # (T, P, 8) pre-sigmoid finest lattice
    vertices: np.ndarray  # (T, 3, 3) world space
    net: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, n_tri: int, n_points: int) -> "GradientBuffers":
        return cls(np.zeros((n_tri, n_points, N_CHANNELS)), np.zeros((n_tri, 3, 3)),
                   {k: 0.0 for k in ("W1", "b1", "W2", "b2", "W3", "b3")})

    def add(self, other: "GradientBuffers", scale: float = 1.0):
        self.effective += scale * other.effective
        self.vertices += scale * other.vertices
        for k, v in other.net.items():
            self.net[k] = self.net[k] + scale * v


def _activate(z, activated):
    return z if activated else 0.5 * (np.tanh(0.5 * z) + 1.0)


def render_stochastic(soup: TriangleSoup, net: ShadingNet, camera: Camera, background,
                      seed: int, iteration: int, view: int) -> StochasticRenderBuffers:
    tex = soup.textures
    proj = project_soup(soup.vertices, camera)
    frags = rasterize(soup.vertices, camera, proj)
    n = 1 << tex.r_max
    alpha = _activate(fragment_logits(frags.tri, frags.bary, tex.effective, ALPHA, n), tex.activated)
    winner = stochastic_winners(frags.offsets, frags.tri, frags.depth, alpha,
                                np.uint64(seed), np.uint64(iteration), np.uint64(view))
    feats = _activate(gather_features(winner, frags.tri, frags.bary, tex.effective, n), tex.activated)
    dirs = camera.pixel_rays().reshape(-1, 3)
    background = np.asarray(background, dtype=np.float64)
    rgb = np.empty((winner.shape[0], 3))
    rgb[:] = background
    fg = winner >= 0
    if np.any(fg):
        rgb[fg] = shade(feats[fg, :N_COLOR], dirs[fg], net)
    return StochasticRenderBuffers(camera, frags, proj, alpha, winner, feats, rgb, dirs, background)


@njit(cache=True)
def _scatter_features(winner, tri, bary, g_pre, n, out):
    for p in range(winner.shape[0]):
        k = winner[p]
        if k < 0:
            continue
        a, b, c, w0, w1, w2 = locate(bary[k, 0], bary[k, 1], n)
        t = tri[k]
        for ch in range(g_pre.shape[1]):
            g = g_pre[p, ch]
            if g != 0.0:
                out[t, a, ch] += w0 * g
                out[t, b, ch] += w1 * g
                out[t, c, ch] += w2 * g


def backprop_color(buf: StochasticRenderBuffers, grad_rgb, net: ShadingNet, r_max: int,
                   activated: bool, out: np.ndarray):
    """Chain ``dL/d rgb`` (H*W, 3) into ``out`` (finest lattice) and return net gradients."""
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64).reshape(-1, 3)
    fg = buf.winner >= 0
    net_grads = {k: np.zeros_like(v) for k, v in net.params().items()}
    if not np.any(fg):
        return net_grads
    feats = buf.features[fg]
    g_feat, net_grads = shade_backward(feats[:, :N_COLOR], buf.dirs[fg], net, grad_rgb[fg])
    g_pre = np.zeros((buf.winner.shape[0], N_COLOR))
    if activated:
        g_pre[fg] = g_feat
    else:
        f = feats[:, :N_COLOR]
        g_pre[fg] = g_feat * f * (1.0 - f)
    _scatter_features(buf.winner, buf.frags.tri, buf.frags.bary, g_pre, 1 << r_max, out)
    return net_grads


@njit(cache=True)
def _score_backward(offsets, tri, bary, depth, alpha, winner, weight, n, activated, out):
    for p in range(winner.shape[0]):
        w = weight[p]
        if w == 0.0:
            continue
        kw = winner[p]
        for k in range(offsets[p], offsets[p + 1]):
            a = alpha[k]
            if k == kw:
                # d log p / d alpha = 1 / alpha
                g = w * (1.0 - a) if not activated else w / max(a, 1e-6)
            elif kw < 0 or depth[k] < depth[kw] or (depth[k] == depth[kw] and tri[k] < tri[kw]):
                # d log p / d alpha = -1 / (1 - alpha)
                g = -w * a if not activated else -w / max(1.0 - a, 1e-6)
            else:
                continue
            i0, i1, i2, w0, w1, w2 = locate(bary[k, 0], bary[k, 1], n)
            t = tri[k]
            out[t, i0, ALPHA] += w0 * g
            out[t, i1, ALPHA] += w1 * g
            out[t, i2, ALPHA] += w2 * g


def backprop_score(buf: StochasticRenderBuffers, pixel_loss, r_max: int, activated: bool,
                   out: np.ndarray):
    """Add ``pixel_loss[p] * d log p(winner) / d (alpha logit)`` for every fragment."""
    weight = np.ascontiguousarray(np.asarray(pixel_loss, dtype=np.float64).reshape(-1))
    f = buf.frags
    _score_backward(f.offsets, f.tri, f.bary, f.depth, buf.alpha, buf.winner, weight,
                    1 << r_max, activated, out)


def fragment_score_gradients(buf: StochasticRenderBuffers, pixel_loss, eps: float = 1e-6) -> np.ndarray:
    """Per-fragment alpha gradient of the score term (alpha space, clamped)."""
    f = buf.frags
    weight = np.asarray(pixel_loss, dtype=np.float64).reshape(-1)
    out = np.zeros(len(f))
    a = np.clip(buf.alpha, eps, 1.0 - eps)
    for p in range(buf.winner.shape[0]):
        kw = buf.winner[p]
        for k in range(f.offsets[p], f.offsets[p + 1]):
            if k == kw:
                out[k] = weight[p] / a[k]
            elif kw < 0 or (f.depth[k], f.tri[k]) < (f.depth[kw], f.tri[kw]):
                out[k] = -weight[p] / (1.0 - a[k])
    return out


# ---------------------------------------------------------------------------
# edge gradients
# ---------------------------------------------------------------------------

@njit(cache=True)
def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


@njit(cache=True)
def _ray_bary(v, rx, ry):
    """Barycentrics of the camera ray ``(rx, ry, 1)`` on triangle ``v`` (3, 3).

    Returns ``b1, b2`` and the two rows of ``M^-1`` with ``M = [-d, e1, e2]``;
    ``d(b1, b2) / d v_k = -w_k * rows``.
    """
    c0 = np.array([-rx, -ry, -1.0])
    c1 = v[1] - v[0]
    c2 = v[2] - v[0]
    r1 = np.cross(c2, c0)
    r2 = np.cross(c0, c1)
    det = np.dot(c0, np.cross(c1, c2))
    if det == 0.0:
        return False, 0.0, 0.0, r1, r2
    r1 = r1 / det
    r2 = r2 / det
    rhs = -v[0]
    return True, np.dot(r1, rhs), np.dot(r2, rhs), r1, r2


@njit(cache=True)
def _alpha_and_grad(v, eff_t, n, activated, rx, ry, g_out):
    """Alpha of ``eff_t`` at the ray hit and ``d alpha / d v`` written into ``g_out`` (3, 3)."""
    ok, b1, b2, r1, r2 = _ray_bary(v, rx, ry)
    if not ok:
        return False, 0.0
    a, b, c, w0, w1, w2 = locate(b1, b2, n)
    z = w0 * eff_t[a, ALPHA] + w1 * eff_t[b, ALPHA] + w2 * eff_t[c, ALPHA]
    zb1, zb2 = locate_grad(b1, b2, n, eff_t[a, ALPHA], eff_t[b, ALPHA], eff_t[c, ALPHA])
    if activated:
        alpha = z
        ds = 1.0
    else:
        alpha = 0.5 * (np.tanh(0.5 * z) + 1.0)
        ds = alpha * (1.0 - alpha)
    wts = (1.0 - b1 - b2, b1, b2)
    for k in range(3):
        for j in range(3):
            g_out[k, j] = -wts[k] * ds * (zb1 * r1[j] + zb2 * r2[j])
    return True, alpha


@njit(cache=True)
def _edge_crossing(screen_t, p0x, p0y, ux, uy):
    """First edge of the triangle crossed by the unit segment from ``p0`` along ``u``."""
    for e in range(3):
        ax, ay = screen_t[e, 0], screen_t[e, 1]
        bx, by = screen_t[(e + 1) % 3, 0], screen_t[(e + 1) % 3, 1]
        ex, ey = bx - ax, by - ay
        den = _cross(ux, uy, ex, ey)
        if den == 0.0:
            continue
        mx, my = ax - p0x, ay - p0y
        t = _cross(mx, my, ex, ey) / den
        r = _cross(mx, my, ux, uy) / den
        if 0.0 <= t <= 1.0 and 0.0 <= r <= 1.0:
            return e, t
    return -1, 0.0


@njit(cache=True)
def crossing_grad(ax, ay, bx, by, p0x, p0y, ux, uy):
    """``d t / d a`` and ``d t / d b`` of the segment/edge intersection parameter."""
    ex, ey = bx - ax, by - ay
    mx, my = ax - p0x, ay - p0y
    den = _cross(ux, uy, ex, ey)
    t = _cross(mx, my, ex, ey) / den
    dax = ((ey + my) - t * uy) / den
    day = ((-ex - mx) + t * ux) / den
    dbx = (-my + t * uy) / den
    dby = (mx - t * ux) / den
    return dax, day, dbx, dby


@njit(cache=True)
def _boundary(width, height, winner, tri, depth, rgb, gt, g_extra, l1_scale,
              screen, cam_verts, effective, n, activated, fx, fy, cx, cy, out):
    ga = np.zeros((3, 3))
    gb = np.zeros((3, 3))
    for y in range(height):
        for x in range(width):
            p = y * width + x
            for axis in range(2):
                if axis == 0:
                    if x + 1 >= width:
                        continue
                    q = p + 1
                else:
                    if y + 1 >= height:
                        continue
                    q = p + width
                kp = winner[p]
                kq = winner[q]
                tp = tri[kp] if kp >= 0 else -1
                tq = tri[kq] if kq >= 0 else -1
                if tp == tq:
                    continue
                dp = depth[kp] if kp >= 0 else np.inf
                dq = depth[kq] if kq >= 0 else np.inf
                if tq < 0 or (tp >= 0 and (dp < dq or (dp == dq and tp < tq))):
                    pn, po, sgn = p, q, 1.0
                else:
                    pn, po, sgn = q, p, -1.0
                t = tri[winner[pn]]
                ux = sgn if axis == 0 else 0.0
                uy = sgn if axis == 1 else 0.0
                p0x = (pn % width) + 0.5
                p0y = (pn // width) + 0.5
                p1x = p0x + ux
                p1y = p0y + uy
                inside, _, _, _ = covers(screen[t], p1x, p1y)
                if not inside:
                    e, tt = _edge_crossing(screen[t], p0x, p0y, ux, uy)
                    if e < 0:
                        continue
                    i0 = e
                    i1 = (e + 1) % 3
                    ex = screen[t, i1, 0] - screen[t, i0, 0]
                    ey = screen[t, i1, 1] - screen[t, i0, 1]
                    # dominant axis: horizontal pairs for steep edges, vertical for flat ones
                    if axis == 0 and abs(ey) < abs(ex):
                        continue
                    if axis == 1 and abs(ex) <= abs(ey):
                        continue
                    e_par = tt
                    weight = 1.0
                else:
                    rpx = (p0x - cx) / fx
                    rpy = (p0y - cy) / fy
                    rqx = (p1x - cx) / fx
                    rqy = (p1y - cy) / fy
                    ok1, ap = _alpha_and_grad(cam_verts[t], effective[t], n, activated, rpx, rpy, ga)
                    ok2, aq = _alpha_and_grad(cam_verts[t], effective[t], n, activated, rqx, rqy, gb)
                    if not (ok1 and ok2):
                        continue
                    delta = ap - aq
                    if delta == 0.0:
                        continue
                    e_par = (ap - 0.5) / delta
                    if e_par < 0.0 or e_par > 1.0:
                        continue
                    weight = 0.5

                # loss slope along e: the pixel holding the crossing blends the two colors
                if e_par >= 0.5:
                    pk = po
                    cov = e_par - 0.5
                else:
                    pk = pn
                    cov = e_par + 0.5
                dl = 0.0
                for ch in range(3):
                    cn = rgb[pn, ch]
                    co = rgb[po, ch]
                    blend = cov * cn + (1.0 - cov) * co
                    r = blend - gt[pk, ch]
                    s = 1.0 if r > 0.0 else (-1.0 if r < 0.0 else 0.0)
                    dl += (l1_scale * s + g_extra[pk, ch]) * (cn - co)
                if dl == 0.0:
                    continue
                dl *= weight

                if not inside:
                    ax_, ay_ = screen[t, i0, 0], screen[t, i0, 1]
                    bx_, by_ = screen[t, i1, 0], screen[t, i1, 1]
                    dax, day, dbx, dby = crossing_grad(ax_, ay_, bx_, by_, p0x, p0y, ux, uy)
                    for vi, gx, gy in ((i0, dax, day), (i1, dbx, dby)):
                        X = cam_verts[t, vi, 0]
                        Y = cam_verts[t, vi, 1]
                        Z = cam_verts[t, vi, 2]
                        out[t, vi, 0] += dl * gx * fx / Z
                        out[t, vi, 1] += dl * gy * fy / Z
                        out[t, vi, 2] += dl * (-gx * fx * X - gy * fy * Y) / (Z * Z)
                else:
                    inv = 1.0 / (delta * delta)
                    cp = (0.5 - aq) * inv
                    cq = (ap - 0.5) * inv
                    for k in range(3):
                        for j in range(3):
                            out[t, k, j] += dl * (cp * ga[k, j] + cq * gb[k, j])


def boundary_gradients(buf: StochasticRenderBuffers, gt, effective, r_max: int, activated: bool,
                       lam: float = 0.8, grad_extra=None) -> np.ndarray:
    """World-space vertex gradients (T, 3, 3) from edge gradients on adjacent pixel pairs.

    The L1 part of the loss (weight ``lam``) is differentiated at the
    blended color of the pixel holding the crossing; ``grad_extra`` (H*W, 3)
    adds any other per-pixel color gradient (the SSIM part during training).
    """
    cam = buf.camera
    gt = np.ascontiguousarray(np.asarray(gt, dtype=np.float64).reshape(-1, 3))
    n_pix = gt.shape[0]
    extra = np.zeros((n_pix, 3)) if grad_extra is None else np.ascontiguousarray(
        np.asarray(grad_extra, dtype=np.float64).reshape(-1, 3))
    out = np.zeros((buf.proj.screen.shape[0], 3, 3))
    if out.shape[0] == 0:
        return out
    _boundary(cam.width, cam.height, buf.winner, buf.frags.tri, buf.frags.depth, buf.rgb, gt, extra,
              lam / (3.0 * n_pix), np.ascontiguousarray(buf.proj.screen),
              np.ascontiguousarray(buf.proj.cam_vertices), effective, 1 << r_max, activated,
              cam.fx, cam.fy, cam.cx, cam.cy, out)
    return out @ cam.rotation


def view_gradients(soup: TriangleSoup, net: ShadingNet, camera: Camera, gt, background,
                   lam: float, seed: int, iteration: int, view: int,
                   score_loss: str = "combined"):
    """Stochastic render of one view plus every gradient of its photometric loss.

    Returns ``(GradientBuffers, loss_info, buffers)``.
    """
    tex = soup.textures
    buf = render_stochastic(soup, net, camera, background, seed, iteration, view)
    img = buf.image
    gt = np.asarray(gt, dtype=np.float64)
    loss, pmap, parts = photometric_loss(img, gt, lam)
    g_l1, g_ssim = photometric_loss_grad(img, gt, lam)
    grad_rgb = (g_l1 + g_ssim).reshape(-1, 3)

    grads = GradientBuffers.zeros(len(soup), tex.n_finest)
    grads.net = backprop_color(buf, grad_rgb, net, tex.r_max, tex.activated, grads.effective)
    if score_loss == "combined":
        ploss = pmap
    elif score_loss == "l1":
        ploss = np.abs(img - gt).mean(axis=-1)
    else:
        raise ValueError(f"unknown score_loss {score_loss!r}")
    backprop_score(buf, ploss / ploss.size, tex.r_max, tex.activated, grads.effective)
    grads.vertices = boundary_gradients(buf, gt, tex.effective, tex.r_max, tex.activated, lam,
                                        g_ssim.reshape(-1, 3))
    info = {"loss": loss, "l1": parts["l1"], "ssim": parts["ssim"]}
    return grads, info, buf
