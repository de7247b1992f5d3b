"""Image losses and quality metrics for (H, W, 3) images in [0, 1]."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _blur(img):
    # separable 11-tap Gaussian per channel, zero padding; self-adjoint
    return gaussian_filter(img, sigma=(SSIM_SIGMA, SSIM_SIGMA, 0), mode="constant", cval=0.0,
                           truncate=SSIM_RADIUS / SSIM_SIGMA)


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    num_l = 2.0 * mx * my + C1
    num_c = 2.0 * sxy + C2
    den_l = mx * mx + my * my + C1
    den_c = sxx + syy + C2
    return mx, my, num_l, num_c, den_l, den_c


def ssim(x, y):
    """Returns ``(mean SSIM, per-pixel map (H, W))``; the map averages channels."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _, _, num_l, num_c, den_l, den_c = _ssim_terms(x, y)
    smap = (num_l * num_c) / (den_l * den_c)
    pix = smap.mean(axis=-1)
    return float(pix.mean()), pix


def ssim_grad(x, y, weight=None) -> np.ndarray:
    """Gradient with respect to ``x`` of ``sum(weight * ssim_map_per_channel)``.

    ``weight`` broadcasts against (H, W, 3); the default gives the gradient
    of the mean SSIM.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if weight is None:
        weight = 1.0 / x.size
    mx, my, num_l, num_c, den_l, den_c = _ssim_terms(x, y)
    s = (num_l * num_c) / (den_l * den_c)
    w = np.broadcast_to(weight, x.shape)
    # partials of the map with respect to mu_x, sigma_x^2 and sigma_xy
    d_mx = w * (2.0 * my * num_c / (den_l * den_c) - s * 2.0 * mx / den_l)
    d_sxx = w * (-s / den_c)
    d_sxy = w * (2.0 * num_l / (den_l * den_c))
    # sigma terms depend on the means too
    d_mx_total = d_mx - 2.0 * mx * d_sxx - my * d_sxy
    return _blur(d_mx_total) + 2.0 * x * _blur(d_sxx) + y * _blur(d_sxy)


def photometric_loss(pred, gt, lam: float = 0.8):
    """``lam * L1 + (1 - lam) * (1 - SSIM)``.

    Returns ``(scalar, per-pixel map (H, W), parts)`` where the map is
    ``lam * mean_c |pred - gt| + (1 - lam) * (1 - ssim_map)`` and ``parts``
    holds the scalar ``l1`` and ``ssim``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    absdiff = np.abs(pred - gt)
    l1 = float(absdiff.mean())
    s, smap = ssim(pred, gt)
    loss = lam * l1 + (1.0 - lam) * (1.0 - s)
    pmap = lam * absdiff.mean(axis=-1) + (1.0 - lam) * (1.0 - smap)
    return loss, pmap, {"l1": l1, "ssim": s}


def photometric_loss_grad(pred, gt, lam: float = 0.8):
    """``(d loss / d pred from L1, d loss / d pred from SSIM)``, both (H, W, 3)."""
    pred = np.asarray(pred, dtype=np.float64)
    g_l1 = lam * np.sign(pred - gt) / pred.size
    g_ssim = -(1.0 - lam) * ssim_grad(pred, gt) if lam < 1.0 else np.zeros_like(pred)
    return g_l1, g_ssim


def mse(x, y) -> float:
    return float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) ** 2))


def psnr(x, y) -> float:
    """PSNR with peak 1.0; ``inf`` when the images are identical."""
    m = mse(x, y)
    return float("inf") if m == 0.0 else float(-10.0 * np.log10(m))


def mae(x, y) -> float:
    return float(np.mean(np.abs(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))))
