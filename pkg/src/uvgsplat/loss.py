"""Training losses and evaluation metrics.

All loss terms are differentiable graph nodes; the metric functions are
plain numpy. SSIM uses an 11x11 gaussian window (sigma 1.5), stability
constants for unit dynamic range, and valid (unpadded) windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 99.0


@dataclass
class LossWeights:
    recon: float = 100.0
    laplacian: float = 500.0
    l1: float = 1.0
    ssim: float = 0.2
    perceptual: float = 0.2   # slot weight; term is active only with a slot fn
    scale: float = 1.0
    res: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


# -- mesh terms -----------------------------------------------------------------

_ADJ_CACHE = {}


def _laplacian_matrix(faces, n):
    key = (id(faces), n)
    hit = _ADJ_CACHE.get(key)
    if hit is not None and hit[0] is faces:
        return hit[1]
    adj = np.zeros((n, n), dtype=bool)
    for a, b, c in faces:
        adj[a, b] = adj[b, a] = True
        adj[b, c] = adj[c, b] = True
        adj[a, c] = adj[c, a] = True
    deg = adj.sum(axis=1)
    if np.any(deg == 0):
        bad = int(np.nonzero(deg == 0)[0][0])
        raise ValueError(f"isolated vertex {bad} has no neighbors")
    lap = np.eye(n) - adj / deg[:, None]
    _ADJ_CACHE[key] = (faces, lap)
    return lap


def laplacian_coords(vertices, faces):
    """delta_p = p - mean of 1-ring neighbors, as an [N,3] map."""
    n = vertices.data.shape[0] if isinstance(vertices, T.Tensor) else len(vertices)
    lap = _laplacian_matrix(faces, n)
    if isinstance(vertices, T.Tensor):
        return T.matmul(T.constant(lap), vertices)
    return lap @ np.asarray(vertices)


def mesh_loss(refined, gt, faces, weights):
    """recon * sum ||gt - refined||^2 + laplacian * sum ||d_gt - d_refined||^2."""
    gt = np.asarray(gt)
    shape = refined.data.shape if isinstance(refined, T.Tensor) else np.shape(refined)
    if tuple(shape) != gt.shape:
        raise ValueError(f"mesh topology mismatch: {tuple(shape)} vs {gt.shape}")
    refined_t = refined if isinstance(refined, T.Tensor) else T.constant(refined)
    diff = refined_t - T.constant(gt)
    recon = T.reduce_sum(T.square(diff))
    dref = laplacian_coords(refined_t, faces)
    dgt = laplacian_coords(gt, faces)
    lap = T.reduce_sum(T.square(dref - T.constant(dgt)))
    return T.scale(recon, weights.recon) + T.scale(lap, weights.laplacian)


# -- image terms ----------------------------------------------------------------


def _ssim_kernel():
    half = SSIM_WINDOW // 2
    x = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    return win.reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)


_SSIM_K = _ssim_kernel()


def _ssim_maps(x, y):
    """Per-channel SSIM maps over valid windows; x, y are [C,H,W] Tensors."""
    k = T.constant(_SSIM_K)
    maps = []
    c = x.data.shape[0]
    for ch in range(c):
        xc = T.narrow(x, 0, ch, 1)
        yc = T.narrow(y, 0, ch, 1)
        mu1 = T.conv2d(xc, k)
        mu2 = T.conv2d(yc, k)
        mu1_sq = T.square(mu1)
        mu2_sq = T.square(mu2)
        mu12 = mu1 * mu2
        s1 = T.conv2d(T.square(xc), k) - mu1_sq
        s2 = T.conv2d(T.square(yc), k) - mu2_sq
        s12 = T.conv2d(xc * yc, k) - mu12
        num = (T.scale(mu12, 2.0) + SSIM_C1) * (T.scale(s12, 2.0) + SSIM_C2)
        den = (mu1_sq + mu2_sq + SSIM_C1) * (s1 + s2 + SSIM_C2)
        maps.append(T.div(num, den))
    return maps


def ssim(render, gt):
    """Mean SSIM as a differentiable scalar; inputs [C,H,W]."""
    render_t = render if isinstance(render, T.Tensor) else T.constant(render)
    gt_t = gt if isinstance(gt, T.Tensor) else T.constant(gt)
    maps = _ssim_maps(render_t, gt_t)
    total = T.reduce_mean(maps[0])
    for m in maps[1:]:
        total = total + T.reduce_mean(m)
    return T.scale(total, 1.0 / len(maps))


def gradient_magnitude_proxy(render, gt):
    """Optional perceptual-slot stand-in: L1 between image gradient magnitudes."""
    kx = T.constant(np.array([[[[0.0, 0, 0], [-0.5, 0, 0.5], [0, 0, 0]]]]))
    ky = T.constant(np.array([[[[0.0, -0.5, 0], [0, 0, 0], [0, 0.5, 0]]]]))
    total = None
    for ch in range(render.data.shape[0]):
        rc = T.narrow(render, 0, ch, 1)
        gc = T.narrow(gt, 0, ch, 1) if isinstance(gt, T.Tensor) else \
            T.constant(np.asarray(gt)[ch:ch + 1])
        gm_r = T.square(T.conv2d(rc, kx, padding=1)) + T.square(T.conv2d(rc, ky, padding=1))
        gm_g = T.square(T.conv2d(gc, kx, padding=1)) + T.square(T.conv2d(gc, ky, padding=1))
        term = T.reduce_mean(T.absval(gm_r - gm_g))
        total = term if total is None else total + term
    return T.scale(total, 1.0 / render.data.shape[0])


def image_loss(render, gt, weights, perceptual_fn=None):
    """l1 * mean|render-gt| + ssim_w * (1 - SSIM) + perceptual slot."""
    gt = np.asarray(gt) if not isinstance(gt, T.Tensor) else gt.data
    shape = render.data.shape if isinstance(render, T.Tensor) else np.shape(render)
    if tuple(shape) != gt.shape:
        raise ValueError(f"image resolution mismatch: {tuple(shape)} vs {gt.shape}")
    render_t = render if isinstance(render, T.Tensor) else T.constant(render)
    l1 = T.reduce_mean(T.absval(render_t - T.constant(gt)))
    loss = T.scale(l1, weights.l1)
    loss = loss + T.scale(1.0 - ssim(render_t, T.constant(gt)), weights.ssim)
    if perceptual_fn is not None and weights.perceptual > 0:
        loss = loss + T.scale(perceptual_fn(render_t, T.constant(gt)), weights.perceptual)
    return loss


def gaussian_reg(log_scale, delta_t, weights):
    """scale * ||exp(sigma)||^2 + res * ||delta_t||^2, summed over gaussians."""
    ls = log_scale if isinstance(log_scale, T.Tensor) else T.constant(log_scale)
    dt = delta_t if isinstance(delta_t, T.Tensor) else T.constant(delta_t)
    term_scale = T.reduce_sum(T.square(T.exp(ls)))
    term_res = T.reduce_sum(T.square(dt))
    return T.scale(term_scale, weights.scale) + T.scale(term_res, weights.res)


def total_loss(parts):
    """Plain sum of loss parts."""
    out = None
    for p in parts:
        out = p if out is None else out + p
    return out


# -- metrics ---------------------------------------------------------------------


def psnr_metric(render, gt, mask=None):
    render = np.asarray(render)
    gt = np.asarray(gt)
    if render.shape != gt.shape:
        raise ValueError("resolution mismatch")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("empty metric mask")
        diff = (render - gt)[:, mask]
    else:
        diff = render - gt
    mse = float(np.mean(diff * diff))
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def ssim_metric(render, gt, mask=None):
    """Mean SSIM over valid windows whose centers are masked."""
    render = np.asarray(render)
    gt = np.asarray(gt)
    if render.shape != gt.shape:
        raise ValueError("resolution mismatch")
    maps = _ssim_maps(T.constant(render), T.constant(gt))
    half = SSIM_WINDOW // 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("empty metric mask")
        inner = mask[half:-half, half:-half]
        if not inner.any():
            raise ValueError("mask has no valid window centers")
        vals = [m.data[0][inner] for m in maps]
    else:
        vals = [m.data[0] for m in maps]
    return float(np.mean([v.mean() for v in vals]))


def metrics(render, gt, mask=None):
    return {"psnr": psnr_metric(render, gt, mask),
            "ssim": ssim_metric(render, gt, mask)}
