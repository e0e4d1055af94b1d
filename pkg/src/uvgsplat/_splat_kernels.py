"""Numba pixel loops for tiled gaussian compositing.

Gaussians are binned into 16x16 pixel tiles by their 3-sigma bounding
circle, sorted per tile by (depth, input index), and composited front to
back. A gaussian contributes to a pixel only when the Mahalanobis distance
of the pixel center is within 3 sigma (power <= 4.5); the brute-force
reference applies the identical cutoff so the two paths agree to float
accumulation order.

All loops are serial: accumulation order is fixed by the sort, so output
is independent of any external threading.
"""

import numba
import numpy as np

TILE = 16
POWER_CUTOFF = 4.5  # 0.5 * (3 sigma)^2


@numba.njit(cache=True)
def composite_forward(mu2d, conic, opacity, color, offsets, order,
                      height, width, background, stop_threshold):
    """Front-to-back compositing. Returns (image [3,H,W], transmittance [H,W]).

    offsets/order: CSR tile lists (row-major tiles), order holds gaussian
    indices sorted by (depth, index) within each tile. stop_threshold < 0
    disables early termination.
    """
    img = np.zeros((3, height, width))
    trans = np.ones((height, width))
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tid = ty * tiles_x + tx
            lo, hi = offsets[tid], offsets[tid + 1]
            if lo == hi:
                continue
            y1 = min((ty + 1) * TILE, height)
            x1 = min((tx + 1) * TILE, width)
            for py in range(ty * TILE, y1):
                for px in range(tx * TILE, x1):
                    cx = px + 0.5
                    cy = py + 0.5
                    t = 1.0
                    r = 0.0
                    g = 0.0
                    b = 0.0
                    for n in range(lo, hi):
                        k = order[n]
                        dx = cx - mu2d[k, 0]
                        dy = cy - mu2d[k, 1]
                        power = 0.5 * (conic[k, 0] * dx * dx
                                       + conic[k, 2] * dy * dy) \
                            + conic[k, 1] * dx * dy
                        if power > POWER_CUTOFF or power < 0.0:
                            continue
                        a = opacity[k] * np.exp(-power)
                        w = a * t
                        r += color[k, 0] * w
                        g += color[k, 1] * w
                        b += color[k, 2] * w
                        t *= 1.0 - a
                        if stop_threshold >= 0.0 and t < stop_threshold:
                            break
                    img[0, py, px] = r + t * background[0]
                    img[1, py, px] = g + t * background[1]
                    img[2, py, px] = b + t * background[2]
                    trans[py, px] = t
    # tiles with no gaussians keep pure background
    for py in range(height):
        for px in range(width):
            tid = (py // TILE) * tiles_x + (px // TILE)
            if offsets[tid] == offsets[tid + 1]:
                img[0, py, px] = background[0]
                img[1, py, px] = background[1]
                img[2, py, px] = background[2]
    return img, trans


@numba.njit(cache=True)
def composite_backward(mu2d, conic, opacity, color, offsets, order,
                       height, width, background, grad_img):
    """Analytic gradients of composite_forward (no early termination).

    Returns (d_mu2d [K,2], d_conic [K,3], d_opacity [K], d_color [K,3]).
    d_conic is w.r.t. the (a, b, c) parameters of [[a, b], [b, c]].
    """
    k_total = mu2d.shape[0]
    d_mu2d = np.zeros((k_total, 2))
    d_conic = np.zeros((k_total, 3))
    d_opacity = np.zeros(k_total)
    d_color = np.zeros((k_total, 3))

    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    max_list = 0
    for tid in range(offsets.shape[0] - 1):
        max_list = max(max_list, offsets[tid + 1] - offsets[tid])
    idx_buf = np.empty(max_list, dtype=np.int64)
    a_buf = np.empty(max_list)
    t_buf = np.empty(max_list)
    dx_buf = np.empty(max_list)
    dy_buf = np.empty(max_list)

    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tid = ty * tiles_x + tx
            lo, hi = offsets[tid], offsets[tid + 1]
            if lo == hi:
                continue
            y1 = min((ty + 1) * TILE, height)
            x1 = min((tx + 1) * TILE, width)
            for py in range(ty * TILE, y1):
                for px in range(tx * TILE, x1):
                    cx = px + 0.5
                    cy = py + 0.5
                    # pass 1: replay the forward walk
                    t = 1.0
                    m = 0
                    for n in range(lo, hi):
                        k = order[n]
                        dx = cx - mu2d[k, 0]
                        dy = cy - mu2d[k, 1]
                        power = 0.5 * (conic[k, 0] * dx * dx
                                       + conic[k, 2] * dy * dy) \
                            + conic[k, 1] * dx * dy
                        if power > POWER_CUTOFF or power < 0.0:
                            continue
                        a = opacity[k] * np.exp(-power)
                        idx_buf[m] = k
                        a_buf[m] = a
                        t_buf[m] = t
                        dx_buf[m] = dx
                        dy_buf[m] = dy
                        t *= 1.0 - a
                        m += 1
                    g0 = grad_img[0, py, px]
                    g1 = grad_img[1, py, px]
                    g2 = grad_img[2, py, px]
                    # suffix color: everything composited behind gaussian i
                    s0 = t * background[0]
                    s1 = t * background[1]
                    s2 = t * background[2]
                    for n in range(m - 1, -1, -1):
                        k = idx_buf[n]
                        a = a_buf[n]
                        ti = t_buf[n]
                        w = a * ti
                        d_color[k, 0] += g0 * w
                        d_color[k, 1] += g1 * w
                        d_color[k, 2] += g2 * w
                        inv = 1.0 / (1.0 - a)
                        da = (g0 * (color[k, 0] * ti - s0 * inv)
                              + g1 * (color[k, 1] * ti - s1 * inv)
                              + g2 * (color[k, 2] * ti - s2 * inv))
                        s0 += color[k, 0] * w
                        s1 += color[k, 1] * w
                        s2 += color[k, 2] * w
                        gk = a / opacity[k]  # exp(-power)
                        d_opacity[k] += da * gk
                        dpower = -da * a
                        dx = dx_buf[n]
                        dy = dy_buf[n]
                        d_conic[k, 0] += dpower * 0.5 * dx * dx
                        d_conic[k, 1] += dpower * dx * dy
                        d_conic[k, 2] += dpower * 0.5 * dy * dy
                        ddx = dpower * (conic[k, 0] * dx + conic[k, 1] * dy)
                        ddy = dpower * (conic[k, 1] * dx + conic[k, 2] * dy)
                        d_mu2d[k, 0] -= ddx
                        d_mu2d[k, 1] -= ddy
    return d_mu2d, d_conic, d_opacity, d_color
