"""Differentiable 3D gaussian splatting.

Forward: quaternion + log-scale -> 3D covariance (R S S^T R^T), camera
projection with the local affine (Jacobian) approximation, 16x16-tile
binning by 3-sigma extent, per-tile depth sort (stable, ties broken by
input index), front-to-back alpha compositing. Backward: analytic, per
attribute group; the pixel loops live in _splat_kernels, the matrix chain
is batched numpy here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from ._splat_kernels import TILE, composite_backward, composite_forward

COV2D_REG = 0.3  # px^2 added to the 2D covariance diagonal (anti-alias floor)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray   # [4,4] rigid
    width: int
    height: int
    near: float = 0.05

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        r = self.rotation
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
            raise ValueError("world_to_cam rotation is not orthonormal")

    @property
    def rotation(self):
        return self.world_to_cam[:3, :3]

    @property
    def translation(self):
        return self.world_to_cam[:3, 3]

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class GaussianCloud:
    mu: np.ndarray         # [K,3]
    log_scale: np.ndarray  # [K,3]
    quat: np.ndarray       # [K,4] unit
    opacity: np.ndarray    # [K] in (0,1)
    color: np.ndarray      # [K,3] in (0,1)

    def validate(self):
        for name in ("mu", "log_scale", "quat", "opacity", "color"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                k = int(np.nonzero(~np.all(np.isfinite(arr.reshape(len(arr), -1)), axis=1))[0][0])
                raise ValueError(f"non-finite {name} at gaussian {k}")
        norms = np.linalg.norm(self.quat, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("quaternions must be unit norm")
        if np.any(self.opacity <= 0) or np.any(self.opacity >= 1):
            raise ValueError("opacity must lie in (0,1)")

    def __len__(self):
        return self.mu.shape[0]


# -- covariance ---------------------------------------------------------------


def quat_to_rotmat(quat):
    """[K,4] unit quaternions (w,x,y,z) -> [K,3,3] rotation matrices."""
    w, x, y, z = quat[:, 0], quat[:, 1], quat[:, 2], quat[:, 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def _rotmat_backward(quat, d_rot):
    """Accumulate dL/dq from dL/dR for a batch (unit quaternions)."""
    w, x, y, z = quat[:, 0], quat[:, 1], quat[:, 2], quat[:, 3]
    zero = np.zeros_like(w)
    # partials of R w.r.t. each quaternion component, [K,3,3]
    dw = np.stack([
        np.stack([zero, -2 * z, 2 * y], axis=-1),
        np.stack([2 * z, zero, -2 * x], axis=-1),
        np.stack([-2 * y, 2 * x, zero], axis=-1),
    ], axis=-2)
    dx = np.stack([
        np.stack([zero, 2 * y, 2 * z], axis=-1),
        np.stack([2 * y, -4 * x, -2 * w], axis=-1),
        np.stack([2 * z, 2 * w, -4 * x], axis=-1),
    ], axis=-2)
    dy = np.stack([
        np.stack([-4 * y, 2 * x, 2 * w], axis=-1),
        np.stack([2 * x, zero, 2 * z], axis=-1),
        np.stack([-2 * w, 2 * z, -4 * y], axis=-1),
    ], axis=-2)
    dz = np.stack([
        np.stack([-4 * z, -2 * w, 2 * x], axis=-1),
        np.stack([2 * w, -4 * z, 2 * y], axis=-1),
        np.stack([2 * x, 2 * y, zero], axis=-1),
    ], axis=-2)
    return np.stack([
        np.einsum("kab,kab->k", d_rot, dw),
        np.einsum("kab,kab->k", d_rot, dx),
        np.einsum("kab,kab->k", d_rot, dy),
        np.einsum("kab,kab->k", d_rot, dz),
    ], axis=-1)


def _covariance_batch(log_scale, quat):
    s = np.exp(log_scale)
    rot = quat_to_rotmat(quat)
    a = rot * s[:, None, :]          # R @ diag(s)
    sigma = a @ np.swapaxes(a, 1, 2)
    return sigma, a, rot, s


def _covariance_batch_backward(d_sigma, a, rot, s, quat):
    da = (d_sigma + np.swapaxes(d_sigma, 1, 2)) @ a
    d_rot = da * s[:, None, :]
    d_log_scale = np.einsum("kac,kac->kc", da, rot) * s
    d_quat = _rotmat_backward(quat, d_rot)
    return d_log_scale, d_quat


def build_covariance(log_scale, quat):
    """3x3 covariance R S S^T R^T from one log-scale triple and unit quat.

    Accepts Tensors (differentiable) or plain arrays.
    """
    if isinstance(log_scale, T.Tensor) or isinstance(quat, T.Tensor):
        ls = log_scale if isinstance(log_scale, T.Tensor) else T.constant(log_scale)
        q = quat if isinstance(quat, T.Tensor) else T.constant(quat)
        sigma, a, rot, s = _covariance_batch(
            ls.data.reshape(1, 3), q.data.reshape(1, 4))

        def backward(g):
            d_ls, d_q = _covariance_batch_backward(
                g.reshape(1, 3, 3), a, rot, s, q.data.reshape(1, 4))
            ls.accumulate(d_ls.reshape(ls.data.shape))
            q.accumulate(d_q.reshape(q.data.shape))

        return T.Tensor.from_op(sigma[0], (ls, q), backward)
    sigma, _, _, _ = _covariance_batch(
        np.asarray(log_scale).reshape(1, 3), np.asarray(quat).reshape(1, 4))
    return sigma[0]


# -- projection ---------------------------------------------------------------


def _project_batch(mu, sigma, cam):
    """Project K gaussians. Returns dict of camera-space intermediates."""
    w_r = cam.rotation
    t = mu @ w_r.T + cam.translation
    valid = t[:, 2] >= cam.near
    tz = np.where(valid, t[:, 2], 1.0)
    mu2d = np.stack([cam.fx * t[:, 0] / tz + cam.cx,
                     cam.fy * t[:, 1] / tz + cam.cy], axis=1)
    k = mu.shape[0]
    jac = np.zeros((k, 2, 3))
    jac[:, 0, 0] = cam.fx / tz
    jac[:, 1, 1] = cam.fy / tz
    jac[:, 0, 2] = -cam.fx * t[:, 0] / (tz * tz)
    jac[:, 1, 2] = -cam.fy * t[:, 1] / (tz * tz)
    m = jac @ w_r
    cov2d = m @ sigma @ np.swapaxes(m, 1, 2)
    cov2d[:, 0, 0] += COV2D_REG
    cov2d[:, 1, 1] += COV2D_REG
    return {"t": t, "tz": tz, "valid": valid, "mu2d": mu2d, "jac": jac,
            "m": m, "cov2d": cov2d, "depth": t[:, 2]}


def _project_batch_backward(state, sigma, cam, d_mu2d, d_cov2d):
    """Chain (d_mu2d, d_cov2d full 2x2) back to (d_mu world, d_sigma)."""
    w_r = cam.rotation
    t, tz, jac, m = state["t"], state["tz"], state["jac"], state["m"]
    sym = d_cov2d + np.swapaxes(d_cov2d, 1, 2)
    d_sigma = np.swapaxes(m, 1, 2) @ d_cov2d @ m
    d_m = sym @ m @ sigma
    d_jac = d_m @ w_r.T

    dt = np.zeros_like(t)
    dt[:, 0] = cam.fx / tz * d_mu2d[:, 0] - cam.fx / (tz * tz) * d_jac[:, 0, 2]
    dt[:, 1] = cam.fy / tz * d_mu2d[:, 1] - cam.fy / (tz * tz) * d_jac[:, 1, 2]
    dt[:, 2] = (-cam.fx * t[:, 0] / (tz * tz) * d_mu2d[:, 0]
                - cam.fy * t[:, 1] / (tz * tz) * d_mu2d[:, 1]
                - cam.fx / (tz * tz) * d_jac[:, 0, 0]
                - cam.fy / (tz * tz) * d_jac[:, 1, 1]
                + 2 * cam.fx * t[:, 0] / (tz ** 3) * d_jac[:, 0, 2]
                + 2 * cam.fy * t[:, 1] / (tz ** 3) * d_jac[:, 1, 2])
    d_mu = dt @ w_r
    return d_mu, d_sigma


def project(mu, sigma, cam):
    """Project one gaussian: (mu2d [2], cov2d [2,2], depth) or None if culled.

    mu and sigma may be Tensors, in which case mu2d/cov2d are differentiable.
    """
    is_tensor = isinstance(mu, T.Tensor) or isinstance(sigma, T.Tensor)
    mu_t = mu if isinstance(mu, T.Tensor) else T.constant(mu)
    sigma_t = sigma if isinstance(sigma, T.Tensor) else T.constant(sigma)
    state = _project_batch(mu_t.data.reshape(1, 3), sigma_t.data.reshape(1, 3, 3), cam)
    if not state["valid"][0]:
        return None
    depth = float(state["depth"][0])
    if not is_tensor:
        return state["mu2d"][0], state["cov2d"][0], depth

    sig = sigma_t.data.reshape(1, 3, 3)

    def backward_mu2d(g):
        d_mu, d_sigma = _project_batch_backward(
            state, sig, cam, g.reshape(1, 2), np.zeros((1, 2, 2)))
        mu_t.accumulate(d_mu.reshape(mu_t.data.shape))
        sigma_t.accumulate(d_sigma.reshape(sigma_t.data.shape))

    def backward_cov2d(g):
        d_mu, d_sigma = _project_batch_backward(
            state, sig, cam, np.zeros((1, 2)), g.reshape(1, 2, 2))
        mu_t.accumulate(d_mu.reshape(mu_t.data.shape))
        sigma_t.accumulate(d_sigma.reshape(sigma_t.data.shape))

    mu2d = T.Tensor.from_op(state["mu2d"][0], (mu_t, sigma_t), backward_mu2d)
    cov2d = T.Tensor.from_op(state["cov2d"][0], (mu_t, sigma_t), backward_cov2d)
    return mu2d, cov2d, depth


# -- full renderer ------------------------------------------------------------


def _conic_and_radius(cov2d):
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam)
    return conic, radius


def _conic_backward(cov2d, conic, d_conic):
    """d_conic w.r.t. (a,b,c) of the conic -> full-matrix d_cov2d."""
    k = cov2d.shape[0]
    lam = np.zeros((k, 2, 2))
    lam[:, 0, 0] = conic[:, 0]
    lam[:, 0, 1] = lam[:, 1, 0] = conic[:, 1]
    lam[:, 1, 1] = conic[:, 2]
    g = np.zeros((k, 2, 2))
    g[:, 0, 0] = d_conic[:, 0]
    g[:, 0, 1] = g[:, 1, 0] = 0.5 * d_conic[:, 1]
    g[:, 1, 1] = d_conic[:, 2]
    return -lam @ g @ lam


def _tile_lists(mu2d, radius, depth, valid, width, height):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    pairs_tile = []
    pairs_gauss = []
    idx = np.nonzero(valid)[0]
    for k in idx:
        x0 = int(np.floor((mu2d[k, 0] - radius[k]) / TILE))
        x1 = int(np.floor((mu2d[k, 0] + radius[k]) / TILE))
        y0 = int(np.floor((mu2d[k, 1] - radius[k]) / TILE))
        y1 = int(np.floor((mu2d[k, 1] + radius[k]) / TILE))
        x0, x1 = max(x0, 0), min(x1, tiles_x - 1)
        y0, y1 = max(y0, 0), min(y1, tiles_y - 1)
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                pairs_tile.append(ty * tiles_x + tx)
                pairs_gauss.append(k)
    n_tiles = tiles_x * tiles_y
    if not pairs_tile:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    pairs_tile = np.asarray(pairs_tile, dtype=np.int64)
    pairs_gauss = np.asarray(pairs_gauss, dtype=np.int64)
    order = np.lexsort((pairs_gauss, depth[pairs_gauss], pairs_tile))
    sorted_tiles = pairs_tile[order]
    counts = np.bincount(sorted_tiles, minlength=n_tiles)
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, pairs_gauss[order]


@dataclass
class RenderState:
    cam: Camera
    cloud: GaussianCloud
    background: np.ndarray
    proj: dict
    sigma: np.ndarray
    cov_parts: tuple
    conic: np.ndarray
    offsets: np.ndarray
    order: np.ndarray
    early_stop: float


def rasterize(cloud, cam, background, early_stop=None, want_state=False):
    """Render a gaussian cloud. Returns image [3,H,W] (+ RenderState).

    early_stop: transmittance threshold for the 32-bit fast path; None
    composites exactly (required before rasterize_backward).
    """
    cloud.validate()
    background = np.asarray(background, dtype=np.float64)
    sigma, a, rot, s = _covariance_batch(cloud.log_scale, cloud.quat)
    proj = _project_batch(cloud.mu, sigma, cam)
    conic, radius = _conic_and_radius(proj["cov2d"])
    offsets, order = _tile_lists(proj["mu2d"], radius, proj["depth"],
                                 proj["valid"], cam.width, cam.height)
    img, _ = composite_forward(
        proj["mu2d"], conic, cloud.opacity, cloud.color, offsets, order,
        cam.height, cam.width, background,
        -1.0 if early_stop is None else float(early_stop))
    if not want_state:
        return img
    state = RenderState(cam, cloud, background, proj, sigma, (a, rot, s),
                        conic, offsets, order,
                        -1.0 if early_stop is None else float(early_stop))
    return img, state


def rasterize_backward(state, grad_img):
    """Gradients of the rendered image w.r.t. all five attribute groups.

    Culled gaussians receive zeros. Requires a forward pass without early
    termination.
    """
    if state.early_stop >= 0.0:
        raise ValueError("backward requires a forward pass without early termination")
    grad_img = np.asarray(grad_img, dtype=np.float64)
    if grad_img.shape != (3, state.cam.height, state.cam.width):
        raise ValueError("grad_img shape does not match the render state camera")
    cloud = state.cloud
    d_mu2d, d_conic, d_opacity, d_color = composite_backward(
        state.proj["mu2d"], state.conic, cloud.opacity, cloud.color,
        state.offsets, state.order, state.cam.height, state.cam.width,
        state.background, grad_img)
    d_cov2d = _conic_backward(state.proj["cov2d"], state.conic, d_conic)
    d_mu, d_sigma = _project_batch_backward(
        state.proj, state.sigma, state.cam, d_mu2d, d_cov2d)
    a, rot, s = state.cov_parts
    d_log_scale, d_quat = _covariance_batch_backward(d_sigma, a, rot, s, cloud.quat)
    invalid = ~state.proj["valid"]
    for arr in (d_mu, d_log_scale, d_quat, d_color):
        arr[invalid] = 0.0
    d_opacity[invalid] = 0.0
    return {"mu": d_mu, "log_scale": d_log_scale, "quat": d_quat,
            "opacity": d_opacity, "color": d_color}


def render_gaussians(mu, log_scale, quat, opacity, color, cam, background,
                     early_stop=None):
    """Autodiff wrapper: Tensors [K,3],[K,3],[K,4],[K],[K,3] -> image Tensor."""
    cloud = GaussianCloud(mu.data, log_scale.data, quat.data,
                          opacity.data.reshape(-1), color.data)
    img, state = rasterize(cloud, cam, background, early_stop=early_stop,
                           want_state=True)

    def backward(g):
        grads = rasterize_backward(state, g)
        mu.accumulate(grads["mu"])
        log_scale.accumulate(grads["log_scale"])
        quat.accumulate(grads["quat"])
        opacity.accumulate(grads["opacity"].reshape(opacity.data.shape))
        color.accumulate(grads["color"])

    return T.Tensor.from_op(img, (mu, log_scale, quat, opacity, color), backward)


# -- brute-force reference ------------------------------------------------------


def rasterize_reference(cloud, cam, background):
    """Per-pixel full-sort compositing oracle (no tiling).

    Evaluates the far-to-near sum directly in its front-to-back form with a
    global depth sort; applies the same 3-sigma cutoff as the tiled path.
    Also returns the per-pixel (weight sum + final transmittance) for the
    conservation check.
    """
    cloud.validate()
    background = np.asarray(background, dtype=np.float64)
    sigma, _, _, _ = _covariance_batch(cloud.log_scale, cloud.quat)
    proj = _project_batch(cloud.mu, sigma, cam)
    conic, _ = _conic_and_radius(proj["cov2d"])
    valid = proj["valid"]
    order = np.lexsort((np.arange(len(cloud)), proj["depth"]))
    order = order[valid[order]]

    h, w = cam.height, cam.width
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    img = np.empty((3, h, w))
    img[:] = background[:, None, None]
    trans = np.ones((h, w))
    total_weight = np.zeros((h, w))
    acc = np.zeros((3, h, w))
    for k in order:
        dx = xs - proj["mu2d"][k, 0]
        dy = ys - proj["mu2d"][k, 1]
        power = 0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) \
            + conic[k, 1] * dx * dy
        g = np.where((power <= 4.5) & (power >= 0.0), np.exp(-power), 0.0)
        alpha = cloud.opacity[k] * g
        wgt = alpha * trans
        acc += cloud.color[k][:, None, None] * wgt[None]
        total_weight += wgt
        trans = trans * (1.0 - alpha)
    img = acc + trans[None] * background[:, None, None]
    return img, total_weight + trans
