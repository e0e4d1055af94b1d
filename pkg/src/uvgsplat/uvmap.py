"""UV-space rasterization and sampling.

A UV atlas is rasterized once per (body, resolution): each texel whose
center falls inside a UV triangle records its face index and barycentric
coordinates. Vertex attributes (3D positions, colors, ...) are then lifted
into UV space as a fixed linear map, which keeps the raster differentiable
with respect to the attributes while the geometry stays frozen.

Texel convention: layer arrays are [C, R, R] with layer[:, i, j] at UV
center ((j + 0.5)/R, (i + 0.5)/R); v grows with the row index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


@dataclass
class UvAtlas:
    """Frozen texel->surface correspondence for one body at one resolution."""

    resolution: int
    mask: np.ndarray          # [R,R] bool
    texel_face: np.ndarray    # [R,R] int, -1 outside
    texel_bary: np.ndarray    # [R,R,3]
    lift: np.ndarray          # [R*R, N] row-stochastic on covered rows


@dataclass
class UvMapStack:
    """Named UV raster layers sharing one resolution and validity mask."""

    resolution: int
    mask: np.ndarray
    texel_face: np.ndarray
    texel_bary: np.ndarray
    layers: dict = field(default_factory=dict)

    def add(self, name, layer):
        arr = layer.data if isinstance(layer, T.Tensor) else np.asarray(layer)
        if arr.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(f"layer {name!r} resolution mismatch")
        self.layers[name] = layer
        return layer


_ATLAS_CACHE = {}


def build_atlas(body, resolution):
    """Compute (and cache) the texel correspondence for a template body."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    key = (id(body), resolution)
    hit = _ATLAS_CACHE.get(key)
    if hit is not None and hit[0] is body:
        return hit[1]

    r = resolution
    uv = body.uv
    faces = body.faces
    n = body.num_vertices
    mask = np.zeros((r, r), dtype=bool)
    texel_face = np.full((r, r), -1, dtype=np.int64)
    texel_bary = np.zeros((r, r, 3))

    centers = (np.arange(r) + 0.5) / r
    for fi, (ia, ib, ic) in enumerate(faces):
        a, b, c = uv[ia], uv[ib], uv[ic]
        lo = np.minimum(np.minimum(a, b), c)
        hi = np.maximum(np.maximum(a, b), c)
        j0 = max(int(np.floor(lo[0] * r - 0.5)), 0)
        j1 = min(int(np.ceil(hi[0] * r - 0.5)), r - 1)
        i0 = max(int(np.floor(lo[1] * r - 0.5)), 0)
        i1 = min(int(np.ceil(hi[1] * r - 0.5)), r - 1)
        if j1 < j0 or i1 < i0:
            continue
        uu, vv = np.meshgrid(centers[j0:j1 + 1], centers[i0:i1 + 1])
        w0, w1, w2 = barycentric(a, b, c, uu, vv)
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        ii, jj = np.nonzero(inside & ~mask[i0:i1 + 1, j0:j1 + 1])
        gi, gj = ii + i0, jj + j0
        mask[gi, gj] = True
        texel_face[gi, gj] = fi
        texel_bary[gi, gj, 0] = w0[ii, jj]
        texel_bary[gi, gj, 1] = w1[ii, jj]
        texel_bary[gi, gj, 2] = w2[ii, jj]

    lift = np.zeros((r * r, n))
    gi, gj = np.nonzero(mask)
    flat = gi * r + gj
    for k in range(3):
        np.add.at(lift, (flat, faces[texel_face[gi, gj], k]), texel_bary[gi, gj, k])

    # 1-texel dilation of attribute values (not the mask): uncovered texels
    # bordering the chart average their covered 4-neighbours, which keeps
    # bilinear sampling stable across chart seams.
    uncovered = ~mask
    neigh_rows = np.zeros((r * r, n))
    neigh_count = np.zeros(r * r)
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        si = np.clip(np.arange(r)[:, None] + di, 0, r - 1)
        sj = np.clip(np.arange(r)[None, :] + dj, 0, r - 1)
        nb_mask = mask[si, sj] & uncovered
        ui, uj = np.nonzero(nb_mask)
        src = si[ui, 0] * r + sj[0, uj]
        dst = ui * r + uj
        neigh_rows[dst] += lift[src]
        neigh_count[dst] += 1.0
    border = neigh_count > 0
    lift[border] = neigh_rows[border] / neigh_count[border, None]

    atlas = UvAtlas(r, mask, texel_face, texel_bary, lift)
    _ATLAS_CACHE[key] = (body, atlas)
    return atlas


def barycentric(a, b, c, u, v):
    """Barycentric coordinates of (u, v) in UV triangle (a, b, c)."""
    det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
    w1 = ((u - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (v - a[1])) / det
    w2 = ((b[0] - a[0]) * (v - a[1]) - (u - a[0]) * (b[1] - a[1])) / det
    return 1.0 - w1 - w2, w1, w2


def rasterize_vertex_layer(vertices, body, resolution):
    """Lift per-vertex attributes into UV space.

    vertices: Tensor or ndarray [N, C]. Returns a [C, R, R] layer (Tensor when
    the input is a Tensor) via the frozen barycentric lifting map.
    """
    atlas = build_atlas(body, resolution)
    r = resolution
    if isinstance(vertices, T.Tensor):
        flat = T.matmul(T.constant(atlas.lift), vertices)      # [R*R, C]
        c = vertices.data.shape[1]
        return T.permute(T.reshape(flat, (r, r, c)), (2, 0, 1))
    flat = atlas.lift @ np.asarray(vertices)
    return np.ascontiguousarray(flat.reshape(r, r, -1).transpose(2, 0, 1))


def rasterize_position_map(vertices, body, resolution):
    """Position map of a posed mesh: layer [3,R,R] + mask + texel_face."""
    atlas = build_atlas(body, resolution)
    layer = rasterize_vertex_layer(vertices, body, resolution)
    return layer, atlas.mask, atlas.texel_face


def sample_uv(layer, uv):
    """Bilinear sampling of a [C,R,R] layer at M UV points -> [M,C].

    Edge-clamped; differentiable with respect to the layer values.
    """
    uv = np.asarray(uv, dtype=np.float64)
    if uv.ndim != 2 or uv.shape[1] != 2:
        raise ValueError("uv must be [M,2]")
    if uv.min() < 0.0 or uv.max() > 1.0:
        bad = int(np.argmax((uv < 0.0) | (uv > 1.0)))
        raise ValueError(f"uv outside [0,1]^2 (first offender row {bad // 2})")
    data = layer.data if isinstance(layer, T.Tensor) else np.asarray(layer)
    c, r, _ = data.shape

    x = np.clip(uv[:, 0] * r - 0.5, 0.0, r - 1.0)
    y = np.clip(uv[:, 1] * r - 0.5, 0.0, r - 1.0)
    j0 = np.floor(x).astype(np.int64)
    i0 = np.floor(y).astype(np.int64)
    j1 = np.minimum(j0 + 1, r - 1)
    i1 = np.minimum(i0 + 1, r - 1)
    fx = x - j0
    fy = y - i0
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    ii = np.stack([i0, i0, i1, i1])
    jj = np.stack([j0, j1, j0, j1])

    out = np.einsum("km,ckm->mc", w, data[:, ii, jj])
    if not isinstance(layer, T.Tensor):
        return out

    def backward(g):
        full = np.zeros_like(data)
        for k in range(4):
            np.add.at(full, (slice(None), ii[k], jj[k]), (g * w[k][:, None]).T)
        layer.accumulate(full)

    return T.Tensor.from_op(out, (layer,), backward)


def texels_to_points(stack):
    """Row-major records of all masked texels, one array per layer.

    Returns (texel_indices [M,2], {name: [M, C] or [M]}).
    """
    gi, gj = np.nonzero(stack.mask)
    order = np.argsort(gi * stack.resolution + gj, kind="stable")
    gi, gj = gi[order], gj[order]
    out = {}
    for name, layer in stack.layers.items():
        data = layer.data if isinstance(layer, T.Tensor) else layer
        if data.ndim == 3:
            out[name] = np.ascontiguousarray(data[:, gi, gj].T)
        else:
            out[name] = data[gi, gj]
    return np.stack([gi, gj], axis=1), out


def gather_masked(layer, mask):
    """Differentiable gather of a [C,R,R] Tensor layer at masked texels -> [M,C]."""
    gi, gj = np.nonzero(mask)
    if isinstance(layer, T.Tensor):
        data = layer.data[:, gi, gj].T.copy()

        def backward(g):
            full = np.zeros_like(layer.data)
            full[:, gi, gj] = g.T
            layer.accumulate(full)

        return T.Tensor.from_op(data, (layer,), backward)
    return np.asarray(layer)[:, gi, gj].T.copy()


# -- float-image interchange ---------------------------------------------------
#
# "PFD" is PFM's layout with 64-bit little-endian floats, so layer exports
# round-trip bit-exactly: header "PFD\n<C> <W> <H>\n-1.0\n" then raw rows.


def save_layer(path, layer):
    arr = np.ascontiguousarray(np.asarray(layer, dtype=np.float64))
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"PFD\n{c} {w} {h}\n-1.0\n".encode())
        f.write(arr.tobytes())


def load_layer(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"PFD":
            raise ValueError(f"{path}: not a PFD layer file")
        c, w, h = (int(x) for x in f.readline().split())
        f.readline()
        data = np.frombuffer(f.read(c * h * w * 8), dtype="<f8")
    return data.reshape(c, h, w).copy()
