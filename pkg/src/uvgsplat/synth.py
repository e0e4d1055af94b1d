"""Synthetic ground-truth factory: camera ring, scripted poses, scripted
"scan-like" deformations, and a classical textured-mesh rendering oracle.

The scripted deformation displaces template vertices along their rest
normals with a sinusoidal spatial pattern whose amplitude depends on the
joint angles, then poses the result with skinning. It is a closed-form,
pose-equivariant target, so mesh supervision has an exact learnable answer.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import imageio
from .body import (Pose, TemplateBody, forward_kinematics, lbs_numpy, load_body,
                   load_mesh, make_template, save_body, save_mesh)
from .splat import Camera


@dataclass
class SceneConfig:
    num_cameras: int = 12
    num_frames: int = 40
    image_size: int = 96
    texture_size: int = 64
    deform_amplitude: float = 0.02
    segments: int = 5
    radial: int = 8
    camera_distance: float = 1.6
    pose_amplitude: float = 0.45


@dataclass
class SyntheticScene:
    body: TemplateBody
    texture: np.ndarray          # [3,Rt,Rt]
    poses: list                  # F Pose records
    gt_meshes: np.ndarray        # [F,N,3]
    cameras: list                # C Camera records
    gt_images: np.ndarray        # [F,C,3,H,W]
    masks: np.ndarray            # [F,C,H,W] bool
    train_frames: np.ndarray
    test_frames: np.ndarray
    train_views: np.ndarray
    test_views: np.ndarray
    config: SceneConfig = field(default_factory=SceneConfig)
    seed: int = 0

    @property
    def frame_textures(self):
        """Per-frame texture stack (all frames share one texture here)."""
        return [self.texture] * len(self.poses)

    @property
    def centroid(self):
        return self.body.vertices.mean(axis=0)


def make_texture(size, seed):
    """Checker + gradient + per-seed noise, in [0,1]."""
    rng = np.random.default_rng(seed + 101)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    checker = ((ii // (size // 8) + jj // (size // 8)) % 2).astype(np.float64)
    grad_u = jj / (size - 1)
    grad_v = ii / (size - 1)
    noise = rng.uniform(0.0, 1.0, size=(3, size, size))
    tex = np.stack([
        0.55 * checker + 0.35 * grad_u,
        0.45 * (1 - checker) + 0.35 * grad_v,
        0.3 + 0.4 * grad_u * grad_v,
    ])
    tex = 0.85 * tex + 0.15 * noise
    return np.clip(tex, 0.02, 0.98)


def vertex_normals(vertices, faces):
    """Area-weighted vertex normals."""
    v = np.asarray(vertices)
    e1 = v[faces[:, 1]] - v[faces[:, 0]]
    e2 = v[faces[:, 2]] - v[faces[:, 0]]
    fn = np.cross(e1, e2)
    out = np.zeros_like(v)
    for k in range(3):
        np.add.at(out, faces[:, k], fn)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(norms, 1e-12)


def scripted_poses(body, num_frames, amplitude, seed):
    """Smooth deterministic motion: per-joint sinusoids with random phases."""
    rng = np.random.default_rng(seed + 202)
    j = body.num_joints
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(j, 2))
    freqs = rng.integers(1, 3, size=(j, 2)).astype(np.float64)
    amps = amplitude / (1.0 + 0.4 * np.arange(j))
    poses = []
    for f in range(num_frames):
        t = 2.0 * np.pi * f / max(num_frames, 1)
        rot = np.zeros((j, 3))
        rot[:, 0] = amps * np.sin(freqs[:, 0] * t + phases[:, 0])
        rot[:, 1] = amps * np.sin(freqs[:, 1] * t + phases[:, 1])
        poses.append(Pose(rot, np.zeros(3)))
    return poses


def scripted_deformation(body, pose, amplitude):
    """Canonical-frame vertex offsets for one pose (the SMPLX-D stand-in)."""
    if amplitude == 0.0:
        return np.zeros_like(body.vertices)
    normals = vertex_normals(body.vertices, body.faces)
    z = body.vertices[:, 2]
    span = z.max() - z.min()
    angle = np.linalg.norm(pose.joint_rotations, axis=1).mean()
    gain = amplitude * np.sin(2.5 * angle)
    pattern = np.sin(3.0 * 2.0 * np.pi * (z - z.min()) / span
                     + 2.0 * np.arctan2(body.vertices[:, 1], body.vertices[:, 0]))
    return gain * pattern[:, None] * normals


def gt_mesh_for_pose(body, pose, amplitude):
    offsets = scripted_deformation(body, pose, amplitude)
    transforms = forward_kinematics(body, pose)
    return lbs_numpy(body.vertices + offsets, body.weights, transforms)


def look_at_camera(eye, target, fx, fy, width, height, near=0.05):
    eye = np.asarray(eye, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([right, down, fwd])
    w2c[:3, 3] = -w2c[:3, :3] @ eye
    return Camera(fx, fy, width / 2.0, height / 2.0, w2c, width, height, near)


def camera_ring(body, count, distance, image_size):
    """360-degree azimuth ring aimed at the body centroid."""
    centroid = body.vertices.mean(axis=0)
    focal = 1.1 * image_size
    cams = []
    for c in range(count):
        az = 2.0 * np.pi * c / count
        eye = centroid + distance * np.array([np.cos(az), np.sin(az), 0.15])
        cams.append(look_at_camera(eye, centroid, focal, focal,
                                   image_size, image_size))
    return cams


def make_scene(seed=0, config=None):
    """Deterministic synthetic scene with train/test splits."""
    config = config or SceneConfig()
    if config.num_cameras < 2 or config.num_frames < 1:
        raise ValueError("need at least 2 cameras and 1 frame")
    body = make_template(segments=config.segments, radial=config.radial, seed=seed)
    texture = make_texture(config.texture_size, seed)
    poses = scripted_poses(body, config.num_frames, config.pose_amplitude, seed)
    gt_meshes = np.stack([
        gt_mesh_for_pose(body, p, config.deform_amplitude) for p in poses
    ])
    cameras = camera_ring(body, config.num_cameras, config.camera_distance,
                          config.image_size)
    f, c = config.num_frames, config.num_cameras
    images = np.zeros((f, c, 3, config.image_size, config.image_size))
    masks = np.zeros((f, c, config.image_size, config.image_size), dtype=bool)
    for fi in range(f):
        for ci in range(c):
            img, m = render_mesh_oracle(gt_meshes[fi], body.faces, body.uv,
                                        texture, cameras[ci])
            images[fi, ci] = img
            masks[fi, ci] = m

    n_train_f = int(np.ceil(0.75 * f))
    n_test_v = int(np.ceil(c / 8))
    return SyntheticScene(
        body=body, texture=texture, poses=poses, gt_meshes=gt_meshes,
        cameras=cameras, gt_images=images, masks=masks,
        train_frames=np.arange(n_train_f),
        test_frames=np.arange(n_train_f, f),
        train_views=np.arange(c - n_test_v),
        test_views=np.arange(c - n_test_v, c),
        config=config, seed=seed)


def average_texture(frame_textures):
    """Per-texel mean over frames; accepts a scene or a texture stack."""
    if isinstance(frame_textures, SyntheticScene):
        frame_textures = frame_textures.frame_textures
    stack = np.stack(list(frame_textures))
    if stack.shape[0] < 1:
        raise ValueError("need at least one frame")
    return stack.mean(axis=0)


# -- classical rendering oracle --------------------------------------------------


def _sample_texture_bilinear(texture, uv):
    c, r, _ = texture.shape
    x = np.clip(uv[:, 0] * r - 0.5, 0.0, r - 1.0)
    y = np.clip(uv[:, 1] * r - 0.5, 0.0, r - 1.0)
    j0 = np.floor(x).astype(np.int64)
    i0 = np.floor(y).astype(np.int64)
    j1 = np.minimum(j0 + 1, r - 1)
    i1 = np.minimum(i0 + 1, r - 1)
    fx = (x - j0)[None]
    fy = (y - i0)[None]
    return (texture[:, i0, j0] * (1 - fx) * (1 - fy)
            + texture[:, i0, j1] * fx * (1 - fy)
            + texture[:, i1, j0] * (1 - fx) * fy
            + texture[:, i1, j1] * fx * fy).T


def render_mesh_oracle(vertices, faces, uv, texture, cam, background=0.0):
    """Z-buffered, perspective-correct textured rasterization.

    Returns (image [3,H,W], coverage mask [H,W]). Pixel (i, j) samples the
    continuous image plane at (j + 0.5, i + 0.5), matching the splatter.
    """
    v = np.asarray(vertices)
    t = v @ cam.rotation.T + cam.translation
    sx = cam.fx * t[:, 0] / t[:, 2] + cam.cx
    sy = cam.fy * t[:, 1] / t[:, 2] + cam.cy
    h, w = cam.height, cam.width
    img = np.full((3, h, w), float(background))
    zbuf = np.full((h, w), np.inf)
    fidx = np.full((h, w), -1, dtype=np.int64)
    bary_buf = np.zeros((h, w, 3))

    for fi, (ia, ib, ic) in enumerate(faces):
        if t[ia, 2] < cam.near or t[ib, 2] < cam.near or t[ic, 2] < cam.near:
            continue
        xs = np.array([sx[ia], sx[ib], sx[ic]])
        ys = np.array([sy[ia], sy[ib], sy[ic]])
        x0 = max(int(np.floor(xs.min() - 0.5)), 0)
        x1 = min(int(np.ceil(xs.max() - 0.5)), w - 1)
        y0 = max(int(np.floor(ys.min() - 0.5)), 0)
        y1 = min(int(np.ceil(ys.max() - 0.5)), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        det = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(det) < 1e-14:
            continue
        px, py = np.meshgrid(np.arange(x0, x1 + 1) + 0.5,
                             np.arange(y0, y1 + 1) + 0.5)
        w1 = ((px - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (py - ys[0])) / det
        w2 = ((xs[1] - xs[0]) * (py - ys[0]) - (px - xs[0]) * (ys[1] - ys[0])) / det
        w0 = 1.0 - w1 - w2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        # perspective-correct interpolation via 1/z
        iz = (w0 / t[ia, 2] + w1 / t[ib, 2] + w2 / t[ic, 2])
        depth = 1.0 / np.maximum(iz, 1e-300)
        ii, jj = np.nonzero(inside)
        gy, gx = ii + y0, jj + x0
        closer = depth[ii, jj] < zbuf[gy, gx]
        gy, gx, ii, jj = gy[closer], gx[closer], ii[closer], jj[closer]
        zbuf[gy, gx] = depth[ii, jj]
        fidx[gy, gx] = fi
        d = depth[ii, jj]
        bary_buf[gy, gx, 0] = w0[ii, jj] / t[ia, 2] * d
        bary_buf[gy, gx, 1] = w1[ii, jj] / t[ib, 2] * d
        bary_buf[gy, gx, 2] = w2[ii, jj] / t[ic, 2] * d

    mask = fidx >= 0
    gy, gx = np.nonzero(mask)
    if len(gy):
        fa = faces[fidx[gy, gx]]
        uv_pix = (bary_buf[gy, gx, 0, None] * uv[fa[:, 0]]
                  + bary_buf[gy, gx, 1, None] * uv[fa[:, 1]]
                  + bary_buf[gy, gx, 2, None] * uv[fa[:, 2]])
        colors = _sample_texture_bilinear(texture, np.clip(uv_pix, 0.0, 1.0))
        img[:, gy, gx] = colors.T
    return img, mask


def raycast_reference(vertices, faces, uv, texture, cam, background=0.0,
                      pixels=None):
    """Per-pixel ray/triangle intersection reference for the oracle.

    pixels: optional [M,2] (row, col) subset; defaults to the full image.
    Returns (colors [M,3], hit mask [M]).
    """
    v = np.asarray(vertices)
    if pixels is None:
        ii, jj = np.meshgrid(np.arange(cam.height), np.arange(cam.width),
                             indexing="ij")
        pixels = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1)
    cam_pos = cam.center
    rot_t = cam.rotation.T
    a = v[faces[:, 0]]
    e1 = v[faces[:, 1]] - a
    e2 = v[faces[:, 2]] - a
    colors = np.full((len(pixels), 3), float(background))
    hits = np.zeros(len(pixels), dtype=bool)
    for m, (pi, pj) in enumerate(pixels):
        d_cam = np.array([(pj + 0.5 - cam.cx) / cam.fx,
                          (pi + 0.5 - cam.cy) / cam.fy, 1.0])
        d = rot_t @ d_cam
        # Moller-Trumbore, vectorized over faces
        pvec = np.cross(d, e2)
        det = np.einsum("fk,fk->f", e1, pvec)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = cam_pos - a
        u = np.einsum("fk,fk->f", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        vv = (qvec @ d) * inv
        dist = np.einsum("fk,fk->f", e2, qvec) * inv
        good = ok & (u >= 0) & (vv >= 0) & (u + vv <= 1) & (dist > cam.near)
        if not good.any():
            continue
        k = np.nonzero(good)[0][np.argmin(dist[good])]
        w0, w1, w2 = 1.0 - u[k] - vv[k], u[k], vv[k]
        fa = faces[k]
        uv_hit = w0 * uv[fa[0]] + w1 * uv[fa[1]] + w2 * uv[fa[2]]
        colors[m] = _sample_texture_bilinear(
            texture, np.clip(uv_hit, 0.0, 1.0)[None])[0]
        hits[m] = True
    return colors, hits


# -- dataset directory layout -----------------------------------------------------
#
# out/
#   body.mesh body.skin texture.pfd cameras.txt split.txt
#   poses/frame_XXXX.pose      (root translation line + J axis-angle lines)
#   meshes/frame_XXXX.mesh
#   images/fXXXX_cYY.pfm  masks/fXXXX_cYY.pgm
# All text numerics use 17 significant digits.


def _fmt(x):
    return format(float(x), ".17g")


def save_dataset(out_dir, scene):
    from .uvmap import save_layer

    os.makedirs(out_dir, exist_ok=True)
    for sub in ("poses", "meshes", "images", "masks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    save_body(os.path.join(out_dir, "body"), scene.body)
    save_layer(os.path.join(out_dir, "texture.pfd"), scene.texture)
    with open(os.path.join(out_dir, "cameras.txt"), "w") as f:
        for cam in scene.cameras:
            nums = [cam.fx, cam.fy, cam.cx, cam.cy]
            nums += list(cam.world_to_cam[:3].reshape(-1))
            f.write(" ".join(_fmt(x) for x in nums)
                    + f" {cam.width} {cam.height} {_fmt(cam.near)}\n")
    for fi, pose in enumerate(scene.poses):
        with open(os.path.join(out_dir, "poses", f"frame_{fi:04d}.pose"), "w") as f:
            f.write("t " + " ".join(_fmt(x) for x in pose.root_translation) + "\n")
            for row in pose.joint_rotations:
                f.write("r " + " ".join(_fmt(x) for x in row) + "\n")
        save_mesh(os.path.join(out_dir, "meshes", f"frame_{fi:04d}.mesh"),
                  scene.gt_meshes[fi], scene.body.uv, scene.body.faces)
    for fi in range(len(scene.poses)):
        for ci in range(len(scene.cameras)):
            imageio.save_pfm(
                os.path.join(out_dir, "images", f"f{fi:04d}_c{ci:02d}.pfm"),
                scene.gt_images[fi, ci])
            imageio.save_pgm(
                os.path.join(out_dir, "masks", f"f{fi:04d}_c{ci:02d}.pgm"),
                scene.masks[fi, ci])
    with open(os.path.join(out_dir, "split.txt"), "w") as f:
        for name, arr in (("train_frames", scene.train_frames),
                          ("test_frames", scene.test_frames),
                          ("train_views", scene.train_views),
                          ("test_views", scene.test_views)):
            f.write(name + " " + " ".join(str(i) for i in arr) + "\n")
    with open(os.path.join(out_dir, "scene.txt"), "w") as f:
        cfg = scene.config
        f.write(f"seed {scene.seed}\n")
        for key, val in vars(cfg).items():
            f.write(f"{key} {_fmt(val) if isinstance(val, float) else val}\n")


def load_dataset(out_dir):
    from .uvmap import load_layer

    body = load_body(os.path.join(out_dir, "body"))
    texture = load_layer(os.path.join(out_dir, "texture.pfd"))
    cameras = []
    with open(os.path.join(out_dir, "cameras.txt")) as f:
        for line in f:
            parts = line.split()
            fx, fy, cx, cy = (float(x) for x in parts[:4])
            w2c = np.eye(4)
            w2c[:3] = np.array([float(x) for x in parts[4:16]]).reshape(3, 4)
            width, height = int(parts[16]), int(parts[17])
            cameras.append(Camera(fx, fy, cx, cy, w2c, width, height,
                                  float(parts[18])))
    poses, meshes = [], []
    fi = 0
    while True:
        ppath = os.path.join(out_dir, "poses", f"frame_{fi:04d}.pose")
        if not os.path.exists(ppath):
            break
        with open(ppath) as f:
            lines = f.read().splitlines()
        trans = np.array([float(x) for x in lines[0].split()[1:]])
        rots = np.array([[float(x) for x in ln.split()[1:]] for ln in lines[1:]])
        poses.append(Pose(rots, trans))
        verts, _, _ = load_mesh(os.path.join(out_dir, "meshes", f"frame_{fi:04d}.mesh"))
        meshes.append(verts)
        fi += 1
    f_count, c_count = len(poses), len(cameras)
    h, w = cameras[0].height, cameras[0].width
    images = np.zeros((f_count, c_count, 3, h, w))
    masks = np.zeros((f_count, c_count, h, w), dtype=bool)
    for fi in range(f_count):
        for ci in range(c_count):
            images[fi, ci] = imageio.load_pfm(
                os.path.join(out_dir, "images", f"f{fi:04d}_c{ci:02d}.pfm"))
            masks[fi, ci] = imageio.load_pgm(
                os.path.join(out_dir, "masks", f"f{fi:04d}_c{ci:02d}.pgm"))
    splits = {}
    with open(os.path.join(out_dir, "split.txt")) as f:
        for line in f:
            parts = line.split()
            splits[parts[0]] = np.array([int(x) for x in parts[1:]], dtype=np.int64)
    cfg = SceneConfig(image_size=w)
    seed = 0
    scene_path = os.path.join(out_dir, "scene.txt")
    if os.path.exists(scene_path):
        with open(scene_path) as f:
            kv = dict(ln.split(None, 1) for ln in f.read().splitlines())
        seed = int(kv.pop("seed", 0))
        for key, val in kv.items():
            if hasattr(cfg, key):
                cur = getattr(cfg, key)
                setattr(cfg, key, type(cur)(float(val) if isinstance(cur, float) else int(val)))
    return SyntheticScene(
        body=body, texture=texture, poses=poses, gt_meshes=np.stack(meshes),
        cameras=cameras, gt_images=images, masks=masks,
        train_frames=splits["train_frames"], test_frames=splits["test_frames"],
        train_views=splits["train_views"], test_views=splits["test_views"],
        config=cfg, seed=seed)
