"""Procedural articulated template body, forward kinematics and skinning.

The template is a watertight segmented tube ("limb chain"): a stack of
vertex rings along +z closed by two cap fans, with a UV atlas laid out as
one cylindrical side chart plus two cap disks. Joints sit at the ring
boundaries and form a single kinematic chain; skinning weights blend two
adjacent joints with a cosine falloff across each boundary band, so the
deformation is smooth and every weight row sums to 1 by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class TemplateBody:
    vertices: np.ndarray      # [N,3] rest (T-pose) positions, meters
    faces: np.ndarray         # [F,3] int triangle indices
    uv: np.ndarray            # [N,2] in [0,1]^2
    weights: np.ndarray       # [N,J] skinning weights, rows sum to 1
    joints: np.ndarray        # [J,3] rest joint positions
    parents: np.ndarray       # [J] parent index, -1 for root

    def __post_init__(self):
        n = self.vertices.shape[0]
        j = self.joints.shape[0]
        if self.uv.shape != (n, 2):
            raise ValueError("uv must be [N,2]")
        if self.weights.shape != (n, j):
            raise ValueError("weights must be [N,J]")
        rows = self.weights.sum(axis=1)
        if np.any(self.weights < 0) or np.max(np.abs(rows - 1.0)) > 1e-9:
            raise ValueError("weight rows must be nonnegative and sum to 1")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        if np.any(self.parents[1:] >= np.arange(1, j)):
            raise ValueError("parents must precede children (tree order)")
        if self.uv.min() < 0.0 or self.uv.max() > 1.0:
            raise ValueError("uv coordinates must lie in [0,1]^2")
        a = self.uv[self.faces[:, 0]]
        b = self.uv[self.faces[:, 1]]
        c = self.uv[self.faces[:, 2]]
        area2 = np.abs(
            (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
            - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
        )
        if np.any(area2 * 0.5 <= 1e-12):
            bad = int(np.argmin(area2))
            raise ValueError(f"degenerate UV triangle at face {bad}")

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_joints(self):
        return self.joints.shape[0]


@dataclass
class Pose:
    joint_rotations: np.ndarray   # [J,3] axis-angle, radians
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if not (np.all(np.isfinite(self.joint_rotations))
                and np.all(np.isfinite(self.root_translation))):
            raise ValueError("pose parameters must be finite")

    @staticmethod
    def rest(num_joints):
        return Pose(np.zeros((num_joints, 3)))


def template_vertex_count(segments, radial):
    """Closed-form vertex count of make_template: side grid + two cap fans."""
    return (segments + 1) * (radial + 1) + 2 * radial + 2


def template_face_count(segments, radial):
    return 2 * segments * radial + 2 * radial


def make_template(segments=5, radial=8, limb_lengths=None, radius=0.1, seed=0):
    """Build the procedural tube-and-limb template.

    segments: number of tube segments (>= 2); radial: ring resolution (>= 6);
    limb_lengths: per-segment lengths in meters (default 0.25 each). The seed
    drives a small deterministic radius jitter so the surface is not a perfect
    cylinder.
    """
    if segments < 2:
        raise ValueError("segments must be >= 2")
    if radial < 6:
        raise ValueError("radial must be >= 6")
    if limb_lengths is None:
        limb_lengths = [0.25] * segments
    limb_lengths = np.asarray(limb_lengths, dtype=np.float64)
    if limb_lengths.shape != (segments,) or np.any(limb_lengths <= 0.0):
        raise ValueError("limb_lengths must be positive, one per segment")
    if radius <= 0.0:
        raise ValueError("radius must be positive")

    rng = np.random.default_rng(seed)
    z = np.concatenate([[0.0], np.cumsum(limb_lengths)])
    total = z[-1]
    jitter = rng.uniform(-0.15, 0.15, size=(segments + 1, radial))

    verts, uvs = [], []
    # side grid: (segments+1) rings x (radial+1) columns; last column
    # repeats column 0 positionally (UV seam duplicate).
    for i in range(segments + 1):
        bulge = 1.0 + 0.25 * np.sin(np.pi * i / segments)
        for c in range(radial + 1):
            cc = c % radial
            theta = 2.0 * np.pi * cc / radial
            r = radius * bulge * (1.0 + jitter[i, cc])
            verts.append([r * np.cos(theta), r * np.sin(theta), z[i]])
            uvs.append([c / radial, 0.02 + 0.60 * (z[i] / total)])

    def ring(i, c):
        return i * (radial + 1) + c

    faces = []
    for i in range(segments):
        for c in range(radial):
            a, b = ring(i, c), ring(i, c + 1)
            d, e = ring(i + 1, c), ring(i + 1, c + 1)
            faces.append([a, b, e])
            faces.append([a, e, d])

    # caps: duplicated rim vertices (fresh UVs on disk charts) + center.
    for end, (cx, cy) in ((0, (0.25, 0.82)), (segments, (0.75, 0.82))):
        rim0 = len(verts)
        for c in range(radial):
            theta = 2.0 * np.pi * c / radial
            src = ring(end, c)
            verts.append(list(verts[src]))
            uvs.append([cx + 0.14 * np.cos(theta), cy + 0.14 * np.sin(theta)])
        center = len(verts)
        verts.append([0.0, 0.0, z[end]])
        uvs.append([cx, cy])
        for c in range(radial):
            a, b = rim0 + c, rim0 + (c + 1) % radial
            if end == 0:
                faces.append([center, b, a])
            else:
                faces.append([center, a, b])

    verts = np.asarray(verts, dtype=np.float64)
    uvs = np.asarray(uvs, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)

    joints = np.stack([np.zeros(segments + 1), np.zeros(segments + 1), z], axis=1)
    parents = np.arange(-1, segments)

    # joint j drives segment j (z in [z_j, z_{j+1}]); two-joint cosine blend
    # across a band around each interior boundary.
    band = 0.3 * float(limb_lengths.min())
    weights = np.zeros((len(verts), segments + 1))
    vz = verts[:, 2]
    seg = np.clip(np.searchsorted(z, vz, side="right") - 1, 0, segments - 1)
    for n in range(len(verts)):
        s = int(seg[n])
        weights[n, s] = 1.0
        for b in range(1, segments):
            lo, hi = z[b] - band, z[b] + band
            if lo < vz[n] < hi:
                t = (vz[n] - lo) / (2.0 * band)
                blend = 0.5 * (1.0 - np.cos(np.pi * t))
                weights[n, :] = 0.0
                weights[n, b - 1] = 1.0 - blend
                weights[n, b] = blend
    return TemplateBody(verts, faces, uvs, weights, joints, parents)


# -- kinematics ---------------------------------------------------------------


def _axis_angle_to_matrix(aa):
    """Rodrigues formula for a batch [J,3] of axis-angle vectors."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta[..., 0] < 1e-12
    axis = np.where(theta > 1e-12, aa / np.maximum(theta, 1e-12), 0.0)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    k = np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=-2)
    t = theta[..., None]
    eye = np.broadcast_to(np.eye(3), k.shape)
    r = eye + np.sin(t) * k + (1.0 - np.cos(t)) * (k @ k)
    r[small] = np.eye(3)
    return r


def forward_kinematics(body, pose):
    """Per-joint rest -> posed affine transforms, composed parent to child."""
    j = body.num_joints
    if pose.joint_rotations.shape != (j, 3):
        raise ValueError(f"pose has {pose.joint_rotations.shape[0]} joints, body has {j}")
    rots = _axis_angle_to_matrix(pose.joint_rotations)
    world = np.zeros((j, 4, 4))
    for i in range(j):
        local = np.eye(4)
        if body.parents[i] < 0:
            local[:3, 3] = body.joints[i] + pose.root_translation
        else:
            local[:3, 3] = body.joints[i] - body.joints[body.parents[i]]
        local[:3, :3] = rots[i]
        if body.parents[i] < 0:
            world[i] = local
        else:
            world[i] = world[body.parents[i]] @ local
    # convert world joint frames into rest->posed skinning transforms
    out = world.copy()
    for i in range(j):
        back = np.eye(4)
        back[:3, 3] = -body.joints[i]
        out[i] = world[i] @ back
    return out


def _blend_transforms(weights, transforms):
    rot = np.einsum("nj,jab->nab", weights, transforms[:, :3, :3])
    trans = weights @ transforms[:, :3, 3]
    return rot, trans


def lbs_numpy(points, weights, transforms, mode="full"):
    """Linear blend skinning on a plain array (no autodiff)."""
    _check_lbs_args(points, weights, transforms, mode)
    rot, trans = _blend_transforms(weights, transforms[:, :3, :])
    out = np.einsum("nab,nb->na", rot, points)
    if mode == "full":
        out = out + trans
    return out


def lbs(points, weights, transforms, mode="full"):
    """Skinning as a differentiable op on vertex positions.

    points may be a Tensor [N,3] or ndarray; weights/transforms are constants.
    rotation_only drops the blended translations (used by the offset-skinning
    identity in the refinement step).
    """
    if not isinstance(points, T.Tensor):
        return lbs_numpy(points, weights, transforms, mode)
    _check_lbs_args(points.data, weights, transforms, mode)
    rot, trans = _blend_transforms(weights, transforms[:, :3, :])
    data = np.einsum("nab,nb->na", rot, points.data)
    if mode == "full":
        data = data + trans

    def backward(g):
        points.accumulate(np.einsum("nba,nb->na", rot, g))

    return T.Tensor.from_op(data, (points,), backward)


def _check_lbs_args(points, weights, transforms, mode):
    if mode not in ("full", "rotation_only"):
        raise ValueError(f"unknown lbs mode {mode!r}")
    if points.shape[0] != weights.shape[0]:
        raise ValueError("points/weights row count mismatch")
    rows = weights.sum(axis=1)
    err = np.max(np.abs(rows - 1.0))
    if err > 1e-6:
        raise ValueError(f"weight rows must sum to 1 (max deviation {err:.3g})")


# -- plain-text mesh interchange ----------------------------------------------
#
# Mesh file grammar (one record per line, 17-significant-digit floats):
#   uvgsplat-mesh 1
#   counts <N> <F>
#   v <x> <y> <z> <u> <v>        (N lines)
#   f <a> <b> <c>                (F lines, 0-based)
# Skin sidecar grammar:
#   uvgsplat-skin 1
#   counts <N> <J>
#   j <x> <y> <z> <parent>       (J lines)
#   w <J floats>                 (N lines)


def _fmt(x):
    return format(float(x), ".17g")


def save_mesh(path, vertices, uv, faces):
    with open(path, "w") as f:
        f.write("uvgsplat-mesh 1\n")
        f.write(f"counts {len(vertices)} {len(faces)}\n")
        for p, t in zip(vertices, uv):
            f.write(f"v {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {_fmt(t[0])} {_fmt(t[1])}\n")
        for a, b, c in faces:
            f.write(f"f {a} {b} {c}\n")


def load_mesh(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "uvgsplat-mesh 1":
        raise ValueError(f"{path}: not a uvgsplat mesh file")
    n, nf = (int(s) for s in lines[1].split()[1:])
    verts, uvs, faces = [], [], []
    for line in lines[2 : 2 + n]:
        parts = line.split()
        verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
        uvs.append([float(parts[4]), float(parts[5])])
    for line in lines[2 + n : 2 + n + nf]:
        parts = line.split()
        faces.append([int(parts[1]), int(parts[2]), int(parts[3])])
    return (np.asarray(verts), np.asarray(uvs), np.asarray(faces, dtype=np.int64))


def save_skin(path, weights, joints, parents):
    with open(path, "w") as f:
        f.write("uvgsplat-skin 1\n")
        f.write(f"counts {weights.shape[0]} {weights.shape[1]}\n")
        for p, par in zip(joints, parents):
            f.write(f"j {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {int(par)}\n")
        for row in weights:
            f.write("w " + " ".join(_fmt(x) for x in row) + "\n")


def load_skin(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "uvgsplat-skin 1":
        raise ValueError(f"{path}: not a uvgsplat skin file")
    n, j = (int(s) for s in lines[1].split()[1:])
    joints, parents, weights = [], [], []
    for line in lines[2 : 2 + j]:
        parts = line.split()
        joints.append([float(parts[1]), float(parts[2]), float(parts[3])])
        parents.append(int(parts[4]))
    for line in lines[2 + j : 2 + j + n]:
        weights.append([float(x) for x in line.split()[1:]])
    return (np.asarray(weights), np.asarray(joints),
            np.asarray(parents, dtype=np.int64))


def save_body(prefix, body):
    save_mesh(prefix + ".mesh", body.vertices, body.uv, body.faces)
    save_skin(prefix + ".skin", body.weights, body.joints, body.parents)


def load_body(prefix):
    verts, uvs, faces = load_mesh(prefix + ".mesh")
    weights, joints, parents = load_skin(prefix + ".skin")
    return TemplateBody(verts, faces, uvs, weights, joints, parents)
