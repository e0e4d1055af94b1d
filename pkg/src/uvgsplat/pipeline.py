"""End-to-end assembly: coarse posing, learned mesh refinement, gaussian
texture prediction, texel lifting, splatting, joint training, evaluation,
and the four mesh-guidance ablation modes (none / coarse / gt_deformed /
learned).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import loss as L
from . import nets as N
from . import tensor as T
from . import uvmap
from .body import forward_kinematics, lbs, lbs_numpy
from .splat import render_gaussians
from .synth import average_texture

GUIDANCE_MODES = ("none", "coarse", "gt_deformed", "learned")


@dataclass
class PipelineConfig:
    uv_resolution: int = 64
    mesh_guidance: str = "learned"
    lr_mesh: float = 2e-5
    lr_gauss: float = 2e-3
    iterations: int = 3000
    depth: int = 5
    mesh_base_channels: int = 16
    gauss_base_channels: int = 32
    scale_init: float = N.DEFAULT_SCALE_INIT
    background: tuple = (0.0, 0.0, 0.0)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 1000
    image_loss_enabled: bool = True
    mesh_loss_enabled: bool = True

    def __post_init__(self):
        if self.mesh_guidance not in GUIDANCE_MODES:
            raise ValueError(f"mesh_guidance must be one of {GUIDANCE_MODES}")
        if self.uv_resolution % (1 << self.depth) != 0:
            raise ValueError("uv_resolution must be divisible by 2^depth")


def make_nets(config):
    nets = {
        "gauss": N.make_unet(9, N.GAUSS_CHANNELS, depth=config.depth,
                             base_channels=config.gauss_base_channels,
                             seed=config.seed + 1),
    }
    if config.mesh_guidance == "learned":
        nets["mesh"] = N.make_unet(3, 3, depth=config.depth,
                                   base_channels=config.mesh_base_channels,
                                   seed=config.seed)
    return nets


def refine_mesh(body, pose, mesh_net, uv_resolution):
    """Coarse posing + learned offsets.

    G_coarse = LBS(template); offsets predicted in the canonical frame from
    the coarse position map, sampled back at vertex UVs, and carried into
    the posed frame with rotation-only skinning.
    """
    transforms = forward_kinematics(body, pose)
    coarse = lbs_numpy(body.vertices, body.weights, transforms)
    pos_map, _, _ = uvmap.rasterize_position_map(coarse, body, uv_resolution)
    offset_map = N.predict_offset_map(mesh_net, T.constant(pos_map))
    offsets = uvmap.sample_uv(offset_map, body.uv)
    refined = T.constant(coarse) + lbs(offsets, body.weights, transforms,
                                       mode="rotation_only")
    return {"coarse": coarse, "offset_map": offset_map, "offsets": offsets,
            "refined": refined, "transforms": transforms}


def texture_at_resolution(texture, resolution):
    """Resample a UV texture to the working UV resolution (bilinear)."""
    if texture.shape[-1] == resolution:
        return texture
    centers = (np.arange(resolution) + 0.5) / resolution
    uu, vv = np.meshgrid(centers, centers)
    pts = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    flat = uvmap.sample_uv(texture, pts)
    return np.ascontiguousarray(
        flat.reshape(resolution, resolution, -1).transpose(2, 0, 1))


def view_direction_layer(position_map, mask, cam):
    """Per-texel unit vector from the surface point to the camera center."""
    d = cam.center[:, None, None] - position_map
    norm = np.sqrt((d * d).sum(axis=0, keepdims=True))
    d = np.where(norm > 1e-12, d / np.maximum(norm, 1e-12), 0.0)
    return d * mask[None]


def forward_render(body, pose, cam, nets, avg_texture, config, gt_mesh=None,
                   early_stop=None, want_image=True):
    """Render one (pose, camera) pair; returns image Tensor + intermediates.

    Guidance modes: learned (full model), coarse (posed template, no
    offsets), gt_deformed (scripted ground-truth mesh, no mesh net), none
    (the delta_t channels become absolute world positions).
    """
    r = config.uv_resolution
    mode = config.mesh_guidance
    atlas = uvmap.build_atlas(body, r)
    parts = {}

    if mode == "learned":
        ref = refine_mesh(body, pose, nets["mesh"], r)
        guidance = ref["refined"]
        parts.update(ref)
    else:
        transforms = forward_kinematics(body, pose)
        coarse = lbs_numpy(body.vertices, body.weights, transforms)
        parts["coarse"] = coarse
        if mode == "gt_deformed":
            if gt_mesh is None:
                raise ValueError("gt_deformed guidance requires gt_mesh")
            guidance = T.constant(gt_mesh)
        else:
            guidance = T.constant(coarse)
    parts["guidance"] = guidance

    pos_map = uvmap.rasterize_vertex_layer(guidance, body, r)
    tex = texture_at_resolution(avg_texture, r)
    view = view_direction_layer(pos_map.data, atlas.mask, cam)
    textures = N.predict_gaussian_textures(
        nets["gauss"], pos_map, T.constant(tex), T.constant(view),
        scale_init=config.scale_init)
    parts["textures"] = textures

    mask = atlas.mask
    delta_t = uvmap.gather_masked(textures["delta_t"], mask)
    log_scale = uvmap.gather_masked(textures["log_scale"], mask)
    quat = uvmap.gather_masked(textures["quat"], mask)
    opacity = T.reshape(uvmap.gather_masked(textures["opacity"], mask), (-1,))
    color = uvmap.gather_masked(textures["color"], mask)
    if mode == "none":
        mu = delta_t
    else:
        mu = uvmap.gather_masked(pos_map, mask) + delta_t
    parts.update({"mu": mu, "delta_t": delta_t, "log_scale": log_scale})

    if want_image:
        parts["image"] = render_gaussians(
            mu, log_scale, quat, opacity, color, cam,
            np.asarray(config.background), early_stop=early_stop)
    else:
        parts["image"] = None
    return parts


# -- optimizer -------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * p.grad
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * p.grad * p.grad
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# -- training --------------------------------------------------------------------


def train(scene, config, out_dir=None, nets=None):
    """Joint optimization loop. Returns {nets, history}; optionally writes
    checkpoints, the loss-curve table, and the resolved config to out_dir.
    """
    if nets is None:
        nets = make_nets(config)
    avg_tex = average_texture(scene)
    optimizers = {"gauss": Adam(nets["gauss"].parameters(), config.lr_gauss)}
    if "mesh" in nets:
        optimizers["mesh"] = Adam(nets["mesh"].parameters(), config.lr_mesh)

    pairs = [(int(f), int(v)) for f in scene.train_frames for v in scene.train_views]
    rng = np.random.default_rng(config.seed + 9000)
    schedule = []
    while len(schedule) < config.iterations:
        schedule.extend(pairs[i] for i in rng.permutation(len(pairs)))
    schedule = schedule[:config.iterations]

    history = []
    w = config.weights
    for it, (fi, vi) in enumerate(schedule, start=1):
        parts = forward_render(scene.body, scene.poses[fi], scene.cameras[vi],
                               nets, avg_tex, config,
                               gt_mesh=scene.gt_meshes[fi],
                               want_image=config.image_loss_enabled)
        terms = []
        l_mesh = 0.0
        if config.mesh_guidance == "learned" and config.mesh_loss_enabled:
            lm = L.mesh_loss(parts["refined"], scene.gt_meshes[fi],
                             scene.body.faces, w)
            terms.append(lm)
            l_mesh = lm.item()
        l_image = 0.0
        if config.image_loss_enabled:
            li = L.image_loss(parts["image"], scene.gt_images[fi, vi], w)
            terms.append(li)
            l_image = li.item()
        lg = L.gaussian_reg(parts["log_scale"], parts["delta_t"], w)
        terms.append(lg)
        l_gauss = lg.item()
        total = L.total_loss(terms)
        value = total.item()
        if not np.isfinite(value):
            raise RuntimeError(
                f"non-finite loss at iteration {it}: "
                f"mesh={l_mesh} image={l_image} gauss={l_gauss}")
        total.backward()
        for opt in optimizers.values():
            opt.step()
            opt.zero_grad()
        if it % config.log_every == 0 or it == 1 or it == config.iterations:
            history.append((it, l_mesh, l_image, l_gauss, value))
        if out_dir and config.checkpoint_every and it % config.checkpoint_every == 0:
            N.save_checkpoint(os.path.join(out_dir, f"checkpoint_{it:06d}.npz"),
                              nets, config=_config_dict(config))

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        N.save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), nets,
                          config=_config_dict(config))
        write_loss_curve(os.path.join(out_dir, "loss_curve.txt"), history)
    return {"nets": nets, "history": history}


def _config_dict(config):
    d = asdict(config)
    d["weights"] = vars(config.weights)
    d["background"] = list(config.background)
    return d


def config_from_dict(d):
    d = dict(d)
    w = d.pop("weights", None)
    cfg = PipelineConfig(**{k: v for k, v in d.items() if k != "background"})
    if "background" in d:
        cfg.background = tuple(d["background"])
    if w:
        cfg.weights = L.LossWeights(**w)
    return cfg


def write_loss_curve(path, history):
    with open(path, "w") as f:
        f.write("iteration\tl_mesh\tl_image\tl_gauss\ttotal\n")
        for row in history:
            f.write(f"{row[0]}\t" + "\t".join(format(x, ".17g") for x in row[1:]) + "\n")


# -- evaluation ------------------------------------------------------------------


def evaluate(scene, nets, config, split, subject="synthetic"):
    """Masked PSNR/SSIM over a split. Returns (rows, aggregate means)."""
    if split == "novel_view":
        frames, views = scene.train_frames, scene.test_views
    elif split == "novel_pose":
        frames, views = scene.test_frames, scene.test_views
    else:
        raise ValueError(f"unknown split {split!r}")
    if len(frames) == 0 or len(views) == 0:
        raise ValueError(f"split {split!r} is empty for this scene")
    avg_tex = average_texture(scene)
    rows = []
    for fi in frames:
        for vi in views:
            parts = forward_render(scene.body, scene.poses[int(fi)],
                                   scene.cameras[int(vi)], nets, avg_tex,
                                   config, gt_mesh=scene.gt_meshes[int(fi)])
            render = parts["image"].data
            m = L.metrics(render, scene.gt_images[int(fi), int(vi)],
                          scene.masks[int(fi), int(vi)])
            rows.append({"subject": subject, "split": split, "frame": int(fi),
                         "view": int(vi), "psnr": m["psnr"], "ssim": m["ssim"]})
    agg = {"psnr": float(np.mean([r["psnr"] for r in rows])),
           "ssim": float(np.mean([r["ssim"] for r in rows]))}
    return rows, agg


def write_metric_table(path, rows):
    """Line-oriented metric report: tab-separated, documented columns."""
    with open(path, "w") as f:
        f.write("subject\tsplit\tframe\tview\tpsnr\tssim\n")
        for r in rows:
            f.write(f"{r['subject']}\t{r['split']}\t{r['frame']}\t{r['view']}\t"
                    f"{format(r['psnr'], '.17g')}\t{format(r['ssim'], '.17g')}\n")


def run_ablation(scene, config, modes=GUIDANCE_MODES):
    """Train & evaluate every guidance mode; returns {mode: novel-pose agg}."""
    results = {}
    for mode in modes:
        cfg = config_from_dict({**_config_dict(config), "mesh_guidance": mode})
        out = train(scene, cfg)
        _, agg = evaluate(scene, out["nets"], cfg, "novel_pose")
        results[mode] = agg
    return results
