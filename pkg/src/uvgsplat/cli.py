"""Command-line entry point.

Subcommands: gen-data, train, render, eval, grad-check, ablate.
Exit codes: 0 success, 1 usage error, 2 runtime failure.

Configuration is a flat key=value text file with section dots, e.g.

    scene.num_frames=40
    pipeline.iterations=3000
    loss.l1=1.0

Flags override the file. Every run writes its fully resolved config next
to its outputs. The UVGSPLAT_DATA_DIR environment variable supplies the
default --data directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import loss as L
from . import nets as N
from . import pipeline as P
from . import synth
from . import tensor as T
from .imageio import save_ppm
from .splat import Camera

DATA_ENV = "UVGSPLAT_DATA_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here is 1.
    def error(self, message):
        raise UsageError(message)


# -- config plumbing -------------------------------------------------------------


def parse_config_file(path):
    """key=value lines with section dots; '#' comments and blanks allowed."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(value, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"expected boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(float(v) for v in value.split(","))
    return value


def apply_overlay(overlay, scene_cfg, pipe_cfg):
    """Fold key=value pairs into the scene/pipeline/loss configs in place.
    Unknown keys are rejected.
    """
    for key, value in overlay.items():
        section, _, name = key.partition(".")
        if not name:
            raise UsageError(f"config key {key!r} needs a section prefix")
        if section == "scene":
            target = scene_cfg
        elif section == "pipeline":
            target = pipe_cfg
        elif section == "loss":
            target = pipe_cfg.weights
        else:
            raise UsageError(f"unknown config section {section!r} in {key!r}")
        if not hasattr(target, name):
            raise UsageError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(value, getattr(target, name)))
    pipe_cfg.__post_init__()
    return scene_cfg, pipe_cfg


def resolved_config_text(scene_cfg, pipe_cfg):
    lines = []
    for v in sorted(dataclasses.asdict(scene_cfg)):
        lines.append(f"scene.{v}={getattr(scene_cfg, v)}")
    for v in sorted(P._config_dict(pipe_cfg)):
        if v == "weights":
            continue
        val = getattr(pipe_cfg, v)
        if isinstance(val, tuple):
            val = ",".join(format(x, "g") for x in val)
        lines.append(f"pipeline.{v}={val}")
    for v in sorted(vars(pipe_cfg.weights)):
        lines.append(f"loss.{v}={getattr(pipe_cfg.weights, v)}")
    return "\n".join(lines) + "\n"


def write_resolved_config(out_dir, scene_cfg, pipe_cfg, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    text = resolved_config_text(scene_cfg, pipe_cfg)
    if extra:
        text += "".join(f"{k}={v}\n" for k, v in sorted(extra.items()))
    with open(os.path.join(out_dir, "resolved_config.txt"), "w") as f:
        f.write(text)


def load_configs(args):
    scene_cfg = synth.SceneConfig()
    pipe_cfg = P.PipelineConfig()
    overlay = {}
    if getattr(args, "config", None):
        overlay.update(parse_config_file(args.config))
    apply_overlay(overlay, scene_cfg, pipe_cfg)
    if getattr(args, "seed", None) is not None:
        pipe_cfg.seed = args.seed
    if getattr(args, "iterations", None) is not None:
        pipe_cfg.iterations = args.iterations
    return scene_cfg, pipe_cfg


def data_dir_from(args):
    d = getattr(args, "data", None) or os.environ.get(DATA_ENV)
    if not d:
        raise UsageError(f"--data not given and {DATA_ENV} is unset")
    if not os.path.isdir(d):
        raise UsageError(f"data directory {d!r} does not exist")
    return d


def run_dir_inputs(args):
    """Resolve (data_dir, checkpoint) from --run or explicit flags."""
    run = getattr(args, "run", None)
    ckpt = getattr(args, "checkpoint", None)
    data = getattr(args, "data", None)
    if run:
        ckpt = ckpt or os.path.join(run, "checkpoint.npz")
        marker = os.path.join(run, "data_dir.txt")
        if data is None and os.path.exists(marker):
            with open(marker) as f:
                data = f.read().strip()
    if not ckpt or not os.path.exists(ckpt):
        raise UsageError(f"checkpoint not found: {ckpt!r}")
    if not data:
        data = os.environ.get(DATA_ENV)
    if not data or not os.path.isdir(data):
        raise UsageError(f"data directory {data!r} does not exist")
    return data, ckpt


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args):
    scene_cfg, pipe_cfg = load_configs(args)
    scene = synth.make_scene(seed=args.seed if args.seed is not None else 0,
                             config=scene_cfg)
    synth.save_dataset(args.out, scene)
    write_resolved_config(args.out, scene_cfg, pipe_cfg)
    print(f"dataset written to {args.out}: {scene_cfg.num_frames} frames, "
          f"{scene_cfg.num_cameras} cameras, {scene_cfg.image_size}px")
    return 0


def cmd_train(args):
    scene_cfg, pipe_cfg = load_configs(args)
    data = data_dir_from(args)
    scene = synth.load_dataset(data)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "data_dir.txt"), "w") as f:
        f.write(os.path.abspath(data) + "\n")
    write_resolved_config(args.out, dataclasses.replace(scene.config), pipe_cfg)
    result = P.train(scene, pipe_cfg, out_dir=args.out)
    final = result["history"][-1]
    print(f"trained {pipe_cfg.iterations} iterations; final total loss "
          f"{final[4]:.6g}; checkpoint at {os.path.join(args.out, 'checkpoint.npz')}")
    return 0


def cmd_render(args):
    data, ckpt = run_dir_inputs(args)
    scene = synth.load_dataset(data)
    nets, cfg_dict, _ = N.load_checkpoint(ckpt)
    pipe_cfg = P.config_from_dict(cfg_dict) if cfg_dict else P.PipelineConfig()
    os.makedirs(args.out, exist_ok=True)
    avg_tex = synth.average_texture(scene)
    frames = [args.frame] if args.frame is not None else list(scene.test_frames[:1])
    views = [args.view] if args.view is not None else list(scene.test_views[:1])
    for fi in frames:
        for vi in views:
            parts = P.forward_render(scene.body, scene.poses[fi],
                                     scene.cameras[vi], nets, avg_tex,
                                     pipe_cfg, gt_mesh=scene.gt_meshes[fi])
            path = os.path.join(args.out, f"render_f{fi:04d}_c{vi:02d}.ppm")
            save_ppm(path, parts["image"].data)
            print(f"wrote {path}")
    return 0


def cmd_eval(args):
    data, ckpt = run_dir_inputs(args)
    scene = synth.load_dataset(data)
    nets, cfg_dict, _ = N.load_checkpoint(ckpt)
    pipe_cfg = P.config_from_dict(cfg_dict) if cfg_dict else P.PipelineConfig()
    rows, agg = P.evaluate(scene, nets, pipe_cfg, args.split)
    out = args.out or os.path.join(os.path.dirname(ckpt),
                                   f"metrics_{args.split}.txt")
    P.write_metric_table(out, rows)
    print(f"{args.split}: mean psnr {agg['psnr']:.4f} dB, "
          f"mean ssim {agg['ssim']:.5f} ({len(rows)} images) -> {out}")
    return 0


def cmd_grad_check(args):
    failures = run_grad_suite(verbose=True)
    if failures:
        print(f"FAILED: {len(failures)} gradient check(s) out of tolerance",
              file=sys.stderr)
        return 2
    print("all gradient checks passed")
    return 0


def cmd_ablate(args):
    scene_cfg, pipe_cfg = load_configs(args)
    data = data_dir_from(args)
    scene = synth.load_dataset(data)
    os.makedirs(args.out, exist_ok=True)
    write_resolved_config(args.out, dataclasses.replace(scene.config), pipe_cfg)
    results = P.run_ablation(scene, pipe_cfg)
    path = os.path.join(args.out, "ablation.txt")
    with open(path, "w") as f:
        f.write("mode\tpsnr\tssim\n")
        for mode in P.GUIDANCE_MODES:
            agg = results[mode]
            f.write(f"{mode}\t{format(agg['psnr'], '.17g')}\t"
                    f"{format(agg['ssim'], '.17g')}\n")
    for mode in P.GUIDANCE_MODES:
        print(f"{mode:12s} novel-pose psnr {results[mode]['psnr']:.4f} dB")
    print(f"wrote {path}")
    return 0


# -- gradient self-test ----------------------------------------------------------


def run_grad_suite(verbose=False, seed=0):
    """Finite-difference spot checks over the differentiable surface.

    Each check supplies a builder taking one Tensor per argument slot;
    checking slot i substitutes the probe Tensor there and freezes the
    rest. Returns the list of (name, relative_error) failures.
    """
    from . import body, uvmap
    from .splat import build_covariance, render_gaussians

    rng = np.random.default_rng(seed)
    checks = []

    x0 = rng.standard_normal((3, 8, 8))
    k0 = rng.standard_normal((4, 3, 3, 3)) * 0.3
    b0 = rng.standard_normal(4) * 0.1
    checks.append(("conv2d", lambda x, k, b: T.reduce_sum(
        T.square(T.conv2d(x, k, bias=b, stride=1, padding=1))),
        [x0, k0, b0], 1e-5))

    tmpl = body.make_template(segments=2, radial=6, seed=seed)
    pose = body.Pose(joint_rotations=rng.standard_normal((len(tmpl.joints), 3)) * 0.3,
                     root_translation=rng.standard_normal(3) * 0.1)
    tf = body.forward_kinematics(tmpl, pose)
    checks.append(("lbs", lambda v: T.reduce_sum(
        T.square(body.lbs(v, tmpl.weights, tf))), [tmpl.vertices], 1e-5))

    checks.append(("position_map", lambda v: T.reduce_sum(T.square(
        uvmap.rasterize_vertex_layer(v, tmpl, 16))), [tmpl.vertices], 1e-5))

    uv_pts = rng.uniform(0.1, 0.9, size=(7, 2))
    checks.append(("sample_uv", lambda layer: T.reduce_sum(T.square(
        uvmap.sample_uv(layer, uv_pts))),
        [rng.standard_normal((3, 16, 16))], 1e-5))

    checks.append(("build_covariance", lambda ls, q: T.reduce_sum(
        T.square(build_covariance(ls, q))),
        [rng.uniform(-3.5, -2.5, 3), _unit(rng.standard_normal(4))], 1e-5))

    cam = _test_camera()

    def project_fn(mu, ls, q):
        from .splat import project
        sigma = build_covariance(ls, q)
        mu2d, cov2d, _depth = project(mu, sigma, cam)
        return T.reduce_sum(T.square(mu2d)) + T.reduce_sum(T.square(cov2d))
    checks.append(("project", project_fn,
                   [np.array([0.08, -0.05, 1.3]), rng.uniform(-3.2, -2.6, 3),
                    _unit(rng.standard_normal(4))], 1e-5))

    kk = 6
    mu0 = rng.uniform(-0.15, 0.15, (kk, 3)) + np.array([0, 0, 1.2])
    ls0 = rng.uniform(-3.2, -2.6, (kk, 3))
    q0 = np.stack([_unit(rng.standard_normal(4)) for _ in range(kk)])
    op0 = rng.uniform(0.3, 0.9, kk)
    col0 = rng.uniform(0.1, 0.9, (kk, 3))
    bg = np.array([0.1, 0.2, 0.3])
    checks.append(("rasterize", lambda mu, ls, q, op, col: T.reduce_sum(
        T.square(render_gaussians(mu, ls, _renorm_rows(q), op, col, cam, bg))),
        [mu0, ls0, q0, op0, col0], 1e-3))

    w = L.LossWeights()
    gt_img = rng.uniform(0.1, 0.9, (3, 24, 24))
    checks.append(("image_loss", lambda a: L.image_loss(a, gt_img, w),
                   [rng.uniform(0.1, 0.9, (3, 24, 24))], 1e-5))

    gt_mesh = tmpl.vertices + rng.standard_normal(tmpl.vertices.shape) * 0.01
    checks.append(("mesh_loss",
                   lambda ref: L.mesh_loss(ref, gt_mesh, tmpl.faces, w),
                   [tmpl.vertices + rng.standard_normal(tmpl.vertices.shape) * 0.01],
                   1e-5))

    checks.append(("gaussian_reg", lambda ls, dt: L.gaussian_reg(ls, dt, w),
                   [rng.uniform(-4, -3, (9, 3)),
                    rng.standard_normal((9, 3)) * 0.01], 1e-5))

    failures = []
    for name, builder, points, tol in checks:
        err = check_builder_grads(builder, points)
        ok = err <= tol
        if verbose:
            print(f"grad-check {name:18s} max rel err {err:.3e} "
                  f"(tol {tol:.0e}) {'ok' if ok else 'FAIL'}")
        if not ok:
            failures.append((name, err))
    return failures


def check_builder_grads(builder, points):
    """Finite-difference every argument slot of builder; worst error wins."""
    worst = 0.0
    for i in range(len(points)):
        def fn(p, i=i):
            args = [p if j == i else T.constant(np.asarray(points[j]))
                    for j in range(len(points))]
            return builder(*args)
        worst = max(worst, T.grad_check(fn, np.asarray(points[i], dtype=float)))
    return worst


def _unit(v):
    return v / np.linalg.norm(v)


def _renorm_rows(q):
    return T.permute(T.normalize_channels(T.permute(q, (1, 0))), (1, 0))


def _test_camera(width=32, height=32):
    w2c = np.eye(4)
    return Camera(fx=40.0, fy=40.0, cx=width / 2, cy=height / 2,
                  world_to_cam=w2c, width=width, height=height)


# -- dispatch --------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="uvgsplat",
                description="Animatable gaussian-texture avatars on a "
                            "synthetic body, trained end to end on the CPU.")
    p.add_argument("--threads", type=int, default=None,
                   help="thread pool size (default: logical cores)")
    sub = p.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("gen-data", help="generate a synthetic multi-view dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", help=f"dataset dir (default: ${DATA_ENV})")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render images from a checkpoint")
    r.add_argument("--run", help="training output dir (checkpoint + data link)")
    r.add_argument("--checkpoint")
    r.add_argument("--data")
    r.add_argument("--out", required=True)
    r.add_argument("--frame", type=int)
    r.add_argument("--view", type=int)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="compute masked PSNR/SSIM metric tables")
    e.add_argument("--run")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--out")
    e.add_argument("--split", choices=("novel_view", "novel_pose"),
                   default="novel_view")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", help="run the finite-difference gradient suite")
    c.set_defaults(func=cmd_grad_check)

    a = sub.add_parser("ablate",
                       help="train and evaluate all four mesh-guidance modes")
    a.add_argument("--data")
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--iterations", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def _apply_threads(n):
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    try:
        import numba
        numba.set_num_threads(n)
    except Exception:
        pass
    os.environ["OMP_NUM_THREADS"] = str(n)


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        _apply_threads(args.threads)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (KeyboardInterrupt,):
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
