"""Pose-conditioned convolutional encoder-decoders.

Two instances are used: a mesh net that turns a position map into a vertex
offset map, and a gaussian net that turns (position map, average texture,
view map) into gaussian attribute textures. Both are plain U-Nets: strided
3x3 downsampling convs, nearest-upsample + conv decoding, skip concats, a
zero-initialized 1x1 head so the untrained model is an exact no-op.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

LEAK = 0.01
DEFAULT_SCALE_INIT = float(np.log(0.02))

# gaussian-texture channel budget: 3 (delta_t) + 3 (log scale) + 4 (quat)
# + 1 (opacity) + 3 (color)
GAUSS_CHANNELS = 14


@dataclass
class UNetParams:
    depth: int
    base_channels: int
    in_channels: int
    out_channels: int
    weights: dict = field(default_factory=dict)

    def parameters(self):
        return list(self.weights.values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def channel_plan(self):
        cap = 4 * self.base_channels
        return [min(self.base_channels * (1 << l), cap) for l in range(self.depth + 1)]


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def make_unet(in_channels, out_channels, depth=5, base_channels=16, seed=0):
    """Fresh U-Net parameters. The output head is zero-initialized."""
    rng = np.random.default_rng(seed)
    params = UNetParams(depth, base_channels, in_channels, out_channels)
    ch = params.channel_plan()
    w = params.weights

    def conv(name, cin, cout, k):
        w[name + ".k"] = T.parameter(_he(rng, (cout, cin, k, k), cin * k * k))
        w[name + ".b"] = T.parameter(np.zeros(cout))

    conv("stem", in_channels, ch[0], 3)
    for l in range(1, depth + 1):
        conv(f"down{l}", ch[l - 1], ch[l], 3)
    for l in range(depth - 1, -1, -1):
        conv(f"up{l}", ch[l + 1], ch[l], 3)
        conv(f"fuse{l}", 2 * ch[l], ch[l], 3)
    w["head.k"] = T.parameter(np.zeros((out_channels, ch[0], 1, 1)))
    w["head.b"] = T.parameter(np.zeros(out_channels))
    return params


def unet_forward(params, x):
    """[in_channels, R, R] -> [out_channels, R, R]; R must divide by 2^depth."""
    r = x.data.shape[-1]
    if x.data.shape[0] != params.in_channels:
        raise T.ShapeError(
            f"unet_forward: expected {params.in_channels} input channels, got {x.data.shape[0]}"
        )
    if r % (1 << params.depth) != 0:
        raise T.ShapeError(
            f"unet_forward: spatial size {r} must be divisible by 2^{params.depth}"
        )
    w = params.weights

    def conv(name, h, stride=1):
        h = T.conv2d(h, w[name + ".k"], stride=stride, padding=1, bias=w[name + ".b"])
        return T.leaky_relu(T.instance_norm(h), LEAK)

    h = conv("stem", x)
    skips = [h]
    for l in range(1, params.depth + 1):
        h = conv(f"down{l}", h, stride=2)
        if l < params.depth:
            skips.append(h)
    for l in range(params.depth - 1, -1, -1):
        h = conv(f"up{l}", T.upsample_nearest(h, 2))
        h = conv(f"fuse{l}", T.concat([h, skips[l]], axis=0))
    return T.conv2d(h, w["head.k"], stride=1, padding=0, bias=w["head.b"])


def predict_offset_map(mesh_net, position_map):
    """Vertex offset map [3,R,R] (meters, canonical frame) from a position map."""
    return unet_forward(mesh_net, position_map)


def predict_gaussian_textures(gauss_net, position_map, avg_texture, view_map,
                              scale_init=DEFAULT_SCALE_INIT):
    """Gaussian attribute textures from (P, T_avg, V), 9 channels in.

    Raw 14-channel output is split 3+3+4+1+3 and activated:
      delta_t: raw offsets (meters, world frame)
      log_scale: raw + scale_init
      quat: raw + (1,0,0,0), then normalized per texel
      opacity, color: logistic
    """
    x = T.concat([position_map, avg_texture, view_map], axis=0)
    raw = unet_forward(gauss_net, x)
    if raw.data.shape[0] != GAUSS_CHANNELS:
        raise T.ShapeError(
            f"gaussian net must output {GAUSS_CHANNELS} channels, got {raw.data.shape[0]}"
        )
    r = raw.data.shape[-1]
    delta_t = T.narrow(raw, 0, 0, 3)
    log_scale = T.narrow(raw, 0, 3, 3) + scale_init
    quat_base = np.zeros((4, r, r))
    quat_base[0] = 1.0
    quat = T.normalize_channels(T.narrow(raw, 0, 6, 4) + T.constant(quat_base))
    # affine squish keeps the logistic outputs strictly inside (0,1) even
    # when the raw activations saturate in float64
    eps = 1e-9
    opacity = T.scale(T.sigmoid(T.narrow(raw, 0, 10, 1)), 1.0 - 2 * eps) + eps
    color = T.scale(T.sigmoid(T.narrow(raw, 0, 11, 3)), 1.0 - 2 * eps) + eps
    return {
        "delta_t": delta_t,
        "log_scale": log_scale,
        "quat": quat,
        "opacity": opacity,
        "color": color,
    }


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, nets, config=None, extra=None):
    """Versioned container of named weight tensors plus a config echo.

    nets: {net_name: UNetParams}; config: json-serializable dict.
    """
    payload = {
        "__meta__": np.frombuffer(
            json.dumps({
                "version": CHECKPOINT_VERSION,
                "config": config or {},
                "nets": {
                    name: {
                        "depth": n.depth,
                        "base_channels": n.base_channels,
                        "in_channels": n.in_channels,
                        "out_channels": n.out_channels,
                    }
                    for name, n in nets.items()
                },
                "extra": extra or {},
            }).encode(),
            dtype=np.uint8,
        )
    }
    for name, net in nets.items():
        for key, tensor in net.weights.items():
            payload[f"{name}/{key}"] = tensor.data
    np.savez(path, **payload)


def load_checkpoint(path, expect=None):
    """Load nets + config; mismatched shapes raise with a full list.

    When `expect` maps net names to freshly built UNetParams, the stored
    weights are loaded into those instances and every shape is checked.
    """
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"].tobytes()).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        if expect is None:
            expect = {
                name: make_unet(spec["in_channels"], spec["out_channels"],
                                depth=spec["depth"], base_channels=spec["base_channels"])
                for name, spec in meta["nets"].items()
            }
        mismatches = []
        for name, net in expect.items():
            for key, tensor in net.weights.items():
                full = f"{name}/{key}"
                if full not in z:
                    mismatches.append(f"{full}: missing from checkpoint")
                    continue
                stored = z[full]
                if stored.shape != tensor.data.shape:
                    mismatches.append(
                        f"{full}: checkpoint {stored.shape} vs model {tensor.data.shape}"
                    )
                else:
                    tensor.data[...] = stored
        if mismatches:
            raise ValueError("checkpoint shape mismatches:\n  " + "\n  ".join(mismatches))
    return expect, meta["config"], meta.get("extra", {})
