"""U-Net forward contract, output activations, checkpoint format."""

import numpy as np
import pytest

from uvgsplat import nets as N, tensor as T


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestUnetForward:
    def test_zero_head_gives_zero_output(self):
        net = N.make_unet(3, 3, depth=3, base_channels=8, seed=0)
        out = N.unet_forward(net, T.constant(rand((3, 16, 16), 1)))
        assert np.all(out.data == 0.0)

    def test_spatial_size_preserved_at_depth_5(self):
        net = N.make_unet(3, 2, depth=5, base_channels=4, seed=0)
        out = N.unet_forward(net, T.constant(rand((3, 64, 64), 2)))
        assert out.data.shape == (2, 64, 64)

    def test_indivisible_resolution_rejected(self):
        net = N.make_unet(3, 3, depth=3, base_channels=8, seed=0)
        with pytest.raises(T.ShapeError, match="divisible"):
            N.unet_forward(net, T.constant(rand((3, 20, 20), 3)))

    def test_wrong_channel_count_rejected(self):
        net = N.make_unet(3, 3, depth=3, base_channels=8, seed=0)
        with pytest.raises(T.ShapeError):
            N.unet_forward(net, T.constant(rand((5, 16, 16), 4)))

    def test_channel_plan_caps_at_four_times_base(self):
        # one entry per scale (stem + each downsampling level)
        net = N.make_unet(3, 3, depth=5, base_channels=8, seed=0)
        assert net.channel_plan() == [8, 16, 32, 32, 32, 32]

    def test_weight_subsample_gradients(self):
        net = N.make_unet(2, 2, depth=2, base_channels=4, seed=3)
        x = rand((2, 8, 8), 5)
        target = rand((2, 8, 8), 6)
        names = sorted(net.weights)
        rng = np.random.default_rng(7)
        # probe a random subsample of weight coordinates across all layers
        worst = 0.0
        for name in names:
            w0 = net.weights[name].data.copy()
            flat = net.weights[name].data.reshape(-1)
            picks = rng.choice(flat.size, size=min(8, flat.size), replace=False)

            def loss():
                out = N.unet_forward(net, T.constant(x))
                return T.reduce_sum(T.square(out + T.constant(-target)))

            val = loss()
            val.backward()
            ana = net.weights[name].grad.reshape(-1).copy()
            net.zero_grad()
            eps = 1e-5
            for i in picks:
                orig = flat[i]
                flat[i] = orig + eps
                fp = loss().item()
                flat[i] = orig - eps
                fm = loss().item()
                flat[i] = orig
                fd = (fp - fm) / (2 * eps)
                worst = max(worst, abs(ana[i] - fd) / max(1e-6, abs(fd)))
            net.weights[name].data[...] = w0
        assert worst <= 1e-5

    def test_deterministic_for_fixed_seed(self):
        a = N.make_unet(3, 3, depth=3, base_channels=8, seed=11)
        b = N.make_unet(3, 3, depth=3, base_channels=8, seed=11)
        for k in a.weights:
            assert np.array_equal(a.weights[k].data, b.weights[k].data)


class TestPredictOffsetMap:
    def test_zero_head_offsets_are_zero(self):
        net = N.make_unet(3, 3, depth=3, base_channels=8, seed=0)
        out = N.predict_offset_map(net, T.constant(rand((3, 32, 32), 8)))
        assert out.data.shape == (3, 32, 32)
        assert np.all(out.data == 0.0)

    def test_distinct_inputs_give_distinct_offsets(self):
        net = N.make_unet(3, 3, depth=3, base_channels=8, seed=0)
        # push nonzero values into the head so outputs respond to input
        rng = np.random.default_rng(9)
        net.weights["head.k"].data[...] = rng.standard_normal(
            net.weights["head.k"].data.shape) * 0.1
        a = N.predict_offset_map(net, T.constant(rand((3, 32, 32), 10)))
        b = N.predict_offset_map(net, T.constant(rand((3, 32, 32), 11)))
        assert np.abs(a.data - b.data).max() > 0.0


class TestPredictGaussianTextures:
    @pytest.fixture()
    def gauss_net(self):
        return N.make_unet(9, N.GAUSS_CHANNELS, depth=3, base_channels=8, seed=1)

    def inputs(self, seed=12, r=16):
        rng = np.random.default_rng(seed)
        return (T.constant(rng.standard_normal((3, r, r)) * 0.2),
                T.constant(rng.uniform(0, 1, (3, r, r))),
                T.constant(rng.standard_normal((3, r, r))))

    def test_channel_budget_is_fourteen(self):
        assert N.GAUSS_CHANNELS == 3 + 3 + 4 + 1 + 3

    def test_zero_head_activations(self, gauss_net):
        p, tex, view = self.inputs()
        out = N.predict_gaussian_textures(gauss_net, p, tex, view)
        assert np.all(out["delta_t"].data == 0.0)
        np.testing.assert_allclose(out["log_scale"].data, np.log(0.02), atol=1e-12)
        np.testing.assert_allclose(out["quat"].data[0], 1.0, atol=1e-12)
        np.testing.assert_allclose(out["quat"].data[1:], 0.0, atol=1e-12)
        np.testing.assert_allclose(out["opacity"].data, 0.5, atol=1e-9)
        np.testing.assert_allclose(out["color"].data, 0.5, atol=1e-9)

    def test_quaternions_unit_norm_everywhere(self, gauss_net):
        rng = np.random.default_rng(13)
        gauss_net.weights["head.k"].data[...] = rng.standard_normal(
            gauss_net.weights["head.k"].data.shape)
        p, tex, view = self.inputs()
        out = N.predict_gaussian_textures(gauss_net, p, tex, view)
        norms = np.linalg.norm(out["quat"].data, axis=0)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_opacity_and_color_strictly_inside_unit_interval(self, gauss_net):
        gauss_net.weights["head.k"].data[...] = 100.0
        gauss_net.weights["head.b"].data[...] = 1000.0
        p, tex, view = self.inputs()
        out = N.predict_gaussian_textures(gauss_net, p, tex, view)
        for key in ("opacity", "color"):
            assert (out[key].data > 0.0).all() and (out[key].data < 1.0).all()

    def test_view_direction_changes_output(self, gauss_net):
        rng = np.random.default_rng(14)
        gauss_net.weights["head.k"].data[...] = rng.standard_normal(
            gauss_net.weights["head.k"].data.shape) * 0.1
        p, tex, view = self.inputs()
        anti = T.constant(-view.data)
        a = N.predict_gaussian_textures(gauss_net, p, tex, view)
        b = N.predict_gaussian_textures(gauss_net, p, tex, anti)
        assert np.abs(a["color"].data - b["color"].data).max() > 0.0

    def test_custom_scale_init(self, gauss_net):
        p, tex, view = self.inputs()
        out = N.predict_gaussian_textures(gauss_net, p, tex, view,
                                          scale_init=np.log(0.05))
        np.testing.assert_allclose(out["log_scale"].data, np.log(0.05), atol=1e-12)


class TestCheckpoints:
    def make(self, seeds=(0, 1)):
        return {"mesh": N.make_unet(3, 3, depth=2, base_channels=4, seed=seeds[0]),
                "gauss": N.make_unet(9, 14, depth=2, base_channels=4, seed=seeds[1])}

    def test_round_trip_restores_all_weights(self, tmp_path):
        nets = self.make()
        path = str(tmp_path / "ck.npz")
        N.save_checkpoint(path, nets, config={"iterations": 7},
                          extra={"note": "x"})
        back, config, extra = N.load_checkpoint(path)
        assert config == {"iterations": 7} and extra == {"note": "x"}
        for name in nets:
            for k in nets[name].weights:
                assert np.array_equal(back[name].weights[k].data,
                                      nets[name].weights[k].data)

    def test_shape_mismatch_lists_every_offender(self, tmp_path):
        nets = self.make()
        path = str(tmp_path / "ck.npz")
        N.save_checkpoint(path, nets, config={})
        other = {"mesh": N.make_unet(3, 3, depth=2, base_channels=8, seed=0),
                 "gauss": N.make_unet(9, 14, depth=2, base_channels=4, seed=1)}
        with pytest.raises(ValueError) as exc:
            N.load_checkpoint(path, expect=other)
        # the error names at least the stem and head of the mismatched net
        assert "mesh" in str(exc.value)

    def test_version_field_present(self, tmp_path):
        import json
        nets = self.make()
        path = str(tmp_path / "ck.npz")
        N.save_checkpoint(path, nets, config={})
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        assert meta["version"] == N.CHECKPOINT_VERSION
