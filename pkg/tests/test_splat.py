"""Gaussian splatting: covariance, projection, compositing, gradients."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uvgsplat import splat, tensor as T


def unit(v):
    return v / np.linalg.norm(v)


def identity_camera(width=64, height=64, fx=80.0, fy=80.0):
    return splat.Camera(fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
                        world_to_cam=np.eye(4), width=width, height=height)


def random_cloud(k, seed, depth_center=1.5):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((k, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return splat.GaussianCloud(
        mu=rng.uniform(-0.4, 0.4, (k, 3)) + np.array([0.0, 0.0, depth_center]),
        log_scale=rng.uniform(-3.5, -2.0, (k, 3)),
        quat=q,
        opacity=rng.uniform(0.2, 0.95, k),
        color=rng.uniform(0.0, 1.0, (k, 3)))


class TestBuildCovariance:
    def test_identity_rotation_gives_diagonal(self):
        a, b, c = 0.3, 0.05, 1.7
        sigma = splat.build_covariance(np.log([a, b, c]), np.array([1.0, 0, 0, 0]))
        np.testing.assert_allclose(sigma, np.diag([a * a, b * b, c * c]), atol=1e-14)

    def test_isotropic_scale_is_rotation_invariant(self):
        s = 0.12
        q = unit(np.random.default_rng(0).standard_normal(4))
        sigma = splat.build_covariance(np.full(3, np.log(s)), q)
        np.testing.assert_allclose(sigma, s * s * np.eye(3), atol=1e-12)

    def test_eigenvalues_equal_squared_scales(self):
        rng = np.random.default_rng(1)
        ls = rng.uniform(-3, -1, 3)
        q = unit(rng.standard_normal(4))
        sigma = splat.build_covariance(ls, q)
        ev = np.sort(np.linalg.eigvalsh(sigma))
        np.testing.assert_allclose(ev, np.sort(np.exp(2 * ls)), atol=1e-9)

    def test_symmetric_positive_semidefinite(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            sigma = splat.build_covariance(rng.uniform(-4, 0, 3),
                                           unit(rng.standard_normal(4)))
            np.testing.assert_allclose(sigma, sigma.T, atol=1e-15)
            assert np.linalg.eigvalsh(sigma).min() >= -1e-12

    def test_differentiable_wrt_both_inputs(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((3, 3))
        ls0 = rng.uniform(-3, -1, 3)
        q0 = unit(rng.standard_normal(4))
        err_ls = T.grad_check(lambda p: T.reduce_sum(T.mul(
            splat.build_covariance(p, T.constant(q0)), T.constant(w))), ls0)
        err_q = T.grad_check(lambda p: T.reduce_sum(T.mul(
            splat.build_covariance(T.constant(ls0), p), T.constant(w))), q0)
        assert max(err_ls, err_q) <= 1e-6


class TestProject:
    def test_pinhole_formula(self):
        cam = identity_camera()
        mu = np.array([0.2, -0.1, 1.5])
        out = splat.project(mu, 1e-4 * np.eye(3), cam)
        assert out is not None
        mu2d, _, depth = out
        np.testing.assert_allclose(
            mu2d, [cam.fx * 0.2 / 1.5 + cam.cx, cam.fy * (-0.1) / 1.5 + cam.cy],
            atol=1e-12)
        assert depth == pytest.approx(1.5)

    def test_on_axis_isotropic_covariance(self):
        cam = identity_camera()
        s, z = 0.05, 2.0
        out = splat.project(np.array([0.0, 0.0, z]), s * s * np.eye(3), cam)
        mu2d, cov2d, _ = out
        np.testing.assert_allclose(mu2d, [cam.cx, cam.cy], atol=1e-12)
        expect = np.diag([(cam.fx * s / z) ** 2, (cam.fy * s / z) ** 2])
        expect += splat.COV2D_REG * np.eye(2)
        np.testing.assert_allclose(cov2d, expect, atol=1e-12)

    def test_point_closer_than_near_plane_is_culled(self):
        cam = identity_camera()
        assert splat.project(np.array([0.0, 0.0, cam.near / 2]),
                             1e-4 * np.eye(3), cam) is None

    def test_regularization_floors_tiny_footprints(self):
        cam = identity_camera()
        _, cov2d, _ = splat.project(np.array([0.0, 0.0, 1.0]),
                                    1e-10 * np.eye(3), cam)
        assert np.linalg.eigvalsh(cov2d).min() >= splat.COV2D_REG - 1e-12


class TestRasterizeClosedForms:
    def pixel_center_cloud(self, cam, px, py, opacity, color, depth=1.5):
        # a pixel at (row, col) samples the continuous point (col+.5, row+.5)
        x = (px + 0.5 - cam.cx) / cam.fx * depth
        y = (py + 0.5 - cam.cy) / cam.fy * depth
        k = len(opacity)
        return splat.GaussianCloud(
            mu=np.tile([x, y, depth], (k, 1)),
            log_scale=np.full((k, 3), -2.5),
            quat=np.tile([1.0, 0, 0, 0], (k, 1)),
            opacity=np.asarray(opacity, dtype=float),
            color=np.asarray(color, dtype=float))

    def test_single_gaussian_alpha_one_gives_its_color(self):
        cam = identity_camera()
        color = np.array([0.9, 0.4, 0.2])
        cloud = self.pixel_center_cloud(cam, 10, 20, [1.0 - 1e-12], [color])
        img = splat.rasterize(cloud, cam, np.zeros(3))
        np.testing.assert_allclose(img[:, 20, 10], color, atol=1e-12)

    def test_two_coincident_half_opacity_gaussians(self):
        cam = identity_camera()
        bg = np.array([0.1, 0.2, 0.3])
        c1, c2 = np.array([1.0, 0, 0]), np.array([0.0, 1.0, 0])
        cloud = self.pixel_center_cloud(cam, 10, 20, [0.5, 0.5], [c1, c2])
        img = splat.rasterize(cloud, cam, bg)
        expect = 0.5 * c1 + 0.25 * c2 + 0.25 * bg
        np.testing.assert_allclose(img[:, 20, 10], expect, atol=1e-12)

    def test_all_opacities_near_zero_yields_background(self):
        cam = identity_camera(width=32, height=32)
        cloud = random_cloud(50, 4)
        cloud = splat.GaussianCloud(mu=cloud.mu, log_scale=cloud.log_scale,
                                    quat=cloud.quat,
                                    opacity=np.full(50, 1e-300),
                                    color=cloud.color)
        bg = np.array([0.25, 0.5, 0.75])
        img = splat.rasterize(cloud, cam, bg)
        np.testing.assert_allclose(img, bg[:, None, None] * np.ones((3, 32, 32)),
                                   atol=1e-12)


class TestRasterizeOracle:
    def test_tiled_matches_brute_force_on_random_scenes(self):
        cam = identity_camera()
        bg = np.array([0.1, 0.2, 0.3])
        rng = np.random.default_rng(5)
        for trial in range(8):
            cloud = random_cloud(int(rng.integers(1, 501)), 100 + trial)
            img = splat.rasterize(cloud, cam, bg)
            ref, _ = splat.rasterize_reference(cloud, cam, bg)
            assert np.abs(img - ref).max() <= 1e-5

    def test_compositing_weights_plus_transmittance_equal_one(self):
        cam = identity_camera()
        cloud = random_cloud(200, 6)
        _, wsum = splat.rasterize_reference(cloud, cam, np.zeros(3))
        np.testing.assert_allclose(wsum, 1.0, atol=1e-9)

    def test_permutation_invariance_for_distinct_depths(self):
        cam = identity_camera(width=32, height=32)
        cloud = random_cloud(40, 7)
        # force distinct depths
        cloud.mu[:, 2] = 1.0 + 0.01 * np.arange(40)
        bg = np.zeros(3)
        img = splat.rasterize(cloud, cam, bg)
        perm = np.random.default_rng(8).permutation(40)
        shuffled = splat.GaussianCloud(mu=cloud.mu[perm],
                                       log_scale=cloud.log_scale[perm],
                                       quat=cloud.quat[perm],
                                       opacity=cloud.opacity[perm],
                                       color=cloud.color[perm])
        img2 = splat.rasterize(shuffled, cam, bg)
        np.testing.assert_allclose(img, img2, atol=1e-12)

    def test_non_finite_attribute_names_gaussian_index(self):
        cloud = random_cloud(5, 9)
        cloud.mu[3, 1] = np.nan
        with pytest.raises(ValueError, match="3"):
            splat.rasterize(cloud, identity_camera(), np.zeros(3))


class TestRasterizeBackward:
    def test_opacity_zero_gaussian_gets_zero_color_gradient(self):
        cam = identity_camera(width=32, height=32)
        cloud = random_cloud(6, 10)
        cloud.opacity[2] = 1e-300
        img, state = splat.rasterize(cloud, cam, np.zeros(3), want_state=True)
        grads = splat.rasterize_backward(state, np.ones_like(img))
        np.testing.assert_allclose(grads["color"][2], 0.0, atol=1e-290)

    def test_single_gaussian_color_gradient_closed_form(self):
        cam = identity_camera()
        color = np.array([0.3, 0.6, 0.9])
        x = (10 + 0.5 - cam.cx) / cam.fx * 1.5
        y = (20 + 0.5 - cam.cy) / cam.fy * 1.5
        cloud = splat.GaussianCloud(mu=np.array([[x, y, 1.5]]),
                                    log_scale=np.full((1, 3), -2.5),
                                    quat=np.array([[1.0, 0, 0, 0]]),
                                    opacity=np.array([0.7]),
                                    color=np.array([color]))
        img, state = splat.rasterize(cloud, cam, np.zeros(3), want_state=True)
        # loss = red channel of the pixel under the gaussian center
        g = np.zeros_like(img)
        g[0, 20, 10] = 1.0
        grads = splat.rasterize_backward(state, g)
        # d pixel / d color_red = alpha' at the center = opacity exactly
        assert grads["color"][0, 0] == pytest.approx(0.7, abs=1e-12)
        assert grads["color"][0, 1] == 0.0

    def test_culled_gaussians_receive_zero_gradients(self):
        cam = identity_camera(width=32, height=32)
        cloud = random_cloud(6, 11)
        cloud.mu[4] = [0.0, 0.0, cam.near / 4]  # in front of the near plane
        img, state = splat.rasterize(cloud, cam, np.zeros(3), want_state=True)
        grads = splat.rasterize_backward(state, np.ones_like(img))
        for key in ("mu", "log_scale", "quat", "opacity", "color"):
            np.testing.assert_array_equal(grads[key][4], 0.0)

    def test_gradient_shape_mismatch_rejected(self):
        cam = identity_camera(width=32, height=32)
        cloud = random_cloud(4, 12)
        _, state = splat.rasterize(cloud, cam, np.zeros(3), want_state=True)
        with pytest.raises(ValueError):
            splat.rasterize_backward(state, np.zeros((3, 16, 16)))

    def test_all_five_groups_match_finite_differences(self):
        cam = identity_camera(width=24, height=24, fx=30.0, fy=30.0)
        rng = np.random.default_rng(13)
        k = 5
        mu0 = rng.uniform(-0.15, 0.15, (k, 3)) + np.array([0, 0, 1.2])
        ls0 = rng.uniform(-3.2, -2.6, (k, 3))
        q0 = np.stack([unit(rng.standard_normal(4)) for _ in range(k)])
        op0 = rng.uniform(0.3, 0.9, k)
        col0 = rng.uniform(0.1, 0.9, (k, 3))
        bg = np.array([0.1, 0.2, 0.3])
        points = [mu0, ls0, q0, op0, col0]

        def renorm(q):
            return T.permute(T.normalize_channels(T.permute(q, (1, 0))), (1, 0))

        def builder(mu, ls, q, op, col):
            img = splat.render_gaussians(mu, ls, renorm(q), op, col, cam, bg)
            return T.reduce_sum(T.square(img))

        worst = 0.0
        for i in range(5):
            def fn(p, i=i):
                args = [p if j == i else T.constant(points[j]) for j in range(5)]
                return builder(*args)
            worst = max(worst, T.grad_check(fn, points[i]))
        assert worst <= 1e-3

    def test_early_stopped_forward_refuses_backward(self):
        cam = identity_camera(width=32, height=32)
        cloud = random_cloud(30, 14)
        img, state = splat.rasterize(cloud, cam, np.zeros(3),
                                     early_stop=1e-4, want_state=True)
        with pytest.raises(ValueError, match="early"):
            splat.rasterize_backward(state, np.ones_like(img))


class TestCamera:
    def test_non_orthonormal_rotation_rejected(self):
        w2c = np.eye(4)
        w2c[0, 0] = 2.0
        with pytest.raises(ValueError):
            splat.Camera(fx=10.0, fy=10.0, cx=8.0, cy=8.0,
                         world_to_cam=w2c, width=16, height=16)

    def test_center_is_inverse_transform_of_origin(self):
        rng = np.random.default_rng(15)
        theta = 0.7
        c, s = np.cos(theta), np.sin(theta)
        w2c = np.eye(4)
        w2c[:3, :3] = [[c, -s, 0], [s, c, 0], [0, 0, 1]]
        w2c[:3, 3] = rng.standard_normal(3)
        cam = splat.Camera(fx=10.0, fy=10.0, cx=8.0, cy=8.0,
                           world_to_cam=w2c, width=16, height=16)
        cam_space = w2c[:3, :3] @ cam.center + w2c[:3, 3]
        np.testing.assert_allclose(cam_space, 0.0, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 100_000))
def test_rasterize_output_always_finite_and_bounded(seed):
    cam = identity_camera(width=16, height=16, fx=20.0, fy=20.0)
    cloud = random_cloud(12, seed)
    img = splat.rasterize(cloud, cam, np.array([0.5, 0.5, 0.5]))
    assert np.isfinite(img).all()
    assert img.min() >= 0.0 and img.max() <= 1.0 + 1e-12
