import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pyrsplat import geom
from pyrsplat.geom import Camera, Gaussian

from conftest import rel_err


def quat_z(angle):
    return np.array([np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2)])


class TestBuildCovariance:
    def test_identity(self):
        cov = geom.build_covariance(np.array([1.0, 0, 0, 0]), np.zeros(3))
        assert np.allclose(cov, np.eye(3))

    def test_axis_aligned_scaling(self):
        cov = geom.build_covariance(
            np.array([1.0, 0, 0, 0]), np.array([np.log(2.0), 0.0, 0.0])
        )
        assert np.allclose(cov, np.diag([4.0, 1.0, 1.0]))

    def test_rotated_matches_direct_product(self):
        # oracle: explicit R S S^T R^T for a 90-degree rotation about z
        q = quat_z(np.pi / 2)
        log_scale = np.array([np.log(2.0), 0.0, 0.0])
        angle = np.pi / 2
        R = np.array([
            [np.cos(angle), -np.sin(angle), 0.0],
            [np.sin(angle), np.cos(angle), 0.0],
            [0.0, 0.0, 1.0],
        ])
        S = np.diag(np.exp(log_scale))
        expected = R @ S @ S.T @ R.T
        cov = geom.build_covariance(q, log_scale)
        assert np.allclose(cov, expected, atol=1e-12)
        assert np.allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_unnormalized_quaternion_ok(self, rng):
        q = rng.normal(size=4) * 3.0
        s = rng.uniform(-1, 1, size=3)
        assert np.allclose(
            geom.build_covariance(q, s),
            geom.build_covariance(q / np.linalg.norm(q), s),
        )

    @settings(deadline=None, max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_spd_everywhere(self, seed):
        r = np.random.default_rng(seed)
        cov = geom.build_covariance(
            r.normal(size=4), r.uniform(-4.0, 2.0, size=3)
        )
        np.linalg.cholesky(cov + 1e-300 * np.eye(3))
        assert np.allclose(cov, cov.T)

    def test_gradients_match_fd(self, rng):
        quat = rng.normal(size=(4, 4))
        log_scale = rng.uniform(-1.5, 0.5, size=(4, 3))
        d_sigma = rng.normal(size=(4, 3, 3))

        def loss():
            return float(np.sum(geom.build_covariance(quat, log_scale) * d_sigma))

        d_q, d_s = geom.build_covariance_backward(quat, log_scale, d_sigma)
        eps = 1e-6
        for arr, grad in [(quat, d_q), (log_scale, d_s)]:
            fd = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = arr[i]
                arr[i] = old + eps
                up = loss()
                arr[i] = old - eps
                down = loss()
                arr[i] = old
                fd[i] = (up - down) / (2 * eps)
            assert rel_err(grad, fd).max() < 1e-4


class TestCamera:
    def test_rejects_non_orthonormal(self):
        w2c = np.eye(4)
        w2c[0, 1] = 0.5
        with pytest.raises(geom.GeometryError):
            Camera(w2c=w2c, fx=1, fy=1, cx=0, cy=0, width=2, height=2)

    def test_rejects_reflection(self):
        w2c = np.eye(4)
        w2c[0, 0] = -1.0
        with pytest.raises(geom.GeometryError):
            Camera(w2c=w2c, fx=1, fy=1, cx=0, cy=0, width=2, height=2)

    def test_center_inverts_transform(self, rng):
        q = rng.normal(size=4)
        R = geom.quat_to_rotmat(q)
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = rng.normal(size=3)
        cam = Camera(w2c=w2c, fx=10, fy=10, cx=5, cy=5, width=10, height=10)
        assert np.allclose(w2c[:3, :3] @ cam.center + w2c[:3, 3], 0.0, atol=1e-9)


class TestProjection:
    def test_on_axis(self, simple_camera):
        g = Gaussian(
            position=np.array([0.0, 0.0, -10.0]),
            rotation=np.array([1.0, 0, 0, 0]),
            log_scale=np.zeros(3),
            opacity_logit=0.0,
            sh=np.zeros((16, 3)),
        )
        out = geom.project_gaussian(g, simple_camera)
        assert out["valid"]
        assert np.allclose(out["mean2d"], [50.0, 50.0])
        assert out["depth"] == pytest.approx(10.0)

    def test_behind_camera_culled(self, simple_camera):
        g = Gaussian(
            position=np.array([0.0, 0.0, 1.0]),  # behind (-z is forward)
            rotation=np.array([1.0, 0, 0, 0]),
            log_scale=np.zeros(3),
            opacity_logit=0.0,
            sh=np.zeros((16, 3)),
        )
        assert not geom.project_gaussian(g, simple_camera)["valid"]

    def test_far_off_screen_culled(self, simple_camera):
        g = Gaussian(
            position=np.array([100.0, 0.0, -10.0]),
            rotation=np.array([1.0, 0, 0, 0]),
            log_scale=np.log(0.01) * np.ones(3),
            opacity_logit=0.0,
            sh=np.zeros((16, 3)),
        )
        assert not geom.project_gaussian(g, simple_camera)["valid"]

    def test_isotropic_small_angle_closed_form(self, simple_camera, rng):
        # small-angle prediction checked against numerical projection of
        # samples drawn from the 3D Gaussian
        sigma = 0.05
        z = 10.0
        g = Gaussian(
            position=np.array([0.0, 0.0, -z]),
            rotation=np.array([1.0, 0, 0, 0]),
            log_scale=np.log(sigma) * np.ones(3),
            opacity_logit=0.0,
            sh=np.zeros((16, 3)),
        )
        out = geom.project_gaussian(g, simple_camera)
        expect = (simple_camera.fx * sigma / z) ** 2 + geom.COV2D_FLOOR
        assert out["cov2d"][0, 0] == pytest.approx(expect, rel=1e-9)
        assert out["cov2d"][1, 1] == pytest.approx(expect, rel=1e-9)

        pts = g.position + rng.normal(size=(200_000, 3)) * sigma
        u = 50.0 + 100.0 * pts[:, 0] / (-pts[:, 2])
        v = 50.0 - 100.0 * pts[:, 1] / (-pts[:, 2])
        sample_cov = np.cov(np.stack([u, v]))
        assert np.allclose(
            sample_cov + geom.COV2D_FLOOR * np.eye(2), out["cov2d"], atol=0.15
        )

    def test_depth_monotone_along_ray(self, simple_camera, rng):
        direction = geom.normalize_dirs(np.array([[0.1, -0.2, -1.0]]))[0]
        quat = rng.normal(size=(1, 4))
        ls = rng.uniform(-3, -2, size=(1, 3))
        depths = []
        for t in [2.0, 3.0, 5.0, 9.0]:
            proj = geom.project_gaussians(
                (simple_camera.center + t * direction)[None], quat, ls,
                simple_camera,
            )
            depths.append(proj.depth[0])
        assert np.all(np.diff(depths) > 0)

    def test_projection_gradients_match_fd(self, rng):
        q = rng.normal(size=4)
        w2c = np.eye(4)
        w2c[:3, :3] = geom.quat_to_rotmat(q)
        w2c[:3, 3] = rng.normal(size=3) * 0.1
        cam = Camera(w2c=w2c, fx=90.0, fy=80.0, cx=32, cy=30, width=64,
                     height=60)
        fwd = -cam.rotation.T[:, 2]
        pos = cam.center + fwd * rng.uniform(2, 4, (5, 1)) + rng.normal(size=(5, 3)) * 0.3
        quat = rng.normal(size=(5, 4))
        ls = rng.uniform(-2.0, -0.8, size=(5, 3))
        d_mean = rng.normal(size=(5, 2))
        d_cov = rng.normal(size=(5, 3))

        proj = geom.project_gaussians(pos, quat, ls, cam)
        assert proj.valid.all()
        dp, dq, ds = geom.project_backward(proj, quat, ls, d_mean, d_cov)

        def loss():
            p = geom.project_gaussians(pos, quat, ls, cam)
            return float(np.sum(p.mean2d * d_mean) + np.sum(p.cov2d * d_cov))

        eps = 1e-6
        for arr, grad in [(pos, dp), (quat, dq), (ls, ds)]:
            fd = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = arr[i]
                arr[i] = old + eps
                up = loss()
                arr[i] = old - eps
                down = loss()
                arr[i] = old
                fd[i] = (up - down) / (2 * eps)
            assert rel_err(grad, fd).max() < 1e-4


class TestSphericalHarmonics:
    def test_constant_band(self):
        coeffs = np.zeros((16, 3))
        coeffs[0] = [1.0, 2.0, -0.5]
        rgb = geom.eval_sh(coeffs, np.array([0.0, 0.0, 1.0]), degree=0)
        assert np.allclose(rgb, coeffs[0] * 0.28209479177387814 + 0.5)

    def test_zero_coeffs_give_offset(self, rng):
        d = geom.normalize_dirs(rng.normal(size=(1, 3)))[0]
        assert np.allclose(geom.eval_sh(np.zeros((16, 3)), d), 0.5)

    def test_band1_odd_parity(self):
        # numerically verify band-1 harmonics are odd: flipping the direction
        # mirrors the output about the 0.5 offset
        coeffs = np.zeros((16, 3))
        coeffs[2] = [0.3, -0.7, 1.1]  # z-linear band
        up = geom.eval_sh(coeffs, np.array([0.0, 0.0, 1.0]), degree=1)
        down = geom.eval_sh(coeffs, np.array([0.0, 0.0, -1.0]), degree=1)
        assert np.allclose(up + down, 1.0, atol=1e-12)
        assert not np.allclose(up, 0.5)

    @settings(deadline=None, max_examples=30)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 3))
    def test_linearity_in_coefficients(self, seed, degree):
        r = np.random.default_rng(seed)
        c1 = r.normal(size=(1, 16, 3))
        c2 = r.normal(size=(1, 16, 3))
        a, b = r.normal(size=2)
        d = geom.normalize_dirs(r.normal(size=(1, 3)))
        lhs = geom.eval_sh(a * c1 + b * c2, d, degree)
        rhs = (
            a * geom.eval_sh(c1, d, degree)
            + b * geom.eval_sh(c2, d, degree)
            - (a + b - 1.0) * 0.5
        )
        assert np.allclose(lhs, rhs, atol=1e-9)

    def test_gradients_match_fd(self, rng):
        coeffs = rng.normal(size=(3, 16, 3)) * 0.4
        raw = rng.normal(size=(3, 3))
        d_rgb = rng.normal(size=(3, 3))
        for degree in range(4):
            d_c, d_dir = geom.eval_sh_backward(
                coeffs, geom.normalize_dirs(raw), d_rgb, degree
            )
            d_raw = geom.normalize_dirs_backward(raw, d_dir)

            def loss():
                return float(np.sum(
                    geom.eval_sh(coeffs, geom.normalize_dirs(raw), degree) * d_rgb
                ))

            eps = 1e-6
            for arr, grad in [(coeffs, d_c), (raw, d_raw)]:
                fd = np.zeros_like(arr)
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    i = it.multi_index
                    old = arr[i]
                    arr[i] = old + eps
                    up = loss()
                    arr[i] = old - eps
                    down = loss()
                    arr[i] = old
                    fd[i] = (up - down) / (2 * eps)
                assert rel_err(grad, fd).max() < 1e-4


class TestPositionalEncoding:
    def test_zero_input(self):
        out = geom.positional_encoding(np.zeros(3), 1)
        assert np.allclose(out, [0, 0, 0, 0, 0, 0, 1, 1, 1])

    def test_unit_input(self):
        out = geom.positional_encoding(np.array([1.0, 0.0, 0.0]), 1)
        assert np.allclose(out[:3], [1, 0, 0])
        assert np.allclose(out[3:6], [np.sin(np.pi), 0, 0], atol=1e-12)
        assert np.allclose(out[6:9], [-1, 1, 1])

    @settings(deadline=None, max_examples=20)
    @given(st.integers(0, 8))
    def test_output_length(self, n_freqs):
        out = geom.positional_encoding(np.ones(3), n_freqs)
        assert out.shape == (3 + 6 * n_freqs,)

    def test_length_for_four_freqs(self):
        assert geom.positional_encoding(np.zeros(3), 4).shape == (27,)
