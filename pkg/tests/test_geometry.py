"""Geometry oracle tests.

Expected values are hand-computed or produced by independent brute-force
oracles (explicit matrix inverses, per-point homogeneous multiplies) rather
than by the functions under test.
"""

import numpy as np
import pytest

from densetrack.geometry import (
    DepthMap,
    Extrinsics,
    GeometryError,
    Intrinsics,
    MotionMap,
    PointMap,
    motion_field,
    pixel_grid,
    project,
    project_points,
    transform_pointmap,
    unproject,
    unproject_depthmap,
)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_pose(rng: np.random.Generator) -> Extrinsics:
    return Extrinsics(random_rotation(rng), rng.normal(scale=2.0, size=3))


def adjugate_inverse_3x3(M: np.ndarray) -> np.ndarray:
    """Independent 3x3 inverse via the adjugate formula."""
    c = np.empty((3, 3))
    for r in range(3):
        for s in range(3):
            minor = np.delete(np.delete(M, r, axis=0), s, axis=1)
            c[r, s] = (-1) ** (r + s) * np.linalg.det(minor)
    return c.T / np.linalg.det(M)


class TestIntrinsics:
    def test_matrix_is_upper_triangular_with_unit_corner(self):
        K = Intrinsics(fx=500, fy=480, px=320, py=240, width=640, height=480)
        M = K.matrix()
        assert M[1, 0] == M[2, 0] == M[2, 1] == 0.0
        assert M[2, 2] == 1.0

    def test_rejects_nonpositive_focal(self):
        with pytest.raises(GeometryError):
            Intrinsics(fx=0.0, fy=1.0, px=0, py=0, width=8, height=8)
        with pytest.raises(GeometryError):
            Intrinsics(fx=1.0, fy=-2.0, px=0, py=0, width=8, height=8)

    def test_rejects_principal_point_outside_image(self):
        with pytest.raises(GeometryError):
            Intrinsics(fx=1.0, fy=1.0, px=8.0, py=0, width=8, height=8)

    def test_inverse_matches_numpy(self):
        K = Intrinsics(fx=500, fy=480, px=320, py=240, width=640, height=480)
        np.testing.assert_allclose(K.inverse_matrix(), np.linalg.inv(K.matrix()), atol=1e-12)


class TestExtrinsics:
    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(GeometryError):
            Extrinsics(np.eye(3) * 2.0, np.zeros(3))

    def test_rejects_reflection(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(GeometryError):
            Extrinsics(R, np.zeros(3))

    def test_camera_center_roundtrip(self):
        rng = np.random.default_rng(0)
        pose = random_pose(rng)
        # world_to_camera(center) must be the origin
        np.testing.assert_allclose(pose.world_to_camera(pose.camera_center()), np.zeros(3),
                                   atol=1e-12)


class TestUnproject:
    def test_identity_K(self):
        # K = I so output is (i*d, j*d, d)
        K = Intrinsics(fx=1, fy=1, px=0, py=0, width=10, height=10)
        np.testing.assert_allclose(unproject((3, 4), 2.0, K), [6.0, 8.0, 2.0])

    def test_focal_divides_xy(self):
        K = Intrinsics(fx=2, fy=2, px=0, py=0, width=10, height=10)
        np.testing.assert_allclose(unproject((3, 4), 2.0, K), [3.0, 4.0, 2.0])

    def test_against_matrix_inverse_oracle(self):
        K = Intrinsics(fx=500, fy=480, px=320, py=240, width=640, height=480)
        M = K.matrix()
        inv_np = np.linalg.inv(M)
        inv_adj = adjugate_inverse_3x3(M)
        np.testing.assert_allclose(inv_np, inv_adj, atol=1e-12)
        d = 1.5
        expected = inv_np @ np.array([100 * d, 50 * d, d])
        np.testing.assert_allclose(unproject((100, 50), d, K), expected, atol=1e-12)

    def test_rejects_nonpositive_depth(self):
        K = Intrinsics(fx=1, fy=1, px=0, py=0, width=10, height=10)
        with pytest.raises(GeometryError):
            unproject((1, 1), 0.0, K)
        with pytest.raises(GeometryError):
            unproject((1, 1), -1.0, K)

    def test_rejects_out_of_bounds_pixel(self):
        K = Intrinsics(fx=1, fy=1, px=0, py=0, width=10, height=10)
        with pytest.raises(GeometryError):
            unproject((10, 0), 1.0, K)


class TestProject:
    def test_identity_K(self):
        K = Intrinsics(fx=1, fy=1, px=0, py=0, width=10, height=10)
        pix, depth = project(np.array([6.0, 8.0, 2.0]), K)
        np.testing.assert_allclose(pix, (3.0, 4.0))
        assert depth == 2.0

    def test_unit_depth_origin_ray(self):
        K = Intrinsics(fx=1, fy=1, px=0, py=0, width=10, height=10)
        pix, depth = project(np.array([0.0, 0.0, 1.0]), K)
        np.testing.assert_allclose(pix, (0.0, 0.0))
        assert depth == 1.0

    def test_rejects_behind_camera(self):
        K = Intrinsics(fx=1, fy=1, px=0, py=0, width=10, height=10)
        with pytest.raises(GeometryError):
            project(np.array([0.0, 0.0, -1.0]), K)

    def test_roundtrip_identity_1000_random(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            K = Intrinsics(
                fx=float(rng.uniform(50, 800)),
                fy=float(rng.uniform(50, 800)),
                px=float(rng.uniform(0, 63)),
                py=float(rng.uniform(0, 63)),
                width=64,
                height=64,
            )
            pixel = (float(rng.uniform(0, 63)), float(rng.uniform(0, 63)))
            depth = float(rng.uniform(0.1, 50.0))
            (u, v), d = project(unproject(pixel, depth, K), K)
            assert abs(u - pixel[0]) < 1e-9
            assert abs(v - pixel[1]) < 1e-9
            assert abs(d - depth) < 1e-9


class TestUnprojectDepthmap:
    def test_matches_scalar_unproject(self):
        rng = np.random.default_rng(3)
        K = Intrinsics(fx=40, fy=35, px=3.5, py=2.5, width=8, height=6)
        depth = rng.uniform(0.5, 5.0, size=(6, 8))
        pm = unproject_depthmap(depth, K)
        for j in range(6):
            for i in range(8):
                np.testing.assert_allclose(pm[j, i], unproject((i, j), depth[j, i], K),
                                           atol=1e-12)

    def test_pixel_grid_convention(self):
        # i varies along columns, j along rows
        ii, jj = pixel_grid(width=4, height=3)
        assert ii.shape == (3, 4)
        np.testing.assert_allclose(ii[0], [0, 1, 2, 3])
        np.testing.assert_allclose(jj[:, 0], [0, 1, 2])

    def test_project_points_inverts_grid(self):
        K = Intrinsics(fx=100, fy=90, px=16, py=12, width=32, height=24)
        depth = np.full((24, 32), 2.5)
        pm = unproject_depthmap(depth, K)
        pix, z = project_points(pm, K)
        ii, jj = pixel_grid(32, 24)
        np.testing.assert_allclose(pix[..., 0], ii, atol=1e-9)
        np.testing.assert_allclose(pix[..., 1], jj, atol=1e-9)
        np.testing.assert_allclose(z, depth, atol=1e-12)


def make_pointmap(data, source=0, time=0, coord=0, valid=None):
    return PointMap(data=data, source_frame=source, time_frame=time, coord_frame=coord,
                    valid=valid)


class TestTransformPointmap:
    def test_identity_when_poses_equal(self):
        rng = np.random.default_rng(7)
        pose = random_pose(rng)
        pm = make_pointmap(rng.normal(size=(5, 6, 3)))
        out = transform_pointmap(pm, pose, pose)
        np.testing.assert_allclose(out.data, pm.data, atol=1e-12)

    def test_pure_translation(self):
        # dst camera sits at (1, 0, 0) relative to src: points shift by (-1, 0, 0)
        rng = np.random.default_rng(8)
        src = Extrinsics.identity()
        dst = Extrinsics(np.eye(3), np.array([-1.0, 0.0, 0.0]))
        pm = make_pointmap(rng.normal(size=(4, 4, 3)))
        out = transform_pointmap(pm, src, dst)
        np.testing.assert_allclose(out.data, pm.data + np.array([-1.0, 0.0, 0.0]), atol=1e-12)

    def test_against_homogeneous_oracle(self):
        rng = np.random.default_rng(9)
        src, dst = random_pose(rng), random_pose(rng)
        pm = make_pointmap(rng.normal(scale=3.0, size=(6, 5, 3)))
        out = transform_pointmap(pm, src, dst, dst_frame=1)
        assert out.coord_frame == 1

        # Oracle: explicit 4x4 world-lift then dst projection, per point.
        T_src = np.eye(4)
        T_src[:3, :3], T_src[:3, 3] = src.rotation, src.translation
        T_dst = np.eye(4)
        T_dst[:3, :3], T_dst[:3, 3] = dst.rotation, dst.translation
        M = T_dst @ np.linalg.inv(T_src)
        for j in range(6):
            for i in range(5):
                p = np.append(pm.data[j, i], 1.0)
                np.testing.assert_allclose(out.data[j, i], (M @ p)[:3], atol=1e-9)

    def test_preserves_pairwise_distances(self):
        rng = np.random.default_rng(10)
        src, dst = random_pose(rng), random_pose(rng)
        pm = make_pointmap(rng.normal(size=(3, 7, 3)))
        out = transform_pointmap(pm, src, dst)
        a = pm.data.reshape(-1, 3)
        b = out.data.reshape(-1, 3)
        d_a = np.linalg.norm(a[:, None] - a[None, :], axis=-1)
        d_b = np.linalg.norm(b[:, None] - b[None, :], axis=-1)
        np.testing.assert_allclose(d_a, d_b, atol=1e-9)

    def test_inverse_composition(self):
        rng = np.random.default_rng(11)
        a, b = random_pose(rng), random_pose(rng)
        pm = make_pointmap(rng.normal(size=(4, 4, 3)))
        back = transform_pointmap(transform_pointmap(pm, a, b), b, a)
        np.testing.assert_allclose(back.data, pm.data, atol=1e-9)

    def test_rejects_bad_rotation(self):
        with pytest.raises(GeometryError):
            Extrinsics(np.ones((3, 3)), np.zeros(3))


class TestMotionField:
    def test_zero_when_maps_equal(self):
        rng = np.random.default_rng(12)
        x = make_pointmap(rng.normal(size=(4, 4, 3)), time=2)
        m = motion_field(x, x)
        np.testing.assert_allclose(m.data, 0.0)
        assert m.valid.all()

    def test_constant_offset(self):
        rng = np.random.default_rng(13)
        x_t = make_pointmap(rng.normal(size=(4, 4, 3)), time=0)
        x_q = make_pointmap(x_t.data + np.array([0.0, 0.0, 1.0]), time=3)
        m = motion_field(x_q, x_t)
        np.testing.assert_allclose(m.data, np.broadcast_to([0.0, 0.0, 1.0], (4, 4, 3)))
        assert m.source_time == 0 and m.query_time == 3

    def test_antisymmetry(self):
        rng = np.random.default_rng(14)
        a = make_pointmap(rng.normal(size=(5, 5, 3)), time=0)
        b = make_pointmap(rng.normal(size=(5, 5, 3)), time=4)
        np.testing.assert_array_equal(motion_field(a, b).data, -motion_field(b, a).data)

    def test_valid_mask_conjunction(self):
        va = np.zeros((2, 2), dtype=bool)
        va[0, 0] = va[0, 1] = True
        vb = np.zeros((2, 2), dtype=bool)
        vb[0, 1] = vb[1, 1] = True
        a = make_pointmap(np.zeros((2, 2, 3)), time=1, valid=va)
        b = make_pointmap(np.zeros((2, 2, 3)), time=0, valid=vb)
        m = motion_field(a, b)
        np.testing.assert_array_equal(m.valid, va & vb)

    def test_rejects_mismatched_frames(self):
        a = make_pointmap(np.zeros((2, 2, 3)), source=0)
        b = make_pointmap(np.zeros((2, 2, 3)), source=1)
        with pytest.raises(GeometryError):
            motion_field(a, b)

    def test_rejects_mismatched_shapes(self):
        a = make_pointmap(np.zeros((2, 2, 3)))
        b = make_pointmap(np.zeros((3, 2, 3)))
        with pytest.raises(GeometryError):
            motion_field(a, b)


class TestDepthMap:
    def test_rejects_nonpositive_valid_depth(self):
        data = np.array([[1.0, -1.0]])
        with pytest.raises(GeometryError):
            DepthMap(data=data, valid=np.array([[True, True]]))
        # Masked-out entries may hold anything
        DepthMap(data=data, valid=np.array([[True, False]]))


class TestMotionMapType:
    def test_shape_validation(self):
        with pytest.raises(GeometryError):
            MotionMap(data=np.zeros((2, 2)), valid=np.ones((2, 2), bool),
                      source_time=0, query_time=1)
