import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orbitmesh.camera import (
    CameraPose,
    OrbitConfig,
    interpolated_azimuths,
    orbital_trajectory,
    poses_from_manifest,
    poses_to_manifest,
    project,
    ray_for_pixel,
    rays_for_image,
)
from orbitmesh.errors import ConfigError, ProjectionError, RangeError


def check_pose_invariants(pose: CameraPose, radius: float):
    R = pose.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1.0) < 1e-9
    assert abs(np.linalg.norm(pose.center) - radius) < 1e-9
    # optical axis passes through the origin
    axis = pose.optical_axis
    to_origin = -pose.center / np.linalg.norm(pose.center)
    assert np.arccos(np.clip(axis @ to_origin, -1, 1)) < 1e-6


class TestOrbitConfig:
    def test_invalid_fields_are_named(self):
        with pytest.raises(ConfigError, match="n_views"):
            OrbitConfig(n_views=1)
        with pytest.raises(ConfigError, match="radius"):
            OrbitConfig(n_views=4, radius=0.0)
        with pytest.raises(ConfigError, match="fov_deg"):
            OrbitConfig(n_views=4, fov_deg=180.0)
        with pytest.raises(ConfigError, match="elevation_deg"):
            OrbitConfig(n_views=4, elevation_deg=45.0)


class TestOrbitalTrajectory:
    def test_paper_protocol_16_views(self):
        cfg = OrbitConfig(n_views=16, elevation_deg=30.0, radius=1.5)
        poses = orbital_trajectory(cfg)
        assert len(poses) == 16
        for k, p in enumerate(poses):
            assert p.azimuth_deg == pytest.approx(k * 22.5)
            assert p.elevation_deg == 30.0
            assert np.linalg.norm(p.center) == pytest.approx(1.5, abs=1e-9)

    def test_four_views_at_zero_elevation(self):
        cfg = OrbitConfig(n_views=4, elevation_deg=0.0, radius=1.0)
        centers = np.array([p.center for p in orbital_trajectory(cfg)])
        expected = np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], dtype=float)
        assert np.abs(centers - expected).max() < 1e-12

    def test_centers_on_circle(self):
        cfg = OrbitConfig(n_views=16, elevation_deg=0.0, radius=2.0)
        for p in orbital_trajectory(cfg):
            assert abs(np.linalg.norm(p.center) - 2.0) < 1e-12
            assert abs(p.center[2]) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(
        n=st.integers(2, 32),
        elev=st.floats(-10, 40),
        radius=st.floats(0.5, 5.0),
    )
    def test_pose_invariants_randomized(self, n, elev, radius):
        cfg = OrbitConfig(n_views=n, elevation_deg=elev, radius=radius)
        for p in orbital_trajectory(cfg):
            check_pose_invariants(p, radius)


class TestProjectAndRays:
    def test_origin_projects_to_image_center(self):
        cfg = OrbitConfig(n_views=8, elevation_deg=25.0, radius=1.5, image_size=64)
        for p in orbital_trajectory(cfg):
            px = project(p, cfg, np.zeros(3))
            assert np.abs(px - np.array([32.0, 32.0])).max() < 1e-6

    def test_pinhole_offset_arithmetic(self):
        # camera-frame point (0.1, 0, 1) with focal 100px -> 10px offset
        cfg = OrbitConfig(n_views=4, elevation_deg=0.0, radius=1.0, image_size=64)
        pose = orbital_trajectory(cfg)[0]
        f = cfg.focal_px
        p_cam = np.array([0.1, 0.0, 1.0])
        world = pose.rotation.T @ (p_cam - pose.translation)
        px = project(pose, cfg, world)
        assert px[0] == pytest.approx(32.0 + 0.1 * f, abs=1e-9)
        assert px[1] == pytest.approx(32.0, abs=1e-9)

    def test_behind_camera_raises(self):
        cfg = OrbitConfig(n_views=4, elevation_deg=0.0, radius=1.0)
        pose = orbital_trajectory(cfg)[0]
        behind = pose.center + pose.optical_axis * -0.5
        with pytest.raises(ProjectionError):
            project(pose, cfg, behind)

    def test_roundtrip_oracle_1000_pixels(self):
        # independent oracle: sample the ray at a depth, project, compare
        cfg = OrbitConfig(n_views=8, elevation_deg=15.0, radius=1.5, image_size=96)
        rng = np.random.default_rng(0)
        poses = orbital_trajectory(cfg)
        for _ in range(1000):
            pose = poses[rng.integers(len(poses))]
            px = rng.uniform(0, cfg.image_size, size=2)
            origin, direction = ray_for_pixel(pose, cfg, px)
            depth = rng.uniform(0.3, 4.0)
            back = project(pose, cfg, origin + depth * direction)
            assert np.abs(back - px).max() < 1e-6

    def test_principal_point_ray_is_optical_axis(self):
        cfg = OrbitConfig(n_views=8, elevation_deg=30.0, radius=1.5, image_size=64)
        pose = orbital_trajectory(cfg)[3]
        _, d = ray_for_pixel(pose, cfg, np.array(cfg.principal_point))
        assert np.abs(d - pose.optical_axis).max() < 1e-9

    def test_corner_angles_match_fov(self):
        cfg = OrbitConfig(n_views=4, elevation_deg=0.0, radius=1.0, image_size=64, fov_deg=50.0)
        pose = orbital_trajectory(cfg)[0]
        s = float(cfg.image_size)
        corners = [(0.0, 0.0), (s, 0.0), (0.0, s), (s, s)]
        dirs = [ray_for_pixel(pose, cfg, np.array(c))[1] for c in corners]
        # corner rays have camera-frame direction (+-half, +-half, 1)
        half = math.tan(math.radians(cfg.fov_deg) / 2.0)
        cam_dirs = {
            (0.0, 0.0): np.array([-half, -half, 1.0]),
            (s, 0.0): np.array([half, -half, 1.0]),
            (0.0, s): np.array([-half, half, 1.0]),
            (s, s): np.array([half, half, 1.0]),
        }
        for (c0, d0), (c1, d1) in [
            ((corners[0], dirs[0]), (corners[1], dirs[1])),
            ((corners[0], dirs[0]), (corners[3], dirs[3])),
            ((corners[1], dirs[1]), (corners[2], dirs[2])),
        ]:
            v0, v1 = cam_dirs[c0], cam_dirs[c1]
            expected = math.acos(
                v0 @ v1 / (np.linalg.norm(v0) * np.linalg.norm(v1))
            )
            got = math.acos(np.clip(d0 @ d1, -1, 1))
            assert abs(got - expected) < 1e-6

    def test_ray_directions_unit_norm(self):
        cfg = OrbitConfig(n_views=4, elevation_deg=10.0, radius=1.5, image_size=32)
        pose = orbital_trajectory(cfg)[1]
        rng = np.random.default_rng(1)
        for _ in range(100):
            _, d = ray_for_pixel(pose, cfg, rng.uniform(0, 32, 2))
            assert abs(np.linalg.norm(d) - 1.0) < 1e-12

    def test_out_of_bounds_pixel_raises(self):
        cfg = OrbitConfig(n_views=4, elevation_deg=0.0, radius=1.0, image_size=32)
        pose = orbital_trajectory(cfg)[0]
        with pytest.raises(RangeError):
            ray_for_pixel(pose, cfg, np.array([33.0, 5.0]))

    def test_rays_for_image_matches_single_pixel(self):
        cfg = OrbitConfig(n_views=4, elevation_deg=5.0, radius=1.2, image_size=16)
        pose = orbital_trajectory(cfg)[2]
        origin, dirs = rays_for_image(pose, cfg)
        assert np.abs(origin - pose.center).max() < 1e-12
        for (i, j) in [(0, 0), (7, 3), (15, 15)]:
            _, d = ray_for_pixel(pose, cfg, np.array([j + 0.5, i + 0.5]))
            assert np.abs(dirs[i, j] - d).max() < 1e-12


class TestInterpolatedAzimuths:
    def test_midpoints_16(self):
        got = interpolated_azimuths(16, 16)
        expected = [11.25 + 22.5 * k for k in range(16)]
        assert np.allclose(got, expected)

    def test_empty(self):
        assert interpolated_azimuths(16, 0) == []

    def test_four(self):
        assert np.allclose(interpolated_azimuths(4, 4), [45, 135, 225, 315])

    def test_non_divisible_raises(self):
        with pytest.raises(ConfigError):
            interpolated_azimuths(16, 10)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(2, 24), mult=st.integers(1, 4))
    def test_union_is_even_grid(self, n, mult):
        m = n * mult
        base = [k * 360.0 / n for k in range(n)]
        interp = interpolated_azimuths(n, m)
        merged = np.sort(np.array(base + interp))
        assert len(np.unique(np.round(merged, 9))) == n + m
        diffs = np.diff(merged)
        assert np.allclose(diffs, 360.0 / (n + m))


class TestManifest:
    def test_roundtrip(self):
        cfg = OrbitConfig(n_views=6, elevation_deg=12.0, radius=1.5)
        poses = orbital_trajectory(cfg)
        text = poses_to_manifest(poses, cfg.radius)
        back, radius = poses_from_manifest(text)
        assert radius == 1.5
        assert len(back) == 6
        for a, b in zip(poses, back):
            assert np.abs(a.rotation - b.rotation).max() == 0.0
            assert np.abs(a.translation - b.translation).max() == 0.0
            assert a.azimuth_deg == b.azimuth_deg
