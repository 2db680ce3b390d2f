"""Orbital camera trajectories, pinhole projection, and ray generation.

World convention (fixed for the whole package): +z is up, azimuth
increases counter-clockwise when viewed from +z, and elevation lifts the
camera above the azimuth circle. Cameras are world-to-camera with the
usual vision axes: x right, y down, z forward (optical axis). Every
orbital camera looks at the world origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ProjectionError, RangeError

__all__ = [
    "OrbitConfig",
    "CameraPose",
    "orbital_trajectory",
    "project",
    "ray_for_pixel",
    "interpolated_azimuths",
    "poses_to_manifest",
    "poses_from_manifest",
]


@dataclass(frozen=True)
class OrbitConfig:
    """One orbit: view count, shared elevation, radius, and intrinsics.

    The same intrinsics (square image, square pixels, principal point at
    the exact image center) are used for data rendering, splatting, and
    SDF rendering, so their numeric values only need to be consistent.
    """

    n_views: int
    elevation_deg: float = 30.0
    radius: float = 1.5
    image_size: int = 64
    fov_deg: float = 50.0

    def __post_init__(self):
        if not isinstance(self.n_views, int) or self.n_views < 2:
            raise ConfigError(f"n_views must be an integer >= 2, got {self.n_views}")
        if not -10.0 <= self.elevation_deg <= 40.0:
            raise ConfigError(
                f"elevation_deg must lie in [-10, 40], got {self.elevation_deg}"
            )
        if not self.radius > 0:
            raise ConfigError(f"radius must be positive, got {self.radius}")
        if self.image_size < 1:
            raise ConfigError(f"image_size must be >= 1, got {self.image_size}")
        if not 0.0 < self.fov_deg < 180.0:
            raise ConfigError(f"fov_deg must lie in (0, 180), got {self.fov_deg}")

    @property
    def focal_px(self) -> float:
        """Focal length in pixels for the square pinhole."""
        return (self.image_size / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def principal_point(self) -> tuple[float, float]:
        return (self.image_size / 2.0, self.image_size / 2.0)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform plus the orbit angles that built it."""

    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,)
    azimuth_deg: float
    elevation_deg: float

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit forward direction (camera +z) in world coordinates."""
        return self.rotation[2]

    def extrinsic(self) -> np.ndarray:
        """3x4 [R | t] matrix."""
        return np.hstack([self.rotation, self.translation[:, None]])


def _pose_at(azimuth_deg: float, elevation_deg: float, radius: float) -> CameraPose:
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    center = radius * np.array(
        [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
    )
    forward = -center / np.linalg.norm(center)  # look at the origin
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])  # rows: camera axes in world
    translation = -rotation @ center
    return CameraPose(rotation, translation, float(azimuth_deg), float(elevation_deg))


def orbital_trajectory(config: OrbitConfig) -> list[CameraPose]:
    """Evenly spaced azimuths k*360/N at a shared elevation and radius.

    Pose 0 (azimuth 0) is the condition view: the first frame of every
    orbit sequence corresponds to the conditioning image.
    """
    step = 360.0 / config.n_views
    return [
        _pose_at(k * step, config.elevation_deg, config.radius)
        for k in range(config.n_views)
    ]


def project(pose: CameraPose, config: OrbitConfig, point: np.ndarray) -> np.ndarray:
    """Project a world point to continuous pixel coordinates.

    Raises ProjectionError for points at or behind the camera plane.
    """
    p_cam = pose.rotation @ np.asarray(point, dtype=float) + pose.translation
    z = p_cam[2]
    if z <= 1e-12:
        raise ProjectionError(f"point has non-positive camera depth {z:.3e}")
    f = config.focal_px
    cx, cy = config.principal_point
    return np.array([f * p_cam[0] / z + cx, f * p_cam[1] / z + cy])


def ray_for_pixel(
    pose: CameraPose, config: OrbitConfig, pixel: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Ray through a continuous pixel coordinate: (origin, unit direction)."""
    u, v = float(pixel[0]), float(pixel[1])
    s = config.image_size
    if not (0.0 <= u <= s and 0.0 <= v <= s):
        raise RangeError(f"pixel ({u}, {v}) outside image bounds [0, {s}]")
    f = config.focal_px
    cx, cy = config.principal_point
    d_cam = np.array([(u - cx) / f, (v - cy) / f, 1.0])
    d_world = pose.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return pose.center, d_world


def rays_for_image(pose: CameraPose, config: OrbitConfig) -> tuple[np.ndarray, np.ndarray]:
    """Rays through all pixel centers. Returns (origin (3,), dirs (H, W, 3))."""
    s = config.image_size
    f = config.focal_px
    cx, cy = config.principal_point
    u = np.arange(s) + 0.5
    v = np.arange(s) + 0.5
    uu, vv = np.meshgrid(u, v)  # vv indexes rows (image y), uu columns (image x)
    d_cam = np.stack([(uu - cx) / f, (vv - cy) / f, np.ones_like(uu)], axis=-1)
    d_world = d_cam @ pose.rotation  # (R^T d^T)^T = d R
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    return pose.center, d_world


def interpolated_azimuths(n_views: int, m_total: int) -> list[float]:
    """Azimuths of M interpolation views, evenly placed inside each gap.

    M must be divisible by N so every gap between adjacent base views
    receives the same number of new angles; none coincides with a base
    azimuth.
    """
    if n_views < 2:
        raise ConfigError(f"n_views must be >= 2, got {n_views}")
    if m_total < 0:
        raise ConfigError(f"m_total must be >= 0, got {m_total}")
    if m_total == 0:
        return []
    if m_total % n_views != 0:
        raise ConfigError(
            f"m_total ({m_total}) must be divisible by n_views ({n_views})"
        )
    per_gap = m_total // n_views
    gap = 360.0 / n_views
    out = []
    for k in range(n_views):
        base = k * gap
        for j in range(1, per_gap + 1):
            out.append(base + gap * j / (per_gap + 1))
    return out


def poses_to_manifest(poses: list[CameraPose], radius: float) -> str:
    """Text manifest: one row per view with azimuth, elevation, radius and
    the 12 row-major extrinsic entries."""
    lines = []
    for p in poses:
        ext = p.extrinsic().reshape(-1)
        vals = [p.azimuth_deg, p.elevation_deg, radius] + [float(x) for x in ext]
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    return "\n".join(lines) + "\n"


def poses_from_manifest(text: str) -> tuple[list[CameraPose], float]:
    """Parse a pose manifest written by `poses_to_manifest`."""
    poses = []
    radius = 0.0
    for ln, line in enumerate(text.strip().splitlines(), start=1):
        vals = [float(x) for x in line.split()]
        if len(vals) != 15:
            raise ConfigError(f"pose manifest line {ln}: expected 15 values, got {len(vals)}")
        az, el, radius = vals[0], vals[1], vals[2]
        ext = np.array(vals[3:]).reshape(3, 4)
        poses.append(CameraPose(ext[:, :3].copy(), ext[:, 3].copy(), az, el))
    return poses, radius
