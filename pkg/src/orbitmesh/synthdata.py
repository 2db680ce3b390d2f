"""Procedural ground-truth scenes rendered along camera orbits.

Scenes are smooth unions of analytic SDF primitives (sphere, box, torus,
capsule) with value-noise albedo, sphere-traced with one ray per pixel.
Every scene fits inside the ball of radius 0.5 around the origin, so any
orbit of radius >= 1 sees the whole object. Depth maps are ray-hit
distances normalized by (orbit radius + 0.5), with 1.0 as the background
sentinel.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraPose, OrbitConfig, orbital_trajectory, poses_from_manifest, poses_to_manifest, rays_for_image
from .errors import ConfigError

__all__ = [
    "Primitive",
    "Scene",
    "OrbitSample",
    "build_scene",
    "render_view",
    "render_orbit_dataset",
    "save_orbit_sample",
    "load_orbit_sample",
    "scene_digest",
    "sample_digest",
]

SCENE_BOUND = 0.5  # bounding-sphere radius every scene must fit in
BLEND_WIDTH = 0.05  # smooth-min blend width
TRACE_EPS = 1e-4  # sphere-tracing termination epsilon (world units)
TRACE_MAX_STEPS = 128
DEPTH_MARGIN = 0.5  # depth normalizer is radius + this
BACKGROUND = 1.0  # background is constant white

_KINDS = ("sphere", "box", "torus", "capsule")

# fixed directional light (world frame) plus ambient floor
LIGHT_DIR = np.array([0.4, -0.35, 0.85])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.35
DIFFUSE = 0.65


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: np.ndarray  # (3,)
    rot: np.ndarray  # (3, 3) local-to-world
    sizes: tuple[float, ...]
    albedo_seed: int
    base_color: np.ndarray  # (3,)
    flat_color: np.ndarray | None = None  # bypasses noise albedo when set

    def bound_radius(self) -> float:
        s = self.sizes
        if self.kind == "sphere":
            r = s[0]
        elif self.kind == "box":
            r = math.sqrt(s[0] ** 2 + s[1] ** 2 + s[2] ** 2)
        elif self.kind == "torus":
            r = s[0] + s[1]
        else:  # capsule
            r = s[0] + s[1]
        return float(np.linalg.norm(self.center)) + r

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance for an (..., 3) array of world points."""
        p = (points - self.center) @ self.rot  # into local frame
        s = self.sizes
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - s[0]
        if self.kind == "box":
            q = np.abs(p) - np.array(s)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        if self.kind == "torus":
            ring = np.hypot(p[..., 0], p[..., 1]) - s[0]
            return np.hypot(ring, p[..., 2]) - s[1]
        # capsule along local z, half-length s[0], radius s[1]
        q = p.copy()
        q[..., 2] -= np.clip(q[..., 2], -s[0], s[0])
        return np.linalg.norm(q, axis=-1) - s[1]


@dataclass(frozen=True)
class Scene:
    """Smooth-min union of primitives, all inside the 0.5-radius ball."""

    primitives: tuple[Primitive, ...]
    blend_width: float = BLEND_WIDTH

    def sdf(self, points: np.ndarray) -> np.ndarray:
        d = self.primitives[0].sdf(points)
        k = self.blend_width
        for prim in self.primitives[1:]:
            di = prim.sdf(points)
            h = np.clip(0.5 + 0.5 * (di - d) / k, 0.0, 1.0)
            d = di * (1.0 - h) + d * h - k * h * (1.0 - h)
        return d

    def normals(self, points: np.ndarray, h: float = 1e-4) -> np.ndarray:
        """Central-difference surface normals at (..., 3) points."""
        offs = np.eye(3) * h
        grads = [
            self.sdf(points + offs[i]) - self.sdf(points - offs[i]) for i in range(3)
        ]
        n = np.stack(grads, axis=-1)
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        return n / np.maximum(norm, 1e-12)

    def albedo(self, points: np.ndarray) -> np.ndarray:
        """Per-point RGB albedo in [0, 1], owned by the nearest primitive."""
        dists = np.stack([p.sdf(points) for p in self.primitives], axis=0)
        owner = np.argmin(dists, axis=0)
        out = np.zeros(points.shape[:-1] + (3,))
        for i, prim in enumerate(self.primitives):
            mask = owner == i
            if not mask.any():
                continue
            if prim.flat_color is not None:
                out[mask] = prim.flat_color
            else:
                pts = points[mask]
                tex = np.stack(
                    [
                        _value_noise3(pts, prim.albedo_seed + 101 * c)
                        for c in range(3)
                    ],
                    axis=-1,
                )
                out[mask] = np.clip(prim.base_color * (0.35 + 0.65 * tex), 0.0, 1.0)
        return out


def _hash_lattice(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, seed: int) -> np.ndarray:
    """Stable integer hash -> [0, 1), independent of platform hash()."""
    seed_mix = np.uint32((seed * 2654435761) & 0xFFFFFFFF)
    h = (
        ix.astype(np.uint32) * np.uint32(73856093)
        ^ iy.astype(np.uint32) * np.uint32(19349663)
        ^ iz.astype(np.uint32) * np.uint32(83492791)
        ^ seed_mix
    )
    h ^= h >> np.uint32(13)
    h = h * np.uint32(1274126177)
    h ^= h >> np.uint32(16)
    return h.astype(np.float64) / 4294967296.0


def _value_noise3(points: np.ndarray, seed: int, octaves: int = 3) -> np.ndarray:
    """3-octave trilinear value noise over world points, in [0, 1]."""
    total = np.zeros(points.shape[:-1])
    amp_sum = 0.0
    for o in range(octaves):
        freq = 6.0 * (2.0**o)
        amp = 0.5**o
        p = points * freq + 100.0  # shift away from the integer-lattice origin
        i = np.floor(p).astype(np.int64)
        f = p - i
        w = f * f * (3.0 - 2.0 * f)  # smoothstep weights
        acc = np.zeros(points.shape[:-1])
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    v = _hash_lattice(i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz, seed + o)
                    wx = w[..., 0] if dx else 1.0 - w[..., 0]
                    wy = w[..., 1] if dy else 1.0 - w[..., 1]
                    wz = w[..., 2] if dz else 1.0 - w[..., 2]
                    acc += v * wx * wy * wz
        total += amp * acc
        amp_sum += amp
    return total / amp_sum


def build_scene(seed: int) -> Scene:
    """Deterministic procedural scene with 1-5 primitives."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    prims = []
    for _ in range(n):
        kind = _KINDS[rng.integers(len(_KINDS))]
        center = rng.uniform(-0.2, 0.2, size=3)
        # random rotation from a normalized quaternion
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        rot = _quat_to_mat(q)
        if kind == "sphere":
            sizes = (float(rng.uniform(0.12, 0.25)),)
        elif kind == "box":
            sizes = tuple(float(x) for x in rng.uniform(0.08, 0.18, size=3))
        elif kind == "torus":
            sizes = (float(rng.uniform(0.1, 0.18)), float(rng.uniform(0.03, 0.07)))
        else:
            sizes = (float(rng.uniform(0.06, 0.15)), float(rng.uniform(0.05, 0.1)))
        prims.append(
            Primitive(
                kind=kind,
                center=center,
                rot=rot,
                sizes=sizes,
                albedo_seed=int(rng.integers(2**31)),
                base_color=rng.uniform(0.35, 1.0, size=3),
            )
        )
    # rescale into the bound, leaving room for smooth-min bulge
    limit = SCENE_BOUND - 0.02 - BLEND_WIDTH / 4.0
    worst = max(p.bound_radius() for p in prims)
    if worst > limit:
        s = limit / worst
        prims = [
            Primitive(
                kind=p.kind,
                center=p.center * s,
                rot=p.rot,
                sizes=tuple(x * s for x in p.sizes),
                albedo_seed=p.albedo_seed,
                base_color=p.base_color,
            )
            for p in prims
        ]
    return Scene(primitives=tuple(prims))


def _quat_to_mat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass
class OrbitSample:
    """One object's N-view sequence: images, depths, poses, elevation.

    images[condition_index] is the condition view. Foreground depth is
    strictly below 1.0; background pixels are exactly 1.0.
    """

    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    depths: np.ndarray  # (N, H, W) float32 in [0, 1], background 1.0
    poses: list[CameraPose]
    elevation_deg: float
    condition_index: int = 0
    scene_seed: int | None = None
    radius: float = 1.5
    fov_deg: float = 50.0


def _trace(scene: Scene, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sphere-trace rays from one origin. Returns (hit mask, hit distance)."""
    flat_dirs = dirs.reshape(-1, 3)
    n = flat_dirs.shape[0]
    # enter at the scene bounding sphere to save steps; margin over bound
    b = SCENE_BOUND + 0.05
    oc = -origin  # vector to sphere center (origin of world)
    proj = flat_dirs @ oc
    closest_sq = float(oc @ oc) - proj**2
    hits_bound = closest_sq <= b * b
    half_chord = np.sqrt(np.maximum(b * b - closest_sq, 0.0))
    t_enter = np.maximum(proj - half_chord, 0.0)
    t_exit = proj + half_chord

    t = t_enter.copy()
    hit = np.zeros(n, dtype=bool)
    active = hits_bound & (t_exit > 0)
    for _ in range(TRACE_MAX_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pos = origin + t[idx, None] * flat_dirs[idx]
        d = scene.sdf(pos)
        newly_hit = d < TRACE_EPS
        hit[idx[newly_hit]] = True
        active[idx[newly_hit]] = False
        adv = idx[~newly_hit]
        t[adv] += d[~newly_hit]
        active[adv] = t[adv] <= t_exit[adv]
    return hit.reshape(dirs.shape[:-1]), t.reshape(dirs.shape[:-1])


def render_view(
    scene: Scene,
    pose: CameraPose,
    config: OrbitConfig,
    light_dir: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one view: Lambertian image (3, H, W) and depth map (H, W).

    light_dir overrides the fixed world light (used by symmetry tests);
    it is normalized internally.
    """
    light = LIGHT_DIR if light_dir is None else np.asarray(light_dir, float)
    light = light / np.linalg.norm(light)
    origin, dirs = rays_for_image(pose, config)
    hit, t = _trace(scene, origin, dirs)

    h = config.image_size
    image = np.full((h, h, 3), BACKGROUND)
    depth = np.ones((h, h))
    if hit.any():
        pts = origin + t[hit][:, None] * dirs[hit]
        normals = scene.normals(pts)
        albedo = scene.albedo(pts)
        lambert = np.maximum(normals @ light, 0.0)
        shade = np.clip(AMBIENT + DIFFUSE * lambert, 0.0, 1.0)
        image[hit] = np.clip(albedo * shade[:, None], 0.0, 1.0)
        depth[hit] = np.clip(t[hit] / (config.radius + DEPTH_MARGIN), 0.0, 1.0)
        # keep the sentinel exclusive to the background
        depth[hit] = np.minimum(depth[hit], 1.0 - 2**-16)
    return image.transpose(2, 0, 1), depth


def render_orbit_dataset(scene: Scene, config: OrbitConfig, scene_seed: int | None = None) -> OrbitSample:
    """Render all N orbit views of one scene."""
    poses = orbital_trajectory(config)
    images = []
    depths = []
    for pose in poses:
        img, dep = render_view(scene, pose, config)
        images.append(img)
        depths.append(dep)
    return OrbitSample(
        images=np.stack(images).astype(np.float32),
        depths=np.stack(depths).astype(np.float32),
        poses=poses,
        elevation_deg=config.elevation_deg,
        condition_index=0,
        scene_seed=scene_seed,
        radius=config.radius,
        fov_deg=config.fov_deg,
    )


def scene_digest(scene: Scene) -> str:
    h = hashlib.sha256()
    h.update(np.float64(scene.blend_width).tobytes())
    for p in scene.primitives:
        h.update(p.kind.encode())
        h.update(np.asarray(p.center, np.float64).tobytes())
        h.update(np.asarray(p.rot, np.float64).tobytes())
        h.update(np.asarray(p.sizes, np.float64).tobytes())
        h.update(np.int64(p.albedo_seed).tobytes())
        h.update(np.asarray(p.base_color, np.float64).tobytes())
    return h.hexdigest()


def sample_digest(sample: OrbitSample) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(sample.images).tobytes())
    h.update(np.ascontiguousarray(sample.depths).tobytes())
    return h.hexdigest()


def save_orbit_sample(root: Path | str, scene_seed: int, sample: OrbitSample) -> Path:
    """Write the documented dataset layout for one scene.

    <root>/<scene_seed>/view_<k>.png   8-bit RGB
                       depth_<k>.png   16-bit gray, round(depth * 65535)
                       poses.txt       pose manifest
                       meta.txt        elevation, radius, n_views, fov, size
    """
    out = Path(root) / str(scene_seed)
    out.mkdir(parents=True, exist_ok=True)
    n = sample.images.shape[0]
    for k in range(n):
        rgb = np.round(sample.images[k].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(out / f"view_{k}.png")
        d16 = np.round(sample.depths[k].astype(np.float64) * 65535.0).astype(np.uint16)
        Image.fromarray(d16).save(out / f"depth_{k}.png")
    (out / "poses.txt").write_text(poses_to_manifest(sample.poses, sample.radius))
    meta = (
        f"elevation_deg = {sample.elevation_deg:.17g}\n"
        f"radius = {sample.radius:.17g}\n"
        f"n_views = {n}\n"
        f"fov_deg = {sample.fov_deg:.17g}\n"
        f"image_size = {sample.images.shape[-1]}\n"
    )
    (out / "meta.txt").write_text(meta)
    return out


def load_orbit_sample(scene_dir: Path | str) -> OrbitSample:
    """Load a scene directory written by `save_orbit_sample`."""
    d = Path(scene_dir)
    if not (d / "meta.txt").exists():
        raise ConfigError(f"not a dataset directory (no meta.txt): {d}")
    meta = {}
    for line in (d / "meta.txt").read_text().splitlines():
        key, _, val = line.partition("=")
        meta[key.strip()] = val.strip()
    n = int(meta["n_views"])
    poses, radius = poses_from_manifest((d / "poses.txt").read_text())
    images = []
    depths = []
    for k in range(n):
        rgb = np.asarray(Image.open(d / f"view_{k}.png"), dtype=np.float32) / 255.0
        images.append(rgb.transpose(2, 0, 1))
        d16 = np.asarray(Image.open(d / f"depth_{k}.png"), dtype=np.float32) / 65535.0
        depths.append(d16)
    seed_name = d.name
    return OrbitSample(
        images=np.stack(images),
        depths=np.stack(depths),
        poses=poses,
        elevation_deg=float(meta["elevation_deg"]),
        condition_index=0,
        scene_seed=int(seed_name) if seed_name.isdigit() else None,
        radius=radius,
        fov_deg=float(meta["fov_deg"]),
    )
