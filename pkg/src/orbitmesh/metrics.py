"""Novel-view and reconstruction quality metrics.

PSNR and windowed SSIM score image pairs in [0, 1]; Chamfer distance and
Volume IoU score surface geometry. Mesh arguments are duck-typed: any
object with `vertices` (V, 3) and `triangles` (T, 3) works.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve
from scipy.spatial import cKDTree

from .errors import ConfigError, ShapeError

__all__ = [
    "psnr",
    "ssim",
    "chamfer",
    "volume_iou",
    "sample_mesh_points",
    "write_metrics_csv",
]

PSNR_CAP_DB = 99.0
_LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images; identical inputs cap at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(_LUMA, img, axes=1)
    raise ShapeError(f"expected (H, W) or (3, H, W) image, got {img.shape}")


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Windowed SSIM with an 11x11 Gaussian window, averaged over windows."""
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise ShapeError(f"ssim shapes differ: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < window:
        raise ConfigError(
            f"image {ga.shape} smaller than the {window}x{window} ssim window"
        )
    c1 = 0.01**2
    c2 = 0.03**2
    kern = _gaussian_window(window, sigma)

    def win_mean(x):
        full = convolve(x, kern, mode="nearest")
        m = (window - 1) // 2
        return full[m:-m, m:-m]  # interior windows only

    mu_a = win_mean(ga)
    mu_b = win_mean(gb)
    var_a = win_mean(ga * ga) - mu_a**2
    var_b = win_mean(gb * gb) - mu_b**2
    cov = win_mean(ga * gb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=-1)


def sample_mesh_points(mesh, n: int = 10_000, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted surface samples from a triangle mesh."""
    vertices = np.asarray(mesh.vertices, dtype=np.float64)
    triangles = np.asarray(mesh.triangles, dtype=np.int64)
    if len(triangles) == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = _triangle_areas(vertices, triangles)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri_idx = rng.choice(len(triangles), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    t = triangles[tri_idx]
    p0 = vertices[t[:, 0]]
    p1 = vertices[t[:, 1]]
    p2 = vertices[t[:, 2]]
    return p0 + u[:, None] * (p1 - p0) + v[:, None] * (p2 - p0)


def _as_points(obj, n: int, seed: int) -> np.ndarray:
    if hasattr(obj, "vertices") and hasattr(obj, "triangles"):
        return sample_mesh_points(obj, n=n, seed=seed)
    pts = np.asarray(obj, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"expected (P, 3) points or a mesh, got {pts.shape}")
    return pts


def chamfer(points_a, points_b, n_samples: int = 10_000, seed: int = 0) -> float:
    """Symmetric Chamfer distance: mean of both directed mean NN distances.

    Meshes are sampled uniformly by area (n_samples points per side).
    """
    a = _as_points(points_a, n_samples, seed)
    b = _as_points(points_b, n_samples, seed + 1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer requires non-empty point sets")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def _mesh_occupancy(mesh, origin: np.ndarray, spacing: np.ndarray, grid: int) -> np.ndarray:
    """Voxel-center occupancy by ray-casting parity along +x columns."""
    vertices = np.asarray(mesh.vertices, dtype=np.float64)
    triangles = np.asarray(mesh.triangles, dtype=np.int64)
    # voxel centers; tiny irrational shift avoids edge-exact intersections
    ys = origin[1] + (np.arange(grid) + 0.5) * spacing[1] + 1e-9 * math.sqrt(2)
    zs = origin[2] + (np.arange(grid) + 0.5) * spacing[2] + 1e-9 * math.sqrt(3)
    xs = origin[0] + (np.arange(grid) + 0.5) * spacing[0]

    crossings: list[list[float]] = [[] for _ in range(grid * grid)]
    tri = vertices[triangles]  # (T, 3, 3)
    for p0, p1, p2 in tri:
        y1, z1 = p0[1], p0[2]
        y2, z2 = p1[1], p1[2]
        y3, z3 = p2[1], p2[2]
        det = (y2 - y1) * (z3 - z1) - (y3 - y1) * (z2 - z1)
        if abs(det) < 1e-15:
            continue  # degenerate in projection, measure-zero contribution
        ylo, yhi = min(y1, y2, y3), max(y1, y2, y3)
        zlo, zhi = min(z1, z2, z3), max(z1, z2, z3)
        iy0 = max(0, int(np.ceil((ylo - ys[0]) / spacing[1])))
        iy1 = min(grid - 1, int(np.floor((yhi - ys[0]) / spacing[1])))
        iz0 = max(0, int(np.ceil((zlo - zs[0]) / spacing[2])))
        iz1 = min(grid - 1, int(np.floor((zhi - zs[0]) / spacing[2])))
        if iy0 > iy1 or iz0 > iz1:
            continue
        yy = ys[iy0 : iy1 + 1][:, None]
        zz = zs[iz0 : iz1 + 1][None, :]
        l2 = ((yy - y1) * (z3 - z1) - (y3 - y1) * (zz - z1)) / det
        l3 = ((y2 - y1) * (zz - z1) - (yy - y1) * (z2 - z1)) / det
        l1 = 1.0 - l2 - l3
        inside = (l1 >= 0) & (l2 >= 0) & (l3 >= 0)
        if not inside.any():
            continue
        x_hit = l1 * p0[0] + l2 * p1[0] + l3 * p2[0]
        iys, izs = np.nonzero(inside)
        for a, b_ in zip(iys, izs):
            crossings[(iy0 + a) * grid + (iz0 + b_)].append(x_hit[a, b_])

    occ = np.zeros((grid, grid, grid), dtype=bool)
    for iy in range(grid):
        for iz in range(grid):
            cs = crossings[iy * grid + iz]
            if not cs:
                continue
            cs = np.sort(np.asarray(cs))
            counts = np.searchsorted(cs, xs, side="left")
            occ[:, iy, iz] = (counts % 2) == 1
    return occ


def volume_iou(mesh_a, mesh_b, grid: int = 64) -> float:
    """Intersection-over-union of voxelized occupancies on a shared grid.

    Both meshes must be watertight so ray parity is well defined. An
    empty union scores 0.
    """
    va = np.asarray(mesh_a.vertices, dtype=np.float64)
    vb = np.asarray(mesh_b.vertices, dtype=np.float64)
    if len(va) == 0 and len(vb) == 0:
        return 0.0
    allv = np.vstack([v for v in (va, vb) if len(v)])
    lo = allv.min(axis=0)
    hi = allv.max(axis=0)
    # half-voxel padding keeps axis-aligned faces off the voxel centers
    pad = (hi - lo).max() / (2 * grid) + 1e-9
    lo = lo - pad
    hi = hi + pad
    spacing = (hi - lo) / grid
    occ_a = _mesh_occupancy(mesh_a, lo, spacing, grid) if len(va) else np.zeros((grid,) * 3, bool)
    occ_b = _mesh_occupancy(mesh_b, lo, spacing, grid) if len(vb) else np.zeros((grid,) * 3, bool)
    union = np.logical_or(occ_a, occ_b).sum()
    if union == 0:
        return 0.0
    inter = np.logical_and(occ_a, occ_b).sum()
    return float(inter) / float(union)


def write_metrics_csv(path: Path | str, rows: list[dict]) -> None:
    """Per-scene metrics CSV plus an aggregate (mean) row.

    Row keys: scene_seed, psnr, ssim, chamfer, iou. Missing values are
    written as empty fields and excluded from the aggregate.
    """
    cols = ["scene_seed", "psnr", "ssim", "chamfer", "iou"]
    lines = [",".join(cols)]

    def fmt(v):
        return "" if v is None else f"{v:.6f}" if isinstance(v, float) else str(v)

    for row in rows:
        lines.append(",".join(fmt(row.get(c)) for c in cols))
    agg = ["mean"]
    for c in cols[1:]:
        vals = [row[c] for row in rows if row.get(c) is not None]
        agg.append(f"{float(np.mean(vals)):.6f}" if vals else "")
    lines.append(",".join(agg))
    Path(path).write_text("\n".join(lines) + "\n")
