"""3D Gaussian splatting: primitive storage, density query, differentiable
alpha-blended rendering, fitting to posed views, and interpolation-view
rendering.

Rendering contract (applied identically by the brute-force oracle in the
tests): primitives are depth-sorted (stable, index tiebreak); each
contributes sigma = opacity * G2d(pixel) where G2d uses the perspective-
affine projection of its covariance at the center; contributions vanish
outside the 3-sigma support (squared Mahalanobis distance > 9) and once
accumulated transmittance falls below 1e-4; the background receives the
remaining transmittance.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import CameraPose, OrbitConfig, interpolated_azimuths, orbital_trajectory
from .camera import _pose_at
from .errors import CheckpointError, ConfigError
from .seeding import derive_seed, np_rng, torch_gen

__all__ = [
    "GaussianPrimitive",
    "GaussianSet",
    "FitConfig",
    "gaussian_query",
    "render_gaussians",
    "fit_gaussians",
    "render_interpolations",
    "save_gaussians",
    "load_gaussians",
]

SUPPORT_MAHALANOBIS_SQ = 9.0  # 3-sigma screen-space support
TRANSMITTANCE_CUTOFF = 1e-4
_DET_FLOOR = 1e-12
_PIXEL_CHUNK = 2048


@dataclass
class GaussianPrimitive:
    """One splat: opacity in [0,1], color in [0,1]^3, center, scale+rotation.

    The covariance is R S S^T R^T with S = diag(exp(log_scale)) and R from
    the unit quaternion, so it is symmetric positive definite for any
    parameter values; opacity is stored as a logit.
    """

    opacity_logit: float
    color: np.ndarray  # (3,)
    center: np.ndarray  # (3,)
    log_scale: np.ndarray  # (3,)
    quat: np.ndarray  # (4,) unit

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + math.exp(-self.opacity_logit)))

    def covariance(self) -> np.ndarray:
        R = _quat_to_mat_np(self.quat / np.linalg.norm(self.quat))
        S = np.diag(np.exp(self.log_scale))
        M = R @ S
        return M @ M.T


def _quat_to_mat_np(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _quats_to_mats(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


@dataclass
class GaussianSet:
    """Stacked primitive parameters plus the background color."""

    centers: torch.Tensor  # (P, 3)
    log_scales: torch.Tensor  # (P, 3)
    quats: torch.Tensor  # (P, 4), normalized on use
    opacity_logits: torch.Tensor  # (P,)
    colors: torch.Tensor  # (P, 3) in [0, 1]
    background: torch.Tensor = field(default_factory=lambda: torch.ones(3))

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            opacity_logit=float(self.opacity_logits[i]),
            color=self.colors[i].detach().cpu().numpy().copy(),
            center=self.centers[i].detach().cpu().numpy().copy(),
            log_scale=self.log_scales[i].detach().cpu().numpy().copy(),
            quat=(self.quats[i] / self.quats[i].norm()).detach().cpu().numpy().copy(),
        )

    def parameters(self) -> list[torch.Tensor]:
        return [self.centers, self.log_scales, self.quats, self.opacity_logits, self.colors]

    def to(self, dtype: torch.dtype) -> "GaussianSet":
        return GaussianSet(
            centers=self.centers.to(dtype),
            log_scales=self.log_scales.to(dtype),
            quats=self.quats.to(dtype),
            opacity_logits=self.opacity_logits.to(dtype),
            colors=self.colors.to(dtype),
            background=self.background.to(dtype),
        )


def gaussian_query(g: GaussianPrimitive, x: np.ndarray) -> float:
    """Unnormalized density exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)) in (0, 1]."""
    d = np.asarray(x, dtype=np.float64) - g.center
    cov = g.covariance()
    return float(np.exp(-0.5 * d @ np.linalg.solve(cov, d)))


def render_gaussians(
    gset: GaussianSet, pose: CameraPose, config: OrbitConfig
) -> torch.Tensor:
    """Differentiable (3, H, W) rendering by depth-sorted alpha blending."""
    dtype = gset.centers.dtype
    size = config.image_size
    hw = size * size
    if len(gset) == 0:
        return gset.background.reshape(3, 1, 1).expand(3, size, size).clone()

    R = torch.as_tensor(pose.rotation, dtype=dtype)
    t = torch.as_tensor(pose.translation, dtype=dtype)
    p_cam = gset.centers @ R.T + t  # (P, 3)
    z = p_cam[:, 2]
    in_front = z > 1e-6
    zs = torch.where(in_front, z, torch.ones_like(z))  # keep grads finite

    f = config.focal_px
    cx, cy = config.principal_point
    u = f * p_cam[:, 0] / zs + cx
    v = f * p_cam[:, 1] / zs + cy

    # perspective-affine covariance projection: J W Sigma W^T J^T
    rot = _quats_to_mats(gset.quats)
    S = torch.exp(gset.log_scales)
    M = rot * S[:, None, :]
    cov3 = M @ M.transpose(1, 2)
    zeros = torch.zeros_like(zs)
    j_row0 = torch.stack([f / zs, zeros, -f * p_cam[:, 0] / zs**2], dim=-1)
    j_row1 = torch.stack([zeros, f / zs, -f * p_cam[:, 1] / zs**2], dim=-1)
    J = torch.stack([j_row0, j_row1], dim=1)  # (P, 2, 3)
    JW = J @ R
    cov2 = JW @ cov3 @ JW.transpose(1, 2)  # (P, 2, 2)
    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    det = a * c - b * b
    usable = in_front & (det > _DET_FLOOR)
    det_safe = torch.where(usable, det, torch.ones_like(det))
    ia = c / det_safe
    ib = -b / det_safe
    ic = a / det_safe

    # global front-to-back order; stable sort breaks depth ties by index
    order = torch.argsort(z, stable=True)
    u, v, z = u[order], v[order], z[order]
    ia, ib, ic = ia[order], ib[order], ic[order]
    a, b, c = a[order], b[order], c[order]
    usable = usable[order]
    alphas = gset.opacities[order]
    colors = gset.colors[order]

    # conservative screen-space support radius: 3 sigma of the major axis
    with torch.no_grad():
        half_tr = (a + c) / 2
        lam_max = half_tr + torch.sqrt(((a - c) / 2) ** 2 + b * b).clamp_min(0.0)
        radius = 3.0 * torch.sqrt(lam_max.clamp_min(0.0)) + 1.0
        u_d, v_d = u.detach(), v.detach()

    ys, xs = torch.meshgrid(
        torch.arange(size, dtype=dtype) + 0.5,
        torch.arange(size, dtype=dtype) + 0.5,
        indexing="ij",
    )
    px = xs.reshape(-1)
    py = ys.reshape(-1)

    rows_per_band = max(1, min(8, _PIXEL_CHUNK // size))
    bands = []
    bg = gset.background.to(dtype)
    for row0 in range(0, size, rows_per_band):
        row1 = min(row0 + rows_per_band, size)
        sl = slice(row0 * size, row1 * size)
        # exact culling: splats whose 3-sigma box misses the band render as
        # zero anyway, so dropping them cannot change the output
        with torch.no_grad():
            keep = (
                usable
                & (v_d + radius >= row0)
                & (v_d - radius <= row1)
                & (u_d + radius >= 0.0)
                & (u_d - radius <= size)
            )
            keep_idx = torch.nonzero(keep, as_tuple=False).squeeze(1)
        n_pix = (row1 - row0) * size
        if keep_idx.numel() == 0:
            bands.append(bg.expand(n_pix, 3).clone())
            continue
        dx = px[sl][None, :] - u[keep_idx][:, None]  # (Pk, chunk)
        dy = py[sl][None, :] - v[keep_idx][:, None]
        q = (
            ia[keep_idx][:, None] * dx * dx
            + 2 * ib[keep_idx][:, None] * dx * dy
            + ic[keep_idx][:, None] * dy * dy
        )
        support = (q <= SUPPORT_MAHALANOBIS_SQ) & usable[keep_idx][:, None]
        sigma = alphas[keep_idx][:, None] * torch.exp(-0.5 * q) * support
        # transmittance before each primitive, then the 1e-4 skip gate
        t_before = torch.cumprod(1.0 - sigma, dim=0)
        t_before = torch.cat([torch.ones_like(t_before[:1]), t_before[:-1]], dim=0)
        gate = (t_before.detach() >= TRANSMITTANCE_CUTOFF).to(dtype)
        sigma = sigma * gate
        t_eff = torch.cumprod(1.0 - sigma, dim=0)
        t_eff_before = torch.cat([torch.ones_like(t_eff[:1]), t_eff[:-1]], dim=0)
        weights = sigma * t_eff_before  # (Pk, chunk)
        band_color = (weights[:, :, None] * colors[keep_idx][:, None, :]).sum(dim=0)
        band_color = band_color + t_eff[-1][:, None] * bg[None, :]
        bands.append(band_color)
    image = torch.cat(bands, dim=0).T.reshape(3, size, size)
    return image


@dataclass(frozen=True)
class FitConfig:
    n_primitives: int = 4096
    iterations: int = 2000
    lr_centers: float = 2e-3
    lr_log_scales: float = 5e-3
    lr_quats: float = 2e-3
    lr_opacity: float = 2e-2
    lr_colors: float = 2e-2
    l2_weight: float = 0.1
    prune_every: int = 500
    prune_opacity: float = 0.005
    init_radius: float = 0.5
    init_scale: float = 0.03
    seed: int = 0


def _init_set(config: FitConfig, dtype: torch.dtype, background) -> GaussianSet:
    rng = np_rng(config.seed, "gsplat-init")
    n = config.n_primitives
    # uniform in the ball of init_radius
    vec = rng.normal(size=(n, 3))
    vec /= np.linalg.norm(vec, axis=1, keepdims=True)
    rad = config.init_radius * rng.random(n) ** (1 / 3)
    centers = vec * rad[:, None]
    scales = np.log(config.init_scale * (0.5 + rng.random((n, 3))))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianSet(
        centers=torch.tensor(centers, dtype=dtype, requires_grad=True),
        log_scales=torch.tensor(scales, dtype=dtype, requires_grad=True),
        quats=torch.tensor(quats, dtype=dtype, requires_grad=True),
        opacity_logits=torch.full((n,), -2.2, dtype=dtype, requires_grad=True),
        colors=torch.full((n, 3), 0.5, dtype=dtype, requires_grad=True),
        background=torch.as_tensor(background, dtype=dtype),
    )


def _make_optimizer(gset: GaussianSet, config: FitConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        [
            {"params": [gset.centers], "lr": config.lr_centers},
            {"params": [gset.log_scales], "lr": config.lr_log_scales},
            {"params": [gset.quats], "lr": config.lr_quats},
            {"params": [gset.opacity_logits], "lr": config.lr_opacity},
            {"params": [gset.colors], "lr": config.lr_colors},
        ]
    )


def photometric_loss(rendered: torch.Tensor, target: torch.Tensor, l2_weight: float = 0.1) -> torch.Tensor:
    diff = rendered - target
    return diff.abs().mean() + l2_weight * (diff**2).mean()


def fit_gaussians(
    images,
    poses: list[CameraPose],
    config: OrbitConfig,
    fit: FitConfig = FitConfig(),
    background=(1.0, 1.0, 1.0),
) -> tuple[GaussianSet, list[float]]:
    """Fit a Gaussian set to posed views by photometric gradient descent.

    One random view per iteration; opacity pruning every prune_every
    iterations. Deterministic per fit.seed. Returns (set, loss curve).
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] != len(poses):
        raise ConfigError(
            f"need one pose per image: {images.shape[0]} images vs {len(poses)} poses"
        )
    if images.shape[0] < 2:
        raise ConfigError("fit_gaussians needs at least 2 views")
    dtype = torch.float32
    targets = torch.as_tensor(images, dtype=dtype)
    gset = _init_set(fit, dtype, background)
    opt = _make_optimizer(gset, fit)
    picker = torch_gen(fit.seed, "gsplat-views")
    curve: list[float] = []
    for it in range(fit.iterations):
        view = int(torch.randint(0, len(poses), (1,), generator=picker))
        rendered = render_gaussians(gset, poses[view], config)
        loss = photometric_loss(rendered, targets[view], fit.l2_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            gset.colors.clamp_(0.0, 1.0)
            gset.log_scales.clamp_(math.log(1e-3), math.log(0.3))
            gset.quats.div_(gset.quats.norm(dim=-1, keepdim=True))
            gset.centers.clamp_(-0.7, 0.7)
        curve.append(float(loss.detach()))
        if fit.prune_every and (it + 1) % fit.prune_every == 0 and (it + 1) < fit.iterations:
            with torch.no_grad():
                keep = gset.opacities >= fit.prune_opacity
            if int(keep.sum()) >= 16 and int(keep.sum()) < len(gset):
                gset = GaussianSet(
                    centers=gset.centers[keep].detach().clone().requires_grad_(True),
                    log_scales=gset.log_scales[keep].detach().clone().requires_grad_(True),
                    quats=gset.quats[keep].detach().clone().requires_grad_(True),
                    opacity_logits=gset.opacity_logits[keep].detach().clone().requires_grad_(True),
                    colors=gset.colors[keep].detach().clone().requires_grad_(True),
                    background=gset.background,
                )
                opt = _make_optimizer(gset, fit)
    detached = GaussianSet(
        centers=gset.centers.detach(),
        log_scales=gset.log_scales.detach(),
        quats=gset.quats.detach(),
        opacity_logits=gset.opacity_logits.detach(),
        colors=gset.colors.detach(),
        background=gset.background,
    )
    return detached, curve


def render_interpolations(
    gset: GaussianSet, orbit: OrbitConfig, m_total: int
) -> list[tuple[np.ndarray, CameraPose]]:
    """Render M interpolation views between the orbit's base azimuths."""
    out = []
    for az in interpolated_azimuths(orbit.n_views, m_total):
        pose = _pose_at(az, orbit.elevation_deg, orbit.radius)
        with torch.no_grad():
            img = render_gaussians(gset, pose, orbit)
        out.append((img.clamp(0, 1).numpy(), pose))
    return out


# ---------------------------------------------------------------------------
# binary point file: header magic "OMGS", uint32 version, uint32 count,
# 3 float32 background; then per primitive 14 float32 fields in the order
# opacity_logit, color rgb, center xyz, log_scale xyz, quat wxyz
# ---------------------------------------------------------------------------

_GS_MAGIC = b"OMGS"


def save_gaussians(path: Path | str, gset: GaussianSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(gset)
    rec = np.concatenate(
        [
            gset.opacity_logits.detach().cpu().numpy().reshape(n, 1),
            gset.colors.detach().cpu().numpy().reshape(n, 3),
            gset.centers.detach().cpu().numpy().reshape(n, 3),
            gset.log_scales.detach().cpu().numpy().reshape(n, 3),
            gset.quats.detach().cpu().numpy().reshape(n, 4),
        ],
        axis=1,
    ).astype("<f4")
    bg = gset.background.detach().cpu().numpy().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_GS_MAGIC)
        fh.write(struct.pack("<II", 1, n))
        fh.write(bg.tobytes())
        fh.write(rec.tobytes(order="C"))


def load_gaussians(path: Path | str) -> GaussianSet:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"gaussian point file not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != _GS_MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != 1:
        raise CheckpointError(f"unsupported gaussian file version {version}")
    bg = np.frombuffer(buf, dtype="<f4", count=3, offset=12)
    rec = np.frombuffer(buf, dtype="<f4", count=n * 14, offset=24).reshape(n, 14)
    return GaussianSet(
        centers=torch.tensor(rec[:, 4:7], dtype=torch.float32),
        log_scales=torch.tensor(rec[:, 7:10], dtype=torch.float32),
        quats=torch.tensor(rec[:, 10:14], dtype=torch.float32),
        opacity_logits=torch.tensor(rec[:, 0], dtype=torch.float32),
        colors=torch.tensor(rec[:, 1:4], dtype=torch.float32),
        background=torch.tensor(bg.copy(), dtype=torch.float32),
    )
