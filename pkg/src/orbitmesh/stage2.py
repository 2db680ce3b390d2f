"""Stage-2 refiner: degradation synthesis, a trained depth regressor, and
depth-conditioned video-to-video refinement doubling resolution.

Training inputs are synthesized by a two-round high-order degradation
chain (blur, resize, noise, block-DCT compression) with an optional sinc
pass for ringing artifacts and random ellipse masks simulating shape
deformation. The refiner consumes the degraded sequence (bilinearly
upsampled and encoded), its estimated depth, the condition image, and
elevation, and is trained with the standard noise-regression loss.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffcore import LatentSequence, Schedule, make_schedule, sample_loop, training_loss
from .errors import ConditionError, ConfigError, NumericError, ShapeError
from .seeding import derive_seed, np_rng, torch_gen
from .stage1 import _Ema
from .seq_denoiser import (
    ConditionSet,
    DenoiserConfig,
    LatentAutoencoder,
    StageDenoiser,
    denoise,
    encode_latent,
    encode_sequence,
)
from .synthdata import BACKGROUND, OrbitSample

__all__ = [
    "DegradeConfig",
    "sinc_kernel",
    "random_mask",
    "degrade",
    "DepthConfig",
    "DepthRegressor",
    "train_depth_regressor",
    "estimate_depth",
    "Stage2Config",
    "train_stage2",
    "refine_orbit",
]


# ---------------------------------------------------------------------------
# degradation pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DegradeConfig:
    """Ranges for the high-order degradation chain (two rounds)."""

    blur_kernel_range: tuple[int, int] = (3, 9)  # odd sizes
    blur_sigma_range: tuple[float, float] = (0.2, 1.6)
    downscale_range: tuple[float, float] = (0.6, 1.0)
    noise_sigma_range: tuple[float, float] = (0.0, 0.06)
    compression_range: tuple[float, float] = (0.3, 0.95)  # quality analog
    sinc_cutoff_range: tuple[float, float] = (0.8, 3.0)
    sinc_prob: float = 0.4
    sinc_size: int = 11
    mask_prob: float = 0.35
    mask_count_range: tuple[int, int] = (1, 3)
    mask_radius_range: tuple[float, float] = (0.05, 0.2)  # fraction of min(H, W)
    rounds: int = 2

    def __post_init__(self):
        for name in ("blur_kernel_range", "blur_sigma_range", "downscale_range",
                     "noise_sigma_range", "compression_range", "sinc_cutoff_range",
                     "mask_count_range", "mask_radius_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"{name} is empty: {(lo, hi)}")
        for name in ("sinc_prob", "mask_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.sinc_size % 2 == 0:
            raise ConfigError(f"sinc_size must be odd, got {self.sinc_size}")


def sinc_kernel(cutoff: float, size: int) -> np.ndarray:
    """Windowed 2D sinc low-pass kernel, normalized to sum exactly 1.

    Separable sin(c*x)/(c*x) taps under a Hamming window; cutoff=pi gives
    the discrete delta (the 1D sinc vanishes at every nonzero integer).
    """
    if size % 2 == 0 or size < 1:
        raise ConfigError(f"sinc kernel size must be odd and positive, got {size}")
    if not 0.0 < cutoff <= math.pi:
        raise ConfigError(f"sinc cutoff must lie in (0, pi], got {cutoff}")
    half = (size - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        taps = np.where(x == 0, 1.0, np.sin(cutoff * x) / (cutoff * x))
    taps = taps * np.hamming(size)
    k = np.outer(taps, taps)
    return k / k.sum()


def _conv_frames(x: torch.Tensor, kernel: np.ndarray) -> torch.Tensor:
    """Depthwise 2D convolution with reflect padding, per channel."""
    k = torch.as_tensor(kernel, dtype=x.dtype)
    size = k.shape[0]
    pad = size // 2
    weight = k[None, None].expand(x.shape[1], 1, size, size)
    xp = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(xp, weight, groups=x.shape[1])


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


# orthonormal 8x8 DCT-II matrix and the classic luminance quantization table
_DCT8 = np.array(
    [
        [math.sqrt(1 / 8) if k == 0 else math.sqrt(2 / 8) * math.cos(math.pi * (2 * n + 1) * k / 16)
         for n in range(8)]
        for k in range(8)
    ]
)
_QUANT8 = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _dct_compress(x: torch.Tensor, quality: float) -> torch.Tensor:
    """Block-DCT quantization: a bit-reproducible stand-in for JPEG."""
    n, c, h, w = x.shape
    ph = (8 - h % 8) % 8
    pw = (8 - w % 8) % 8
    xp = F.pad(x, (0, pw, 0, ph), mode="reflect") if (ph or pw) else x
    hh, ww = xp.shape[-2:]
    d = torch.as_tensor(_DCT8, dtype=x.dtype)
    step = torch.as_tensor(_QUANT8, dtype=x.dtype) * (2.0 * (1.05 - quality))
    blocks = xp.reshape(n, c, hh // 8, 8, ww // 8, 8).permute(0, 1, 2, 4, 3, 5)
    coef = torch.einsum("ij,...jk,lk->...il", d, blocks * 255.0, d)
    coef = torch.round(coef / step) * step
    out = torch.einsum("ji,...jk,kl->...il", d, coef, d) / 255.0
    out = out.permute(0, 1, 2, 4, 3, 5).reshape(n, c, hh, ww)
    return out[..., :h, :w]


def random_mask(sequence, seed: int, config: DegradeConfig = DegradeConfig()) -> np.ndarray:
    """Fill random ellipses with the background color, per frame.

    With probability mask_prob a frame receives 1-3 ellipses (radii drawn
    from mask_radius_range as fractions of the short side). Deterministic
    in the seed.
    """
    x = np.array(np.asarray(sequence), dtype=np.float32, copy=True)
    if x.ndim != 4:
        raise ShapeError(f"expected (N, 3, H, W) sequence, got {x.shape}")
    n, _, h, w = x.shape
    rng = np_rng(seed, "mask")
    yy, xx = np.mgrid[:h, :w]
    short = min(h, w)
    for f in range(n):
        if rng.random() >= config.mask_prob:
            continue
        lo, hi = config.mask_count_range
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            cy = rng.uniform(0, h)
            cx = rng.uniform(0, w)
            a = rng.uniform(*config.mask_radius_range) * short
            b = rng.uniform(*config.mask_radius_range) * short
            theta = rng.uniform(0, math.pi)
            dy = yy + 0.5 - cy
            dx = xx + 0.5 - cx
            u = dx * math.cos(theta) + dy * math.sin(theta)
            v = -dx * math.sin(theta) + dy * math.cos(theta)
            inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
            x[f][:, inside] = BACKGROUND
    return x


def degrade(hr_sequence, seed: int, config: DegradeConfig = DegradeConfig()) -> np.ndarray:
    """High-order degradation of an (N, 3, H, W) sequence to half size.

    Two rounds of {blur, resize, noise, compression} with one parameter
    draw per sequence (frames stay mutually consistent), an optional sinc
    pass, per-frame random masks, then an exact resize to (H/2, W/2) with
    values clamped to [0, 1]. Deterministic in the seed.
    """
    arr = np.asarray(hr_sequence, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) sequence, got {arr.shape}")
    n, _, h, w = arr.shape
    if h % 2 or w % 2:
        raise ShapeError(f"degrade needs even H, W; got {(h, w)}")
    rng = np_rng(seed, "degrade")
    x = torch.as_tensor(arr)
    cur_h, cur_w = h, w
    for _ in range(config.rounds):
        klo, khi = config.blur_kernel_range
        ksize = int(rng.integers(klo // 2, khi // 2 + 1)) * 2 + 1
        sigma = float(rng.uniform(*config.blur_sigma_range))
        x = _conv_frames(x, _gaussian_kernel(ksize, sigma))
        scale = float(rng.uniform(*config.downscale_range))
        new_h = max(8, int(round(cur_h * scale)))
        new_w = max(8, int(round(cur_w * scale)))
        x = F.interpolate(x, size=(new_h, new_w), mode="bilinear", align_corners=False)
        cur_h, cur_w = new_h, new_w
        sigma_n = float(rng.uniform(*config.noise_sigma_range))
        if sigma_n > 0:
            noise = rng.normal(0.0, sigma_n, size=tuple(x.shape)).astype(np.float32)
            x = x + torch.as_tensor(noise)
        quality = float(rng.uniform(*config.compression_range))
        x = _dct_compress(x.clamp(0, 1), quality)
    if rng.random() < config.sinc_prob:
        cutoff = float(rng.uniform(*config.sinc_cutoff_range))
        x = _conv_frames(x, sinc_kernel(cutoff, config.sinc_size))
    x = torch.as_tensor(
        random_mask(x.clamp(0, 1).numpy(), seed=derive_seed(seed, "degrade-mask"), config=config)
    )
    x = F.interpolate(x, size=(h // 2, w // 2), mode="bilinear", align_corners=False)
    return x.clamp(0, 1).numpy()


# ---------------------------------------------------------------------------
# depth regressor (stand-in for an off-the-shelf depth estimator)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DepthConfig:
    steps: int = 800
    lr: float = 1e-3
    batch_size: int = 8
    width: int = 24
    seed: int = 0


class DepthRegressor(nn.Module):
    """Small conv net regressing normalized depth (sigmoid output)."""

    def __init__(self, width: int = 24):
        super().__init__()
        self.width = width
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.GroupNorm(8, w), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.GroupNorm(8, 2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.GroupNorm(8, 2 * w), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1), nn.GroupNorm(8, w), nn.SiLU(),
            nn.Conv2d(w, 1, 3, padding=1),
        )
        self.register_buffer("trained", torch.zeros(()))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(images))


def train_depth_regressor(
    pairs: list[tuple[np.ndarray, np.ndarray]], config: DepthConfig = DepthConfig()
) -> DepthRegressor:
    """Fit the regressor on (image (3,H,W), depth (H,W)) pairs with MSE."""
    if len(pairs) == 0:
        raise ConfigError("depth training set is empty")
    torch.manual_seed(derive_seed(config.seed, "depth-init"))
    model = DepthRegressor(config.width)
    images = torch.as_tensor(np.stack([p[0] for p in pairs]), dtype=torch.float32)
    depths = torch.as_tensor(np.stack([p[1] for p in pairs]), dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    picker = torch_gen(config.seed, "depth-batch")
    model.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(pairs), (config.batch_size,), generator=picker)
        pred = model(images[idx])[:, 0]
        loss = F.mse_loss(pred, depths[idx])
        if not math.isfinite(loss.item()):
            raise NumericError(f"depth loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        model.trained.fill_(1.0)
    return model


def estimate_depth(model: DepthRegressor, sequence) -> np.ndarray:
    """Per-frame depth in [0, 1] for an (N, 3, H, W) sequence."""
    if model.trained.item() == 0.0:
        raise ConditionError("depth regressor is untrained")
    x = torch.as_tensor(np.asarray(sequence), dtype=torch.float32)
    if x.ndim != 4:
        raise ShapeError(f"expected (N, 3, H, W) sequence, got {tuple(x.shape)}")
    with torch.no_grad():
        return model(x)[:, 0].numpy()


# ---------------------------------------------------------------------------
# stage-2 training and inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Stage2Config:
    steps: int = 2000
    lr: float = 1e-4
    batch_size: int = 1
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    schedule_T: int = 1000
    seed: int = 0
    width: int = 64
    width_mid: int = 128
    use_depth: bool = True
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    degrade_pool: int = 8  # precomputed degradations per sample (0 = fresh each step)
    mix_stage1: bool = False  # mix real stage-1 outputs into the training inputs

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            stage="stage2", width=self.width, width_mid=self.width_mid,
            use_depth=self.use_depth,
        )


def _degraded_variant(hr_images: np.ndarray, seed: int, config: Stage2Config,
                      ae: LatentAutoencoder, depth_model: DepthRegressor):
    """One degraded training input: (prev latents, depth maps)."""
    h, w = hr_images.shape[-2:]
    lr = degrade(hr_images, seed=seed, config=config.degrade)
    depth = estimate_depth(depth_model, lr)
    up = F.interpolate(torch.as_tensor(lr), size=(h, w), mode="bilinear", align_corners=False)
    prev = encode_sequence(ae, up)
    return prev, torch.as_tensor(depth, dtype=torch.float32).clamp(0, 1)[:, None]


def train_stage2(
    dataset: list[OrbitSample],
    ae: LatentAutoencoder,
    depth_model: DepthRegressor,
    config: Stage2Config = Stage2Config(),
    stage1_sequences: list[np.ndarray] | None = None,
) -> tuple[StageDenoiser, list[tuple[int, float]]]:
    """Train the refiner; returns (EMA model, loss curve).

    Each sample's degraded inputs come from a per-sample pool of seeded
    degradations (or fresh draws when degrade_pool=0). When mix_stage1 is
    set, provided stage-1 output sequences are cycled in as additional
    inputs, mirroring training on real coarse generations.
    """
    if len(dataset) == 0:
        raise ConfigError("stage-2 training dataset is empty")
    if config.mix_stage1 and not stage1_sequences:
        raise ConfigError("mix_stage1 requires stage1_sequences")
    torch.manual_seed(derive_seed(config.seed, "stage2-init"))
    model = StageDenoiser(config.denoiser_config())
    schedule = make_schedule(config.schedule_T)

    prepared = []
    for si, sample in enumerate(dataset):
        images = torch.as_tensor(sample.images, dtype=torch.float32)
        cond_img = images[sample.condition_index]
        variants = []
        pool = max(1, config.degrade_pool)
        for v in range(pool):
            variants.append(
                _degraded_variant(
                    sample.images, derive_seed(config.seed, f"pool-{si}-{v}"),
                    config, ae, depth_model,
                )
            )
        if config.mix_stage1 and stage1_sequences:
            gen = np.asarray(stage1_sequences[si % len(stage1_sequences)], dtype=np.float32)
            depth = estimate_depth(depth_model, gen)
            h, w = sample.images.shape[-2:]
            up = F.interpolate(torch.as_tensor(gen), size=(h, w), mode="bilinear",
                               align_corners=False)
            variants.append(
                (encode_sequence(ae, up),
                 torch.as_tensor(depth, dtype=torch.float32).clamp(0, 1)[:, None])
            )
        prepared.append(
            {
                "z0": encode_sequence(ae, images),
                "ref": encode_latent(ae, cond_img),
                "cond_img": cond_img,
                "elevation": float(sample.elevation_deg),
                "variants": variants,
            }
        )

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    ema = _Ema(model, config.ema_decay)
    picker = torch_gen(config.seed, "stage2-batch")
    curve: list[tuple[int, float]] = []

    model.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(prepared), (config.batch_size,), generator=picker)
        batch = []
        for i in idx.tolist():
            item = prepared[i]
            if config.degrade_pool == 0:
                prev, depth = _degraded_variant(
                    dataset[i].images, derive_seed(config.seed, f"fresh-{step}-{i}"),
                    config, ae, depth_model,
                )
            else:
                which = int(torch.randint(0, len(item["variants"]), (1,), generator=picker))
                prev, depth = item["variants"][which]
            cond = ConditionSet(
                reference_latent=item["ref"],
                semantic_tokens=model.semantic(item["cond_img"]),
                elevation_deg=item["elevation"],
                prev_latents=prev.data,
                depth_maps=depth,
            )
            batch.append((item["z0"], cond))
        opt.zero_grad()
        loss = training_loss(
            lambda z_t, t, c: denoise(model, z_t, t, c),
            batch,
            schedule,
            seed=derive_seed(config.seed, f"stage2-step{step}"),
        )
        loss.backward()
        if not math.isfinite(loss.item()):
            raise NumericError(f"stage-2 loss non-finite at step {step}")
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        ema.update(model)
        curve.append((step, loss.item()))
    return ema.module_copy(model), curve


def refine_orbit(
    lr_sequence,
    condition_image,
    elevation_deg: float,
    model: StageDenoiser,
    ae: LatentAutoencoder,
    depth_model: DepthRegressor,
    seed: int = 0,
    steps: int = 50,
    schedule: Schedule | None = None,
) -> np.ndarray:
    """Refine an (N, 3, H, W) sequence to (N, 3, 2H, 2W).

    Depth is estimated on the low-resolution input; the input is
    bilinearly upsampled and encoded as the previous-latent condition.
    """
    if model.stage != "stage2":
        raise ConditionError(f"refine_orbit needs stage2 parameters, got {model.stage}")
    lr = np.asarray(lr_sequence, dtype=np.float32)
    if lr.ndim != 4 or lr.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) sequence, got {lr.shape}")
    n, _, h, w = lr.shape
    cond_img = torch.as_tensor(np.asarray(condition_image), dtype=torch.float32)
    if tuple(cond_img.shape[-2:]) != (2 * h, 2 * w):
        raise ConfigError(
            f"condition image {tuple(cond_img.shape[-2:])} must be at the output "
            f"resolution {(2 * h, 2 * w)}"
        )
    schedule = schedule or make_schedule(1000)
    depth = estimate_depth(depth_model, lr)
    with torch.no_grad():
        up = F.interpolate(torch.as_tensor(lr), size=(2 * h, 2 * w), mode="bilinear",
                           align_corners=False)
        prev = encode_sequence(ae, up)
        ref = encode_latent(ae, cond_img)
        cond = ConditionSet(
            reference_latent=ref,
            semantic_tokens=model.semantic(cond_img),
            elevation_deg=float(elevation_deg),
            prev_latents=prev.data,
            depth_maps=torch.as_tensor(depth, dtype=torch.float32).clamp(0, 1)[:, None],
        )
        z = sample_loop(
            lambda z_t, t, c: denoise(model, z_t, t, c),
            cond,
            schedule,
            steps=steps,
            seed=seed,
            shape=prev.shape,
        )
        frames = ae.decode_clamped(z.data)
    return frames.numpy()
