"""Conditional sequence denoiser and its conditioning plumbing.

The denoiser is a small frame-wise convolutional encoder-decoder with
temporal self-attention across the N frames and cross-attention against
semantic tokens of the condition image. Conditioning follows the channel
layout [noisy latent | reference latent | previous latents | depth], with
timestep and elevation embeddings added to every block's feature bias.

A plain (non-variational) convolutional autoencoder maps images to 4-
channel latents at 1/4 resolution; it is pre-trained once and frozen
before either diffusion stage trains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .diffcore import LatentSequence
from .errors import CheckpointError, ConditionError, ConfigError, ShapeError

__all__ = [
    "AutoencoderConfig",
    "AutoencoderTrainConfig",
    "LatentAutoencoder",
    "train_autoencoder",
    "encode_latent",
    "decode_latent",
    "encode_sequence",
    "decode_sequence",
    "sinusoidal_embed",
    "semantic_embed",
    "ConditionSet",
    "DenoiserConfig",
    "StageDenoiser",
    "assemble_input",
    "denoise",
    "save_autoencoder",
    "load_autoencoder",
    "save_denoiser",
    "load_denoiser",
    "param_digest",
]

DOWNSAMPLE = 4
LATENT_CHANNELS = 4


# ---------------------------------------------------------------------------
# latent autoencoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AutoencoderConfig:
    base_width: int = 32
    latent_channels: int = LATENT_CHANNELS


class _AEResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class LatentAutoencoder(nn.Module):
    """4x-downsampling conv autoencoder with a stored latent scale.

    encode() divides raw encoder output by `latent_scale` so downstream
    diffusion sees roughly unit-variance latents; decode() undoes it.
    """

    def __init__(self, config: AutoencoderConfig = AutoencoderConfig()):
        super().__init__()
        self.config = config
        w = config.base_width
        c = config.latent_channels
        self.enc = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1),
            _AEResBlock(w),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            _AEResBlock(2 * w),
            nn.GroupNorm(8, 2 * w),
            nn.SiLU(),
            nn.Conv2d(2 * w, c, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(c, 2 * w, 3, padding=1),
            _AEResBlock(2 * w),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1),
            _AEResBlock(w),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w, w, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, 3, 3, padding=1),
        )
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-1] % DOWNSAMPLE or images.shape[-2] % DOWNSAMPLE:
            raise ShapeError(
                f"image size {tuple(images.shape[-2:])} not divisible by {DOWNSAMPLE}"
            )
        return self.enc(images) / self.latent_scale

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return self.dec(latents * self.latent_scale)

    def decode_clamped(self, latents: torch.Tensor) -> torch.Tensor:
        return self.dec(latents * self.latent_scale).clamp(0.0, 1.0)


@dataclass(frozen=True)
class AutoencoderTrainConfig:
    base_width: int = 32
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 8
    latent_penalty: float = 1e-4
    seed: int = 0


def train_autoencoder(
    frames: "np.ndarray", config: AutoencoderTrainConfig = AutoencoderTrainConfig()
) -> LatentAutoencoder:
    """Pre-train the latent autoencoder on a stack of (B, 3, H, W) frames.

    MSE reconstruction plus a small latent magnitude penalty; afterwards
    the latent scale buffer is set to the raw latent standard deviation so
    encode() emits roughly unit-variance latents. Deterministic per seed.
    """
    from .errors import NumericError
    from .seeding import derive_seed, torch_gen

    if len(frames) == 0:
        raise ConfigError("autoencoder training set is empty")
    torch.manual_seed(derive_seed(config.seed, "ae-init"))
    ae = LatentAutoencoder(AutoencoderConfig(base_width=config.base_width))
    data = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    opt = torch.optim.Adam(ae.parameters(), lr=config.lr)
    picker = torch_gen(config.seed, "ae-batch")
    ae.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(data), (config.batch_size,), generator=picker)
        batch = data[idx]
        z = ae.enc(batch)
        recon = ae.dec(z)
        loss = F.mse_loss(recon, batch) + config.latent_penalty * (z**2).mean()
        if not torch.isfinite(loss):
            raise NumericError(f"autoencoder loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    ae.eval()
    with torch.no_grad():
        sample = data[: min(len(data), 64)]
        ae.latent_scale.fill_(ae.enc(sample).std().clamp_min(1e-6))
    return ae


def _as_image_tensor(image, dtype, batched=False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(image), dtype=dtype)
    if t.ndim == 3 and not batched:
        t = t[None]
    if t.ndim != 4 or t.shape[1] != 3:
        raise ShapeError(f"expected (3, H, W) image(s), got {tuple(t.shape)}")
    return t


def encode_latent(ae: LatentAutoencoder, image) -> torch.Tensor:
    """Encode one (3, H, W) image to a (C, H/4, W/4) latent."""
    dtype = next(ae.parameters()).dtype
    with torch.no_grad():
        return ae.encode(_as_image_tensor(image, dtype))[0]


def decode_latent(ae: LatentAutoencoder, latent: torch.Tensor) -> torch.Tensor:
    """Decode one latent back to a (3, H, W) image, clamped to [0, 1]."""
    with torch.no_grad():
        return ae.decode_clamped(latent[None])[0]


def encode_sequence(ae: LatentAutoencoder, images) -> LatentSequence:
    """Encode an (N, 3, H, W) stack of frames."""
    dtype = next(ae.parameters()).dtype
    with torch.no_grad():
        z = ae.encode(_as_image_tensor(images, dtype, batched=True))
    return LatentSequence(z)


def decode_sequence(ae: LatentAutoencoder, z: LatentSequence) -> torch.Tensor:
    with torch.no_grad():
        return ae.decode_clamped(z.data)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def sinusoidal_embed(value: float, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Interleaved sin/cos embedding at geometrically spaced frequencies.

    Frequencies follow the usual timestep-embedding convention with base
    period 10,000; the result has L2 norm sqrt(dim/2).
    """
    if dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    angles = float(value) * freqs
    out = torch.empty(dim, dtype=torch.float64)
    out[0::2] = torch.sin(angles)
    out[1::2] = torch.cos(angles)
    return out.to(dtype)


class SemanticEncoder(nn.Module):
    """Conv encoder emitting n_tokens tokens of dim token_dim.

    Inputs are resized to 64x64 and reduced to a 4x4 feature map whose
    cells become the tokens (cross-attention keys/values).
    """

    def __init__(self, n_tokens: int = 16, token_dim: int = 64):
        super().__init__()
        if n_tokens != 16:
            raise ConfigError("semantic encoder emits a 4x4 grid: n_tokens must be 16")
        self.n_tokens = n_tokens
        self.token_dim = token_dim
        widths = [16, 32, 48, token_dim]
        layers = []
        prev = 3
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.GroupNorm(8, w), nn.SiLU()]
            prev = w
        layers.append(nn.Conv2d(prev, token_dim, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim == 3:
            image = image[None]
        x = F.interpolate(image, size=(64, 64), mode="bilinear", align_corners=False)
        feat = self.net(x)  # (1, d, 4, 4)
        return feat[0].reshape(self.token_dim, -1).T  # (16, d)


def semantic_embed(image, model: "StageDenoiser") -> torch.Tensor:
    """Token matrix of the condition image under a stage's trained encoder."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return model.semantic(_as_image_tensor(image, dtype))


# ---------------------------------------------------------------------------
# condition set and input assembly
# ---------------------------------------------------------------------------

@dataclass
class ConditionSet:
    """Everything the denoiser is conditioned on besides the timestep.

    Stage-1 conditions carry only the reference latent, tokens, and
    elevation; stage-2 conditions additionally carry the previous-stage
    latents and the depth maps.
    """

    reference_latent: torch.Tensor  # (C, h, w)
    semantic_tokens: torch.Tensor  # (M, d)
    elevation_deg: float
    prev_latents: torch.Tensor | None = None  # (N, C, h, w)
    depth_maps: torch.Tensor | None = None  # (N, 1, H', W')

    def __post_init__(self):
        if (self.prev_latents is None) != (self.depth_maps is None):
            raise ConditionError(
                "stage-2 conditions need both prev_latents and depth_maps; "
                "stage-1 conditions need neither"
            )
        if self.depth_maps is not None:
            d = self.depth_maps
            if d.ndim != 4 or d.shape[1] != 1:
                raise ConditionError(f"depth_maps must be (N, 1, H, W), got {tuple(d.shape)}")
            if d.min() < 0.0 or d.max() > 1.0:
                raise ConditionError("depth values must lie in [0, 1]")

    @property
    def stage(self) -> str:
        return "stage2" if self.prev_latents is not None else "stage1"


def assemble_input(
    z_t: LatentSequence, cond: ConditionSet, include_depth: bool = True
) -> torch.Tensor:
    """Channel-concatenated denoiser input [z_t | reference | prev | depth].

    The reference latent is broadcast to all N frames; depth maps are
    area-average resized to the latent resolution before concatenation.
    """
    n, c, h, w = z_t.shape
    ref = cond.reference_latent
    if ref.shape[-2:] != (h, w):
        raise ShapeError(
            f"reference latent {tuple(ref.shape)} does not match latent size {(h, w)}"
        )
    parts = [z_t.data, ref[None].expand(n, -1, -1, -1)]
    if cond.stage == "stage2":
        prev = cond.prev_latents
        if prev.shape != z_t.shape:
            raise ShapeError(
                f"prev latents {tuple(prev.shape)} do not match z_t {z_t.shape}"
            )
        parts.append(prev)
        if include_depth:
            depth = cond.depth_maps.to(z_t.data.dtype)
            if depth.shape[0] != n:
                raise ShapeError(f"depth frame count {depth.shape[0]} != {n}")
            if depth.shape[-2:] != (h, w):
                depth = F.adaptive_avg_pool2d(depth, (h, w))
            parts.append(depth)
    return torch.cat(parts, dim=1)


# ---------------------------------------------------------------------------
# denoiser blocks
# ---------------------------------------------------------------------------

class _ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, ch_out)
        self.norm2 = nn.GroupNorm(8, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[None, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TemporalAttention(nn.Module):
    """Self-attention across the N frames at every spatial location.

    Frame order enters through a sinusoidal position code added before
    the qkv projection; scaling the output projection to zero makes the
    block an exact identity (used by the locality probe).
    """

    def __init__(self, ch: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.out = nn.Linear(ch, ch)
        with torch.no_grad():
            self.out.weight.mul_(1e-2)
            self.out.bias.zero_()

    def forward(self, x):
        n, c, h, w = x.shape
        y = self.norm(x).permute(2, 3, 0, 1).reshape(h * w, n, c)
        idx = torch.arange(n, dtype=torch.float64)
        pos = torch.stack([sinusoidal_embed(i.item(), c, x.dtype) for i in idx])
        y = y + pos[None]
        q, k, v = self.qkv(y).chunk(3, dim=-1)
        hd = c // self.heads
        q = q.reshape(h * w, n, self.heads, hd).transpose(1, 2)
        k = k.reshape(h * w, n, self.heads, hd).transpose(1, 2)
        v = v.reshape(h * w, n, self.heads, hd).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        mixed = (att @ v).transpose(1, 2).reshape(h * w, n, c)
        mixed = self.out(mixed)
        return x + mixed.reshape(h, w, n, c).permute(2, 3, 0, 1)


class CrossAttention(nn.Module):
    """Per-frame cross-attention: features query the semantic tokens."""

    def __init__(self, ch: int, token_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, ch)
        self.q = nn.Linear(ch, ch)
        self.k = nn.Linear(token_dim, ch)
        self.v = nn.Linear(token_dim, ch)
        self.out = nn.Linear(ch, ch)
        with torch.no_grad():
            self.out.weight.mul_(1e-2)
            self.out.bias.zero_()

    def forward(self, x, tokens):
        n, c, h, w = x.shape
        y = self.norm(x).permute(0, 2, 3, 1).reshape(n, h * w, c)
        q = self.q(y)
        k = self.k(tokens)  # (M, c)
        v = self.v(tokens)
        hd = c // self.heads
        q = q.reshape(n, h * w, self.heads, hd).transpose(1, 2)
        k = k.reshape(-1, self.heads, hd).transpose(0, 1)[None]
        v = v.reshape(-1, self.heads, hd).transpose(0, 1)[None]
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        mixed = (att @ v).transpose(1, 2).reshape(n, h * w, c)
        mixed = self.out(mixed)
        return x + mixed.reshape(n, h, w, c).permute(0, 3, 1, 2)


@dataclass(frozen=True)
class DenoiserConfig:
    stage: str  # "stage1" | "stage2"
    latent_channels: int = LATENT_CHANNELS
    width: int = 64
    width_mid: int = 128
    emb_dim: int = 128
    n_tokens: int = 16
    token_dim: int = 64
    heads: int = 4
    use_depth: bool = True  # stage-2 only; False drops the depth channel

    def __post_init__(self):
        if self.stage not in ("stage1", "stage2"):
            raise ConfigError(f"stage must be stage1 or stage2, got {self.stage!r}")
        if self.width % 8 or self.width_mid % 8:
            raise ConfigError("widths must be divisible by 8 (group norm)")
        if self.emb_dim % 2:
            raise ConfigError("emb_dim must be even")

    @property
    def in_channels(self) -> int:
        c = self.latent_channels
        if self.stage == "stage1":
            return 2 * c
        return 3 * c + (1 if self.use_depth else 0)


class StageDenoiser(nn.Module):
    """Noise predictor for one stage, including its semantic encoder."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        w0, w1 = config.width, config.width_mid
        e = config.emb_dim
        c = config.latent_channels
        self.semantic = SemanticEncoder(config.n_tokens, config.token_dim)
        self.t_proj = nn.Linear(e, e)
        self.e_proj = nn.Linear(e, e)
        self.emb_mlp = nn.Sequential(nn.SiLU(), nn.Linear(e, e))
        self.in_conv = nn.Conv2d(config.in_channels, w0, 3, padding=1)
        self.res0a = _ResBlock(w0, w0, e)
        self.tattn0 = TemporalAttention(w0, config.heads)
        self.xattn0 = CrossAttention(w0, config.token_dim, config.heads)
        self.down = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.res1a = _ResBlock(w1, w1, e)
        self.tattn1 = TemporalAttention(w1, config.heads)
        self.xattn1 = CrossAttention(w1, config.token_dim, config.heads)
        self.res1b = _ResBlock(w1, w1, e)
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w1, w0, 3, padding=1)
        )
        self.fuse = nn.Conv2d(2 * w0, w0, 3, padding=1)
        self.res0b = _ResBlock(w0, w0, e)
        self.out_norm = nn.GroupNorm(8, w0)
        self.out_conv = nn.Conv2d(w0, c, 3, padding=1)
        with torch.no_grad():
            self.out_conv.weight.mul_(1e-2)
            self.out_conv.bias.zero_()

    @property
    def stage(self) -> str:
        return self.config.stage

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embedding(self, t: int, elevation_deg: float) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        te = sinusoidal_embed(float(t), self.config.emb_dim, dtype)
        ee = sinusoidal_embed(float(elevation_deg), self.config.emb_dim, dtype)
        return self.emb_mlp(self.t_proj(te) + self.e_proj(ee))

    def forward(self, x: torch.Tensor, emb: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        h0 = self.in_conv(x)
        h0 = self.res0a(h0, emb)
        h0 = self.tattn0(h0)
        h0 = self.xattn0(h0, tokens)
        h1 = self.down(h0)
        h1 = self.res1a(h1, emb)
        h1 = self.tattn1(h1)
        h1 = self.xattn1(h1, tokens)
        h1 = self.res1b(h1, emb)
        u = self.up(h1)
        u = self.fuse(torch.cat([u, h0], dim=1))
        u = self.res0b(u, emb)
        return self.out_conv(F.silu(self.out_norm(u)))


def denoise(
    model: StageDenoiser, z_t: LatentSequence, t: int, cond: ConditionSet
) -> LatentSequence:
    """Predicted noise for a latent sequence under a condition set."""
    if model.stage != cond.stage:
        raise ConditionError(
            f"{model.stage} parameters applied to {cond.stage} conditions"
        )
    x = assemble_input(z_t, cond, include_depth=model.config.use_depth)
    emb = model.embedding(t, cond.elevation_deg)
    out = model(x, emb, cond.semantic_tokens)
    return LatentSequence(out)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _save_module(path, module: nn.Module, config_entries: dict[str, float]) -> None:
    arrays = {f"config/{k}": np.asarray(float(v)) for k, v in config_entries.items()}
    arrays["format/version"] = np.asarray(1.0)
    for name, tensor in module.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy().astype(np.float64)
    checkpoint.save_arrays(path, arrays)


def _split_entries(arrays) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    config = {}
    params = {}
    for name, arr in arrays.items():
        if name.startswith("config/"):
            config[name[len("config/") :]] = float(arr.reshape(-1)[0])
        elif name.startswith("param/"):
            params[name[len("param/") :]] = arr
    return config, params


def _load_into(module: nn.Module, params: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    if set(state) != set(params):
        missing = set(state) - set(params)
        extra = set(params) - set(state)
        raise CheckpointError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    module.load_state_dict(
        {k: torch.as_tensor(v, dtype=state[k].dtype).reshape(state[k].shape) for k, v in params.items()}
    )


def save_autoencoder(path, ae: LatentAutoencoder) -> None:
    _save_module(path, ae, {
        "kind": 1.0,
        "base_width": ae.config.base_width,
        "latent_channels": ae.config.latent_channels,
    })


def load_autoencoder(path) -> LatentAutoencoder:
    config, params = _split_entries(checkpoint.load_arrays(path))
    if config.get("kind") != 1.0:
        raise CheckpointError(f"{path} is not an autoencoder checkpoint")
    ae = LatentAutoencoder(AutoencoderConfig(
        base_width=int(config["base_width"]),
        latent_channels=int(config["latent_channels"]),
    ))
    _load_into(ae, params)
    ae.eval()
    return ae


def save_denoiser(path, model: StageDenoiser) -> None:
    cfg = model.config
    _save_module(path, model, {
        "kind": 2.0,
        "stage": 1.0 if cfg.stage == "stage1" else 2.0,
        "latent_channels": cfg.latent_channels,
        "width": cfg.width,
        "width_mid": cfg.width_mid,
        "emb_dim": cfg.emb_dim,
        "n_tokens": cfg.n_tokens,
        "token_dim": cfg.token_dim,
        "heads": cfg.heads,
        "use_depth": 1.0 if cfg.use_depth else 0.0,
    })


def load_denoiser(path) -> StageDenoiser:
    config, params = _split_entries(checkpoint.load_arrays(path))
    if config.get("kind") != 2.0:
        raise CheckpointError(f"{path} is not a denoiser checkpoint")
    cfg = DenoiserConfig(
        stage="stage1" if config["stage"] == 1.0 else "stage2",
        latent_channels=int(config["latent_channels"]),
        width=int(config["width"]),
        width_mid=int(config["width_mid"]),
        emb_dim=int(config["emb_dim"]),
        n_tokens=int(config["n_tokens"]),
        token_dim=int(config["token_dim"]),
        heads=int(config["heads"]),
        use_depth=bool(config["use_depth"]),
    )
    model = StageDenoiser(cfg)
    _load_into(model, params)
    model.eval()
    return model


def param_digest(module: nn.Module) -> str:
    """Deterministic digest of all parameters and buffers."""
    import hashlib

    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().astype(np.float64).tobytes())
    return h.hexdigest()
